//! Zero-order-hold discretization and the selective scan.
//!
//! The state matrix is diagonal, so discretization is elementwise:
//! `Ā = exp(ΔA)` and `B̄ = (ΔA)⁻¹(exp(ΔA) − 1)·ΔB`. The scan runs strictly
//! left to right with `h₀ = 0`:
//!
//! ```text
//! h_t = Ā_t ⊙ h_{t-1} + B̄_t u_t
//! y_t = C_t h_t + skip ⊙ u_t
//! ```
//!
//! where `Δ_t`, `B_t` and `C_t` are projections of the input `u_t`.

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{join, visit_mat, visit_mat_mut, Init, Parameters};
use crate::scalar::{softplus, Scalar};
use crate::tensor::Mat;

/// Below this |ΔA| the input gain uses its Taylor expansion.
pub const TAYLOR_THRESHOLD: f64 = 1e-6;

/// `(exp(x) − 1) / x`, exact form.
pub fn zoh_gain_exact<T: Scalar>(x: T) -> T {
    x.exp_m1() / x
}

/// `(exp(x) − 1) / x ≈ 1 + x/2 + x²/6`.
pub fn zoh_gain_taylor<T: Scalar>(x: T) -> T {
    T::one() + x * (T::lit(0.5) + x / T::lit(6.0))
}

#[inline]
fn zoh_unchecked<T: Scalar>(a: T, b: T, delta: T) -> (T, T) {
    let x = delta * a;
    let gain = if x.abs().primal() < TAYLOR_THRESHOLD {
        zoh_gain_taylor(x)
    } else {
        zoh_gain_exact(x)
    };
    (x.exp(), gain * delta * b)
}

/// Discretizes one diagonal entry `a` with input coefficient `b` over step
/// `delta`. Returns `(Ā, B̄)`.
pub fn zoh_discretize<T: Scalar>(a: T, b: T, delta: T) -> Result<(T, T)> {
    if !(delta.primal() > 0.0) {
        return Err(Error::param("delta", "step must be positive"));
    }
    if a.primal() > 0.0 {
        return Err(Error::param("A", "diagonal entries must be non-positive"));
    }
    Ok(zoh_unchecked(a, b, delta))
}

/// Hidden state `d_inner × d_state`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanState<T> {
    pub h: Mat<T>,
}

impl<T: Scalar> ScanState<T> {
    pub fn new(channels: usize, d_state: usize) -> Self {
        ScanState {
            h: Mat::zeros(channels, d_state),
        }
    }

    /// One recurrence step with pre-discretized coefficients, all shaped
    /// `channels × d_state` except `c` (`d_state`), `u` and `skip`
    /// (`channels`). Returns `y_t`.
    pub fn step(&mut self, a_bar: &Mat<T>, b_bar: &Mat<T>, c: &[T], u: &[T], skip: &[T]) -> Vec<T> {
        let (ch, ds) = self.h.shape();
        let mut y = Vec::with_capacity(ch);
        for k in 0..ch {
            let mut acc = skip[k] * u[k];
            for n in 0..ds {
                let h = a_bar[(k, n)] * self.h[(k, n)] + b_bar[(k, n)] * u[k];
                self.h[(k, n)] = h;
                acc += c[n] * h;
            }
            y.push(acc);
        }
        y
    }
}

/// How the state-matrix magnitudes are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateInit {
    /// `|A_kn| = n + 1`.
    Arange,
    /// `|A_kn|` log-spaced over `[0.5, 2.0]`.
    Spaced,
}

pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<T> {
    /// `log|A|`, `d_inner × d_state`; `A = −exp(a_log)`.
    pub a_log: Mat<T>,
    /// `d_inner → dt_rank + 2·d_state`, no bias.
    pub x_proj: Linear<T>,
    /// `dt_rank → d_inner` with bias (the Δ bias).
    pub dt_proj: Linear<T>,
    pub skip: Vec<T>,
    pub d_state: usize,
    pub dt_rank: usize,
}

impl<T: Scalar> SsmParams<T> {
    pub fn zeros(d_inner: usize, d_state: usize, dt_rank: usize) -> Self {
        SsmParams {
            a_log: Mat::zeros(d_inner, d_state),
            x_proj: Linear::zeros(d_inner, dt_rank + 2 * d_state, false),
            dt_proj: Linear::zeros(dt_rank, d_inner, true),
            skip: vec![T::zero(); d_inner],
            d_state,
            dt_rank,
        }
    }

    /// Random projections, Δ bias set so that `softplus(bias)` is
    /// log-uniform in `[DT_MIN, DT_MAX]`, skip = 1.
    pub fn init(init: &Init, name: &str, d_inner: usize, d_state: usize, dt_rank: usize, a: StateInit) -> Self {
        let a_log = Mat::from_fn(d_inner, d_state, |_, n| {
            let mag = match a {
                StateInit::Arange => (n + 1) as f64,
                StateInit::Spaced if d_state > 1 => 0.5 * 4f64.powf(n as f64 / (d_state - 1) as f64),
                StateInit::Spaced => 0.5,
            };
            T::lit(mag.ln())
        });
        let u: Vec<f64> = init.uniform(&join(name, "dt_proj.bias"), d_inner, 1.0);
        let dt_bias = u
            .into_iter()
            .map(|v| {
                let frac = 0.5 * (v + 1.0);
                let dt = (DT_MIN.ln() + frac * (DT_MAX.ln() - DT_MIN.ln())).exp();
                // inverse softplus
                T::lit(dt + (-(-dt).exp_m1()).ln())
            })
            .collect();
        let mut dt_proj = Linear::init(init, &join(name, "dt_proj"), dt_rank, d_inner, true);
        dt_proj.bias = Some(dt_bias);
        SsmParams {
            a_log,
            x_proj: Linear::init(init, &join(name, "x_proj"), d_inner, dt_rank + 2 * d_state, false),
            dt_proj,
            skip: vec![T::one(); d_inner],
            d_state,
            dt_rank,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.a_log.rows()
    }

    pub fn state_matrix(&self) -> Mat<T> {
        self.a_log.map(|v| -v.exp())
    }

    pub fn map<U: Scalar>(&self, f: &impl Fn(T) -> U) -> SsmParams<U> {
        SsmParams {
            a_log: self.a_log.map(f),
            x_proj: self.x_proj.map(f),
            dt_proj: self.dt_proj.map(f),
            skip: self.skip.iter().map(|&v| f(v)).collect(),
            d_state: self.d_state,
            dt_rank: self.dt_rank,
        }
    }
}

impl<T: Scalar> Parameters<T> for SsmParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        visit_mat(prefix, "a_log", &self.a_log, f);
        self.x_proj.visit(&join(prefix, "x_proj"), f);
        self.dt_proj.visit(&join(prefix, "dt_proj"), f);
        f(&join(prefix, "skip"), &[self.skip.len()], &self.skip);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        visit_mat_mut(prefix, "a_log", &mut self.a_log, f);
        self.x_proj.visit_mut(&join(prefix, "x_proj"), f);
        self.dt_proj.visit_mut(&join(prefix, "dt_proj"), f);
        let n = self.skip.len();
        f(&join(prefix, "skip"), &[n], &mut self.skip);
    }
}

/// Input-dependent scan over `u` (`L × d_inner`).
pub fn selective_scan<T: Scalar>(u: &Mat<T>, params: &SsmParams<T>) -> Result<Mat<T>> {
    let (len, ch) = u.shape();
    if len == 0 {
        return Err(Error::EmptyInput("selective_scan: sequence"));
    }
    if ch != params.d_inner() {
        return Err(Error::shape("selective_scan channels", params.d_inner(), ch));
    }
    let ds = params.d_state;
    let rank = params.dt_rank;
    let a = params.state_matrix();
    let proj = params.x_proj.forward(u)?;
    let dt = params.dt_proj.forward(&proj.columns(0, rank))?;

    let mut state = ScanState::new(ch, ds);
    let mut a_bar = Mat::zeros(ch, ds);
    let mut b_bar = Mat::zeros(ch, ds);
    let mut y = Mat::zeros(len, ch);
    for t in 0..len {
        let row = proj.row(t);
        let b = &row[rank..rank + ds];
        let c = &row[rank + ds..rank + 2 * ds];
        for k in 0..ch {
            let delta = softplus(dt[(t, k)]);
            for n in 0..ds {
                let (ab, bb) = zoh_unchecked(a[(k, n)], b[n], delta);
                a_bar[(k, n)] = ab;
                b_bar[(k, n)] = bb;
            }
        }
        let out = state.step(&a_bar, &b_bar, c, u.row(t), &params.skip);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                context: "selective_scan",
                step: t,
            });
        }
        y.row_mut(t).copy_from_slice(&out);
    }
    Ok(y)
}
