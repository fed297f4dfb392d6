//! Finite-difference checks of analytic gradients.
//!
//! Analytic gradients come either from a closed form or from forward-mode
//! dual numbers pushed through the generic implementation. The reference is
//! a central difference, swept over several steps; each coordinate keeps
//! its best step. Everything here runs in `f64`.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deform::{gaussian_weight, gaussian_weight_grad, gdr_apply, gdr_weight_grad, gdr_weights_shifted, gkr, GaussianKernelParams};
use crate::dual::Dual64;
use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::model::{Model, ModelConfig};
use crate::offset::{lcfa, offset_net, LcfaParams, OffsetNetParams};
use crate::params::{flatten, unflatten, Init, Parameters};
use crate::scalar::Scalar;
use crate::ssm::{selective_scan, zoh_discretize, SsmParams, StateInit};
use crate::tensor::Mat;
use crate::tpff::{tpff, FrequencyBlockParams, TriPathBundle};

pub const FD_STEPS: [f64; 5] = [1e-4, 1e-5, 1e-6, 1e-7, 1e-8];

/// Shifted indices closer than this to a half-integer are rejected.
pub const TIE_MARGIN: f64 = 1e-3;

pub const DEFAULT_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub op: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Index into the flat input of the coordinate with the largest
    /// relative error.
    pub worst_coordinate: usize,
    /// Step that gave the best estimate at the worst coordinate.
    pub step: f64,
    pub coordinates: usize,
    /// Coordinates whose gradient is too small for the FD to resolve (see
    /// [`fd_resolution`]); left out of the relative error.
    pub unresolved: usize,
}

/// Smallest gradient magnitude a central difference can pin down to
/// relative `tolerance` on a function of magnitude `value`, given the
/// largest step of the sweep: roundoff alone is about `ε·|f|/h`.
pub fn fd_resolution(value: f64, tolerance: f64) -> f64 {
    4.0 * f64::EPSILON * value.abs().max(1.0) / (FD_STEPS[0] * tolerance)
}

pub fn relative_error(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-12)
}

fn finite(v: f64, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric {
            context: "finite difference evaluation",
            step,
        })
    }
}

/// Central difference along coordinate `i`.
pub fn fd_partial(f: &dyn Fn(&[f64]) -> Result<f64>, x: &[f64], i: usize, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::param("h", "step must be positive"));
    }
    let mut y = x.to_vec();
    y[i] = x[i] + h;
    let up = finite(f(&y)?, i)?;
    y[i] = x[i] - h;
    let down = finite(f(&y)?, i)?;
    Ok((up - down) / (2.0 * h))
}

pub fn fd_gradient(f: &dyn Fn(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    (0..x.len()).map(|i| fd_partial(f, x, i, h)).collect()
}

/// Derivatives at `coords` by one dual pass per coordinate.
pub fn dual_gradient(f: &dyn Fn(&[Dual64]) -> Result<Dual64>, x: &[f64], coords: &[usize]) -> Result<Vec<f64>> {
    let mut xd: Vec<Dual64> = x.iter().map(|&v| Dual64::constant(v)).collect();
    coords
        .iter()
        .map(|&i| {
            xd[i] = Dual64::variable(x[i]);
            let out = f(&xd)?;
            xd[i] = Dual64::constant(x[i]);
            Ok(out.eps)
        })
        .collect()
}

/// Compares `analytic[k]` (the derivative along `coords[k]`) to the swept
/// central difference. Coordinates where both values sit below
/// [`fd_resolution`] are counted as unresolved instead of scored.
pub fn compare(
    op: &str,
    f: &dyn Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    coords: &[usize],
    analytic: &[f64],
    tolerance: f64,
) -> Result<GradReport> {
    if analytic.len() != coords.len() {
        return Err(Error::shape("compare analytic", coords.len(), analytic.len()));
    }
    let floor = fd_resolution(finite(f(x)?, 0)?, tolerance);
    let mut report = GradReport {
        op: op.to_string(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_coordinate: coords.first().copied().unwrap_or(0),
        step: FD_STEPS[0],
        coordinates: coords.len(),
        unresolved: 0,
    };
    for (&i, &a) in coords.iter().zip(analytic) {
        // (relative error, absolute error, step, fd value)
        let mut best = (f64::INFINITY, f64::INFINITY, FD_STEPS[0], 0.0);
        for &h in &FD_STEPS {
            let fd = fd_partial(f, x, i, h)?;
            let rel = relative_error(a, fd);
            if rel < best.0 {
                best = (rel, (a - fd).abs(), h, fd);
            }
        }
        report.max_abs_error = report.max_abs_error.max(best.1);
        if a.abs().max(best.3.abs()) < floor {
            report.unresolved += 1;
            continue;
        }
        if best.0 >= report.max_rel_error {
            report.max_rel_error = best.0;
            report.worst_coordinate = i;
            report.step = best.2;
        }
    }
    Ok(report)
}

/// [`compare`], failing when the worst relative error reaches `tolerance`.
pub fn check(
    op: &str,
    f: &dyn Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    coords: &[usize],
    analytic: &[f64],
    tolerance: f64,
) -> Result<GradReport> {
    let r = compare(op, f, x, coords, analytic, tolerance)?;
    if r.max_rel_error < tolerance {
        Ok(r)
    } else {
        Err(Error::GradCheck {
            op: r.op,
            rel_error: r.max_rel_error,
            coordinate: r.worst_coordinate,
            tolerance,
        })
    }
}

/// True when every shifted index keeps [`TIE_MARGIN`] away from a
/// half-integer, where reordering weights switch between targets.
pub fn away_from_ties(shifted: &[f64]) -> bool {
    shifted.iter().all(|s| (s - s.floor() - 0.5).abs() > TIE_MARGIN)
}

/// Shifted indices `i + u_i`, `u_i` uniform in `±amplitude`, redrawn until
/// [`away_from_ties`] accepts them.
pub fn sample_shifted_index(rng: &mut impl Rng, n: usize, amplitude: f64) -> Vec<f64> {
    loop {
        let s: Vec<f64> = (0..n).map(|i| i as f64 + rng.gen_range(-amplitude..=amplitude)).collect();
        if away_from_ties(&s) {
            return s;
        }
    }
}

/// An objective the checks can evaluate at any scalar type.
pub trait Objective: Send + Sync + 'static {
    fn eval<T: Scalar>(&self, x: &[T]) -> Result<T>;
}

type ValueFn = Box<dyn Fn(&[f64]) -> Result<f64> + Send + Sync>;
type DualFn = Box<dyn Fn(&[Dual64]) -> Result<Dual64> + Send + Sync>;
type ClosedFn = Box<dyn Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync>;

enum Analytic {
    Dual(DualFn),
    /// Full gradient in closed form.
    Closed(ClosedFn),
}

/// A scalar function, an evaluation point and the coordinates to check.
pub struct Probe {
    pub name: &'static str,
    pub x: Vec<f64>,
    pub coords: Vec<usize>,
    pub tolerance: f64,
    value: ValueFn,
    analytic: Analytic,
}

impl Probe {
    pub fn from_objective<O: Objective>(name: &'static str, x: Vec<f64>, coords: Vec<usize>, tolerance: f64, obj: O) -> Self {
        let a = Arc::new(obj);
        let b = Arc::clone(&a);
        Probe {
            name,
            x,
            coords,
            tolerance,
            value: Box::new(move |v| a.eval(v)),
            analytic: Analytic::Dual(Box::new(move |v| b.eval(v))),
        }
    }

    pub fn closed_form(
        name: &'static str,
        x: Vec<f64>,
        tolerance: f64,
        value: impl Fn(&[f64]) -> Result<f64> + Send + Sync + 'static,
        gradient: impl Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync + 'static,
    ) -> Self {
        Probe {
            name,
            coords: (0..x.len()).collect(),
            x,
            tolerance,
            value: Box::new(value),
            analytic: Analytic::Closed(Box::new(gradient)),
        }
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        (self.value)(x)
    }

    pub fn analytic_gradient(&self) -> Result<Vec<f64>> {
        match &self.analytic {
            Analytic::Dual(f) => dual_gradient(f.as_ref(), &self.x, &self.coords),
            Analytic::Closed(g) => {
                let full = g(&self.x)?;
                if full.len() != self.x.len() {
                    return Err(Error::shape("closed-form gradient", self.x.len(), full.len()));
                }
                Ok(self.coords.iter().map(|&i| full[i]).collect())
            }
        }
    }

    pub fn report(&self) -> Result<GradReport> {
        let a = self.analytic_gradient()?;
        compare(self.name, &|v| self.value(v), &self.x, &self.coords, &a, self.tolerance)
    }

    pub fn check(&self) -> Result<GradReport> {
        let a = self.analytic_gradient()?;
        check(self.name, &|v| self.value(v), &self.x, &self.coords, &a, self.tolerance)
    }
}

fn lit_mat<T: Scalar>(m: &Mat<f64>) -> Mat<T> {
    m.map(T::lit)
}

fn weighted_sum<T: Scalar>(m: &Mat<T>, w: &Mat<f64>) -> Result<T> {
    if m.shape() != w.shape() {
        return Err(Error::shape("loss weights", format!("{:?}", m.shape()), format!("{:?}", w.shape())));
    }
    Ok(m.as_slice().iter().zip(w.as_slice()).map(|(&a, &b)| a * T::lit(b)).sum())
}

fn random_mat(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Mat<f64> {
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound))
}

/// Fills a parameter set of type `T` from a flat `f64`-shaped template and
/// a slice of `T` values.
fn load<T: Scalar, P: Parameters<T>>(mut template: P, values: &[T]) -> Result<P> {
    unflatten(&mut template, values)?;
    Ok(template)
}

/// `Σ w ⊙ resampled` over offsets, features and the kernel scale.
pub struct GkrObjective {
    pub centers: Vec<Point<f64>>,
    pub channels: usize,
    pub k_r: usize,
    pub weights: Mat<f64>,
}

impl Objective for GkrObjective {
    fn eval<T: Scalar>(&self, x: &[T]) -> Result<T> {
        let n = self.centers.len();
        let c = self.channels;
        let dp = Mat::from_vec(n, 3, x[..3 * n].to_vec())?;
        let f = Mat::from_vec(n, c, x[3 * n..3 * n + n * c].to_vec())?;
        let sigma = x[3 * n + n * c];
        let cloud = PointCloud::new(self.centers.iter().map(|p| p.map(T::lit)).collect())?;
        let res = gkr(&cloud, &f, &dp, self.k_r, &GaussianKernelParams::with_sigma(sigma)?)?;
        weighted_sum(&res.resampled, &self.weights)
    }
}

/// LCFA followed by the offset network, over both parameter sets.
pub struct OffsetObjective {
    pub features: Mat<f64>,
    pub centers: Vec<Point<f64>>,
    pub radius: f64,
    pub k_q: usize,
    pub lcfa: LcfaParams<f64>,
    pub offset: OffsetNetParams<f64>,
    pub weights: Mat<f64>,
}

impl Objective for OffsetObjective {
    fn eval<T: Scalar>(&self, x: &[T]) -> Result<T> {
        let split = crate::params::param_count(&self.lcfa);
        let lp = load(self.lcfa.map(&T::lit), &x[..split])?;
        let op = load(self.offset.map(&T::lit), &x[split..])?;
        let centers: Vec<Point<T>> = self.centers.iter().map(|p| p.map(T::lit)).collect();
        let ctx = lcfa(&lit_mat(&self.features), &centers, T::lit(self.radius), self.k_q, &lp)?;
        let field = offset_net(&ctx, &op)?;
        let n = field.len();
        let dt = Mat::from_vec(n, 1, field.delta_t)?;
        weighted_sum(&Mat::hcat(&[&field.delta_p, &dt])?, &self.weights)
    }
}

/// Fusion over the three branch inputs and the fusion parameters.
pub struct TpffObjective {
    pub len: usize,
    pub channels: usize,
    pub params: FrequencyBlockParams<f64>,
    pub weights: Mat<f64>,
}

impl Objective for TpffObjective {
    fn eval<T: Scalar>(&self, x: &[T]) -> Result<T> {
        let m = self.len * self.channels;
        let part = |k: usize| Mat::from_vec(self.len, self.channels, x[k * m..(k + 1) * m].to_vec());
        let bundle = TriPathBundle::new(part(0)?, part(1)?, part(2)?)?;
        let p = load(self.params.map(&T::lit), &x[3 * m..])?;
        weighted_sum(&tpff(&bundle, &p)?, &self.weights)
    }
}

/// `c₀·Ā + c₁·B̄` over `(a, b, Δ)`.
pub struct ZohObjective {
    pub coeffs: [f64; 2],
}

impl Objective for ZohObjective {
    fn eval<T: Scalar>(&self, x: &[T]) -> Result<T> {
        let (ab, bb) = zoh_discretize(x[0], x[1], x[2])?;
        Ok(ab * T::lit(self.coeffs[0]) + bb * T::lit(self.coeffs[1]))
    }
}

/// Selective scan over its input sequence and parameters.
pub struct ScanObjective {
    pub len: usize,
    pub params: SsmParams<f64>,
    pub weights: Mat<f64>,
}

impl Objective for ScanObjective {
    fn eval<T: Scalar>(&self, x: &[T]) -> Result<T> {
        let c = self.params.d_inner();
        let m = self.len * c;
        let u = Mat::from_vec(self.len, c, x[..m].to_vec())?;
        let p = load(self.params.map(&T::lit), &x[m..])?;
        weighted_sum(&selective_scan(&u, &p)?, &self.weights)
    }
}

/// Embedding plus stages over every model parameter, for a fixed cloud.
pub struct ModelObjective {
    pub model: Model<f64>,
    pub cloud: PointCloud<f64>,
    pub weights: Mat<f64>,
}

impl ModelObjective {
    /// Toy configuration on a fixed 32-point cloud.
    pub fn toy(seed: u64) -> Result<Self> {
        let model = Model::init(seed, ModelConfig::toy())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let pts = (0..32)
            .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
            .collect();
        let n = model.config.embed.n_groups;
        let d = model.config.embed.dim;
        let weights = random_mat(&mut rng, n + 1, d, 1.0);
        Ok(ModelObjective {
            model,
            cloud: PointCloud::new(pts)?,
            weights,
        })
    }
}

impl Objective for ModelObjective {
    fn eval<T: Scalar>(&self, x: &[T]) -> Result<T> {
        let m = load(self.model.map(&T::lit), x)?;
        let cloud = self.cloud.map(T::lit);
        let out = m.forward(&cloud)?;
        let mut total = T::zero();
        for o in &out {
            total += weighted_sum(o.tokens(), &self.weights)?;
        }
        Ok(total)
    }
}

pub const OPS: [&str; 9] = [
    "gaussian_weight",
    "gdr_weights",
    "gdr_apply",
    "gkr",
    "offset_net",
    "tpff",
    "zoh",
    "selective_scan",
    "stage",
];

/// `Σ c_ij W_ij` over the shifted indices, with the closed-form gradient.
fn gdr_probe(name: &'static str, s: Vec<f64>, sigma: f64, c: Mat<f64>) -> Probe {
    let c = Arc::new(c);
    let cg = Arc::clone(&c);
    Probe::closed_form(
        name,
        s,
        DEFAULT_TOLERANCE,
        move |x| {
            let r = gdr_weights_shifted(x.to_vec(), sigma)?;
            weighted_sum(&r.matrix, &c)
        },
        move |x| {
            // W_ij depends on s_i alone
            let g = gdr_weight_grad(&gdr_weights_shifted(x.to_vec(), sigma)?);
            Ok((0..x.len()).map(|i| g.row(i).iter().zip(cg.row(i)).map(|(a, b)| a * b).sum()).collect())
        },
    )
}

/// Builds the probe for `op`, seeded deterministically.
pub fn probe(op: &str, seed: u64) -> Result<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Init::new(seed);
    Ok(match op {
        "gaussian_weight" => Probe::closed_form(
            "gaussian_weight",
            vec![1.0, 1.0],
            DEFAULT_TOLERANCE,
            |x| gaussian_weight(x[0], x[1]),
            |x| {
                let (d, s) = (x[0], x[1]);
                Ok(vec![gaussian_weight_grad(d, s)?, d * d / (s * s * s) * gaussian_weight(d, s)?])
            },
        ),
        "gdr_weights" => {
            let s = sample_shifted_index(&mut rng, 6, 0.9);
            let w = random_mat(&mut rng, 6, 6, 1.0);
            gdr_probe("gdr_weights", s, 0.2, w)
        }
        "gdr_apply" => {
            // Σ (W·F) = Σ_ij W_ij Σ_c F_jc
            let s = sample_shifted_index(&mut rng, 6, 0.9);
            let f = random_mat(&mut rng, 6, 3, 1.0);
            let row_sums: Vec<f64> = (0..6).map(|j| f.row(j).iter().sum()).collect();
            let p = gdr_probe("gdr_apply", s, 0.2, Mat::from_fn(6, 6, |_, j| row_sums[j]));
            Probe {
                value: Box::new(move |x| Ok(gdr_apply(&gdr_weights_shifted(x.to_vec(), 0.2)?, &f)?.as_slice().iter().sum())),
                ..p
            }
        }
        "gkr" => {
            let n = 12;
            let centers: Vec<Point<f64>> = (0..n)
                .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
                .collect();
            let c = 3;
            let mut x: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(-0.05..0.05)).collect();
            x.extend((0..n * c).map(|_| rng.gen_range(-1.0..1.0)));
            x.push(0.4);
            let weights = random_mat(&mut rng, n, c, 1.0);
            let coords = (0..x.len()).collect();
            Probe::from_objective("gkr", x, coords, DEFAULT_TOLERANCE, GkrObjective { centers, channels: c, k_r: 3, weights })
        }
        "offset_net" => {
            let (n, d) = (10, 8);
            let centers: Vec<Point<f64>> = (0..n)
                .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
                .collect();
            let features = random_mat(&mut rng, n, d, 1.0);
            let lp = LcfaParams::init(&init, "lcfa", d);
            let op = OffsetNetParams::init(&init, "offset", d, 5)?;
            let mut x = flatten(&lp);
            x.extend(flatten(&op));
            let weights = random_mat(&mut rng, n, 4, 1.0);
            let coords = (0..x.len()).collect();
            let obj = OffsetObjective {
                features,
                centers,
                radius: 0.5,
                k_q: 4,
                lcfa: lp,
                offset: op,
                weights,
            };
            Probe::from_objective("offset_net", x, coords, DEFAULT_TOLERANCE, obj)
        }
        "tpff" => {
            let (len, ch) = (8, 8);
            let params = FrequencyBlockParams::init(&init, "fusion", ch, 4)?;
            let mut x: Vec<f64> = (0..3 * len * ch).map(|_| rng.gen_range(-1.0..1.0)).collect();
            x.extend(flatten(&params));
            let weights = random_mat(&mut rng, len, ch, 1.0);
            let coords = (0..x.len()).collect();
            let obj = TpffObjective {
                len,
                channels: ch,
                params,
                weights,
            };
            Probe::from_objective("tpff", x, coords, DEFAULT_TOLERANCE, obj)
        }
        "zoh" => Probe::from_objective(
            "zoh",
            vec![-0.7, 0.4, 0.3],
            vec![0, 1, 2],
            DEFAULT_TOLERANCE,
            ZohObjective { coeffs: [1.3, 0.6] },
        ),
        "selective_scan" => {
            let (len, ch) = (8, 4);
            let params = SsmParams::init(&init, "ssm", ch, 4, 1, StateInit::Arange);
            let mut x: Vec<f64> = (0..len * ch).map(|_| rng.gen_range(-1.0..1.0)).collect();
            x.extend(flatten(&params));
            let weights = random_mat(&mut rng, len, ch, 1.0);
            let coords = (0..x.len()).collect();
            Probe::from_objective("selective_scan", x, coords, DEFAULT_TOLERANCE, ScanObjective { len, params, weights })
        }
        "stage" => {
            let obj = ModelObjective::toy(seed)?;
            let x = flatten(&obj.model);
            let mut coords = sample(&mut rng, x.len(), 64.min(x.len())).into_vec();
            coords.sort_unstable();
            Probe::from_objective("stage", x, coords, MODEL_TOLERANCE, obj)
        }
        other => return Err(Error::Config(format!("unknown op `{other}`; expected one of {}", OPS.join(", ")))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let g = fd_gradient(&|x| Ok(x[0] * x[0]), &[3.0], 1e-6).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = fd_gradient(&|_| Ok(2.5), &[1.0, -4.0, 0.3], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let r = fd_gradient(&|x| Ok(x[0].ln()), &[0.0], 1e-6);
        assert!(matches!(r, Err(Error::Numeric { .. })));
        assert!(fd_gradient(&|x| Ok(x[0]), &[0.0], 0.0).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn tie_margin() {
        assert!(!away_from_ties(&[0.0, 1.5004]));
        assert!(away_from_ties(&[0.0, 1.502]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert!(away_from_ties(&sample_shifted_index(&mut rng, 8, 0.9)));
        }
    }

    #[test]
    fn failing_check_names_coordinate() {
        let r = check("bad", &|x| Ok(x[0] * x[1]), &[1.0, 2.0], &[0, 1], &[2.0, 5.0], 1e-6);
        match r {
            Err(Error::GradCheck { coordinate, .. }) => assert_eq!(coordinate, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn small_probes_pass() {
        for op in ["gaussian_weight", "gdr_weights", "gdr_apply", "zoh"] {
            let r = probe(op, 7).unwrap().check().unwrap();
            assert!(r.max_rel_error < DEFAULT_TOLERANCE, "{op}: {r:?}");
        }
    }

    #[test]
    fn unknown_op() {
        assert!(probe("nope", 0).is_err());
    }
}
