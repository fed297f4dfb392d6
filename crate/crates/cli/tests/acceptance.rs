//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Every check carries its own oracle.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use deformscan::deform::{gdr_limit_report, gdr_weights_shifted};
use deformscan::fft::{fft, ifft};
use deformscan::geometry::{ball_query, farthest_point_sample, knn};
use deformscan::gradcheck::{probe, relative_error, sample_shifted_index, MODEL_TOLERANCE};
use deformscan::hilbert::{hilbert_decode, hilbert_encode};
use deformscan::nn::GroupedPointwise;
use deformscan::ssm::{selective_scan, zoh_discretize, TAYLOR_THRESHOLD};
use deformscan::tensor::max_abs_diff;
use deformscan::tpff::{channel_shuffle, channel_unshuffle, cross_modulate, tpff, FrequencyBlockParams, TriPathBundle};
use deformscan::{
    dmb_forward, gdr_apply, gdr_weight_grad, gdr_weights, gkr, serialize, DmbParams, GaussianKernelParams, HilbertConfig, Init, Mat, Model,
    ModelConfig, Point, PointCloud,
};
use num_complex::Complex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit, || format!("took {:.3}s, limit {limit}s", elapsed.as_secs_f64()))
}

fn points(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<Point<f64>> {
    (0..n).map(|_| [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]).collect()
}

fn d2(a: &Point<f64>, b: &Point<f64>) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn wide_kernel() -> Outcome {
    let t = Instant::now();
    let mut worst = (0.0f64, 0.0f64);
    for n in [4usize, 64, 256] {
        let base: Vec<usize> = (0..n).collect();
        let dt: Vec<f64> = (0..n).map(|i| 0.3 * (i as f64 * 0.7).sin()).collect();
        let w = gdr_weights(&base, &dt, 1e6).map_err(|e| e.to_string())?;
        let dev = w.matrix.as_slice().iter().map(|v| (v - 1.0 / n as f64).abs()).fold(0.0, f64::max);
        let grad = gdr_weight_grad(&w).max_abs();
        ensure(dev < 1e-9 && grad < 1e-9, || format!("N={n}: |W-1/N|={dev:e}, |dW/ds|={grad:e}"))?;
        worst = (worst.0.max(dev), worst.1.max(grad));
    }
    within(t.elapsed(), 1.0)?;
    Ok(format!("max |W-1/N| = {:.1e}, max |dW/ds| = {:.1e}", worst.0, worst.1))
}

fn sharp_kernel() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = (0.0f64, 0.0f64);
    for n in [8usize, 16, 64] {
        let mut base: Vec<usize> = (0..n).collect();
        base.shuffle(&mut rng);
        let dt: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let w = gdr_weights(&base, &dt, 1e-3).map_err(|e| e.to_string())?;
        let mut dev = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let p = if j == base[i] { 1.0 } else { 0.0 };
                dev = dev.max((w.matrix[(i, j)] - p).abs());
            }
        }
        let f = Mat::from_fn(n, 4, |_, _| rng.gen_range(-1.0..1.0));
        let got = gdr_apply(&w, &f).map_err(|e| e.to_string())?;
        let want = Mat::from_fn(n, 4, |i, c| f[(base[i], c)]);
        let apply = max_abs_diff(&got, &want);
        ensure(dev < 1e-12 && apply < 1e-9, || format!("N={n}: |W-P|={dev:e}, apply={apply:e}"))?;
        worst = (worst.0.max(dev), worst.1.max(apply));
    }
    within(t.elapsed(), 1.0)?;
    Ok(format!("|W-P|inf = {:.1e}, apply error = {:.1e}", worst.0, worst.1))
}

fn equidistant_split() -> Outcome {
    let base = [0usize, 1, 2, 3, 4, 5, 6, 7];
    let dt = [0.0, 0.5, 0.0, -0.5, 0.1, 0.0, 0.5, -0.1];
    let r = &gdr_limit_report(&base, &dt, &[1e-3]).map_err(|e| e.to_string())?[0];
    ensure(r.equidistant.len() == 3, || format!("found {} equidistant rows, expected 3", r.equidistant.len()))?;
    let mut min_grad = f64::INFINITY;
    for e in &r.equidistant {
        for (w, g) in e.weights.iter().zip(&e.gradients) {
            ensure((w - 0.5).abs() < 1e-9, || format!("row {} split {w}", e.row))?;
            min_grad = min_grad.min(g.abs());
        }
    }
    ensure(min_grad > 1e3, || format!("gradient {min_grad:e} not above 1e3"))?;
    Ok(format!("3 rows split 0.5, min |grad| = {min_grad:.3e}"))
}

fn gdr_entry(s: f64, n: usize, sigma: f64, j: usize, complement: bool) -> f64 {
    let w: Vec<f64> = (0..n).map(|l| (-(s - l as f64).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let t: f64 = w.iter().sum();
    if complement {
        -w.iter().enumerate().filter(|&(l, _)| l != j).map(|(_, v)| v / t).sum::<f64>()
    } else {
        w[j] / t
    }
}

fn derivative_formula() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let s = sample_shifted_index(&mut rng, 8, 0.9);
        let sigma = rng.gen_range(0.05..1.0);
        let g = gdr_weight_grad(&gdr_weights_shifted(s.clone(), sigma).map_err(|e| e.to_string())?);
        for i in 0..8 {
            for j in 0..8 {
                let saturated = gdr_entry(s[i], 8, sigma, j, false) > 0.5;
                let best = [1e-4, 1e-5, 1e-6, 1e-7, 1e-8]
                    .iter()
                    .map(|h| {
                        let fd = (gdr_entry(s[i] + h, 8, sigma, j, saturated) - gdr_entry(s[i] - h, 8, sigma, j, saturated)) / (2.0 * h);
                        relative_error(g[(i, j)], fd)
                    })
                    .fold(f64::INFINITY, f64::min);
                worst = worst.max(best);
            }
        }
    }
    ensure(worst < 1e-5, || format!("relative error {worst:e}"))?;
    within(t.elapsed(), 5.0)?;
    Ok(format!("max relative error {worst:.2e} over 100 configurations"))
}

fn row_stochastic() -> Outcome {
    let sigmas: Vec<f64> = (0..20).map(|k| 10f64.powf(-3.0 + 9.0 * k as f64 / 19.0)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for n in [1usize, 10, 100] {
        let s: Vec<f64> = (0..n).map(|i| i as f64 + rng.gen_range(-2.0..2.0)).collect();
        for &sigma in &sigmas {
            let w = gdr_weights_shifted(s.clone(), sigma).map_err(|e| e.to_string())?;
            for i in 0..n {
                let row = w.matrix.row(i);
                ensure(row.iter().all(|&v| v >= 0.0), || format!("negative weight at sigma {sigma}"))?;
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    ensure(worst < 1e-6, || format!("row sum off by {worst:e}"))?;
    Ok(format!("max |row sum - 1| = {worst:.1e} over 20 scales"))
}

fn gkr_oracle(src: &[Point<f64>], f: &Mat<f64>, dp: &Mat<f64>, k: usize, sigma: f64) -> Mat<f64> {
    let mut out = Mat::zeros(src.len(), f.cols());
    for i in 0..src.len() {
        let q = [src[i][0] + dp[(i, 0)], src[i][1] + dp[(i, 1)], src[i][2] + dp[(i, 2)]];
        let mut cand: Vec<(f64, usize)> = (0..src.len()).map(|j| (d2(&q, &src[j]), j)).collect();
        cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let w: Vec<f64> = cand[..k].iter().map(|(d, _)| (-d / (2.0 * sigma * sigma)).exp()).collect();
        let t: f64 = w.iter().sum();
        for (wi, (_, j)) in w.iter().zip(&cand[..k]) {
            for c in 0..f.cols() {
                out[(i, c)] += wi / t * f[(*j, c)];
            }
        }
    }
    out
}

fn gkr_checks() -> Outcome {
    let err = |e: deformscan::Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pts = points(&mut rng, 40, 0.0, 1.0);
    let f = Mat::from_fn(40, 5, |_, _| rng.gen_range(-2.0..2.0));
    let cloud = PointCloud::new(pts.clone()).map_err(err)?;
    let id = gkr(&cloud, &f, &Mat::zeros(40, 3), 1, &GaussianKernelParams::with_sigma(1.0).map_err(err)?).map_err(err)?;
    let id_err = max_abs_diff(&id.resampled, &f);
    ensure(id_err < 1e-9, || format!("identity error {id_err:e}"))?;

    for trial in 0..50 {
        let pts = points(&mut rng, 16, 0.0, 1.0);
        let f = Mat::from_fn(16, 3, |_, _| rng.gen_range(-1.0..1.0));
        let dp = Mat::from_fn(16, 3, |_, _| rng.gen_range(-0.3..0.3));
        let k = 1 + trial % 5;
        let kernel = GaussianKernelParams::with_sigma(rng.gen_range(0.05..2.0)).map_err(err)?;
        let r = gkr(&PointCloud::new(pts).map_err(err)?, &f, &dp, k, &kernel).map_err(err)?;
        for (i, nbrs) in r.neighbor_sets.iter().enumerate() {
            for c in 0..3 {
                let lo = nbrs.iter().map(|&j| f[(j, c)]).fold(f64::INFINITY, f64::min);
                let hi = nbrs.iter().map(|&j| f[(j, c)]).fold(f64::NEG_INFINITY, f64::max);
                let v = r.resampled[(i, c)];
                ensure(v >= lo - 1e-12 && v <= hi + 1e-12, || format!("trial {trial}: token {i} leaves the hull"))?;
            }
        }
    }

    let pts = points(&mut rng, 64, 0.0, 1.0);
    let f = Mat::from_fn(64, 4, |_, _| rng.gen_range(-1.0..1.0));
    let dp = Mat::from_fn(64, 3, |_, _| rng.gen_range(-0.1..0.1));
    let r = gkr(&PointCloud::new(pts.clone()).map_err(err)?, &f, &dp, 3, &GaussianKernelParams::with_sigma(0.5).map_err(err)?).map_err(err)?;
    let loop_err = max_abs_diff(&r.resampled, &gkr_oracle(&pts, &f, &dp, 3, 0.5));
    ensure(loop_err < 1e-12, || format!("loop oracle error {loop_err:e}"))?;
    Ok(format!("identity {id_err:.1e}, 50 hull cases, loop oracle {loop_err:.1e}"))
}

fn fps_oracle(pts: &[Point<f64>], n: usize) -> Vec<usize> {
    let mut sel = vec![0];
    while sel.len() < n {
        let mut best = (usize::MAX, -1.0);
        for i in 0..pts.len() {
            if sel.contains(&i) {
                continue;
            }
            let d = sel.iter().map(|&s| d2(&pts[i], &pts[s])).fold(f64::INFINITY, f64::min);
            if d > best.1 {
                best = (i, d);
            }
        }
        sel.push(best.0);
    }
    sel
}

fn ranked(q: &Point<f64>, pts: &[Point<f64>]) -> Vec<(f64, usize)> {
    let mut v: Vec<(f64, usize)> = pts.iter().enumerate().map(|(j, p)| (d2(q, p), j)).collect();
    v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    v
}

fn geometry_oracles() -> Outcome {
    let err = |e: deformscan::Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..100 {
        let pts = points(&mut rng, 128, -1.0, 1.0);
        let cloud = PointCloud::new(pts.clone()).map_err(err)?;
        let fps = farthest_point_sample(&cloud, 32, 0).map_err(err)?;
        ensure(fps == fps_oracle(&pts, 32), || format!("cloud {trial}: FPS differs"))?;
        let centers: Vec<Point<f64>> = fps.iter().map(|&i| pts[i]).collect();
        let want_knn: Vec<Vec<usize>> = centers.iter().map(|c| ranked(c, &pts).iter().take(8).map(|p| p.1).collect()).collect();
        ensure(knn(&centers, &cloud, 8, None).map_err(err)? == want_knn, || format!("cloud {trial}: KNN differs"))?;
        let want_ball: Vec<Vec<usize>> = centers
            .iter()
            .map(|c| {
                let all = ranked(c, &pts);
                let mut g: Vec<usize> = all.iter().filter(|p| p.0 <= 0.09).map(|p| p.1).take(8).collect();
                let pad = g.first().copied().unwrap_or(all[0].1);
                g.resize(8, pad);
                g
            })
            .collect();
        ensure(ball_query(&centers, &cloud, 0.3, 8, None).map_err(err)? == want_ball, || format!("cloud {trial}: ball query differs"))?;
    }
    Ok("100 clouds, exact index equality".into())
}

fn hilbert_checks() -> Outcome {
    let err = |e: deformscan::Error| e.to_string();
    for order in 1..=3u32 {
        let side = 1u32 << order;
        let mut seen = vec![false; 1 << (3 * order)];
        for x in 0..side {
            for y in 0..side {
                for z in 0..side {
                    let h = hilbert_encode([x, y, z], order).map_err(err)?;
                    ensure(!seen[h as usize], || format!("order {order}: index {h} repeated"))?;
                    seen[h as usize] = true;
                    ensure(hilbert_decode(h, order).map_err(err)? == [x, y, z], || format!("order {order}: decode mismatch"))?;
                }
            }
        }
        ensure(seen.iter().all(|&s| s), || format!("order {order}: not surjective"))?;
    }
    for h in 0..63u64 {
        let (a, b) = (hilbert_decode(h, 2).map_err(err)?, hilbert_decode(h + 1, 2).map_err(err)?);
        let l1: u32 = (0..3).map(|i| a[i].abs_diff(b[i])).sum();
        ensure(l1 == 1, || format!("indices {h},{} are {l1} apart", h + 1))?;
    }
    let mean_step = |pts: &[Point<f64>], ord: &[usize]| ord.windows(2).map(|w| d2(&pts[w[0]], &pts[w[1]]).sqrt()).sum::<f64>() / (ord.len() - 1) as f64;
    let mut wins = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = points(&mut rng, 256, 0.0, 1.0);
        let ord = serialize(&pts, &HilbertConfig::fit(&pts, 6).map_err(err)?).map_err(err)?;
        let raw: Vec<usize> = (0..256).collect();
        if mean_step(&pts, &ord.perm) < mean_step(&pts, &raw) {
            wins += 1;
        }
    }
    ensure(wins >= 18, || format!("locality improved in {wins}/20 seeds"))?;
    Ok(format!("bijection to order 3, adjacency at order 2, locality {wins}/20"))
}

fn zoh_checks() -> Outcome {
    let err = |e: deformscan::Error| e.to_string();
    let (ab, bb) = zoh_discretize(-1.0f64, 1.0, 0.1).map_err(err)?;
    ensure((ab - 0.9048374180359595).abs() < 1e-12, || format!("A-bar {ab}"))?;
    ensure((bb - (1.0 - (-0.1f64).exp())).abs() < 1e-12, || format!("B-bar {bb}"))?;
    let (ab, bb) = zoh_discretize(-2.0f64, 3.0, 0.5).map_err(err)?;
    ensure((ab - (-1.0f64).exp()).abs() < 1e-12 && (bb - 1.5 * (1.0 - (-1.0f64).exp())).abs() < 1e-12, || "second case".into())?;
    let x = TAYLOR_THRESHOLD;
    let (_, below) = zoh_discretize(-x * (1.0 - 1e-9), 1.0, 1.0).map_err(err)?;
    let (_, above) = zoh_discretize(-x * (1.0 + 1e-9), 1.0, 1.0).map_err(err)?;
    let seam = ((below - above) / above).abs();
    ensure(seam < 1e-10, || format!("seam jump {seam:e}"))?;
    Ok(format!("e^-0.1 to 1e-12, seam jump {seam:.1e}"))
}

fn grouped_ref(x: &[Vec<f64>], w: &GroupedPointwise<f64>) -> Vec<Vec<f64>> {
    let out = w.weight.rows();
    let (ip, op) = (w.in_channels / w.groups, out / w.groups);
    x.iter()
        .map(|row| {
            (0..out)
                .map(|o| w.bias.as_ref().map_or(0.0, |b| b[o]) + (0..ip).map(|i| w.weight[(o, i)] * row[(o / op) * ip + i]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn tpff_reference(f: &Mat<f64>, h: &Mat<f64>, d: &Mat<f64>, p: &FrequencyBlockParams<f64>) -> Mat<f64> {
    let (n, c) = f.shape();
    let cat: Vec<Vec<f64>> = (0..n)
        .map(|t| {
            let m = |x: &Mat<f64>, y: &Mat<f64>, z: &Mat<f64>, k: usize| x[(t, k)] * (sig(y[(t, k)]) + sig(z[(t, k)])) / 2.0;
            let mut row: Vec<f64> = (0..c).map(|k| m(f, h, d, k)).collect();
            row.extend((0..c).map(|k| m(h, f, d, k)));
            row.extend((0..c).map(|k| m(d, f, h, k)));
            row
        })
        .collect();
    let fused = grouped_ref(&cat, &p.fuse);
    let (g, per) = (p.shuffle_groups, c / p.shuffle_groups);
    let mut sh = vec![vec![0.0; c]; n];
    for t in 0..n {
        for src in 0..c {
            sh[t][(src % per) * g + src / per] = fused[t][src];
        }
    }
    let spec: Vec<Vec<f64>> = (0..n)
        .map(|k| {
            let mut row = vec![0.0; 2 * c];
            for ch in 0..c {
                for (t, r) in sh.iter().enumerate() {
                    let a = -2.0 * PI * (k * t) as f64 / n as f64;
                    row[ch] += r[ch] * a.cos();
                    row[c + ch] += r[ch] * a.sin();
                }
            }
            row
        })
        .collect();
    let mixed = grouped_ref(&spec, &p.freq);
    Mat::from_fn(n, c, |t, ch| {
        (0..n)
            .map(|k| {
                let a = 2.0 * PI * (k * t) as f64 / n as f64;
                mixed[k][ch] * a.cos() - mixed[k][c + ch] * a.sin()
            })
            .sum::<f64>()
            / n as f64
    })
}

fn tpff_checks() -> Outcome {
    let err = |e: deformscan::Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut rt, mut pv) = (0.0f64, 0.0f64);
    for n in [1usize, 3, 8, 12, 64, 100, 256] {
        let x: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let y = fft(&x);
        rt = rt.max(x.iter().zip(&ifft(&y)).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max));
        let e_t: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        let e_f: f64 = y.iter().map(|v| v.norm_sqr()).sum::<f64>() / n as f64;
        pv = pv.max((e_t - e_f).abs() / e_t.max(1.0));
    }
    ensure(rt < 1e-9, || format!("round trip {rt:e}"))?;
    ensure(pv < 1e-8, || format!("Parseval {pv:e}"))?;

    for (ch, g) in [(8usize, 2usize), (12, 3), (32, 4), (16, 16)] {
        let x = Mat::from_fn(2, ch, |r, c| (r * 100 + c) as f64);
        let s = channel_shuffle(&x, g).map_err(err)?;
        let mut vals = s.row(0).to_vec();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ensure(vals == x.row(0) && channel_unshuffle(&s, g).map_err(err)? == x, || format!("shuffle {ch}/{g} not a bijection"))?;
    }

    let rand_mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| Mat::from_fn(r, c, |_, _| rng.gen_range(-2.0..2.0));
    let (f, h, d) = (rand_mat(&mut rng, 9, 6), rand_mat(&mut rng, 9, 6), rand_mat(&mut rng, 9, 6));
    let m = cross_modulate(&TriPathBundle::new(f.clone(), h.clone(), d.clone()).map_err(err)?).map_err(err)?;
    let mut cm = 0.0f64;
    for t in 0..9 {
        for k in 0..6 {
            let (a, b, e) = (f[(t, k)], h[(t, k)], d[(t, k)]);
            cm = cm
                .max((m.f_fwd[(t, k)] - a * (sig(b) + sig(e)) / 2.0).abs())
                .max((m.f_chan[(t, k)] - b * (sig(a) + sig(e)) / 2.0).abs())
                .max((m.f_def[(t, k)] - e * (sig(a) + sig(b)) / 2.0).abs());
        }
    }
    ensure(cm < 1e-12, || format!("cross modulation {cm:e}"))?;

    let mut full = 0.0f64;
    for (c, groups, seed) in [(8usize, 4usize, 1u64), (16, 32, 2), (12, 3, 3)] {
        let (f, h, d) = (rand_mat(&mut rng, 8, c), rand_mat(&mut rng, 8, c), rand_mat(&mut rng, 8, c));
        let p = FrequencyBlockParams::<f64>::init(&Init::new(seed), "tpff", c, groups).map_err(err)?;
        let got = tpff(&TriPathBundle::new(f.clone(), h.clone(), d.clone()).map_err(err)?, &p).map_err(err)?;
        full = full.max(max_abs_diff(&got, &tpff_reference(&f, &h, &d, &p)));
    }
    ensure(full < 1e-9, || format!("full fusion {full:e}"))?;
    Ok(format!("round trip {rt:.1e}, Parseval {pv:.1e}, modulation {cm:.1e}, full {full:.1e}"))
}

fn plain_branch(tokens: &Mat<f64>, centers: &[Point<f64>], p: &DmbParams<f64>) -> Mat<f64> {
    let (n, d) = (centers.len(), tokens.cols());
    let k = p.config.deform.k_r.min(n);
    let sigma = p.deform.sigma_s;
    let mut seq = Mat::zeros(n + 1, d);
    seq.row_mut(0).copy_from_slice(tokens.row(0));
    for i in 0..n {
        let near = ranked(&centers[i], centers);
        let near = &near[..k];
        let raw: Vec<f64> = near.iter().map(|(dd, _)| (-(dd - near[0].0) / (2.0 * sigma * sigma)).exp()).collect();
        let total: f64 = raw.iter().sum();
        for c in 0..d {
            let interp: f64 = near.iter().zip(&raw).map(|((_, j), w)| w / total * tokens[(j + 1, c)]).sum();
            seq[(i + 1, c)] = tokens[(i + 1, c)] + interp;
        }
    }
    let lin = &p.def_proj;
    let di = lin.weight.rows();
    let proj = Mat::from_fn(n + 1, di, |t, o| lin.bias.as_ref().unwrap()[o] + (0..d).map(|c| lin.weight[(o, c)] * seq[(t, c)]).sum::<f64>());
    let conv = &p.conv_def;
    let act = Mat::from_fn(n + 1, di, |t, c| {
        let mut acc = conv.bias[c];
        for kk in 0..3 {
            let src = t as isize + kk as isize - 1;
            if (0..=n as isize).contains(&src) {
                acc += conv.weight[(c, kk)] * proj[(src as usize, c)];
            }
        }
        gelu(acc)
    });
    selective_scan(&act, &p.ssm_def).unwrap()
}

fn toy_block() -> Outcome {
    let err = |e: deformscan::Error| e.to_string();
    let t = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let mut cfg = ModelConfig::toy();
        cfg.block.deform.enable_dp = false;
        cfg.block.deform.enable_dt = false;
        cfg.block.deform.sigma_t = 0.05;
        let model = Model::<f64>::init(seed, cfg).map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = model.forward(&PointCloud::new(points(&mut rng, 48, 0.0, 1.0)).map_err(err)?).map_err(err)?;
        let e = &out[0].embedding;
        let block = &model.encoder.stages[0].block;
        let got = dmb_forward(&e.tokens, &e.centers, &e.base_index, block).map_err(err)?;
        worst = worst.max(max_abs_diff(&got.branches.f_def, &plain_branch(&e.tokens, &e.centers, block)));
    }
    ensure(worst < 1e-5, || format!("deformable branch differs by {worst:e}"))?;
    let r = probe("stage", 0).map_err(err)?.report().map_err(err)?;
    ensure(r.max_rel_error < MODEL_TOLERANCE, || format!("model gradient relative error {:e}", r.max_rel_error))?;
    within(t.elapsed(), 60.0)?;
    Ok(format!(
        "branch error {worst:.1e}; model gradient {:.1e} over {} coordinates ({} below FD resolution)",
        r.max_rel_error, r.coordinates, r.unresolved
    ))
}

fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_deformscan");
    let cloud = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/swirl64.xyz");
    let run = || {
        Command::new(bin)
            .args(["deform-scan", cloud.to_str().unwrap(), "--seed", "7"])
            .output()
            .map_err(|e| e.to_string())
    };
    let (a, b) = (run()?, run()?);
    ensure(a.status.success() && b.status.success(), || String::from_utf8_lossy(&a.stderr).into_owned())?;
    ensure(!a.stdout.is_empty(), || "no output".into())?;
    ensure(a.stdout == b.stdout, || "outputs differ".into())?;
    let lines = a.stdout.iter().filter(|&&c| c == b'\n').count();
    Ok(format!("{} bytes, {lines} records, identical", a.stdout.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("reordering, wide-kernel limit is global averaging", wide_kernel),
        ("reordering, sharp-kernel limit is exact sorting", sharp_kernel),
        ("reordering, equidistant rows split evenly", equidistant_split),
        ("reordering, closed-form derivative vs central differences", derivative_formula),
        ("reordering, rows are stochastic across scales", row_stochastic),
        ("resampling, identity, convexity and loop oracle", gkr_checks),
        ("geometry, FPS/KNN/ball query vs brute force", geometry_oracles),
        ("Hilbert curve, bijection, adjacency and locality", hilbert_checks),
        ("ZOH, analytic cases and Taylor seam", zoh_checks),
        ("frequency fusion, DFT, shuffle and composed reference", tpff_checks),
        ("toy block, plain-scan reduction and model gradient", toy_block),
        ("CLI determinism, byte-identical deform-scan output", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.2}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{secs:.2}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
