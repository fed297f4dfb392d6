use deformscan::gradcheck::{probe, MODEL_TOLERANCE};
use deformscan::ssm::selective_scan;
use deformscan::tensor::max_abs_diff;
use deformscan::{dmb_forward, DmbParams, Init, Mat, Model, ModelConfig, Point, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(seed: u64, n: usize) -> Vec<Point<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

// Hard-ordered pipeline: Gaussian interpolation over the k nearest centers
// plus the residual, identity order, pointwise map, width-3 conv, GELU, scan.
fn plain_branch(tokens: &Mat<f64>, centers: &[Point<f64>], p: &DmbParams<f64>) -> Mat<f64> {
    let cfg = p.config.deform;
    let (n, d) = (centers.len(), tokens.cols());
    let k = cfg.k_r.min(n);
    let sigma = p.deform.sigma_s;
    let mut seq = Mat::zeros(n + 1, d);
    seq.row_mut(0).copy_from_slice(tokens.row(0));
    for i in 0..n {
        let d2 = |j: usize| (0..3).map(|a| (centers[i][a] - centers[j][a]).powi(2)).sum::<f64>();
        let mut near: Vec<usize> = (0..n).collect();
        near.sort_by(|&a, &b| d2(a).partial_cmp(&d2(b)).unwrap().then(a.cmp(&b)));
        near.truncate(k);
        let raw: Vec<f64> = near.iter().map(|&j| (-(d2(j) - d2(near[0])) / (2.0 * sigma * sigma)).exp()).collect();
        let total: f64 = raw.iter().sum();
        for c in 0..d {
            let interp: f64 = near.iter().zip(&raw).map(|(&j, w)| w / total * tokens[(j + 1, c)]).sum();
            seq[(i + 1, c)] = tokens[(i + 1, c)] + interp;
        }
    }
    let lin = &p.def_proj;
    let di = lin.weight.rows();
    let proj = Mat::from_fn(n + 1, di, |t, o| {
        lin.bias.as_ref().unwrap()[o] + (0..d).map(|c| lin.weight[(o, c)] * seq[(t, c)]).sum::<f64>()
    });
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

#[test]
fn deformable_branch_reduces_to_plain_scan() {
    for seed in 0..5u64 {
        let mut cfg = ModelConfig::toy();
        cfg.block.deform.enable_dp = false;
        cfg.block.deform.enable_dt = false;
        cfg.block.deform.sigma_t = 0.05;
        let model = Model::<f64>::init(seed, cfg).unwrap();
        let out = model.forward(&PointCloud::new(cloud(seed, 48)).unwrap()).unwrap();
        let e = &out[0].embedding;
        let block = &model.encoder.stages[0].block;
        let got = dmb_forward(&e.tokens, &e.centers, &e.base_index, block).unwrap();
        let err = max_abs_diff(&got.branches.f_def, &plain_branch(&e.tokens, &e.centers, block));
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn one_stage_model_gradient() {
    let r = probe("stage", 0).unwrap().report().unwrap();
    assert!(r.max_rel_error < MODEL_TOLERANCE, "{r:?}");
    assert!(r.unresolved < r.coordinates);
}

#[test]
fn single_precision_tracks_double() {
    let m64 = Model::<f64>::init(4, ModelConfig::toy()).unwrap();
    let m32: Model<f32> = m64.map(&|v| v as f32);
    let pts = cloud(4, 32);
    let c32 = PointCloud::new(pts.iter().map(|p| p.map(|v| v as f32)).collect()).unwrap();
    let a = m64.forward(&PointCloud::new(pts).unwrap()).unwrap();
    let b = m32.forward(&c32).unwrap();
    let (ta, tb) = (a[0].tokens(), b[0].tokens());
    assert!(tb.all_finite());
    let err = ta.as_slice().iter().zip(tb.as_slice()).map(|(x, y)| (x - *y as f64).abs()).fold(0.0, f64::max);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn block_rejects_wrong_width() {
    let cfg = ModelConfig::toy().block;
    let p = DmbParams::<f64>::init(&Init::new(0), "b", cfg).unwrap();
    let centers = cloud(1, 4);
    assert!(dmb_forward(&Mat::zeros(5, 6), &centers, &[0, 1, 2, 3], &p).is_err());
}
