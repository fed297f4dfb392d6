use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use deformscan::deform::gdr_limit_report;
use deformscan::gradcheck::{probe, OPS};
use deformscan::hilbert::DEFAULT_ORDER;
use deformscan::io::{load_params, load_pointcloud, CloudFormat, RunConfig};
use deformscan::ssm::{SsmParams, StateInit};
use deformscan::tpff::{tpff, FrequencyBlockParams, TriPathBundle};
use deformscan::{gdr_apply, gdr_weights, gkr, serialize, GaussianKernelParams, HilbertConfig, Init, Mat, Model, Point, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "deformscan", version, about = "Deformable point-cloud scanning toolkit", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Hilbert order of a cloud, one JSON line per point in curve order.
    Serialize {
        cloud: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ORDER)]
        order: u32,
    },
    /// Embedding plus every stage; offsets, orders, branch norms and an output digest.
    DeformScan {
        cloud: PathBuf,
        /// key = value file applied over the toy defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Parameter file replacing the seeded initialization.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Reordering weights at several scales: uniform, permutation and equidistant-row metrics.
    GdrDemo {
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_value = "1e-3,0.2,1e6")]
        sigmas: Vec<f64>,
        /// Include the dense weight matrices.
        #[arg(long)]
        weights: bool,
    },
    /// Analytic gradients against central differences.
    Gradcheck {
        #[arg(long, default_value = "all")]
        op: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Wall times of the main kernels.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "64,256,1024")]
        n: Vec<usize>,
    },
}

fn emit(out: &mut impl Write, v: &Value) -> Result<()> {
    serde_json::to_writer(&mut *out, v)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn rows(m: &Mat<f64>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn load_cloud(path: &PathBuf) -> Result<PointCloud<f64>> {
    load_pointcloud(path, CloudFormat::from_path(path)).with_context(|| format!("reading {}", path.display()))
}

fn cmd_serialize(out: &mut impl Write, cloud: &PathBuf, order: u32) -> Result<()> {
    let c = load_cloud(cloud)?;
    let pts = c.coords();
    let ord = serialize(pts, &HilbertConfig::fit(pts, order)?)?;
    for (rank, &i) in ord.perm.iter().enumerate() {
        emit(out, &json!({"rank": rank, "index": i, "key": ord.keys[i], "point": pts[i]}))?;
    }
    Ok(())
}

fn digest(m: &Mat<f64>) -> String {
    let mut h = Sha256::new();
    for v in m.as_slice() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn cmd_deform_scan(out: &mut impl Write, cloud: &PathBuf, config: Option<&PathBuf>, params: Option<&PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut run = match config {
        Some(p) => RunConfig::load(p, RunConfig::toy())?,
        None => RunConfig::toy(),
    };
    if let Some(s) = seed {
        run.seed = s;
    }
    let mut model = Model::<f64>::init(run.seed, run.model_config()?)?;
    if let Some(p) = params.or(run.params.as_ref()) {
        load_params(p, &mut model).with_context(|| format!("loading {}", p.display()))?;
    }
    let outputs = model.forward(&load_cloud(cloud)?)?;
    for (b, o) in outputs.iter().enumerate() {
        let e = &o.embedding;
        emit(
            out,
            &json!({
                "record": "embedding",
                "batch": b,
                "seed": run.seed,
                "shape": [e.tokens.rows(), e.tokens.cols()],
                "curve_order": e.order.perm,
                "centers": e.centers,
            }),
        )?;
        for (s, st) in o.stages.iter().enumerate() {
            let blk = &st.block;
            let br = &blk.branches;
            emit(
                out,
                &json!({
                    "record": "stage",
                    "batch": b,
                    "stage": s,
                    "delta_p": rows(&blk.deform.offsets.delta_p),
                    "delta_t": blk.deform.offsets.delta_t,
                    "new_order": blk.new_order(),
                    "new_coords": blk.new_coords(),
                    "branch_norms": {
                        "forward": br.f_fwd.frobenius(),
                        "channel": br.f_chan.frobenius(),
                        "deformable": br.f_def.frobenius(),
                    },
                    "output_norm": st.tokens.frobenius(),
                }),
            )?;
        }
        let t = o.tokens();
        emit(out, &json!({"record": "output", "batch": b, "shape": [t.rows(), t.cols()], "sha256": digest(t)}))?;
    }
    Ok(())
}

/// Shifted indices that reverse the sequence with small perturbations; the
/// last row sits exactly halfway between positions 0 and 1.
fn demo_shifts(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let target = (n - 1 - i) as f64;
            let s = if i + 1 == n { 0.5 } else { target + 0.2 * ((i + 1) as f64).sin() };
            s - i as f64
        })
        .collect()
}

fn cmd_gdr_demo(out: &mut impl Write, n: usize, sigmas: &[f64], weights: bool) -> Result<()> {
    if n == 0 {
        bail!("--n must be positive");
    }
    let base: Vec<usize> = (0..n).collect();
    let dt = demo_shifts(n);
    for r in gdr_limit_report(&base, &dt, sigmas)? {
        let mut rec = json!({
            "sigma": r.sigma,
            "n": n,
            "uniform_deviation": r.uniform_deviation,
            "permutation_deviation": r.permutation_deviation,
            "max_gradient": r.max_gradient,
            "row_sum_deviation": r.row_sum_deviation,
            "equidistant": r.equidistant.iter().map(|e| json!({
                "row": e.row, "targets": e.targets, "weights": e.weights, "gradients": e.gradients,
            })).collect::<Vec<_>>(),
        });
        if weights {
            rec["weights"] = json!(rows(&gdr_weights(&base, &dt, r.sigma)?.matrix));
        }
        emit(out, &rec)?;
    }
    Ok(())
}

fn cmd_gradcheck(out: &mut impl Write, op: &str, seed: u64) -> Result<bool> {
    let ops: Vec<&str> = if op == "all" { OPS.to_vec() } else { vec![op] };
    let mut ok = true;
    for name in ops {
        let p = probe(name, seed)?;
        let r = p.report()?;
        let pass = r.max_rel_error < p.tolerance;
        ok &= pass;
        emit(
            out,
            &json!({
                "op": r.op,
                "max_rel_error": r.max_rel_error,
                "max_abs_error": r.max_abs_error,
                "worst_coordinate": r.worst_coordinate,
                "step": r.step,
                "coordinates": r.coordinates,
                "unresolved": r.unresolved,
                "tolerance": p.tolerance,
                "pass": pass,
            }),
        )?;
    }
    Ok(ok)
}

fn time<R>(f: impl FnOnce() -> Result<R>) -> Result<f64> {
    let t = Instant::now();
    std::hint::black_box(f()?);
    Ok(t.elapsed().as_secs_f64())
}

fn cmd_bench(out: &mut impl Write, sizes: &[usize]) -> Result<()> {
    const CH: usize = 16;
    for &n in sizes {
        if n == 0 {
            bail!("bench sizes must be positive");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let pts: Vec<Point<f64>> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let feats = Mat::from_fn(n, CH, |_, _| rng.gen_range(-1.0..1.0));
        let dp = Mat::from_fn(n, 3, |_, _| rng.gen_range(-0.05..0.05));
        let dt: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let base: Vec<usize> = (0..n).collect();
        let cloud = PointCloud::new(pts.clone())?;
        let init = Init::new(0);
        let ssm = SsmParams::<f64>::init(&init, "ssm", CH, 16, 1, StateInit::Arange);
        let fusion = FrequencyBlockParams::<f64>::init(&init, "tpff", CH, 4)?;
        let bundle = TriPathBundle::new(feats.clone(), feats.map(|v| -v), feats.map(|v| 0.5 * v))?;
        let timings = [
            ("serialize", time(|| Ok(serialize(&pts, &HilbertConfig::fit(&pts, DEFAULT_ORDER)?)?))?),
            ("gkr", time(|| Ok(gkr(&cloud, &feats, &dp, 3, &GaussianKernelParams::with_sigma(1.0)?)?))?),
            ("gdr", time(|| Ok(gdr_apply(&gdr_weights(&base, &dt, 0.2)?, &feats)?))?),
            ("scan", time(|| Ok(deformscan::ssm::selective_scan(&feats, &ssm)?))?),
            ("tpff", time(|| Ok(tpff(&bundle, &fusion)?))?),
        ];
        for (op, secs) in timings {
            emit(out, &json!({"op": op, "n": n, "channels": CH, "seconds": secs}))?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let ok = match &cli.command {
        Command::Serialize { cloud, order } => cmd_serialize(&mut out, cloud, *order).map(|_| true),
        Command::DeformScan { cloud, config, params, seed } => cmd_deform_scan(&mut out, cloud, config.as_ref(), params.as_ref(), *seed).map(|_| true),
        Command::GdrDemo { n, sigmas, weights } => cmd_gdr_demo(&mut out, *n, sigmas, *weights).map(|_| true),
        Command::Gradcheck { op, seed } => cmd_gradcheck(&mut out, op, *seed),
        Command::Bench { n } => cmd_bench(&mut out, n).map(|_| true),
    }?;
    out.flush()?;
    Ok(ok)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
