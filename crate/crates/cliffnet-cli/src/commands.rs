//! Subcommand implementations. Every command is deterministic given its
//! flags/config and seed; no output file embeds a timestamp.

use std::fs;
use std::path::{Path, PathBuf};

use cliffnet::groups::{
    chi, in_radical_subalgebra, orthogonal_to_versor, preserves_qt_subspace, psi,
    sample_lipschitz, versor_to_orthogonal, Factor, OrthogonalMatrix,
};
use cliffnet::layers::LayerKind;
use cliffnet::tasks::{
    build_layer_stack, build_model, constant_mean_mse, equivariance_audit, gen_hull,
    gen_regression, hull_task_data, random_batch, read_hull_csv, read_regression_csv,
    regression_task_data, train_from_state, train_mlp_baseline, vector_features, AuditReport,
    TaskData,
};
use cliffnet::{Error, Result, Signature};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{fnv1a, parse_signature, RunConfig, Task};

const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Test splits draw from an independent stream of the same seed.
const TEST_SEED_SALT: u64 = 0x7465_7374;

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

pub struct GenOpts {
    pub task: Task,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub dim: usize,
    pub k: usize,
    pub n_mc: usize,
    pub out_dir: PathBuf,
}

pub fn cmd_gen(opts: &GenOpts) -> Result<i32> {
    if opts.dim == 0 {
        return Err(Error::Config("dim must be positive".into()));
    }
    if opts.n_train == 0 || opts.n_test == 0 {
        return Err(Error::Config("n_train and n_test must be positive".into()));
    }
    let mut extra = Vec::new();
    let (train_bytes, test_bytes, oracle, noise_mean, noise_max) = match opts.task {
        Task::Regression => {
            let train = gen_regression(opts.seed, opts.n_train, opts.dim);
            let test = gen_regression(opts.seed ^ TEST_SEED_SALT, opts.n_test, opts.dim);
            let mut tb = Vec::new();
            cliffnet::tasks::write_regression_csv(&mut tb, &train)?;
            let mut sb = Vec::new();
            cliffnet::tasks::write_regression_csv(&mut sb, &test)?;
            (tb, sb, "closed-form".to_string(), 0.0, 0.0)
        }
        Task::Hull => {
            if opts.k <= opts.dim {
                return Err(Error::Config(format!(
                    "hull needs k > dim, got k = {} in dimension {}",
                    opts.k, opts.dim
                )));
            }
            if opts.dim != 3 && opts.n_mc == 0 {
                return Err(Error::Config(
                    "hull volumes outside dimension 3 need n_mc > 0".into(),
                ));
            }
            let train = gen_hull(opts.seed, opts.n_train, opts.dim, opts.k, opts.n_mc);
            let test = gen_hull(opts.seed ^ TEST_SEED_SALT, opts.n_test, opts.dim, opts.k, opts.n_mc);
            let stds: Vec<f64> =
                train.iter().chain(&test).map(|s| s.volume_std).collect();
            let mean = stds.iter().sum::<f64>() / stds.len() as f64;
            let max = stds.iter().fold(0.0f64, |m, &v| m.max(v));
            let oracle = if opts.dim == 3 {
                "exact-incremental-hull".to_string()
            } else {
                format!("monte-carlo(n_mc={})", opts.n_mc)
            };
            extra.push(format!("k = {}", opts.k));
            if opts.dim != 3 {
                extra.push(format!("n_mc = {}", opts.n_mc));
            }
            let mut tb = Vec::new();
            cliffnet::tasks::write_hull_csv(&mut tb, &train)?;
            let mut sb = Vec::new();
            cliffnet::tasks::write_hull_csv(&mut sb, &test)?;
            (tb, sb, oracle, mean, max)
        }
    };
    fs::create_dir_all(&opts.out_dir)?;
    fs::write(opts.out_dir.join("train.csv"), &train_bytes)?;
    fs::write(opts.out_dir.join("test.csv"), &test_bytes)?;
    let manifest = format!(
        "version = {VERSION}\n\
         command = gen\n\
         task = {}\n\
         seed = {}\n\
         dim = {}\n\
         {}n_train = {}\n\
         n_test = {}\n\
         oracle = {}\n\
         label_noise_std_mean = {}\n\
         label_noise_std_max = {}\n\
         train_csv = train.csv\n\
         test_csv = test.csv\n",
        opts.task.name(),
        opts.seed,
        opts.dim,
        extra.iter().map(|l| format!("{l}\n")).collect::<String>(),
        opts.n_train,
        opts.n_test,
        oracle,
        noise_mean,
        noise_max,
    );
    fs::write(opts.out_dir.join("manifest.txt"), manifest)?;
    println!(
        "wrote {} train + {} test samples to {}",
        opts.n_train,
        opts.n_test,
        opts.out_dir.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn load_task_data(cfg: &RunConfig) -> Result<(TaskData, usize)> {
    match cfg.task {
        Task::Regression => {
            let train = read_regression_csv(fs::File::open(&cfg.train_csv)?)?;
            let test = read_regression_csv(fs::File::open(&cfg.test_csv)?)?;
            Ok((regression_task_data(cfg.signature, &train, &test)?, 2))
        }
        Task::Hull => {
            let train = read_hull_csv(fs::File::open(&cfg.train_csv)?)?;
            let test = read_hull_csv(fs::File::open(&cfg.test_csv)?)?;
            let k = train
                .first()
                .map(|s| s.points.len())
                .ok_or_else(|| Error::Config("empty training split".into()))?;
            if test.iter().any(|s| s.points.len() != k) {
                return Err(Error::Config("train and test use different point counts".into()));
            }
            Ok((hull_task_data(cfg.signature, &train, &test)?, k))
        }
    }
}

fn kind_name(l: &LayerKind) -> &'static str {
    match l {
        LayerKind::Conjugation { .. } => "conjugation",
        LayerKind::QtLinear { .. } => "type-linear",
        LayerKind::QtProduct { .. } => "type-product",
        LayerKind::QtNorm { .. } => "type-norm",
        LayerKind::ScalarGate { .. } => "scalar-gate",
        LayerKind::GradeLinear { .. } => "grade-linear",
        LayerKind::GradeProduct { .. } => "grade-product",
    }
}

#[derive(Serialize)]
struct LayerSummary {
    kind: &'static str,
    params: usize,
}

#[derive(Serialize)]
struct TrainSummary {
    version: &'static str,
    task: String,
    signature: String,
    in_channels: usize,
    layers: Vec<LayerSummary>,
    param_total: usize,
    epochs_run: usize,
    steps: u64,
    final_train_mse: f64,
    final_test_mse: f64,
    constant_mean_test_mse: f64,
    y_mean: f64,
    y_std: f64,
    wall_s: f64,
    baseline_hidden: usize,
    baseline_final_test_mse: Option<f64>,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn cmd_train(config_path: &Path, resume: Option<&Path>) -> Result<i32> {
    let cfg = RunConfig::load(config_path)?;
    let train_raw = fs::read(&cfg.train_csv)?;
    let test_raw = fs::read(&cfg.test_csv)?;
    let (data, in_channels) = load_task_data(&cfg)?;
    let run_dir = cfg.run_dir();
    fs::create_dir_all(&run_dir)?;

    let (model, resume_state) = match resume {
        None => (build_model(cfg.signature, in_channels, &cfg.train)?, None),
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            ckpt.ensure_matches(&cfg, in_channels)?;
            let model = ckpt.build_model()?;
            let state = ckpt.resume_state(&model)?;
            (model, Some(state))
        }
    };

    let manifest = format!(
        "version = {VERSION}\n\
         command = train\n\
         config_hash = {:016x}\n\
         resumed_from = {}\n\
         train_csv = {}\n\
         test_csv = {}\n\
         train_csv_fnv = {:016x}\n\
         test_csv_fnv = {:016x}\n\
         [config]\n\
         {}",
        fnv1a(cfg.canonical().as_bytes()),
        resume.map_or_else(|| "none".to_string(), |p| p.display().to_string()),
        cfg.train_csv.display(),
        cfg.test_csv.display(),
        fnv1a(&train_raw),
        fnv1a(&test_raw),
        cfg.canonical(),
    );
    fs::write(run_dir.join("manifest.txt"), manifest)?;

    let result = train_from_state(model, &cfg.train, &data, resume_state)?;
    write_jsonl(&run_dir.join("metrics.jsonl"), &result.metrics)?;

    let ckpt = Checkpoint::from_result(&cfg, in_channels, &result);
    ckpt.save(&run_dir.join("checkpoint.json"))?;

    let baseline_final = if cfg.baseline_hidden > 0 {
        let feats_train = vector_features(cfg.signature, &data.x_train);
        let feats_test = vector_features(cfg.signature, &data.x_test);
        let baseline = train_mlp_baseline(
            &cfg.train,
            cfg.baseline_hidden,
            &feats_train,
            &data.y_train,
            &feats_test,
            &data.y_test,
        )?;
        write_jsonl(&run_dir.join("baseline_metrics.jsonl"), &baseline.metrics)?;
        baseline.metrics.last().map(|m| m.test_mse)
    } else {
        None
    };

    let last = result.metrics.last().expect("at least the echo entry");
    let n = cfg.signature.n();
    let layers: Vec<LayerSummary> = result
        .model
        .layers()
        .iter()
        .map(|l| LayerSummary { kind: kind_name(l), params: l.param_count(n) })
        .collect();
    let s = cfg.signature;
    let summary = TrainSummary {
        version: VERSION,
        task: cfg.task.name().to_string(),
        signature: format!("{},{},{}", s.p(), s.q(), s.r()),
        in_channels,
        param_total: result.model.param_count(),
        layers,
        epochs_run: last.epoch,
        steps: last.step,
        final_train_mse: last.train_mse,
        final_test_mse: last.test_mse,
        constant_mean_test_mse: constant_mean_mse(&data.y_train, &data.y_test),
        y_mean: result.state.y_mean,
        y_std: result.state.y_std,
        wall_s: last.wall_s,
        baseline_hidden: cfg.baseline_hidden,
        baseline_final_test_mse: baseline_final,
    };
    fs::write(run_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;

    println!("run_dir = {}", run_dir.display());
    println!("param_total = {}", summary.param_total);
    println!("final_train_mse = {}", summary.final_train_mse);
    println!("final_test_mse = {}", summary.final_test_mse);
    if let Some(b) = baseline_final {
        println!("baseline_final_test_mse = {b}");
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// audit
// ---------------------------------------------------------------------------

pub struct AuditOpts {
    pub checkpoint: PathBuf,
    pub n_trials: usize,
    pub tol: f64,
    pub break_layer: Option<usize>,
    pub seed: u64,
    pub batch: usize,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
pub struct GroupChecks {
    versors: usize,
    subspace_preservation_ok: bool,
    norm_functions_in_radical_ok: bool,
    orthogonal_roundtrip_max_abs: f64,
    ok: bool,
}

/// Spot checks of the group machinery on one signature: sampled group
/// elements must preserve all four type subspaces, their norm functions
/// must land in the radical subalgebra, and the matrix correspondence must
/// round-trip.
fn group_checks(sig: Signature, tol: f64) -> Result<GroupChecks> {
    let versors = 5usize;
    let mut subspace_ok = true;
    let mut radical_ok = true;
    let mut roundtrip = 0.0f64;
    for seed in 0..versors as u64 {
        let t = sample_lipschitz(sig, seed, 2, usize::from(sig.r() > 0))?;
        for m in 0..4 {
            subspace_ok &= preserves_qt_subspace(&t, m, tol);
        }
        radical_ok &= in_radical_subalgebra(&psi(t.product()), tol);
        radical_ok &= in_radical_subalgebra(&chi(t.product()), tol);
        let phi = versor_to_orthogonal(&t)?;
        let back = orthogonal_to_versor(&phi)?;
        roundtrip = roundtrip.max(versor_to_orthogonal(&back)?.max_abs_diff(&phi));
    }
    let ok = subspace_ok && radical_ok && roundtrip <= tol;
    Ok(GroupChecks {
        versors,
        subspace_preservation_ok: subspace_ok,
        norm_functions_in_radical_ok: radical_ok,
        orthogonal_roundtrip_max_abs: roundtrip,
        ok,
    })
}

#[derive(Serialize)]
struct FullAuditReport {
    version: &'static str,
    checkpoint: String,
    signature: String,
    break_layer: Option<usize>,
    audit: AuditReport,
    group: GroupChecks,
    ok: bool,
}

pub fn cmd_audit(opts: &AuditOpts) -> Result<i32> {
    let ckpt = Checkpoint::load(&opts.checkpoint)?;
    let mut model = ckpt.build_model()?;
    if let Some(b) = opts.break_layer {
        if b >= model.layers().len() {
            return Err(Error::Config(format!(
                "break layer {b} out of range for {} layers",
                model.layers().len()
            )));
        }
        model.break_layer = Some(b);
    }
    let sig = model.sig();
    let x = random_batch(sig, opts.batch, ckpt.in_channels, opts.seed);
    let audit = equivariance_audit(&model, &x, opts.n_trials, opts.tol, opts.seed ^ 0xa0d1)?;
    let group = group_checks(sig, opts.tol)?;
    let ok = audit.passed && group.ok;
    let report = FullAuditReport {
        version: VERSION,
        checkpoint: opts.checkpoint.display().to_string(),
        signature: ckpt.signature.clone(),
        break_layer: opts.break_layer,
        audit,
        group,
        ok,
    };
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    let out = opts.out.clone().unwrap_or_else(|| {
        opts.checkpoint.parent().unwrap_or(Path::new(".")).join("audit_report.json")
    });
    fs::write(out, &json)?;
    Ok(if ok { 0 } else { 3 })
}

// ---------------------------------------------------------------------------
// lift
// ---------------------------------------------------------------------------

fn parse_matrix(text: &str, n: usize) -> Result<Vec<f64>> {
    let mut entries = Vec::with_capacity(n * n);
    let rows: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if rows.len() != n {
        return Err(Error::Parse(format!("expected {n} matrix rows, got {}", rows.len())));
    }
    for row in rows {
        let cols: Vec<&str> = row.split(',').map(str::trim).collect();
        if cols.len() != n {
            return Err(Error::Parse(format!("expected {n} columns, got {}", cols.len())));
        }
        for c in cols {
            entries.push(
                c.parse::<f64>().map_err(|e| Error::Parse(format!("bad matrix entry {c:?}: {e}")))?,
            );
        }
    }
    Ok(entries)
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum FactorOut {
    /// Reflection across the hyperplane orthogonal to these coordinates.
    Vector { coords: Vec<f64> },
    /// e + m e_a e_b with e_b radical.
    RadicalShear { a: usize, b: usize, m: f64 },
}

#[derive(Serialize)]
struct LiftReport {
    version: &'static str,
    signature: String,
    n_factors: usize,
    factors: Vec<FactorOut>,
    product: Vec<f64>,
    inverse: Vec<f64>,
    round_trip_residual: f64,
}

pub fn cmd_lift(matrix_path: &Path, signature: &str, out: Option<&Path>) -> Result<i32> {
    let sig = parse_signature(signature)?;
    let text = fs::read_to_string(matrix_path)?;
    let entries = parse_matrix(&text, sig.n())?;
    let phi = OrthogonalMatrix::new(sig, entries)?;
    let t = orthogonal_to_versor(&phi)?;
    let round_trip = versor_to_orthogonal(&t)?.max_abs_diff(&phi);
    let factors = t
        .factors()
        .iter()
        .map(|f| match f {
            Factor::Vector(v) => FactorOut::Vector { coords: v.vector_part() },
            Factor::RadicalShear { a, b, m } => FactorOut::RadicalShear { a: *a, b: *b, m: *m },
        })
        .collect::<Vec<_>>();
    let report = LiftReport {
        version: VERSION,
        signature: signature.to_string(),
        n_factors: factors.len(),
        factors,
        product: t.product().coeffs().to_vec(),
        inverse: t.inverse().coeffs().to_vec(),
        round_trip_residual: round_trip,
    };
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(path) = out {
        fs::write(path, &json)?;
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// bench-params
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct StackSummary {
    layers: Vec<LayerSummary>,
    total: usize,
}

fn summarize(stack: &[LayerKind], n: usize) -> StackSummary {
    let layers: Vec<LayerSummary> =
        stack.iter().map(|l| LayerSummary { kind: kind_name(l), params: l.param_count(n) }).collect();
    let total = layers.iter().map(|l| l.params).sum();
    StackSummary { layers, total }
}

#[derive(Serialize)]
struct BenchReport {
    version: &'static str,
    signature: String,
    n: usize,
    in_channels: usize,
    channels: usize,
    depth: usize,
    gate_hidden: usize,
    type_grouped: StackSummary,
    grade_wise: StackSummary,
    grade_over_type_ratio: f64,
}

pub fn cmd_bench_params(
    signature: &str,
    in_channels: usize,
    channels: usize,
    depth: usize,
    gate_hidden: usize,
) -> Result<i32> {
    let sig = parse_signature(signature)?;
    let n = sig.n();
    let qt = summarize(&build_layer_stack(in_channels, channels, depth, gate_hidden, false), n);
    let grade = summarize(&build_layer_stack(in_channels, channels, depth, 0, true), n);
    let report = BenchReport {
        version: VERSION,
        signature: signature.to_string(),
        n,
        in_channels,
        channels,
        depth,
        gate_hidden,
        grade_over_type_ratio: grade.total as f64 / qt.total.max(1) as f64,
        type_grouped: qt,
        grade_wise: grade,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(0)
}
