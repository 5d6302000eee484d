//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use sparse_prox::bench::{run_sweep, Stats, SweepConfig, SweepReport};
use sparse_prox::bsr::{bsr_to_dense, spmm_with, DenseMatrix, KernelConfig, KernelPath};
use sparse_prox::container::{export_bsr, Checkpoint, Container, Section};
use sparse_prox::optimizer::{sparsity_report, OptimizerConfig, Schedule};
use sparse_prox::prox::{ProxConfig, ProxLambda, ThresholdConvention};
use sparse_prox::toy::{self, LassoProblem, LassoSpec, Split, TinyNetProblem, TinyNetSpec, TrainOptions};
use sparse_prox::{BlockShape, Error};

use crate::settings::{self, Settings};
use crate::{Cli, Command, ExportArgs, InferArgs, ReportArgs, SweepArgs, TrainArgs};

pub const TRAJECTORY_SCHEMA: &str = "psbr-trajectory-v1";
/// Per-run inference times in milliseconds.
pub const TIMINGS_SECTION: &str = "meta/timings_ms";
pub const TRAJECTORY_HEADER: &str = "step,objective,penalty,nonzero_fraction";

/// 2 for numerical divergence, 1 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Divergence { .. } | Error::NonFiniteGradient { .. }) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => settings::load(p)?,
        None => BTreeMap::new(),
    };
    let seed = cli.seed.map(|s| s.to_string());
    match cli.command {
        Command::Train(a) => train(&a, &file, seed),
        Command::ExportBsr(a) => export(&a, &file),
        Command::Infer(a) => infer(&a, &file),
        Command::BenchSweep(a) => sweep(&a, &file, seed),
        Command::Report(a) => report(&a),
    }
}

fn flag(on: bool) -> Option<String> {
    on.then(|| "true".to_owned())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn train_defaults(problem: &str) -> Result<Vec<(&'static str, String)>> {
    let common = |steps: &str, alpha: &str, schedule: &str, mu: &str, every: &str| {
        vec![
            ("problem", problem.to_owned()),
            ("seed", "0".into()),
            ("steps", steps.into()),
            ("alpha", alpha.into()),
            ("beta1", "0.9".into()),
            ("beta2", "0.999".into()),
            ("epsilon_adam", "1e-6".into()),
            ("weight_decay", "0".into()),
            ("schedule", schedule.into()),
            ("prox", "true".into()),
            ("mu", mu.into()),
            ("lambda", "tied".into()),
            ("schedule_prox", "true".into()),
            ("convention", "paper".into()),
            ("ell_max", "3".into()),
            ("reweight_every", every.into()),
            ("epsilon_gamma", "1e-4".into()),
            ("block_shape", "1x1".into()),
            ("pad", "false".into()),
        ]
    };
    Ok(match problem {
        "lasso" => {
            let mut d = common("500", "0.05", "constant", "1.5", "100");
            d.extend([("n", "50".into()), ("d", "20".into()), ("s", "5".into()), ("noise", "0.01".into())]);
            d
        }
        "tinynet" => {
            let mut d = common("2000", "0.01", "cosine", "2", "200");
            let t = TinyNetSpec::default();
            d.extend([
                ("d_in", t.d_in.to_string()),
                ("hidden", t.hidden.to_string()),
                ("classes", t.classes.to_string()),
                ("n_train", t.n_train.to_string()),
                ("n_test", t.n_test.to_string()),
                ("informative", t.informative.to_string()),
            ]);
            d
        }
        other => bail!("unknown problem `{other}` (expected lasso or tinynet)"),
    })
}

fn optimizer_config(s: &Settings, steps: u64) -> Result<OptimizerConfig> {
    let prox = if s.get_bool("prox")? {
        let lambda = match s.raw("lambda") {
            "tied" => ProxLambda::Tied,
            _ => ProxLambda::Fixed(s.get("lambda")?),
        };
        Some(ProxConfig {
            mu: s.get("mu")?,
            lambda,
            epsilon_gamma: s.get("epsilon_gamma")?,
            ell_max: s.get("ell_max")?,
            block: s.get("block_shape")?,
            reweight_every: s.get_opt("reweight_every")?,
            convention: ThresholdConvention::parse(s.raw("convention"))?,
            pad: s.get_bool("pad")?,
        })
    } else {
        None
    };
    let cfg = OptimizerConfig {
        alpha: s.get("alpha")?,
        beta1: s.get("beta1")?,
        beta2: s.get("beta2")?,
        epsilon_adam: s.get("epsilon_adam")?,
        weight_decay: s.get("weight_decay")?,
        schedule: Schedule::parse(s.raw("schedule"))?,
        total_steps: steps,
        prox,
        schedule_prox: s.get_bool("schedule_prox")?,
        ..OptimizerConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: &TrainArgs, file: &BTreeMap<String, String>, seed: Option<String>) -> Result<()> {
    let problem = a
        .problem
        .clone()
        .or_else(|| file.get("problem").cloned())
        .unwrap_or_else(|| "lasso".into());
    let defaults = train_defaults(&problem)?;
    let s = Settings::resolve(
        &defaults,
        file,
        &[
            ("problem", Some(problem.clone())),
            ("seed", seed),
            ("steps", a.steps.clone()),
            ("alpha", a.alpha.clone()),
            ("mu", a.mu.clone()),
            ("lambda", a.lambda.clone()),
            ("ell_max", a.ell_max.clone()),
            ("reweight_every", a.reweight_every.clone()),
            ("schedule", a.schedule.clone()),
            ("convention", a.convention.clone()),
            ("weight_decay", a.weight_decay.clone()),
            ("block_shape", a.block_shape.clone()),
            ("pad", flag(a.pad)),
            ("prox", a.no_prox.then(|| "false".to_owned())),
        ],
    )?;
    let steps: u64 = s.get("steps")?;
    if steps == 0 {
        bail!("steps must be >= 1");
    }
    let seed: u64 = s.get("seed")?;
    let cfg = optimizer_config(&s, steps)?;

    create_dir(&a.out)?;
    let (traj, summary, fixture) = match problem.as_str() {
        "lasso" => {
            let p = LassoProblem::generate(LassoSpec {
                n: s.get("n")?,
                d: s.get("d")?,
                s: s.get("s")?,
                noise_std: s.get("noise")?,
                seed,
            })?;
            let traj = toy::train(&p, &cfg, steps, TrainOptions::default())?;
            let summary = format!("objective {:.6e}", traj.last().objective);
            (traj, summary, Some(p.to_container()?))
        }
        _ => {
            let p = TinyNetProblem::generate(TinyNetSpec {
                d_in: s.get("d_in")?,
                hidden: s.get("hidden")?,
                classes: s.get("classes")?,
                n_train: s.get("n_train")?,
                n_test: s.get("n_test")?,
                informative: s.get("informative")?,
                seed,
            })?;
            let traj = toy::train(&p, &cfg, steps, TrainOptions::default())?;
            let summary = format!(
                "train accuracy {:.4} test accuracy {:.4}",
                p.accuracy(&traj.params, Split::Train)?,
                p.accuracy(&traj.params, Split::Test)?
            );
            (traj, summary, None)
        }
    };

    let config_text = s.to_text("train");
    let ck = Checkpoint { params: traj.params.clone(), state: traj.state.clone(), config: Some(config_text) };
    ck.save(a.out.join("checkpoint.psbr"))
        .with_context(|| format!("cannot write checkpoint into {}", a.out.display()))?;
    if let Some(mut f) = fixture {
        f.set_config_text(&s.to_text("train"))?;
        f.write_to(a.out.join("fixture.psbr"))?;
    }
    let mut csv = s.to_csv_header(TRAJECTORY_SCHEMA, "train");
    csv.push_str(TRAJECTORY_HEADER);
    csv.push('\n');
    for p in &traj.points {
        let _ = writeln!(csv, "{},{},{},{}", p.step, p.objective, p.penalty, p.nonzero_fraction);
    }
    write(&a.out.join("trajectory.csv"), csv)?;

    let report = sparsity_report(&traj.params, BlockShape::ELEMENTWISE);
    println!(
        "{problem}: {} steps, nonzero fraction {:.4}, {summary}",
        traj.points.len(),
        report.global_nonzero_fraction
    );
    Ok(())
}

fn export(a: &ExportArgs, file: &BTreeMap<String, String>) -> Result<()> {
    let s = Settings::resolve(
        &[
            ("block_shape", "1x1".into()),
            ("pad", "false".into()),
            ("transpose", "false".into()),
            ("zero_tol", "0".into()),
        ],
        file,
        &[
            ("block_shape", a.block_shape.clone()),
            ("pad", flag(a.pad)),
            ("transpose", flag(a.transpose)),
            ("zero_tol", a.zero_tol.clone()),
        ],
    )?;
    let mut shape: BlockShape = s.get("block_shape")?;
    if s.get_bool("transpose")? {
        shape = BlockShape { rows: shape.cols, cols: shape.rows };
    }
    let zero_tol: f64 = s.get("zero_tol")?;
    let source = Container::read_from(&a.checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", a.checkpoint.display()))?;
    let mut out = export_bsr(&source, shape, zero_tol, s.get_bool("pad")?)?;
    out.set_config_text(&s.to_text("export-bsr"))?;
    out.write_to(&a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    for sec in &out.sections {
        if sec.is_tensor() {
            println!(
                "{}: {}x{} blocks {} stored {}/{}",
                sec.name,
                sec.matrix.rows(),
                sec.matrix.cols(),
                shape,
                sec.matrix.num_blocks(),
                sec.matrix.grid().num_blocks()
            );
        }
    }
    Ok(())
}

fn pick_tensor<'a>(c: &'a Container, name: Option<&str>, what: &str) -> Result<&'a Section> {
    if let Some(n) = name {
        return c.get(n).ok_or_else(|| anyhow!("{what} has no section `{n}`"));
    }
    let tensors: Vec<&Section> = c.sections.iter().filter(|s| s.is_tensor()).collect();
    match tensors.as_slice() {
        [one] => Ok(one),
        [] => bail!("{what} holds no tensors"),
        many => {
            let names: Vec<&str> = many.iter().map(|s| s.name.as_str()).collect();
            bail!("{what} holds several tensors ({}); choose one", names.join(", "))
        }
    }
}

fn infer(a: &InferArgs, file: &BTreeMap<String, String>) -> Result<()> {
    let s = Settings::resolve(
        &[
            ("tensor", String::new()),
            ("input_tensor", String::new()),
            ("transpose_input", "false".into()),
            ("path", "vectorized".into()),
            ("repeats", "5".into()),
        ],
        file,
        &[
            ("tensor", a.tensor.clone()),
            ("input_tensor", a.input_tensor.clone()),
            ("transpose_input", flag(a.transpose_input)),
            ("path", a.path.clone()),
            ("repeats", a.repeats.clone()),
        ],
    )?;
    let repeats: usize = s.get("repeats")?;
    if repeats == 0 {
        bail!("repeats must be >= 1");
    }
    let path = KernelPath::parse(s.raw("path"))?;
    let weights = Container::read_from(&a.weights).with_context(|| format!("cannot load {}", a.weights.display()))?;
    let input = Container::read_from(&a.input).with_context(|| format!("cannot load {}", a.input.display()))?;
    let opt = |k: &str| Some(s.raw(k)).filter(|v| !v.is_empty());
    let w = pick_tensor(&weights, opt("tensor"), "weights file")?;
    let x = pick_tensor(&input, opt("input_tensor"), "input file")?;
    let mut x = bsr_to_dense(&x.matrix);
    if s.get_bool("transpose_input")? {
        let mut t = DenseMatrix::zeros(x.cols, x.rows);
        for i in 0..x.rows {
            for j in 0..x.cols {
                t.data[j * x.rows + i] = x.data[i * x.cols + j];
            }
        }
        x = t;
    }
    if w.matrix.cols() != x.rows {
        bail!(
            "shape mismatch: weights `{}` are {}x{}, input is {}x{}",
            w.name,
            w.matrix.rows(),
            w.matrix.cols(),
            x.rows,
            x.cols
        );
    }
    let cfg = KernelConfig::fallback(w.matrix.grid().block_rows, sparse_prox::bsr::max_threads());
    let y = spmm_with(&w.matrix, &x, path, &cfg)?;
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        std::hint::black_box(spmm_with(&w.matrix, &x, path, &cfg)?);
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let stats = Stats::from_samples(&samples)?;
    let timings = samples.iter().map(|v| *v as f32).collect();
    let mut out = Container {
        sections: vec![
            Section::dense("output", y.rows, y.cols, y.data)?,
            Section::dense(TIMINGS_SECTION, 1, samples.len(), timings)?,
        ],
    };
    out.set_config_text(&s.to_text("infer"))?;
    out.write_to(&a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    println!("{:.4} / {:.4}", stats.mean_ms, stats.std_ms);
    Ok(())
}

fn sweep(a: &SweepArgs, file: &BTreeMap<String, String>, seed: Option<String>) -> Result<()> {
    let d = SweepConfig::default();
    let join = |v: Vec<String>| v.join(",");
    let s = Settings::resolve(
        &[
            ("d", d.d.to_string()),
            ("batch", d.batch.to_string()),
            ("sparsity", d.sparsity.to_string()),
            ("shapes", join(d.shapes.iter().map(|s| s.to_string()).collect())),
            ("paths", join(d.paths.iter().map(|p| p.as_str().to_owned()).collect())),
            ("modes", join(d.modes.iter().map(|m| m.as_str().to_owned()).collect())),
            ("repeats", d.repeats.to_string()),
            ("seed", d.seed.to_string()),
            ("pad", "false".into()),
            ("threads", d.threads.to_string()),
            ("autotune", "true".into()),
            ("pin_core", "none".into()),
            ("transpose", "false".into()),
        ],
        file,
        &[
            ("d", a.d.clone()),
            ("batch", a.batch.clone()),
            ("sparsity", a.sparsity.clone()),
            ("shapes", a.block_shape.clone().or_else(|| a.shapes.clone())),
            ("paths", a.paths.clone()),
            ("modes", a.modes.clone()),
            ("repeats", a.repeats.clone()),
            ("seed", seed),
            ("pad", flag(a.pad)),
            ("threads", a.threads.clone()),
            ("autotune", a.no_autotune.then(|| "false".to_owned())),
            ("pin_core", a.pin_core.clone()),
            ("transpose", flag(a.transpose)),
        ],
    )?;
    let paths = s
        .raw("paths")
        .split(',')
        .map(KernelPath::parse)
        .collect::<sparse_prox::Result<Vec<_>>>()?;
    let modes = s
        .raw("modes")
        .split(',')
        .map(sparse_prox::Mode::parse)
        .collect::<sparse_prox::Result<Vec<_>>>()?;
    let mut cfg = SweepConfig {
        d: s.get("d")?,
        batch: s.get("batch")?,
        sparsity: s.get("sparsity")?,
        shapes: s.get_list("shapes")?,
        paths,
        modes,
        repeats: s.get("repeats")?,
        seed: s.get("seed")?,
        pad: s.get_bool("pad")?,
        threads: s.get("threads")?,
        autotune: s.get_bool("autotune")?,
        pin_core: s.get_opt("pin_core")?,
    };
    if s.get_bool("transpose")? {
        cfg = cfg.transposed();
    }
    cfg.validate()?;
    create_dir(&a.out)?;
    let mut report = run_sweep(&cfg)?;
    report.resolved = s.map().clone();
    report.resolved.insert("command".into(), "bench-sweep".into());
    write(&a.out.join("sweep.json"), report.to_json()?)?;
    write(&a.out.join("sweep.csv"), report.to_csv())?;
    print!("{}", report.pretty());
    Ok(())
}

fn report(a: &ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&a.report).with_context(|| format!("cannot read {}", a.report.display()))?;
    let r = SweepReport::from_json(&text)?;
    print!("{}", r.pretty());
    Ok(())
}

