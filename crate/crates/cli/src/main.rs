use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use finde_core::config::{RunConfig, Scale};
use finde_core::demo;
use finde_core::eval::{self, SweepSettings};
use finde_core::integrators::IntegratorSpec;
use finde_core::models::{checkpoint, Model};
use finde_core::systems::{self, Normalization, Split, TrajectorySet};
use finde_core::training::{self, Mode};
use finde_core::Error;

#[derive(Parser)]
#[command(
    name = "finde",
    version,
    about = "Learn dynamics with first-integral-preserving projections"
)]
struct Cli {
    /// JSON run configuration layered over the system preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// System to use when no configuration file names one.
    #[arg(long, global = true)]
    system: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output location; defaults to the configured data or run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for the parallel parts.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    scale: Option<ScaleArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum DemoIntegrator {
    Leapfrog,
    Dopri5,
}

#[derive(Clone, Copy, ValueEnum)]
enum DemoFinde {
    None,
    Cfinde,
    Dfinde,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and test datasets.
    Generate,
    /// Train a model on the training set.
    Train {
        /// Dataset root holding train/ and test/.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Roll a trained model out from one test initial state.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        series: usize,
        /// Defaults to the test horizon.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a trained model on the test set.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train and evaluate over the configured K values and trials.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Known mass-spring system with the analytic energy in the bank.
    DemoMassSpring {
        #[arg(long, default_value_t = 0.2)]
        dt: f64,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, value_enum, default_value = "leapfrog")]
        integrator: DemoIntegrator,
        #[arg(long, value_enum, default_value = "none")]
        finde: DemoFinde,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FINDE_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn load_config(cli: &Cli) -> finde_core::Result<RunConfig> {
    let mut doc = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => serde_json::json!({}),
    };
    if let Some(name) = &cli.system {
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| Error::Config("configuration must be a JSON object".into()))?;
        match obj.get_mut("system") {
            Some(serde_json::Value::Object(s)) => {
                s.insert("name".into(), name.as_str().into());
            }
            _ => {
                obj.insert("system".into(), name.as_str().into());
            }
        }
    }
    if let Some(seed) = cli.seed {
        if let Some(obj) = doc.as_object_mut() {
            obj.insert("seed".into(), seed.into());
        }
    }
    let scale = cli.scale.map(|s| match s {
        ScaleArg::Desk => Scale::Desk,
        ScaleArg::Paper => Scale::Paper,
    });
    RunConfig::from_value(doc, scale)
}

fn run(cli: &Cli) -> finde_core::Result<()> {
    match &cli.command {
        Command::Generate => generate(cli),
        Command::Train { data } => train(cli, data.as_deref()),
        Command::Predict {
            checkpoint,
            data,
            series,
            steps,
        } => predict(cli, checkpoint.as_deref(), data.as_deref(), *series, *steps),
        Command::Eval { checkpoint, data } => evaluate(cli, checkpoint.as_deref(), data.as_deref()),
        Command::Sweep { data } => sweep(cli, data.as_deref()),
        Command::DemoMassSpring {
            dt,
            steps,
            integrator,
            finde,
        } => demo_mass_spring(cli, *dt, *steps, *integrator, *finde),
    }
}

fn generate(cli: &Cli) -> finde_core::Result<()> {
    let cfg = load_config(cli)?;
    let root = cli.out.clone().unwrap_or_else(|| cfg.paths.data.clone());
    let train = systems::generate(&cfg.train_spec(), Split::Train)?;
    let mut test = systems::generate(&cfg.test_spec(), Split::Test)?;
    // Evaluation z-scores with the training statistics.
    test.normalization = train.normalization.clone();
    train.save(&root.join("train"))?;
    test.save(&root.join("test"))?;
    println!(
        "{}: {} train x {} steps, {} test x {} steps -> {}",
        cfg.system.name,
        train.n_series,
        train.n_steps,
        test.n_series,
        test.n_steps,
        root.display()
    );
    audit(&train, "train");
    audit(&test, "test");
    Ok(())
}

/// Prints the largest relative drift of each catalog invariant.
fn audit(set: &TrajectorySet, label: &str) {
    let catalog = set.system.catalog();
    let mut worst = vec![0.0f64; catalog.entries.len()];
    for i in 0..set.n_series {
        let d = catalog.max_relative_drift(set.series(i), set.n_state, &set.metadata[i]);
        for (w, x) in worst.iter_mut().zip(d) {
            *w = w.max(x);
        }
    }
    for (name, w) in catalog.names().iter().zip(worst) {
        println!("audit {label} {name}: max relative drift {w:.3e}");
    }
}

fn data_root(cfg: &RunConfig, data: Option<&Path>) -> PathBuf {
    data.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.data.clone())
}

fn run_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| cfg.paths.run.clone())
}

fn check_system(cfg: &RunConfig, set: &TrajectorySet) -> finde_core::Result<()> {
    if set.system != cfg.system.name {
        return Err(Error::Config(format!(
            "dataset holds {} but the configuration names {}",
            set.system, cfg.system.name
        )));
    }
    Ok(())
}

fn train(cli: &Cli, data: Option<&Path>) -> finde_core::Result<()> {
    let cfg = load_config(cli)?;
    let set = TrajectorySet::load(&data_root(&cfg, data).join("train"))?;
    check_system(&cfg, &set)?;
    let dir = run_dir(cli, &cfg);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let mut model = Model::new(cfg.model_spec(cfg.model.k, cfg.seed)?)?;
    let report = training::train(
        &mut model,
        &set,
        &cfg.train_config(),
        cfg.finde.mode(),
        &cfg.eval.projection,
        Some(&dir),
    )?;
    println!(
        "trained {} iterations, final loss {:.6e} -> {}",
        report.losses.len(),
        report.final_loss().unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(())
}

fn load_model(cfg: &RunConfig, path: Option<&Path>) -> finde_core::Result<Model> {
    let path = path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.run.join("model.finde"));
    let (model, _) = checkpoint::load(&path)?;
    if model.n_state() != cfg.system.name.n_state() {
        return Err(Error::Config(format!(
            "checkpoint state width {} does not match {}",
            model.n_state(),
            cfg.system.name
        )));
    }
    Ok(model)
}

/// Test set plus the statistics used to z-score it.
fn load_test(cfg: &RunConfig, data: Option<&Path>) -> finde_core::Result<(TrajectorySet, Normalization)> {
    let root = data_root(cfg, data);
    let test = TrajectorySet::load(&root.join("test"))?;
    check_system(cfg, &test)?;
    let norm = match &test.normalization {
        Some(n) => n.clone(),
        None => TrajectorySet::load(&root.join("train"))?
            .normalization
            .ok_or_else(|| Error::Dataset("no normalization statistics in the dataset".into()))?,
    };
    Ok((test, norm))
}

fn predict(
    cli: &Cli,
    ckpt: Option<&Path>,
    data: Option<&Path>,
    series: usize,
    steps: Option<usize>,
) -> finde_core::Result<()> {
    let cfg = load_config(cli)?;
    let model = load_model(&cfg, ckpt)?;
    let (test, _) = load_test(&cfg, data)?;
    if series >= test.n_series {
        return Err(Error::Config(format!(
            "series {series} out of range ({} available)",
            test.n_series
        )));
    }
    let steps = steps.unwrap_or(test.n_steps);
    let r = eval::rollout(&model, test.state(series, 0), steps, test.dt, &cfg.eval_config());
    let path = cli.out.clone().unwrap_or_else(|| cfg.paths.run.join("predict.csv"));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["step".to_string(), "t".to_string()];
    header.extend((0..test.n_state).map(|i| format!("u{i}")));
    w.write_record(&header)?;
    for s in 0..r.len() {
        let mut row = vec![s.to_string(), (s as f64 * test.dt).to_string()];
        row.extend(r.state(s).iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    if let Some((s, e)) = &r.failure {
        eprintln!("rollout stopped after step {s}: {e}");
    }
    println!("{} states -> {}", r.len(), path.display());
    Ok(())
}

fn evaluate(cli: &Cli, ckpt: Option<&Path>, data: Option<&Path>) -> finde_core::Result<()> {
    let cfg = load_config(cli)?;
    let model = load_model(&cfg, ckpt)?;
    let (test, norm) = load_test(&cfg, data)?;
    let report = eval::evaluate(&model, &test, &norm, &cfg.eval_config())?;
    let dir = cli.out.clone().unwrap_or_else(|| cfg.paths.run.join("eval"));
    report.write(&dir)?;
    write_learned_values(&model, &test, &dir.join("learned_v.csv"))?;
    println!(
        "median VPT {:.4} (std {:.4}), median 1-step {:.4e} (x1e-9), {} failed rollouts",
        report.median_vpt, report.std_vpt, report.median_one_step_scaled, report.failures
    );
    if let Some(d) = report.max_bank_drift {
        println!("max first-integral drift along rollouts {d:.3e}");
    }
    println!("report -> {}", dir.display());
    Ok(())
}

/// Bank values at every ground-truth test state, for external regression.
fn write_learned_values(model: &Model, test: &TrajectorySet, path: &Path) -> finde_core::Result<()> {
    let k = model.bank.k();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["series".to_string(), "step".to_string()];
    header.extend((0..test.n_state).map(|i| format!("u{i}")));
    header.extend((0..k).map(|i| format!("V{i}")));
    w.write_record(&header)?;
    for i in 0..test.n_series {
        let states = test.series(i);
        let values = if k > 0 { model.bank_values(states)? } else { Vec::new() };
        for (s, u) in states.chunks(test.n_state).enumerate() {
            let mut row = vec![i.to_string(), s.to_string()];
            row.extend(u.iter().map(|x| x.to_string()));
            row.extend(values[s * k..(s + 1) * k].iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn sweep(cli: &Cli, data: Option<&Path>) -> finde_core::Result<()> {
    let cfg = load_config(cli)?;
    let root = data_root(&cfg, data);
    let train = TrajectorySet::load(&root.join("train"))?;
    check_system(&cfg, &train)?;
    let (test, norm) = load_test(&cfg, data)?;
    let mode = match cfg.finde.mode() {
        Mode::Base => Mode::Cfinde,
        m => m,
    };
    let settings = SweepSettings {
        ks: cfg.sweep.ks.clone(),
        trials: cfg.sweep.trials,
        mode,
        train: cfg.train_config(),
        eval: cfg.eval_config(),
        train_eval_series: cfg.system.test_series,
    };
    let rows = eval::ksweep(&train, &test, &norm, |k, seed| cfg.model_spec(k, seed), &settings)?;
    let dir = cli.out.clone().unwrap_or_else(|| cfg.paths.run.join("sweep"));
    fs::create_dir_all(&dir)?;
    eval::write_sweep_csv(&rows, &dir.join("sweep.csv"))?;
    fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&rows)?)?;
    for r in &rows {
        println!(
            "K={} train VPT {:.4} test VPT {:.4} failures {}/{}",
            r.k,
            r.median_train_vpt,
            r.median_test_vpt,
            r.failures,
            r.trials.len()
        );
    }
    println!("sweep -> {}", dir.display());
    Ok(())
}

fn demo_mass_spring(
    cli: &Cli,
    dt: f64,
    steps: usize,
    integrator: DemoIntegrator,
    finde: DemoFinde,
) -> finde_core::Result<()> {
    if !(dt > 0.0) {
        return Err(Error::Config("dt must be positive".into()));
    }
    let integrator = match integrator {
        DemoIntegrator::Leapfrog => IntegratorSpec::Leapfrog,
        DemoIntegrator::Dopri5 => IntegratorSpec::dopri5(),
    };
    let mode = match finde {
        DemoFinde::None => Mode::Base,
        DemoFinde::Cfinde => Mode::Cfinde,
        DemoFinde::Dfinde => Mode::Dfinde,
    };
    let rows = demo::run_mass_spring(dt, steps, integrator, mode);
    let path = cli.out.clone().unwrap_or_else(|| PathBuf::from("demo_mass_spring.csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    demo::write_csv(&rows, &path)?;
    println!(
        "{} rows, max |E - 0.5| = {:.3e} -> {}",
        rows.len(),
        demo::max_energy_error(&rows),
        path.display()
    );
    if rows.len() < steps + 1 {
        eprintln!("the solver stopped after {} steps", rows.len() - 1);
    }
    Ok(())
}
