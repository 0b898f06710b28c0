use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Duration;

use agrolearn::config;
use agrolearn::env::{EnvFactory, ScenarioName};
use agrolearn::eval::{
    coverage_comparison, coverage_text, ensemble_report, evaluate, robustness_report, sensitivity_analysis,
    CoverageRow, EnsembleReport, EvalConfig, MetricsRecord, RobustnessTable, SensitivityTable,
};
use agrolearn::protocol::{self, ChildTransport, RemoteEnv, StdioTransport};
use agrolearn::rnd::CoverageGrid;
use agrolearn::trainer::{read_metrics_csv, seed_dir, train_seeds, Manifest, TrainOptions};
use agrolearn::{Environment, Error, Result, RunConfig, ScenarioConfig, SurrogateEnv};

use crate::policy;
use crate::{
    BackendArgs, Command, ConfigArgs, CoverageArgs, DefaultsArgs, EvalArgs, EvaluateArgs, OutputArgs, ReportArgs,
    SensitivityArgs, SweepArgs, TrainArgs, OUT_ENV,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Sweep(a) => sweep(a),
        Command::Sensitivity(a) => sensitivity(a),
        Command::Coverage(a) => coverage(a),
        Command::ProtocolServe(a) => protocol_serve(a),
        Command::Report(a) => report(a),
        Command::Defaults(a) => defaults(a),
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    match &args.config {
        Some(path) => config::load(path),
        None => {
            let name: ScenarioName = args.scenario.parse()?;
            Ok(RunConfig::for_scenario(ScenarioConfig::by_name(name)))
        }
    }
}

/// Creates `<root>/<run_id>`, with a numeric suffix if the stamp is taken.
fn run_dir(out: &OutputArgs, verb: &str) -> Result<(PathBuf, String)> {
    let root = out
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let base = out
        .run_id
        .clone()
        .unwrap_or_else(|| format!("{verb}-{}", chrono::Local::now().format("%Y%m%d-%H%M%S")));
    let mut id = base.clone();
    let mut k = 2;
    while out.run_id.is_none() && root.join(&id).exists() {
        id = format!("{base}-{k}");
        k += 1;
    }
    fs::create_dir_all(root.join(&id))?;
    Ok((root, id))
}

fn factory(cfg: &RunConfig, backend: &BackendArgs) -> Result<Box<EnvFactory>> {
    let Some(command) = &backend.env_command else {
        return Ok(cfg.surrogate_factory());
    };
    let argv: Vec<String> = command.split_whitespace().map(str::to_string).collect();
    if argv.is_empty() {
        return Err(Error::Config("--env-command is empty".into()));
    }
    if !(backend.env_timeout > 0.0 && backend.env_timeout.is_finite()) {
        return Err(Error::Config("--env-timeout must be positive".into()));
    }
    let timeout = Duration::from_secs_f64(backend.env_timeout);
    Ok(Box::new(move || {
        let transport = ChildTransport::spawn(&argv, timeout)?;
        Ok(Box::new(RemoteEnv::connect(transport)?) as Box<dyn Environment>)
    }))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(seeds) = a.seeds {
        cfg.seeds = seeds;
    }
    if let Some(n) = a.episodes {
        cfg.total_episodes = n;
    }
    if cfg.seeds.is_empty() {
        return Err(Error::Config("no seeds to train".into()));
    }
    cfg.validate()?;
    let envs = factory(&cfg, &a.backend)?;
    let (root, id) = run_dir(&a.output, "train")?;
    config::save(&cfg, &root.join(&id).join("config.toml"))?;
    let opts = TrainOptions {
        progress_every: a.progress,
    };
    let runs = train_seeds(&cfg, &cfg.seeds, envs.as_ref(), &opts)?;
    for run in &runs {
        let dir = seed_dir(&root, &id, run.seed);
        let m = run.write_to(&dir, &id)?;
        let best = m.ensemble.first().map(|e| e.validation_score).unwrap_or(f64::NAN);
        println!(
            "seed {:>6}: {} episodes{}, best validation {best:.1}, coverage {:.4} -> {}",
            run.seed,
            m.episodes_run,
            m.stopped_early_at
                .map(|e| format!(" (stopped early at {e})"))
                .unwrap_or_default(),
            m.coverage,
            dir.display()
        );
    }
    println!("run {}", root.join(&id).display());
    Ok(())
}

fn eval_setup(e: &EvalArgs) -> Result<(RunConfig, EvalConfig, Box<EnvFactory>)> {
    let cfg = load_config(&e.config)?;
    let ec = EvalConfig {
        seeds: e.seeds.clone().unwrap_or_else(|| cfg.seeds.clone()),
        episodes_per_seed: e.episodes_per_seed,
        moisture_layers: cfg.noise.moisture_layers,
    };
    ec.validate()?;
    let envs = factory(&cfg, &e.backend)?;
    Ok((cfg, ec, envs))
}

fn metrics_text(m: &MetricsRecord) -> String {
    let opt = |x: Option<f64>| x.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
    format!(
        "condition {}\nepisodes {}\nscore {:.2} ± {:.2}\nyield {:.1} ± {:.1} kg/ha\nirrigation {:.1} mm\nnitrogen {:.1} kg/ha\nleached {:.2} kg/ha\nWUE {}\nNUE {}\n",
        m.condition.name(),
        m.samples,
        m.score_mean,
        m.score_std,
        m.yield_mean,
        m.yield_std,
        m.irrigation_mean,
        m.nitrogen_mean,
        m.leached_mean,
        opt(m.wue_mean),
        opt(m.nue_mean)
    )
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    if a.members {
        let (members, last) = policy::load_members(Path::new(&a.policy))?;
        let (_, ec, envs) = eval_setup(&a.eval)?;
        let report = ensemble_report(&members, &last, envs.as_ref(), &ec, a.condition)?;
        let (root, id) = run_dir(&a.eval.output, "evaluate")?;
        write_json(&root.join(&id).join("ensemble.json"), &report)?;
        print!("{}", report.to_text());
        return Ok(());
    }
    let p = policy::load(&a.policy)?;
    let (_, ec, envs) = eval_setup(&a.eval)?;
    let m = evaluate(&p, envs.as_ref(), &ec, a.condition)?;
    let (root, id) = run_dir(&a.eval.output, "evaluate")?;
    write_json(&root.join(&id).join("evaluation.json"), &m)?;
    print!("{}", metrics_text(&m));
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let p = policy::load(&a.policy)?;
    let b = policy::load(&a.baseline)?;
    let (_, ec, envs) = eval_setup(&a.eval)?;
    let table = robustness_report((&a.names[0], &p), (&a.names[1], &b), envs.as_ref(), &ec, &a.conditions)?;
    let (root, id) = run_dir(&a.eval.output, "sweep")?;
    let dir = root.join(&id);
    write_json(&dir.join("robustness.json"), &table)?;
    table.write_csv(BufWriter::new(File::create(dir.join("robustness.csv"))?))?;
    print!("{}", table.to_text());
    Ok(())
}

fn sensitivity(a: SensitivityArgs) -> Result<()> {
    let p = policy::load(&a.policy)?;
    let (_, ec, envs) = eval_setup(&a.eval)?;
    let table = sensitivity_analysis(&p, envs.as_ref(), &ec)?;
    let (root, id) = run_dir(&a.eval.output, "sensitivity")?;
    let dir = root.join(&id);
    write_json(&dir.join("sensitivity.json"), &table)?;
    table.write_csv(BufWriter::new(File::create(dir.join("sensitivity.csv"))?))?;
    print!("{}", table.to_text());
    Ok(())
}

fn seed_dirs(run: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(run)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("seed_")))
        .collect();
    dirs.sort_by_key(|p| {
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        (
            name.trim_start_matches("seed_").parse::<u64>().unwrap_or(u64::MAX),
            name,
        )
    });
    Ok(dirs)
}

fn coverage(a: CoverageArgs) -> Result<()> {
    let names: Vec<String> = match &a.names {
        Some(n) if n.len() != a.runs.len() => {
            return Err(Error::Config(format!("{} names for {} runs", n.len(), a.runs.len())))
        }
        Some(n) => n.clone(),
        None => a
            .runs
            .iter()
            .map(|p| {
                p.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default()
            })
            .collect(),
    };
    let mut grids: Vec<Vec<CoverageGrid>> = Vec::new();
    for run in &a.runs {
        let mut g = Vec::new();
        for dir in seed_dirs(run)? {
            let text = fs::read_to_string(dir.join("coverage.json"))?;
            g.push(serde_json::from_str::<CoverageGrid>(&text)?);
        }
        if g.is_empty() {
            return Err(Error::Config(format!("{} holds no seed directories", run.display())));
        }
        grids.push(g);
    }
    let configs: Vec<(String, Vec<&CoverageGrid>)> = names
        .into_iter()
        .zip(&grids)
        .map(|(n, g)| (n, g.iter().collect()))
        .collect();
    let rows = coverage_comparison(&configs)?;
    let (root, id) = run_dir(&a.output, "coverage")?;
    write_json(&root.join(&id).join("coverage.json"), &rows)?;
    print!("{}", coverage_text(&rows));
    Ok(())
}

fn protocol_serve(a: ConfigArgs) -> Result<()> {
    let cfg = load_config(&a)?;
    let mut env = SurrogateEnv::new(cfg.scenario, cfg.reward)?;
    protocol::serve(&mut env, &mut StdioTransport::new())
}

fn training_summary(run: &Path) -> Result<Option<String>> {
    let dirs = seed_dirs(run)?;
    if dirs.is_empty() {
        return Ok(None);
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:>9} {:>14} {:>12} {:>10} {:>10}",
        "Seed", "Episodes", "Best val.", "Last-50", "Coverage", "Stopped"
    );
    for dir in dirs {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let rows = read_metrics_csv(File::open(dir.join("metrics.csv"))?)?;
        let tail: Vec<f64> = rows.iter().rev().take(50).map(|r| r.score).collect();
        let tail_mean = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
        let best = m
            .ensemble
            .first()
            .map(|e| format!("{:.1}", e.validation_score))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<8} {:>9} {:>14} {:>12.1} {:>9.2}% {:>10}",
            m.seed,
            m.episodes_run,
            best,
            tail_mean,
            100.0 * m.coverage,
            m.stopped_early_at.map(|e| e.to_string()).unwrap_or_else(|| "-".into())
        );
    }
    Ok(Some(s))
}

fn report(a: ReportArgs) -> Result<()> {
    if !a.run.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", a.run.display())));
    }
    let mut sections: Vec<(String, String)> = Vec::new();
    if let Some(t) = training_summary(&a.run)? {
        sections.push(("Training".into(), t));
    }
    let sens = a.run.join("sensitivity.json");
    if sens.exists() {
        let t: SensitivityTable = serde_json::from_str(&fs::read_to_string(sens)?)?;
        sections.push(("Sensitivity".into(), t.to_text()));
    }
    let rob = a.run.join("robustness.json");
    if rob.exists() {
        let t: RobustnessTable = serde_json::from_str(&fs::read_to_string(rob)?)?;
        sections.push(("Robustness".into(), t.to_text()));
    }
    let cov = a.run.join("coverage.json");
    if cov.exists() && seed_dirs(&a.run)?.is_empty() {
        let rows: Vec<CoverageRow> = serde_json::from_str(&fs::read_to_string(cov)?)?;
        sections.push(("Coverage".into(), coverage_text(&rows)));
    }
    let ev = a.run.join("evaluation.json");
    if ev.exists() {
        let m: MetricsRecord = serde_json::from_str(&fs::read_to_string(ev)?)?;
        sections.push(("Evaluation".into(), metrics_text(&m)));
    }
    let ens = a.run.join("ensemble.json");
    if ens.exists() {
        let r: EnsembleReport = serde_json::from_str(&fs::read_to_string(ens)?)?;
        sections.push(("Ensemble".into(), r.to_text()));
    }
    if sections.is_empty() {
        return Err(Error::Config(format!(
            "{} holds no agrolearn artifacts",
            a.run.display()
        )));
    }
    let text: String = sections
        .iter()
        .map(|(title, body)| format!("== {title} ==\n{body}"))
        .collect::<Vec<_>>()
        .join("\n");
    fs::write(a.run.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn defaults(a: DefaultsArgs) -> Result<()> {
    let configs = config::default_configs()?;
    match a.write {
        Some(dir) => {
            fs::create_dir_all(&dir)?;
            for (name, text) in configs {
                let path = dir.join(name);
                fs::write(&path, text)?;
                println!("{}", path.display());
            }
        }
        None => {
            for (name, text) in configs {
                println!("# ---- {name} ----\n{text}");
            }
        }
    }
    Ok(())
}
