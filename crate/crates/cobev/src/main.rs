//! Thin command-line front end over the `cobev` library.
//!
//! Every subcommand resolves its settings the same way: built-in defaults,
//! overridden by `--config <file.toml>`, overridden by the handful of global
//! flags. Artifacts land in `--out` and each run leaves a `manifest.json`
//! describing exactly what was written and under which settings.
//!
//! Exit codes: 0 on success, 1 for usage/configuration/parse/io problems,
//! 2 when a computation produced non-finite numbers.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cobev::bev::AgentType;
use cobev::detection::BoxBev;
use cobev::geometry::{NoiseKind, Pose};
use cobev::harness::model::Ablation;
use cobev::harness::report::{
    read_sweep_csv, render_line_chart, write_ablation_csv, write_history_csv, write_sweep_csv,
    Manifest, Series,
};
use cobev::harness::scenario::AgentFrame;
use cobev::harness::sweep::{run_ablation, run_noise_sweep, sweep_model, SweepRow};
use cobev::harness::train::{evaluate, nth_scenario, train_model, Checkpoint, EvalMetrics};
use cobev::harness::Config;
use cobev::{Error, Real, Result};

#[derive(Parser)]
#[command(
    name = "cobev",
    version,
    about = "Collaborative BEV perception workbench on synthetic scenes"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Base seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory artifacts are written into.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs/latest")]
    out: PathBuf,
    /// Accepted for symmetry with other tools; runs are bit-reproducible
    /// with or without it.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Noise family for evaluation draws: gaussian or laplace.
    #[arg(long, global = true, value_name = "FAMILY", value_parser = parse_noise_kind)]
    noise_dist: Option<NoiseKind>,
    /// Comma-separated noise levels, each read as meters and degrees.
    #[arg(long, global = true, value_name = "L0,L1,..", value_delimiter = ',', allow_negative_numbers = true)]
    levels: Option<Vec<Real>>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full model and save a checkpoint plus its loss history.
    Train,
    /// Evaluate a checkpoint (or a freshly trained model) at one noise level.
    Eval {
        /// Checkpoint produced by `train` or `sweep`; trains anew if absent.
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
    },
    /// Evaluate across noise levels and chart the robustness curve.
    Sweep {
        /// Checkpoint produced by `train`; trains anew if absent.
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
    },
    /// Train every rung of the cumulative stage ladder and tabulate it.
    Ablate,
    /// Write synthetic scenes to disk: one point-cloud file per agent view
    /// plus a ground-truth JSON.
    Gen {
        /// Number of scenes to write.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Re-render charts and the manifest from CSV tables already in --out.
    Report,
}

fn parse_noise_kind(text: &str) -> std::result::Result<NoiseKind, String> {
    match text {
        "gaussian" => Ok(NoiseKind::Gaussian),
        "laplace" => Ok(NoiseKind::Laplace),
        other => Err(format!("unknown noise family '{other}' (expected gaussian or laplace)")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite(_) | Error::Singular(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    std::fs::create_dir_all(&cli.common.out)?;
    match cli.command {
        Command::Train => cmd_train(&cfg, &cli.common),
        Command::Eval { model } => cmd_eval(&cfg, &cli.common, model.as_deref()),
        Command::Sweep { model } => cmd_sweep(&cfg, &cli.common, model.as_deref()),
        Command::Ablate => cmd_ablate(&cfg, &cli.common),
        Command::Gen { count } => cmd_gen(&cfg, &cli.common, count),
        Command::Report => cmd_report(&cfg, &cli.common),
    }
}

fn cmd_train(cfg: &Config, common: &Common) -> Result<()> {
    let bundle = train_model(cfg, Ablation::full(), common.seed)?;
    let ckpt_path = common.out.join("checkpoint.json");
    Checkpoint::capture(&bundle.model, cfg, common.seed).save(&ckpt_path)?;
    write_history_csv(&common.out.join("history.csv"), &bundle.history)?;
    let metrics = evaluate(&bundle.model, cfg, &cfg.noise_spec(), common.seed)?;
    println!("trained {} epochs; {}", bundle.history.len(), describe(&metrics));
    println!("checkpoint: {}", ckpt_path.display());
    save_manifest(cfg, common, &["checkpoint.json", "history.csv"])
}

fn cmd_eval(cfg: &Config, common: &Common, model_path: Option<&Path>) -> Result<()> {
    let model = load_or_train(cfg, common, model_path)?;
    let mut spec = cfg.noise_spec();
    if let Some(kind) = common.noise_dist {
        spec.kind = kind;
    }
    let metrics = evaluate(&model, cfg, &spec, common.seed)?;
    println!("{:?} sigma_t={}m sigma_r={}deg: {}", spec.kind, cfg.noise.sigma_t, cfg.noise.sigma_r, describe(&metrics));
    let row = format!("{}/{},{:.4},{:.4}", cfg.noise.sigma_t, cfg.noise.sigma_r, metrics.ap50, metrics.ap70);
    cobev::harness::report::write_csv(
        &common.out.join("eval.csv"),
        cobev::harness::sweep::SWEEP_HEADER,
        &[row],
    )?;
    save_manifest(cfg, common, &["eval.csv"])
}

fn cmd_sweep(cfg: &Config, common: &Common, model_path: Option<&Path>) -> Result<()> {
    let kinds: Vec<NoiseKind> = match common.noise_dist {
        Some(kind) => vec![kind],
        None => vec![NoiseKind::Gaussian, NoiseKind::Laplace],
    };
    let levels = common.levels.clone().unwrap_or_else(|| cfg.eval.sweep_levels.clone());
    let mut artifacts: Vec<String> = Vec::new();
    let sweeps: Vec<Vec<SweepRow>> = match model_path {
        Some(path) => {
            let model = Checkpoint::load(path)?.restore(cfg)?;
            kinds
                .iter()
                .map(|&kind| sweep_model(&model, cfg, kind, &levels, common.seed))
                .collect::<Result<_>>()?
        }
        None => {
            let (bundle, sweeps) = run_noise_sweep(cfg, &kinds, &levels, common.seed)?;
            let ckpt_path = common.out.join("checkpoint.json");
            Checkpoint::capture(&bundle.model, cfg, common.seed).save(&ckpt_path)?;
            artifacts.push("checkpoint.json".into());
            sweeps
        }
    };
    for (kind, rows) in kinds.iter().zip(&sweeps) {
        let name = format!("sweep_{}.csv", family_slug(*kind));
        write_sweep_csv(&common.out.join(&name), rows)?;
        println!("{kind:?}:");
        for row in rows {
            println!("  {}", row.csv_line());
        }
        artifacts.push(name);
    }
    let chart = render_robustness_chart(&kinds, &sweeps);
    std::fs::write(common.out.join("robustness.svg"), chart)?;
    artifacts.push("robustness.svg".into());
    let names: Vec<&str> = artifacts.iter().map(String::as_str).collect();
    save_manifest(cfg, common, &names)
}

fn cmd_ablate(cfg: &Config, common: &Common) -> Result<()> {
    let rows = run_ablation(cfg, common.seed)?;
    write_ablation_csv(&common.out.join("ablation.csv"), &rows)?;
    println!("{:<16} {:>8} {:>8} {:>10}", "variant", "ap50", "ap70", "trainable");
    for row in &rows {
        println!(
            "{:<16} {:>8.4} {:>8.4} {:>10}",
            row.name, row.metrics.ap50, row.metrics.ap70, row.trainable
        );
    }
    save_manifest(cfg, common, &["ablation.csv"])
}

/// Per-agent entry of a generated scene's ground-truth file.
#[derive(Serialize)]
struct AgentRecord {
    file: String,
    agent_type: AgentType,
    pose: Pose,
    capture_time: Real,
    points: usize,
}

/// Ground truth written next to each generated scene.
#[derive(Serialize)]
struct SceneTruth {
    seed: u64,
    index: usize,
    agents: Vec<AgentRecord>,
    boxes: Vec<BoxBev>,
}

fn cmd_gen(cfg: &Config, common: &Common, count: usize) -> Result<()> {
    let meta = cfg.meta();
    for k in 0..count {
        let sc = nth_scenario(cfg, &meta, common.seed, "scenario", k as u64)?;
        let dir = common.out.join(format!("scene_{k:03}"));
        std::fs::create_dir_all(&dir)?;
        let mut agents = Vec::new();
        write_agent(&dir, "ego_now", &sc.ego_now, &mut agents)?;
        write_agent(&dir, "ego_prev", &sc.ego_prev, &mut agents)?;
        for (i, remote) in sc.remotes.iter().enumerate() {
            write_agent(&dir, &format!("infra_{i}"), remote, &mut agents)?;
        }
        let truth =
            SceneTruth { seed: common.seed, index: k, agents, boxes: sc.ground_truth() };
        let text = serde_json::to_string_pretty(&truth)
            .map_err(|e| Error::Config(format!("truth serialization: {e}")))?;
        std::fs::write(dir.join("truth.json"), text + "\n")?;
    }
    println!("wrote {count} scene(s) under {}", common.out.display());
    save_manifest(cfg, common, &[])
}

fn write_agent(
    dir: &Path,
    name: &str,
    frame: &AgentFrame,
    agents: &mut Vec<AgentRecord>,
) -> Result<()> {
    let file = format!("{name}.txt");
    frame.cloud.write_file(&dir.join(&file))?;
    agents.push(AgentRecord {
        file,
        agent_type: frame.agent_type,
        pose: frame.pose,
        capture_time: frame.capture_time,
        points: frame.cloud.len(),
    });
    Ok(())
}

fn cmd_report(cfg: &Config, common: &Common) -> Result<()> {
    let mut artifacts: Vec<String> = Vec::new();
    let mut kinds = Vec::new();
    let mut sweeps = Vec::new();
    for kind in [NoiseKind::Gaussian, NoiseKind::Laplace] {
        let name = format!("sweep_{}.csv", family_slug(kind));
        let path = common.out.join(&name);
        if !path.exists() {
            continue;
        }
        let mut rows = Vec::new();
        for (label, ap50, ap70) in read_sweep_csv(&path)? {
            let level: Real = label
                .split('/')
                .next()
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::Parse(format!("{name}: bad level label '{label}'")))?;
            rows.push((level, ap50, ap70));
        }
        artifacts.push(name);
        kinds.push(kind);
        sweeps.push(rows);
    }
    if kinds.is_empty() {
        return Err(Error::Config(format!(
            "no sweep tables found under {}; run `cobev sweep` first",
            common.out.display()
        )));
    }
    let series: Vec<Series> = kinds
        .iter()
        .zip(&sweeps)
        .flat_map(|(kind, rows)| sweep_series(*kind, rows))
        .collect();
    let chart = render_line_chart(
        "detection vs localization error",
        "noise level (m, deg)",
        "average precision",
        &series,
    );
    std::fs::write(common.out.join("robustness.svg"), chart)?;
    artifacts.push("robustness.svg".into());
    for extra in ["ablation.csv", "history.csv", "eval.csv", "checkpoint.json"] {
        if common.out.join(extra).exists() {
            artifacts.push(extra.into());
        }
    }
    println!("rendered robustness.svg from {} table(s)", kinds.len());
    let names: Vec<&str> = artifacts.iter().map(String::as_str).collect();
    save_manifest(cfg, common, &names)
}

fn load_or_train(cfg: &Config, common: &Common, model_path: Option<&Path>) -> Result<cobev::harness::Model> {
    match model_path {
        Some(path) => Checkpoint::load(path)?.restore(cfg),
        None => {
            let bundle = train_model(cfg, Ablation::full(), common.seed)?;
            let ckpt_path = common.out.join("checkpoint.json");
            Checkpoint::capture(&bundle.model, cfg, common.seed).save(&ckpt_path)?;
            Ok(bundle.model)
        }
    }
}

fn family_slug(kind: NoiseKind) -> &'static str {
    match kind {
        NoiseKind::Gaussian => "gaussian",
        NoiseKind::Laplace => "laplace",
    }
}

fn sweep_series(kind: NoiseKind, rows: &[(Real, Real, Real)]) -> Vec<Series> {
    let slug = family_slug(kind);
    vec![
        Series {
            name: format!("{slug} ap50"),
            points: rows.iter().map(|r| (r.0, r.1)).collect(),
        },
        Series {
            name: format!("{slug} ap70"),
            points: rows.iter().map(|r| (r.0, r.2)).collect(),
        },
    ]
}

fn render_robustness_chart(kinds: &[NoiseKind], sweeps: &[Vec<SweepRow>]) -> String {
    let series: Vec<Series> = kinds
        .iter()
        .zip(sweeps)
        .flat_map(|(kind, rows)| {
            let triples: Vec<(Real, Real, Real)> =
                rows.iter().map(|r| (r.level, r.metrics.ap50, r.metrics.ap70)).collect();
            sweep_series(*kind, &triples)
        })
        .collect();
    render_line_chart(
        "detection vs localization error",
        "noise level (m, deg)",
        "average precision",
        &series,
    )
}

fn describe(m: &EvalMetrics) -> String {
    format!("ap50 {:.4} ap70 {:.4} ({} detections)", m.ap50, m.ap70, m.detections)
}

fn save_manifest(cfg: &Config, common: &Common, artifacts: &[&str]) -> Result<()> {
    Manifest::new(cfg, common.seed)
        .with_artifacts(artifacts)
        .save(&common.out.join("manifest.json"))
}
