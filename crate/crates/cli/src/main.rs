//! `situ3d`: generate data, train, evaluate, run ablations and plot episodes.

mod config_io;
mod svg;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use situ3d::config::RunConfig;
use situ3d::eval::{
    ablation_cells, ablation_table, predict_all, run_ablation_suite, run_experiment, score, PreparedScenes,
};
use situ3d::scenegen::{generate_dataset, Dataset, EPISODES_FILE};
use situ3d::situnet::{prepare_episodes, EpochLog, SitNet, MODEL_HEADER_FILE};
use situ3d::tinynn::write_atomic;

use config_io::Preset;

const CONFIG_FILE: &str = "config.toml";
const DATA_DIR: &str = "data";
const MODEL_DIR: &str = "model";
const TRAIN_LOG: &str = "train_log.tsv";
const METRICS_FILE: &str = "metrics.txt";
const PREDICTIONS_FILE: &str = "predictions.jsonl";
const ABLATION_FILE: &str = "ablation.txt";

#[derive(Parser)]
#[command(name = "situ3d", version, about = "Situated grounding and QA on synthetic rooms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML file layered over the preset.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    /// Dotted override such as `train.epochs=3`; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory; overrides `output_dir`.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = config_io::resolve(self.preset, self.config.as_deref(), &self.overrides)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes and episodes into `<run>/data`.
    Generate(ConfigArgs),
    /// Train on the generated data; writes the model and a loss log.
    Train(ConfigArgs),
    /// Evaluate a trained model on the held-out scenes.
    Eval {
        /// Run directory holding `config.toml`, `data/` and `model/`.
        #[arg(long)]
        run: PathBuf,
        /// Model directory; defaults to `<run>/model`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every ablation cell for every ablation seed.
    Ablate(ConfigArgs),
    /// Draw one held-out episode as SVG.
    Plot {
        #[arg(long)]
        run: PathBuf,
        /// Dataset episode index.
        #[arg(long)]
        episode: usize,
        #[arg(long, short)]
        output: PathBuf,
        /// Add token activation maps before and after re-encoding.
        #[arg(long)]
        activations: bool,
    },
}

fn write_config(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    write_atomic(&cfg.output_dir.join(CONFIG_FILE), config_io::to_toml(cfg)?.as_bytes())?;
    Ok(())
}

fn load_data(run: &Path) -> Result<Dataset> {
    let dir = run.join(DATA_DIR);
    if !dir.join(EPISODES_FILE).exists() {
        bail!("missing dataset at {}; run `situ3d generate` first", dir.display());
    }
    Dataset::load(&dir).with_context(|| format!("loading {}", dir.display()))
}

fn load_model(dir: &Path) -> Result<SitNet> {
    if !dir.join(MODEL_HEADER_FILE).exists() {
        bail!("missing model at {}; run `situ3d train` first", dir.display());
    }
    SitNet::load(dir).with_context(|| format!("loading model from {}", dir.display()))
}

fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let ds = generate_dataset(&cfg.dataset)?;
    write_config(cfg)?;
    ds.save(&cfg.output_dir.join(DATA_DIR))?;
    eprintln!(
        "generated {} scenes, {} episodes in {}",
        ds.scenes.len(),
        ds.episodes.len(),
        cfg.output_dir.join(DATA_DIR).display()
    );
    Ok(())
}

fn log_line(l: &EpochLog) -> String {
    format!(
        "{}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
        l.epoch, l.steps, l.situation_loss, l.qa_loss, l.total_loss
    )
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let ds = load_data(&cfg.output_dir)?;
    if let Ok(saved) = config_io::load_resolved(&cfg.output_dir.join(CONFIG_FILE)) {
        if saved.dataset != cfg.dataset {
            bail!("dataset settings differ from the generated data; rerun `situ3d generate`");
        }
    }
    write_config(cfg)?;
    let scenes = PreparedScenes::new(&ds, cfg.tokens.voxel_size, cfg.tokens.n_tokens)?;
    let out = run_experiment(cfg, &ds, &scenes, |l| {
        eprintln!(
            "epoch {:>3}  situation {:.4}  qa {:.4}  total {:.4}",
            l.epoch, l.situation_loss, l.qa_loss, l.total_loss
        )
    })?;
    let mut log = String::from("epoch\tsteps\tsituation_loss\tqa_loss\ttotal_loss\n");
    for l in &out.logs {
        log.push_str(&log_line(l));
    }
    write_atomic(&cfg.output_dir.join(TRAIN_LOG), log.as_bytes())?;
    out.net.save(&cfg.output_dir.join(MODEL_DIR))?;
    eprint!("{}", out.report.to_text());
    Ok(())
}

fn cmd_eval(run: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = config_io::load_resolved(&run.join(CONFIG_FILE))?;
    let ds = load_data(run)?;
    let model_dir = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.join(MODEL_DIR));
    let net = load_model(&model_dir)?;
    let scenes = PreparedScenes::new(&ds, cfg.tokens.voxel_size, cfg.tokens.n_tokens)?;
    let (_, val_idx) = ds.split(cfg.val_fraction);
    let (eps, _) = prepare_episodes(
        &ds,
        &val_idx,
        &scenes.scenes,
        &net.vocab,
        &net.answers,
        net.config.max_text_len,
        None,
    )?;
    let preds = predict_all(&net, &scenes.scenes, &eps)?;
    let report = score(&net, &ds, &val_idx, &preds, &cfg)?;
    report.check_invariants().map_err(anyhow::Error::msg)?;

    let mut lines = String::new();
    for (i, p) in val_idx.iter().zip(&preds) {
        let answer = p.answer().map(|a| net.answers.answers[a].as_str()).unwrap_or("");
        let rec = serde_json::json!({
            "episode": i,
            "position": [p.estimate.pos.x, p.estimate.pos.y, p.estimate.pos.z],
            "yaw": p.estimate.yaw(),
            "answer": answer,
        });
        let _ = writeln!(lines, "{rec}");
    }
    write_atomic(&run.join(PREDICTIONS_FILE), lines.as_bytes())?;
    let text = report.to_text();
    write_atomic(&run.join(METRICS_FILE), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let ds = generate_dataset(&cfg.dataset)?;
    write_config(cfg)?;
    let cells = ablation_cells(cfg);
    let rows = run_ablation_suite(cfg, &ds, &cells, &cfg.ablation.seeds, |cell, seed, r| {
        eprintln!(
            "{} seed {seed}: loc@1m {:.3} em1 {:.3}",
            cell.label(),
            r.loc_at(1.0).unwrap_or(f64::NAN),
            r.em1.fraction()
        )
    })?;
    let table = ablation_table(&rows, cfg);
    write_atomic(&cfg.output_dir.join(ABLATION_FILE), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn cmd_plot(run: &Path, episode: usize, output: &Path, activations: bool) -> Result<()> {
    let cfg = config_io::load_resolved(&run.join(CONFIG_FILE))?;
    let ds = load_data(run)?;
    let net = load_model(&run.join(MODEL_DIR))?;
    let Some(ep) = ds.episodes.get(episode) else {
        bail!("episode {episode} out of range (dataset has {})", ds.episodes.len());
    };
    let scene = ds.scene(&ep.scene_id).context("episode references a missing scene")?;
    let scenes = PreparedScenes::new(&ds, cfg.tokens.voxel_size, cfg.tokens.n_tokens)?;
    let (eps, _) = prepare_episodes(
        &ds,
        &[episode],
        &scenes.scenes,
        &net.vocab,
        &net.answers,
        net.config.max_text_len,
        None,
    )?;
    let input = &eps[0];
    let si = &scenes.scenes[input.scene];
    let pred = net.predict(si, &[input])?.remove(0);
    let answer = pred.answer().map(|a| net.answers.answers[a].as_str()).unwrap_or("?");
    let caption = format!("{} {}  answer: {answer} (gt {})", ep.situation, ep.question, ep.answer);

    let act = if activations {
        let (before, after) = net.token_activations(si, input)?;
        let anchors: Vec<[f64; 2]> = si.anchors.iter().map(|a| [a.x, a.y]).collect();
        Some((anchors, before, after))
    } else {
        None
    };
    let act_ref = act.as_ref().map(|(anchors, before, after)| svg::Activations {
        anchors,
        pitch: si.tokens.pitch,
        before,
        after,
    });
    let doc = svg::render(scene, &ep.gt, &pred.estimate, &caption, act_ref.as_ref());
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_atomic(output, doc.as_bytes())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a.resolve()?),
        Command::Train(a) => cmd_train(&a.resolve()?),
        Command::Eval { run, checkpoint } => cmd_eval(&run, checkpoint.as_deref()),
        Command::Ablate(a) => cmd_ablate(&a.resolve()?),
        Command::Plot {
            run,
            episode,
            output,
            activations,
        } => cmd_plot(&run, episode, &output, activations),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
