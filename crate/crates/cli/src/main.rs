mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use deepword::baseline::logic_assign;
use deepword::eval::{compare, score_predictions, EvalReport};
use deepword::graph::{build_graph, GraphConfig, DEFAULT_EDGE_EPS, DEFAULT_MASK_TAU};
use deepword::prior::{fit_prior, PriorModel, DEFAULT_COMPONENTS};
use deepword::relnet::{InputMode, ModelCheckpoint, RelNet, RelNetConfig};
use deepword::render::render_svg;
use deepword::scene::{
    parse_predictions, predictions_to_string, read_scene_file, write_atomic, write_scene_file, OwnershipPrediction,
    Scene,
};
use deepword::synthgen::{generate, Difficulty, GenConfig};
use deepword::training::{history_to_jsonl, train, TrainConfig, TrainError};
use rayon::prelude::*;
use serde_json::{json, Value};

use settings::Settings;

#[derive(Parser, Debug)]
#[command(name = "deepword", version, about = "Wheel-vehicle ownership from detection boxes")]
struct Cli {
    /// Key-value config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads. Results do not depend on this value.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate labeled synthetic scenes.
    Gen(GenArgs),
    /// Fit the vehicle-wheel and wheel-wheel priors on labeled scenes.
    FitPrior(FitPriorArgs),
    /// Train the relationship network.
    Train(TrainArgs),
    /// Predict ownership with a trained model or the IoU baseline.
    Predict(PredictArgs),
    /// Score predictions against labeled scenes.
    Eval(EvalArgs),
    /// Compare a baseline report with a model report.
    Compare(CompareArgs),
    /// Draw one scene as SVG.
    Render(RenderArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "n-scenes", alias = "n")]
    n_scenes: Option<usize>,
    #[arg(long)]
    difficulty: Option<Difficulty>,
    #[arg(long = "overlap-rate")]
    overlap_rate: Option<f64>,
    #[arg(long)]
    width: Option<f64>,
    #[arg(long)]
    height: Option<f64>,
}

#[derive(Args, Debug)]
struct FitPriorArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    components: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Options shared by graph construction.
#[derive(Args, Debug)]
struct GraphArgs {
    /// Small-object threshold on min(w/W, h/H).
    #[arg(long = "mask-tau")]
    mask_tau: Option<f64>,
    /// Disable the small-object mask.
    #[arg(long = "no-mask", conflicts_with = "mask_tau")]
    no_mask: bool,
    #[arg(long = "edge-eps")]
    edge_eps: Option<f64>,
}

impl GraphArgs {
    fn resolve(&self, s: &mut Settings) -> Result<GraphConfig> {
        let flag = if self.no_mask { Some(None) } else { self.mask_tau.map(Some) };
        Ok(GraphConfig {
            mask_tau: s.get_optional("mask_tau", flag, Some(DEFAULT_MASK_TAU))?,
            edge_eps: s.get("edge_eps", self.edge_eps, DEFAULT_EDGE_EPS)?,
        })
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    prior: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch JSON lines report.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "learning-rate", alias = "lr")]
    learning_rate: Option<f64>,
    #[arg(long = "neg-weight")]
    neg_weight: Option<f64>,
    /// Negatives kept per positive (default: all).
    #[arg(long = "neg-ratio")]
    neg_ratio: Option<usize>,
    #[arg(long = "batch-scenes")]
    batch_scenes: Option<usize>,
    #[arg(long = "val-fraction")]
    val_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<InputMode>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long = "geo-hidden")]
    geo_hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[command(flatten)]
    graph: GraphArgs,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Trained model file.
    #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
    model: Option<PathBuf>,
    /// Prior file; defaults to the prior stored with the model.
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Use the IoU logic baseline instead of a model.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    threshold: Option<f64>,
    #[command(flatten)]
    graph: GraphArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Split name stored in the report.
    #[arg(long)]
    split: Option<String>,
    /// Existing report to extend with this split.
    #[arg(long)]
    merge: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long = "image-id")]
    image_id: Option<String>,
    /// Draw these predictions instead of the labels.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Provenance sidecar for JSON-lines artifacts.
fn write_meta(path: &Path, command: &str, s: &Settings) -> Result<()> {
    let mut name = path.file_name().ok_or_else(|| anyhow!("{} has no file name", path.display()))?.to_os_string();
    name.push(".meta.json");
    write_json(&path.with_file_name(name), &json!({ "command": command, "config": s.effective() }))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_scenes(path: &Path) -> Result<Vec<Scene>> {
    read_scene_file(path).with_context(|| format!("reading scenes from {}", path.display()))
}

fn read_predictions(path: &Path) -> Result<Vec<OwnershipPrediction>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_predictions(&text).with_context(|| format!("in {}", path.display()))
}

fn read_prior(path: &Path) -> Result<PriorModel> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    PriorModel::from_json(&text).with_context(|| format!("parsing prior {}", path.display()))
}

fn cmd_gen(a: &GenArgs, s: &mut Settings) -> Result<()> {
    let d = GenConfig::default();
    let cfg = GenConfig {
        seed: s.get("seed", a.seed, d.seed)?,
        n_scenes: s.get("n_scenes", a.n_scenes, d.n_scenes)?,
        difficulty: s.get("difficulty", a.difficulty, d.difficulty)?,
        overlap_rate: s.get("overlap_rate", a.overlap_rate, d.overlap_rate)?,
        width: s.get("width", a.width, d.width)?,
        height: s.get("height", a.height, d.height)?,
        ..d
    };
    let scenes = generate(&cfg)?;
    write_scene_file(&scenes, &a.out)?;
    write_meta(&a.out, "gen", s)?;
    eprintln!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn cmd_fit_prior(a: &FitPriorArgs, s: &mut Settings) -> Result<()> {
    let scenes = read_scenes(&a.scenes)?;
    let k = s.get("components", a.components, DEFAULT_COMPONENTS)?;
    let seed = s.get("seed", a.seed, 0)?;
    let fit = fit_prior(&scenes, k, seed)?;
    let mut out = fit.model.to_json_value();
    out["samples"] = json!({ "wv": fit.samples.wv.len(), "ww": fit.samples.ww.len(), "skipped": fit.samples.skipped });
    out["em"] = json!({
        "wv": { "iterations": fit.wv_diagnostics.iterations, "converged": fit.wv_diagnostics.converged },
        "ww": { "iterations": fit.ww_diagnostics.iterations, "converged": fit.ww_diagnostics.converged },
    });
    out["config"] = s.effective();
    write_json(&a.out, &out)?;
    eprintln!("fitted priors on {} + {} samples", fit.samples.wv.len(), fit.samples.ww.len());
    Ok(())
}

fn model_json(model: &RelNet, prior: &PriorModel, train: &TrainConfig, s: &Settings) -> Result<Value> {
    let mut v = serde_json::to_value(model.checkpoint())?;
    v["prior"] = prior.to_json_value();
    v["train"] = serde_json::to_value(train)?;
    v["config"] = s.effective();
    Ok(v)
}

fn cmd_train(a: &TrainArgs, s: &mut Settings, threads: usize) -> Result<()> {
    let scenes = read_scenes(&a.scenes)?;
    let prior = read_prior(&a.prior)?;
    let d = TrainConfig::default();
    let m = RelNetConfig::default();
    let graph = a.graph.resolve(s)?;
    let cfg = TrainConfig {
        epochs: s.get("epochs", a.epochs, d.epochs)?,
        learning_rate: s.get("learning_rate", a.learning_rate, d.learning_rate)?,
        neg_weight: s.get("neg_weight", a.neg_weight, d.neg_weight)?,
        neg_downsample_ratio: s.get_optional("neg_ratio", a.neg_ratio.map(Some), d.neg_downsample_ratio)?,
        mask_tau: graph.mask_tau,
        edge_eps: graph.edge_eps,
        seed: s.get("seed", a.seed, d.seed)?,
        batch_scenes: s.get("batch_scenes", a.batch_scenes, d.batch_scenes)?,
        val_fraction: s.get("val_fraction", a.val_fraction, d.val_fraction)?,
        threads,
        model: RelNetConfig {
            mode: s.get("mode", a.mode, m.mode)?,
            features: s.get("features", a.features, m.features)?,
            geo_hidden: s.get("geo_hidden", a.geo_hidden, m.geo_hidden)?,
            layers: s.get("layers", a.layers, m.layers)?,
            threshold: s.get("threshold", a.threshold, m.threshold)?,
            conv_channels: m.conv_channels,
        },
    };
    let outcome = match train(&scenes, &prior, &cfg) {
        Ok(o) => o,
        Err(TrainError::Diverged { epoch, last_good, history }) => {
            let path = a.out.with_extension("last-good.json");
            write_json(&path, &model_json(&last_good, &prior, &cfg, s)?)?;
            if let Some(h) = &a.history {
                write_text(h, &history_to_jsonl(&history))?;
            }
            bail!("loss diverged at epoch {epoch}; last good parameters saved to {}", path.display());
        }
        Err(e) => return Err(e.into()),
    };
    write_json(&a.out, &model_json(&outcome.model, &prior, &cfg, s)?)?;
    if let Some(h) = &a.history {
        write_text(h, &history_to_jsonl(&outcome.history))?;
        write_meta(h, "train", s)?;
    }
    if let Some(last) = outcome.history.last() {
        let val = last.val_acc.map_or("n/a".to_string(), |v| format!("{:.4}", v));
        eprintln!("epoch {} loss {:.6} val_acc {val}", last.epoch, last.loss);
    }
    Ok(())
}

fn cmd_predict(a: &PredictArgs, s: &mut Settings) -> Result<()> {
    let scenes = read_scenes(&a.scenes)?;
    let graph = a.graph.resolve(s)?;
    let predictions: Vec<OwnershipPrediction> = if a.baseline {
        s.record("predictor", "iou-baseline");
        scenes.par_iter().map(|sc| logic_assign(sc, graph.mask_tau)).collect()
    } else {
        let path = a.model.as_ref().expect("clap requires --model without --baseline");
        let v = read_json(path)?;
        let ck: ModelCheckpoint =
            serde_json::from_value(v.clone()).with_context(|| format!("model checkpoint {}", path.display()))?;
        let mut model = RelNet::from_checkpoint(ck)?;
        model.config.threshold = s.get("threshold", a.threshold, model.config.threshold)?;
        let prior = match (&a.prior, v.get("prior")) {
            (Some(p), _) => read_prior(p)?,
            (None, Some(p)) => PriorModel::from_json(&p.to_string())?,
            (None, None) => bail!("{} carries no prior; pass --prior", path.display()),
        };
        s.record("predictor", "relnet");
        s.record("model", path.display().to_string());
        scenes
            .par_iter()
            .map(|sc| model.predict(sc, &build_graph(sc, &prior, &graph)))
            .collect::<Result<_, _>>()?
    };
    write_text(&a.out, &predictions_to_string(&predictions))?;
    write_meta(&a.out, "predict", s)?;
    eprintln!("wrote {} predictions to {}", predictions.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs, s: &mut Settings) -> Result<()> {
    let scenes = read_scenes(&a.scenes)?;
    let predictions = read_predictions(&a.predictions)?;
    let split = s.get("split", a.split.clone(), "all".to_string())?;
    let mut report = score_predictions(&split, &scenes, &predictions)
        .with_context(|| format!("scoring {} against {}", a.predictions.display(), a.scenes.display()))?;
    if let Some(m) = &a.merge {
        let mut base: EvalReport = serde_json::from_value(read_json(m)?)?;
        base.merge(report);
        report = base;
    }
    let mut out = serde_json::to_value(&report)?;
    out["config"] = s.effective();
    write_json(&a.out, &out)?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_compare(a: &CompareArgs, s: &mut Settings) -> Result<()> {
    let base: EvalReport = serde_json::from_value(read_json(&a.baseline)?)?;
    let model: EvalReport = serde_json::from_value(read_json(&a.model)?)?;
    let table = compare(&base, &model)?;
    print!("{}", table.to_text());
    if let Some(out) = &a.out {
        let mut v = serde_json::to_value(&table)?;
        s.record("baseline", a.baseline.display().to_string());
        s.record("model", a.model.display().to_string());
        v["config"] = s.effective();
        write_json(out, &v)?;
    }
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    let scenes = read_scenes(&a.scenes)?;
    let scene = match &a.image_id {
        Some(id) => scenes.iter().find(|s| &s.image_id == id).ok_or_else(|| anyhow!("no scene '{id}'"))?,
        None => scenes.first().ok_or_else(|| anyhow!("{} holds no scenes", a.scenes.display()))?,
    };
    let prediction = match &a.predictions {
        Some(p) => Some(
            read_predictions(p)?
                .into_iter()
                .find(|x| x.image_id == scene.image_id)
                .ok_or_else(|| anyhow!("no prediction for '{}'", scene.image_id))?,
        ),
        None => None,
    };
    write_text(&a.out, &render_svg(scene, prediction.as_ref()))
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        bail!("--threads must be positive");
    }
    rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global().ok();
    let mut s = Settings::load(cli.config.as_deref())?;
    s.record("threads", cli.threads);
    match &cli.command {
        Command::Gen(a) => cmd_gen(a, &mut s),
        Command::FitPrior(a) => cmd_fit_prior(a, &mut s),
        Command::Train(a) => cmd_train(a, &mut s, cli.threads),
        Command::Predict(a) => cmd_predict(a, &mut s),
        Command::Eval(a) => cmd_eval(a, &mut s),
        Command::Compare(a) => cmd_compare(a, &mut s),
        Command::Render(a) => cmd_render(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
