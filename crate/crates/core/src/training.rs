//! Weighted-L2 pair training with Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{build_graph, GraphConfig, RelGraph, DEFAULT_EDGE_EPS, DEFAULT_MASK_TAU};
use crate::neural::{NeuralError, Objective, Parameter, Tensor};
use crate::prior::PriorModel;
use crate::relnet::{NodeInputs, RelNet, RelNetConfig, RelNetError};
use crate::scene::Scene;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training scene has a positive vehicle-wheel pair")]
    NoPositives,
    #[error("loss diverged at epoch {epoch}")]
    Diverged { epoch: usize, last_good: Box<RelNet>, history: Vec<EpochRecord> },
    #[error(transparent)]
    Model(#[from] RelNetError),
    #[error("thread pool: {0}")]
    Threads(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub neg_weight: f64,
    /// Negatives kept per positive in each scene; `None` keeps all.
    pub neg_downsample_ratio: Option<usize>,
    /// Small-object threshold; `None` disables the mask.
    pub mask_tau: Option<f64>,
    pub edge_eps: f64,
    pub seed: u64,
    pub batch_scenes: usize,
    pub val_fraction: f64,
    /// Worker threads for per-scene gradients; results do not depend on it.
    pub threads: usize,
    pub model: RelNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            learning_rate: 1e-3,
            neg_weight: 0.1,
            neg_downsample_ratio: None,
            mask_tau: Some(DEFAULT_MASK_TAU),
            edge_eps: DEFAULT_EDGE_EPS,
            seed: 0,
            batch_scenes: 8,
            val_fraction: 0.1,
            threads: 1,
            model: RelNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.neg_weight > 0.0 && self.neg_weight <= 1.0) {
            return bad("neg_weight must lie in (0, 1]");
        }
        // lr = 0 is accepted so a frozen run can be used as a control.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_scenes == 0 {
            return bad("batch_scenes must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if self.threads == 0 {
            return bad("threads must be positive");
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn graph_config(&self) -> GraphConfig {
        GraphConfig { edge_eps: self.edge_eps, mask_tau: self.mask_tau }
    }
}

/// Weighted mean square `sum w (s - y)^2 / sum w`, or `None` for an empty pair set.
pub fn pair_loss(scores: &[f64], labels: &[f64], weights: &[f64]) -> Option<f64> {
    assert!(scores.len() == labels.len() && labels.len() == weights.len(), "pair_loss: misaligned inputs");
    let total: f64 = weights.iter().sum();
    if scores.is_empty() || total <= 0.0 {
        return None;
    }
    let sum: f64 = scores.iter().zip(labels).zip(weights).map(|((s, y), w)| w * (s - y) * (s - y)).sum();
    Some(sum / total)
}

/// `d loss / d score` for [`pair_loss`].
pub fn pair_loss_grad(scores: &[f64], labels: &[f64], weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    scores.iter().zip(labels).zip(weights).map(|((s, y), w)| 2.0 * w * (s - y) / total).collect()
}

/// One vehicle-wheel pair of a scene graph, with node indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairExample {
    pub vehicle: usize,
    pub wheel: usize,
    pub label: f64,
    pub weight: f64,
    pub prior: f64,
}

/// Connected unmasked vehicle-wheel pairs of a graph with labels and loss weights.
///
/// With `neg_ratio = Some(r)` only the `r * positives` negatives with the
/// highest prior weight are kept.
pub fn training_pairs(scene: &Scene, graph: &RelGraph, neg_weight: f64, neg_ratio: Option<usize>) -> Vec<PairExample> {
    let owners = scene.owner_map();
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (v, w, prior) in graph.vehicle_wheel_edges() {
        if !(graph.mask[v] && graph.mask[w]) {
            continue;
        }
        let owned = owners.get(&graph.nodes[w].box_id) == Some(&graph.nodes[v].box_id);
        let (label, weight) = if owned { (1.0, 1.0) } else { (0.0, neg_weight) };
        let ex = PairExample { vehicle: v, wheel: w, label, weight, prior };
        if owned {
            positives.push(ex)
        } else {
            negatives.push(ex)
        }
    }
    if let Some(r) = neg_ratio {
        negatives.sort_by(|a, b| b.prior.total_cmp(&a.prior).then((a.vehicle, a.wheel).cmp(&(b.vehicle, b.wheel))));
        negatives.truncate(r * positives.len());
    }
    positives.extend(negatives);
    positives.sort_by_key(|p| (p.vehicle, p.wheel));
    positives
}

/// A scene prepared for training: graph, node inputs and labeled pairs.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub scene: Scene,
    pub graph: RelGraph,
    pub inputs: NodeInputs,
    pub pairs: Vec<PairExample>,
}

impl SceneSample {
    pub fn new(scene: &Scene, prior: &PriorModel, cfg: &TrainConfig) -> Result<Self, RelNetError> {
        let graph = build_graph(scene, prior, &cfg.graph_config());
        let inputs = NodeInputs::from_scene(scene, cfg.model.mode)?;
        let pairs = training_pairs(scene, &graph, cfg.neg_weight, cfg.neg_downsample_ratio);
        Ok(SceneSample { scene: scene.clone(), graph, inputs, pairs })
    }

    pub fn positives(&self) -> usize {
        self.pairs.iter().filter(|p| p.label > 0.0).count()
    }
}

fn pair_scores(embeddings: &Tensor, pairs: &[PairExample]) -> Vec<f64> {
    pairs
        .iter()
        .map(|p| embeddings.row(p.vehicle).iter().zip(embeddings.row(p.wheel)).map(|(a, b)| a * b).sum())
        .collect()
}

fn split_pairs(pairs: &[PairExample]) -> (Vec<f64>, Vec<f64>) {
    (pairs.iter().map(|p| p.label).collect(), pairs.iter().map(|p| p.weight).collect())
}

impl RelNet {
    /// Pair loss of one scene, `None` when it has no pairs.
    pub fn scene_loss(&self, sample: &SceneSample) -> Result<Option<f64>, RelNetError> {
        if sample.pairs.is_empty() {
            return Ok(None);
        }
        let pass = self.forward(&sample.graph, &sample.inputs)?;
        let (labels, weights) = split_pairs(&sample.pairs);
        Ok(pair_loss(&pair_scores(&pass.embeddings, &sample.pairs), &labels, &weights))
    }

    /// Loss and parameter gradients of one scene, `None` when it has no pairs.
    pub fn scene_loss_and_grad(&self, sample: &SceneSample) -> Result<Option<(f64, Vec<Tensor>)>, RelNetError> {
        if sample.pairs.is_empty() {
            return Ok(None);
        }
        let pass = self.forward(&sample.graph, &sample.inputs)?;
        let scores = pair_scores(&pass.embeddings, &sample.pairs);
        let (labels, weights) = split_pairs(&sample.pairs);
        let Some(loss) = pair_loss(&scores, &labels, &weights) else { return Ok(None) };
        let g_scores = pair_loss_grad(&scores, &labels, &weights);
        let mut g_emb = Tensor::zeros(pass.embeddings.shape());
        for (p, g) in sample.pairs.iter().zip(g_scores) {
            let ev = pass.embeddings.row(p.vehicle).to_vec();
            let ew = pass.embeddings.row(p.wheel).to_vec();
            for (d, x) in g_emb.row_mut(p.vehicle).iter_mut().zip(&ew) {
                *d += g * x;
            }
            for (d, x) in g_emb.row_mut(p.wheel).iter_mut().zip(&ev) {
                *d += g * x;
            }
        }
        let mut grads = self.zero_grads();
        self.backward(&sample.inputs, &pass, &g_emb, &mut grads)?;
        Ok(Some((loss, grads)))
    }
}

fn relnet_to_neural(e: RelNetError) -> NeuralError {
    match e {
        RelNetError::Neural(n) => n,
        other => NeuralError::Shape { op: "relnet", detail: other.to_string() },
    }
}

impl Objective for RelNet {
    type Input = SceneSample;

    fn parameters(&self) -> Vec<&Parameter> {
        RelNet::parameters(self)
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        RelNet::parameters_mut(self)
    }

    fn loss(&self, input: &SceneSample) -> Result<Tensor, NeuralError> {
        let loss = self.scene_loss(input).map_err(relnet_to_neural)?;
        Ok(Tensor::scalar(loss.unwrap_or(0.0)))
    }

    fn loss_and_grad(&mut self, input: &SceneSample) -> Result<Tensor, NeuralError> {
        let Some((loss, grads)) = self.scene_loss_and_grad(input).map_err(relnet_to_neural)? else {
            return Ok(Tensor::scalar(0.0));
        };
        for (p, g) in RelNet::parameters_mut(self).into_iter().zip(&grads) {
            p.grad.add_assign(g)?;
        }
        Ok(Tensor::scalar(loss))
    }

    fn relu_pattern(&self, input: &SceneSample) -> Result<Vec<bool>, NeuralError> {
        let pass = self.forward(&input.graph, &input.inputs).map_err(relnet_to_neural)?;
        Ok(pass.relu_pattern())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64, params: &[&Parameter]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam { learning_rate, step: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, params: Vec<&mut Parameter>, grads: &[Tensor]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let values = p.value.data_mut();
            for (((x, &g), m), v) in values.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *x -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPSILON);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Assignment accuracy on the held-out scenes; `None` without a validation split.
    pub val_acc: Option<f64>,
}

pub fn history_to_jsonl(history: &[EpochRecord]) -> String {
    history.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RelNet,
    pub history: Vec<EpochRecord>,
    pub train_scenes: Vec<String>,
    pub val_scenes: Vec<String>,
    /// Scenes without any vehicle-wheel pair; they contribute no gradient.
    pub skipped_scenes: usize,
}

/// Seeded scene-level split into `(train, validation)` indices.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5b11));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = if n_val >= n { n.saturating_sub(1) } else { n_val };
    let mut val = idx.split_off(n - n_val);
    idx.sort_unstable();
    val.sort_unstable();
    (idx, val)
}

/// Fraction of labeled wheels whose predicted owner is correct.
pub fn assignment_accuracy(model: &RelNet, samples: &[SceneSample]) -> Result<f64, RelNetError> {
    let mut correct = 0usize;
    let mut labeled = 0usize;
    for s in samples {
        let pred = model.predict(&s.scene, &s.graph)?;
        for (w, v) in s.scene.owner_map() {
            labeled += 1;
            if pred.assignments.get(&w) == Some(&v) {
                correct += 1;
            }
        }
    }
    Ok(if labeled == 0 { 0.0 } else { correct as f64 / labeled as f64 })
}

pub fn prepare_samples(scenes: &[Scene], prior: &PriorModel, cfg: &TrainConfig) -> Result<Vec<SceneSample>, RelNetError> {
    scenes.par_iter().map(|s| SceneSample::new(s, prior, cfg)).collect()
}

/// Trains a fresh model. Per-scene gradients may be computed on several
/// threads; they are summed in scene order, so the trajectory only depends on
/// the seed.
pub fn train(scenes: &[Scene], prior: &PriorModel, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| TrainError::Threads(e.to_string()))?;
    pool.install(|| train_in_pool(scenes, prior, cfg))
}

fn train_in_pool(scenes: &[Scene], prior: &PriorModel, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let (train_idx, val_idx) = split_indices(scenes.len(), cfg.val_fraction, cfg.seed);
    let pick = |idx: &[usize]| -> Vec<Scene> { idx.iter().map(|&i| scenes[i].clone()).collect() };
    let train_samples = prepare_samples(&pick(&train_idx), prior, cfg)?;
    let val_samples = prepare_samples(&pick(&val_idx), prior, cfg)?;
    if !train_samples.iter().any(|s| s.positives() > 0) {
        return Err(TrainError::NoPositives);
    }
    let skipped_scenes = train_samples.iter().filter(|s| s.pairs.is_empty()).count();
    let active: Vec<&SceneSample> = train_samples.iter().filter(|s| !s.pairs.is_empty()).collect();

    let mut model = RelNet::new(cfg.model.clone(), cfg.seed)?;
    let mut adam = Adam::new(cfg.learning_rate, &model.parameters());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..active.len()).collect();

    for epoch in 1..=cfg.epochs {
        let last_good = model.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
        let mut losses = vec![0.0; active.len()];
        let diverged = |history: &Vec<EpochRecord>, last_good: RelNet| TrainError::Diverged {
            epoch,
            last_good: Box::new(last_good),
            history: history.clone(),
        };
        for batch in order.chunks(cfg.batch_scenes) {
            let results: Vec<Result<Option<(f64, Vec<Tensor>)>, RelNetError>> =
                batch.par_iter().map(|&i| model.scene_loss_and_grad(active[i])).collect();
            let mut total = model.zero_grads();
            for (&i, r) in batch.iter().zip(results) {
                let (loss, grads) = match r {
                    Ok(Some(lg)) => lg,
                    Ok(None) => continue,
                    Err(RelNetError::Neural(NeuralError::NonFinite { .. })) => {
                        return Err(diverged(&history, last_good))
                    }
                    Err(e) => return Err(e.into()),
                };
                if !loss.is_finite() {
                    return Err(diverged(&history, last_good));
                }
                losses[i] = loss;
                for (t, g) in total.iter_mut().zip(&grads) {
                    t.add_assign(g).expect("aligned gradient buffers");
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for t in &mut total {
                t.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            adam.step(model.parameters_mut(), &total);
        }
        if model.parameters().iter().any(|p| p.value.data().iter().any(|x| !x.is_finite())) {
            return Err(diverged(&history, last_good));
        }
        // Summed in scene order so the value does not depend on the shuffle.
        let loss = if active.is_empty() { 0.0 } else { losses.iter().sum::<f64>() / active.len() as f64 };
        let val_acc = if val_samples.is_empty() { None } else { Some(assignment_accuracy(&model, &val_samples)?) };
        history.push(EpochRecord { epoch, loss, val_acc });
    }

    let names = |samples: &[SceneSample]| samples.iter().map(|s| s.scene.image_id.clone()).collect();
    Ok(TrainOutcome {
        model,
        history,
        train_scenes: names(&train_samples),
        val_scenes: names(&val_samples),
        skipped_scenes,
    })
}
