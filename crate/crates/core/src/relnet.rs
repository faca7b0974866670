//! Relationship network: node encoder, attention-corrected GCN and cosine matcher.
//!
//! Per GCN layer every node `i` with neighbors `N(i)` computes
//!
//! ```text
//! e_ij  = fc_out(relu(fc_hidden(concat(h_i, h_j))))
//! s_ij  = softmax_j(e_ij)              over j in N(i)
//! w'_ij = a_ij * s_ij                  a_ij = prior edge weight
//! h_i   <- relu(U_self h_i + sum_j w'_ij U_nbr h_j)
//! ```
//!
//! The last layer skips the ReLU and is L2-normalized, so the score of a
//! vehicle-wheel pair is the cosine similarity of their embeddings.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::RelGraph;
use crate::neural::{self, Conv2d, Linear, NeuralError, Parameter, Tensor, TensorCheckpoint};
use crate::scene::{DetBox, ObjectClass, OwnershipPrediction, Scene};
use crate::synthgen::{render_patch, GenError, PATCH_SIZE};

pub const GEOMETRIC_FEATURES: usize = 16;
pub const PATCH_CHANNELS: usize = 7;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum RelNetError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Patch(#[from] GenError),
    #[error("graph '{graph}' does not belong to scene '{scene}'")]
    Mismatch { graph: String, scene: String },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, RelNetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// 7-channel 56x56 tensor: 3 appearance channels and 4 constant coordinate planes.
    Patch,
    /// 16 normalized box statistics.
    Geometric,
}

impl std::str::FromStr for InputMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "patch" => Ok(InputMode::Patch),
            "geometric" | "geom" => Ok(InputMode::Geometric),
            other => Err(format!("unknown input mode '{other}' (patch, geometric)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelNetConfig {
    pub mode: InputMode,
    /// Embedding width F.
    pub features: usize,
    /// Hidden width of the geometric encoder.
    pub geo_hidden: usize,
    /// Output channels of the four 3x3 stride-2 patch convolutions.
    pub conv_channels: Vec<usize>,
    pub layers: usize,
    pub threshold: f64,
}

impl Default for RelNetConfig {
    fn default() -> Self {
        RelNetConfig {
            mode: InputMode::Geometric,
            features: 64,
            geo_hidden: 64,
            conv_channels: vec![16, 32, 64, 64],
            layers: 2,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl RelNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.features == 0 || self.geo_hidden == 0 || self.layers == 0 {
            return Err(RelNetError::Config("features, geo_hidden and layers must be positive".into()));
        }
        if self.mode == InputMode::Patch {
            if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
                return Err(RelNetError::Config("conv_channels must be non-empty and positive".into()));
            }
            if patch_side(self.conv_channels.len()).is_none() {
                return Err(RelNetError::Config(format!(
                    "{} stride-2 convolutions do not fit a {PATCH_SIZE}x{PATCH_SIZE} patch",
                    self.conv_channels.len()
                )));
            }
        }
        if !self.threshold.is_finite() {
            return Err(RelNetError::Config("threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Spatial side after `convs` valid 3x3 stride-2 convolutions on a 56x56 patch.
fn patch_side(convs: usize) -> Option<usize> {
    let mut side = PATCH_SIZE;
    for _ in 0..convs {
        if side < 3 {
            return None;
        }
        side = (side - 3) / 2 + 1;
    }
    Some(side)
}

/// 16 normalized statistics of one box.
pub fn geometric_features(b: &DetBox, dims: (f64, f64)) -> [f64; GEOMETRIC_FEATURES] {
    let (w, h) = dims;
    let (cx, cy) = b.center();
    let (bw, bh) = (b.width() / w, b.height() / h);
    let vehicle = if b.class == ObjectClass::Vehicle { 1.0 } else { 0.0 };
    [
        b.x1 / w,
        b.y1 / h,
        b.x2 / w,
        b.y2 / h,
        cx / w,
        cy / h,
        bw,
        bh,
        (b.width() / b.height()).ln(),
        (bw * bh).sqrt(),
        vehicle,
        1.0 - vehicle,
        cx / w - 0.5,
        cy / h - 0.5,
        bh.ln(),
        bw.ln(),
    ]
}

/// Appearance patch plus the four coordinate planes `x1/W, y1/H, x2/W, y2/H`.
pub fn patch_input(scene: &Scene, box_index: usize) -> Result<Tensor> {
    let b = &scene.boxes[box_index];
    let appearance = render_patch(scene, b.box_id)?;
    let plane = PATCH_SIZE * PATCH_SIZE;
    let mut data = appearance.into_data();
    for v in [b.x1 / scene.width, b.y1 / scene.height, b.x2 / scene.width, b.y2 / scene.height] {
        data.extend(std::iter::repeat_n(v, plane));
    }
    Ok(Tensor::new(vec![PATCH_CHANNELS, PATCH_SIZE, PATCH_SIZE], data)?)
}

/// Batched node inputs for every box of a scene, in box order.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeInputs {
    pub mode: InputMode,
    /// `[N, 16]` or `[N, 7, 56, 56]`.
    pub tensor: Tensor,
}

impl NodeInputs {
    pub fn from_scene(scene: &Scene, mode: InputMode) -> Result<Self> {
        let n = scene.boxes.len();
        let tensor = match mode {
            InputMode::Geometric => {
                let data = scene.boxes.iter().flat_map(|b| geometric_features(b, scene.dims())).collect();
                Tensor::new(vec![n, GEOMETRIC_FEATURES], data)?
            }
            InputMode::Patch => {
                let mut data = Vec::with_capacity(n * PATCH_CHANNELS * PATCH_SIZE * PATCH_SIZE);
                for i in 0..n {
                    data.extend_from_slice(patch_input(scene, i)?.data());
                }
                Tensor::new(vec![n, PATCH_CHANNELS, PATCH_SIZE, PATCH_SIZE], data)?
            }
        };
        Ok(NodeInputs { mode, tensor })
    }

    pub fn len(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Geometric { hidden: Linear, out: Linear },
    Patch { convs: Vec<Conv2d>, out: Linear },
}

#[derive(Debug, Clone)]
enum EncoderCache {
    Geometric { hidden_pre: Tensor, hidden_act: Tensor },
    Patch { conv_inputs: Vec<Tensor>, conv_pre: Vec<Tensor>, flat: Tensor },
}

impl Encoder {
    fn parameter_count(&self) -> usize {
        match self {
            Encoder::Geometric { .. } => 4,
            Encoder::Patch { convs, .. } => 2 * convs.len() + 2,
        }
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, EncoderCache)> {
        match self {
            Encoder::Geometric { hidden, out } => {
                let hidden_pre = hidden.forward(x)?;
                let hidden_act = neural::relu(&hidden_pre);
                let h = out.forward(&hidden_act)?;
                Ok((h, EncoderCache::Geometric { hidden_pre, hidden_act }))
            }
            Encoder::Patch { convs, out } => {
                let mut conv_inputs = Vec::with_capacity(convs.len());
                let mut conv_pre = Vec::with_capacity(convs.len());
                let mut cur = x.clone();
                for conv in convs {
                    let pre = conv.forward(&cur)?;
                    let next = neural::relu(&pre);
                    conv_inputs.push(std::mem::replace(&mut cur, next));
                    conv_pre.push(pre);
                }
                let n = cur.shape()[0];
                let per = cur.len() / n.max(1);
                let flat = cur.reshape(&[n, per])?;
                let h = out.forward(&flat)?;
                Ok((h, EncoderCache::Patch { conv_inputs, conv_pre, flat }))
            }
        }
    }

    fn backward(&self, x: &Tensor, cache: &EncoderCache, grad_h: &Tensor, grads: &mut [Tensor]) -> Result<()> {
        match (self, cache) {
            (Encoder::Geometric { hidden, out }, EncoderCache::Geometric { hidden_pre, hidden_act }) => {
                let (g_hidden, g_out) = grads.split_at_mut(2);
                let g_act = out.backward_into(hidden_act, grad_h, g_out)?;
                let g_pre = neural::relu_backward(hidden_pre, &g_act);
                hidden.backward_into(x, &g_pre, g_hidden)?;
            }
            (Encoder::Patch { convs, out }, EncoderCache::Patch { conv_inputs, conv_pre, flat }) => {
                let (g_convs, g_out) = grads.split_at_mut(2 * convs.len());
                let g_flat = out.backward_into(flat, grad_h, g_out)?;
                let last_shape = conv_pre.last().expect("at least one conv").shape().to_vec();
                let mut g = g_flat.reshape(&last_shape)?;
                for (l, conv) in convs.iter().enumerate().rev() {
                    let g_pre = neural::relu_backward(&conv_pre[l], &g);
                    g = conv.backward_into(&conv_inputs[l], &g_pre, &mut g_convs[2 * l..2 * l + 2])?;
                }
            }
            _ => unreachable!("encoder cache matches encoder"),
        }
        Ok(())
    }

    fn parameters(&self) -> Vec<(String, &Parameter)> {
        match self {
            Encoder::Geometric { hidden, out } => vec![
                ("encoder.hidden.weight".into(), &hidden.weight),
                ("encoder.hidden.bias".into(), &hidden.bias),
                ("encoder.out.weight".into(), &out.weight),
                ("encoder.out.bias".into(), &out.bias),
            ],
            Encoder::Patch { convs, out } => {
                let mut v: Vec<(String, &Parameter)> = Vec::new();
                for (i, c) in convs.iter().enumerate() {
                    v.push((format!("encoder.conv{i}.kernel"), &c.kernel));
                    v.push((format!("encoder.conv{i}.bias"), &c.bias));
                }
                v.push(("encoder.out.weight".into(), &out.weight));
                v.push(("encoder.out.bias".into(), &out.bias));
                v
            }
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Encoder::Geometric { hidden, out } => {
                let [a, b] = hidden.parameters_mut();
                let [c, d] = out.parameters_mut();
                vec![a, b, c, d]
            }
            Encoder::Patch { convs, out } => {
                let mut v: Vec<&mut Parameter> = convs.iter_mut().flat_map(|c| c.parameters_mut()).collect();
                v.extend(out.parameters_mut());
                v
            }
        }
    }
}

/// Directed neighbor lists grouped by center node.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectedEdges {
    pub center: Vec<usize>,
    pub neighbor: Vec<usize>,
    pub prior: Vec<f64>,
    /// Edges of node `i` are `offsets[i]..offsets[i + 1]`.
    pub offsets: Vec<usize>,
}

impl DirectedEdges {
    pub fn from_graph(graph: &RelGraph) -> Self {
        let mut center = Vec::new();
        let mut neighbor = Vec::new();
        let mut prior = Vec::new();
        let mut offsets = vec![0];
        for (i, row) in graph.neighbors().into_iter().enumerate() {
            for (j, a) in row {
                center.push(i);
                neighbor.push(j);
                prior.push(a);
            }
            offsets.push(center.len());
        }
        DirectedEdges { center, neighbor, prior, offsets }
    }

    pub fn len(&self) -> usize {
        self.center.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center.is_empty()
    }

    fn segments(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.offsets.windows(2).map(|w| w[0]..w[1]).filter(|r| !r.is_empty())
    }
}

/// Attention quantities of one GCN layer, one entry per directed edge.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    pub edges: DirectedEdges,
    pub logits: Vec<f64>,
    /// Softmax of the logits over each center node's neighbors.
    pub scale: Vec<f64>,
    /// `prior * scale`.
    pub corrected: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    h_in: Tensor,
    pairs: Tensor,
    gat_pre: Tensor,
    gat_act: Tensor,
    attention: AttentionState,
    nbr_msg: Tensor,
    pre: Tensor,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    encoder: EncoderCache,
    layers: Vec<LayerCache>,
    /// Initial node embeddings from the encoder, `[N, F]`.
    pub encoded: Tensor,
    /// Last-layer output before normalization, `[N, F]`.
    pub raw: Tensor,
    /// Unit-norm node embeddings, `[N, F]`.
    pub embeddings: Tensor,
}

impl ForwardPass {
    pub fn attention(&self) -> impl Iterator<Item = &AttentionState> {
        self.layers.iter().map(|l| &l.attention)
    }

    /// Signs of every ReLU pre-activation of the pass.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        let mut push = |t: &Tensor| out.extend(t.data().iter().map(|&v| v > 0.0));
        match &self.encoder {
            EncoderCache::Geometric { hidden_pre, .. } => push(hidden_pre),
            EncoderCache::Patch { conv_pre, .. } => conv_pre.iter().for_each(&mut push),
        }
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            push(&layer.gat_pre);
            if l != last {
                push(&layer.pre);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelNet {
    pub config: RelNetConfig,
    pub encoder: Encoder,
    /// `2F -> F`.
    pub gat_hidden: Linear,
    /// `F -> 1`.
    pub gat_out: Linear,
    /// `F -> F` self transform.
    pub u_self: Linear,
    /// `F -> F` neighbor transform.
    pub u_nbr: Linear,
}

impl RelNet {
    pub fn new(config: RelNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = config.features;
        let encoder = match config.mode {
            InputMode::Geometric => Encoder::Geometric {
                hidden: Linear::new(GEOMETRIC_FEATURES, config.geo_hidden, &mut rng),
                out: Linear::new(config.geo_hidden, f, &mut rng),
            },
            InputMode::Patch => {
                let mut convs = Vec::new();
                let mut in_ch = PATCH_CHANNELS;
                for &out_ch in &config.conv_channels {
                    convs.push(Conv2d::new(in_ch, out_ch, 3, 2, &mut rng));
                    in_ch = out_ch;
                }
                let side = patch_side(config.conv_channels.len()).expect("validated");
                Encoder::Patch { convs, out: Linear::new(in_ch * side * side, f, &mut rng) }
            }
        };
        Ok(RelNet {
            encoder,
            gat_hidden: Linear::new(2 * f, f, &mut rng),
            gat_out: Linear::new(f, 1, &mut rng),
            u_self: Linear::new(f, f, &mut rng),
            u_nbr: Linear::new(f, f, &mut rng),
            config,
        })
    }

    pub fn features(&self) -> usize {
        self.config.features
    }

    /// Named parameters in a fixed order (encoder, attention, GCN transforms).
    pub fn named_parameters(&self) -> Vec<(String, &Parameter)> {
        let mut v = self.encoder.parameters();
        for (name, layer) in [
            ("gat.hidden", &self.gat_hidden),
            ("gat.out", &self.gat_out),
            ("gcn.self", &self.u_self),
            ("gcn.neighbor", &self.u_nbr),
        ] {
            v.push((format!("{name}.weight"), &layer.weight));
            v.push((format!("{name}.bias"), &layer.bias));
        }
        v
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        self.named_parameters().into_iter().map(|(_, p)| p).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.encoder.parameters_mut();
        for layer in [&mut self.gat_hidden, &mut self.gat_out, &mut self.u_self, &mut self.u_nbr] {
            v.extend(layer.parameters_mut());
        }
        v
    }

    /// Zeroed gradient buffers aligned with [`RelNet::parameters`].
    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.parameters().iter().map(|p| Tensor::zeros(p.value.shape())).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.value.len()).sum()
    }

    /// Initial `[N, F]` embeddings of a batch of node inputs.
    pub fn encode_nodes(&self, inputs: &NodeInputs) -> Result<Tensor> {
        self.check_mode(inputs)?;
        Ok(self.encoder.forward(&inputs.tensor)?.0)
    }

    fn check_mode(&self, inputs: &NodeInputs) -> Result<()> {
        if inputs.mode != self.config.mode {
            return Err(RelNetError::Config(format!(
                "model expects {:?} inputs, got {:?}",
                self.config.mode, inputs.mode
            )));
        }
        Ok(())
    }

    /// Attention logit of center `h_i` toward neighbor `h_j`.
    pub fn gat_logit(&self, h_i: &[f64], h_j: &[f64]) -> Result<f64> {
        let f = self.features();
        if h_i.len() != f || h_j.len() != f {
            return Err(NeuralError::Shape {
                op: "gat_logit",
                detail: format!("embeddings of length {} and {}, expected {f}", h_i.len(), h_j.len()),
            }
            .into());
        }
        let pair = Tensor::new(vec![1, 2 * f], [h_i, h_j].concat())?;
        let hidden = neural::relu(&self.gat_hidden.forward(&pair)?);
        Ok(self.gat_out.forward(&hidden)?.data()[0])
    }

    fn attention_layer(&self, edges: &DirectedEdges, h: &Tensor) -> Result<(Tensor, Tensor, Tensor, AttentionState)> {
        let f = self.features();
        let e = edges.len();
        let mut pair_data = Vec::with_capacity(e * 2 * f);
        for k in 0..e {
            pair_data.extend_from_slice(h.row(edges.center[k]));
            pair_data.extend_from_slice(h.row(edges.neighbor[k]));
        }
        let pairs = Tensor::new(vec![e, 2 * f], pair_data)?;
        let gat_pre = self.gat_hidden.forward(&pairs)?;
        let gat_act = neural::relu(&gat_pre);
        let logits = self.gat_out.forward(&gat_act)?.into_data();
        let mut scale = logits.clone();
        for seg in edges.segments() {
            neural::softmax_in_place(&mut scale[seg]);
        }
        let corrected = scale.iter().zip(&edges.prior).map(|(s, a)| a * s).collect();
        let attention = AttentionState { edges: edges.clone(), logits, scale, corrected };
        Ok((pairs, gat_pre, gat_act, attention))
    }

    /// Attention state of a single layer for the given embeddings.
    pub fn attention_correct(&self, graph: &RelGraph, embeddings: &Tensor) -> Result<AttentionState> {
        let edges = DirectedEdges::from_graph(graph);
        Ok(self.attention_layer(&edges, embeddings)?.3)
    }

    /// Message passing from initial embeddings `h0` through `self.config.layers` layers.
    pub fn gcn_layers(&self, graph: &RelGraph, h0: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let edges = DirectedEdges::from_graph(graph);
        let caches = self.run_layers(&edges, h0.clone())?;
        let outputs = caches.iter().map(|c| c.pre.clone()).collect();
        let raw = caches.last().expect("layers >= 1").pre.clone();
        Ok((outputs, neural::l2_normalize(&raw)?))
    }

    fn run_layers(&self, edges: &DirectedEdges, mut h: Tensor) -> Result<Vec<LayerCache>> {
        let layers = self.config.layers;
        let mut caches = Vec::with_capacity(layers);
        for l in 0..layers {
            let (pairs, gat_pre, gat_act, attention) = self.attention_layer(edges, &h)?;
            let mut pre = self.u_self.forward(&h)?;
            let nbr_msg = self.u_nbr.forward(&h)?;
            for k in 0..edges.len() {
                let w = attention.corrected[k];
                if w == 0.0 {
                    continue;
                }
                let src = nbr_msg.row(edges.neighbor[k]).to_vec();
                for (p, m) in pre.row_mut(edges.center[k]).iter_mut().zip(src) {
                    *p += w * m;
                }
            }
            let next = if l + 1 == layers { pre.clone() } else { neural::relu(&pre) };
            caches.push(LayerCache {
                h_in: std::mem::replace(&mut h, next),
                pairs,
                gat_pre,
                gat_act,
                attention,
                nbr_msg,
                pre,
            });
        }
        Ok(caches)
    }

    pub fn forward(&self, graph: &RelGraph, inputs: &NodeInputs) -> Result<ForwardPass> {
        self.check_mode(inputs)?;
        if inputs.len() != graph.len() {
            return Err(NeuralError::Shape {
                op: "forward",
                detail: format!("{} node inputs for {} graph nodes", inputs.len(), graph.len()),
            }
            .into());
        }
        let (encoded, encoder) = self.encoder.forward(&inputs.tensor)?;
        let edges = DirectedEdges::from_graph(graph);
        let layers = self.run_layers(&edges, encoded.clone())?;
        let raw = layers.last().expect("layers >= 1").pre.clone();
        let embeddings = neural::l2_normalize(&raw)?;
        Ok(ForwardPass { encoder, layers, encoded, raw, embeddings })
    }

    /// Accumulates parameter gradients for `dL/d(embeddings) = grad_embeddings`
    /// into `grads` (aligned with [`RelNet::parameters`]).
    pub fn backward(
        &self,
        inputs: &NodeInputs,
        pass: &ForwardPass,
        grad_embeddings: &Tensor,
        grads: &mut [Tensor],
    ) -> Result<()> {
        let f = self.features();
        let enc_count = self.encoder.parameter_count();
        let (g_enc, rest) = grads.split_at_mut(enc_count);
        let (g_gat_hidden, rest) = rest.split_at_mut(2);
        let (g_gat_out, rest) = rest.split_at_mut(2);
        let (g_self, g_nbr) = rest.split_at_mut(2);

        let mut g_h = neural::l2_normalize_backward(&pass.raw, grad_embeddings)?;
        let last = pass.layers.len() - 1;
        for (l, cache) in pass.layers.iter().enumerate().rev() {
            let g_pre = if l == last { g_h } else { neural::relu_backward(&cache.pre, &g_h) };
            let mut g_in = self.u_self.backward_into(&cache.h_in, &g_pre, g_self)?;

            let att = &cache.attention;
            let e = att.edges.len();
            let mut g_msg = Tensor::zeros(cache.nbr_msg.shape());
            let mut g_scale = vec![0.0; e];
            for k in 0..e {
                let (c, j) = (att.edges.center[k], att.edges.neighbor[k]);
                let gp = g_pre.row(c);
                let g_corrected: f64 = gp.iter().zip(cache.nbr_msg.row(j)).map(|(a, b)| a * b).sum();
                g_scale[k] = att.edges.prior[k] * g_corrected;
                let w = att.corrected[k];
                if w != 0.0 {
                    for (gm, &gv) in g_msg.row_mut(j).iter_mut().zip(gp) {
                        *gm += w * gv;
                    }
                }
            }
            g_in.add_assign(&self.u_nbr.backward_into(&cache.h_in, &g_msg, g_nbr)?)?;

            if e > 0 {
                let mut g_logits = vec![0.0; e];
                for seg in att.edges.segments() {
                    neural::softmax_slice_backward(&att.scale[seg.clone()], &g_scale[seg.clone()], &mut g_logits[seg]);
                }
                let g_logits = Tensor::new(vec![e, 1], g_logits)?;
                let g_act = self.gat_out.backward_into(&cache.gat_act, &g_logits, g_gat_out)?;
                let g_gat_pre = neural::relu_backward(&cache.gat_pre, &g_act);
                let g_pairs = self.gat_hidden.backward_into(&cache.pairs, &g_gat_pre, g_gat_hidden)?;
                for k in 0..e {
                    let row = g_pairs.row(k);
                    for (d, &v) in g_in.row_mut(att.edges.center[k]).iter_mut().zip(&row[..f]) {
                        *d += v;
                    }
                    for (d, &v) in g_in.row_mut(att.edges.neighbor[k]).iter_mut().zip(&row[f..]) {
                        *d += v;
                    }
                }
            }
            g_h = g_in;
        }
        self.encoder.backward(&inputs.tensor, &pass.encoder, &g_h, g_enc)
    }

    /// Graph construction inputs plus a forward pass, then cosine matching.
    pub fn predict(&self, scene: &Scene, graph: &RelGraph) -> Result<OwnershipPrediction> {
        if graph.image_id != scene.image_id || graph.len() != scene.boxes.len() {
            return Err(RelNetError::Mismatch { graph: graph.image_id.clone(), scene: scene.image_id.clone() });
        }
        let inputs = NodeInputs::from_scene(scene, self.config.mode)?;
        let pass = self.forward(graph, &inputs)?;
        Ok(match_pairs(graph, &pass.embeddings, self.config.threshold))
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            architecture: self.config.clone(),
            parameters: TensorCheckpoint::new(self.named_parameters().into_iter().map(|(n, p)| (n, &p.value))),
        }
    }

    pub fn from_checkpoint(ck: ModelCheckpoint) -> Result<Self> {
        let mut net = RelNet::new(ck.architecture, 0)?;
        let tensors = ck.parameters.into_tensors()?;
        let names: Vec<String> = net.named_parameters().into_iter().map(|(n, _)| n).collect();
        if tensors.len() != names.len() {
            return Err(RelNetError::Checkpoint(format!("expected {} tensors, found {}", names.len(), tensors.len())));
        }
        for ((name, tensor), (expected, param)) in tensors.into_iter().zip(names.iter().zip(net.parameters_mut())) {
            if &name != expected || tensor.shape() != param.value.shape() {
                return Err(RelNetError::Checkpoint(format!(
                    "tensor '{name}' {:?} does not match '{expected}' {:?}",
                    tensor.shape(),
                    param.value.shape()
                )));
            }
            *param = Parameter::new(tensor);
        }
        Ok(net)
    }
}

/// Serialized model: architecture block plus named parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub architecture: RelNetConfig,
    pub parameters: TensorCheckpoint,
}

/// Scores every connected vehicle-wheel pair by the dot product of unit
/// embeddings, keeps scores above `threshold`, and assigns each wheel to its
/// best retained vehicle (ties to the smaller box id).
pub fn match_pairs(graph: &RelGraph, embeddings: &Tensor, threshold: f64) -> OwnershipPrediction {
    let mut pairs = Vec::new();
    let mut best: BTreeMap<u32, (f64, u32)> = BTreeMap::new();
    for (vi, wi, _) in graph.vehicle_wheel_edges() {
        if !(graph.mask[vi] && graph.mask[wi]) {
            continue;
        }
        let score: f64 = embeddings.row(vi).iter().zip(embeddings.row(wi)).map(|(a, b)| a * b).sum();
        if score <= threshold {
            continue;
        }
        let (v, w) = (graph.nodes[vi].box_id, graph.nodes[wi].box_id);
        pairs.push((v, w, score));
        let entry = best.entry(w).or_insert((score, v));
        if score > entry.0 || (score == entry.0 && v < entry.1) {
            *entry = (score, v);
        }
    }
    pairs.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    OwnershipPrediction {
        image_id: graph.image_id.clone(),
        threshold,
        pairs,
        assignments: best.into_iter().map(|(w, (_, v))| (w, v)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Edge, GraphNode};
    use crate::prior::PairKind;

    fn small_config() -> RelNetConfig {
        RelNetConfig { features: 8, geo_hidden: 8, ..RelNetConfig::default() }
    }

    fn graph_of(classes: &[ObjectClass], edges: &[(usize, usize, f64)]) -> RelGraph {
        let n = classes.len();
        let mut adjacency = vec![0.0; n * n];
        let edges: Vec<Edge> = edges
            .iter()
            .map(|&(i, j, weight)| {
                adjacency[i * n + j] = weight;
                adjacency[j * n + i] = weight;
                let kind = if classes[i] == classes[j] { PairKind::WheelWheel } else { PairKind::WheelVehicle };
                Edge { i, j, kind, weight }
            })
            .collect();
        RelGraph {
            image_id: "g".into(),
            nodes: classes
                .iter()
                .enumerate()
                .map(|(i, &class)| GraphNode { box_id: i as u32, class, scene_index: i })
                .collect(),
            edges,
            mask: vec![true; n],
            adjacency,
        }
    }

    #[test]
    fn zero_logit_for_zero_parameters() {
        let mut net = RelNet::new(small_config(), 1).unwrap();
        for p in net.parameters_mut() {
            p.value.fill(0.0);
        }
        assert_eq!(net.gat_logit(&[0.3; 8], &[-0.1; 8]).unwrap(), 0.0);
        assert!(net.gat_logit(&[0.0; 7], &[0.0; 8]).is_err());
    }

    #[test]
    fn zero_geometric_input_gives_zero_embedding() {
        let net = RelNet::new(small_config(), 4).unwrap();
        let inputs = NodeInputs { mode: InputMode::Geometric, tensor: Tensor::zeros(&[3, GEOMETRIC_FEATURES]) };
        let h = net.encode_nodes(&inputs).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn singleton_and_pair_attention() {
        let net = RelNet::new(small_config(), 2).unwrap();
        let g = graph_of(&[ObjectClass::Vehicle, ObjectClass::Wheel], &[(0, 1, 0.7)]);
        let h = Tensor::new(vec![2, 8], (0..16).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let att = net.attention_correct(&g, &h).unwrap();
        assert_eq!(att.scale, vec![1.0, 1.0]);
        assert_eq!(att.corrected, vec![0.7, 0.7]);

        // Equal logits: a center whose two neighbors have identical embeddings.
        let g = graph_of(
            &[ObjectClass::Wheel, ObjectClass::Vehicle, ObjectClass::Vehicle],
            &[(0, 1, 0.6), (0, 2, 0.2)],
        );
        let mut data = vec![0.5; 8];
        data.extend(vec![-0.25; 16]);
        let h = Tensor::new(vec![3, 8], data).unwrap();
        let att = net.attention_correct(&g, &h).unwrap();
        assert_eq!(&att.scale[..2], &[0.5, 0.5]);
        assert!((att.corrected[0] - 0.3).abs() < 1e-15 && (att.corrected[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn isolated_node_has_empty_attention_row() {
        let net = RelNet::new(small_config(), 2).unwrap();
        let g = graph_of(&[ObjectClass::Vehicle, ObjectClass::Vehicle], &[]);
        let h = Tensor::new(vec![2, 8], vec![0.1; 16]).unwrap();
        let att = net.attention_correct(&g, &h).unwrap();
        assert!(att.scale.is_empty() && att.edges.is_empty());
        assert_eq!(att.edges.offsets, vec![0, 0, 0]);
    }

    #[test]
    fn matching_rules() {
        let g = graph_of(
            &[ObjectClass::Vehicle, ObjectClass::Vehicle, ObjectClass::Wheel, ObjectClass::Wheel],
            &[(0, 2, 0.5), (1, 2, 0.5), (0, 3, 0.5)],
        );
        let s71 = (1.0f64 - 0.71 * 0.71).sqrt();
        let s88 = (1.0f64 - 0.88 * 0.88).sqrt();
        // wheel 2 = e0; vehicle 0 at cos 0.71, vehicle 1 at cos 0.88; wheel 3 orthogonal to vehicle 0.
        let emb = Tensor::new(
            vec![4, 3],
            vec![0.71, s71, 0.0, 0.88, 0.0, s88, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let pred = match_pairs(&g, &emb, 0.5);
        assert_eq!(pred.pairs.len(), 2);
        assert_eq!(pred.assignments.get(&2), Some(&1));
        assert_eq!(pred.assignments.get(&3), None);

        let same = Tensor::new(vec![2, 2], vec![0.6, 0.8, 0.6, 0.8]).unwrap();
        let g2 = graph_of(&[ObjectClass::Vehicle, ObjectClass::Wheel], &[(0, 1, 0.9)]);
        let pred = match_pairs(&g2, &same, 0.5);
        assert!((pred.pairs[0].2 - 1.0).abs() < 1e-15);
        assert_eq!(pred.assignments.get(&1), Some(&0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = RelNet::new(small_config(), 9).unwrap();
        let json = serde_json::to_string(&net.checkpoint()).unwrap();
        let back = RelNet::from_checkpoint(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, net);
        let other = RelNet::new(RelNetConfig { features: 4, ..small_config() }, 9).unwrap();
        let mut ck = other.checkpoint();
        ck.architecture = small_config();
        assert!(RelNet::from_checkpoint(ck).is_err());
    }

    #[test]
    fn patch_config_needs_room() {
        let cfg = RelNetConfig { mode: InputMode::Patch, conv_channels: vec![4; 6], ..small_config() };
        assert!(RelNet::new(cfg, 0).is_err());
    }
}
