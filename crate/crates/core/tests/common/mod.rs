#![allow(dead_code)]

use deepword::graph::{build_graph, GraphConfig};
use deepword::prior::{Component, GaussianMixture, PairKind, PriorModel};
use deepword::relnet::{NodeInputs, RelNet, RelNetConfig};
use deepword::scene::{Camera, DetBox, ObjectClass, Scene};
use deepword::training::{training_pairs, SceneSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Broad priors so that random scenes keep most legal edges.
pub fn broad_prior() -> PriorModel {
    let wv = GaussianMixture::new(
        PairKind::WheelVehicle,
        vec![
            Component { weight: 0.5, mean: 0.6, std: 0.8 },
            Component { weight: 0.5, mean: 1.4, std: 0.7 },
        ],
    )
    .unwrap();
    let ww = GaussianMixture::new(PairKind::WheelWheel, vec![Component { weight: 1.0, mean: 1.3, std: 0.9 }]).unwrap();
    PriorModel::new(wv, ww)
}

pub fn random_box<R: Rng>(rng: &mut R, class: ObjectClass, id: u32, w: f64, h: f64) -> DetBox {
    let (lo, hi) = match class {
        ObjectClass::Vehicle => (0.15, 0.5),
        ObjectClass::Wheel => (0.04, 0.12),
    };
    let bw = w * rng.random_range(lo..hi);
    let bh = h * rng.random_range(lo..hi);
    let x1 = rng.random_range(0.0..w - bw);
    let y1 = rng.random_range(0.0..h - bh);
    DetBox::new(x1, y1, x1 + bw, y1 + bh, rng.random_range(0.5..1.0), class, id)
}

/// Random scene with the given class counts; each wheel gets a random owner.
pub fn random_scene<R: Rng>(rng: &mut R, vehicles: usize, wheels: usize) -> Scene {
    let (w, h) = (1280.0, 720.0);
    let mut boxes = Vec::new();
    for i in 0..vehicles {
        boxes.push(random_box(rng, ObjectClass::Vehicle, i as u32, w, h));
    }
    let mut relations = Vec::new();
    for k in 0..wheels {
        let id = (vehicles + k) as u32;
        boxes.push(random_box(rng, ObjectClass::Wheel, id, w, h));
        if vehicles > 0 {
            relations.push((rng.random_range(0..vehicles) as u32, id));
        }
    }
    relations.sort();
    Scene { image_id: format!("rand-{}", rng.random::<u32>()), camera: Camera::Front, width: w, height: h, boxes, relations }
}

pub fn open_graph_config() -> GraphConfig {
    GraphConfig { edge_eps: 0.0, mask_tau: None }
}

/// Training sample for a scene with every legal edge kept.
pub fn sample_for(scene: &Scene, config: &RelNetConfig, neg_weight: f64) -> SceneSample {
    let graph = build_graph(scene, &broad_prior(), &open_graph_config());
    let inputs = NodeInputs::from_scene(scene, config.mode).unwrap();
    let pairs = training_pairs(scene, &graph, neg_weight, None);
    SceneSample { scene: scene.clone(), graph, inputs, pairs }
}

pub fn small_config() -> RelNetConfig {
    RelNetConfig { features: 8, geo_hidden: 8, ..RelNetConfig::default() }
}

pub fn small_net(seed: u64) -> RelNet {
    RelNet::new(small_config(), seed).unwrap()
}

/// `x W + b` for a single row, with `W` stored `[inputs, outputs]`.
fn affine(layer: &deepword::neural::Linear, x: &[f64]) -> Vec<f64> {
    let w = layer.weight.value.data();
    let b = layer.bias.value.data();
    let outs = b.len();
    (0..outs).map(|o| b[o] + x.iter().enumerate().map(|(i, xi)| xi * w[i * outs + o]).sum::<f64>()).collect()
}

/// Dense per-node attention: `(scale, corrected)` as `N x N` matrices,
/// computed with plain loops straight from the layer definition.
pub fn naive_attention(net: &RelNet, graph: &deepword::graph::RelGraph, h: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = graph.len();
    let mut scale = vec![vec![0.0; n]; n];
    let mut corrected = vec![vec![0.0; n]; n];
    for i in 0..n {
        let nbrs: Vec<usize> = (0..n).filter(|&j| graph.weight(i, j) > 0.0).collect();
        let logits: Vec<f64> = nbrs
            .iter()
            .map(|&j| {
                let pair: Vec<f64> = h[i].iter().chain(&h[j]).copied().collect();
                let hidden: Vec<f64> = affine(&net.gat_hidden, &pair).into_iter().map(|v| v.max(0.0)).collect();
                affine(&net.gat_out, &hidden)[0]
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for (k, &j) in nbrs.iter().enumerate() {
            scale[i][j] = (logits[k] - max).exp() / z;
            corrected[i][j] = graph.weight(i, j) * scale[i][j];
        }
    }
    (scale, corrected)
}

/// Loop oracle of the message passing: returns the last layer before normalization.
pub fn naive_gcn(net: &RelNet, graph: &deepword::graph::RelGraph, h0: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = graph.len();
    let mut h = h0.to_vec();
    for layer in 0..net.config.layers {
        let (_, corrected) = naive_attention(net, graph, &h);
        let msgs: Vec<Vec<f64>> = h.iter().map(|x| affine(&net.u_nbr, x)).collect();
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let mut out = affine(&net.u_self, &h[i]);
            for j in 0..n {
                if corrected[i][j] != 0.0 {
                    for (o, m) in out.iter_mut().zip(&msgs[j]) {
                        *o += corrected[i][j] * m;
                    }
                }
            }
            if layer + 1 < net.config.layers {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            next.push(out);
        }
        h = next;
    }
    h
}

pub fn rows(t: &deepword::neural::Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}
