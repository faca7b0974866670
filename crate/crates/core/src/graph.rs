//! Relationship graph: one node per box, prior-weighted vehicle-wheel and
//! wheel-wheel edges, and the small-object mask.

use serde::Serialize;

use crate::prior::{pair_geometry, rear_front, PairKind, PriorModel};
use crate::scene::{ObjectClass, Scene};

pub const DEFAULT_EDGE_EPS: f64 = 1e-3;
pub const DEFAULT_MASK_TAU: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphConfig {
    /// Edges whose prior weight falls below this are dropped. 0 keeps every legal pair.
    pub edge_eps: f64,
    /// Small-object threshold; `None` disables the mask.
    pub mask_tau: Option<f64>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { edge_eps: DEFAULT_EDGE_EPS, mask_tau: Some(DEFAULT_MASK_TAU) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GraphNode {
    pub box_id: u32,
    #[serde(serialize_with = "class_id")]
    pub class: ObjectClass,
    /// Index of the box in `Scene::boxes`.
    pub scene_index: usize,
}

fn class_id<S: serde::Serializer>(c: &ObjectClass, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_u8(c.id())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Edge {
    /// Always `i < j`.
    pub i: usize,
    pub j: usize,
    pub kind: PairKind,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelGraph {
    pub image_id: String,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<Edge>,
    /// `true` when the node takes part in message passing, loss and matching.
    pub mask: Vec<bool>,
    /// Dense row-major `N x N` prior weights, symmetric, zero diagonal.
    #[serde(skip)]
    pub adjacency: Vec<f64>,
}

impl RelGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i * self.nodes.len() + j]
    }

    /// Neighbors of every node as `(neighbor, prior weight)` in ascending neighbor order.
    pub fn neighbors(&self) -> Vec<Vec<(usize, f64)>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            out[e.i].push((e.j, e.weight));
            out[e.j].push((e.i, e.weight));
        }
        for row in &mut out {
            row.sort_by_key(|&(j, _)| j);
        }
        out
    }

    /// Connected `(vehicle node, wheel node, prior weight)` triples.
    pub fn vehicle_wheel_edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.edges.iter().filter(|e| e.kind == PairKind::WheelVehicle).map(|e| {
            if self.nodes[e.i].class == ObjectClass::Vehicle {
                (e.i, e.j, e.weight)
            } else {
                (e.j, e.i, e.weight)
            }
        })
    }

    /// JSON debug dump: nodes, mask, edges and adjacency rows.
    pub fn dump_json(&self) -> serde_json::Value {
        let n = self.nodes.len();
        let rows: Vec<&[f64]> = (0..n).map(|i| &self.adjacency[i * n..(i + 1) * n]).collect();
        serde_json::json!({
            "image_id": self.image_id,
            "nodes": self.nodes,
            "mask": self.mask,
            "edges": self.edges,
            "adjacency": rows,
        })
    }
}

/// `true` for boxes that are kept: `min(w/W, h/H) >= tau`.
pub fn small_object_mask(scene: &Scene, tau: f64) -> Vec<bool> {
    scene
        .boxes
        .iter()
        .map(|b| (b.width() / scene.width).min(b.height() / scene.height) >= tau)
        .collect()
}

pub fn build_graph(scene: &Scene, prior: &PriorModel, cfg: &GraphConfig) -> RelGraph {
    let n = scene.boxes.len();
    let nodes: Vec<GraphNode> = scene
        .boxes
        .iter()
        .enumerate()
        .map(|(idx, b)| GraphNode { box_id: b.box_id, class: b.class, scene_index: idx })
        .collect();
    let mask = match cfg.mask_tau {
        Some(tau) => small_object_mask(scene, tau),
        None => vec![true; n],
    };
    let dims = scene.dims();
    let mut edges = Vec::new();
    let mut adjacency = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            if !(mask[i] && mask[j]) {
                continue;
            }
            let (p, q) = (&scene.boxes[i], &scene.boxes[j]);
            let (kind, geom) = match (p.class, q.class) {
                (ObjectClass::Vehicle, ObjectClass::Vehicle) => continue,
                (ObjectClass::Vehicle, ObjectClass::Wheel) => (PairKind::WheelVehicle, pair_geometry(p, q, dims)),
                (ObjectClass::Wheel, ObjectClass::Vehicle) => (PairKind::WheelVehicle, pair_geometry(q, p, dims)),
                (ObjectClass::Wheel, ObjectClass::Wheel) => {
                    let (rear, front) = rear_front(p, q);
                    (PairKind::WheelWheel, pair_geometry(rear, front, dims))
                }
            };
            let weight = prior.probability(kind, geom.log_ratio);
            if weight <= 0.0 || weight < cfg.edge_eps {
                continue;
            }
            edges.push(Edge { i, j, kind, weight });
            adjacency[i * n + j] = weight;
            adjacency[j * n + i] = weight;
        }
    }
    RelGraph {
        image_id: scene.image_id.clone(),
        nodes,
        edges,
        mask,
        adjacency,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::{Component, GaussianMixture};
    use crate::scene::{Camera, DetBox};

    fn flat_prior() -> PriorModel {
        let g = |kind| GaussianMixture::new(kind, vec![Component { weight: 1.0, mean: 1.0, std: 1.5 }]).unwrap();
        PriorModel::new(g(PairKind::WheelVehicle), g(PairKind::WheelWheel))
    }

    fn scene(boxes: Vec<DetBox>) -> Scene {
        Scene {
            image_id: "g".into(),
            camera: Camera::Front,
            width: 1280.0,
            height: 720.0,
            boxes,
            relations: vec![],
        }
    }

    #[test]
    fn one_vehicle_two_wheels_topology() {
        let s = scene(vec![
            DetBox::new(100.0, 200.0, 500.0, 400.0, 1.0, ObjectClass::Vehicle, 0),
            DetBox::new(120.0, 340.0, 180.0, 395.0, 1.0, ObjectClass::Wheel, 1),
            DetBox::new(420.0, 340.0, 480.0, 395.0, 1.0, ObjectClass::Wheel, 2),
        ]);
        let g = build_graph(&s, &flat_prior(), &GraphConfig::default());
        let kinds: Vec<_> = g.edges.iter().map(|e| (e.i, e.j, e.kind)).collect();
        assert_eq!(
            kinds,
            vec![(0, 1, PairKind::WheelVehicle), (0, 2, PairKind::WheelVehicle), (1, 2, PairKind::WheelWheel)]
        );
        for i in 0..3 {
            assert_eq!(g.weight(i, i), 0.0);
            for j in 0..3 {
                assert_eq!(g.weight(i, j), g.weight(j, i));
            }
        }
    }

    #[test]
    fn small_wheel_row_is_zero() {
        let s = scene(vec![
            DetBox::new(100.0, 200.0, 500.0, 400.0, 1.0, ObjectClass::Vehicle, 0),
            DetBox::new(120.0, 380.0, 130.0, 390.0, 1.0, ObjectClass::Wheel, 1),
            DetBox::new(420.0, 340.0, 480.0, 395.0, 1.0, ObjectClass::Wheel, 2),
        ]);
        let g = build_graph(&s, &flat_prior(), &GraphConfig::default());
        assert_eq!(g.mask, vec![true, false, true]);
        for j in 0..3 {
            assert_eq!(g.weight(1, j), 0.0);
            assert_eq!(g.weight(j, 1), 0.0);
        }
        assert_eq!(g.edges.len(), 1);
    }

    #[test]
    fn mask_ratios() {
        let s = scene(vec![
            DetBox::new(0.0, 0.0, 100.0, 80.0, 1.0, ObjectClass::Vehicle, 0),
            DetBox::new(0.0, 0.0, 10.0, 10.0, 1.0, ObjectClass::Wheel, 1),
        ]);
        // min(100/1280, 80/720) = 0.078 kept; 10/720 = 0.0139 masked
        assert_eq!(small_object_mask(&s, 0.02), vec![true, false]);
        assert_eq!(small_object_mask(&s, 1e-12), vec![true, true]);
    }

    #[test]
    fn no_wheels_no_edges() {
        let s = scene(vec![
            DetBox::new(0.0, 0.0, 100.0, 80.0, 1.0, ObjectClass::Vehicle, 0),
            DetBox::new(50.0, 0.0, 200.0, 80.0, 1.0, ObjectClass::Vehicle, 1),
        ]);
        let g = build_graph(&s, &flat_prior(), &GraphConfig::default());
        assert!(g.edges.is_empty());
        assert_eq!(g.len(), 2);
        let dump = g.dump_json();
        assert_eq!(dump["adjacency"].as_array().unwrap().len(), 2);
    }
}
