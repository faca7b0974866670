//! IoU "logic model": each wheel goes to the overlapping vehicle with the
//! highest IoU, ties broken by the nearest vehicle center.

use std::collections::BTreeMap;

use crate::graph::small_object_mask;
use crate::scene::{DetBox, OwnershipPrediction, Scene};

const TIE_EPS: f64 = 1e-9;

pub fn iou(a: &DetBox, b: &DetBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

fn center_distance(a: &DetBox, b: &DetBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

/// Assigns every unmasked wheel to the unmasked vehicle with maximal IoU.
///
/// Candidates whose IoU is within 1e-9 of the best are ranked by center
/// distance, then by box id. Wheels overlapping no vehicle stay unassigned.
/// The reported pairs are the assignments, scored by their IoU.
pub fn logic_assign(scene: &Scene, mask_tau: Option<f64>) -> OwnershipPrediction {
    let keep = match mask_tau {
        Some(tau) => small_object_mask(scene, tau),
        None => vec![true; scene.boxes.len()],
    };
    let kept = |b: &&DetBox| keep[scene.index_of(b.box_id).expect("box from scene")];
    let vehicles: Vec<&DetBox> = scene.vehicles().filter(kept).collect();
    let mut pairs = Vec::new();
    let mut assignments = BTreeMap::new();
    for wheel in scene.wheels().filter(kept) {
        let candidates: Vec<(f64, &DetBox)> = vehicles
            .iter()
            .map(|v| (iou(wheel, v), *v))
            .filter(|(score, _)| *score > 0.0)
            .collect();
        let Some(best) = candidates.iter().map(|c| c.0).reduce(f64::max) else { continue };
        let winner = candidates
            .iter()
            .filter(|(score, _)| best - score <= TIE_EPS)
            .min_by(|(_, a), (_, b)| {
                center_distance(wheel, a)
                    .total_cmp(&center_distance(wheel, b))
                    .then(a.box_id.cmp(&b.box_id))
            })
            .expect("best candidate exists");
        pairs.push((winner.1.box_id, wheel.box_id, winner.0));
        assignments.insert(wheel.box_id, winner.1.box_id);
    }
    OwnershipPrediction {
        image_id: scene.image_id.clone(),
        threshold: 0.0,
        pairs,
        assignments,
    }
}
