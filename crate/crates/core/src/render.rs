//! SVG overlay: boxes, box ids and ownership lines.
//!
//! For every vehicle the two owned wheels are joined by a red line, the rear
//! wheel is joined to the vehicle by a green line and the front wheel by a
//! blue one.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::prior::rear_front;
use crate::scene::{ObjectClass, OwnershipPrediction, Scene};

const VEHICLE_STROKE: &str = "#f2c200";
const WHEEL_STROKE: &str = "#ff7f0e";
const COUPLE: &str = "#d62728";
const REAR: &str = "#2ca02c";
const FRONT: &str = "#1f77b4";

/// Renders `scene` with the ownership of `prediction`, or of the labels when `None`.
pub fn render_svg(scene: &Scene, prediction: Option<&OwnershipPrediction>) -> String {
    let owners: BTreeMap<u32, u32> = match prediction {
        Some(p) => p.assignments.clone(),
        None => scene.owner_map(),
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = scene.width,
        h = scene.height
    );
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="#202020"/>"##);
    let _ = writeln!(out, "<title>{}</title>", escape(&scene.image_id));
    for b in &scene.boxes {
        let stroke = if b.class == ObjectClass::Vehicle { VEHICLE_STROKE } else { WHEEL_STROKE };
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="{stroke}" stroke-width="2"/>"#,
            b.x1,
            b.y1,
            b.width(),
            b.height()
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" fill="{stroke}" font-size="14" font-family="monospace">{}</text>"#,
            b.x1 + 2.0,
            b.y1 + 14.0,
            b.box_id
        );
    }

    let mut by_vehicle: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (&w, &v) in &owners {
        by_vehicle.entry(v).or_default().push(w);
    }
    let line = |out: &mut String, a: (f64, f64), b: (f64, f64), color: &str, class: &str| {
        let _ = writeln!(
            out,
            r#"<line class="{class}" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="3"/>"#,
            a.0, a.1, b.0, b.1
        );
    };
    for (v, wheels) in by_vehicle {
        let Some(vehicle) = scene.find(v) else { continue };
        let boxes: Vec<_> = wheels.iter().filter_map(|&w| scene.find(w)).collect();
        match boxes.as_slice() {
            [p, q] => {
                let (rear, front) = rear_front(p, q);
                line(&mut out, rear.center(), front.center(), COUPLE, "couple");
                line(&mut out, rear.center(), vehicle.center(), REAR, "rear");
                line(&mut out, front.center(), vehicle.center(), FRONT, "front");
            }
            _ => {
                for w in boxes {
                    line(&mut out, w.center(), vehicle.center(), REAR, "rear");
                }
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
