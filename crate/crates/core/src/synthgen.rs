//! Deterministic synthetic scenes with ownership labels.
//!
//! Vehicles stand on a ground plane seen in perspective: the lower a vehicle's
//! bottom edge, the nearer and larger it is. Each vehicle carries one or two
//! wheels in the lower part of its box. Hard scenes pack more vehicles and can
//! be forced to contain wheels that lie completely inside a second, smaller
//! and nearer vehicle box, which is the case IoU rules get wrong.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neural::Tensor;
use crate::scene::{Camera, DetBox, ObjectClass, Scene};

pub const PATCH_SIZE: usize = 56;
pub const PALETTE_SIZE: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("could not place {vehicles} vehicles in a {width}x{height} image after {attempts} attempts")]
    Infeasible { vehicles: usize, width: f64, height: f64, attempts: usize },
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("scene '{image_id}' has no box {box_id}")]
    UnknownBox { image_id: String, box_id: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
    Mixed,
}

impl Difficulty {
    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
            Difficulty::Mixed => "mixed",
        }
    }
}

impl std::str::FromStr for Difficulty {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            "mixed" => Ok(Difficulty::Mixed),
            other => Err(format!("unknown difficulty '{other}' (easy, hard, mixed)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub n_scenes: usize,
    pub difficulty: Difficulty,
    pub width: f64,
    pub height: f64,
    /// Inclusive vehicle-count range for easy scenes.
    pub easy_vehicles: (usize, usize),
    /// Inclusive vehicle-count range for hard scenes.
    pub hard_vehicles: (usize, usize),
    /// Fraction of hard scenes forced to contain a wheel inside two vehicle boxes.
    pub overlap_rate: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            n_scenes: 100,
            difficulty: Difficulty::Easy,
            width: 1280.0,
            height: 720.0,
            easy_vehicles: (1, 3),
            hard_vehicles: (4, 8),
            overlap_rate: 0.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let (e0, e1) = self.easy_vehicles;
        let (h0, h1) = self.hard_vehicles;
        if !(1 <= e0 && e0 <= e1 && e1 <= 3) {
            return Err(GenError::Config(format!("easy vehicle range {e0}..={e1} must lie in 1..=3")));
        }
        if !(4 <= h0 && h0 <= h1) {
            return Err(GenError::Config(format!("hard vehicle range {h0}..={h1} must start at 4 or more")));
        }
        if !(0.0..=1.0).contains(&self.overlap_rate) {
            return Err(GenError::Config(format!("overlap_rate {} outside [0,1]", self.overlap_rate)));
        }
        if !(self.width >= 320.0 && self.height >= 240.0 && self.width.is_finite() && self.height.is_finite()) {
            return Err(GenError::Config(format!("image {}x{} too small", self.width, self.height)));
        }
        Ok(())
    }

    /// Difficulty of scene `index`; mixed sets alternate easy and hard.
    pub fn scene_difficulty(&self, index: usize) -> Difficulty {
        match self.difficulty {
            Difficulty::Mixed if index.is_multiple_of(2) => Difficulty::Easy,
            Difficulty::Mixed => Difficulty::Hard,
            d => d,
        }
    }
}

const MAX_SCENE_ATTEMPTS: usize = 200;
const MAX_VEHICLE_ATTEMPTS: usize = 400;

pub fn generate(cfg: &GenConfig) -> Result<Vec<Scene>, GenError> {
    cfg.validate()?;
    (0..cfg.n_scenes).map(|i| generate_scene(cfg, i)).collect()
}

/// Scene `index` of the set described by `cfg`; independent of every other index.
pub fn generate_scene(cfg: &GenConfig, index: usize) -> Result<Scene, GenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let difficulty = cfg.scene_difficulty(index);
    let (lo, hi) = match difficulty {
        Difficulty::Hard => cfg.hard_vehicles,
        _ => cfg.easy_vehicles,
    };
    let n_vehicles = rng.random_range(lo..=hi);
    let force_overlap = difficulty == Difficulty::Hard && rng.random::<f64>() < cfg.overlap_rate;
    let layout = Layout::new(cfg.width, cfg.height, difficulty);
    for _ in 0..MAX_SCENE_ATTEMPTS {
        let Some(mut vehicles) = layout.place_vehicles(n_vehicles, &mut rng) else { continue };
        if force_overlap && !layout.force_overlaps(&mut vehicles, &mut rng) {
            continue;
        }
        let image_id = format!("{}-{}-{:05}", cfg.difficulty.as_str(), cfg.seed, index);
        let camera = Camera::ALL[rng.random_range(0..4)];
        let scene = assemble(image_id, camera, cfg.width, cfg.height, &vehicles, &mut rng);
        if scene.validate().is_ok() && (!force_overlap || has_shared_wheel(&scene)) {
            return Ok(scene);
        }
    }
    Err(GenError::Infeasible {
        vehicles: n_vehicles,
        width: cfg.width,
        height: cfg.height,
        attempts: MAX_SCENE_ATTEMPTS,
    })
}

#[derive(Debug, Clone)]
struct WheelSpec {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

#[derive(Debug, Clone)]
struct VehicleSpec {
    x1: f64,
    x2: f64,
    /// Bottom edge (ground contact).
    yb: f64,
    h: f64,
    wheels: Vec<WheelSpec>,
}

impl VehicleSpec {
    fn y1(&self) -> f64 {
        self.yb - self.h
    }

    fn w(&self) -> f64 {
        self.x2 - self.x1
    }

    fn area(&self) -> f64 {
        self.w() * self.h
    }

    fn iou(&self, o: &VehicleSpec) -> f64 {
        let ix = (self.x2.min(o.x2) - self.x1.max(o.x1)).max(0.0);
        let iy = (self.yb.min(o.yb) - self.y1().max(o.y1())).max(0.0);
        let inter = ix * iy;
        inter / (self.area() + o.area() - inter)
    }

    fn contains(&self, w: &WheelSpec) -> bool {
        w.x1 >= self.x1 && w.x2 <= self.x2 && w.y1 >= self.y1() && w.y2 <= self.yb
    }
}

struct Layout {
    width: f64,
    height: f64,
    ground_top: f64,
    ground_bottom: f64,
    max_iou: f64,
}

impl Layout {
    fn new(width: f64, height: f64, difficulty: Difficulty) -> Self {
        Layout {
            width,
            height,
            ground_top: 0.54 * height,
            ground_bottom: height - 4.0,
            max_iou: if difficulty == Difficulty::Hard { 0.45 } else { 0.12 },
        }
    }

    /// Vehicle height for a bottom edge at `yb`: 0.25 H far away, 0.53 H near.
    fn base_height(&self, yb: f64) -> f64 {
        let depth = (yb - self.ground_top) / (self.ground_bottom - self.ground_top);
        self.height * (0.25 + 0.28 * depth)
    }

    fn vehicle_at<R: Rng>(&self, yb: f64, size_factor: f64, cx: f64, rng: &mut R) -> Option<VehicleSpec> {
        let h = self.base_height(yb) * size_factor;
        let w = (h * rng.random_range(1.3..2.3)).min(0.85 * self.width);
        let x1 = cx - w / 2.0;
        let x2 = cx + w / 2.0;
        if x1 < 1.0 || x2 > self.width - 1.0 || yb - h < 1.0 || yb > self.height - 1.0 {
            return None;
        }
        let mut v = VehicleSpec { x1, x2, yb, h, wheels: Vec::new() };
        v.wheels = make_wheels(&v, rng);
        Some(v)
    }

    fn random_vehicle<R: Rng>(&self, rng: &mut R) -> Option<VehicleSpec> {
        let yb = rng.random_range(self.ground_top..self.ground_bottom);
        let size_factor = rng.random_range(0.8..1.2);
        let cx = rng.random_range(0.0..self.width);
        self.vehicle_at(yb, size_factor, cx, rng)
    }

    fn acceptable(&self, v: &VehicleSpec, others: &[VehicleSpec]) -> bool {
        others.iter().all(|o| {
            if v.iou(o) > self.max_iou {
                return false;
            }
            // Vehicles at nearly the same depth cannot interpenetrate.
            let overlap_x = (v.x2.min(o.x2) - v.x1.max(o.x1)).max(0.0);
            let same_depth = (v.yb - o.yb).abs() < 0.04 * self.height;
            !(same_depth && overlap_x > 0.1 * v.w().min(o.w()))
        })
    }

    fn place_vehicles<R: Rng>(&self, n: usize, rng: &mut R) -> Option<Vec<VehicleSpec>> {
        let mut placed: Vec<VehicleSpec> = Vec::with_capacity(n);
        for _ in 0..n {
            let mut ok = false;
            for _ in 0..MAX_VEHICLE_ATTEMPTS {
                if let Some(v) = self.random_vehicle(rng) {
                    if self.acceptable(&v, &placed) {
                        placed.push(v);
                        ok = true;
                        break;
                    }
                }
            }
            if !ok {
                return None;
            }
        }
        Some(placed)
    }

    /// Moves some vehicles so that each covers a wheel of another, larger
    /// vehicle while being slightly nearer (lower bottom edge) and smaller.
    fn force_overlaps<R: Rng>(&self, vehicles: &mut [VehicleSpec], rng: &mut R) -> bool {
        let n = vehicles.len();
        let pairs = rng.random_range(1..=(n / 2).max(1));
        let mut used = vec![false; n];
        let mut made = 0;
        for _ in 0..pairs {
            let mut done = false;
            for _ in 0..60 {
                let a = rng.random_range(0..n);
                let b = rng.random_range(0..n);
                if a == b || used[a] || used[b] || vehicles[a].wheels.is_empty() {
                    continue;
                }
                let wi = rng.random_range(0..vehicles[a].wheels.len());
                let wheel = vehicles[a].wheels[wi].clone();
                let owner = vehicles[a].clone();
                if let Some(moved) = self.cover_wheel(&owner, &wheel, rng) {
                    vehicles[b] = moved;
                    used[a] = true;
                    used[b] = true;
                    done = true;
                    break;
                }
            }
            if done {
                made += 1;
            }
        }
        made > 0
    }

    fn cover_wheel<R: Rng>(&self, owner: &VehicleSpec, wheel: &WheelSpec, rng: &mut R) -> Option<VehicleSpec> {
        for _ in 0..40 {
            let h = owner.h * rng.random_range(0.72..0.92);
            if h < 150.0 {
                continue;
            }
            let yb = wheel.y2 + h * rng.random_range(0.07..0.18);
            let aspect = rng.random_range(1.3..2.1);
            let w = h * aspect;
            if w * h >= 0.85 * owner.area() || yb > self.height - 1.0 || yb - h > wheel.y1 - 2.0 {
                continue;
            }
            let lo = wheel.x2 + 3.0 - w;
            let hi = wheel.x1 - 3.0;
            if hi <= lo {
                continue;
            }
            let x1 = rng.random_range(lo..hi);
            let x2 = x1 + w;
            if x1 < 1.0 || x2 > self.width - 1.0 || yb - h < 1.0 {
                continue;
            }
            let mut v = VehicleSpec { x1, x2, yb, h, wheels: Vec::new() };
            v.wheels = make_wheels(&v, rng);
            if v.contains(wheel) {
                return Some(v);
            }
        }
        None
    }
}

fn make_wheels<R: Rng>(v: &VehicleSpec, rng: &mut R) -> Vec<WheelSpec> {
    let count = if rng.random::<f64>() < 0.8 { 2 } else { 1 };
    let mut sides = vec![false, true];
    if count == 1 {
        sides = vec![rng.random::<bool>()];
    }
    sides
        .into_iter()
        .map(|right| {
            let wh = v.h * rng.random_range(0.12..0.22);
            let ww = wh * rng.random_range(1.5..2.0);
            let edge = v.w() * rng.random_range(0.04..0.12);
            let x1 = if right { v.x2 - edge - ww } else { v.x1 + edge };
            let y2 = v.yb - v.h * rng.random_range(0.0..0.03);
            WheelSpec { x1, y1: y2 - wh, x2: x1 + ww, y2 }
        })
        .collect()
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn assemble<R: Rng>(
    image_id: String,
    camera: Camera,
    width: f64,
    height: f64,
    vehicles: &[VehicleSpec],
    rng: &mut R,
) -> Scene {
    let total = vehicles.len() + vehicles.iter().map(|v| v.wheels.len()).sum::<usize>();
    let mut ids: Vec<u32> = (0..total as u32).collect();
    ids.shuffle(rng);
    let mut next = ids.into_iter();
    let mut boxes = Vec::with_capacity(total);
    let mut relations = Vec::new();
    for v in vehicles {
        let vid = next.next().expect("id per box");
        let score = (rng.random_range(0.5..1.0f64) * 1000.0).round() / 1000.0;
        boxes.push(DetBox::new(round2(v.x1), round2(v.y1()), round2(v.x2), round2(v.yb), score, ObjectClass::Vehicle, vid));
        for w in &v.wheels {
            let wid = next.next().expect("id per box");
            let score = (rng.random_range(0.5..1.0f64) * 1000.0).round() / 1000.0;
            boxes.push(DetBox::new(round2(w.x1), round2(w.y1), round2(w.x2), round2(w.y2), score, ObjectClass::Wheel, wid));
            relations.push((vid, wid));
        }
    }
    boxes.sort_by_key(|b| b.box_id);
    relations.sort();
    Scene { image_id, camera, width, height, boxes, relations }
}

/// True when some wheel lies completely inside two or more vehicle boxes.
pub fn has_shared_wheel(scene: &Scene) -> bool {
    scene
        .wheels()
        .any(|w| scene.vehicles().filter(|v| v.contains(w)).count() >= 2)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Palette slot of every vehicle in the scene, distinct within a scene of up
/// to [`PALETTE_SIZE`] vehicles. Wheels take their owner's slot.
pub fn palette_index(scene: &Scene, box_id: u32) -> Option<usize> {
    let target = scene.find(box_id)?;
    let vehicle_id = match target.class {
        ObjectClass::Vehicle => box_id,
        ObjectClass::Wheel => match scene.owner_map().get(&box_id) {
            Some(&v) => v,
            None => return Some((fnv1a(scene.image_id.as_bytes()) as usize + box_id as usize * 5) % PALETTE_SIZE),
        },
    };
    let rank = scene.vehicles().filter(|v| v.box_id < vehicle_id).count();
    Some((fnv1a(scene.image_id.as_bytes()) as usize + rank) % PALETTE_SIZE)
}

pub fn palette_hue(index: usize) -> f64 {
    index as f64 / PALETTE_SIZE as f64
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Hue in `[0, 1)` of an RGB triple.
pub fn rgb_hue(rgb: [f64; 3]) -> f64 {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d <= 0.0 {
        return 0.0;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    h / 6.0
}

/// Procedural `[3, 56, 56]` appearance patch for one box.
///
/// The hue comes from the owning vehicle's palette slot, so a wheel and its
/// vehicle share a hue family. Vehicles get a vertical brightness ramp, wheels
/// a radial one, plus low-amplitude noise seeded by the scene and box.
pub fn render_patch(scene: &Scene, box_id: u32) -> Result<Tensor, GenError> {
    let target = scene.find(box_id).ok_or_else(|| GenError::UnknownBox {
        image_id: scene.image_id.clone(),
        box_id,
    })?;
    let hue = palette_hue(palette_index(scene, box_id).expect("box exists"));
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(scene.image_id.as_bytes()) ^ (box_id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let n = PATCH_SIZE;
    let mut data = vec![0.0; 3 * n * n];
    let half = (n - 1) as f64 / 2.0;
    for y in 0..n {
        for x in 0..n {
            let value = match target.class {
                ObjectClass::Vehicle => 0.45 + 0.45 * y as f64 / (n - 1) as f64,
                ObjectClass::Wheel => {
                    let r = (((x as f64 - half).powi(2) + (y as f64 - half).powi(2)).sqrt() / half).min(1.0);
                    0.3 + 0.5 * r
                }
            };
            let rgb = hsv_to_rgb(hue, 0.75, value);
            for c in 0..3 {
                let noisy = rgb[c] + rng.random_range(-0.03..0.03);
                data[c * n * n + y * n + x] = noisy.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Tensor::new(vec![3, n, n], data).expect("patch shape"))
}

/// Mean-colour hue of a `[3, H, W]` patch.
pub fn patch_hue(patch: &Tensor) -> f64 {
    let plane = patch.len() / 3;
    let mut mean = [0.0; 3];
    for (c, m) in mean.iter_mut().enumerate() {
        *m = patch.data()[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
    }
    rgb_hue(mean)
}

pub fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}
