//! Detections, scenes, ownership labels and the JSON-lines scene file.
//!
//! A scene file holds one scene per line:
//!
//! ```text
//! {"image_id":"s0","camera":"front","width":1280,"height":720,
//!  "boxes":[[x1,y1,x2,y2,score,class_id,box_id],...],
//!  "relations":[[vehicle_box_id,wheel_box_id],...]}
//! ```
//!
//! Numbers are written in shortest round-trip form, so reading back a written
//! file reproduces every coordinate bit for bit.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: scene '{image_id}': {message}")]
    Invalid {
        line: usize,
        image_id: String,
        message: String,
    },
    #[error("scene '{image_id}': {message}")]
    InvalidScene { image_id: String, message: String },
}

/// Object class of a detection. Serialized as 0 (vehicle) and 1 (wheel).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectClass {
    Vehicle,
    Wheel,
}

impl ObjectClass {
    pub fn id(self) -> u8 {
        match self {
            ObjectClass::Vehicle => 0,
            ObjectClass::Wheel => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(ObjectClass::Vehicle),
            1 => Some(ObjectClass::Wheel),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Camera {
    Front,
    Left,
    Right,
    Rear,
}

impl Camera {
    pub const ALL: [Camera; 4] = [Camera::Front, Camera::Left, Camera::Right, Camera::Rear];

    pub fn as_str(self) -> &'static str {
        match self {
            Camera::Front => "front",
            Camera::Left => "left",
            Camera::Right => "right",
            Camera::Rear => "rear",
        }
    }
}

impl fmt::Display for Camera {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One detection in pixel coordinates (origin top-left).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
    pub class: ObjectClass,
    pub box_id: u32,
}

impl DetBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, score: f64, class: ObjectClass, box_id: u32) -> Self {
        DetBox { x1, y1, x2, y2, score, class, box_id }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_vehicle(&self) -> bool {
        self.class == ObjectClass::Vehicle
    }

    pub fn is_wheel(&self) -> bool {
        self.class == ObjectClass::Wheel
    }

    /// True when `other` lies completely inside this box.
    pub fn contains(&self, other: &DetBox) -> bool {
        other.x1 >= self.x1 && other.x2 <= self.x2 && other.y1 >= self.y1 && other.y2 <= self.y2
    }

    /// Checks the per-box invariants, returning a description of the first violation.
    pub fn validate(&self) -> Result<(), String> {
        let coords = [self.x1, self.y1, self.x2, self.y2, self.score];
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(format!("box {}: non-finite value", self.box_id));
        }
        if self.x1 >= self.x2 {
            return Err(format!("box {}: x2 ({}) must exceed x1 ({})", self.box_id, self.x2, self.x1));
        }
        if self.y1 >= self.y2 {
            return Err(format!("box {}: y2 ({}) must exceed y1 ({})", self.box_id, self.y2, self.y1));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(format!("box {}: score {} outside [0,1]", self.box_id, self.score));
        }
        Ok(())
    }
}

/// All detections of one image with its ground-truth ownership relations.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: String,
    pub camera: Camera,
    pub width: f64,
    pub height: f64,
    pub boxes: Vec<DetBox>,
    /// `(vehicle_box_id, wheel_box_id)` pairs.
    pub relations: Vec<(u32, u32)>,
}

impl Scene {
    pub fn dims(&self) -> (f64, f64) {
        (self.width, self.height)
    }

    pub fn find(&self, box_id: u32) -> Option<&DetBox> {
        self.boxes.iter().find(|b| b.box_id == box_id)
    }

    pub fn index_of(&self, box_id: u32) -> Option<usize> {
        self.boxes.iter().position(|b| b.box_id == box_id)
    }

    pub fn vehicles(&self) -> impl Iterator<Item = &DetBox> {
        self.boxes.iter().filter(|b| b.is_vehicle())
    }

    pub fn wheels(&self) -> impl Iterator<Item = &DetBox> {
        self.boxes.iter().filter(|b| b.is_wheel())
    }

    /// Ground-truth owner of every labeled wheel.
    pub fn owner_map(&self) -> BTreeMap<u32, u32> {
        self.relations.iter().map(|&(v, w)| (w, v)).collect()
    }

    /// Wheels owned by each vehicle, in relation order.
    pub fn wheels_by_owner(&self) -> BTreeMap<u32, Vec<u32>> {
        let mut map: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for &(v, w) in &self.relations {
            map.entry(v).or_default().push(w);
        }
        map
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.width.is_finite() && self.width > 0.0 && self.height.is_finite() && self.height > 0.0) {
            return Err(format!("image dimensions {}x{} must be positive", self.width, self.height));
        }
        let mut classes: HashMap<u32, ObjectClass> = HashMap::with_capacity(self.boxes.len());
        for b in &self.boxes {
            b.validate()?;
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > self.width || b.y2 > self.height {
                return Err(format!(
                    "box {}: ({}, {}, {}, {}) outside image {}x{}",
                    b.box_id, b.x1, b.y1, b.x2, b.y2, self.width, self.height
                ));
            }
            if classes.insert(b.box_id, b.class).is_some() {
                return Err(format!("duplicate box_id {}", b.box_id));
            }
        }
        let mut owned: HashSet<u32> = HashSet::new();
        for &(v, w) in &self.relations {
            match classes.get(&v) {
                None => return Err(format!("relation ({v}, {w}): unknown vehicle box_id {v}")),
                Some(ObjectClass::Wheel) => {
                    return Err(format!("relation ({v}, {w}): box_id {v} is a wheel, expected a vehicle"))
                }
                Some(ObjectClass::Vehicle) => {}
            }
            match classes.get(&w) {
                None => return Err(format!("relation ({v}, {w}): unknown wheel box_id {w}")),
                Some(ObjectClass::Vehicle) => {
                    return Err(format!("relation ({v}, {w}): box_id {w} is a vehicle, expected a wheel"))
                }
                Some(ObjectClass::Wheel) => {}
            }
            if !owned.insert(w) {
                return Err(format!("wheel box_id {w} has more than one owner"));
            }
        }
        Ok(())
    }
}

/// Predicted ownership for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OwnershipPrediction {
    pub image_id: String,
    /// Decision threshold the retained pairs passed.
    pub threshold: f64,
    /// Retained `(vehicle_box_id, wheel_box_id, score)` triples.
    pub pairs: Vec<(u32, u32, f64)>,
    /// wheel_box_id -> vehicle_box_id, at most one owner per wheel.
    #[serde(with = "assignment_pairs")]
    pub assignments: BTreeMap<u32, u32>,
}

impl OwnershipPrediction {
    pub fn empty(image_id: &str, threshold: f64) -> Self {
        OwnershipPrediction {
            image_id: image_id.to_string(),
            threshold,
            pairs: Vec::new(),
            assignments: BTreeMap::new(),
        }
    }

    /// Ground truth expressed as a prediction (every labeled pair with score 1).
    pub fn from_labels(scene: &Scene) -> Self {
        OwnershipPrediction {
            image_id: scene.image_id.clone(),
            threshold: 0.5,
            pairs: scene.relations.iter().map(|&(v, w)| (v, w, 1.0)).collect(),
            assignments: scene.owner_map(),
        }
    }
}

// JSON object keys must be strings; assignments are written as [[wheel, vehicle], ...].
mod assignment_pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<u32, u32>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.iter().map(|(w, v)| [*w, *v]))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<u32, u32>, D::Error> {
        let pairs: Vec<[u32; 2]> = Vec::deserialize(d)?;
        let mut map = BTreeMap::new();
        for [w, v] in pairs {
            if map.insert(w, v).is_some() {
                return Err(serde::de::Error::custom(format!("wheel {w} assigned twice")));
            }
        }
        Ok(map)
    }
}

type BoxRecord = (f64, f64, f64, f64, f64, u8, u32);

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    image_id: String,
    camera: Camera,
    width: f64,
    height: f64,
    boxes: Vec<BoxRecord>,
    relations: Vec<(u32, u32)>,
}

impl From<&Scene> for SceneRecord {
    fn from(s: &Scene) -> Self {
        SceneRecord {
            image_id: s.image_id.clone(),
            camera: s.camera,
            width: s.width,
            height: s.height,
            boxes: s
                .boxes
                .iter()
                .map(|b| (b.x1, b.y1, b.x2, b.y2, b.score, b.class.id(), b.box_id))
                .collect(),
            relations: s.relations.clone(),
        }
    }
}

/// Parses one scene line. `line` is 1-based and only used for error locations.
pub fn parse_scene_line(text: &str, line: usize) -> Result<Scene, SceneError> {
    let record: SceneRecord = serde_json::from_str(text).map_err(|e| SceneError::Malformed {
        line,
        message: e.to_string(),
    })?;
    let mut boxes = Vec::with_capacity(record.boxes.len());
    for (idx, &(x1, y1, x2, y2, score, class_id, box_id)) in record.boxes.iter().enumerate() {
        let class = ObjectClass::from_id(class_id).ok_or_else(|| SceneError::Invalid {
            line,
            image_id: record.image_id.clone(),
            message: format!("box record {idx} (box_id {box_id}): class_id {class_id} is not 0 or 1"),
        })?;
        boxes.push(DetBox { x1, y1, x2, y2, score, class, box_id });
    }
    let scene = Scene {
        image_id: record.image_id,
        camera: record.camera,
        width: record.width,
        height: record.height,
        boxes,
        relations: record.relations,
    };
    scene.validate().map_err(|message| SceneError::Invalid {
        line,
        image_id: scene.image_id.clone(),
        message,
    })?;
    Ok(scene)
}

/// Parses the text of a scene file. Blank lines are ignored.
pub fn parse_scenes(text: &str) -> Result<Vec<Scene>, SceneError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_scene_line(l, i + 1))
        .collect()
}

pub fn read_scene_file(path: impl AsRef<Path>) -> Result<Vec<Scene>, SceneError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenes(&text)
}

/// Serializes one scene as a single JSON line (without the trailing newline).
pub fn scene_to_line(scene: &Scene) -> String {
    serde_json::to_string(&SceneRecord::from(scene)).expect("scene records always serialize")
}

pub fn scenes_to_string(scenes: &[Scene]) -> Result<String, SceneError> {
    let mut out = String::new();
    for s in scenes {
        s.validate().map_err(|message| SceneError::InvalidScene {
            image_id: s.image_id.clone(),
            message,
        })?;
        out.push_str(&scene_to_line(s));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_scene_file(scenes: &[Scene], path: impl AsRef<Path>) -> Result<(), SceneError> {
    let path = path.as_ref();
    let text = scenes_to_string(scenes)?;
    write_atomic(path, text.as_bytes()).map_err(|source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// One prediction per line.
pub fn predictions_to_string(predictions: &[OwnershipPrediction]) -> String {
    predictions
        .iter()
        .map(|p| serde_json::to_string(p).expect("prediction serializes") + "\n")
        .collect()
}

/// Parses a JSON-lines prediction file; blank lines are skipped.
pub fn parse_predictions(text: &str) -> Result<Vec<OwnershipPrediction>, SceneError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| SceneError::Malformed { line: i + 1, message: e.to_string() })
        })
        .collect()
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}
