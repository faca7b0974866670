//! Python bindings for the `deepword` crate.
//!
//! Boxes cross the boundary as `(x1, y1, x2, y2, score, class, box_id)` tuples
//! with `class` in `{"vehicle", "wheel"}`. Predictions and reports are plain
//! dicts with the same layout as the JSON files written by the CLI.

use deepword::baseline;
use deepword::eval::score_split;
use deepword::graph::{build_graph, GraphConfig, DEFAULT_MASK_TAU};
use deepword::prior::{self, PairKind};
use deepword::relnet::{ModelCheckpoint, RelNet as CoreNet};
use deepword::scene::{
    self, parse_predictions, predictions_to_string, DetBox, ObjectClass, OwnershipPrediction, Scene as CoreScene,
};
use deepword::synthgen::{self, Difficulty, GenConfig};
use deepword::training::{self, TrainConfig};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

type BoxTuple = (f64, f64, f64, f64, f64, String, u32);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py_json<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py_json(obj: &Bound<'_, PyAny>) -> PyResult<String> {
    obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()
}

fn class_name(c: ObjectClass) -> String {
    match c {
        ObjectClass::Vehicle => "vehicle".into(),
        ObjectClass::Wheel => "wheel".into(),
    }
}

fn parse_class(s: &str) -> PyResult<ObjectClass> {
    match s {
        "vehicle" | "0" => Ok(ObjectClass::Vehicle),
        "wheel" | "1" => Ok(ObjectClass::Wheel),
        _ => Err(PyValueError::new_err(format!("unknown class '{s}'"))),
    }
}

fn to_box(t: &BoxTuple) -> PyResult<DetBox> {
    Ok(DetBox::new(t.0, t.1, t.2, t.3, t.4, parse_class(&t.5)?, t.6))
}

fn from_box(b: &DetBox) -> BoxTuple {
    (b.x1, b.y1, b.x2, b.y2, b.score, class_name(b.class), b.box_id)
}

fn parse_kind(s: &str) -> PyResult<PairKind> {
    match s {
        "wv" | "wheel_vehicle" => Ok(PairKind::WheelVehicle),
        "ww" | "wheel_wheel" => Ok(PairKind::WheelWheel),
        _ => Err(PyValueError::new_err(format!("unknown pair kind '{s}', expected 'wv' or 'ww'"))),
    }
}

fn prediction_to_py<'py>(py: Python<'py>, p: &OwnershipPrediction) -> PyResult<Bound<'py, PyAny>> {
    to_py_json(py, predictions_to_string(std::slice::from_ref(p)).trim_end())
}

fn prediction_from_py(obj: &Bound<'_, PyAny>) -> PyResult<OwnershipPrediction> {
    let mut v = parse_predictions(&from_py_json(obj)?).map_err(value_err)?;
    v.pop().ok_or_else(|| PyValueError::new_err("empty prediction"))
}

fn mask(mask_tau: Option<f64>) -> GraphConfig {
    GraphConfig { mask_tau, ..GraphConfig::default() }
}

/// One image: detections plus ground-truth `(vehicle_id, wheel_id)` relations.
#[pyclass(module = "deepword_py", from_py_object)]
#[derive(Clone)]
pub struct Scene {
    inner: CoreScene,
}

#[pymethods]
impl Scene {
    #[new]
    #[pyo3(signature = (image_id, width, height, boxes, relations = Vec::new(), camera = "front"))]
    fn new(
        image_id: String,
        width: f64,
        height: f64,
        boxes: Vec<BoxTuple>,
        relations: Vec<(u32, u32)>,
        camera: &str,
    ) -> PyResult<Self> {
        let boxes = boxes.iter().map(to_box).collect::<PyResult<Vec<_>>>()?;
        let line = serde_json::json!({
            "image_id": image_id,
            "camera": camera,
            "width": width,
            "height": height,
            "boxes": boxes.iter().map(|b| [b.x1, b.y1, b.x2, b.y2, b.score, b.class.id() as f64, b.box_id as f64]).collect::<Vec<_>>(),
            "relations": relations,
        });
        Self::from_json(&line.to_string())
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Scene { inner: scene::parse_scene_line(text, 1).map_err(value_err)? })
    }

    fn to_json(&self) -> String {
        scene::scene_to_line(&self.inner)
    }

    #[getter]
    fn image_id(&self) -> String {
        self.inner.image_id.clone()
    }

    #[getter]
    fn width(&self) -> f64 {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> f64 {
        self.inner.height
    }

    #[getter]
    fn camera(&self) -> &'static str {
        self.inner.camera.as_str()
    }

    #[getter]
    fn boxes(&self) -> Vec<BoxTuple> {
        self.inner.boxes.iter().map(from_box).collect()
    }

    #[getter]
    fn relations(&self) -> Vec<(u32, u32)> {
        self.inner.relations.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.boxes.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene('{}', {} boxes, {} relations)",
            self.inner.image_id,
            self.inner.boxes.len(),
            self.inner.relations.len()
        )
    }

    fn __eq__(&self, other: &Scene) -> bool {
        self.inner == other.inner
    }
}

/// Gaussian-mixture priors over log distance ratios.
#[pyclass(module = "deepword_py", from_py_object)]
#[derive(Clone)]
pub struct PriorModel {
    inner: prior::PriorModel,
}

#[pymethods]
impl PriorModel {
    #[staticmethod]
    #[pyo3(signature = (scenes, components = prior::DEFAULT_COMPONENTS, seed = 0))]
    fn fit(scenes: Vec<Scene>, components: usize, seed: u64) -> PyResult<Self> {
        let scenes: Vec<CoreScene> = scenes.into_iter().map(|s| s.inner).collect();
        let fit = prior::fit_prior(&scenes, components, seed).map_err(value_err)?;
        Ok(PriorModel { inner: fit.model })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PriorModel { inner: prior::PriorModel::from_json(text).map_err(value_err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Normalized prior in [0, 1]; `kind` is `"wv"` or `"ww"`.
    #[pyo3(signature = (kind, log_ratio))]
    fn probability(&self, kind: &str, log_ratio: Option<f64>) -> PyResult<f64> {
        Ok(self.inner.probability(parse_kind(kind)?, log_ratio))
    }

    /// Means, standard deviations and weights of one mixture.
    fn components(&self, kind: &str) -> PyResult<Vec<(f64, f64, f64)>> {
        let g = self.inner.mixture(parse_kind(kind)?);
        Ok(g.components.iter().map(|c| (c.mean, c.std, c.weight)).collect())
    }
}

/// Trained relationship network together with the prior it was trained on.
#[pyclass(module = "deepword_py")]
pub struct RelNet {
    net: CoreNet,
    prior: prior::PriorModel,
    history: Vec<(usize, f64, Option<f64>)>,
}

#[pymethods]
impl RelNet {
    /// Trains on labeled scenes. `config` is a dict of training options, for
    /// example `{"epochs": 20, "model": {"features": 32}}`.
    #[staticmethod]
    #[pyo3(signature = (scenes, prior, config = None))]
    fn train(py: Python<'_>, scenes: Vec<Scene>, prior: &PriorModel, config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let cfg: TrainConfig = match config {
            Some(c) => serde_json::from_str(&from_py_json(c)?).map_err(value_err)?,
            None => TrainConfig::default(),
        };
        let scenes: Vec<CoreScene> = scenes.into_iter().map(|s| s.inner).collect();
        let p = prior.inner.clone();
        let outcome = py.detach(|| training::train(&scenes, &p, &cfg)).map_err(value_err)?;
        Ok(RelNet {
            net: outcome.model,
            prior: p,
            history: outcome.history.iter().map(|r| (r.epoch, r.loss, r.val_acc)).collect(),
        })
    }

    /// Loads a model file written by `deepword train`.
    #[staticmethod]
    #[pyo3(signature = (path, prior = None))]
    fn load(path: &str, prior: Option<&PriorModel>) -> PyResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(value_err)?;
        let ck: ModelCheckpoint = serde_json::from_value(v.clone()).map_err(value_err)?;
        let prior = match (prior, v.get("prior")) {
            (Some(p), _) => p.inner.clone(),
            (None, Some(p)) => prior::PriorModel::from_json(&p.to_string()).map_err(value_err)?,
            (None, None) => return Err(PyValueError::new_err(format!("{path} carries no prior"))),
        };
        Ok(RelNet { net: CoreNet::from_checkpoint(ck).map_err(value_err)?, prior, history: Vec::new() })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let mut v = serde_json::to_value(self.net.checkpoint()).map_err(value_err)?;
        v["prior"] = self.prior.to_json_value();
        scene::write_atomic(path.as_ref(), (v.to_string() + "\n").as_bytes())
            .map_err(|e| PyIOError::new_err(format!("{path}: {e}")))
    }

    #[pyo3(signature = (scene, mask_tau = Some(DEFAULT_MASK_TAU)))]
    fn predict<'py>(&self, py: Python<'py>, scene: &Scene, mask_tau: Option<f64>) -> PyResult<Bound<'py, PyAny>> {
        let graph = build_graph(&scene.inner, &self.prior, &mask(mask_tau));
        let p = self.net.predict(&scene.inner, &graph).map_err(value_err)?;
        prediction_to_py(py, &p)
    }

    /// `(epoch, loss, val_acc)` per training epoch.
    #[getter]
    fn history(&self) -> Vec<(usize, f64, Option<f64>)> {
        self.history.clone()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.net.parameter_count()
    }

    #[getter]
    fn prior(&self) -> PriorModel {
        PriorModel { inner: self.prior.clone() }
    }
}

#[pyfunction]
#[pyo3(signature = (n_scenes, difficulty = "mixed", seed = 0, overlap_rate = 0.5))]
fn generate(n_scenes: usize, difficulty: &str, seed: u64, overlap_rate: f64) -> PyResult<Vec<Scene>> {
    let difficulty: Difficulty = difficulty.parse().map_err(value_err)?;
    let cfg = GenConfig { seed, n_scenes, difficulty, overlap_rate, ..GenConfig::default() };
    Ok(synthgen::generate(&cfg).map_err(value_err)?.into_iter().map(|inner| Scene { inner }).collect())
}

#[pyfunction]
fn read_scenes(path: &str) -> PyResult<Vec<Scene>> {
    let scenes = scene::read_scene_file(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
    Ok(scenes.into_iter().map(|inner| Scene { inner }).collect())
}

#[pyfunction]
fn write_scenes(scenes: Vec<Scene>, path: &str) -> PyResult<()> {
    let scenes: Vec<CoreScene> = scenes.into_iter().map(|s| s.inner).collect();
    scene::write_scene_file(&scenes, path).map_err(|e| PyIOError::new_err(e.to_string()))
}

/// Geometry of the pair `(a, b)`: a dict with `d`, `ratio` and `log_ratio`.
#[pyfunction]
fn pair_geometry<'py>(py: Python<'py>, a: BoxTuple, b: BoxTuple, width: f64, height: f64) -> PyResult<Bound<'py, PyAny>> {
    let g = prior::pair_geometry(&to_box(&a)?, &to_box(&b)?, (width, height));
    let v = serde_json::json!({ "d": g.d, "ratio": g.ratio, "log_ratio": g.log_ratio });
    to_py_json(py, &v.to_string())
}

#[pyfunction]
fn iou(a: BoxTuple, b: BoxTuple) -> PyResult<f64> {
    Ok(baseline::iou(&to_box(&a)?, &to_box(&b)?))
}

/// Rule-based assignment: each wheel goes to the vehicle it overlaps most.
#[pyfunction]
#[pyo3(signature = (scene, mask_tau = Some(DEFAULT_MASK_TAU)))]
fn logic_assign<'py>(py: Python<'py>, scene: &Scene, mask_tau: Option<f64>) -> PyResult<Bound<'py, PyAny>> {
    prediction_to_py(py, &baseline::logic_assign(&scene.inner, mask_tau))
}

/// Scores prediction dicts against labeled scenes, matched by image id.
#[pyfunction]
fn score<'py>(py: Python<'py>, scenes: Vec<Scene>, predictions: Vec<Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    let scenes: Vec<CoreScene> = scenes.into_iter().map(|s| s.inner).collect();
    let preds = predictions.iter().map(prediction_from_py).collect::<PyResult<Vec<_>>>()?;
    let report = score_split(&scenes, &preds).map_err(value_err)?;
    to_py_json(py, &serde_json::to_string(&report).map_err(value_err)?)
}

#[pymodule]
fn deepword_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scene>()?;
    m.add_class::<PriorModel>()?;
    m.add_class::<RelNet>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(read_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(write_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(pair_geometry, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(logic_assign, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    Ok(())
}
