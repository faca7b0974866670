//! Geometric pair statistics and the Gaussian-mixture edge priors.
//!
//! For an ordered pair (A, B) of boxes in a `W x H` image, the normalized
//! center distance is
//!
//! ```text
//! d^2   = (A_x/W - B_x/W)^2 + (A_y/H - B_y/H)^2
//! ratio = 2 d / (w_B/W + h_B/H)
//! ```
//!
//! and the priors are 1-D Gaussian mixtures over `ln(ratio)`: one for
//! vehicle -> wheel pairs, one for rear wheel -> front wheel pairs.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{DetBox, Scene};

pub const SIGMA_FLOOR: f64 = 1e-3;
pub const EM_TOLERANCE: f64 = 1e-7;
pub const EM_MAX_ITERATIONS: usize = 500;
pub const DEFAULT_COMPONENTS: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum PriorError {
    #[error("need at least {needed} samples to fit {k} components, got {got}")]
    TooFewSamples { needed: usize, got: usize, k: usize },
    #[error("component count must be at least 1")]
    NoComponents,
    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("prior JSON: {0}")]
    Json(String),
}

/// Which of the two priors a pair is scored with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairKind {
    WheelVehicle,
    WheelWheel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairGeometry {
    pub d: f64,
    pub ratio: f64,
    /// `None` when the centers coincide (`d == 0`).
    pub log_ratio: Option<f64>,
    pub a_pos: (f64, f64),
    pub b_pos: (f64, f64),
    pub b_dims: (f64, f64),
}

/// Pair statistics for A (vehicle or rear wheel) and B (wheel or front wheel).
pub fn pair_geometry(a: &DetBox, b: &DetBox, dims: (f64, f64)) -> PairGeometry {
    let (w, h) = dims;
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let a_pos = (ax / w, ay / h);
    let b_pos = (bx / w, by / h);
    let b_dims = (b.width() / w, b.height() / h);
    let dx = a_pos.0 - b_pos.0;
    let dy = a_pos.1 - b_pos.1;
    let d = (dx * dx + dy * dy).sqrt();
    let ratio = 2.0 * d / (b_dims.0 + b_dims.1);
    let log_ratio = if d > 0.0 { Some(ratio.ln()) } else { None };
    PairGeometry { d, ratio, log_ratio, a_pos, b_pos, b_dims }
}

/// Orders two wheels of one vehicle as (rear, front): rear has the larger center x.
pub fn rear_front<'a>(p: &'a DetBox, q: &'a DetBox) -> (&'a DetBox, &'a DetBox) {
    let (px, qx) = (p.center().0, q.center().0);
    if px > qx || (px == qx && p.box_id < q.box_id) {
        (p, q)
    } else {
        (q, p)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSamples {
    pub wv: Vec<f64>,
    pub ww: Vec<f64>,
    /// Pairs dropped because their centers coincide.
    pub skipped: usize,
}

/// Log distance ratios of every labeled vehicle->wheel pair and of every
/// rear->front wheel pair on vehicles that own exactly two wheels.
pub fn collect_pair_samples(scenes: &[Scene]) -> PairSamples {
    let mut out = PairSamples::default();
    for scene in scenes {
        let dims = scene.dims();
        for &(v, w) in &scene.relations {
            let (Some(vb), Some(wb)) = (scene.find(v), scene.find(w)) else { continue };
            match pair_geometry(vb, wb, dims).log_ratio {
                Some(x) => out.wv.push(x),
                None => out.skipped += 1,
            }
        }
        for wheels in scene.wheels_by_owner().values() {
            if let [p, q] = wheels.as_slice() {
                let (Some(pb), Some(qb)) = (scene.find(*p), scene.find(*q)) else { continue };
                let (rear, front) = rear_front(pb, qb);
                match pair_geometry(rear, front, dims).log_ratio {
                    Some(x) => out.ww.push(x),
                    None => out.skipped += 1,
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

impl Component {
    fn density(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.std;
        self.weight * (-0.5 * z * z).exp() / (self.std * (2.0 * PI).sqrt())
    }

    fn log_density(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.std;
        self.weight.ln() - 0.5 * z * z - self.std.ln() - 0.5 * (2.0 * PI).ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub kind: PairKind,
    /// Sorted by mean.
    pub components: Vec<Component>,
}

impl GaussianMixture {
    pub fn new(kind: PairKind, mut components: Vec<Component>) -> Result<Self, PriorError> {
        if components.is_empty() {
            return Err(PriorError::NoComponents);
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(PriorError::InvalidMixture(format!("weights sum to {total}")));
        }
        for c in &components {
            if !(c.weight > 0.0 && c.mean.is_finite() && c.std.is_finite() && c.std >= SIGMA_FLOOR) {
                return Err(PriorError::InvalidMixture(format!("bad component {c:?}")));
            }
        }
        components.sort_by(|a, b| a.mean.total_cmp(&b.mean));
        Ok(GaussianMixture { kind, components })
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.components.iter().map(|c| c.density(x)).sum()
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        log_sum_exp(self.components.iter().map(|c| c.log_density(x)))
    }

    pub fn mean_log_likelihood(&self, samples: &[f64]) -> f64 {
        samples.iter().map(|&x| self.log_pdf(x)).sum::<f64>() / samples.len() as f64
    }

    /// Location and value of the global density maximum.
    ///
    /// Every mode of a Gaussian mixture lies inside the hull of its means, so
    /// fixed-point (mean-shift) ascent started from each component mean and from
    /// a grid over that hull finds the supremum.
    pub fn mode(&self) -> (f64, f64) {
        let lo = self.components.iter().map(|c| c.mean).fold(f64::INFINITY, f64::min);
        let hi = self.components.iter().map(|c| c.mean).fold(f64::NEG_INFINITY, f64::max);
        let mut starts: Vec<f64> = self.components.iter().map(|c| c.mean).collect();
        if hi > lo {
            starts.extend((0..=64).map(|i| lo + (hi - lo) * i as f64 / 64.0));
        }
        let mut best = (lo, self.pdf(lo));
        for x0 in starts {
            let x = self.mean_shift(x0);
            let p = self.pdf(x);
            if p > best.1 {
                best = (x, p);
            }
        }
        best
    }

    fn mean_shift(&self, mut x: f64) -> f64 {
        for _ in 0..1000 {
            let mut num = 0.0;
            let mut den = 0.0;
            for c in &self.components {
                let r = c.density(x) / (c.std * c.std);
                num += r * c.mean;
                den += r;
            }
            if den <= 0.0 || !den.is_finite() {
                return x;
            }
            let next = num / den;
            if (next - x).abs() < 1e-14 * (1.0 + x.abs()) {
                return next;
            }
            x = next;
        }
        x
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// Mean log-likelihood after initialization and after every EM step.
    pub log_likelihood: Vec<f64>,
    /// Number of M-steps in which some component's sigma was raised to the floor.
    pub clamped_sigmas: usize,
}

/// Fits a `k`-component 1-D Gaussian mixture by expectation maximization.
///
/// Initialization is deterministic: means of `k` equal-count quantile slices
/// of the sorted samples, the global standard deviation for every component
/// and uniform weights. `seed` only breaks the symmetry of components that
/// start on identical means (constant samples). EM stops once the mean
/// log-likelihood improves by less than [`EM_TOLERANCE`] or after
/// [`EM_MAX_ITERATIONS`] steps.
pub fn fit_gmm(
    samples: &[f64],
    k: usize,
    kind: PairKind,
    seed: u64,
) -> Result<(GaussianMixture, FitDiagnostics), PriorError> {
    if k == 0 {
        return Err(PriorError::NoComponents);
    }
    if samples.len() < 10 * k {
        return Err(PriorError::TooFewSamples { needed: 10 * k, got: samples.len(), k });
    }
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(PriorError::NonFiniteSample(i));
    }
    let n = samples.len();
    let nf = n as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);

    let global_mean = samples.iter().sum::<f64>() / nf;
    let global_std = (samples.iter().map(|x| (x - global_mean).powi(2)).sum::<f64>() / nf).sqrt();
    let mut clamped_sigmas = 0;
    let init_std = if global_std < SIGMA_FLOOR {
        clamped_sigmas += 1;
        SIGMA_FLOOR
    } else {
        global_std
    };
    let mut comps: Vec<Component> = (0..k)
        .map(|j| {
            let slice = &sorted[j * n / k..(j + 1) * n / k];
            Component {
                weight: 1.0 / k as f64,
                mean: slice.iter().sum::<f64>() / slice.len() as f64,
                std: init_std,
            }
        })
        .collect();
    // Identical starting means never separate under EM.
    let mut jitter = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for j in 1..k {
        if comps[..j].iter().any(|c| c.mean == comps[j].mean) {
            comps[j].mean += init_std * 1e-3 * (1.0 + jitter.random::<f64>());
        }
    }

    let mut resp = vec![0.0; n * k];
    let mut log_likelihood = vec![mean_ll(&comps, samples)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < EM_MAX_ITERATIONS {
        iterations += 1;
        // E step
        for (i, &x) in samples.iter().enumerate() {
            let row = &mut resp[i * k..(i + 1) * k];
            for (r, c) in row.iter_mut().zip(&comps) {
                *r = c.log_density(x);
            }
            let lse = log_sum_exp(row.iter().copied());
            for r in row.iter_mut() {
                *r = (*r - lse).exp();
            }
        }
        // M step
        let mut clamped = false;
        for (j, c) in comps.iter_mut().enumerate() {
            let nk: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            if nk <= f64::MIN_POSITIVE {
                // Component lost all support; keep it alive with negligible mass.
                c.weight = f64::MIN_POSITIVE;
                continue;
            }
            let mean = (0..n).map(|i| resp[i * k + j] * samples[i]).sum::<f64>() / nk;
            let var = (0..n).map(|i| resp[i * k + j] * (samples[i] - mean).powi(2)).sum::<f64>() / nk;
            c.weight = nk / nf;
            c.mean = mean;
            c.std = var.sqrt();
            if !(c.std >= SIGMA_FLOOR) {
                c.std = SIGMA_FLOOR;
                clamped = true;
            }
        }
        if clamped {
            clamped_sigmas += 1;
        }
        let total: f64 = comps.iter().map(|c| c.weight).sum();
        for c in comps.iter_mut() {
            c.weight /= total;
        }
        let ll = mean_ll(&comps, samples);
        let prev = *log_likelihood.last().unwrap();
        log_likelihood.push(ll);
        if ll - prev < EM_TOLERANCE {
            converged = true;
            break;
        }
    }

    let mixture = GaussianMixture::new(kind, comps)?;
    Ok((
        mixture,
        FitDiagnostics { iterations, converged, log_likelihood, clamped_sigmas },
    ))
}

fn mean_ll(comps: &[Component], samples: &[f64]) -> f64 {
    samples
        .iter()
        .map(|&x| log_sum_exp(comps.iter().map(|c| c.log_density(x))))
        .sum::<f64>()
        / samples.len() as f64
}

/// The two fitted priors with their cached density maxima.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorModel {
    pub wv: GaussianMixture,
    pub ww: GaussianMixture,
    pub pdf_max_wv: f64,
    pub pdf_max_ww: f64,
}

impl PriorModel {
    pub fn new(wv: GaussianMixture, ww: GaussianMixture) -> Self {
        let pdf_max_wv = wv.mode().1;
        let pdf_max_ww = ww.mode().1;
        PriorModel { wv, ww, pdf_max_wv, pdf_max_ww }
    }

    pub fn mixture(&self, kind: PairKind) -> &GaussianMixture {
        match kind {
            PairKind::WheelVehicle => &self.wv,
            PairKind::WheelWheel => &self.ww,
        }
    }

    pub fn pdf_max(&self, kind: PairKind) -> f64 {
        match kind {
            PairKind::WheelVehicle => self.pdf_max_wv,
            PairKind::WheelWheel => self.pdf_max_ww,
        }
    }

    /// Density at `log_ratio` divided by the density's maximum, clamped to `[0, 1]`.
    /// Coincident centers (`None`) score 1.
    pub fn probability(&self, kind: PairKind, log_ratio: Option<f64>) -> f64 {
        match log_ratio {
            None => 1.0,
            Some(x) => (self.mixture(kind).pdf(x) / self.pdf_max(kind)).clamp(0.0, 1.0),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&PriorFile::from(self)).expect("prior serializes")
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(PriorFile::from(self)).expect("prior serializes")
    }

    /// Parses `{"wv":{"components":[[pi,mu,sigma],...]},"ww":{...}}`; other keys are ignored.
    pub fn from_json(text: &str) -> Result<Self, PriorError> {
        let file: PriorFile = serde_json::from_str(text).map_err(|e| PriorError::Json(e.to_string()))?;
        let build = |kind, spec: MixtureFile| {
            GaussianMixture::new(
                kind,
                spec.components
                    .into_iter()
                    .map(|[weight, mean, std]| Component { weight, mean, std })
                    .collect(),
            )
        };
        Ok(PriorModel::new(build(PairKind::WheelVehicle, file.wv)?, build(PairKind::WheelWheel, file.ww)?))
    }
}

pub fn prior_probability(model: &PriorModel, kind: PairKind, log_ratio: Option<f64>) -> f64 {
    model.probability(kind, log_ratio)
}

#[derive(Serialize, Deserialize)]
struct MixtureFile {
    components: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct PriorFile {
    wv: MixtureFile,
    ww: MixtureFile,
}

impl From<&PriorModel> for PriorFile {
    fn from(m: &PriorModel) -> Self {
        let f = |g: &GaussianMixture| MixtureFile {
            components: g.components.iter().map(|c| [c.weight, c.mean, c.std]).collect(),
        };
        PriorFile { wv: f(&m.wv), ww: f(&m.ww) }
    }
}

#[derive(Debug, Clone)]
pub struct PriorFit {
    pub model: PriorModel,
    pub samples: PairSamples,
    pub wv_diagnostics: FitDiagnostics,
    pub ww_diagnostics: FitDiagnostics,
}

/// Collects pair samples from labeled scenes and fits both mixtures.
pub fn fit_prior(scenes: &[Scene], k: usize, seed: u64) -> Result<PriorFit, PriorError> {
    let samples = collect_pair_samples(scenes);
    let (wv, wv_diagnostics) = fit_gmm(&samples.wv, k, PairKind::WheelVehicle, seed)?;
    let (ww, ww_diagnostics) = fit_gmm(&samples.ww, k, PairKind::WheelWheel, seed.wrapping_add(1))?;
    Ok(PriorFit {
        model: PriorModel::new(wv, ww),
        samples,
        wv_diagnostics,
        ww_diagnostics,
    })
}
