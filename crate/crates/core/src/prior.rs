//! Adjacency priors for unlabeled data.
//!
//! Either the ground truth is passed through unchanged (perfect prior), or
//! pseudo-labels are produced by normalized cross-correlation template
//! matching: square templates are extracted around lesion pixels of one
//! labeled source image, matched against target images, the per-template
//! responses are combined by a geometric mean, and a threshold maximizing
//! the Dice coefficient on the source image itself turns responses into
//! binary maps. Target ground truth is never read — targets enter as
//! images only.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::t4f;
use crate::tensor::Tensor4;

/// A single-channel 2D map.
#[derive(Debug, Clone, PartialEq)]
pub struct Map2 {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Map2 {
    pub fn zeros(h: usize, w: usize) -> Map2 {
        Map2 {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f32>) -> Result<Map2> {
        if data.len() != h * w {
            return Err(Error::shape("Map2::from_vec", format!("{} values", h * w), format!("{}", data.len())));
        }
        Ok(Map2 { h, w, data })
    }

    /// One channel of one batch item of a rank-4 tensor.
    pub fn from_tensor(t: &Tensor4, chan: usize, item: usize) -> Map2 {
        Map2 {
            h: t.h(),
            w: t.w(),
            data: t.plane(item, chan).to_vec(),
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.w + c] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Stack maps of equal shape along the batch axis of a tensor.
    pub fn stack(maps: &[Map2]) -> Result<Tensor4> {
        let first = maps
            .first()
            .ok_or_else(|| Error::InvalidArgument("Map2::stack of zero maps".into()))?;
        let mut data = Vec::with_capacity(first.data.len() * maps.len());
        for m in maps {
            if (m.h, m.w) != (first.h, first.w) {
                return Err(Error::shape("Map2::stack", format!("{}x{}", first.h, first.w), format!("{}x{}", m.h, m.w)));
            }
            data.extend_from_slice(&m.data);
        }
        Tensor4::from_vec(first.h, first.w, 1, maps.len(), data)
    }
}

/// Square patches extracted around lesion pixels of a labeled source image.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub k: usize,
    pub templates: Vec<Map2>,
}

/// Aggregated matching response for one target image plus the binary map
/// obtained by thresholding it: `labels = [response >= threshold]`.
#[derive(Debug, Clone)]
pub struct NoisyPrior {
    pub response: Map2,
    pub threshold: f32,
    pub labels: Map2,
}

/// Output of the full pseudo-label pipeline for one source image and a set
/// of target images.
#[derive(Debug, Clone)]
pub struct NoisyPriorSet {
    pub templates: TemplateSet,
    pub threshold: f32,
    /// Dice achieved on the source image at the selected threshold.
    pub source_dice: f32,
    pub priors: Vec<NoisyPrior>,
}

/// The perfect prior is the ground truth itself.
pub fn perfect_prior(labels: &Tensor4) -> Tensor4 {
    labels.clone()
}

/// Draws `count` k x k patches centered on lesion pixels whose window lies
/// fully in bounds. Centers are drawn uniformly, without replacement while
/// the candidate pool allows it, with replacement otherwise.
pub fn extract_templates<R: Rng>(
    image: &Map2,
    labels: &Map2,
    k: usize,
    count: usize,
    rng: &mut R,
) -> Result<TemplateSet> {
    if k % 2 == 0 || k == 0 {
        return Err(Error::InvalidArgument(format!("template side k must be odd, got {k}")));
    }
    if k > image.h || k > image.w {
        return Err(Error::InvalidArgument(format!(
            "template side {k} exceeds image {}x{}",
            image.h, image.w
        )));
    }
    if (labels.h, labels.w) != (image.h, image.w) {
        return Err(Error::shape("extract_templates labels", format!("{}x{}", image.h, image.w), format!("{}x{}", labels.h, labels.w)));
    }
    if count == 0 {
        return Err(Error::InvalidArgument("template count must be >= 1".into()));
    }
    let half = k / 2;
    let mut centers = Vec::new();
    for r in half..image.h - half {
        for c in half..image.w - half {
            if labels.get(r, c) == 1.0 {
                centers.push((r, c));
            }
        }
    }
    if centers.is_empty() {
        return Err(Error::InvalidArgument(
            "no lesion pixel has a fully in-bounds template window".into(),
        ));
    }
    let chosen: Vec<(usize, usize)> = if centers.len() >= count {
        index_sample(rng, centers.len(), count).iter().map(|i| centers[i]).collect()
    } else {
        (0..count).map(|_| centers[rng.random_range(0..centers.len())]).collect()
    };
    let templates = chosen
        .into_iter()
        .map(|(r, c)| {
            let mut patch = Map2::zeros(k, k);
            for dr in 0..k {
                for dc in 0..k {
                    patch.set(dr, dc, image.get(r - half + dr, c - half + dc));
                }
            }
            patch
        })
        .collect();
    Ok(TemplateSet { k, templates })
}

/// Zero-mean normalized cross-correlation of a square template against
/// every fully in-bounds window. Border centers are 0; zero-variance
/// windows or templates yield 0. Responses lie in [-1, 1].
pub fn ncc_match(image: &Map2, template: &Map2) -> Result<Map2> {
    let k = template.h;
    if template.w != k || k % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "template must be square with odd side, got {}x{}",
            template.h, template.w
        )));
    }
    if k > image.h.min(image.w) {
        return Err(Error::InvalidArgument(format!(
            "template side {k} exceeds image {}x{}",
            image.h, image.w
        )));
    }
    let half = k / 2;
    let area = (k * k) as f64;
    let t_mean: f64 = template.data.iter().map(|&v| v as f64).sum::<f64>() / area;
    let t_centered: Vec<f64> = template.data.iter().map(|&v| v as f64 - t_mean).collect();
    let t_ss: f64 = t_centered.iter().map(|v| v * v).sum();

    let mut out = Map2::zeros(image.h, image.w);
    if t_ss == 0.0 {
        return Ok(out);
    }
    for r in half..image.h - half {
        for c in half..image.w - half {
            let mut w_sum = 0.0f64;
            for dr in 0..k {
                let row = r - half + dr;
                for dc in 0..k {
                    w_sum += image.get(row, c - half + dc) as f64;
                }
            }
            let w_mean = w_sum / area;
            let mut dot = 0.0f64;
            let mut w_ss = 0.0f64;
            for dr in 0..k {
                let row = r - half + dr;
                for dc in 0..k {
                    let wv = image.get(row, c - half + dc) as f64 - w_mean;
                    dot += wv * t_centered[dr * k + dc];
                    w_ss += wv * wv;
                }
            }
            let v = if w_ss == 0.0 { 0.0 } else { dot / (w_ss * t_ss).sqrt() };
            out.set(r, c, v.clamp(-1.0, 1.0) as f32);
        }
    }
    Ok(out)
}

/// Combines per-template responses into one map: each response is rescaled
/// from [-1, 1] to [0, 1] and the geometric mean is taken per pixel (the
/// rescale keeps the geometric mean defined for anticorrelated responses).
/// Output values lie in [0, 1]; a fully anticorrelated response (r = -1)
/// zeroes the pixel.
pub fn aggregate_responses(responses: &[Map2]) -> Result<Map2> {
    let first = responses
        .first()
        .ok_or_else(|| Error::InvalidArgument("aggregate_responses of zero maps".into()))?;
    for m in responses {
        if (m.h, m.w) != (first.h, first.w) {
            return Err(Error::shape("aggregate_responses", format!("{}x{}", first.h, first.w), format!("{}x{}", m.h, m.w)));
        }
    }
    let inv_n = 1.0 / responses.len() as f64;
    let mut out = Map2::zeros(first.h, first.w);
    for i in 0..out.data.len() {
        let mut log_sum = 0.0f64;
        let mut zero = false;
        for m in responses {
            let rescaled = ((m.data[i] as f64).clamp(-1.0, 1.0) + 1.0) / 2.0;
            if rescaled <= 0.0 {
                zero = true;
                break;
            }
            log_sum += rescaled.ln();
        }
        out.data[i] = if zero { 0.0 } else { (log_sum * inv_n).exp() as f32 };
    }
    Ok(out)
}

const THRESHOLD_GRID: usize = 256;

/// Grid value i of the fixed 256-point threshold grid over [0, 1].
fn grid_value(i: usize) -> f32 {
    i as f32 / (THRESHOLD_GRID - 1) as f32
}

fn dice_at(aggregate: &Map2, gt: &Map2, t: f32) -> f64 {
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fneg = 0u64;
    for (&a, &g) in aggregate.data.iter().zip(&gt.data) {
        let pred = a >= t;
        let pos = g == 1.0;
        match (pred, pos) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if 2 * tp + fp + fneg == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

/// Picks the threshold from 256 evenly spaced values over [0, 1] that
/// maximizes the Dice coefficient of `[aggregate >= t]` against the ground
/// truth; ties go to the larger threshold (fewer false positives).
pub fn select_threshold(aggregate: &Map2, ground_truth: &Map2) -> Result<f32> {
    if (aggregate.h, aggregate.w) != (ground_truth.h, ground_truth.w) {
        return Err(Error::shape(
            "select_threshold",
            format!("{}x{}", aggregate.h, aggregate.w),
            format!("{}x{}", ground_truth.h, ground_truth.w),
        ));
    }
    if !ground_truth.data.iter().any(|&v| v == 1.0) {
        return Err(Error::InvalidArgument("ground truth has no positive pixel".into()));
    }
    let mut best_t = grid_value(0);
    let mut best_dice = f64::NEG_INFINITY;
    for i in 0..THRESHOLD_GRID {
        let t = grid_value(i);
        let d = dice_at(aggregate, ground_truth, t);
        if d >= best_dice {
            best_dice = d;
            best_t = t;
        }
    }
    Ok(best_t)
}

/// Full pseudo-label pipeline: templates from the labeled source image,
/// threshold selected by matching the source against itself, then the same
/// aggregate + threshold applied to every target image.
pub fn generate_noisy_prior<R: Rng>(
    source_image: &Map2,
    source_labels: &Map2,
    targets: &[Map2],
    k: usize,
    count: usize,
    rng: &mut R,
) -> Result<NoisyPriorSet> {
    let templates = extract_templates(source_image, source_labels, k, count, rng)?;
    let source_agg = aggregate_for(source_image, &templates)?;
    let threshold = select_threshold(&source_agg, source_labels)?;
    let source_dice = dice_at(&source_agg, source_labels, threshold) as f32;
    let priors = targets
        .iter()
        .map(|target| {
            let response = aggregate_for(target, &templates)?;
            let labels = threshold_map(&response, threshold);
            Ok(NoisyPrior {
                response,
                threshold,
                labels,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NoisyPriorSet {
        templates,
        threshold,
        source_dice,
        priors,
    })
}

fn aggregate_for(image: &Map2, templates: &TemplateSet) -> Result<Map2> {
    let responses = templates
        .templates
        .iter()
        .map(|t| ncc_match(image, t))
        .collect::<Result<Vec<_>>>()?;
    aggregate_responses(&responses)
}

pub fn threshold_map(response: &Map2, threshold: f32) -> Map2 {
    let mut out = Map2::zeros(response.h, response.w);
    for (o, &r) in out.data.iter_mut().zip(&response.data) {
        *o = if r >= threshold { 1.0 } else { 0.0 };
    }
    out
}

/// Persists a prior set: `prior_labels.t4f` and `prior_response.t4f` stacked
/// over targets, plus a `manifest.txt` with the generation parameters.
pub fn save_prior_set(
    dir: impl AsRef<Path>,
    set: &NoisyPriorSet,
    source_id: &str,
    count: usize,
    seed: u64,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let labels: Vec<Map2> = set.priors.iter().map(|p| p.labels.clone()).collect();
    let responses: Vec<Map2> = set.priors.iter().map(|p| p.response.clone()).collect();
    t4f::save(dir.join("prior_labels.t4f"), &Map2::stack(&labels)?)?;
    t4f::save(dir.join("prior_response.t4f"), &Map2::stack(&responses)?)?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "RFEPRIOR v1");
    let _ = writeln!(manifest, "source = {source_id}");
    let _ = writeln!(manifest, "k = {}", set.templates.k);
    let _ = writeln!(manifest, "count = {count}");
    let _ = writeln!(manifest, "threshold = {}", set.threshold);
    let _ = writeln!(manifest, "source_dice = {}", set.source_dice);
    let _ = writeln!(manifest, "seed = {seed}");
    let _ = writeln!(manifest, "targets = {}", set.priors.len());
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}
