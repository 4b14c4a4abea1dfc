//! Evaluation and reporting: per-image pixel F-scores, CSV rows, and the
//! Spearman rank correlation used by the trend gates.

use std::fs;
use std::path::Path;

use crate::data::DomainImages;
use crate::error::{Error, Result};
use crate::model::Model;

/// (tp, fp, fn) of a thresholded probability map against binary labels.
pub fn f_score_counts(probs: &[f32], labels: &[f32], threshold: f32) -> (u64, u64, u64) {
    let mut tp = 0;
    let mut fp = 0;
    let mut fneg = 0;
    for (&p, &g) in probs.iter().zip(labels) {
        match (p >= threshold, g == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    (tp, fp, fneg)
}

fn f_from_counts(tp: u64, fp: u64, fneg: u64) -> f64 {
    if tp + fneg == 0 {
        // Empty ground truth: a clean prediction scores 1, anything else 0.
        return if fp == 0 { 1.0 } else { 0.0 };
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

/// Per-image pixel F-score (Dice of the binarized prediction) on a set of
/// full-size images. The model is fully convolutional, so the image size
/// may differ from the training patch size.
pub fn evaluate(model: &Model, images: &DomainImages, threshold: f32) -> Result<Vec<f64>> {
    let n = images.count();
    let mut scores = Vec::with_capacity(n);
    // Chunked to bound the activation memory of one forward pass.
    let chunk = 8;
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let batch = images.images.slice_batch(start, len)?;
        let probs = model.predict(&batch)?;
        for i in 0..len {
            let (tp, fp, fneg) = f_score_counts(probs.plane(i, 0), images.labels.plane(start + i, 0), threshold);
            scores.push(f_from_counts(tp, fp, fneg));
        }
        start += len;
    }
    Ok(scores)
}

pub fn mean_f_score(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// One evaluation result: a model on a domain for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub model_id: String,
    pub domain: String,
    pub seed: u64,
    pub epoch: usize,
    pub f_score: f64,
    /// `ok`, or `failed: <reason>` for sweep cells that errored.
    pub status: String,
}

impl MetricsRow {
    pub fn ok(model_id: impl Into<String>, domain: impl Into<String>, seed: u64, epoch: usize, f_score: f64) -> Self {
        MetricsRow {
            model_id: model_id.into(),
            domain: domain.into(),
            seed,
            epoch,
            f_score,
            status: "ok".into(),
        }
    }
}

pub const CSV_HEADER: &str = "model_id,domain,seed,epoch,f_score,status";

/// Writes rows atomically (temp file + rename). Float formatting uses the
/// shortest round-trip representation, so reading the file back loses
/// nothing.
pub fn write_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for r in rows {
        if r.model_id.contains(',') || r.domain.contains(',') || r.status.contains(',') {
            return Err(Error::InvalidArgument(format!("comma in CSV field of row {r:?}")));
        }
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.model_id, r.domain, r.seed, r.epoch, r.f_score, r.status
        ));
    }
    let tmp = path.with_extension("csv.tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 {
            if line != CSV_HEADER {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: 0,
                    msg: format!("bad CSV header {line:?}"),
                });
            }
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: ln as u64,
                msg: format!("expected 6 fields, got {}", parts.len()),
            });
        }
        let bad = |what: &str| Error::Format {
            path: path.to_path_buf(),
            offset: ln as u64,
            msg: format!("bad {what} in {line:?}"),
        };
        rows.push(MetricsRow {
            model_id: parts[0].to_string(),
            domain: parts[1].to_string(),
            seed: parts[2].parse().map_err(|_| bad("seed"))?,
            epoch: parts[3].parse().map_err(|_| bad("epoch"))?,
            f_score: parts[4].parse().map_err(|_| bad("f_score"))?,
            status: parts[5].to_string(),
        });
    }
    Ok(rows)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "paired samples");
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("no NaN"));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_domain, default_domain_specs, DomainSpec};
    use crate::model::{Model, ModelConfig};
    use crate::tensor::Tensor4;

    #[test]
    fn f_score_formula_cases() {
        // Perfect prediction.
        assert_eq!(f_from_counts(5, 0, 0), 1.0);
        // Empty prediction, nonempty truth.
        assert_eq!(f_from_counts(0, 0, 3), 0.0);
        // TP=2, FP=1, FN=1 -> 4/6.
        assert!((f_from_counts(2, 1, 1) - 2.0 / 3.0).abs() < 1e-12);
        // Empty vs empty scores 1; empty truth with prediction scores 0.
        assert_eq!(f_from_counts(0, 0, 0), 1.0);
        assert_eq!(f_from_counts(0, 4, 0), 0.0);
    }

    #[test]
    fn counts_respect_threshold() {
        let probs = [0.2, 0.6, 0.5, 0.4];
        let labels = [0.0, 1.0, 0.0, 1.0];
        let (tp, fp, fneg) = f_score_counts(&probs, &labels, 0.5);
        assert_eq!((tp, fp, fneg), (1, 1, 1));
    }

    #[test]
    fn evaluate_runs_on_sizes_other_than_training_patches() {
        let spec = DomainSpec {
            lesion_radius_range: (1.5, 2.5),
            ..default_domain_specs()[0].clone()
        };
        let bundle = build_domain(&spec, 2, 2, 32, 16, 2).unwrap();
        let model = Model::build(ModelConfig::default()).unwrap();
        let scores = evaluate(&model, &bundle.test, 0.5).unwrap();
        assert_eq!(scores.len(), 2);
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
    }

    #[test]
    fn evaluate_perfect_model_scores_one() {
        // A "model" whose predictions equal the labels: emulate by scoring
        // the labels directly through the counting path.
        let mut labels = Tensor4::zeros(8, 8, 1, 1);
        labels.set(2, 2, 0, 0, 1.0);
        let (tp, fp, fneg) = f_score_counts(labels.plane(0, 0), labels.plane(0, 0), 0.5);
        assert_eq!(f_from_counts(tp, fp, fneg), 1.0);
    }

    #[test]
    fn csv_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![
            MetricsRow::ok("lower_A", "B", 0, 50, 0.123456789),
            MetricsRow::ok("ss_acd", "C", 3, 50, 1.0 / 3.0),
            MetricsRow {
                status: "failed: boom".into(),
                ..MetricsRow::ok("x", "D", 1, 50, f64::NAN)
            },
        ];
        write_csv(&path, &rows).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0], rows[0]);
        assert_eq!(back[1], rows[1]);
        assert!(back[2].f_score.is_nan());
        assert_eq!(back[2].status, "failed: boom");
    }

    #[test]
    fn csv_rejects_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "nope\n").unwrap();
        assert!(read_csv(&path).is_err());
    }

    #[test]
    fn spearman_basics() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman_rho(&x, &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman_rho(&x, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // Monotone but non-linear is still rho = 1.
        assert!((spearman_rho(&x, &[1.0, 100.0, 101.0, 1000.0]) - 1.0).abs() < 1e-12);
        // Ties get average ranks.
        let rho = spearman_rho(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]);
        assert!(rho > 0.9, "{rho}");
    }
}
