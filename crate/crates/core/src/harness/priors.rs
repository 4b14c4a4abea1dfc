//! Builds noisy priors for a target domain and aligns them with its patch
//! dataset.
//!
//! The first training image of the target acts as the labeled template
//! source; pseudo-labels are produced for the remaining training images,
//! cropped through the same windows as the patches. Patches cut from the
//! template source image are excluded from fine-tuning.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::DomainBundle;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::prior::{generate_noisy_prior, save_prior_set, Map2, NoisyPriorSet};
use crate::t4f;
use crate::tensor::Tensor4;

const STREAM_PRIOR: u64 = 11;

pub struct DomainPrior {
    pub set: NoisyPriorSet,
    /// Pseudo-label patches aligned with the bundle's patch tensor; patches
    /// from the template source image are zero-filled and excluded from
    /// `usable`.
    pub patch_priors: Tensor4,
    /// Training-split patch indices eligible for semi-supervised use.
    pub usable: Vec<usize>,
}

/// Runs the template-matching pipeline on a target bundle. Only images are
/// read from the targets; the single labeled image is the first training
/// image (its labels are part of the protocol's "barely labeled" budget).
pub fn build_noisy_prior(cfg: &ExperimentConfig, bundle: &DomainBundle) -> Result<DomainPrior> {
    let n_images = bundle.train.count();
    if n_images < 2 {
        return Err(Error::InvalidArgument(
            "need at least two target training images (one labeled template source plus targets)".into(),
        ));
    }
    let channel = cfg.prior_channel;
    let source_image = Map2::from_tensor(&bundle.train.images, channel, 0);
    let source_labels = Map2::from_tensor(&bundle.train.labels, 0, 0);
    let targets: Vec<Map2> = (1..n_images)
        .map(|i| Map2::from_tensor(&bundle.train.images, channel, i))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(bundle.spec.seed, &[STREAM_PRIOR]));
    let set = generate_noisy_prior(
        &source_image,
        &source_labels,
        &targets,
        cfg.template_k,
        cfg.template_count,
        &mut rng,
    )?;

    let ds = &bundle.dataset;
    let size = ds.patches.h();
    let mut patch_priors = Tensor4::zeros(size, size, 1, ds.len());
    for (p, win) in ds.windows.iter().enumerate() {
        if win.image == 0 {
            continue;
        }
        let prior_map = &set.priors[win.image - 1].labels;
        for r in 0..size {
            for c in 0..size {
                let v = prior_map.get(win.top + r, win.left + c);
                patch_priors.set(r, c, 0, p, v);
            }
        }
    }
    let usable: Vec<usize> = ds
        .train_idx
        .iter()
        .copied()
        .filter(|&p| ds.windows[p].image != 0)
        .collect();
    Ok(DomainPrior {
        set,
        patch_priors,
        usable,
    })
}

/// Persists a domain prior next to its dataset: the stacked response and
/// label maps with their manifest, the patch-aligned pseudo-labels, and the
/// usable patch list.
pub fn save_domain_prior(dir: impl AsRef<Path>, prior: &DomainPrior, cfg: &ExperimentConfig, source_id: &str) -> Result<()> {
    let dir = dir.as_ref();
    save_prior_set(dir, &prior.set, source_id, cfg.template_count, 0)?;
    t4f::save(dir.join("patch_priors.t4f"), &prior.patch_priors)?;
    let list = prior
        .usable
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let path = dir.join("usable.txt");
    fs::write(&path, list).map_err(|e| Error::io(path, e))
}

/// Loads what fine-tuning needs: patch-aligned pseudo-labels and the usable
/// patch indices.
pub fn load_domain_prior(dir: impl AsRef<Path>) -> Result<(Tensor4, Vec<usize>)> {
    let dir = dir.as_ref();
    let patch_priors = t4f::load(dir.join("patch_priors.t4f"))?;
    let path = dir.join("usable.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let usable = if text.trim().is_empty() {
        Vec::new()
    } else {
        text.trim()
            .split(',')
            .map(|p| p.parse().map_err(|_| Error::Config(format!("bad usable index {p:?}"))))
            .collect::<Result<_>>()?
    };
    Ok((patch_priors, usable))
}

#[cfg(test)]
mod tests {
// temporary probe — appended as a test

    use super::*;
    use crate::data::{build_domain, default_domain_specs, DomainSpec};
    use crate::harness::eval::mean_f_score;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig::default()
    }

    fn bundle(which: usize, n_train: usize) -> DomainBundle {
        let spec = default_domain_specs()[which].clone();
        build_domain(&spec, n_train, 2, 64, 32, 4).unwrap()
    }

    #[test]
    fn prior_aligns_with_patches_and_excludes_source_image() {
        let b = bundle(1, 6);
        let prior = build_noisy_prior(&cfg(), &b).unwrap();
        assert_eq!(prior.patch_priors.n(), b.dataset.len());
        assert!(prior.patch_priors.data().iter().all(|&v| v == 0.0 || v == 1.0));
        for &p in &prior.usable {
            assert!(b.dataset.windows[p].image != 0);
            assert!(b.dataset.train_idx.contains(&p));
        }
        // Patches from image 0 are zeroed.
        for (p, win) in b.dataset.windows.iter().enumerate() {
            if win.image == 0 {
                let plane = prior.patch_priors.plane(p, 0);
                assert!(plane.iter().all(|&v| v == 0.0));
            }
        }
        // Cropping oracle: pseudo-label patches equal window copies.
        for (p, win) in b.dataset.windows.iter().enumerate() {
            if win.image == 0 {
                continue;
            }
            let map = &prior.set.priors[win.image - 1].labels;
            for r in 0..32 {
                for c in 0..32 {
                    assert_eq!(prior.patch_priors.get(r, c, 0, p), map.get(win.top + r, win.left + c));
                }
            }
        }
    }

    /// Measured quality floor for the noisy prior against hidden ground
    /// truth: over 15 runs (domains B, C, D x 5 generator seeds) the mean
    /// prior Dice ranged 0.26..0.51 with a 5th percentile of ~0.26, so the
    /// gate sits at 0.25.
    #[test]
    fn noisy_prior_quality_floor() {
        let c = cfg();
        for which in 1..4 {
            let b = bundle(which, 6);
            let prior = build_noisy_prior(&c, &b).unwrap();
            let mut dices = Vec::new();
            for (i, p) in prior.set.priors.iter().enumerate() {
                let image_idx = i + 1;
                let gt = Map2::from_tensor(&b.train.labels, 0, image_idx);
                let mut tp = 0u64;
                let mut fp = 0u64;
                let mut fneg = 0u64;
                for (pl, gl) in p.labels.data().iter().zip(gt.data()) {
                    match (*pl == 1.0, *gl == 1.0) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fneg += 1,
                        _ => {}
                    }
                }
                dices.push(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64);
            }
            let mean = mean_f_score(&dices);
            assert!(mean > 0.25, "domain {which}: prior dice {mean}");
        }
    }

    #[test]
    fn domain_prior_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle(1, 4);
        let c = cfg();
        let prior = build_noisy_prior(&c, &b).unwrap();
        save_domain_prior(dir.path(), &prior, &c, "B").unwrap();
        let (patches, usable) = load_domain_prior(dir.path()).unwrap();
        assert_eq!(patches, prior.patch_priors);
        assert_eq!(usable, prior.usable);
    }
}
