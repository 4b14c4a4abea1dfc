//! Synthetic multi-domain lesion data.
//!
//! Each domain produces 3-channel images of a smooth low-frequency bias
//! field plus Gaussian background noise, with a handful of elliptical
//! lesions shifted in intensity, mixed through a per-domain 3x3 channel
//! matrix. Domains differ in intensity statistics and channel mixing —
//! the stand-in for scanner shift. Lesion load per image stays below 3%.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::t4f;
use crate::tensor::Tensor4;

pub const MAX_FOREGROUND_FRACTION: f64 = 0.03;

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub id: String,
    pub background_mean: f32,
    pub background_noise_sd: f32,
    pub lesion_intensity_shift: f32,
    pub lesion_radius_range: (f32, f32),
    pub bias_field_amplitude: f32,
    /// Row `ch` holds the weights mixing the three raw channels into
    /// output channel `ch`.
    pub channel_mixing: [[f32; 3]; 3],
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.lesion_radius_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidArgument(format!("bad lesion radius range ({lo}, {hi})")));
        }
        if self.background_noise_sd < 0.0 {
            return Err(Error::InvalidArgument("noise sd must be >= 0".into()));
        }
        Ok(())
    }
}

/// The four fixed domains used by the experiments. Domain A is the labeled
/// source; B, C and D shift background intensity, noise level, lesion
/// contrast and channel mixing.
pub fn default_domain_specs() -> Vec<DomainSpec> {
    vec![
        DomainSpec {
            id: "A".into(),
            background_mean: 0.40,
            background_noise_sd: 0.06,
            lesion_intensity_shift: 0.45,
            lesion_radius_range: (1.5, 2.5),
            bias_field_amplitude: 0.05,
            channel_mixing: [[0.90, 0.05, 0.05], [0.05, 0.90, 0.05], [0.05, 0.05, 0.90]],
            seed: 101,
        },
        DomainSpec {
            id: "B".into(),
            background_mean: 0.55,
            background_noise_sd: 0.09,
            lesion_intensity_shift: 0.30,
            lesion_radius_range: (1.5, 2.5),
            bias_field_amplitude: 0.08,
            channel_mixing: [[0.70, 0.25, 0.15], [0.15, 0.65, 0.20], [0.10, 0.15, 0.85]],
            seed: 202,
        },
        DomainSpec {
            id: "C".into(),
            background_mean: 0.32,
            background_noise_sd: 0.10,
            lesion_intensity_shift: 0.36,
            lesion_radius_range: (1.5, 2.5),
            bias_field_amplitude: 0.09,
            channel_mixing: [[0.80, 0.10, 0.00], [0.25, 0.65, 0.10], [0.00, 0.30, 0.70]],
            seed: 303,
        },
        DomainSpec {
            id: "D".into(),
            background_mean: 0.48,
            background_noise_sd: 0.10,
            lesion_intensity_shift: 0.28,
            lesion_radius_range: (1.5, 2.5),
            bias_field_amplitude: 0.06,
            channel_mixing: [[0.55, 0.30, 0.25], [0.30, 0.50, 0.30], [0.25, 0.30, 0.55]],
            seed: 404,
        },
    ]
}

/// Images (`H x W x 3 x N`) with binary label maps (`H x W x 1 x N`).
#[derive(Debug, Clone)]
pub struct DomainImages {
    pub id: String,
    pub images: Tensor4,
    pub labels: Tensor4,
}

impl DomainImages {
    pub fn count(&self) -> usize {
        self.images.n()
    }
}

/// Deterministic per seed: image `i` draws from a child seed of
/// `spec.seed`, so generation order (or parallel generation) cannot change
/// the output.
pub fn generate_domain(spec: &DomainSpec, n_images: usize, h: usize, w: usize) -> Result<DomainImages> {
    spec.validate()?;
    if n_images == 0 {
        return Err(Error::InvalidArgument("n_images must be >= 1".into()));
    }
    let max_r = spec.lesion_radius_range.1 as f64;
    if std::f64::consts::PI * max_r * max_r > MAX_FOREGROUND_FRACTION * (h * w) as f64 {
        return Err(Error::InvalidArgument(format!(
            "max lesion radius {max_r} cannot respect the {MAX_FOREGROUND_FRACTION} foreground cap on {h}x{w} images"
        )));
    }
    let mut images = Tensor4::zeros(h, w, 3, n_images);
    let mut labels = Tensor4::zeros(h, w, 1, n_images);
    for i in 0..n_images {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[1, i as u64]));
        let (img, lab) = generate_image(spec, h, w, &mut rng);
        for ch in 0..3 {
            images.plane_mut(i, ch).copy_from_slice(&img[ch]);
        }
        labels.plane_mut(i, 0).copy_from_slice(&lab);
    }
    Ok(DomainImages {
        id: spec.id.clone(),
        images,
        labels,
    })
}

fn generate_image(spec: &DomainSpec, h: usize, w: usize, rng: &mut ChaCha8Rng) -> ([Vec<f32>; 3], Vec<f32>) {
    let bias = bias_field(spec.bias_field_amplitude, h, w, rng);

    // Elliptical lesions, capped so the image stays below the foreground
    // fraction limit; the first lesion is always placed. Intensity falls
    // off smoothly toward the boundary (real lesions are not flat disks,
    // and zero-mean template matching needs structure, not a DC offset).
    let mut mask = vec![false; h * w];
    let mut intensity = vec![0.0f32; h * w];
    let mut fg_count = 0usize;
    let cap = (MAX_FOREGROUND_FRACTION * (h * w) as f64) as usize;
    let n_lesions = rng.random_range(1..=6);
    let (r_lo, r_hi) = spec.lesion_radius_range;
    for li in 0..n_lesions {
        let margin = r_hi.ceil() as usize + 1;
        let cr = rng.random_range(margin..h - margin) as f32;
        let cc = rng.random_range(margin..w - margin) as f32;
        let rx = rng.random_range(r_lo..=r_hi);
        let ry = rng.random_range(r_lo..=r_hi);
        let theta = rng.random_range(0.0..std::f32::consts::PI);
        let pixels = rasterize_ellipse(h, w, cr, cc, rx, ry, theta);
        let fresh = pixels.iter().filter(|&&(p, _)| !mask[p]).count();
        if li > 0 && fg_count + fresh > cap {
            break;
        }
        for (p, rho_sq) in pixels {
            if !mask[p] {
                mask[p] = true;
                fg_count += 1;
            }
            let profile = spec.lesion_intensity_shift * (1.0 - rho_sq);
            intensity[p] = intensity[p].max(profile);
        }
    }

    let lab: Vec<f32> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();

    // Raw channels share the tissue signal and differ by iid noise, then the
    // mixing matrix correlates them.
    let normal = Normal::new(0.0f32, spec.background_noise_sd.max(f32::MIN_POSITIVE)).expect("valid sd");
    let mut raw = [vec![0.0f32; h * w], vec![0.0f32; h * w], vec![0.0f32; h * w]];
    for channel in raw.iter_mut() {
        for (idx, v) in channel.iter_mut().enumerate() {
            let signal = spec.background_mean + bias[idx] + intensity[idx];
            let noise = if spec.background_noise_sd > 0.0 { normal.sample(rng) } else { 0.0 };
            *v = signal + noise;
        }
    }
    let mut out = [vec![0.0f32; h * w], vec![0.0f32; h * w], vec![0.0f32; h * w]];
    for ch in 0..3 {
        let m = spec.channel_mixing[ch];
        for idx in 0..h * w {
            out[ch][idx] = m[0] * raw[0][idx] + m[1] * raw[1][idx] + m[2] * raw[2][idx];
        }
    }
    (out, lab)
}

/// Bilinear upsample of a coarse 4x4 normal grid.
fn bias_field(amplitude: f32, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    const G: usize = 4;
    let normal = Normal::new(0.0f32, 1.0).expect("valid sd");
    let grid: Vec<f32> = (0..G * G).map(|_| normal.sample(rng) * amplitude).collect();
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        let gy = r as f32 / (h - 1).max(1) as f32 * (G - 1) as f32;
        let y0 = (gy as usize).min(G - 2);
        let fy = gy - y0 as f32;
        for c in 0..w {
            let gx = c as f32 / (w - 1).max(1) as f32 * (G - 1) as f32;
            let x0 = (gx as usize).min(G - 2);
            let fx = gx - x0 as f32;
            let v00 = grid[y0 * G + x0];
            let v01 = grid[y0 * G + x0 + 1];
            let v10 = grid[(y0 + 1) * G + x0];
            let v11 = grid[(y0 + 1) * G + x0 + 1];
            out[r * w + c] = v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx;
        }
    }
    out
}

/// Pixels inside the ellipse together with their squared normalized radius
/// (0 at the center, 1 on the boundary).
fn rasterize_ellipse(h: usize, w: usize, cr: f32, cc: f32, rx: f32, ry: f32, theta: f32) -> Vec<(usize, f32)> {
    let (sin, cos) = theta.sin_cos();
    let extent = rx.max(ry).ceil() as isize + 1;
    let mut out = Vec::new();
    for dr in -extent..=extent {
        for dc in -extent..=extent {
            let r = cr as isize + dr;
            let c = cc as isize + dc;
            if r < 0 || c < 0 || r as usize >= h || c as usize >= w {
                continue;
            }
            let y = r as f32 - cr;
            let x = c as f32 - cc;
            let u = x * cos + y * sin;
            let v = -x * sin + y * cos;
            let rho_sq = (u / rx).powi(2) + (v / ry).powi(2);
            if rho_sq <= 1.0 {
                out.push((r as usize * w + c as usize, rho_sq));
            }
        }
    }
    out
}

/// Where a patch was cut from: source image index and window top-left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchWindow {
    pub image: usize,
    pub top: usize,
    pub left: usize,
}

/// Lesion-centered patches with a 7:3 train/validation split.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub id: String,
    pub patches: Tensor4,
    pub labels: Tensor4,
    pub windows: Vec<PatchWindow>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub skipped_images: Vec<usize>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Assembles a batch (patches, labels) from patch indices.
    pub fn batch(&self, idxs: &[usize]) -> Result<(Tensor4, Tensor4)> {
        Ok((gather_items(&self.patches, idxs)?, gather_items(&self.labels, idxs)?))
    }
}

/// Copies the selected batch items of a tensor into a new tensor, in order.
pub fn gather_items(t: &Tensor4, idxs: &[usize]) -> Result<Tensor4> {
    if idxs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let per_item = t.h() * t.w() * t.c();
    let mut data = Vec::with_capacity(per_item * idxs.len());
    for &i in idxs {
        if i >= t.n() {
            return Err(Error::InvalidArgument(format!("item {i} out of range for batch {}", t.n())));
        }
        data.extend_from_slice(&t.data()[i * per_item..(i + 1) * per_item]);
    }
    Tensor4::from_vec(t.h(), t.w(), t.c(), idxs.len(), data)
}

/// Cuts `per_image` patches per image, each window jittered around a random
/// lesion pixel so it always contains foreground; images without lesions
/// are skipped (reported in `skipped_images`). Then splits 7:3.
pub fn crop_patches(source: &DomainImages, size: usize, per_image: usize, seed: u64) -> Result<DomainDataset> {
    let (h, w, c, n) = source.images.dims();
    if size > h || size > w {
        return Err(Error::InvalidArgument(format!("patch size {size} exceeds image {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patch_data = Vec::new();
    let mut label_data = Vec::new();
    let mut windows = Vec::new();
    let mut skipped = Vec::new();
    let jitter = (size / 4) as i64;
    for i in 0..n {
        let label_plane = source.labels.plane(i, 0);
        let lesions: Vec<usize> = label_plane
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(idx, _)| idx)
            .collect();
        if lesions.is_empty() {
            skipped.push(i);
            continue;
        }
        for _ in 0..per_image {
            let flat = lesions[rng.random_range(0..lesions.len())];
            let (lr, lc) = (flat / w, flat % w);
            let dr = rng.random_range(-jitter..=jitter);
            let dc = rng.random_range(-jitter..=jitter);
            let top = (lr as i64 + dr - size as i64 / 2).clamp(0, (h - size) as i64) as usize;
            let left = (lc as i64 + dc - size as i64 / 2).clamp(0, (w - size) as i64) as usize;
            for ch in 0..c {
                let plane = source.images.plane(i, ch);
                for r in 0..size {
                    let row = (top + r) * w + left;
                    patch_data.extend_from_slice(&plane[row..row + size]);
                }
            }
            let mut any = false;
            for r in 0..size {
                let row = (top + r) * w + left;
                for &v in &label_plane[row..row + size] {
                    any |= v == 1.0;
                    label_data.push(v);
                }
            }
            debug_assert!(any, "window jitter must keep a lesion pixel inside");
            windows.push(PatchWindow { image: i, top, left });
        }
    }
    if windows.is_empty() {
        return Err(Error::InvalidArgument("no image had lesions; nothing to crop".into()));
    }
    let total = windows.len();
    let patches = Tensor4::from_vec(size, size, c, total, patch_data)?;
    let labels = Tensor4::from_vec(size, size, 1, total, label_data)?;

    let mut order: Vec<usize> = (0..total).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let train_count = (0.7 * total as f64 + 0.5).floor() as usize;
    let train_idx = order[..train_count].to_vec();
    let val_idx = order[train_count..].to_vec();
    Ok(DomainDataset {
        id: source.id.clone(),
        patches,
        labels,
        windows,
        train_idx,
        val_idx,
        skipped_images: skipped,
    })
}

/// Everything the experiments need for one domain: full-size train images
/// (the patch source), held-out test slices, and the patch dataset.
#[derive(Debug, Clone)]
pub struct DomainBundle {
    pub spec: DomainSpec,
    pub train: DomainImages,
    pub test: DomainImages,
    pub dataset: DomainDataset,
}

pub fn build_domain(
    spec: &DomainSpec,
    n_train_images: usize,
    n_test_images: usize,
    image_size: usize,
    patch_size: usize,
    patches_per_image: usize,
) -> Result<DomainBundle> {
    let all = generate_domain(spec, n_train_images + n_test_images, image_size, image_size)?;
    let split = |range: std::ops::Range<usize>| -> Result<DomainImages> {
        let idxs: Vec<usize> = range.collect();
        Ok(DomainImages {
            id: spec.id.clone(),
            images: gather_items(&all.images, &idxs)?,
            labels: gather_items(&all.labels, &idxs)?,
        })
    };
    let train = split(0..n_train_images)?;
    let test = split(n_train_images..n_train_images + n_test_images)?;
    let dataset = crop_patches(&train, patch_size, patches_per_image, derive_seed(spec.seed, &[2]))?;
    Ok(DomainBundle {
        spec: spec.clone(),
        train,
        test,
        dataset,
    })
}

fn idx_list(v: &[usize]) -> String {
    v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_idx_list(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| p.parse().map_err(|_| Error::Config(format!("bad index {p:?}"))))
        .collect()
}

pub fn save_bundle(dir: impl AsRef<Path>, bundle: &DomainBundle) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    t4f::save(dir.join("train_images.t4f"), &bundle.train.images)?;
    t4f::save(dir.join("train_labels.t4f"), &bundle.train.labels)?;
    t4f::save(dir.join("test_images.t4f"), &bundle.test.images)?;
    t4f::save(dir.join("test_labels.t4f"), &bundle.test.labels)?;
    t4f::save(dir.join("patches.t4f"), &bundle.dataset.patches)?;
    t4f::save(dir.join("patch_labels.t4f"), &bundle.dataset.labels)?;
    let spec = &bundle.spec;
    let mut m = String::new();
    let _ = writeln!(m, "RFEDATA v1");
    let _ = writeln!(m, "domain = {}", spec.id);
    let _ = writeln!(m, "seed = {}", spec.seed);
    let _ = writeln!(m, "n_train_images = {}", bundle.train.count());
    let _ = writeln!(m, "n_test_images = {}", bundle.test.count());
    let _ = writeln!(m, "patches = {}", bundle.dataset.len());
    let _ = writeln!(m, "train_idx = {}", idx_list(&bundle.dataset.train_idx));
    let _ = writeln!(m, "val_idx = {}", idx_list(&bundle.dataset.val_idx));
    let _ = writeln!(m, "skipped_images = {}", idx_list(&bundle.dataset.skipped_images));
    let _ = writeln!(m, "spec_background_mean = {}", spec.background_mean);
    let _ = writeln!(m, "spec_background_noise_sd = {}", spec.background_noise_sd);
    let _ = writeln!(m, "spec_lesion_intensity_shift = {}", spec.lesion_intensity_shift);
    let _ = writeln!(m, "spec_lesion_radius_min = {}", spec.lesion_radius_range.0);
    let _ = writeln!(m, "spec_lesion_radius_max = {}", spec.lesion_radius_range.1);
    let _ = writeln!(m, "spec_bias_field_amplitude = {}", spec.bias_field_amplitude);
    let mixing: Vec<String> = spec
        .channel_mixing
        .iter()
        .flatten()
        .map(|v| v.to_string())
        .collect();
    let _ = writeln!(m, "spec_channel_mixing = {}", mixing.join(","));
    for (p, win) in bundle.dataset.windows.iter().enumerate() {
        let _ = writeln!(m, "window = {} {} {} {}", p, win.image, win.top, win.left);
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, m).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<DomainBundle> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut fields = std::collections::HashMap::new();
    let mut windows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 {
            if line != "RFEDATA v1" {
                return Err(Error::Format {
                    path: path.clone(),
                    offset: 0,
                    msg: format!("bad manifest magic {line:?}"),
                });
            }
            continue;
        }
        let Some((key, value)) = line.split_once(" = ") else {
            return Err(Error::Format {
                path: path.clone(),
                offset: ln as u64,
                msg: format!("expected 'key = value', got {line:?}"),
            });
        };
        if key == "window" {
            let parts: Vec<usize> = value
                .split_whitespace()
                .map(|p| p.parse().map_err(|_| Error::Config(format!("bad window field {p:?}"))))
                .collect::<Result<_>>()?;
            if parts.len() != 4 || parts[0] != windows.len() {
                return Err(Error::Format {
                    path: path.clone(),
                    offset: ln as u64,
                    msg: format!("bad window line {value:?}"),
                });
            }
            windows.push(PatchWindow {
                image: parts[1],
                top: parts[2],
                left: parts[3],
            });
        } else {
            fields.insert(key.to_string(), value.to_string());
        }
    }
    let get = |key: &str| -> Result<&String> {
        fields
            .get(key)
            .ok_or_else(|| Error::Config(format!("manifest missing key {key:?}")))
    };
    let parse_f32 = |key: &str| -> Result<f32> {
        get(key)?
            .parse()
            .map_err(|_| Error::Config(format!("bad value for {key:?}")))
    };
    let mixing_flat: Vec<f32> = get("spec_channel_mixing")?
        .split(',')
        .map(|p| p.parse().map_err(|_| Error::Config(format!("bad mixing value {p:?}"))))
        .collect::<Result<_>>()?;
    if mixing_flat.len() != 9 {
        return Err(Error::Config("channel mixing must have 9 values".into()));
    }
    let mut channel_mixing = [[0.0f32; 3]; 3];
    for (i, v) in mixing_flat.into_iter().enumerate() {
        channel_mixing[i / 3][i % 3] = v;
    }
    let spec = DomainSpec {
        id: get("domain")?.clone(),
        background_mean: parse_f32("spec_background_mean")?,
        background_noise_sd: parse_f32("spec_background_noise_sd")?,
        lesion_intensity_shift: parse_f32("spec_lesion_intensity_shift")?,
        lesion_radius_range: (parse_f32("spec_lesion_radius_min")?, parse_f32("spec_lesion_radius_max")?),
        bias_field_amplitude: parse_f32("spec_bias_field_amplitude")?,
        channel_mixing,
        seed: get("seed")?.parse().map_err(|_| Error::Config("bad seed".into()))?,
    };
    let id = spec.id.clone();
    let train = DomainImages {
        id: id.clone(),
        images: t4f::load(dir.join("train_images.t4f"))?,
        labels: t4f::load(dir.join("train_labels.t4f"))?,
    };
    let test = DomainImages {
        id: id.clone(),
        images: t4f::load(dir.join("test_images.t4f"))?,
        labels: t4f::load(dir.join("test_labels.t4f"))?,
    };
    let dataset = DomainDataset {
        id,
        patches: t4f::load(dir.join("patches.t4f"))?,
        labels: t4f::load(dir.join("patch_labels.t4f"))?,
        windows,
        train_idx: parse_idx_list(get("train_idx")?)?,
        val_idx: parse_idx_list(get("val_idx")?)?,
        skipped_images: parse_idx_list(get("skipped_images")?)?,
    };
    if dataset.windows.len() != dataset.patches.n() {
        return Err(Error::Config(format!(
            "manifest lists {} windows but patches.t4f holds {}",
            dataset.windows.len(),
            dataset.patches.n()
        )));
    }
    Ok(DomainBundle {
        spec,
        train,
        test,
        dataset,
    })
}
