//! Random feature embedding: strategy-driven sampling of per-pixel feature
//! vectors, adjacency construction from a prior, gradient masking, and the
//! sampling-fidelity diagnostic.
//!
//! A fully convolutional network produces one feature vector per pixel, so
//! comparing all pairs in a batch is quadratic in `H*W*N`. Instead a small
//! number `n_e` of pixels is sampled per step and only their gradients are
//! propagated back.

use rand::seq::index::sample as index_sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Tensor4};

/// Pixel class quotas for drawing embeddings from a binary prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    /// Equal halves per class; oversamples the minority class when unbalanced.
    FiftyFifty,
    /// Class counts follow the prior's foreground fraction.
    DistributionAware,
    /// Fixed 80% background / 20% foreground.
    EightyTwenty,
}

impl StrategyKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fifty_fifty" => Ok(StrategyKind::FiftyFifty),
            "distribution_aware" => Ok(StrategyKind::DistributionAware),
            "eighty_twenty" => Ok(StrategyKind::EightyTwenty),
            other => Err(Error::Config(format!(
                "unknown strategy '{other}' (expected fifty_fifty, distribution_aware or eighty_twenty)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyKind::FiftyFifty => "fifty_fifty",
            StrategyKind::DistributionAware => "distribution_aware",
            StrategyKind::EightyTwenty => "eighty_twenty",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SamplingStrategy {
    pub kind: StrategyKind,
    pub n_e: usize,
}

impl SamplingStrategy {
    pub fn new(kind: StrategyKind, n_e: usize) -> Result<Self> {
        if n_e < 2 {
            return Err(Error::InvalidArgument(format!("n_e must be >= 2, got {n_e}")));
        }
        Ok(SamplingStrategy { kind, n_e })
    }

    /// (foreground, background) quota; always sums to `n_e`.
    /// Foreground rounding is half-up, background takes the remainder.
    pub fn quotas(&self, foreground_fraction: f64) -> (usize, usize) {
        let fg = match self.kind {
            StrategyKind::FiftyFifty => self.n_e.div_ceil(2),
            StrategyKind::DistributionAware => round_half_up(self.n_e as f64 * foreground_fraction),
            StrategyKind::EightyTwenty => round_half_up(self.n_e as f64 * 0.2),
        };
        let fg = fg.min(self.n_e);
        (fg, self.n_e - fg)
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Pixel site of one sampled embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Position {
    pub batch: usize,
    pub row: usize,
    pub col: usize,
}

/// One pixel's feature vector together with where it came from and the
/// class its prior assigns to it.
#[derive(Debug, Clone)]
pub struct EmbeddingSample<T> {
    pub position: Position,
    pub vector: Vec<T>,
    pub prior_label: u8,
}

/// Symmetric binary similarity matrix over sampled embeddings,
/// with a unit diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    bits: Vec<bool>,
}

impl Adjacency {
    pub fn from_labels(labels: &[u8]) -> Adjacency {
        let n = labels.len();
        let mut bits = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                bits[i * n + j] = labels[i] == labels[j];
            }
        }
        Adjacency { n, bits }
    }

    /// Build from an explicit matrix; rejects asymmetry and non-unit diagonal.
    pub fn from_bits(n: usize, bits: Vec<bool>) -> Result<Adjacency> {
        if bits.len() != n * n {
            return Err(Error::shape("Adjacency::from_bits", format!("{n}x{n}"), format!("{} bits", bits.len())));
        }
        for i in 0..n {
            if !bits[i * n + i] {
                return Err(Error::InvalidArgument(format!("adjacency diagonal a_{{{i},{i}}} must be 1")));
            }
            for j in (i + 1)..n {
                if bits[i * n + j] != bits[j * n + i] {
                    return Err(Error::InvalidArgument(format!("adjacency not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Adjacency { n, bits })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn similar(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }
}

/// Builds the label-equality adjacency: `a_ij = 1` iff the prior labels of
/// samples i and j are equal.
pub fn build_adjacency<T>(samples: &[EmbeddingSample<T>]) -> Result<Adjacency> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("build_adjacency on empty sample list".into()));
    }
    let labels: Vec<u8> = samples.iter().map(|s| s.prior_label).collect();
    Ok(Adjacency::from_labels(&labels))
}

/// Draws exactly `strategy.n_e` pixel positions from a binary prior map
/// (`H x W x 1 x N`), split between classes by the strategy's quota.
///
/// Within a class, positions are drawn uniformly without replacement; when a
/// class pool is smaller than its quota the draw falls back to sampling with
/// replacement. Foreground is drawn before background. A positive quota on
/// an empty class pool is an error.
pub fn sample_positions<R: Rng>(
    prior: &Tensor4,
    strategy: &SamplingStrategy,
    rng: &mut R,
) -> Result<Vec<Position>> {
    if prior.c() != 1 {
        return Err(Error::shape("sample_positions prior", "channel count 1", prior.dims_str()));
    }
    let (h, w, _, n) = prior.dims();
    let total = h * w * n;
    if strategy.n_e > total {
        return Err(Error::InvalidArgument(format!(
            "n_e {} exceeds prior pixel count {}",
            strategy.n_e, total
        )));
    }
    let mut fg_pool: Vec<u32> = Vec::new();
    let mut bg_pool: Vec<u32> = Vec::new();
    for (i, &v) in prior.data().iter().enumerate() {
        if v == 1.0 {
            fg_pool.push(i as u32);
        } else if v == 0.0 {
            bg_pool.push(i as u32);
        } else {
            return Err(Error::InvalidArgument(format!(
                "prior must be binary, found {v} at flat index {i}"
            )));
        }
    }
    let frac = fg_pool.len() as f64 / total as f64;
    let (fg_quota, bg_quota) = strategy.quotas(frac);

    let mut positions = Vec::with_capacity(strategy.n_e);
    draw_class(&fg_pool, fg_quota, "foreground", h, w, rng, &mut positions)?;
    draw_class(&bg_pool, bg_quota, "background", h, w, rng, &mut positions)?;
    Ok(positions)
}

fn draw_class<R: Rng>(
    pool: &[u32],
    quota: usize,
    class: &'static str,
    h: usize,
    w: usize,
    rng: &mut R,
    out: &mut Vec<Position>,
) -> Result<()> {
    if quota == 0 {
        return Ok(());
    }
    if pool.is_empty() {
        return Err(Error::EmptyClass { class, quota });
    }
    if pool.len() >= quota {
        for i in index_sample(rng, pool.len(), quota) {
            out.push(decode(pool[i], h, w));
        }
    } else {
        // Class pool smaller than its quota: oversample with replacement.
        for _ in 0..quota {
            let i = rng.random_range(0..pool.len());
            out.push(decode(pool[i], h, w));
        }
    }
    Ok(())
}

#[inline]
fn decode(flat: u32, h: usize, w: usize) -> Position {
    let flat = flat as usize;
    let batch = flat / (h * w);
    let rem = flat % (h * w);
    Position {
        batch,
        row: rem / w,
        col: rem % w,
    }
}

/// Reads the feature vector at each position (all channels of that pixel)
/// and its class from the prior.
pub fn gather<T: Scalar>(
    embed: &Tensor<T>,
    prior: &Tensor4,
    positions: &[Position],
) -> Result<Vec<EmbeddingSample<T>>> {
    let (h, w, c, n) = embed.dims();
    if prior.h() != h || prior.w() != w || prior.n() != n || prior.c() != 1 {
        return Err(Error::shape(
            "gather prior vs embed",
            format!("{}x{}x1x{}", h, w, n),
            prior.dims_str(),
        ));
    }
    let mut samples = Vec::with_capacity(positions.len());
    for &p in positions {
        if p.row >= h || p.col >= w || p.batch >= n {
            return Err(Error::InvalidArgument(format!(
                "position (batch {}, row {}, col {}) out of bounds for {}",
                p.batch,
                p.row,
                p.col,
                embed.dims_str()
            )));
        }
        let vector = (0..c).map(|ch| embed.get(p.row, p.col, ch, p.batch)).collect();
        let prior_label = if prior.get(p.row, p.col, 0, p.batch) == 1.0 { 1 } else { 0 };
        samples.push(EmbeddingSample {
            position: p,
            vector,
            prior_label,
        });
    }
    Ok(samples)
}

/// Scatter per-sample gradient vectors back onto the feature-map grid.
///
/// The output matches `embed_grad`'s shape and is zero at every pixel that
/// was not sampled; a position sampled more than once accumulates
/// additively. Only sampled pixels carry gradient back into the network.
pub fn mask_gradients<T: Scalar>(
    embed_grad: &Tensor<T>,
    positions: &[Position],
    per_sample_grads: &[Vec<T>],
) -> Result<Tensor<T>> {
    if positions.len() != per_sample_grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} positions but {} gradient vectors",
            positions.len(),
            per_sample_grads.len()
        )));
    }
    let (h, w, c, n) = embed_grad.dims();
    let mut out = embed_grad.zeros_like();
    for (p, g) in positions.iter().zip(per_sample_grads) {
        if g.len() != c {
            return Err(Error::shape("mask_gradients vector", format!("{c} channels"), format!("{}", g.len())));
        }
        if p.row >= h || p.col >= w || p.batch >= n {
            return Err(Error::InvalidArgument(format!(
                "position (batch {}, row {}, col {}) out of bounds for {}",
                p.batch,
                p.row,
                p.col,
                embed_grad.dims_str()
            )));
        }
        for (ch, &gv) in g.iter().enumerate() {
            let i = out.idx(p.row, p.col, ch, p.batch);
            out.data_mut()[i] = out.data_mut()[i] + gv;
        }
    }
    Ok(out)
}

/// Jensen-Shannon divergence between the channel-marginal histograms of two
/// embedding sets, averaged over channels. Base-2 logarithm, so the result
/// lies in [0, 1].
///
/// Bins are equal-width over the combined range of both sets per channel;
/// for the intended use (sampled vectors drawn from the population) this
/// equals the population range, and it keeps the divergence symmetric for
/// arbitrary inputs.
pub fn js_divergence<T: Scalar>(sampled: &[Vec<T>], population: &[Vec<T>], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("bins must be >= 2, got {bins}")));
    }
    if population.is_empty() {
        return Err(Error::InvalidArgument("empty population".into()));
    }
    if sampled.is_empty() {
        return Err(Error::InvalidArgument("empty sampled set".into()));
    }
    let dim = population[0].len();
    if dim == 0 || sampled[0].len() != dim {
        return Err(Error::shape(
            "js_divergence vectors",
            format!("{dim} channels"),
            format!("{}", sampled[0].len()),
        ));
    }
    let mut total = 0.0;
    for ch in 0..dim {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in population.iter().chain(sampled.iter()) {
            let x = v[ch].to_f64_lossy();
            lo = lo.min(x);
            hi = hi.max(x);
        }
        if !(hi > lo) {
            // Constant channel: both histograms are a single point mass.
            continue;
        }
        let p = histogram(sampled, ch, lo, hi, bins);
        let q = histogram(population, ch, lo, hi, bins);
        total += jsd_base2(&p, &q);
    }
    Ok(total / dim as f64)
}

fn histogram<T: Scalar>(set: &[Vec<T>], ch: usize, lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0.0f64; bins];
    for v in set {
        let x = v[ch].to_f64_lossy();
        let mut b = ((x - lo) / width) as usize;
        if b >= bins {
            b = bins - 1;
        }
        counts[b] += 1.0;
    }
    let total: f64 = set.len() as f64;
    for c in &mut counts {
        *c /= total;
    }
    counts
}

fn jsd_base2(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let mi = 0.5 * (pi + qi);
        if pi > 0.0 {
            acc += 0.5 * pi * (pi / mi).log2();
        }
        if qi > 0.0 {
            acc += 0.5 * qi * (qi / mi).log2();
        }
    }
    acc.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prior_with_fg(h: usize, w: usize, n: usize, fg: &[(usize, usize, usize)]) -> Tensor4 {
        let mut t = Tensor4::zeros(h, w, 1, n);
        for &(b, r, c) in fg {
            t.set(r, c, 0, b, 1.0);
        }
        t
    }

    fn count_classes(prior: &Tensor4, positions: &[Position]) -> (usize, usize) {
        let mut fg = 0;
        let mut bg = 0;
        for p in positions {
            if prior.get(p.row, p.col, 0, p.batch) == 1.0 {
                fg += 1;
            } else {
                bg += 1;
            }
        }
        (fg, bg)
    }

    #[test]
    fn eighty_twenty_quotas_at_100() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fg: Vec<_> = (0..25).map(|i| (0, i / 10, i % 10)).collect();
        let prior = prior_with_fg(20, 20, 1, &fg);
        let strategy = SamplingStrategy::new(StrategyKind::EightyTwenty, 100).unwrap();
        let pos = sample_positions(&prior, &strategy, &mut rng).unwrap();
        assert_eq!(pos.len(), 100);
        assert_eq!(count_classes(&prior, &pos), (20, 80));
    }

    #[test]
    fn fifty_fifty_quotas_at_20() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fg: Vec<_> = (0..12).map(|i| (0, i, i)).collect();
        let prior = prior_with_fg(16, 16, 1, &fg);
        let strategy = SamplingStrategy::new(StrategyKind::FiftyFifty, 20).unwrap();
        let pos = sample_positions(&prior, &strategy, &mut rng).unwrap();
        assert_eq!(count_classes(&prior, &pos), (10, 10));
    }

    #[test]
    fn distribution_aware_rounds_prior_ratio() {
        // 1% foreground, n_e = 200 -> round(2.0) = 2 foreground.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fg: Vec<_> = (0..4).map(|i| (0, 0, i)).collect();
        let prior = prior_with_fg(20, 20, 1, &fg);
        let strategy = SamplingStrategy::new(StrategyKind::DistributionAware, 200).unwrap();
        let pos = sample_positions(&prior, &strategy, &mut rng).unwrap();
        assert_eq!(count_classes(&prior, &pos), (2, 198));
    }

    #[test]
    fn empty_class_with_quota_is_rejected_naming_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let prior = Tensor4::zeros(4, 4, 1, 1); // no foreground at all
        let strategy = SamplingStrategy::new(StrategyKind::FiftyFifty, 4).unwrap();
        let err = sample_positions(&prior, &strategy, &mut rng).unwrap_err();
        assert!(err.to_string().contains("foreground"), "{err}");
    }

    #[test]
    fn small_pool_oversamples_with_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prior = prior_with_fg(4, 4, 1, &[(0, 1, 1)]); // single foreground pixel
        let strategy = SamplingStrategy::new(StrategyKind::FiftyFifty, 10).unwrap();
        let pos = sample_positions(&prior, &strategy, &mut rng).unwrap();
        assert_eq!(count_classes(&prior, &pos), (5, 5));
        let fg_positions: Vec<_> = pos.iter().filter(|p| p.row == 1 && p.col == 1).collect();
        assert_eq!(fg_positions.len(), 5);
    }

    #[test]
    fn gather_reads_channel_index_vectors() {
        // Channel c constant = c, so every sampled vector is (0, 1, ..., C-1).
        let mut embed = Tensor::<f32>::zeros(3, 3, 4, 2);
        for b in 0..2 {
            for ch in 0..4 {
                embed.plane_mut(b, ch).fill(ch as f32);
            }
        }
        let prior = prior_with_fg(3, 3, 2, &[(1, 2, 2)]);
        let positions = vec![
            Position { batch: 0, row: 0, col: 0 },
            Position { batch: 1, row: 2, col: 2 },
        ];
        let samples = gather(&embed, &prior, &positions).unwrap();
        assert_eq!(samples[0].vector, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(samples[0].prior_label, 0);
        assert_eq!(samples[1].prior_label, 1);
    }

    #[test]
    fn gather_matches_direct_indexing_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut embed = Tensor::<f32>::zeros(5, 7, 3, 2);
        for v in embed.data_mut() {
            *v = rng.random_range(-1.0f32..1.0);
        }
        let prior = prior_with_fg(5, 7, 2, &[(0, 1, 3), (1, 4, 6)]);
        let positions = vec![
            Position { batch: 0, row: 1, col: 3 },
            Position { batch: 1, row: 4, col: 6 },
            Position { batch: 1, row: 0, col: 0 },
        ];
        let samples = gather(&embed, &prior, &positions).unwrap();
        for s in &samples {
            for (ch, &v) in s.vector.iter().enumerate() {
                assert_eq!(v, embed.get(s.position.row, s.position.col, ch, s.position.batch));
            }
        }
    }

    #[test]
    fn gather_rejects_out_of_bounds() {
        let embed = Tensor::<f32>::zeros(3, 3, 2, 1);
        let prior = Tensor4::zeros(3, 3, 1, 1);
        let positions = vec![Position { batch: 0, row: 3, col: 0 }];
        assert!(gather(&embed, &prior, &positions).is_err());
    }

    #[test]
    fn adjacency_from_labels_matches_spec_example() {
        let adj = Adjacency::from_labels(&[1, 1, 0]);
        let expect = [
            [true, true, false],
            [true, true, false],
            [false, false, true],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(adj.similar(i, j), expect[i][j], "({i},{j})");
            }
        }
    }

    #[test]
    fn adjacency_random_labels_match_equality_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let labels: Vec<u8> = (0..9).map(|_| rng.random_range(0..2u8)).collect();
            let adj = Adjacency::from_labels(&labels);
            for i in 0..labels.len() {
                for j in 0..labels.len() {
                    assert_eq!(adj.similar(i, j), labels[i] == labels[j]);
                }
            }
        }
    }

    #[test]
    fn adjacency_rejects_asymmetry_and_zero_diagonal() {
        let bits = vec![true, true, false, true]; // a_01 != a_10
        assert!(Adjacency::from_bits(2, bits).is_err());
        let bits = vec![false, true, true, true]; // a_00 = 0
        assert!(Adjacency::from_bits(2, bits).is_err());
    }

    #[test]
    fn mask_gradients_scatters_and_accumulates() {
        let embed = Tensor::<f32>::zeros(3, 3, 2, 1);
        // No positions -> zero tensor.
        let z = mask_gradients(&embed, &[], &[]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        let p = Position { batch: 0, row: 1, col: 2 };
        let out = mask_gradients(&embed, &[p], &[vec![1.0, -2.0]]).unwrap();
        assert_eq!(out.get(1, 2, 0, 0), 1.0);
        assert_eq!(out.get(1, 2, 1, 0), -2.0);
        let nonzero = out.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 2);

        // Duplicate position accumulates g1 + g2.
        let out = mask_gradients(&embed, &[p, p], &[vec![1.0, 0.5], vec![2.0, 0.25]]).unwrap();
        assert_eq!(out.get(1, 2, 0, 0), 3.0);
        assert_eq!(out.get(1, 2, 1, 0), 0.75);
    }

    #[test]
    fn mask_gradients_zero_at_every_unsampled_pixel() {
        let embed = Tensor::<f32>::zeros(4, 4, 3, 2);
        let positions = vec![
            Position { batch: 0, row: 0, col: 0 },
            Position { batch: 1, row: 3, col: 3 },
        ];
        let grads = vec![vec![1.0; 3], vec![2.0; 3]];
        let out = mask_gradients(&embed, &positions, &grads).unwrap();
        for b in 0..2 {
            for r in 0..4 {
                for c in 0..4 {
                    let sampled = positions.iter().any(|p| p.batch == b && p.row == r && p.col == c);
                    for ch in 0..3 {
                        let v = out.get(r, c, ch, b);
                        if sampled {
                            assert_ne!(v, 0.0);
                        } else {
                            assert_eq!(v, 0.0, "({b},{r},{c},{ch})");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn jsd_identical_sets_is_zero() {
        let pop: Vec<Vec<f32>> = (0..50).map(|i| vec![i as f32, (i * 7 % 13) as f32]).collect();
        let d = js_divergence(&pop, &pop, 16).unwrap();
        assert!(d.abs() < 1e-12, "{d}");
    }

    #[test]
    fn jsd_disjoint_single_bins_is_one() {
        // Two point masses land in opposite end bins: maximal base-2 JSD.
        let a = vec![vec![0.0f32]; 20];
        let b = vec![vec![10.0f32]; 20];
        let d = js_divergence(&a, &b, 2).unwrap();
        assert!((d - 1.0).abs() < 1e-12, "{d}");
    }

    #[test]
    fn jsd_matching_histogram_subsample_is_zero() {
        // Population is two atoms half/half; taking one point from each atom
        // yields the same normalized histogram.
        let mut pop = vec![vec![0.0f32]; 10];
        pop.extend(vec![vec![1.0f32]; 10]);
        let sampled = vec![vec![0.0f32], vec![1.0f32]];
        let d = js_divergence(&sampled, &pop, 4).unwrap();
        assert!(d.abs() < 1e-12, "{d}");
    }

    #[test]
    fn jsd_hand_built_histogram_oracle() {
        // 2 bins over [0, 2): p = (3/4, 1/4), q = (1/2, 1/2).
        let sampled = vec![vec![0.0f32], vec![0.5], vec![0.9], vec![1.5]];
        let population = vec![vec![0.0f32], vec![0.6], vec![1.2], vec![2.0]];
        let d = js_divergence(&sampled, &population, 2).unwrap();
        let kl = |p: &[f64], m: &[f64]| -> f64 {
            p.iter()
                .zip(m)
                .filter(|(&pi, _)| pi > 0.0)
                .map(|(&pi, &mi)| pi * (pi / mi).log2())
                .sum()
        };
        let p = [0.75, 0.25];
        let q = [0.5, 0.5];
        let m = [0.625, 0.375];
        let expect = 0.5 * kl(&p, &m) + 0.5 * kl(&q, &m);
        assert!((d - expect).abs() < 1e-12, "{d} vs {expect}");
    }

    #[test]
    fn jsd_is_symmetric_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let a: Vec<Vec<f32>> = (0..30).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(0.0..1.0)]).collect();
            let b: Vec<Vec<f32>> = (0..40).map(|_| vec![rng.random_range(-1.0..3.0), rng.random_range(0.0..2.0)]).collect();
            let ab = js_divergence(&a, &b, 8).unwrap();
            let ba = js_divergence(&b, &a, 8).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!(ab >= 0.0);
        }
    }

    #[test]
    fn quota_totals_are_exact_for_1000_random_priors() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..1000 {
            let h = rng.random_range(4..12);
            let w = rng.random_range(4..12);
            let n = rng.random_range(1..3);
            let mut prior = Tensor4::zeros(h, w, 1, n);
            // Guarantee at least one pixel of each class.
            let total = h * w * n;
            let fg_count = rng.random_range(1..total);
            for i in 0..fg_count {
                prior.data_mut()[i] = 1.0;
            }
            let n_e = rng.random_range(2..=total.min(60));
            let kind = match trial % 3 {
                0 => StrategyKind::FiftyFifty,
                1 => StrategyKind::DistributionAware,
                _ => StrategyKind::EightyTwenty,
            };
            let strategy = SamplingStrategy::new(kind, n_e).unwrap();
            let frac = fg_count as f64 / total as f64;
            let (want_fg, want_bg) = strategy.quotas(frac);
            let pos = sample_positions(&prior, &strategy, &mut rng).unwrap();
            assert_eq!(pos.len(), n_e);
            let (got_fg, got_bg) = count_classes(&prior, &pos);
            assert_eq!((got_fg, got_bg), (want_fg, want_bg), "trial {trial} {kind:?} n_e {n_e}");
        }
    }
}
