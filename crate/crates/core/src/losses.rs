//! Training objectives: the primary soft Dice loss, the two embedding
//! distance metrics, the pairwise margin embedding loss, and the combined
//! objective.
//!
//! All functions are pure and return gradients alongside values so they can
//! be checked against finite differences in 64-bit mode.

use crate::error::{Error, Result};
use crate::sampler::{Adjacency, EmbeddingSample};
use crate::tensor::{Scalar, Tensor};

/// Distance metric between two latent feature vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Euclidean norm of the difference. Penalizes vector magnitudes.
    L2,
    /// Angular cosine distance `1 - cos(a, b)`. Scale-invariant, and
    /// bounded in [0, 1] on non-negative (post-relu) features; with a
    /// margin of 1 the hinge is met exactly at orthogonality.
    Acd,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Metric::L2),
            "acd" => Ok(Metric::Acd),
            other => Err(Error::Config(format!("unknown metric '{other}' (expected l2 or acd)"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::L2 => "l2",
            Metric::Acd => "acd",
        }
    }
}

/// Weights and margin for one embedding objective.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Multiplier of the embedding term in the combined objective.
    pub lambda: f64,
    /// Hinge margin for dissimilar pairs.
    pub margin: f64,
    pub metric: Metric,
    /// Guard added to denominators.
    pub epsilon: f64,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        match self.metric {
            Metric::Acd => {
                if !(self.margin > 0.0 && self.margin <= 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "ACD margin must lie in (0, 1], got {}",
                        self.margin
                    )));
                }
            }
            Metric::L2 => {
                if self.margin <= 0.0 {
                    return Err(Error::InvalidArgument(format!("L2 margin must be > 0, got {}", self.margin)));
                }
            }
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            margin: 1.0,
            metric: Metric::Acd,
            epsilon: 1e-7,
        }
    }
}

/// Soft Dice loss over all pixels of the batch:
/// `1 - 2*sum(p*g) / (sum(p^2) + sum(g^2) + eps)`.
///
/// Returns the loss and its gradient with respect to `probs`.
pub fn dice_loss<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<T>, eps: T) -> Result<(T, Tensor<T>)> {
    if !probs.same_shape(labels) {
        return Err(Error::shape("dice_loss", probs.dims_str(), labels.dims_str()));
    }
    let zero = T::zero();
    let one = T::one();
    for &g in labels.data() {
        if g != zero && g != one {
            return Err(Error::InvalidArgument(format!(
                "dice_loss labels must be binary, found {:?}",
                g.to_f64_lossy()
            )));
        }
    }
    let mut inter = zero;
    let mut p_sq = zero;
    let mut g_sq = zero;
    for (&p, &g) in probs.data().iter().zip(labels.data()) {
        inter = inter + p * g;
        p_sq = p_sq + p * p;
        g_sq = g_sq + g * g;
    }
    let denom = p_sq + g_sq + eps;
    let loss = one - (inter + inter) / denom;
    let two = one + one;
    let four = two + two;
    let denom_sq = denom * denom;
    let mut grad = probs.zeros_like();
    for ((d, &p), &g) in grad.data_mut().iter_mut().zip(probs.data()).zip(labels.data()) {
        *d = (four * inter * p - two * g * denom) / denom_sq;
    }
    Ok((loss, grad))
}

/// Euclidean distance between two equal-length vectors.
pub fn distance_l2<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    check_lengths(a, b)?;
    let mut sq = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        sq = sq + d * d;
    }
    Ok(sq.sqrt())
}

/// Euclidean distance plus gradients w.r.t. both arguments.
/// At coincident points the gradient is defined as zero.
pub fn distance_l2_grad<T: Scalar>(a: &[T], b: &[T]) -> Result<(T, Vec<T>, Vec<T>)> {
    let d = distance_l2(a, b)?;
    let zero = T::zero();
    if d == zero {
        return Ok((zero, vec![zero; a.len()], vec![zero; a.len()]));
    }
    let inv = T::one() / d;
    let ga: Vec<T> = a.iter().zip(b).map(|(&x, &y)| (x - y) * inv).collect();
    let gb: Vec<T> = ga.iter().map(|&g| -g).collect();
    Ok((d, ga, gb))
}

/// Angular cosine distance `1 - (a.b) / (|a||b| + eps)`.
///
/// For non-negative vectors (post-relu features) the value lies in [0, 1];
/// a zero vector yields a distance of ~1 through the epsilon guard.
pub fn distance_acd<T: Scalar>(a: &[T], b: &[T], eps: T) -> Result<T> {
    check_lengths(a, b)?;
    let (s, na, nb) = dot_and_norms(a, b);
    Ok(T::one() - s / (na * nb + eps))
}

/// Angular cosine distance plus gradients w.r.t. both arguments.
/// Gradients of the norm terms are zeroed for a zero vector.
pub fn distance_acd_grad<T: Scalar>(a: &[T], b: &[T], eps: T) -> Result<(T, Vec<T>, Vec<T>)> {
    check_lengths(a, b)?;
    let zero = T::zero();
    let (s, na, nb) = dot_and_norms(a, b);
    let q = na * nb + eps;
    let d = T::one() - s / q;
    let q_sq = q * q;
    // d(d)/da_k = -b_k / q + s * nb * a_k / (na * q^2)
    let a_coeff = if na > zero { s * nb / (na * q_sq) } else { zero };
    let b_coeff = if nb > zero { s * na / (nb * q_sq) } else { zero };
    let inv_q = T::one() / q;
    let ga: Vec<T> = a.iter().zip(b).map(|(&x, &y)| a_coeff * x - y * inv_q).collect();
    let gb: Vec<T> = a.iter().zip(b).map(|(&x, &y)| b_coeff * y - x * inv_q).collect();
    Ok((d, ga, gb))
}

fn dot_and_norms<T: Scalar>(a: &[T], b: &[T]) -> (T, T, T) {
    let mut s = T::zero();
    let mut aa = T::zero();
    let mut bb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s = s + x * y;
        aa = aa + x * x;
        bb = bb + y * y;
    }
    (s, aa.sqrt(), bb.sqrt())
}

fn check_lengths<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape("distance", format!("length {}", a.len()), format!("length {}", b.len())));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("distance of empty vectors".into()));
    }
    Ok(())
}

/// Pairwise embedding loss over sampled feature vectors.
///
/// Sums over unordered pairs i < j (i ascending, then j), skipping i = j:
/// similar pairs (`a_ij = 1`) contribute their distance, dissimilar pairs
/// contribute the hinge `max(0, margin - d)`. Returns the loss and the
/// gradient for each sampled vector; gradients flow only into the samples.
pub fn embedding_loss<T: Scalar>(
    samples: &[EmbeddingSample<T>],
    adjacency: &Adjacency,
    config: &LossConfig,
) -> Result<(T, Vec<Vec<T>>)> {
    config.validate()?;
    let n = samples.len();
    if adjacency.n() != n {
        return Err(Error::shape(
            "embedding_loss adjacency",
            format!("{n}x{n}"),
            format!("{0}x{0}", adjacency.n()),
        ));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("embedding_loss on empty sample list".into()));
    }
    let dim = samples[0].vector.len();
    for s in samples {
        if s.vector.len() != dim {
            return Err(Error::shape("embedding_loss vectors", format!("length {dim}"), format!("length {}", s.vector.len())));
        }
    }
    let eps = T::from_f64(config.epsilon);
    let margin = T::from_f64(config.margin);
    let zero = T::zero();
    let mut loss = zero;
    let mut grads = vec![vec![zero; dim]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let (d, ga, gb) = match config.metric {
                Metric::L2 => distance_l2_grad(&samples[i].vector, &samples[j].vector)?,
                Metric::Acd => distance_acd_grad(&samples[i].vector, &samples[j].vector, eps)?,
            };
            if adjacency.similar(i, j) {
                loss = loss + d;
                axpy(&mut grads[i], &ga, T::one());
                axpy(&mut grads[j], &gb, T::one());
            } else {
                let hinge = margin - d;
                if hinge > zero {
                    loss = loss + hinge;
                    axpy(&mut grads[i], &ga, -T::one());
                    axpy(&mut grads[j], &gb, -T::one());
                }
            }
        }
    }
    Ok((loss, grads))
}

fn axpy<T: Scalar>(acc: &mut [T], x: &[T], k: T) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a = *a + k * v;
    }
}

/// Combined objective: primary loss plus the weighted embedding terms.
pub fn total_loss<T: Scalar>(primary: T, embed_terms: &[(f64, T)]) -> Result<T> {
    let mut total = primary;
    for &(lambda, le) in embed_terms {
        if lambda < 0.0 {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
        }
        total = total + T::from_f64(lambda) * le;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::Position;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS32: f32 = 1e-7;

    fn sample<T: Scalar>(vector: Vec<T>, label: u8) -> EmbeddingSample<T> {
        EmbeddingSample {
            position: Position { batch: 0, row: 0, col: 0 },
            vector,
            prior_label: label,
        }
    }

    #[test]
    fn dice_perfect_overlap_is_near_zero() {
        let mut g = Tensor::<f32>::zeros(4, 4, 1, 1);
        g.set(1, 1, 0, 0, 1.0);
        g.set(2, 2, 0, 0, 1.0);
        let (loss, _) = dice_loss(&g.clone(), &g, EPS32).unwrap();
        assert!(loss.abs() < 1e-6, "{loss}");
    }

    #[test]
    fn dice_disjoint_is_one() {
        let mut g = Tensor::<f32>::zeros(2, 2, 1, 1);
        g.set(0, 0, 0, 0, 1.0);
        let p = g.map(|v| 1.0 - v);
        let (loss, _) = dice_loss(&p, &g, EPS32).unwrap();
        assert!((loss - 1.0).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn dice_hand_evaluated_formula() {
        // probs [0.5, 0.5], labels [1, 0] -> 1 - 1/(1.5+eps) = 1/3.
        let p = Tensor::<f64>::from_vec(1, 2, 1, 1, vec![0.5, 0.5]).unwrap();
        let g = Tensor::<f64>::from_vec(1, 2, 1, 1, vec![1.0, 0.0]).unwrap();
        let (loss, _) = dice_loss(&p, &g, 1e-12).unwrap();
        assert!((loss - 1.0 / 3.0).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn dice_rejects_shape_mismatch_and_nonbinary_labels() {
        let p = Tensor::<f32>::zeros(2, 2, 1, 1);
        let g = Tensor::<f32>::zeros(2, 3, 1, 1);
        assert!(dice_loss(&p, &g, EPS32).is_err());
        let g = Tensor::<f32>::filled(2, 2, 1, 1, 0.5);
        assert!(dice_loss(&p, &g, EPS32).is_err());
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut p = Tensor::<f64>::zeros(3, 3, 1, 2);
            for v in p.data_mut() {
                *v = rng.random_range(0.05..0.95);
            }
            let mut g = Tensor::<f64>::zeros(3, 3, 1, 2);
            for v in g.data_mut() {
                *v = if rng.random_range(0.0..1.0) < 0.3 { 1.0 } else { 0.0 };
            }
            let (_, grad) = dice_loss(&p, &g, 1e-7).unwrap();
            let h = 1e-6;
            for i in 0..p.len() {
                let mut pp = p.clone();
                pp.data_mut()[i] += h;
                let (up, _) = dice_loss(&pp, &g, 1e-7).unwrap();
                pp.data_mut()[i] -= 2.0 * h;
                let (down, _) = dice_loss(&pp, &g, 1e-7).unwrap();
                let num = (up - down) / (2.0 * h);
                let got = grad.data()[i];
                let rel = (got - num).abs() / got.abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-5, "i={i} analytic {got} numeric {num}");
            }
        }
    }

    #[test]
    fn l2_axioms_and_345() {
        assert_eq!(distance_l2(&[1.0f32, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((distance_l2(&[0.0f32, 0.0], &[3.0, 4.0]).unwrap() - 5.0).abs() < 1e-6);
        let (_, ga, gb) = distance_l2_grad(&[2.0f32, 2.0], &[2.0, 2.0]).unwrap();
        assert!(ga.iter().chain(gb.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn l2_random_matches_sqrt_sum_squares_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let a: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let oracle = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            assert!((distance_l2(&a, &b).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn acd_axioms() {
        let eps = 1e-7f64;
        assert!(distance_acd(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], eps).unwrap().abs() < 1e-6);
        // Orthogonal non-negative vectors sit exactly at distance 1.
        assert!((distance_acd(&[1.0, 0.0], &[0.0, 1.0], eps).unwrap() - 1.0).abs() < 1e-12);
        // Cosine oracle: d([1,1],[1,0]) = 1 - 1/sqrt(2).
        let d = distance_acd(&[1.0, 1.0], &[1.0, 0.0], eps).unwrap();
        assert!((d - (1.0 - 1.0 / 2.0f64.sqrt())).abs() < 1e-6, "{d}");
    }

    #[test]
    fn acd_zero_vector_goes_to_one() {
        let d = distance_acd(&[0.0f32, 0.0], &[1.0, 2.0], EPS32).unwrap();
        assert!((d - 1.0).abs() < 1e-5, "{d}");
    }

    #[test]
    fn acd_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let a: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..2.0)).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..2.0)).collect();
            let alpha: f64 = rng.random_range(0.1..10.0);
            let beta: f64 = rng.random_range(0.1..10.0);
            let sa: Vec<f64> = a.iter().map(|v| v * alpha).collect();
            let sb: Vec<f64> = b.iter().map(|v| v * beta).collect();
            let d0 = distance_acd(&a, &b, 1e-12).unwrap();
            let d1 = distance_acd(&sa, &sb, 1e-12).unwrap();
            assert!((d0 - d1).abs() < 1e-6, "{d0} vs {d1}");
        }
    }

    #[test]
    fn acd_bounded_on_nonnegative_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..200 {
            let a: Vec<f32> = (0..5).map(|_| rng.random_range(0.0..3.0)).collect();
            let b: Vec<f32> = (0..5).map(|_| rng.random_range(0.0..3.0)).collect();
            let d = distance_acd(&a, &b, EPS32).unwrap();
            assert!((-1e-6..=1.0 + 1e-6).contains(&d), "{d}");
        }
    }

    #[test]
    fn distance_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let h = 1e-6;
        for _ in 0..30 {
            let a: Vec<f64> = (0..5).map(|_| rng.random_range(0.2..2.0)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.random_range(0.2..2.0)).collect();
            for metric in [Metric::L2, Metric::Acd] {
                let eval = |a: &[f64], b: &[f64]| match metric {
                    Metric::L2 => distance_l2(a, b).unwrap(),
                    Metric::Acd => distance_acd(a, b, 1e-9).unwrap(),
                };
                let (_, ga, gb) = match metric {
                    Metric::L2 => distance_l2_grad(&a, &b).unwrap(),
                    Metric::Acd => distance_acd_grad(&a, &b, 1e-9).unwrap(),
                };
                for k in 0..a.len() {
                    let mut ap = a.clone();
                    ap[k] += h;
                    let up = eval(&ap, &b);
                    ap[k] -= 2.0 * h;
                    let down = eval(&ap, &b);
                    let num = (up - down) / (2.0 * h);
                    let rel = (ga[k] - num).abs() / ga[k].abs().max(num.abs()).max(1e-6);
                    assert!(rel < 1e-5, "{metric:?} a[{k}] analytic {} numeric {num}", ga[k]);

                    let mut bp = b.clone();
                    bp[k] += h;
                    let up = eval(&a, &bp);
                    bp[k] -= 2.0 * h;
                    let down = eval(&a, &bp);
                    let num = (up - down) / (2.0 * h);
                    let rel = (gb[k] - num).abs() / gb[k].abs().max(num.abs()).max(1e-6);
                    assert!(rel < 1e-5, "{metric:?} b[{k}] analytic {} numeric {num}", gb[k]);
                }
            }
        }
    }

    fn acd_config() -> LossConfig {
        LossConfig {
            lambda: 1.0,
            margin: 1.0,
            metric: Metric::Acd,
            epsilon: 1e-9,
        }
    }

    #[test]
    fn embedding_identical_similar_pair_is_zero() {
        let samples = vec![sample(vec![1.0f64, 2.0], 1), sample(vec![1.0, 2.0], 1)];
        let adj = Adjacency::from_labels(&[1, 1]);
        let (loss, _) = embedding_loss(&samples, &adj, &acd_config()).unwrap();
        assert!(loss.abs() < 1e-9, "{loss}");
    }

    #[test]
    fn embedding_orthogonal_dissimilar_pair_meets_hinge() {
        let samples = vec![sample(vec![1.0f64, 0.0], 1), sample(vec![0.0, 1.0], 0)];
        let adj = Adjacency::from_labels(&[1, 0]);
        let (loss, _) = embedding_loss(&samples, &adj, &acd_config()).unwrap();
        assert!(loss.abs() < 1e-6, "{loss}");
    }

    #[test]
    fn embedding_three_sample_hand_oracle() {
        // h1=[1,0] h2=[1,0] h3=[0,1], labels (1,1,0): total 0.
        let adj = Adjacency::from_labels(&[1, 1, 0]);
        let samples = vec![
            sample(vec![1.0f64, 0.0], 1),
            sample(vec![1.0, 0.0], 1),
            sample(vec![0.0, 1.0], 0),
        ];
        let (loss, _) = embedding_loss(&samples, &adj, &acd_config()).unwrap();
        assert!(loss.abs() < 1e-6, "{loss}");

        // Change h2 to [1,1]: (1,2) costs 1-1/sqrt(2), (2,3) hinge costs 1/sqrt(2); total 1.
        let samples = vec![
            sample(vec![1.0f64, 0.0], 1),
            sample(vec![1.0, 1.0], 1),
            sample(vec![0.0, 1.0], 0),
        ];
        let (loss, _) = embedding_loss(&samples, &adj, &acd_config()).unwrap();
        assert!((loss - 1.0).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn embedding_loss_rejects_wrong_adjacency_size() {
        let samples = vec![sample(vec![1.0f64, 0.0], 1), sample(vec![0.0, 1.0], 0)];
        let adj = Adjacency::from_labels(&[1, 0, 1]);
        assert!(embedding_loss(&samples, &adj, &acd_config()).is_err());
    }

    /// Brute-force oracle: independently recomputes the pairwise sum with
    /// explicitly written distance formulas, in the same i<j order.
    fn brute_force_pairwise(samples: &[EmbeddingSample<f32>], adj: &Adjacency, cfg: &LossConfig) -> f32 {
        let n = samples.len();
        let mut total = 0.0f32;
        for i in 0..n {
            for j in (i + 1)..n {
                let a = &samples[i].vector;
                let b = &samples[j].vector;
                let d = match cfg.metric {
                    Metric::L2 => {
                        let mut sq = 0.0f32;
                        for k in 0..a.len() {
                            let diff = a[k] - b[k];
                            sq = sq + diff * diff;
                        }
                        sq.sqrt()
                    }
                    Metric::Acd => {
                        let mut dot = 0.0f32;
                        let mut na = 0.0f32;
                        let mut nb = 0.0f32;
                        for k in 0..a.len() {
                            dot = dot + a[k] * b[k];
                            na = na + a[k] * a[k];
                            nb = nb + b[k] * b[k];
                        }
                        1.0 - dot / (na.sqrt() * nb.sqrt() + cfg.epsilon as f32)
                    }
                };
                if adj.similar(i, j) {
                    total = total + d;
                } else {
                    let hinge = cfg.margin as f32 - d;
                    if hinge > 0.0 {
                        total = total + hinge;
                    }
                }
            }
        }
        total
    }

    #[test]
    fn embedding_loss_equals_brute_force_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for trial in 0..100 {
            let n = rng.random_range(2..=10);
            let dim = rng.random_range(1..=6);
            let samples: Vec<EmbeddingSample<f32>> = (0..n)
                .map(|_| {
                    let label = rng.random_range(0..2u8);
                    let v: Vec<f32> = (0..dim).map(|_| rng.random_range(0.0..2.0f32)).collect();
                    sample(v, label)
                })
                .collect();
            let adj = build_adjacency_from(&samples);
            let cfg = if trial % 2 == 0 {
                acd_config()
            } else {
                LossConfig {
                    lambda: 0.01,
                    margin: 2.5,
                    metric: Metric::L2,
                    epsilon: 1e-9,
                }
            };
            let (loss, _) = embedding_loss(&samples, &adj, &cfg).unwrap();
            let oracle = brute_force_pairwise(&samples, &adj, &cfg);
            assert_eq!(loss.to_bits(), oracle.to_bits(), "trial {trial}: {loss} vs {oracle}");
        }
    }

    fn build_adjacency_from(samples: &[EmbeddingSample<f32>]) -> Adjacency {
        crate::sampler::build_adjacency(samples).unwrap()
    }

    #[test]
    fn embedding_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-6;
        for trial in 0..20 {
            let n = rng.random_range(2..=8);
            let dim = 4;
            let mut samples: Vec<EmbeddingSample<f64>> = (0..n)
                .map(|_| {
                    let label = rng.random_range(0..2u8);
                    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(0.2..2.0)).collect();
                    sample(v, label)
                })
                .collect();
            let adj = crate::sampler::build_adjacency(&samples).unwrap();
            let cfg = if trial % 2 == 0 {
                acd_config()
            } else {
                LossConfig {
                    lambda: 1.0,
                    margin: 3.0,
                    metric: Metric::L2,
                    epsilon: 1e-9,
                }
            };
            let (_, grads) = embedding_loss(&samples, &adj, &cfg).unwrap();
            for i in 0..n {
                for k in 0..dim {
                    let orig = samples[i].vector[k];
                    samples[i].vector[k] = orig + h;
                    let (up, _) = embedding_loss(&samples, &adj, &cfg).unwrap();
                    samples[i].vector[k] = orig - h;
                    let (down, _) = embedding_loss(&samples, &adj, &cfg).unwrap();
                    samples[i].vector[k] = orig;
                    let num = (up - down) / (2.0 * h);
                    let got = grads[i][k];
                    let rel = (got - num).abs() / got.abs().max(num.abs()).max(1e-6);
                    assert!(rel < 1e-5, "trial {trial} sample {i} dim {k}: analytic {got} numeric {num}");
                }
            }
        }
    }

    #[test]
    fn embedding_loss_symmetric_under_joint_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let samples: Vec<EmbeddingSample<f64>> = (0..6)
            .map(|_| {
                let label = rng.random_range(0..2u8);
                let v: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..2.0)).collect();
                sample(v, label)
            })
            .collect();
        let adj = crate::sampler::build_adjacency(&samples).unwrap();
        let (loss, _) = embedding_loss(&samples, &adj, &acd_config()).unwrap();
        // Reverse the sample order (and implicitly the rows/cols of A).
        let rev: Vec<_> = samples.iter().rev().cloned().collect();
        let adj_rev = crate::sampler::build_adjacency(&rev).unwrap();
        let (loss_rev, _) = embedding_loss(&rev, &adj_rev, &acd_config()).unwrap();
        assert!((loss - loss_rev).abs() < 1e-9, "{loss} vs {loss_rev}");
    }

    #[test]
    fn hinge_term_decreases_as_dissimilar_pair_separates() {
        let adj = Adjacency::from_labels(&[1, 0]);
        let cfg = acd_config();
        let mut prev = f64::INFINITY;
        // Rotate the second vector from nearly parallel to orthogonal.
        for step in 1..8 {
            let theta = std::f64::consts::FRAC_PI_2 * step as f64 / 8.0;
            let samples = vec![
                sample(vec![1.0f64, 0.0], 1),
                sample(vec![theta.cos(), theta.sin()], 0),
            ];
            let (loss, _) = embedding_loss(&samples, &adj, &cfg).unwrap();
            assert!(loss < prev, "step {step}: {loss} !< {prev}");
            prev = loss;
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(0.4f64, &[]).unwrap(), 0.4);
        assert_eq!(total_loss(0.4f64, &[(0.0, 123.0)]).unwrap(), 0.4);
        let t = total_loss(0.4f64, &[(0.01, 10.0)]).unwrap();
        assert!((t - 0.5).abs() < 1e-12);
    }

    #[test]
    fn loss_config_margin_rules() {
        assert!(LossConfig { lambda: 1.0, margin: 1.5, metric: Metric::Acd, epsilon: 1e-7 }.validate().is_err());
        assert!(LossConfig { lambda: 1.0, margin: 0.5, metric: Metric::Acd, epsilon: 1e-7 }.validate().is_ok());
        assert!(LossConfig { lambda: 1.0, margin: 1000.0, metric: Metric::L2, epsilon: 1e-7 }.validate().is_ok());
        assert!(LossConfig { lambda: -0.1, margin: 1.0, metric: Metric::Acd, epsilon: 1e-7 }.validate().is_err());
    }
}
