//! The proof-of-concept grid (sampling strategies x distance metrics x
//! embedding counts) and the sampling-fidelity diagnostic.

use std::collections::HashSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{DomainBundle, DomainDataset};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::eval::{evaluate, mean_f_score, read_csv, write_csv, MetricsRow};
use crate::harness::train::{finetune_semisupervised, TargetSet};
use crate::losses::Metric;
use crate::model::Model;
use crate::sampler::{gather, js_divergence, sample_positions, SamplingStrategy, StrategyKind};

/// One grid cell of the proof-of-concept sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepCell {
    pub strategy: StrategyKind,
    pub metric: Metric,
    pub n_e: usize,
    pub seed: u64,
}

/// The full grid: 3 strategies x 2 metrics x `sweep_n_e` x seeds.
pub fn sweep_cells(cfg: &ExperimentConfig) -> Vec<SweepCell> {
    let strategies = [StrategyKind::FiftyFifty, StrategyKind::DistributionAware, StrategyKind::EightyTwenty];
    let metrics = [Metric::L2, Metric::Acd];
    let mut cells = Vec::new();
    for &strategy in &strategies {
        for &metric in &metrics {
            for &n_e in &cfg.sweep_n_e {
                for &seed in &cfg.seeds {
                    cells.push(SweepCell {
                        strategy,
                        metric,
                        n_e,
                        seed,
                    });
                }
            }
        }
    }
    cells
}

pub fn sweep_model_id(metric: Metric, strategy: StrategyKind, n_e: usize) -> String {
    format!("ss_perfect_{}_{}_ne{}", metric.as_str(), strategy.as_str(), n_e)
}

/// Branch checkpoint for one seed (the lower bound at `branch_epoch`).
pub struct SeedFixture {
    pub seed: u64,
    pub branch: Model,
}

/// Runs every grid cell that is not already present in `csv_path` (cells are
/// keyed by model id and seed; existing rows are kept untouched), evaluates
/// on the target's held-out test slices, and writes the merged CSV
/// atomically in a deterministic order.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    source: &DomainDataset,
    target: &DomainBundle,
    fixtures: &[SeedFixture],
    csv_path: &Path,
) -> Result<Vec<MetricsRow>> {
    let existing: Vec<MetricsRow> = if csv_path.exists() { read_csv(csv_path)? } else { Vec::new() };
    let done: HashSet<(String, u64)> = existing.iter().map(|r| (r.model_id.clone(), r.seed)).collect();
    let todo: Vec<SweepCell> = sweep_cells(cfg)
        .into_iter()
        .filter(|c| !done.contains(&(sweep_model_id(c.metric, c.strategy, c.n_e), c.seed)))
        .collect();

    let computed: Vec<MetricsRow> = todo
        .par_iter()
        .map(|cell| {
            let model_id = sweep_model_id(cell.metric, cell.strategy, cell.n_e);
            match run_cell(cfg, source, target, fixtures, cell) {
                Ok(f) => MetricsRow::ok(model_id, target.spec.id.clone(), cell.seed, cfg.epochs_lower, f),
                Err(e) => MetricsRow {
                    model_id,
                    domain: target.spec.id.clone(),
                    seed: cell.seed,
                    epoch: cfg.epochs_lower,
                    f_score: f64::NAN,
                    status: format!("failed: {e}").replace(',', ";"),
                },
            }
        })
        .collect();

    let mut rows = existing;
    rows.extend(computed);
    rows.sort_by(|a, b| (&a.model_id, a.seed, &a.domain).cmp(&(&b.model_id, b.seed, &b.domain)));
    write_csv(csv_path, &rows)?;
    Ok(rows)
}

fn run_cell(
    cfg: &ExperimentConfig,
    source: &DomainDataset,
    target: &DomainBundle,
    fixtures: &[SeedFixture],
    cell: &SweepCell,
) -> Result<f64> {
    let fixture = fixtures
        .iter()
        .find(|f| f.seed == cell.seed)
        .ok_or_else(|| Error::InvalidArgument(format!("no branch checkpoint for seed {}", cell.seed)))?;
    let cell_cfg = ExperimentConfig {
        metric: cell.metric,
        strategy: cell.strategy,
        n_e: cell.n_e,
        ..cfg.clone()
    };
    let target_set = TargetSet::perfect(&target.dataset);
    let model = finetune_semisupervised(&cell_cfg, &fixture.branch, source, &target_set, cell.seed)?;
    let scores = evaluate(&model, &target.test, cfg.eval_threshold)?;
    Ok(mean_f_score(&scores))
}

/// One sampling-fidelity measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct JsdRow {
    pub n_e: usize,
    pub seed: u64,
    pub jsd: f64,
}

const STREAM_JSD: u64 = 8;

/// Jensen-Shannon divergence between sampled embeddings and the full
/// embedding population of one training batch, for every `sweep_n_e` and
/// `jsd_seeds` diagnostic seeds. Sampling is distribution-aware so the
/// sampled class mix matches the population.
pub fn jsd_diag(cfg: &ExperimentConfig, model: &Model, source: &DomainDataset) -> Result<Vec<JsdRow>> {
    if source.train_idx.len() < cfg.batch_size {
        return Err(Error::InvalidArgument(format!(
            "need at least {} training patches for the diagnostic batch",
            cfg.batch_size
        )));
    }
    let idxs: Vec<usize> = source.train_idx[..cfg.batch_size].to_vec();
    let (batch, labels) = source.batch(&idxs)?;
    let out = model.forward(&batch)?;
    let embed = out.embed;
    let (h, w, c, n) = embed.dims();
    let mut population = Vec::with_capacity(h * w * n);
    for b in 0..n {
        for r in 0..h {
            for col in 0..w {
                population.push((0..c).map(|ch| embed.get(r, col, ch, b)).collect::<Vec<f32>>());
            }
        }
    }
    let mut rows = Vec::new();
    for &n_e in &cfg.sweep_n_e {
        let strategy = SamplingStrategy::new(StrategyKind::DistributionAware, n_e)?;
        for seed in 0..cfg.jsd_seeds as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_JSD, n_e as u64]));
            let positions = sample_positions(&labels, &strategy, &mut rng)?;
            let samples = gather(&embed, &labels, &positions)?;
            let vectors: Vec<Vec<f32>> = samples.into_iter().map(|s| s.vector).collect();
            let jsd = js_divergence(&vectors, &population, cfg.jsd_bins)?;
            rows.push(JsdRow { n_e, seed, jsd });
        }
    }
    Ok(rows)
}

pub const JSD_CSV_HEADER: &str = "n_e,seed,jsd";

pub fn write_jsd_csv(path: impl AsRef<Path>, rows: &[JsdRow]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from(JSD_CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!("{},{},{}\n", r.n_e, r.seed, r.jsd));
    }
    let tmp = path.with_extension("csv.tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Mean JSD per `n_e`, ascending in `n_e`.
pub fn mean_jsd_by_ne(rows: &[JsdRow]) -> Vec<(usize, f64)> {
    let mut nes: Vec<usize> = rows.iter().map(|r| r.n_e).collect();
    nes.sort_unstable();
    nes.dedup();
    nes.into_iter()
        .map(|ne| {
            let vals: Vec<f64> = rows.iter().filter(|r| r.n_e == ne).map(|r| r.jsd).collect();
            (ne, vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect()
}
