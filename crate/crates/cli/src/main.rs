//! `rfeseg` — experiment runner.
//!
//! Subcommands cover the full protocol: synthetic data generation, lower
//! and upper bound baselines, noisy-prior construction, semi-supervised
//! fine-tuning, the proof-of-concept sweep, evaluation and the
//! sampling-fidelity diagnostic. All knobs live in a line-oriented
//! `key = value` config file (see `configs/` and the README); every
//! subcommand accepts `--config <path>`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rfeseg::data::{self, DomainBundle, DomainImages};
use rfeseg::harness::{
    self, jsd_diag, run_sweep, train_lower_bound, train_upper_bound, ExperimentConfig, MetricsRow, PriorKind,
    SeedFixture, TargetSet,
};
use rfeseg::model::Model;
use rfeseg::{Error, Result};

#[derive(Parser)]
#[command(name = "rfeseg", version, about = "Semi-supervised FCN training via random feature embedding")]
struct Cli {
    /// Experiment config file (line-oriented `key = value`; defaults apply
    /// when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the four synthetic domains under `data_dir`.
    GenData,
    /// Train the lower bound model on the source domain for every seed,
    /// checkpointing each epoch.
    TrainLower,
    /// Fine-tune the branch checkpoint on mixed labeled source+target data.
    TrainUpper {
        #[arg(long)]
        target: Option<String>,
    },
    /// Build the template-matching prior for the target domain.
    MakePrior {
        #[arg(long)]
        target: Option<String>,
    },
    /// Semi-supervised fine-tuning from the branch checkpoint.
    Finetune {
        #[arg(long)]
        target: Option<String>,
        /// Prior kind: `perfect` or `ncc`.
        #[arg(long, default_value = "perfect")]
        prior: String,
        /// Override the configured number of sampled embeddings.
        #[arg(long)]
        n_e: Option<usize>,
    },
    /// Run the strategy x metric x n_e grid with the perfect prior and
    /// write one CSV row per cell and seed.
    Sweep,
    /// Evaluate a checkpoint on a domain's held-out test slices (or its
    /// validation patches with --patches).
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long)]
        patches: bool,
        /// Write rows to this CSV instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sampling-fidelity diagnostic: JSD between sampled and full feature
    /// distributions across the configured n_e grid.
    JsdDiag {
        #[arg(long)]
        model: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprintln!("error: {}", first_line(&e.to_string()));
            return ExitCode::FAILURE;
        }
        Err(e) => {
            // --help / --version land here.
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", first_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}

fn first_line(s: &str) -> String {
    s.lines().next().unwrap_or("unknown error").to_string()
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            ExperimentConfig::parse(&text)
        }
        None => Ok(ExperimentConfig::default()),
    }
}

fn bundle_dir(cfg: &ExperimentConfig, id: &str) -> PathBuf {
    cfg.data_dir.join(format!("domain_{id}"))
}

fn prior_dir(cfg: &ExperimentConfig, id: &str) -> PathBuf {
    bundle_dir(cfg, id).join("prior")
}

fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.out_dir.join(format!("seed{seed}"))
}

fn lower_ckpt(cfg: &ExperimentConfig, seed: u64, epoch: usize) -> PathBuf {
    seed_dir(cfg, seed).join("lower").join(format!("epoch_{epoch:02}.ckpt"))
}

fn load_domain(cfg: &ExperimentConfig, id: &str) -> Result<DomainBundle> {
    let dir = bundle_dir(cfg, id);
    if !dir.exists() {
        return Err(Error::Config(format!(
            "no dataset for domain {id} at {} (run `rfeseg gen-data` first)",
            dir.display()
        )));
    }
    data::load_bundle(dir)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.config)?;
    match cli.command {
        Command::GenData => gen_data(&cfg),
        Command::TrainLower => train_lower(&cfg),
        Command::TrainUpper { target } => train_upper(&cfg, target),
        Command::MakePrior { target } => make_prior(&cfg, target),
        Command::Finetune { target, prior, n_e } => finetune(&cfg, target, &prior, n_e),
        Command::Sweep => sweep(&cfg),
        Command::Eval {
            model,
            domain,
            patches,
            out,
        } => eval(&cfg, &model, &domain, patches, out),
        Command::JsdDiag { model } => jsd(&cfg, &model),
    }
}

fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    for spec in data::default_domain_specs() {
        let bundle = data::build_domain(
            &spec,
            cfg.n_train_images,
            cfg.n_test_images,
            cfg.image_size,
            cfg.patch_size,
            cfg.patches_per_image,
        )?;
        let dir = bundle_dir(cfg, &spec.id);
        data::save_bundle(&dir, &bundle)?;
        if !bundle.dataset.skipped_images.is_empty() {
            eprintln!(
                "warning: domain {}: skipped {} lesion-free image(s) while cropping",
                spec.id,
                bundle.dataset.skipped_images.len()
            );
        }
        println!(
            "domain {}: {} train images, {} test slices, {} patches ({} train / {} val) -> {}",
            spec.id,
            bundle.train.count(),
            bundle.test.count(),
            bundle.dataset.len(),
            bundle.dataset.train_idx.len(),
            bundle.dataset.val_idx.len(),
            dir.display()
        );
    }
    Ok(())
}

fn train_lower(cfg: &ExperimentConfig) -> Result<()> {
    let source = load_domain(cfg, &cfg.source)?;
    for &seed in &cfg.seeds {
        let run = train_lower_bound(cfg, &source.dataset, seed)?;
        let dir = seed_dir(cfg, seed).join("lower");
        fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        for (i, model) in run.checkpoints.iter().enumerate() {
            model.save(lower_ckpt(cfg, seed, i + 1))?;
        }
        let log: String = run
            .epoch_loss
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{} {}\n", i + 1, l))
            .collect();
        let log_path = dir.join("loss.txt");
        fs::write(&log_path, log).map_err(|e| Error::Io {
            path: log_path,
            source: e,
        })?;
        println!(
            "seed {seed}: lower bound trained for {} epochs (loss {:.4} -> {:.4})",
            cfg.epochs_lower,
            run.epoch_loss.first().unwrap(),
            run.epoch_loss.last().unwrap()
        );
    }
    Ok(())
}

fn branch_model(cfg: &ExperimentConfig, seed: u64) -> Result<Model> {
    let path = lower_ckpt(cfg, seed, cfg.branch_epoch);
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing branch checkpoint {} (run `rfeseg train-lower` first)",
            path.display()
        )));
    }
    Model::load(path)
}

fn train_upper(cfg: &ExperimentConfig, target: Option<String>) -> Result<()> {
    let target_id = target.unwrap_or_else(|| cfg.target.clone());
    let source = load_domain(cfg, &cfg.source)?;
    let target = load_domain(cfg, &target_id)?;
    for &seed in &cfg.seeds {
        let branch = branch_model(cfg, seed)?;
        let model = train_upper_bound(cfg, &branch, &source.dataset, &target.dataset, seed)?;
        let path = seed_dir(cfg, seed).join(format!("upper_{target_id}.ckpt"));
        model.save(&path)?;
        println!("seed {seed}: upper bound for target {target_id} -> {}", path.display());
    }
    Ok(())
}

fn make_prior(cfg: &ExperimentConfig, target: Option<String>) -> Result<()> {
    let target_id = target.unwrap_or_else(|| cfg.target.clone());
    let bundle = load_domain(cfg, &target_id)?;
    let prior = harness::build_noisy_prior(cfg, &bundle)?;
    let dir = prior_dir(cfg, &target_id);
    harness::save_domain_prior(&dir, &prior, cfg, &target_id)?;
    println!(
        "domain {target_id}: prior from templates of train image 0 (k = {}, count = {}), threshold {:.4}, source dice {:.3}, {} usable patches -> {}",
        cfg.template_k,
        cfg.template_count,
        prior.set.threshold,
        prior.set.source_dice,
        prior.usable.len(),
        dir.display()
    );
    Ok(())
}

fn finetune(cfg: &ExperimentConfig, target: Option<String>, prior: &str, n_e: Option<usize>) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(n_e) = n_e {
        cfg.n_e = n_e;
    }
    let target_id = target.unwrap_or_else(|| cfg.target.clone());
    let prior_kind = PriorKind::parse(prior)?;
    let source = load_domain(&cfg, &cfg.source)?;
    let target = load_domain(&cfg, &target_id)?;
    let target_set = match prior_kind {
        PriorKind::Perfect => TargetSet::perfect(&target.dataset),
        PriorKind::Ncc => {
            let dir = prior_dir(&cfg, &target_id);
            if !dir.join("patch_priors.t4f").exists() {
                return Err(Error::Config(format!(
                    "no ncc prior for domain {target_id} at {} (run `rfeseg make-prior --target {target_id}` first)",
                    dir.display()
                )));
            }
            let (patch_priors, usable) = harness::load_domain_prior(&dir)?;
            TargetSet::noisy(&target.dataset, patch_priors, usable)?
        }
    };
    for &seed in &cfg.seeds {
        let branch = branch_model(&cfg, seed)?;
        let model = harness::finetune_semisupervised(&cfg, &branch, &source.dataset, &target_set, seed)?;
        let name = format!(
            "ss_{}_{}_{}_ne{}_{}.ckpt",
            prior_kind.as_str(),
            cfg.metric.as_str(),
            cfg.strategy.as_str(),
            cfg.n_e,
            target_id
        );
        let path = seed_dir(&cfg, seed).join(name);
        model.save(&path)?;
        println!("seed {seed}: semi-supervised model -> {}", path.display());
    }
    Ok(())
}

fn sweep(cfg: &ExperimentConfig) -> Result<()> {
    let source = load_domain(cfg, &cfg.source)?;
    let target = load_domain(cfg, &cfg.target)?;
    let mut fixtures = Vec::new();
    for &seed in &cfg.seeds {
        let path = lower_ckpt(cfg, seed, cfg.branch_epoch);
        let branch = if path.exists() {
            Model::load(&path)?
        } else {
            // Self-contained: train and persist the missing lower bound.
            let run = train_lower_bound(cfg, &source.dataset, seed)?;
            let dir = seed_dir(cfg, seed).join("lower");
            fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            for (i, model) in run.checkpoints.iter().enumerate() {
                model.save(lower_ckpt(cfg, seed, i + 1))?;
            }
            run.at_epoch(cfg.branch_epoch)?.clone()
        };
        fixtures.push(SeedFixture { seed, branch });
    }
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io {
        path: cfg.out_dir.clone(),
        source: e,
    })?;
    let csv = cfg.out_dir.join(format!("sweep_{}.csv", cfg.target));
    let rows = run_sweep(cfg, &source.dataset, &target, &fixtures, &csv)?;
    let ok = rows.iter().filter(|r| r.status == "ok").count();
    println!("sweep: {} rows ({} ok, {} failed) -> {}", rows.len(), ok, rows.len() - ok, csv.display());
    Ok(())
}

fn eval(cfg: &ExperimentConfig, model_path: &Path, domain: &str, patches: bool, out: Option<PathBuf>) -> Result<()> {
    let model = Model::load(model_path)?;
    let bundle = load_domain(cfg, domain)?;
    let images = if patches {
        // Validation patches as an image set.
        let idx = &bundle.dataset.val_idx;
        DomainImages {
            id: bundle.spec.id.clone(),
            images: data::gather_items(&bundle.dataset.patches, idx)?,
            labels: data::gather_items(&bundle.dataset.labels, idx)?,
        }
    } else {
        bundle.test.clone()
    };
    let scores = harness::evaluate(&model, &images, cfg.eval_threshold)?;
    let model_id = model_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let mean = harness::mean_f_score(&scores);
    let rows = vec![MetricsRow::ok(model_id, domain, 0, cfg.epochs_lower, mean)];
    match out {
        Some(path) => {
            harness::write_csv(&path, &rows)?;
            println!("mean f-score {mean:.4} over {} images -> {}", scores.len(), path.display());
        }
        None => {
            println!("{}", harness::CSV_HEADER);
            for r in &rows {
                println!("{},{},{},{},{},{}", r.model_id, r.domain, r.seed, r.epoch, r.f_score, r.status);
            }
        }
    }
    Ok(())
}

fn jsd(cfg: &ExperimentConfig, model_path: &Path) -> Result<()> {
    let model = Model::load(model_path)?;
    let source = load_domain(cfg, &cfg.source)?;
    let rows = jsd_diag(cfg, &model, &source.dataset)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io {
        path: cfg.out_dir.clone(),
        source: e,
    })?;
    let path = cfg.out_dir.join("jsd.csv");
    harness::write_jsd_csv(&path, &rows)?;
    for (n_e, mean) in harness::mean_jsd_by_ne(&rows) {
        println!("n_e {n_e}: mean jsd {mean:.4}");
    }
    println!("-> {}", path.display());
    Ok(())
}
