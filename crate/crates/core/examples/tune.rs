//! Scratch harness-dynamics probe (dev tool, not part of the test suite).
//!
//! Prints lower-bound convergence and semi-supervised deltas for candidate
//! learning rates and embedding weights on the default synthetic domains.

use std::time::Instant;

use rfeseg::data::{build_domain, default_domain_specs};
use rfeseg::harness::{
    evaluate, finetune_semisupervised, mean_f_score, train_lower_bound, ExperimentConfig, TargetSet,
};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode = args.first().map(String::as_str).unwrap_or("lower");

    let cfg = ExperimentConfig {
        lr: args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.05),
        lambda_acd: args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.0),
        ..ExperimentConfig::default()
    };
    eprintln!("mode {mode} lr {} lambda_acd {}", cfg.lr, cfg.lambda_acd);

    let specs = default_domain_specs();
    let t0 = Instant::now();
    let source = build_domain(&specs[0], cfg.n_train_images, cfg.n_test_images, cfg.image_size, cfg.patch_size, cfg.patches_per_image).unwrap();
    let target = build_domain(&specs[1], cfg.n_train_images, cfg.n_test_images, cfg.image_size, cfg.patch_size, cfg.patches_per_image).unwrap();
    eprintln!("data: {:?} ({} source patches)", t0.elapsed(), source.dataset.len());

    let t0 = Instant::now();
    let run = train_lower_bound(&cfg, &source.dataset, 0).unwrap();
    let train_time = t0.elapsed();
    for e in [1, 5, 10, 20, 35, 50] {
        if e <= run.epoch_loss.len() {
            eprintln!("epoch {e}: loss {:.4}", run.epoch_loss[e - 1]);
        }
    }
    let f_a = mean_f_score(&evaluate(run.final_model(), &source.test, 0.5).unwrap());
    let f_b = mean_f_score(&evaluate(run.final_model(), &target.test, 0.5).unwrap());
    let branch = run.at_epoch(cfg.branch_epoch).unwrap();
    let f_a35 = mean_f_score(&evaluate(branch, &source.test, 0.5).unwrap());
    let f_b35 = mean_f_score(&evaluate(branch, &target.test, 0.5).unwrap());
    eprintln!("lower bound: {train_time:?} for 50 epochs; F(A) = {f_a:.3} (ep35 {f_a35:.3}), F(B) = {f_b:.3} (ep35 {f_b35:.3})");

    if mode == "ss" {
        let target_set = TargetSet::perfect(&target.dataset);
        for n_e in [20usize, 200, 2000] {
            let cell = ExperimentConfig { n_e, ..cfg.clone() };
            let t0 = Instant::now();
            let model = finetune_semisupervised(&cell, branch, &source.dataset, &target_set, 0).unwrap();
            let f_tgt = mean_f_score(&evaluate(&model, &target.test, 0.5).unwrap());
            let f_src = mean_f_score(&evaluate(&model, &source.test, 0.5).unwrap());
            eprintln!(
                "ss acd 80/20 perfect n_e {n_e}: F(B) = {f_tgt:.3} (delta {:+.3}), F(A) = {f_src:.3}, {:?}",
                f_tgt - f_b,
                t0.elapsed()
            );
        }
    }
}
