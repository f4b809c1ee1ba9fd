//! Scratch probe for the joint-training smoke: sweeps lambda pairs and
//! step counts, printing held-out (bpp, mse) per run.
//! Usage: rd_probe <lr> <steps> <lambda_low> <lambda_high> [batch]

use cpips_core::data;
use cpips_core::models::ArchConfig;
use cpips_core::synth;
use cpips_core::training::{self, TrainConfig};
use cpips_core::weights;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let lr: f64 = args[0].parse().unwrap();
    let steps: usize = args[1].parse().unwrap();
    let lam_low: f64 = args[2].parse().unwrap();
    let lam_high: f64 = args[3].parse().unwrap();
    let batch: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(8);

    let root = std::path::PathBuf::from("/tmp/rd_probe_data");
    let train_manifest = root.join("train/manifest.jsonl");
    let eval_manifest = root.join("eval/manifest.jsonl");
    if !train_manifest.is_file() {
        synth::gen_classification_set(&root.join("train"), 2000, 10, 32, 4001).unwrap();
        synth::gen_classification_set(&root.join("eval"), 400, 10, 32, 4002).unwrap();
    }
    let train = data::load_class_manifest(&train_manifest, 10).unwrap();
    let eval = data::load_class_manifest(&eval_manifest, 10).unwrap();

    let arch = ArchConfig {
        num_classes: 10,
        ..ArchConfig::with_scale(1, 4)
    };
    let base = TrainConfig {
        arch: arch.clone(),
        epochs_stage1: 20,
        epochs_stage2: 1000,
        batch_size: 16,
        crop_stage1: 32,
        crop_stage2: 32,
        seed: 2024,
        ..TrainConfig::default()
    };

    let pre_path = root.join("pre.cpwt");
    if !pre_path.is_file() {
        let t0 = std::time::Instant::now();
        let pre = training::pretrain_classifier(&train, &eval, &base).unwrap();
        println!(
            "pretrain: top1 {:?} in {:.0}s",
            pre.log.last().unwrap().top1_eval,
            t0.elapsed().as_secs_f64()
        );
        weights::save_file(&pre_path, &pre.store).unwrap();
    }
    let (entries, _) = weights::load_file(&pre_path).unwrap();

    let mut lambda_table = std::collections::BTreeMap::new();
    lambda_table.insert("1".to_string(), lam_low);
    lambda_table.insert("2".to_string(), lam_high);
    let cfg = TrainConfig {
        lambda_table,
        learning_rate: lr,
        batch_size: batch,
        ..base
    };
    for q in [1u8, 2] {
        let t0 = std::time::Instant::now();
        let out = training::train_joint(&train, Some(&entries), &cfg, q, Some(steps)).unwrap();
        let (bpp, mse) = training::eval_rate_distortion(&out.store, &eval, 20).unwrap();
        let totals: Vec<f64> = out.log.iter().map(|b| b.total).collect();
        let ma = training::moving_average(&totals, 50);
        println!(
            "q{q} lambda {:.4}: bpp {bpp:.4} mse {mse:.6} | ma50 {:.3} -> end {:.3} ({:.0}% drop) | last: bpp {:.3} mse {:.5} lc {:.3} lr {:.3} | {:.0}s",
            cfg.lambda_for(q).unwrap(),
            ma[49.min(ma.len() - 1)],
            ma[ma.len() - 1],
            100.0 * (1.0 - ma[ma.len() - 1] / ma[49.min(ma.len() - 1)]),
            out.log.last().unwrap().rate_bpp,
            out.log.last().unwrap().mse,
            out.log.last().unwrap().l_c,
            out.log.last().unwrap().l_r,
            t0.elapsed().as_secs_f64()
        );
    }
}
