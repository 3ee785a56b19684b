//! Pair-mining quality on the synthetic data, read back from the `mine` stage output.

use std::path::Path;

use mmfs::mining::ManifestSidecar;
use mmfs::pipeline::{self, ArchPreset, ExperimentConfig};

const SEEDS: [u64; 3] = [11, 12, 13];

fn config(out: &Path, seed: u64, noise: f64, arms: &[&str]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        master_seed: seed,
        out_dir: out.to_path_buf(),
        architecture: ArchPreset::Compact,
        arms: arms.iter().map(|s| s.to_string()).collect(),
        ..ExperimentConfig::default()
    };
    cfg.data.noise = noise;
    cfg.data.n_per_class = 40;
    cfg
}

fn class_correct(cfg: &ExperimentConfig, source: &str) -> f64 {
    let path = cfg.out_dir.join("mine").join(source).join("pairs.json");
    let sidecar: ManifestSidecar = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    sidecar.extra["class_correct_fraction"].parse().unwrap()
}

fn mined(out: &Path, seed: u64, noise: f64, arms: &[&str]) -> ExperimentConfig {
    let cfg = config(out, seed, noise, arms);
    pipeline::prepare(&cfg).unwrap();
    pipeline::mine(&cfg).unwrap();
    cfg
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn raw_mining_degrades_with_noise() {
    let dir = tempfile::tempdir().unwrap();
    let means: Vec<f64> = [0.0, 0.6, 0.9]
        .iter()
        .enumerate()
        .map(|(i, &noise)| {
            let fractions: Vec<f64> = SEEDS
                .iter()
                .map(|&seed| {
                    let cfg = mined(&dir.path().join(format!("{i}_{seed}")), seed, noise, &["mcae_cosine"]);
                    class_correct(&cfg, "cosine")
                })
                .collect();
            mean(&fractions)
        })
        .collect();
    eprintln!("class-correct by noise: {means:?}");
    assert!(means[0] > 0.99, "{means:?}");
    for w in means.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{means:?}");
    }
    assert!(means[2] < means[0] - 0.05, "{means:?}");
}

#[test]
fn transfer_mining_helps_on_noisy_data() {
    let dir = tempfile::tempdir().unwrap();
    let (mut transfer, mut raw) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let cfg = mined(&dir.path().join(seed.to_string()), seed, 0.8, &["mcae_cosine", "mcae_transfer"]);
        transfer.push(class_correct(&cfg, "transfer"));
        raw.push(class_correct(&cfg, "cosine"));
    }
    eprintln!("transfer {transfer:?} raw {raw:?}");
    assert!(mean(&transfer) >= mean(&raw), "transfer {transfer:?} raw {raw:?}");
}
