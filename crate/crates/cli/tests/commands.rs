use std::fs;
use std::path::{Path, PathBuf};

use pddpm::denoiser::{load_checkpoint, DenoiserConfig};
use pddpm::noise::NoiseKind;
use pddpm_cli::commands::{cmd_evaluate, cmd_noise_viz, cmd_phantoms, cmd_train, noise_panels, NOISE_VIZ_STEPS};
use pddpm_cli::config::{Baseline, RunConfig};

fn tiny_config() -> RunConfig {
    let mut config = RunConfig::default();
    config.seed = 3;
    config.phantoms.size = [4, 32, 32];
    config.phantoms.train = 3;
    config.phantoms.val_healthy = 1;
    config.phantoms.val_unhealthy = 2;
    config.phantoms.test = 2;
    config.phantoms.test_healthy = 1;
    config.phantoms.anomaly.radius_range = (2.5, 4.0);
    config.phantoms.anomaly.margin = 2;
    config.denoiser = DenoiserConfig {
        channel_dims: vec![8, 8, 16],
        residual_blocks_per_level: 1,
        time_embed_dim: 32,
        input_channels: 1,
        groupnorm_groups: 4,
        init_seed: 0,
    };
    config.patching.size = Some([16, 16]);
    config.train.learning_rate = 1e-3;
    config.train.batch_size = 4;
    config.train.max_steps = Some(4);
    config.train.eval_every = 2;
    config.eval.threshold_candidates = 10;
    config
}

fn with_data(dir: &Path) -> RunConfig {
    let mut config = tiny_config();
    config.data.manifest = Some(cmd_phantoms(&config, &dir.join("data")).unwrap());
    config
}

fn run_dirs(out: &Path) -> Vec<PathBuf> {
    match fs::read_dir(out) {
        Ok(entries) => entries.map(|e| e.unwrap().path()).collect(),
        Err(_) => Vec::new(),
    }
}

#[test]
fn missing_dataset_fails_without_leaving_a_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let mut config = tiny_config();
    config.data.manifest = Some(dir.path().join("nowhere/manifest.json"));
    let err = cmd_train(&config, &out, None).unwrap_err();
    assert!(format!("{err:#}").contains("nowhere"), "{err:#}");
    config.data.manifest = None;
    assert!(cmd_train(&config, &out, None).is_err());
    assert!(run_dirs(&out).is_empty());
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let config = with_data(dir.path());
    let full = cmd_train(&config, &out, None).unwrap();

    let mut half = config.clone();
    half.train.max_steps = Some(2);
    let first = cmd_train(&half, &out, None).unwrap();
    let resumed = cmd_train(&config, &out, Some(&first.join("last.ckpt"))).unwrap();

    let a = load_checkpoint::<f32>(&full.join("last.ckpt")).unwrap();
    let b = load_checkpoint::<f32>(&resumed.join("last.ckpt")).unwrap();
    assert_eq!(a.model.training_steps, 4);
    assert_eq!(b.model.training_steps, 4);
    for (p, q) in a.model.parameters().iter().zip(b.model.parameters()) {
        assert_eq!(p.value, q.value);
    }
}

#[test]
fn evaluation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let mut config = with_data(dir.path());
    config.eval.write_maps = false;
    let run = cmd_train(&config, &out, None).unwrap();
    let checkpoint = run.join("best.ckpt");
    let (first, a) = cmd_evaluate(&config, &out, Some(&checkpoint)).unwrap();
    let (second, b) = cmd_evaluate(&config, &out, Some(&checkpoint)).unwrap();
    assert_ne!(first, second);
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(
        fs::read_to_string(first.join("per_sample.csv")).unwrap(),
        fs::read_to_string(second.join("per_sample.csv")).unwrap()
    );
}

#[test]
fn evaluation_writes_maps_and_figures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let mut config = with_data(dir.path());
    config.eval.baseline = Baseline::Thresh;
    let (run, report) = cmd_evaluate(&config, &out, None).unwrap();
    assert_eq!(report.dice.len(), 2);
    for name in ["report.json", "report.txt", "per_sample.csv", "config.toml"] {
        assert!(run.join(name).is_file(), "missing {name}");
    }
    assert_eq!(fs::read_dir(run.join("maps")).unwrap().count(), 2);
    assert_eq!(fs::read_dir(run.join("figures")).unwrap().count(), 2);
}

#[test]
fn thresholding_baseline_needs_no_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let mut config = with_data(dir.path());
    config.eval.baseline = Baseline::Thresh;
    config.eval.write_maps = false;
    assert!(cmd_train(&config, &out, None).is_err());
    let (_, report) = cmd_evaluate(&config, &out, Some(Path::new("/does/not/exist"))).unwrap();
    assert!(report.dice_mean.is_finite());
    assert!(report.l1_healthy.is_empty());
}

fn high_frequency_energy(panel: &ndarray::Array2<f32>) -> f64 {
    let (h, w) = panel.dim();
    let mut energy = 0.0;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                energy += ((panel[[y, x + 1]] - panel[[y, x]]) as f64).powi(2);
            }
            if y + 1 < h {
                energy += ((panel[[y + 1, x]] - panel[[y, x]]) as f64).powi(2);
            }
        }
    }
    energy
}

#[test]
fn noise_panels_start_clean_and_get_noisier() {
    let config = tiny_config();
    let [d, h, w] = config.phantoms.size;
    let volume = pddpm::data::generate_phantom(1, (d, h, w)).unwrap();
    let slice = volume.slice(d / 2);
    for kind in [NoiseKind::Gaussian, NoiseKind::Simplex] {
        let mut config = config.clone();
        config.noise.kind = kind;
        let panels = noise_panels(&config, &slice).unwrap();
        assert_eq!(panels.len(), NOISE_VIZ_STEPS.len());
        assert_eq!(panels[0], slice.index_axis(ndarray::Axis(0), 0));
        let energies: Vec<f64> = panels.iter().map(high_frequency_energy).collect();
        assert!(energies.windows(2).all(|e| e[1] > e[0]), "{kind:?}: {energies:?}");
    }
}

#[test]
fn noise_viz_writes_a_strip() {
    let dir = tempfile::tempdir().unwrap();
    let run = cmd_noise_viz(&tiny_config(), dir.path()).unwrap();
    let image = image::open(run.join("noise_levels.png")).unwrap();
    assert_eq!(image.height(), 32);
    assert!(image.width() > 11 * 32);
}
