//! The command implementations behind the `pddpm` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ndarray::{s, Array2, Axis};
use pddpm::data::{
    generate_phantom, inject_anomaly, preprocess, save_ground_truth, save_volume, DatasetManifest, ManifestEntry,
    SubjectRole, VolumeTensor,
};
use pddpm::denoiser::{load_checkpoint, save_checkpoint, DenoiserModel};
use pddpm::metrics::{auprc, dice, l1_healthy, EvalReport, ScoreVector};
use pddpm::noise::mix_seed;
use pddpm::pipeline::{
    anomaly_map, baseline_thresh, binarize_and_prune, greedy_threshold_search, postprocess, reconstruct_volume,
    AnomalyMap, TrainRecord, Trainer,
};
use pddpm::tensor::BinaryVolume;
use serde::Serialize;

use crate::config::{Baseline, RunConfig};
use crate::figures::{line_plot, save_strip, Series};
use crate::rundir::RunDir;

/// A preprocessed subject and its (preprocessed) annotation.
pub struct Subject {
    pub volume: VolumeTensor,
    pub ground_truth: Option<BinaryVolume>,
}

/// Loads and preprocesses every manifest subject with `role`.
pub fn load_subjects(config: &RunConfig, manifest: &DatasetManifest, role: SubjectRole) -> Result<Vec<Subject>> {
    manifest
        .with_role(role)
        .map(|entry| load_subject(config, entry))
        .collect()
}

fn load_subject(config: &RunConfig, entry: &ManifestEntry) -> Result<Subject> {
    let (factor, trim) = (config.data.downsample, config.data.trim_slices);
    let raw = entry.load().with_context(|| format!("loading subject {}", entry.id))?;
    let volume = preprocess(&raw, factor, trim)?;
    let ground_truth = match entry.load_ground_truth()? {
        Some(gt) => {
            let as_volume = VolumeTensor::new(gt.mapv(|g| g as u8 as f32).insert_axis(Axis(0)), gt, &entry.id)?;
            let pooled = preprocess(&as_volume, factor, trim)?;
            Some(pooled.values.index_axis(Axis(0), 0).mapv(|v| v >= 0.5))
        }
        None => None,
    };
    Ok(Subject { volume, ground_truth })
}

fn slices_of(subjects: &[Subject]) -> Vec<pddpm::tensor::SliceTensor> {
    subjects.iter().flat_map(|s| s.volume.slices()).collect()
}

/// Writes a synthetic dataset (raw containers) and its manifest into `dir`.
pub fn cmd_phantoms(config: &RunConfig, dir: &Path) -> Result<PathBuf> {
    let p = &config.phantoms;
    let size = (p.size[0], p.size[1], p.size[2]);
    fs::create_dir_all(dir)?;
    let mut manifest = DatasetManifest::default();
    let roles = [
        (SubjectRole::Train, p.train, false),
        (SubjectRole::ValHealthy, p.val_healthy, false),
        (SubjectRole::ValUnhealthy, p.val_unhealthy, true),
        (SubjectRole::Test, p.test, true),
        (SubjectRole::TestHealthy, p.test_healthy, false),
    ];
    for (r, (role, count, anomalous)) in roles.into_iter().enumerate() {
        let prefix = serde_json::to_value(role)?.as_str().unwrap_or("subject").to_string();
        for i in 0..count {
            let seed = mix_seed(config.seed, (r as u64) << 32 | i as u64);
            let id = format!("{prefix}-{i:03}");
            let mut volume = generate_phantom(seed, size)?;
            let mut ground_truth = None;
            if anomalous {
                let (v, gt) = inject_anomaly(&volume, mix_seed(seed, 1), &p.anomaly)?;
                let gt_name = format!("{id}_gt.json");
                save_ground_truth(&dir.join(&gt_name), &gt, &id)?;
                volume = v;
                ground_truth = Some(PathBuf::from(gt_name));
            }
            volume.subject_id = id.clone();
            let name = format!("{id}.json");
            save_volume(&dir.join(&name), &volume)?;
            manifest.subjects.push(ManifestEntry {
                id,
                role,
                path: name.into(),
                ground_truth,
            });
        }
    }
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

/// Trains a denoiser; writes `best.ckpt`, `last.ckpt` (with optimizer state),
/// `train_curve.csv` and `train.json` into a new run directory.
pub fn cmd_train(config: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<PathBuf> {
    if config.eval.baseline == Baseline::Thresh {
        bail!("the thresholding baseline has no model to train");
    }
    let manifest = DatasetManifest::load(config.manifest()?)?;
    if let Some(path) = resume {
        ensure!(path.is_file(), "checkpoint {} does not exist", path.display());
    }
    let train = load_subjects(config, &manifest, SubjectRole::Train)?;
    ensure!(!train.is_empty(), "manifest lists no training subjects");
    let val = load_subjects(config, &manifest, SubjectRole::ValHealthy)?;
    let (train, val) = (slices_of(&train), slices_of(&val));

    let run = RunDir::create(out, "train", config)?;
    let train_config = config.train_config();
    let mut trainer = match resume {
        Some(path) => Trainer::resume(&train, train_config, load_checkpoint(path)?)?,
        None => Trainer::new(&train, train_config, config.denoiser.clone())?,
    };
    let mut curve = String::from("step,loss,val_loss\n");
    let outcome = trainer.fit(&val, |r: &TrainRecord| {
        let val = r.val_loss.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(curve, "{},{:.6},{val}", r.step, r.loss);
        if !val.is_empty() {
            eprintln!("step {} loss {:.5} val {val}", r.step, r.loss);
        }
    })?;
    save_checkpoint(&run.join("last.ckpt"), trainer.model(), Some(trainer.optimizer()))?;
    save_checkpoint(&run.join("best.ckpt"), &outcome.model, None)?;
    fs::write(run.join("train_curve.csv"), curve)?;
    #[derive(Serialize)]
    struct Summary {
        steps: usize,
        best_step: usize,
        best_val_loss: Option<f64>,
    }
    let summary = Summary {
        steps: trainer.steps_done(),
        best_step: outcome.best_step,
        best_val_loss: outcome.best_val_loss,
    };
    fs::write(run.join("train.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(run.commit())
}

/// Scores volumes with either the thresholding baseline or a trained model.
pub struct Scorer {
    model: Option<DenoiserModel>,
}

impl Scorer {
    pub fn new(config: &RunConfig, checkpoint: Option<&Path>) -> Result<Self> {
        let model = match config.eval.baseline {
            Baseline::Thresh => None,
            _ => {
                let path = checkpoint.context("a checkpoint is required unless --baseline thresh")?;
                ensure!(path.is_file(), "checkpoint {} does not exist", path.display());
                Some(load_checkpoint::<f32>(path)?.model)
            }
        };
        Ok(Self { model })
    }

    pub fn from_model(model: DenoiserModel) -> Self {
        Self { model: Some(model) }
    }

    /// Raw anomaly map and the reconstruction (when a model is used).
    pub fn score(&self, config: &RunConfig, volume: &VolumeTensor) -> Result<(AnomalyMap, Option<VolumeTensor>)> {
        match (&self.model, config.eval.baseline) {
            (_, Baseline::Thresh) => Ok((baseline_thresh(volume)?, None)),
            (Some(model), _) => {
                let grid = config.grid(volume.slice_size())?;
                let schedule = config.schedule.build()?;
                // Inference noise depends on the subject, never on list order.
                let subject_seed = volume.subject_id.bytes().fold(0u64, |h, b| mix_seed(h, b as u64));
                let noise = pddpm::noise::NoiseConfig {
                    seed: mix_seed(config.noise_config().seed, subject_seed),
                    ..config.noise_config()
                };
                let rec = reconstruct_volume(model, volume, &grid, config.eval.t_test, &schedule, &noise)
                    .with_context(|| format!("reconstructing {}", volume.subject_id))?;
                Ok((anomaly_map(volume, &rec)?, Some(rec)))
            }
            (None, _) => bail!("no model loaded"),
        }
    }

    pub fn postprocessed(&self, config: &RunConfig, volume: &VolumeTensor) -> Result<AnomalyMap> {
        let (map, _) = self.score(config, volume)?;
        Ok(postprocess(&map, config.eval.median_kernel, config.eval.erosion_iters)?)
    }
}

fn gt_of(subject: &Subject) -> Result<&BinaryVolume> {
    subject
        .ground_truth
        .as_ref()
        .with_context(|| format!("subject {} has no ground truth", subject.volume.subject_id))
}

/// Threshold from the unhealthy validation maps, then Dice per test map.
pub fn threshold_and_dice(
    config: &RunConfig,
    val_maps: &[AnomalyMap],
    val: &[Subject],
    test_maps: &[AnomalyMap],
    test: &[Subject],
) -> Result<(f64, f64, Vec<f64>)> {
    let gts = val.iter().map(|s| gt_of(s).cloned()).collect::<Result<Vec<_>>>()?;
    let found = greedy_threshold_search(val_maps, &gts, config.eval.threshold_candidates, config.eval.min_component)?;
    if found.empty_ground_truth {
        eprintln!("warning: every validation ground truth is empty; threshold is arbitrary");
    }
    let mut scores = Vec::new();
    for (map, subject) in test_maps.iter().zip(test) {
        let pred = binarize_and_prune(map, found.threshold, config.eval.min_component)?;
        scores.push(dice(&pred, gt_of(subject)?)?);
    }
    Ok((found.threshold, found.dice, scores))
}

fn middle_slice(values: &ndarray::Array3<f32>) -> Array2<f32> {
    values.index_axis(Axis(0), values.dim().0 / 2).to_owned()
}

/// Evaluates on the manifest's validation/test subjects and writes
/// `report.json`, `report.txt`, `per_sample.csv`, anomaly maps and error-map
/// figures into a new run directory.
pub fn cmd_evaluate(config: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<(PathBuf, EvalReport)> {
    let manifest = DatasetManifest::load(config.manifest()?)?;
    let scorer = Scorer::new(config, checkpoint)?;
    let val = load_subjects(config, &manifest, SubjectRole::ValUnhealthy)?;
    let test = load_subjects(config, &manifest, SubjectRole::Test)?;
    let healthy = load_subjects(config, &manifest, SubjectRole::TestHealthy)?;
    ensure!(!val.is_empty(), "manifest lists no unhealthy validation subjects");
    ensure!(!test.is_empty(), "manifest lists no test subjects");

    let run = RunDir::create(out, "evaluate", config)?;
    let val_maps = val
        .iter()
        .map(|s| scorer.postprocessed(config, &s.volume))
        .collect::<Result<Vec<_>>>()?;
    let mut test_maps = Vec::new();
    let mut figures = Vec::new();
    for subject in &test {
        let (raw, rec) = scorer.score(config, &subject.volume)?;
        let map = postprocess(&raw, config.eval.median_kernel, config.eval.erosion_iters)?;
        figures.push((raw, rec));
        test_maps.push(map);
    }
    let (threshold, _, dice_scores) = threshold_and_dice(config, &val_maps, &val, &test_maps, &test)?;

    let ids: Vec<String> = test.iter().map(|s| s.volume.subject_id.clone()).collect();
    let dice_vec = ScoreVector::new(ids.clone(), dice_scores)?;
    let mut auprc_vec = ScoreVector::default();
    let mut flagged = Vec::new();
    for ((map, subject), id) in test_maps.iter().zip(&test).zip(&ids) {
        match auprc(map.values.view(), gt_of(subject)?)? {
            Some(v) => auprc_vec.push(id.clone(), v)?,
            None => flagged.push(id.clone()),
        }
    }
    let mut l1_vec = ScoreVector::default();
    if config.eval.baseline != Baseline::Thresh {
        for subject in &healthy {
            let (_, rec) = scorer.score(config, &subject.volume)?;
            let rec = rec.expect("model reconstructions");
            let v = l1_healthy(&subject.volume, &rec, &subject.volume.brain_mask)?;
            l1_vec.push(subject.volume.subject_id.clone(), v)?;
        }
    }
    let report = EvalReport::new(threshold, dice_vec, auprc_vec, l1_vec, flagged);
    fs::write(run.join("report.json"), report.to_json()?)?;
    fs::write(run.join("report.txt"), report.summary() + "\n")?;
    fs::write(run.join("per_sample.csv"), report.per_sample_csv())?;

    if config.eval.write_maps {
        let maps_dir = run.subdir("maps")?;
        let fig_dir = run.subdir("figures")?;
        for (((map, subject), (raw, rec)), id) in test_maps.iter().zip(&test).zip(&figures).zip(&ids) {
            let mut volume = VolumeTensor::new(map.values.clone().insert_axis(Axis(0)), map.brain_mask.clone(), id)?;
            volume.spacing = subject.volume.spacing;
            save_volume(&maps_dir.join(format!("{id}_anomaly.nii.gz")), &volume)?;
            // Input | reconstruction | raw map | post-processed map | prediction | ground truth.
            let pred = binarize_and_prune(map, threshold, config.eval.min_component)?;
            let input = middle_slice(&subject.volume.mean_channel());
            let mut panels = vec![input.clone()];
            panels.push(rec.as_ref().map_or(input, |r| middle_slice(&r.mean_channel())));
            panels.push(middle_slice(&raw.values));
            panels.push(middle_slice(&map.values));
            panels.push(middle_slice(&pred.mapv(|b| b as u8 as f32)));
            panels.push(middle_slice(&gt_of(subject)?.mapv(|b| b as u8 as f32)));
            save_strip(&fig_dir.join(format!("{id}.png")), &panels)?;
        }
    }
    println!("{}", report.summary());
    Ok((run.commit(), report))
}

/// One cell of the ablation sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationRow {
    pub patch_size: usize,
    pub t_test: usize,
    pub threshold: f64,
    pub val_dice: f64,
    pub test_dice: f64,
}

/// Sweeps patch sizes × test timesteps with a fixed model. Patch sizes larger
/// than the slices are skipped.
pub fn ablation_rows(config: &RunConfig, scorer: &Scorer, val: &[Subject], test: &[Subject]) -> Result<Vec<AblationRow>> {
    let (h, w) = val.first().context("no validation subjects")?.volume.slice_size();
    let sizes: Vec<usize> = config
        .ablate
        .patch_sizes
        .iter()
        .copied()
        .filter(|&p| {
            let fits = p >= 1 && p <= h && p <= w;
            if !fits {
                eprintln!("skipping patch size {p} for {h}x{w} slices");
            }
            fits
        })
        .collect();
    if sizes.is_empty() || config.ablate.t_tests.is_empty() {
        bail!("empty ablation grid");
    }
    let mut rows = Vec::new();
    for &patch in &sizes {
        for &t_test in &config.ablate.t_tests {
            let mut cell = config.clone();
            cell.patching.size = Some([patch, patch]);
            cell.eval.t_test = t_test;
            cell.validate()?;
            let val_maps = val
                .iter()
                .map(|s| scorer.postprocessed(&cell, &s.volume))
                .collect::<Result<Vec<_>>>()?;
            let test_maps = test
                .iter()
                .map(|s| scorer.postprocessed(&cell, &s.volume))
                .collect::<Result<Vec<_>>>()?;
            let (threshold, val_dice, scores) = threshold_and_dice(&cell, &val_maps, val, &test_maps, test)?;
            let row = AblationRow {
                patch_size: patch,
                t_test,
                threshold,
                val_dice,
                test_dice: scores.iter().sum::<f64>() / scores.len() as f64,
            };
            eprintln!("patch {patch} t_test {t_test}: dice {:.4}", row.test_dice);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("patch_size,t_test,threshold,val_dice,test_dice\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6}",
            r.patch_size, r.t_test, r.threshold, r.val_dice, r.test_dice
        );
    }
    out
}

/// Writes `ablation.csv`, `dice_vs_t_test.svg` and `dice_vs_patch_size.svg`.
pub fn cmd_ablate(config: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<(PathBuf, Vec<AblationRow>)> {
    if config.ablate.patch_sizes.is_empty() || config.ablate.t_tests.is_empty() {
        bail!("empty ablation grid");
    }
    let manifest = DatasetManifest::load(config.manifest()?)?;
    let scorer = Scorer::new(config, checkpoint)?;
    let val = load_subjects(config, &manifest, SubjectRole::ValUnhealthy)?;
    let test = load_subjects(config, &manifest, SubjectRole::Test)?;
    ensure!(!test.is_empty(), "manifest lists no test subjects");
    let run = RunDir::create(out, "ablate", config)?;
    let rows = ablation_rows(config, &scorer, &val, &test)?;
    fs::write(run.join("ablation.csv"), ablation_csv(&rows))?;

    let mut sizes: Vec<usize> = rows.iter().map(|r| r.patch_size).collect();
    sizes.dedup();
    let by_size: Vec<Series> = sizes
        .iter()
        .map(|&p| Series {
            label: format!("patch {p}"),
            points: rows
                .iter()
                .filter(|r| r.patch_size == p)
                .map(|r| (r.t_test as f64, r.test_dice))
                .collect(),
        })
        .collect();
    line_plot(&run.join("dice_vs_t_test.svg"), "Dice vs. test noise level", "t_test", "Dice", &by_size)?;
    let by_t: Vec<Series> = config
        .ablate
        .t_tests
        .iter()
        .map(|&t| Series {
            label: format!("t_test {t}"),
            points: rows
                .iter()
                .filter(|r| r.t_test == t)
                .map(|r| (r.patch_size as f64, r.test_dice))
                .collect(),
        })
        .collect();
    line_plot(&run.join("dice_vs_patch_size.svg"), "Dice vs. patch size", "patch size", "Dice", &by_t)?;
    Ok((run.commit(), rows))
}

pub const NOISE_VIZ_STEPS: [usize; 11] = [0, 100, 200, 300, 400, 500, 600, 700, 800, 900, 1000];

/// One clean slice noised at t = 0, 100, ..., 1000 with a single noise field.
pub fn noise_panels(config: &RunConfig, slice: &pddpm::tensor::SliceTensor) -> Result<Vec<Array2<f32>>> {
    let schedule = config.schedule.build()?;
    let eps = config
        .noise_config()
        .sample(slice.shape())?
        .into_dimensionality::<ndarray::Ix3>()?;
    NOISE_VIZ_STEPS
        .iter()
        .map(|&t| {
            let t = t.min(schedule.steps());
            let x_t = schedule.forward_noise(slice.view(), t, eps.view())?;
            Ok(x_t.mean_axis(Axis(0)).expect("channels"))
        })
        .collect()
}

/// Writes `noise_levels.png`: the middle slice of the first training subject
/// (or of a phantom when no dataset is configured) at 11 noise levels.
pub fn cmd_noise_viz(config: &RunConfig, out: &Path) -> Result<PathBuf> {
    let volume = match &config.data.manifest {
        Some(_) => {
            let manifest = DatasetManifest::load(config.manifest()?)?;
            let entry = manifest
                .with_role(SubjectRole::Train)
                .next()
                .context("manifest lists no training subjects")?;
            load_subject(config, entry)?.volume
        }
        None => {
            let [d, h, w] = config.phantoms.size;
            generate_phantom(config.seed, (d, h, w))?
        }
    };
    let slice = volume.values.slice(s![.., volume.depth() / 2, .., ..]).to_owned();
    let panels = noise_panels(config, &slice)?;
    let run = RunDir::create(out, "noise-viz", config)?;
    save_strip(&run.join("noise_levels.png"), &panels)?;
    Ok(run.commit())
}
