use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cvdm_core::convergence::{convergence_report, write_convergence_csv};
use cvdm_core::data::PairedSample;
use cvdm_core::io::{read_npy, write_npy, Checkpoint};
use cvdm_core::metrics::MetricReport;
use cvdm_core::qpi::{generate_dataset, load_split, Manifest};
use cvdm_core::sampler::sample_batch;
use cvdm_core::schedule::{schedule_report as tabulate_schedule, write_schedule_report, ScheduleExt};
use cvdm_core::tensor::Tensor;
use cvdm_core::trainer::{load_model, training_digest, CvdmModel, Trainer};
use serde::Serialize;

use crate::config::RunConfig;
use crate::plot;

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const SAMPLES_DIR: &str = "samples";

fn prepare_run(cfg: &RunConfig) -> Result<PathBuf> {
    let run = cfg.paths.run.clone();
    std::fs::create_dir_all(&run).with_context(|| format!("creating {}", run.display()))?;
    cfg.save_copy(&run)?;
    Ok(run)
}

fn load_dataset(cfg: &RunConfig, split: &str) -> Result<(Manifest, Vec<PairedSample>)> {
    let dir = cfg.paths.dataset_dir();
    let (manifest, samples) = load_split(&dir, split)
        .with_context(|| format!("loading split {split:?} from {} (run generate-data first)", dir.display()))?;
    if manifest.condition_channels != cfg.model.condition_channels
        || manifest.target_channels != cfg.model.target_channels
    {
        bail!(
            "dataset has {} condition / {} target channels but the model expects {} / {}",
            manifest.condition_channels,
            manifest.target_channels,
            cfg.model.condition_channels,
            cfg.model.target_channels
        );
    }
    Ok((manifest, samples))
}

fn eval_items(cfg: &RunConfig) -> Result<(Manifest, Vec<PairedSample>)> {
    let (manifest, mut samples) = load_dataset(cfg, &cfg.eval.split)?;
    if let Some(n) = cfg.eval.limit {
        samples.truncate(n);
    }
    Ok((manifest, samples))
}

fn checkpoint_or_default(cfg: &RunConfig, checkpoint: Option<&Path>) -> PathBuf {
    checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.run.join(FINAL_CHECKPOINT))
}

/// Loads a checkpoint and refuses it unless it was trained with this configuration.
fn load_trained(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(PathBuf, Checkpoint, CvdmModel)> {
    let path = checkpoint_or_default(cfg, checkpoint);
    let ck = Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let digest = training_digest(&cfg.model, &cfg.train)?;
    if ck.config_digest != digest {
        bail!(
            "checkpoint {} was trained with configuration digest {} but the current configuration has {}; \
             the model or training settings differ",
            path.display(),
            ck.config_digest,
            digest
        );
    }
    let model = load_model(&ck, &cfg.model)?;
    Ok((path, ck, model))
}

pub fn generate_data(cfg: &RunConfig) -> Result<()> {
    prepare_run(cfg)?;
    let dir = cfg.paths.dataset_dir();
    let manifest = generate_dataset(&cfg.data, cfg.data_seed(), &dir)?;
    for (split, entries) in &manifest.splits {
        log::info!("{split}: {} samples", entries.len());
    }
    log::info!("dataset written to {}", dir.display());
    Ok(())
}

pub fn train(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let run = prepare_run(cfg)?;
    let (_, data) = load_dataset(cfg, "train")?;
    let mut trainer = match checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            let t = Trainer::resume(&ck, &cfg.model, cfg.train.clone())
                .with_context(|| format!("resuming from {}", path.display()))?;
            log::info!("resuming at step {}", t.step);
            t
        }
        None => Trainer::new(CvdmModel::new(&cfg.model, cfg.train.seed)?, cfg.train.clone())?,
    };
    if trainer.step >= cfg.train.iterations {
        bail!(
            "checkpoint is already at step {} of {}; raise --steps to continue",
            trainer.step,
            cfg.train.iterations
        );
    }
    trainer.train_loop(&data, Some(&run))?;
    log::info!("trained to step {}; checkpoint {}", trainer.step, run.join(FINAL_CHECKPOINT).display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct SampleInfo<'a> {
    checkpoint: String,
    checkpoint_step: u64,
    config_digest: &'a str,
    sampler: &'a cvdm_core::sampler::SamplerConfig,
    split: &'a str,
    ids: Vec<String>,
}

pub fn sample(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let run = prepare_run(cfg)?;
    cfg.sampler.validate()?;
    let (ck_path, ck, model) = load_trained(cfg, checkpoint)?;
    let (manifest, samples) = eval_items(cfg)?;
    let entries = &manifest.splits[&cfg.eval.split];
    let out = run.join(SAMPLES_DIR);
    std::fs::create_dir_all(&out)?;
    let (schedule, denoiser) = (model.schedule(), model.denoiser());
    let mut ids = Vec::new();
    for (entry, s) in entries.iter().zip(&samples) {
        let x = s.x.reshape(&[1, s.x.shape()[0], s.x.shape()[1], s.x.shape()[2]])?;
        let stack = sample_batch(&x, &denoiser, &schedule, cfg.model.target_channels, &cfg.sampler)?;
        let id = &entry.id;
        write_npy(&out.join(format!("{id}_samples.npy")), &stack.samples)?;
        write_npy(&out.join(format!("{id}_mean.npy")), &stack.mean)?;
        write_npy(&out.join(format!("{id}_var.npy")), &stack.variance)?;
        plot::save_png(&out.join(format!("{id}_mean.png")), &stack.mean, Some((0.0, 1.0)))?;
        plot::save_png(&out.join(format!("{id}_var.png")), &stack.variance, None)?;
        log::info!("sampled {id}");
        ids.push(id.clone());
    }
    let info = SampleInfo {
        checkpoint: ck_path.display().to_string(),
        checkpoint_step: ck.step,
        config_digest: &ck.config_digest,
        sampler: &cfg.sampler,
        split: &cfg.eval.split,
        ids,
    };
    std::fs::write(out.join("samples.json"), serde_json::to_string_pretty(&info)? + "\n")?;
    Ok(())
}

fn load_prediction(dir: &Path, id: &str) -> Result<Tensor> {
    for suffix in ["mean", "y"] {
        let p = dir.join(format!("{id}_{suffix}.npy"));
        if p.exists() {
            return read_npy(&p).with_context(|| format!("reading {}", p.display()));
        }
    }
    bail!("no prediction {id}_mean.npy or {id}_y.npy in {}", dir.display())
}

pub fn eval(cfg: &RunConfig, predictions: Option<&Path>) -> Result<()> {
    let run = prepare_run(cfg)?;
    let dir = predictions
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.join(SAMPLES_DIR));
    let (manifest, samples) = eval_items(cfg)?;
    let entries = &manifest.splits[&cfg.eval.split];
    let items = entries
        .iter()
        .zip(samples)
        .map(|(e, s)| {
            let pred = load_prediction(&dir, &e.id)?;
            let pred = pred.reshape(s.y.shape()).with_context(|| format!("prediction {} has the wrong size", e.id))?;
            Ok((e.id.clone(), s.y, pred))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = MetricReport::evaluate(&items, &cfg.metrics)?;
    std::fs::write(run.join("metrics.json"), report.to_json()? + "\n")?;
    report.write_csv(&run.join("metrics.csv"))?;
    let a = &report.aggregate;
    println!(
        "n={} mae={:.6} ms_ssim={:.6} ssim={:.6} psnr={:.3}",
        report.count, a.mae, a.ms_ssim, a.ssim, a.psnr
    );
    Ok(())
}

pub fn schedule_report(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let run = prepare_run(cfg)?;
    let (_, _, model) = load_trained(cfg, checkpoint)?;
    let (_, samples) = load_dataset(cfg, &cfg.eval.split)?;
    let s = samples.get(cfg.report.index).with_context(|| {
        format!(
            "report index {} outside split {:?} of {} samples",
            cfg.report.index,
            cfg.eval.split,
            samples.len()
        )
    })?;
    let [c, h, w] = [s.x.shape()[0], s.x.shape()[1], s.x.shape()[2]];
    let x = s.x.reshape(&[1, c, h, w])?;
    let schedule = model.schedule();
    let lambda = schedule.lambda_map(&x)?;
    let threshold = cfg.report.mask_threshold;
    let region = s.y.map(|v| if v > threshold { 1.0 } else { 0.0 });
    let mask = (lambda.numel() == region.numel()).then(|| region.clone());
    if mask.is_none() {
        log::warn!("schedule map {:?} does not match target {:?}; reporting without regions", lambda.shape(), s.y.shape());
    }
    let rows = tabulate_schedule(&schedule, &x, mask.as_ref(), cfg.report.points)?;
    write_schedule_report(&run.join("schedule_report.csv"), &rows)?;
    plot::schedule_chart(&run.join("schedule_report.svg"), &rows)?;
    plot::save_png(&run.join("schedule_lambda.png"), &lambda, None)?;
    log::info!("{} rows written to {}", rows.len(), run.join("schedule_report.csv").display());
    Ok(())
}

pub fn convergence(cfg: &RunConfig) -> Result<()> {
    let run = prepare_run(cfg)?;
    let reports = convergence_report(&cfg.convergence, cfg.convergence_seed())?;
    write_convergence_csv(&reports, &run.join("convergence.csv"))?;
    std::fs::write(run.join("convergence.json"), serde_json::to_string_pretty(&reports)? + "\n")?;
    plot::convergence_chart(&run.join("convergence.svg"), &reports)?;
    for r in &reports {
        println!(
            "{} slope={:.3} l_inf={:.6} snr_second_l2={:.3e}",
            r.schedule, r.slope, r.l_inf, r.snr_second_l2
        );
    }
    Ok(())
}
