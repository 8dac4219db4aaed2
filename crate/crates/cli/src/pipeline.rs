//! `pipeline`: preprocess → train-encoder → train-seg → predict → evaluate
//! per stage, resumable step by step.
//!
//! Run directory layout:
//!
//! ```text
//! manifest.toml
//! cache/{liver,tumor}.bsc
//! {liver,tumor}/encoder.ckpt, encoder_loss.csv, segmenter.ckpt, segmenter_loss.csv
//! predictions/liver/segmentation-N.nii      liver stage alone (labels 0/1)
//! predictions/cascade/segmentation-N.nii    liver → tumor cascade (labels 0/1/2)
//! eval/liver.csv, eval/cascade-liver.csv, eval/tumor.csv
//! plots/*.svg
//! ```

use std::path::PathBuf;

use bsunet::cache::{read_cache, write_cache};
use bsunet::checkpoint::{Checkpoint, Role};
use bsunet::config::RunConfig;
use bsunet::metrics::{summarize, CaseMetrics, Connectivity};
use bsunet::trainer::{Stage, TrainedEncoder};

use crate::args::{PipelineArgs, PipelineStage};
use crate::commands::{
    cascade_dir, evaluate_dirs, load_segmenter, predict_dir, print_summary, run_train_encoder, run_train_seg,
    stage_samples, write_metrics_csv, PredictOptions,
};
use crate::manifest::{resolved, RunManifest};
use crate::{plot, CliResult, Failure};

const PREDICT_BATCH: usize = 4;

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Liver => "liver",
        Stage::Tumor => "tumor",
    }
}

struct Runner {
    dir: PathBuf,
    cfg: RunConfig,
    manifest: RunManifest,
}

impl Runner {
    /// Runs `f` unless `name` already finished with all its artifacts in
    /// place. `f` returns the artifacts it wrote, relative to the run dir.
    fn step(&mut self, name: &str, f: impl FnOnce(&mut Runner) -> CliResult<Vec<(String, PathBuf)>>) -> CliResult {
        if self.manifest.done(name) {
            let present = self
                .manifest
                .artifacts
                .iter()
                .filter(|(k, _)| k.starts_with(&format!("{name}:")))
                .all(|(_, p)| self.dir.join(p).exists());
            if present {
                log::info!("step {name}: already done");
                return Ok(());
            }
            self.manifest.steps.retain(|s| s != name);
        }
        println!("step {name}");
        let artifacts = f(self).map_err(|e| match e {
            Failure::User(m) => Failure::User(format!("step {name} failed: {m}")),
            Failure::Runtime(m) => Failure::Runtime(format!("step {name} failed: {m}")),
        })?;
        for (k, p) in artifacts {
            self.manifest.artifacts.insert(format!("{name}:{k}"), p);
        }
        self.manifest.steps.push(name.to_string());
        self.manifest.save(&self.dir)
    }

    fn path(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    fn artifact(&self, step: &str, key: &str) -> Option<PathBuf> {
        self.manifest.artifact(&self.dir, &format!("{step}:{key}"))
    }

    fn train_stage(&mut self, stage: Stage) -> CliResult {
        let sn = stage_name(stage);
        let cache_rel = format!("cache/{sn}.bsc");
        self.step(&format!("preprocess-{sn}"), |r| {
            let d = &r.cfg.data;
            let samples = stage_samples(&r.cfg.data_root()?, stage, d.channels, d.scaling, d.label_target)?;
            write_cache(r.path(&cache_rel)?, &samples)?;
            println!("  {} slices", samples.len());
            Ok(vec![("cache".into(), cache_rel.clone().into())])
        })?;
        let supervised = self.cfg.supervised();
        if supervised {
            self.step(&format!("encoder-{sn}"), |r| {
                let samples = read_cache(r.dir.join(&cache_rel))?;
                let (enc, history) = run_train_encoder(&r.cfg, stage, &samples)?;
                let (ck, csv) = (format!("{sn}/encoder.ckpt"), format!("{sn}/encoder_loss.csv"));
                enc.checkpoint().save(r.path(&ck)?)?;
                history.write_csv(r.path(&csv)?)?;
                report(&history);
                Ok(vec![("checkpoint".into(), ck.into()), ("losses".into(), csv.into())])
            })?;
        }
        self.step(&format!("segmenter-{sn}"), |r| {
            let samples = read_cache(r.dir.join(&cache_rel))?;
            let mut encoder = None;
            if supervised {
                let p = r
                    .artifact(&format!("encoder-{sn}"), "checkpoint")
                    .ok_or_else(|| Failure::Runtime("encoder checkpoint missing from the manifest".into()))?;
                encoder = Some(TrainedEncoder::from_checkpoint(Checkpoint::load(p)?)?);
            }
            let (net, history) = run_train_seg(&r.cfg, stage, &samples, encoder.as_mut())?;
            let (ck, csv) = (format!("{sn}/segmenter.ckpt"), format!("{sn}/segmenter_loss.csv"));
            Checkpoint {
                role: Role::Segmenter,
                iterations: history.len(),
                network: net,
            }
            .save(r.path(&ck)?)?;
            history.write_csv(r.path(&csv)?)?;
            report(&history);
            Ok(vec![("checkpoint".into(), ck.into()), ("losses".into(), csv.into())])
        })
    }

    fn options(&self) -> PredictOptions {
        PredictOptions {
            scaling: self.cfg.data.scaling,
            boundary: self.cfg.data.boundary,
            batch: PREDICT_BATCH,
        }
    }

    fn segmenter(&self, stage: Stage) -> CliResult<PathBuf> {
        self.artifact(&format!("segmenter-{}", stage_name(stage)), "checkpoint")
            .ok_or_else(|| {
                Failure::user(format!(
                    "no trained {} segmenter in this run; run the {} stage first",
                    stage_name(stage),
                    stage_name(stage)
                ))
            })
    }

    fn evaluate(&mut self, name: &str, pred_rel: &str, label: u8) -> CliResult {
        let csv_rel = format!("eval/{name}.csv");
        self.step(&format!("evaluate-{name}"), |r| {
            let cases = evaluate_dirs(&r.dir.join(pred_rel), &r.cfg.eval_root()?, label, Connectivity::Six)?;
            let metrics: Vec<CaseMetrics> = cases.iter().map(|(_, m)| *m).collect();
            let summary = summarize(&metrics);
            write_metrics_csv(&r.path(&csv_rel)?, &cases, &summary)?;
            print_summary(label, &summary);
            Ok(vec![("metrics".into(), csv_rel.clone().into())])
        })
    }

    fn predict_liver(&mut self) -> CliResult {
        let rel = "predictions/liver";
        self.step("predict-liver", |r| {
            let (mut net, channels) = load_segmenter(&r.segmenter(Stage::Liver)?)?;
            predict_dir(
                &mut net,
                channels,
                &r.cfg.eval_root()?,
                &r.dir.join(rel),
                r.options(),
                1,
            )?;
            Ok(vec![("labels".into(), rel.into())])
        })?;
        self.evaluate("liver", rel, 1)
    }

    fn cascade(&mut self) -> CliResult {
        let rel = "predictions/cascade";
        self.step("cascade", |r| {
            let (mut liver, channels) = load_segmenter(&r.segmenter(Stage::Liver)?)?;
            let (mut tumor, tc) = load_segmenter(&r.segmenter(Stage::Tumor)?)?;
            if tc != channels {
                return Err(Failure::user(
                    "liver and tumor segmenters take different channel counts",
                ));
            }
            cascade_dir(
                &mut liver,
                &mut tumor,
                channels,
                &r.cfg.eval_root()?,
                &r.dir.join(rel),
                r.options(),
            )?;
            Ok(vec![("labels".into(), rel.into())])
        })?;
        self.evaluate("cascade-liver", rel, 1)?;
        self.evaluate("tumor", rel, 2)
    }
}

fn report(h: &bsunet::trainer::History) {
    if let Some(last) = h.rows().last() {
        println!(
            "  {} iterations, final dice loss {:.5}, total {:.5}",
            h.len(),
            last.dice,
            last.total
        );
    }
}

pub fn pipeline(a: PipelineArgs) -> CliResult {
    let cfg = RunConfig::load(&a.config)?;
    let snapshot = resolved(&cfg)?;
    std::fs::create_dir_all(&a.run_dir)?;
    let manifest = match RunManifest::load(&a.run_dir)? {
        Some(m) if !a.force => {
            if m.config != snapshot {
                return Err(Failure::user(format!(
                    "{} holds a run with a different configuration; pass --force or use a new run directory",
                    a.run_dir.display()
                )));
            }
            m
        }
        _ => RunManifest::new(&a.run_dir, snapshot),
    };
    let intact = manifest.artifacts.values().all(|p| a.run_dir.join(p).exists());
    if manifest.complete && intact {
        println!("run {} is complete; nothing to do", manifest.run_id);
        return Ok(());
    }
    let mut r = Runner {
        dir: a.run_dir.clone(),
        cfg,
        manifest,
    };
    if a.force {
        r.manifest.save(&r.dir)?;
    }
    let stages: &[Stage] = match a.stage {
        PipelineStage::Liver => &[Stage::Liver],
        PipelineStage::Tumor => &[Stage::Tumor],
        PipelineStage::All => &[Stage::Liver, Stage::Tumor],
    };
    for &stage in stages {
        r.train_stage(stage)?;
        match stage {
            Stage::Liver => r.predict_liver()?,
            Stage::Tumor => r.cascade()?,
        }
    }
    let plots = plot::plot_run(&r.dir, &r.dir.join("plots"), plot::DEFAULT_SMOOTHING)?;
    for p in plots {
        if let Ok(rel) = p.strip_prefix(&r.dir) {
            let key = format!("plots:{}", rel.display());
            r.manifest.artifacts.insert(key, rel.to_path_buf());
        }
    }
    r.manifest.complete = ["evaluate-liver", "evaluate-tumor"].iter().all(|s| r.manifest.done(s));
    r.manifest.save(&r.dir)?;
    println!("run {} written to {}", r.manifest.run_id, r.dir.display());
    Ok(())
}
