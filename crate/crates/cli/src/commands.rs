use std::path::{Path, PathBuf};

use bsunet::cache::{read_cache, write_cache};
use bsunet::cascade::{cascade_forward_mask, cascade_invert, tumor_samples};
use bsunet::checkpoint::{Checkpoint, Role};
use bsunet::config::RunConfig;
use bsunet::datapipe::{
    filter_liver_slices, liver_samples, preprocess_volume, Channels, LabelTarget, Scaling, SliceSample,
};
use bsunet::metrics::{evaluate_case, summarize, CaseMetrics, Connectivity, Summary};
use bsunet::network::{Network, SegmentationNetwork};
use bsunet::synth::synthetic_case;
use bsunet::trainer::{
    cascade_predict, encoder_spec, predict_volume, train_encoder, train_segmenter, Boundary, History, Stage,
    TrainedEncoder,
};
use bsunet::volume::{
    lits_cases, segmentation_files, segmentation_name, write_ct, write_scalar, CtVolume, LabelVolume,
};
use bsunet::weightmap::{preview, weight_map_for_label, WeightMapParams};
use ndarray::{s, Array3, Axis};

use crate::args::*;
use crate::{plot, CliResult, Failure};

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Preprocess(a) => preprocess(a),
        Command::Weightmap(a) => weightmap(a),
        Command::TrainEncoder(a) => train_encoder_cmd(a),
        Command::TrainSeg(a) => train_seg_cmd(a),
        Command::Predict(a) => predict(a),
        Command::CascadePredict(a) => cascade(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Params(a) => params(a),
        Command::PlotLosses(a) => plot::plot_losses(a),
        Command::Pipeline(a) => crate::pipeline::pipeline(a),
        Command::Synth(a) => synth(a),
    }
}

fn create_parent(path: &Path) -> CliResult {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p)?;
    }
    Ok(())
}

/// Training slices for a stage from every labelled case in `data`.
pub fn stage_samples(
    data: &Path,
    stage: Stage,
    channels: Channels,
    scaling: Scaling,
    target: LabelTarget,
) -> CliResult<Vec<SliceSample>> {
    let cases = lits_cases(data)?;
    let mut out = Vec::new();
    for case in cases.iter().filter(|c| c.segmentation.is_some()) {
        let ct = CtVolume::read(&case.volume)?;
        let labels = LabelVolume::read(case.segmentation.as_ref().expect("filtered"))?;
        if labels.labels.dim() != ct.voxels.dim() {
            return Err(Failure::user(format!(
                "{}: label grid {:?} differs from volume grid {:?}",
                case.id,
                labels.labels.dim(),
                ct.voxels.dim()
            )));
        }
        let image = preprocess_volume(&ct, scaling)?;
        let before = out.len();
        match stage {
            Stage::Liver => {
                let mut samples = filter_liver_slices(liver_samples(image.view(), &labels, channels, target)?);
                for s in &mut samples {
                    s.volume = case.id.clone();
                }
                out.extend(samples);
            }
            Stage::Tumor => {
                let liver = labels.liver_mask();
                for (mut sample, g) in tumor_samples(image.view(), &labels, channels)? {
                    if g.is_lossless() {
                        let mask = liver.slice(s![g.slice, .., ..]);
                        let back = cascade_invert(cascade_forward_mask(mask, &g)?.view(), &g)?;
                        if back != mask {
                            return Err(Failure::Runtime(format!(
                                "{} slice {}: liver crop does not map back onto itself",
                                case.id, g.slice
                            )));
                        }
                    }
                    sample.volume = case.id.clone();
                    out.push(sample);
                }
            }
        }
        log::info!("{}: {} slices", case.id, out.len() - before);
    }
    if out.is_empty() {
        return Err(Failure::user(format!(
            "no labelled training slices found in {}",
            data.display()
        )));
    }
    Ok(out)
}

fn preprocess(a: PreprocessArgs) -> CliResult {
    let samples = stage_samples(
        &a.data,
        a.stage.into(),
        a.channels.into(),
        a.scaling.into(),
        a.label_target.into(),
    )?;
    create_parent(&a.out)?;
    write_cache(&a.out, &samples)?;
    println!("wrote {} slices to {}", samples.len(), a.out.display());
    Ok(())
}

fn weightmap(a: WeightmapArgs) -> CliResult {
    let labels = LabelVolume::read(&a.labels)?;
    let params = WeightMapParams {
        w: a.w,
        sigma: a.sigma,
        exponent: a.exponent.into(),
        roi: a.roi.into(),
    };
    params.validate()?;
    let target: LabelTarget = a.target.into();
    let tumor = labels.tumor_mask();
    let mut weights = Array3::zeros(labels.labels.dim());
    if let Some(dir) = &a.preview_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut previews = 0;
    for z in 0..labels.labels.dim().0 {
        let label = labels.labels.index_axis(Axis(0), z).mapv(|v| target.test(v));
        let roi = tumor.index_axis(Axis(0), z);
        let roi = (params.roi == bsunet::weightmap::RoiMode::Tumor).then_some(roi);
        let w = weight_map_for_label(label.view(), roi, &params)?;
        let has_contour = label.iter().any(|&v| v) && !label.iter().all(|&v| v);
        if let (Some(dir), true) = (&a.preview_dir, has_contour) {
            write_png(&dir.join(format!("slice-{z:04}.png")), &preview(w.view()))?;
            previews += 1;
        }
        weights.index_axis_mut(Axis(0), z).assign(&w);
    }
    create_parent(&a.out)?;
    write_scalar(weights.view(), labels.spacing, &a.out, labels.header.as_ref())?;
    println!("wrote {} ({} previews)", a.out.display(), previews);
    Ok(())
}

fn write_png(path: &Path, img: &ndarray::Array2<u8>) -> CliResult {
    let (h, w) = img.dim();
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let data: Vec<u8> = img.iter().copied().collect();
    enc.write_header()
        .and_then(|mut wr| wr.write_image_data(&data))
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn loss_csv_path(common: &TrainCommon) -> PathBuf {
    common.loss_csv.clone().unwrap_or_else(|| {
        let stem = common
            .out
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        common.out.with_file_name(format!("{stem}_loss.csv"))
    })
}

fn load_samples(cache: &Path, channels: Channels) -> CliResult<Vec<SliceSample>> {
    let samples = read_cache(cache)?;
    match samples.first() {
        None => Err(Failure::user(format!("{} holds no slices", cache.display()))),
        Some(s) if s.channels() != channels.count() => Err(Failure::user(format!(
            "{} holds {}-channel slices but the configuration uses {}",
            cache.display(),
            s.channels(),
            channels.count()
        ))),
        Some(_) => Ok(samples),
    }
}

/// Phase one for a stage, from configuration.
pub fn run_train_encoder(
    cfg: &RunConfig,
    stage: Stage,
    samples: &[SliceSample],
) -> CliResult<(TrainedEncoder, History)> {
    let spec = encoder_spec(&cfg.model_spec(stage)?)?;
    let net = spec.build(cfg.network.seed)?;
    Ok(train_encoder(net, samples, &cfg.train_config(stage))?)
}

/// Phase two (or baseline) for a stage, from configuration.
pub fn run_train_seg(
    cfg: &RunConfig,
    stage: Stage,
    samples: &[SliceSample],
    encoder: Option<&mut TrainedEncoder>,
) -> CliResult<(Network, History)> {
    let mut net = cfg.model_spec(stage)?.build(cfg.network.seed)?;
    let history = train_segmenter(&mut net, encoder, samples, &cfg.train_config(stage))?;
    Ok((net, history))
}

fn save_training(role: Role, network: Network, history: &History, ckpt: &Path, csv: &Path) -> CliResult {
    create_parent(ckpt)?;
    create_parent(csv)?;
    Checkpoint {
        role,
        iterations: history.len(),
        network,
    }
    .save(ckpt)?;
    history.write_csv(csv)?;
    if let Some(last) = history.rows().last() {
        println!(
            "{} iterations, final dice loss {:.5}, total {:.5}; wrote {} and {}",
            history.len(),
            last.dice,
            last.total,
            ckpt.display(),
            csv.display()
        );
    }
    Ok(())
}

fn train_encoder_cmd(a: TrainEncoderArgs) -> CliResult {
    let c = &a.common;
    let cfg = RunConfig::load(&c.config)?;
    let samples = load_samples(&c.cache, cfg.data.channels)?;
    let (enc, history) = run_train_encoder(&cfg, c.stage.into(), &samples)?;
    let ck = enc.checkpoint();
    save_training(Role::Encoder, ck.network, &history, &c.out, &loss_csv_path(c))
}

fn train_seg_cmd(a: TrainSegArgs) -> CliResult {
    let c = &a.common;
    let cfg = RunConfig::load(&c.config)?;
    let samples = load_samples(&c.cache, cfg.data.channels)?;
    let mut encoder = match &a.encoder {
        Some(p) => Some(TrainedEncoder::from_checkpoint(Checkpoint::load(p)?)?),
        None => None,
    };
    let (net, history) = run_train_seg(&cfg, c.stage.into(), &samples, encoder.as_mut())?;
    save_training(Role::Segmenter, net, &history, &c.out, &loss_csv_path(c))
}

/// A segmenter checkpoint and the slicing its input width implies.
pub fn load_segmenter(path: &Path) -> CliResult<(Network, Channels)> {
    let ck = Checkpoint::load(path)?;
    if ck.role != Role::Segmenter {
        return Err(Failure::user(format!(
            "{} holds an encoder, not a segmenter",
            path.display()
        )));
    }
    let channels = match SegmentationNetwork::in_channels(&ck.network) {
        1 => Channels::One,
        3 => Channels::Three,
        n => {
            return Err(Failure::user(format!(
                "{}: {n}-channel input is not supported",
                path.display()
            )))
        }
    };
    Ok((ck.network, channels))
}

/// Settings shared by the prediction commands.
#[derive(Debug, Clone, Copy)]
pub struct PredictOptions {
    pub scaling: Scaling,
    pub boundary: Boundary,
    pub batch: usize,
}

impl From<&PredictCommon> for PredictOptions {
    fn from(c: &PredictCommon) -> Self {
        PredictOptions {
            scaling: c.scaling.into(),
            boundary: c.boundary.into(),
            batch: c.batch,
        }
    }
}

fn for_each_volume(
    data: &Path,
    out: &Path,
    mut f: impl FnMut(&CtVolume) -> CliResult<Array3<u8>>,
) -> CliResult<Vec<PathBuf>> {
    let cases = lits_cases(data)?;
    if cases.is_empty() {
        return Err(Failure::user(format!("no volume-N files in {}", data.display())));
    }
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for case in cases {
        let ct = CtVolume::read(&case.volume)?;
        let labels = f(&ct)?;
        let path = out.join(segmentation_name(&case.id, false));
        LabelVolume::new(case.id.clone(), labels, ct.spacing)?.write(&path, ct.header.as_ref())?;
        log::info!("{} -> {}", case.id, path.display());
        written.push(path);
    }
    Ok(written)
}

pub fn predict_dir(
    model: &mut Network,
    channels: Channels,
    data: &Path,
    out: &Path,
    opt: PredictOptions,
    label: u8,
) -> CliResult<Vec<PathBuf>> {
    for_each_volume(data, out, |ct| {
        let image = preprocess_volume(ct, opt.scaling)?;
        let mask = predict_volume(model, image.view(), channels, opt.boundary, opt.batch)?;
        Ok(mask.mapv(|v| if v { label } else { 0 }))
    })
}

pub fn cascade_dir(
    liver: &mut Network,
    tumor: &mut Network,
    channels: Channels,
    data: &Path,
    out: &Path,
    opt: PredictOptions,
) -> CliResult<Vec<PathBuf>> {
    for_each_volume(data, out, |ct| {
        let image = preprocess_volume(ct, opt.scaling)?;
        Ok(cascade_predict(
            liver,
            tumor,
            image.view(),
            channels,
            opt.boundary,
            opt.batch,
        )?)
    })
}

fn predict(a: PredictArgs) -> CliResult {
    let (mut net, channels) = load_segmenter(&a.model)?;
    let written = predict_dir(
        &mut net,
        channels,
        &a.common.data,
        &a.common.out,
        (&a.common).into(),
        a.label,
    )?;
    println!("wrote {} label volumes to {}", written.len(), a.common.out.display());
    Ok(())
}

fn cascade(a: CascadePredictArgs) -> CliResult {
    let (mut liver, channels) = load_segmenter(&a.liver)?;
    let (mut tumor, tumor_channels) = load_segmenter(&a.tumor)?;
    if channels != tumor_channels {
        return Err(Failure::user("liver and tumor models take different channel counts"));
    }
    let written = cascade_dir(
        &mut liver,
        &mut tumor,
        channels,
        &a.common.data,
        &a.common.out,
        (&a.common).into(),
    )?;
    println!("wrote {} label volumes to {}", written.len(), a.common.out.display());
    Ok(())
}

/// Per-case metrics for every reference case that has a prediction.
pub fn evaluate_dirs(
    pred: &Path,
    truth: &Path,
    label: u8,
    connectivity: Connectivity,
) -> CliResult<Vec<(String, CaseMetrics)>> {
    let preds = segmentation_files(pred)?;
    let truths = segmentation_files(truth)?;
    let mut out = Vec::new();
    for (n, tpath) in &truths {
        let Some(ppath) = preds.get(n) else {
            return Err(Failure::user(format!(
                "no prediction for segmentation-{n} in {}",
                pred.display()
            )));
        };
        let t = LabelVolume::read(tpath)?;
        let p = LabelVolume::read(ppath)?;
        let select = |l: &LabelVolume| if label == 1 { l.liver_mask() } else { l.tumor_mask() };
        let m = evaluate_case(select(&p).view(), select(&t).view(), t.spacing_zyx(), connectivity)?;
        out.push((format!("segmentation-{n}"), m));
    }
    if out.is_empty() {
        return Err(Failure::user(format!("no segmentation-N files in {}", truth.display())));
    }
    Ok(out)
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        String::new()
    }
}

/// Per-case rows then a `summary` row; columns follow the reporting order
/// DPC, DG, VOE, RVD, ASSD, MSD, RSSD, then the voxel counts.
pub fn write_metrics_csv(path: &Path, cases: &[(String, CaseMetrics)], summary: &Summary) -> CliResult {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "case",
        "dpc",
        "dg",
        "voe",
        "rvd",
        "assd",
        "msd",
        "rssd",
        "intersection",
        "pred",
        "truth",
    ])?;
    for (id, m) in cases {
        let c = m.counts;
        w.write_record([
            id.clone(),
            num(m.dice),
            String::new(),
            num(m.voe),
            num(m.rvd),
            num(m.assd),
            num(m.msd),
            num(m.rssd),
            c.intersection.to_string(),
            c.pred.to_string(),
            c.truth.to_string(),
        ])?;
    }
    let total = |f: fn(&CaseMetrics) -> usize| cases.iter().map(|(_, m)| f(m)).sum::<usize>().to_string();
    w.write_record([
        "summary".to_string(),
        num(summary.dpc),
        num(summary.dg),
        num(summary.voe),
        num(summary.rvd),
        num(summary.assd),
        num(summary.msd),
        num(summary.rssd),
        total(|m| m.counts.intersection),
        total(|m| m.counts.pred),
        total(|m| m.counts.truth),
    ])?;
    w.flush()?;
    Ok(())
}

pub fn print_summary(label: u8, s: &Summary) {
    let what = if label == 1 { "liver" } else { "tumor" };
    println!("{what} over {} cases", s.cases);
    println!(
        "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "DPC", "DG", "VOE", "RVD", "ASSD", "MSD", "RSSD"
    );
    println!(
        "{:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.3} {:>8.3} {:>8.3}",
        s.dpc, s.dg, s.voe, s.rvd, s.assd, s.msd, s.rssd
    );
    if s.excluded_rvd + s.excluded_surface > 0 {
        println!(
            "undefined values left out: RVD {}, surface distances {}",
            s.excluded_rvd, s.excluded_surface
        );
    }
}

fn evaluate(a: EvaluateArgs) -> CliResult {
    let cases = evaluate_dirs(&a.pred, &a.truth, a.label, a.connectivity.into())?;
    let metrics: Vec<CaseMetrics> = cases.iter().map(|(_, m)| *m).collect();
    let summary = summarize(&metrics);
    write_metrics_csv(&a.out, &cases, &summary)?;
    print_summary(a.label, &summary);
    Ok(())
}

fn params(a: ParamsArgs) -> CliResult {
    let spec = bsunet::network::ModelSpec::load(&a.spec)?;
    let table = spec.parameter_table()?;
    let width = table.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
    println!("{} ({})", spec.name(), a.spec.display());
    for (name, n) in &table {
        println!("{name:<width$} {n:>12}");
    }
    let total = spec.num_parameters()?;
    println!("{:<width$} {total:>12}", "total");
    if let Some(expect) = a.expect {
        if expect != total {
            return Err(Failure::user(format!("expected {expect} parameters, counted {total}")));
        }
        println!("matches --expect {expect}");
    }
    Ok(())
}

fn synth(a: SynthArgs) -> CliResult {
    std::fs::create_dir_all(&a.out)?;
    for i in 0..a.cases {
        let id = format!("volume-{i}");
        let (ct, labels) = synthetic_case(&id, (a.depth, a.size, a.size), a.seed.wrapping_add(i as u64))?;
        write_ct(&ct, a.out.join(format!("{id}.nii")))?;
        labels.write(a.out.join(segmentation_name(&id, false)), None)?;
    }
    println!("wrote {} synthetic cases to {}", a.cases, a.out.display());
    Ok(())
}
