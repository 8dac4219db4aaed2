//! Two-phase training (label-map encoder, then the bottleneck-supervised
//! segmenter), the step learning-rate schedule, and slice-wise prediction of
//! whole volumes including the liver → tumor cascade.
//!
//! Epochs are indexed from 0, so epoch 0 runs at the initial rate.

use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView3, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::{cascade_invert, cascade_preprocess};
use crate::checkpoint::{Checkpoint, Role};
use crate::datapipe::{augment_liver, augment_tumor, Channels, SliceSample};
use crate::error::{Error, Result};
use crate::losses::{batch_dice, batch_euclidean, EuclideanForm, LossWeights};
use crate::network::{ModelSpec, Network, SegmentationNetwork};
use crate::nn::{Mode, Parameterized};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::tensor::Tensor;
use crate::volume::{LIVER, TUMOR};
use crate::weightmap::WeightMapParams;

/// `initial · decay^⌊n / period⌋` for epoch `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_period")]
    pub period: usize,
}

fn default_decay() -> f64 {
    0.3
}

fn default_period() -> usize {
    3
}

impl LrSchedule {
    pub fn new(initial: f64) -> Self {
        LrSchedule {
            initial,
            decay: default_decay(),
            period: default_period(),
        }
    }

    pub fn rate(&self, epoch: usize) -> f64 {
        self.initial * self.decay.powi((epoch / self.period) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.initial.is_finite())
            || !(self.decay > 0.0 && self.decay <= 1.0)
            || self.period == 0
        {
            return Err(Error::config(format!(
                "learning-rate schedule {self:?} needs initial > 0, decay in (0, 1], period ≥ 1"
            )));
        }
        Ok(())
    }
}

pub fn lr_schedule(epoch: usize, initial: f64) -> f64 {
    LrSchedule::new(initial).rate(epoch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    #[default]
    Liver,
    Tumor,
}

impl Stage {
    pub fn default_batch_size(self) -> usize {
        match self {
            Stage::Liver => 10,
            Stage::Tumor => 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early after this many optimizer steps.
    #[serde(default)]
    pub max_iterations: Option<usize>,
    pub lr: LrSchedule,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub euclidean: EuclideanForm,
    #[serde(default)]
    pub weightmap: WeightMapParams,
    /// Stage-specific random geometric augmentation.
    #[serde(default)]
    pub augment: bool,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale hyperparameters for a stage.
    pub fn for_stage(stage: Stage) -> Self {
        TrainConfig {
            stage,
            batch_size: stage.default_batch_size(),
            epochs: 50,
            max_iterations: None,
            lr: LrSchedule::new(1e-4),
            optimizer: OptimizerConfig::default(),
            loss_weights: LossWeights::default(),
            euclidean: EuclideanForm::default(),
            weightmap: WeightMapParams::default(),
            augment: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch size and epochs must be at least 1"));
        }
        self.lr.validate()?;
        self.optimizer.validate()?;
        self.loss_weights.validate()?;
        self.weightmap.validate()
    }
}

/// One logged optimizer step. Columns that a phase does not compute are empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub dice: f64,
    pub weighted_dice: Option<f64>,
    pub euclidean: Option<f64>,
    pub total: f64,
}

/// Append-only loss log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    rows: Vec<LossRow>,
}

impl History {
    pub fn push(&mut self, row: LossRow) {
        if let Some(last) = self.rows.last() {
            assert!(
                row.iteration > last.iteration,
                "loss history must be ordered by iteration"
            );
        }
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[LossRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let mut h = History::default();
        for row in rd.deserialize() {
            h.push(row?);
        }
        Ok(h)
    }
}

/// Spec of the skip-less encoding network matching a segmenter spec.
pub fn encoder_spec(spec: &ModelSpec) -> Result<ModelSpec> {
    match spec {
        ModelSpec::BaseUnet(s) => Ok(ModelSpec::BaseUnet(s.encoding_variant()?)),
        ModelSpec::OriginalUnet(_) => Err(Error::config(
            "bottleneck supervision needs a base U-Net; the original U-Net has no encoding variant",
        )),
    }
}

/// A label-map autoencoder that finished phase one. Its parameters are
/// only read from here on.
#[derive(Debug, Clone)]
pub struct TrainedEncoder {
    network: Network,
    iterations: usize,
}

impl TrainedEncoder {
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.role != Role::Encoder {
            return Err(Error::State("checkpoint holds a segmenter, not an encoder".into()));
        }
        if ck.iterations == 0 {
            return Err(Error::State("encoder checkpoint was never trained".into()));
        }
        check_encoder_network(&ck.network)?;
        Ok(TrainedEncoder {
            network: ck.network,
            iterations: ck.iterations,
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            role: Role::Encoder,
            iterations: self.iterations,
            network: self.network.clone(),
        }
    }

    /// Reconstruction and bottleneck code of label maps, inference mode.
    pub fn encode(&mut self, labels: &Tensor) -> Result<(Tensor, Tensor)> {
        self.network.forward_with_bottleneck(labels, Mode::Eval)
    }
}

fn check_encoder_network(net: &Network) -> Result<()> {
    match net.spec() {
        ModelSpec::BaseUnet(s) if !s.skip_connections => Ok(()),
        _ => Err(Error::config(
            "the encoding network must be a base U-Net without skip connections",
        )),
    }
}

/// `[N, C, H, W]` images, `[N, 1, H, W]` labels and weights, and the labels
/// replicated to `label_channels` for an encoder.
struct Batch {
    images: Tensor,
    labels: Tensor,
    weights: Tensor,
    label_inputs: Tensor,
}

fn planes_to_tensor<'a>(planes: impl ExactSizeIterator<Item = ArrayView3<'a, f64>>) -> Result<Tensor> {
    let mut shape = None;
    let mut data = Vec::new();
    let n = planes.len();
    for p in planes {
        let d = p.dim();
        if *shape.get_or_insert(d) != d {
            return Err(Error::shape("samples in a batch differ in size"));
        }
        data.extend(p.iter());
    }
    let (c, h, w) = shape.unwrap_or((1, 0, 0));
    Tensor::from_vec([n, c, h, w], data)
}

pub fn images_to_tensor(images: &[Array3<f64>]) -> Result<Tensor> {
    planes_to_tensor(images.iter().map(|a| a.view()))
}

fn make_batch(samples: &[&SliceSample], label_channels: usize) -> Result<Batch> {
    let as3 = |a: &Array2<f64>| a.view().insert_axis(ndarray::Axis(0)).to_owned();
    let labels: Vec<Array3<f64>> = samples
        .iter()
        .map(|s| as3(&s.label.mapv(|v| f64::from(u8::from(v)))))
        .collect();
    let weights: Vec<Array3<f64>> = samples.iter().map(|s| as3(&s.weight)).collect();
    let inputs: Vec<Array3<f64>> = samples.iter().map(|s| s.label_as_image(label_channels)).collect();
    Ok(Batch {
        images: planes_to_tensor(samples.iter().map(|s| s.image.view()))?,
        labels: images_to_tensor(&labels)?,
        weights: images_to_tensor(&weights)?,
        label_inputs: images_to_tensor(&inputs)?,
    })
}

/// Iterates shuffled mini-batches for each epoch, applying augmentation or
/// precomputed weight maps.
struct Loader<'a> {
    samples: Vec<SliceSample>,
    cfg: &'a TrainConfig,
    rng: ChaCha8Rng,
}

impl<'a> Loader<'a> {
    fn new(samples: &[SliceSample], cfg: &'a TrainConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        let mut samples = samples.to_vec();
        if !cfg.augment {
            for s in &mut samples {
                s.refresh_weight(&cfg.weightmap)?;
            }
        }
        Ok(Loader {
            samples,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    fn epoch(&mut self) -> Result<Vec<Vec<SliceSample>>> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut self.rng);
        let mut out = Vec::new();
        for chunk in order.chunks(self.cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &self.samples[i];
                batch.push(if self.cfg.augment {
                    let mut r = ChaCha8Rng::seed_from_u64(self.rng.random());
                    match self.cfg.stage {
                        Stage::Liver => augment_liver(s, &mut r, &self.cfg.weightmap)?,
                        Stage::Tumor => augment_tumor(s, &mut r, &self.cfg.weightmap)?,
                    }
                } else {
                    s.clone()
                });
            }
            out.push(batch);
        }
        Ok(out)
    }
}

fn finite_output(t: &Tensor, iteration: usize) -> Result<()> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged {
            iteration,
            what: "network output",
        })
    }
}

fn finite(v: f64, iteration: usize, what: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged { iteration, what })
    }
}

/// Phase one: trains a skip-less network to reproduce label maps, with the
/// plain dice loss.
pub fn train_encoder(
    mut network: Network,
    samples: &[SliceSample],
    cfg: &TrainConfig,
) -> Result<(TrainedEncoder, History)> {
    check_encoder_network(&network)?;
    let ic = SegmentationNetwork::in_channels(&network);
    let step = |net: &mut Network, b: &Batch, it: usize| -> Result<LossRow> {
        let prob = net.forward(&b.label_inputs, Mode::Train)?;
        finite_output(&prob, it)?;
        let (loss, grad) = batch_dice(&prob, &b.labels, None)?;
        let loss = finite(loss, it, "dice loss")?;
        net.backward(&grad, None)?;
        Ok(LossRow {
            iteration: 0,
            epoch: 0,
            lr: 0.0,
            dice: loss,
            weighted_dice: None,
            euclidean: None,
            total: loss,
        })
    };
    let history = train_loop(&mut network, samples, cfg, ic, step)?;
    if history.is_empty() {
        return Err(Error::State("encoder training ran no iterations".into()));
    }
    let iterations = history.len();
    Ok((TrainedEncoder { network, iterations }, history))
}

/// Phase two (or baseline training when `encoder` is `None` and `w2 = 0`):
/// `w1 · weighted dice + w2 · Euclidean(T¹, T²)` with `T¹` from the frozen
/// encoder.
pub fn train_segmenter(
    network: &mut Network,
    mut encoder: Option<&mut TrainedEncoder>,
    samples: &[SliceSample],
    cfg: &TrainConfig,
) -> Result<History> {
    let weights = cfg.loss_weights;
    if weights.w2 > 0.0 && encoder.is_none() {
        return Err(Error::State(
            "bottleneck supervision (w2 > 0) needs an encoder trained in phase one".into(),
        ));
    }
    let label_channels = encoder
        .as_ref()
        .map_or(1, |e| SegmentationNetwork::in_channels(&e.network));
    let form = cfg.euclidean;
    let step = |net: &mut Network, b: &Batch, it: usize| -> Result<LossRow> {
        let (prob, code) = net.forward_with_bottleneck(&b.images, Mode::Train)?;
        finite_output(&prob, it)?;
        let (wd, gd) = batch_dice(&prob, &b.labels, Some(&b.weights))?;
        let (dice, _) = batch_dice(&prob, &b.labels, None)?;
        let (euclid, d_code) = match encoder.as_deref_mut() {
            Some(enc) => {
                let (_, t1) = enc.encode(&b.label_inputs)?;
                if t1.len() != code.len() {
                    return Err(Error::config(format!(
                        "encoder bottleneck has {} values per batch but the segmenter has {}",
                        t1.len(),
                        code.len()
                    )));
                }
                let (e, g) = batch_euclidean(&t1, &code, form)?;
                (
                    Some(finite(e, it, "euclidean loss")?),
                    (weights.w2 > 0.0).then(|| g.map(|v| v * weights.w2)),
                )
            }
            None => (None, None),
        };
        let total = finite(weights.w1 * wd + weights.w2 * euclid.unwrap_or(0.0), it, "total loss")?;
        net.backward(&gd.map(|v| v * weights.w1), d_code.as_ref())?;
        Ok(LossRow {
            iteration: 0,
            epoch: 0,
            lr: 0.0,
            dice,
            weighted_dice: Some(wd),
            euclidean: euclid,
            total,
        })
    };
    train_loop(network, samples, cfg, label_channels, step)
}

fn train_loop(
    network: &mut Network,
    samples: &[SliceSample],
    cfg: &TrainConfig,
    label_channels: usize,
    mut step: impl FnMut(&mut Network, &Batch, usize) -> Result<LossRow>,
) -> Result<History> {
    cfg.validate()?;
    let mut loader = Loader::new(samples, cfg)?;
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut history = History::default();
    let mut iteration = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.lr.rate(epoch);
        for batch in loader.epoch()? {
            if cfg.max_iterations.is_some_and(|m| iteration >= m) {
                break 'epochs;
            }
            iteration += 1;
            let refs: Vec<&SliceSample> = batch.iter().collect();
            let b = make_batch(&refs, label_channels)?;
            network.zero_grad();
            let mut row = step(network, &b, iteration)?;
            opt.step(network, lr);
            row.iteration = iteration;
            row.epoch = epoch;
            row.lr = lr;
            log::debug!("iteration {iteration}: total {:.6}", row.total);
            history.push(row);
        }
        if let Some(r) = history.rows().last() {
            log::info!(
                "epoch {epoch}: lr {lr:e}, dice loss {:.5}, total {:.5}",
                r.dice,
                r.total
            );
        }
    }
    Ok(history)
}

/// Anything that maps a batch of slice images to probability maps.
pub trait SliceModel {
    fn in_channels(&self) -> usize;
    fn predict(&mut self, images: &Tensor) -> Result<Tensor>;
}

impl SliceModel for Network {
    fn in_channels(&self) -> usize {
        SegmentationNetwork::in_channels(self)
    }

    fn predict(&mut self, images: &Tensor) -> Result<Tensor> {
        self.forward(images, Mode::Eval)
    }
}

/// Probabilities at or above this value are foreground.
pub const THRESHOLD: f64 = 0.5;

pub fn is_foreground(p: f64) -> bool {
    p >= THRESHOLD
}

/// What three-channel prediction does with the first and last slice, which
/// lack a neighbor on one side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    /// Predict nothing there.
    #[default]
    Empty,
    /// Repeat the edge slice in place of the missing neighbor.
    Replicate,
}

/// Input image centered on slice `z`, or `None` for an empty boundary.
pub fn stacked_slice(image: ArrayView3<f64>, z: usize, channels: Channels, boundary: Boundary) -> Option<Array3<f64>> {
    let depth = image.dim().0;
    let h = channels.half_width() as isize;
    let z = z as isize;
    if boundary == Boundary::Empty && (z - h < 0 || z + h >= depth as isize) {
        return None;
    }
    let (_, ny, nx) = image.dim();
    let mut out = Array3::zeros((channels.count(), ny, nx));
    for (k, dz) in (-h..=h).enumerate() {
        let src = (z + dz).clamp(0, depth as isize - 1) as usize;
        out.slice_mut(s![k, .., ..]).assign(&image.slice(s![src, .., ..]));
    }
    Some(out)
}

fn check_model_channels(model: &dyn SliceModel, channels: Channels) -> Result<()> {
    if model.in_channels() != channels.count() {
        return Err(Error::config(format!(
            "model takes {} channels but {}-channel slicing was requested",
            model.in_channels(),
            channels.count()
        )));
    }
    Ok(())
}

/// Thresholded probability maps for a list of inputs, `batch` at a time.
fn predict_masks(model: &mut dyn SliceModel, inputs: &[Array3<f64>], batch: usize) -> Result<Vec<Array2<bool>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch.max(1)) {
        let prob = model.predict(&images_to_tensor(chunk)?)?;
        let (h, w) = (prob.height(), prob.width());
        for i in 0..prob.batch() {
            let p = prob.plane(i, 0);
            out.push(Array2::from_shape_fn((h, w), |(y, x)| is_foreground(p[y * w + x])));
        }
    }
    Ok(out)
}

/// Binary prediction for every slice of a preprocessed `[z, y, x]` volume.
/// Three-channel models attribute each triplet to its center slice.
pub fn predict_volume(
    model: &mut dyn SliceModel,
    image: ArrayView3<f64>,
    channels: Channels,
    boundary: Boundary,
    batch: usize,
) -> Result<Array3<bool>> {
    check_model_channels(model, channels)?;
    let (depth, ny, nx) = image.dim();
    let mut centers = Vec::new();
    let mut inputs = Vec::new();
    for z in 0..depth {
        if let Some(img) = stacked_slice(image, z, channels, boundary) {
            centers.push(z);
            inputs.push(img);
        }
    }
    let mut out = Array3::from_elem((depth, ny, nx), false);
    for (z, m) in centers.into_iter().zip(predict_masks(model, &inputs, batch)?) {
        if m.dim() != (ny, nx) {
            return Err(Error::shape(format!(
                "model returned {:?} for {:?} slices",
                m.dim(),
                (ny, nx)
            )));
        }
        out.slice_mut(s![z, .., ..]).assign(&m);
    }
    Ok(out)
}

/// Liver prediction followed by tumor prediction on liver crops; tumor is
/// confined to the predicted liver. Returns LiTS labels.
pub fn cascade_predict(
    liver_model: &mut dyn SliceModel,
    tumor_model: &mut dyn SliceModel,
    image: ArrayView3<f64>,
    channels: Channels,
    boundary: Boundary,
    batch: usize,
) -> Result<Array3<u8>> {
    check_model_channels(tumor_model, channels)?;
    let liver = predict_volume(liver_model, image, channels, boundary, batch)?;
    let mut labels = liver.mapv(|v| if v { LIVER } else { 0 });
    let mut crops = Vec::new();
    let mut geoms = Vec::new();
    for z in 0..image.dim().0 {
        let lz = liver.slice(s![z, .., ..]);
        if !lz.iter().any(|&v| v) {
            continue;
        }
        let Some(img) = stacked_slice(image, z, channels, Boundary::Replicate) else {
            continue;
        };
        if let Some((c, g)) = cascade_preprocess(img.view(), lz, z)? {
            crops.push(c);
            geoms.push(g);
        }
    }
    for (g, m) in geoms.iter().zip(predict_masks(tumor_model, &crops, batch)?) {
        let tumor = cascade_invert(m.view(), g)?;
        Zip::from(labels.slice_mut(s![g.slice, .., ..]))
            .and(&tumor)
            .and(liver.slice(s![g.slice, .., ..]))
            .for_each(|l, &t, &lv| {
                if t && lv {
                    *l = TUMOR;
                }
            });
    }
    Ok(labels)
}
