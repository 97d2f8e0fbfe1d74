//! Training loop, train/validation split and evaluation metrics.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_params, warp_image, warp_landmarks, AugmentConfig};
use crate::autodiff::Graph;
use crate::codec::{decode, detect_double_attention, encode, indicator, rescale, CodecConfig, HeatmapStack};
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::loss::{weighted_loss, weighted_loss_graph};
use crate::model::{Mode, UNetModel};
use crate::optim::{adam_step, AdamState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub split_ratio: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub codec: CodecConfig,
    /// Record wall-clock seconds per epoch. Off by default so that loss logs
    /// are reproducible byte for byte.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 0.005,
            epochs: 400,
            split_ratio: 0.8,
            seed: 0,
            augment: AugmentConfig::default(),
            codec: CodecConfig::default(),
            record_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split ratio must be in (0, 1), got {}", self.split_ratio)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        self.augment.validate()?;
        self.codec.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,seconds";

    pub fn csv_row(&self) -> String {
        format!("{},{:.8},{:.8},{:.3}", self.epoch, self.train_loss, self.val_loss, self.seconds)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(EpochRecord::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

pub struct TrainOutcome {
    pub history: TrainHistory,
    /// Snapshot with the lowest validation loss, if any epoch ran.
    pub best: Option<(usize, UNetModel<f32>)>,
}

/// Seeded shuffle of `0..n`; the first `ceil(ratio * n)` indices train,
/// the rest validate. At least one sample is always held out.
pub fn split(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::DatasetTooSmall { size: n, min: 2 });
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = ((ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
    let val = idx.split_off(train);
    Ok((idx, val))
}

/// Independent stream for `(seed, a, b)` via a splitmix64 finaliser.
fn stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Ground-truth stack and indicator for one sample on the heatmap grid.
pub fn ground_truth(sample: &Sample, codec: &CodecConfig) -> Result<(HeatmapStack, Tensor<f32>)> {
    let grid = rescale(&sample.landmarks, sample.landmarks.grid_size(), codec.grid_size)?;
    let gt = encode(&grid, codec)?;
    let ind = indicator(&gt).masks().clone();
    Ok((gt, ind))
}

fn check_compatible(model: &UNetModel<f32>, dataset: &Dataset, codec: &CodecConfig) -> Result<()> {
    let cfg = model.config();
    if codec.grid_size != cfg.output_size() {
        return Err(Error::Config(format!(
            "codec grid {} does not match model output grid {}",
            codec.grid_size,
            cfg.output_size()
        )));
    }
    for s in &dataset.samples {
        if s.image.shape() != [3, cfg.input_size, cfg.input_size] {
            return Err(Error::Manifest {
                entry: s.id.clone(),
                reason: format!("image shape {:?} does not match model input {}", s.image.shape(), cfg.input_size),
            });
        }
        if s.landmarks.len() != cfg.num_landmarks {
            return Err(Error::Manifest {
                entry: s.id.clone(),
                reason: format!("{} landmarks, model predicts {}", s.landmarks.len(), cfg.num_landmarks),
            });
        }
    }
    Ok(())
}

/// Run the full protocol. `log` sees every epoch record as soon as it exists.
pub fn train(
    model: &mut UNetModel<f32>,
    dataset: &Dataset,
    config: &TrainConfig,
    log: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_compatible(model, dataset, &config.codec)?;
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            history: TrainHistory::default(),
            best: None,
        });
    }
    let (train_idx, val_idx) = split(dataset.len(), config.split_ratio, config.seed)?;
    train_split(model, dataset, &train_idx, &val_idx, config, log)
}

/// Train on explicit index lists. `val_idx` may be empty, in which case the
/// validation loss is reported as the training-set loss without augmentation.
pub fn train_split(
    model: &mut UNetModel<f32>,
    dataset: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    config: &TrainConfig,
    log: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_compatible(model, dataset, &config.codec)?;
    if train_idx.is_empty() {
        return Err(Error::DatasetTooSmall { size: 0, min: 1 });
    }
    let val_set = dataset.subset(if val_idx.is_empty() { train_idx } else { val_idx });
    let size = model.config().input_size;
    let lr = config.learning_rate as f32;
    let mut adam = AdamState::new(model.parameters().iter().map(|t| t.shape()));
    let mut order = train_idx.to_vec();
    let mut history = TrainHistory::default();
    let mut best: Option<(usize, f64, UNetModel<f32>)> = None;

    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut stream(config.seed, epoch as u64, u64::MAX));
        let mut loss_sum = 0.0;
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            let mut gts = Vec::with_capacity(chunk.len());
            let mut inds = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let sample = &dataset.samples[i];
                let mut rng = stream(config.seed, epoch as u64, i as u64);
                let params = sample_params(&config.augment, &mut rng, size, size);
                // Off-grid landmarks keep a cone at their clamped position.
                let (landmarks, _visible) = warp_landmarks(&sample.landmarks, &params)?;
                let warped = Sample {
                    id: String::new(),
                    image: warp_image(&sample.image, &params)?,
                    landmarks,
                };
                let (gt, ind) = ground_truth(&warped, &config.codec)?;
                images.push(warped.image);
                gts.push(gt.into_tensor());
                inds.push(ind);
            }
            let batch_loss = step(model, &mut adam, lr, &images, &gts, &inds)?;
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_no });
            }
            loss_sum += batch_loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / order.len() as f64;
        let val_loss = mean_loss(model, &val_set, &config.codec, config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            seconds: if config.record_time { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        log(&record)?;
        history.records.push(record);
        if best.as_ref().is_none_or(|(_, l, _)| val_loss < *l) {
            best = Some((epoch + 1, val_loss, model.clone()));
        }
    }
    Ok(TrainOutcome {
        history,
        best: best.map(|(e, _, m)| (e, m)),
    })
}

/// One optimizer step on a batch; returns the batch loss before the update.
fn refs(v: &[Tensor<f32>]) -> Vec<&Tensor<f32>> {
    v.iter().collect()
}

fn step(
    model: &mut UNetModel<f32>,
    adam: &mut AdamState<f32>,
    lr: f32,
    images: &[Tensor<f32>],
    gts: &[Tensor<f32>],
    inds: &[Tensor<f32>],
) -> Result<f64> {
    let batch = Tensor::stack(&refs(images))?;
    let gt = Tensor::stack(&refs(gts))?;
    let ind = Tensor::stack(&refs(inds))?;
    let mut graph = Graph::new();
    let bound = model.bind(&mut graph);
    let input = graph.constant(batch);
    let out = model.forward(&mut graph, &bound, input, Mode::Train)?;
    let loss = weighted_loss_graph(&mut graph, out.heatmaps, &gt, &ind)?;
    let value = graph.value(loss.total).item()? as f64;
    if !value.is_finite() {
        return Ok(value);
    }
    graph.backward(loss.total)?;
    let grads = model.gradients(&graph, &bound);
    drop(graph);
    model.apply_norm_updates(&out.norm_updates);
    let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
    adam_step(&mut model.parameters_mut(), &grad_refs, adam, lr)?;
    Ok(value)
}

/// Anything that maps images to heatmap stacks.
pub trait HeatmapPredictor {
    fn predict(&self, images: &[&Tensor<f32>]) -> Result<Vec<HeatmapStack>>;
}

impl HeatmapPredictor for UNetModel<f32> {
    fn predict(&self, images: &[&Tensor<f32>]) -> Result<Vec<HeatmapStack>> {
        let out = UNetModel::predict(self, &Tensor::stack(images)?)?;
        (0..images.len()).map(|i| HeatmapStack::new(out.outer(i)?)).collect()
    }
}

fn predict_all(predictor: &dyn HeatmapPredictor, dataset: &Dataset, batch: usize) -> Result<Vec<HeatmapStack>> {
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples.chunks(batch.max(1)) {
        let images: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
        out.extend(predictor.predict(&images)?);
    }
    Ok(out)
}

/// Mean weighted loss of `predictor` over `dataset`, without augmentation.
pub fn mean_loss(predictor: &dyn HeatmapPredictor, dataset: &Dataset, codec: &CodecConfig, batch: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::DatasetTooSmall { size: 0, min: 1 });
    }
    let preds = predict_all(predictor, dataset, batch)?;
    let mut total = 0.0;
    for (sample, pred) in dataset.samples.iter().zip(&preds) {
        let (gt, _) = ground_truth(sample, codec)?;
        total += weighted_loss(pred, &gt, &indicator(&gt))?.value;
    }
    Ok(total / dataset.len() as f64)
}

/// Peak threshold used for the double-attention rate.
pub const DOUBLE_ATTENTION_THRESHOLD: f32 = 0.5;
/// Landmarks decoded within this many heatmap pixels count as hits.
pub const HIT_RADIUS: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub id: String,
    pub loss: f64,
    pub mean_pixel_error: f64,
    pub max_pixel_error: f64,
    pub errors: Vec<f64>,
    pub double_attention: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub mean_loss: f64,
    /// Mean Euclidean error over all landmarks, in heatmap-grid pixels.
    pub mean_pixel_error: f64,
    pub within_2px: f64,
    pub double_attention_rate: f64,
    pub samples: Vec<SampleMetrics>,
}

/// Score predicted stacks against the dataset's landmarks on the codec grid.
pub fn score(preds: &[HeatmapStack], dataset: &Dataset, codec: &CodecConfig) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::DatasetTooSmall { size: 0, min: 1 });
    }
    if preds.len() != dataset.len() {
        return Err(Error::Config(format!("{} predictions for {} samples", preds.len(), dataset.len())));
    }
    let mut samples = Vec::with_capacity(dataset.len());
    for (sample, pred) in dataset.samples.iter().zip(preds) {
        if pred.grid_size() != codec.grid_size {
            return Err(Error::Config(format!(
                "prediction grid {} does not match codec grid {}",
                pred.grid_size(),
                codec.grid_size
            )));
        }
        let truth = rescale(&sample.landmarks, sample.landmarks.grid_size(), codec.grid_size)?;
        let gt = encode(&truth, codec)?;
        let loss = weighted_loss(pred, &gt, &indicator(&gt))?.value;
        let decoded = decode(pred);
        let errors: Vec<f64> = decoded
            .points()
            .iter()
            .zip(truth.points())
            .map(|(a, b)| a.distance(*b))
            .collect();
        let double_attention = (0..pred.len())
            .filter(|&i| {
                detect_double_attention(pred.map(i), pred.grid_size(), DOUBLE_ATTENTION_THRESHOLD, codec.radius).len() > 1
            })
            .count();
        samples.push(SampleMetrics {
            id: sample.id.clone(),
            loss,
            mean_pixel_error: errors.iter().sum::<f64>() / errors.len() as f64,
            max_pixel_error: errors.iter().cloned().fold(0.0, f64::max),
            errors,
            double_attention,
        });
    }
    let landmarks: usize = samples.iter().map(|s| s.errors.len()).sum();
    let all_errors = samples.iter().flat_map(|s| s.errors.iter());
    Ok(Metrics {
        mean_loss: samples.iter().map(|s| s.loss).sum::<f64>() / samples.len() as f64,
        mean_pixel_error: all_errors.clone().sum::<f64>() / landmarks as f64,
        within_2px: all_errors.filter(|&&e| e <= HIT_RADIUS).count() as f64 / landmarks as f64,
        double_attention_rate: samples.iter().map(|s| s.double_attention).sum::<usize>() as f64 / landmarks as f64,
        samples,
    })
}

pub fn evaluate(predictor: &dyn HeatmapPredictor, dataset: &Dataset, codec: &CodecConfig) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::DatasetTooSmall { size: 0, min: 1 });
    }
    let preds = predict_all(predictor, dataset, 8)?;
    score(&preds, dataset, codec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let (t, v) = split(10, 0.8, 1).unwrap();
        assert_eq!((t.len(), v.len()), (8, 2));
        let (t, v) = split(5, 0.8, 1).unwrap();
        assert_eq!((t.len(), v.len()), (4, 1));
        let (t, v) = split(2, 0.8, 1).unwrap();
        assert_eq!((t.len(), v.len()), (1, 1));
        assert!(matches!(split(1, 0.8, 1), Err(Error::DatasetTooSmall { .. })));
        assert!(split(10, 1.0, 1).is_err());
    }

    #[test]
    fn split_is_deterministic_disjoint_exhaustive() {
        let (t1, v1) = split(50, 0.8, 42).unwrap();
        let (t2, v2) = split(50, 0.8, 42).unwrap();
        assert_eq!((&t1, &v1), (&t2, &v2));
        let mut all: Vec<usize> = t1.iter().chain(&v1).copied().collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_ne!(split(50, 0.8, 43).unwrap().0, t1);
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.learning_rate, c.epochs, c.split_ratio), (8, 0.005, 400, 0.8));
        assert_eq!(c.codec.radius, 10.0);
        assert!(c.validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { split_ratio: 0.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..c }.validate().is_err());
    }

    #[test]
    fn csv_format() {
        let h = TrainHistory {
            records: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.25,
                seconds: 0.0,
            }],
        };
        assert_eq!(h.to_csv(), "epoch,train_loss,val_loss,seconds\n1,0.50000000,0.25000000,0.000\n");
    }
}
