//! Per-pixel seven-class layer segmentation.

pub mod augment;
pub mod baselines;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{soft_dice_with_grad, softmax_channels, Var};
use crate::error::{Error, Result};
use crate::metrics::dice_coefficient;
use crate::nn::{divergence, Adam, Conv2d, ConvTranspose2d, ParamSet, UNet, UNetOutput};
use crate::phantom::{ImageMaskPair, NUM_LABELS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::util::{config_hash, read_json, stream_seed, unix_time, write_file, write_json};

pub use augment::{classical_augment, AugmentConfig, GeometricTransform, Resample};
pub use baselines::{bilinear_baseline, fill_gaps_bilinear, gan_reconstruction_baseline};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    UnetSmall,
    AsppVariant,
}

impl Backbone {
    pub fn id(self) -> &'static str {
        match self {
            Backbone::UnetSmall => "unet_small",
            Backbone::AsppVariant => "aspp_variant",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    pub backbone: Backbone,
    pub widths: Vec<usize>,
    pub classes: usize,
    pub lr: f64,
    /// Multiplies the learning rate after `plateau_epochs` epochs without
    /// validation improvement.
    pub lr_decay: f64,
    pub plateau_epochs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub smooth: f64,
    pub augment: Option<AugmentConfig>,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            backbone: Backbone::UnetSmall,
            widths: vec![16, 32, 64],
            classes: NUM_LABELS,
            lr: 1e-4,
            lr_decay: 0.1,
            plateau_epochs: 3,
            max_epochs: 50,
            patience: 5,
            batch_size: 4,
            seed: 0,
            smooth: 1.0,
            augment: None,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes != NUM_LABELS {
            return bad(format!("classes must be {NUM_LABELS}, got {}", self.classes));
        }
        if self.patience >= self.max_epochs {
            return bad(format!(
                "patience {} must be below max epochs {}",
                self.patience, self.max_epochs
            ));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("widths {:?}", self.widths));
        }
        if self.backbone == Backbone::AsppVariant && self.widths.len() != 3 {
            return bad("aspp_variant takes exactly three widths".into());
        }
        if !(self.lr >= 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || !(self.smooth > 0.0) {
            return bad("lr, lr_decay and smooth out of range".into());
        }
        if self.batch_size == 0 || self.plateau_epochs == 0 {
            return bad("batch size and plateau epochs must be positive".into());
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

fn norm_relu<T: Scalar>(x: Var<T>) -> Var<T> {
    x.instance_norm(T::lit(NORM_EPS)).relu()
}

/// Two downsamplings, a dilated spatial pyramid at quarter resolution,
/// and a skip-connected decoder.
#[derive(Clone, Debug)]
struct AsppNet<T: Scalar> {
    stem: Conv2d<T>,
    down1: (Conv2d<T>, Conv2d<T>),
    down2: Conv2d<T>,
    branches: Vec<Conv2d<T>>,
    project: Conv2d<T>,
    up2: (ConvTranspose2d<T>, Conv2d<T>),
    up1: (ConvTranspose2d<T>, Conv2d<T>),
    head: Conv2d<T>,
}

impl<T: Scalar> AsppNet<T> {
    fn new(p: &mut ParamSet<T>, w: &[usize], classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let (w0, w1, w2) = (w[0], w[1], w[2]);
        let mut branches = vec![Conv2d::new(p, "aspp.b0", w2, w2, 1, 1, 0, rng)];
        for d in [2, 4, 6] {
            branches.push(Conv2d::new(p, &format!("aspp.b{d}"), w2, w2, 3, 1, d, rng).dilated(d));
        }
        AsppNet {
            stem: Conv2d::new(p, "aspp.stem", 1, w0, 3, 1, 1, rng),
            down1: (
                Conv2d::new(p, "aspp.down1.a", w0, w1, 4, 2, 1, rng),
                Conv2d::new(p, "aspp.down1.b", w1, w1, 3, 1, 1, rng),
            ),
            down2: Conv2d::new(p, "aspp.down2", w1, w2, 4, 2, 1, rng),
            branches,
            project: Conv2d::new(p, "aspp.project", 4 * w2, w2, 1, 1, 0, rng),
            up2: (
                ConvTranspose2d::new(p, "aspp.up2.t", w2, w1, 4, 2, 1, rng),
                Conv2d::new(p, "aspp.up2.c", 2 * w1, w1, 3, 1, 1, rng),
            ),
            up1: (
                ConvTranspose2d::new(p, "aspp.up1.t", w1, w0, 4, 2, 1, rng),
                Conv2d::new(p, "aspp.up1.c", 2 * w0, w0, 3, 1, 1, rng),
            ),
            head: Conv2d::new(p, "aspp.head", w0, classes, 3, 1, 1, rng),
        }
    }

    fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let s0 = norm_relu(self.stem.forward(x)?);
        let s1 = norm_relu(self.down1.0.forward(&s0)?);
        let s1 = norm_relu(self.down1.1.forward(&s1)?);
        let s2 = norm_relu(self.down2.forward(&s1)?);
        let pyramid = self
            .branches
            .iter()
            .map(|b| b.forward(&s2).map(norm_relu))
            .collect::<Result<Vec<_>>>()?;
        let h = norm_relu(
            self.project
                .forward(&Var::concat_channels(&pyramid.iter().collect::<Vec<_>>())?)?,
        );
        let u = norm_relu(self.up2.0.forward(&h)?);
        let h = norm_relu(self.up2.1.forward(&Var::concat_channels(&[&u, &s1])?)?);
        let u = norm_relu(self.up1.0.forward(&h)?);
        let h = norm_relu(self.up1.1.forward(&Var::concat_channels(&[&u, &s0])?)?);
        self.head.forward(&h)
    }
}

#[derive(Clone, Debug)]
enum Network<T: Scalar> {
    Unet(UNet<T>),
    Aspp(AsppNet<T>),
}

#[derive(Clone, Debug)]
pub struct Segmenter<T: Scalar> {
    pub config: SegConfig,
    pub params: ParamSet<T>,
    net: Network<T>,
}

impl<T: Scalar> Segmenter<T> {
    pub fn new(config: SegConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let net = match config.backbone {
            Backbone::UnetSmall => Network::Unet(UNet::new(
                &mut params,
                "seg",
                1,
                config.classes,
                &config.widths,
                UNetOutput::Logits,
                &mut rng,
            )),
            Backbone::AsppVariant => Network::Aspp(AsppNet::new(&mut params, &config.widths, config.classes, &mut rng)),
        };
        Ok(Segmenter { config, params, net })
    }

    /// Height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        match &self.net {
            Network::Unet(u) => 1 << u.depth(),
            Network::Aspp(_) => 4,
        }
    }

    /// Logits `[n, classes, h, w]` for images `[n, 1, h, w]`.
    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        let f = self.divisor();
        if s.len() != 4 || s[1] != 1 || !s[2].is_multiple_of(f) || !s[3].is_multiple_of(f) {
            return Err(Error::Shape(format!(
                "segmenter expects [n, 1, h, w] with h, w divisible by {f}, got {s:?}"
            )));
        }
        match &self.net {
            Network::Unet(u) => u.forward(x),
            Network::Aspp(a) => a.forward(x),
        }
    }
}

/// `1 - mean` soft Dice over layers 1..=6 of normalized probabilities
/// `[n, classes, h, w]`.
pub fn dice_loss<T: Scalar>(probabilities: &Tensor<T>, target: &[u8], smooth: f64) -> Result<f64> {
    let (n, k, h, w) = probabilities.dims4();
    if target.len() != n * h * w {
        return Err(Error::Shape(format!("{} labels for {n}x{h}x{w} pixels", target.len())));
    }
    for b in 0..n {
        for px in 0..h * w {
            let s: f64 = (0..k)
                .map(|c| probabilities.data()[(b * k + c) * h * w + px].as_f64())
                .sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::Validation(format!("probabilities at pixel {px} sum to {s}")));
            }
        }
    }
    Ok(soft_dice_with_grad(probabilities, target, 1, T::lit(smooth)).0.as_f64())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    /// Class-major `[classes, h, w]` when retained.
    pub probabilities: Option<Vec<f32>>,
}

fn image_batch<T: Scalar>(pairs: &[&ImageMaskPair]) -> Result<(Tensor<T>, Vec<u8>)> {
    let (h, w) = (pairs[0].height, pairs[0].width);
    if pairs.iter().any(|p| (p.height, p.width) != (h, w)) {
        return Err(Error::Shape("mixed image sizes in batch".into()));
    }
    let x = Tensor::from_vec(
        &[pairs.len(), 1, h, w],
        pairs
            .iter()
            .flat_map(|p| p.image.iter().map(|&v| T::lit(v as f64)))
            .collect(),
    )?;
    Ok((x, pairs.iter().flat_map(|p| p.mask.iter().copied()).collect()))
}

fn argmax_labels<T: Scalar>(probs: &Tensor<T>, sample: usize) -> Vec<u8> {
    let (_, k, h, w) = probs.dims4();
    let plane = h * w;
    let data = probs.sample(sample);
    (0..plane)
        .map(|px| {
            let mut best = 0;
            for c in 1..k {
                if data[c * plane + px] > data[best * plane + px] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

pub fn predict_masks<T: Scalar>(
    model: &Segmenter<T>,
    images: &[&[f32]],
    height: usize,
    width: usize,
    keep_probabilities: bool,
) -> Result<Vec<PredictionMask>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        if let Some(bad) = chunk.iter().find(|i| i.len() != height * width) {
            return Err(Error::Shape(format!(
                "image has {} pixels, expected {height}x{width}",
                bad.len()
            )));
        }
        let x = Tensor::from_vec(
            &[chunk.len(), 1, height, width],
            chunk.iter().flat_map(|i| i.iter().map(|&v| T::lit(v as f64))).collect(),
        )?;
        let probs = softmax_channels(&model.forward(&Var::constant(x))?.value());
        for s in 0..chunk.len() {
            out.push(PredictionMask {
                height,
                width,
                labels: argmax_labels(&probs, s),
                probabilities: keep_probabilities.then(|| probs.sample(s).iter().map(|v| v.as_f64() as f32).collect()),
            });
        }
    }
    Ok(out)
}

pub fn predict_mask<T: Scalar>(
    model: &Segmenter<T>,
    image: &[f32],
    height: usize,
    width: usize,
) -> Result<PredictionMask> {
    Ok(predict_masks(model, &[image], height, width, true)?.remove(0))
}

/// Mean over pairs of the six-layer mean Dice; pairs with no layer present
/// in either mask are skipped.
pub fn mean_dice<T: Scalar>(model: &Segmenter<T>, pairs: &[ImageMaskPair]) -> Result<f64> {
    let scores: Vec<f64> = per_sample_dice(model, pairs)?.into_iter().flatten().collect();
    Ok(scores.iter().sum::<f64>() / scores.len().max(1) as f64)
}

pub fn per_sample_dice<T: Scalar>(model: &Segmenter<T>, pairs: &[ImageMaskPair]) -> Result<Vec<Option<f64>>> {
    let Some(first) = pairs.first() else {
        return Ok(Vec::new());
    };
    let images: Vec<&[f32]> = pairs.iter().map(|p| p.image.as_slice()).collect();
    let preds = predict_masks(model, &images, first.height, first.width, false)?;
    preds
        .iter()
        .zip(pairs)
        .map(|(p, t)| Ok(dice_coefficient(&p.labels, &t.mask)?.mean))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMeta {
    pub epoch: usize,
    pub val_dice: f64,
    pub config_hash: String,
    pub seed: u64,
    pub created_at: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_dice: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct SegCheckpoint<T: Scalar> {
    pub model: Segmenter<T>,
    pub meta: SegMeta,
    pub history: Vec<SegEpochLog>,
}

impl<T: Scalar> SegCheckpoint<T> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.params.save(&dir.join("segmenter.bin"))?;
        write_json(&dir.join("config.json"), &self.model.config)?;
        write_json(&dir.join("meta.json"), &self.meta)?;
        let mut csv = String::from("epoch,loss,val_dice,lr\n");
        for h in &self.history {
            let _ = writeln!(csv, "{},{:.6},{:.6},{:e}", h.epoch, h.loss, h.val_dice, h.lr);
        }
        write_file(&dir.join("train_log.csv"), csv)
    }
}

pub fn load_segmenter<T: Scalar>(dir: &Path) -> Result<SegCheckpoint<T>> {
    let model = Segmenter::new(read_json(&dir.join("config.json"))?)?;
    model.params.load(&dir.join("segmenter.bin"))?;
    Ok(SegCheckpoint {
        model,
        meta: read_json(&dir.join("meta.json"))?,
        history: Vec::new(),
    })
}

/// Adam on the soft Dice loss with plateau decay and early stopping on
/// validation mean Dice; returns the best-validation weights.
pub fn train_segmenter<T: Scalar>(
    train: &[ImageMaskPair],
    validation: &[ImageMaskPair],
    config: &SegConfig,
    out_dir: Option<&Path>,
) -> Result<SegCheckpoint<T>> {
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Config(
            "segmentation needs non-empty training and validation sets".into(),
        ));
    }
    for p in train.iter().chain(validation) {
        p.validate()?;
    }
    let model = Segmenter::<T>::new(config.clone())?;
    let mut opt = Adam::new(&model.params, config.lr, 0.9, 0.999);
    let smooth = T::lit(config.smooth);
    let mut best: Option<(f64, usize, Vec<Tensor<T>>)> = None;
    let (mut stale, mut plateau) = (0, 0);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(config.seed, epoch, 0)));
        let (mut total, mut steps) = (0.0, 0usize);
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let batch = idx
                .iter()
                .map(|&i| match &config.augment {
                    Some(a) => classical_augment(&train[i], a, stream_seed(config.seed, epoch, i + 1)),
                    None => Ok(train[i].clone()),
                })
                .collect::<Result<Vec<_>>>()?;
            let (x, labels) = image_batch::<T>(&batch.iter().collect::<Vec<_>>())?;
            let loss = model.forward(&Var::constant(x))?.softmax_dice_loss(&labels, 1, smooth);
            let l = loss.item().as_f64();
            if !l.is_finite() {
                return Err(divergence(
                    out_dir,
                    epoch,
                    step,
                    format!("dice loss = {l}"),
                    &[("segmenter", &model.params)],
                    &json!({ "epoch": epoch, "step": step, "loss": l, "lr": opt.lr }),
                ));
            }
            loss.backward();
            opt.step(&model.params);
            total += l;
            steps += 1;
        }
        let val_dice = mean_dice(&model, validation)?;
        log::info!(
            "seg epoch {epoch}: loss {:.4}, val dice {val_dice:.4}",
            total / steps as f64
        );
        history.push(SegEpochLog {
            epoch,
            loss: total / steps as f64,
            val_dice,
            lr: opt.lr,
        });
        if best.as_ref().is_none_or(|b| val_dice > b.0) {
            best = Some((val_dice, epoch, model.params.snapshot()));
            stale = 0;
            plateau = 0;
        } else {
            stale += 1;
            plateau += 1;
            if stale >= config.patience {
                break;
            }
            if plateau >= config.plateau_epochs {
                opt.lr *= config.lr_decay;
                plateau = 0;
            }
        }
    }
    let (val_dice, epoch, weights) = best.expect("at least one epoch runs");
    model.params.restore(&weights)?;
    let checkpoint = SegCheckpoint {
        meta: SegMeta {
            epoch,
            val_dice,
            config_hash: config_hash(config),
            seed: config.seed,
            created_at: unix_time(),
        },
        model,
        history,
    };
    if let Some(dir) = out_dir {
        checkpoint.save(dir)?;
    }
    Ok(checkpoint)
}
