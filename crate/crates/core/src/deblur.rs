//! Image-only post-processor for generated slices: a UNet trained against
//! real images with an L1 + conditional PatchGAN objective.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::gan::{imp_tensor, InterSliceGan, PatchDiscriminator, PROB_EPS};
use crate::nn::{divergence, Adam, ParamSet, UNet, UNetOutput};
use crate::phantom::ImageMaskPair;
use crate::plan::TrainingTriplet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::util::{config_hash, read_json, stream_seed, unix_time, write_file, write_json};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeblurConfig {
    pub widths: Vec<usize>,
    pub disc_widths: Vec<usize>,
    /// Add the network output to its input (zero-initialized head).
    pub residual: bool,
    pub lambda_l1: f64,
    pub lambda_adv: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DeblurConfig {
    fn default() -> Self {
        DeblurConfig {
            widths: vec![32, 64, 128],
            disc_widths: vec![64, 128, 256],
            residual: true,
            lambda_l1: 100.0,
            lambda_adv: 1.0,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            max_epochs: 50,
            patience: 5,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl DeblurConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.disc_widths.is_empty() {
            return Err(Error::Config(format!(
                "deblur widths {:?} / {:?}",
                self.widths, self.disc_widths
            )));
        }
        if !(self.lambda_l1 > 0.0 && self.lambda_adv > 0.0) || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config(
                "deblur loss weights, batch size and patience must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DeblurModel<T: Scalar> {
    pub config: DeblurConfig,
    pub gen_params: ParamSet<T>,
    pub disc_params: ParamSet<T>,
    unet: UNet<T>,
    disc: PatchDiscriminator<T>,
}

impl<T: Scalar> DeblurModel<T> {
    pub fn new(config: DeblurConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut g = ParamSet::new();
        let output = if config.residual {
            UNetOutput::Residual
        } else {
            UNetOutput::Sigmoid
        };
        let unet = UNet::new(&mut g, "unet", 1, 1, &config.widths, output, &mut rng);
        let mut d = ParamSet::new();
        let disc = PatchDiscriminator::new(&mut d, "deblur.disc", 2, &config.disc_widths, &mut rng);
        Ok(DeblurModel {
            config,
            gen_params: g,
            disc_params: d,
            unet,
            disc,
        })
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        self.unet.forward(x)
    }

    /// Scores conditioned on the input image.
    pub fn discriminate(&self, input: &Var<T>, candidate: &Var<T>) -> Result<Var<T>> {
        self.disc.forward(&Var::concat_channels(&[input, candidate])?)
    }
}

/// `lambda_l1 * L1 + lambda_adv * -E log D(G)`.
pub fn deblur_generator_loss<T: Scalar>(
    output: &Var<T>,
    target: &Var<T>,
    fake_scores: &Var<T>,
    lambda_l1: f64,
    lambda_adv: f64,
) -> Result<Var<T>> {
    if output.shape() != target.shape() {
        return Err(Error::LossAssembly(format!(
            "output {:?} vs target {:?}",
            output.shape(),
            target.shape()
        )));
    }
    Ok(output
        .l1(target)
        .scale(T::lit(lambda_l1))
        .add(&fake_scores.neg_mean_log(T::lit(PROB_EPS)).scale(T::lit(lambda_adv))))
}

/// `0.5 * (-E log D(y) - E log(1 - D(G)))`.
pub fn deblur_discriminator_loss<T: Scalar>(real: &Var<T>, fake: &Var<T>) -> Var<T> {
    let eps = T::lit(PROB_EPS);
    real.neg_mean_log(eps).add(&fake.neg_mean_log1m(eps)).scale(T::lit(0.5))
}

/// A generated image and the real image at the same position.
#[derive(Clone, Debug, PartialEq)]
pub struct DeblurPair {
    pub height: usize,
    pub width: usize,
    pub input: Vec<f32>,
    pub target: Vec<f32>,
}

impl DeblurPair {
    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.input.len() != n || self.target.len() != n {
            return Err(Error::Shape("deblur pair sizes differ".into()));
        }
        if self.input.iter().chain(&self.target).any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite deblur pair".into()));
        }
        Ok(())
    }
}

/// Generated images at ratios 0, 0.5 and 1 paired with the triplet's real
/// left, middle and right images.
pub fn build_deblur_pairs<T: Scalar>(gan: &InterSliceGan<T>, triplets: &[TrainingTriplet]) -> Result<Vec<DeblurPair>> {
    let mut pairs = Vec::with_capacity(3 * triplets.len());
    for chunk in triplets.chunks(8) {
        let left = imp_tensor(&chunk.iter().map(|t| &t.left).collect::<Vec<_>>())?;
        let right = imp_tensor(&chunk.iter().map(|t| &t.right).collect::<Vec<_>>())?;
        let outs = gan.forward_ratios(&Var::constant(left), &Var::constant(right), &[0.0, 0.5, 1.0])?;
        for (s, t) in chunk.iter().enumerate() {
            for (o, real) in outs.iter().zip([&t.left, &t.middle, &t.right]) {
                let v = o.value();
                let n = real.height * real.width;
                let input = v.sample(s)[..n]
                    .iter()
                    .map(|x| x.as_f64().clamp(0.0, 1.0) as f32)
                    .collect();
                let pair = DeblurPair {
                    height: real.height,
                    width: real.width,
                    input,
                    target: real.image.clone(),
                };
                pair.validate()?;
                pairs.push(pair);
            }
        }
    }
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeblurMeta {
    pub epoch: usize,
    pub val_l1: f64,
    pub config_hash: String,
    pub seed: u64,
    pub created_at: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeblurEpochLog {
    pub epoch: usize,
    pub loss_g: f64,
    pub loss_d: f64,
    pub val_l1: f64,
}

#[derive(Clone, Debug)]
pub struct DeblurCheckpoint<T: Scalar> {
    pub model: DeblurModel<T>,
    pub meta: DeblurMeta,
    pub history: Vec<DeblurEpochLog>,
}

impl<T: Scalar> DeblurCheckpoint<T> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.gen_params.save(&dir.join("deblur.bin"))?;
        self.model.disc_params.save(&dir.join("deblur_disc.bin"))?;
        write_json(&dir.join("config.json"), &self.model.config)?;
        write_json(&dir.join("meta.json"), &self.meta)?;
        write_file(&dir.join("train_log.csv"), history_csv(&self.history))
    }
}

pub fn load_deblur<T: Scalar>(dir: &Path) -> Result<DeblurCheckpoint<T>> {
    let model = DeblurModel::new(read_json(&dir.join("config.json"))?)?;
    model.gen_params.load(&dir.join("deblur.bin"))?;
    model.disc_params.load(&dir.join("deblur_disc.bin"))?;
    Ok(DeblurCheckpoint {
        model,
        meta: read_json(&dir.join("meta.json"))?,
        history: Vec::new(),
    })
}

fn history_csv(history: &[DeblurEpochLog]) -> String {
    let mut s = String::from("epoch,loss_G,loss_D,val_l1\n");
    for h in history {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", h.epoch, h.loss_g, h.loss_d, h.val_l1);
    }
    s
}

fn pair_tensors<T: Scalar>(pairs: &[&DeblurPair]) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w) = (pairs[0].height, pairs[0].width);
    let to = |f: &dyn Fn(&DeblurPair) -> &Vec<f32>| {
        Tensor::from_vec(
            &[pairs.len(), 1, h, w],
            pairs
                .iter()
                .flat_map(|p| f(p).iter().map(|&v| T::lit(v as f64)))
                .collect(),
        )
    };
    Ok((to(&|p| &p.input)?, to(&|p| &p.target)?))
}

/// Mean absolute error of clamped outputs against targets.
pub fn deblur_l1<T: Scalar>(model: &DeblurModel<T>, pairs: &[DeblurPair]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in pairs.chunks(16) {
        let refs: Vec<&DeblurPair> = chunk.iter().collect();
        let (x, y) = pair_tensors::<T>(&refs)?;
        let out = model.forward(&Var::constant(x))?;
        for (o, t) in out.value().data().iter().zip(y.data()) {
            total += (o.as_f64().clamp(0.0, 1.0) - t.as_f64()).abs();
        }
        count += y.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Train with early stopping on validation L1; returns the best epoch.
/// An empty validation set falls back to the training pairs.
pub fn train_deblur<T: Scalar>(
    pairs: &[DeblurPair],
    validation: &[DeblurPair],
    config: &DeblurConfig,
    out_dir: Option<&Path>,
) -> Result<DeblurCheckpoint<T>> {
    if pairs.is_empty() {
        return Err(Error::Config("deblur training needs at least one pair".into()));
    }
    let validation = if validation.is_empty() { pairs } else { validation };
    for p in pairs.iter().chain(validation) {
        p.validate()?;
    }
    let model = DeblurModel::<T>::new(config.clone())?;
    let mut opt_g = Adam::new(&model.gen_params, config.lr, config.beta1, config.beta2);
    let mut opt_d = Adam::new(&model.disc_params, config.lr, config.beta1, config.beta2);
    let mut history = Vec::new();
    let mut best = (deblur_l1(&model, validation)?, 0, model.gen_params.snapshot());
    let mut stale = 0;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(config.seed, epoch, 0)));
        let (mut sum_g, mut sum_d, mut steps) = (0.0, 0.0, 0usize);
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&DeblurPair> = idx.iter().map(|&i| &pairs[i]).collect();
            let (x, y) = pair_tensors::<T>(&refs)?;
            let (x, y) = (Var::constant(x), Var::constant(y));
            let out = model.forward(&x)?;
            let loss_d =
                deblur_discriminator_loss(&model.discriminate(&x, &y)?, &model.discriminate(&x, &out.detach())?);
            let loss_g = deblur_generator_loss(
                &out,
                &y,
                &model.discriminate(&x, &out)?,
                config.lambda_l1,
                config.lambda_adv,
            )?;
            let (lg, ld) = (loss_g.item().as_f64(), loss_d.item().as_f64());
            if !lg.is_finite() || !ld.is_finite() {
                return Err(divergence(
                    out_dir,
                    epoch,
                    step,
                    format!("loss_G = {lg}, loss_D = {ld}"),
                    &[("deblur", &model.gen_params), ("deblur_disc", &model.disc_params)],
                    &json!({ "epoch": epoch, "step": step, "loss_g": lg, "loss_d": ld }),
                ));
            }
            loss_g.backward();
            model.disc_params.zero_grad();
            opt_g.step(&model.gen_params);
            loss_d.backward();
            opt_d.step(&model.disc_params);
            sum_g += lg;
            sum_d += ld;
            steps += 1;
        }
        let val_l1 = deblur_l1(&model, validation)?;
        log::info!("deblur epoch {epoch}: val L1 {val_l1:.5}");
        history.push(DeblurEpochLog {
            epoch,
            loss_g: sum_g / steps as f64,
            loss_d: sum_d / steps as f64,
            val_l1,
        });
        if val_l1 < best.0 {
            best = (val_l1, epoch, model.gen_params.snapshot());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    model.gen_params.restore(&best.2)?;
    let checkpoint = DeblurCheckpoint {
        meta: DeblurMeta {
            epoch: best.1,
            val_l1: best.0,
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

pub fn deblur_image<T: Scalar>(model: &DeblurModel<T>, image: &[f32], height: usize, width: usize) -> Result<Vec<f32>> {
    if image.len() != height * width {
        return Err(Error::Shape(format!(
            "image has {} pixels, expected {height}x{width}",
            image.len()
        )));
    }
    let x = Tensor::from_vec(
        &[1, 1, height, width],
        image.iter().map(|&v| T::lit(v as f64)).collect(),
    )?;
    let out = model.forward(&Var::constant(x))?;
    let v = out.value();
    Ok(v.data().iter().map(|x| x.as_f64().clamp(0.0, 1.0) as f32).collect())
}

/// Sharpen the image of an IMP; the mask is carried over unchanged.
pub fn deblur_imp<T: Scalar>(model: &DeblurModel<T>, imp: &ImageMaskPair) -> Result<ImageMaskPair> {
    Ok(ImageMaskPair {
        image: deblur_image(model, &imp.image, imp.height, imp.width)?,
        ..imp.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::GanConfig;
    use std::f64::consts::LN_2;

    fn tiny() -> DeblurConfig {
        DeblurConfig {
            widths: vec![4, 8],
            disc_widths: vec![4, 8],
            ..DeblurConfig::default()
        }
    }

    fn ramp(n: usize, phase: usize) -> Vec<f32> {
        (0..n).map(|i| ((i * 5 + phase) % 19) as f32 / 19.0).collect()
    }

    #[test]
    fn loss_closed_forms() {
        let half = Var::constant(Tensor::<f64>::full(&[2, 1, 3, 3], 0.5));
        assert!((deblur_discriminator_loss(&half, &half).item() - LN_2).abs() < 1e-10);
        let y = Var::constant(Tensor::<f64>::full(&[2, 1, 8, 8], 0.4));
        let g = deblur_generator_loss(&y, &y, &half, 100.0, 1.0).unwrap().item();
        assert!((g - LN_2).abs() < 1e-10);
    }

    #[test]
    fn pairs_from_triplets() {
        let gan = InterSliceGan::<f32>::new(GanConfig {
            encoder_widths: vec![4, 8],
            disc_widths: vec![4, 8],
            ..GanConfig::default()
        })
        .unwrap();
        let imp = |k| ImageMaskPair::new(16, 16, ramp(256, k), vec![1; 256], k).unwrap();
        let triplets: Vec<TrainingTriplet> = (0..3)
            .map(|i| TrainingTriplet {
                left: imp(i),
                middle: imp(i + 1),
                right: imp(i + 2),
            })
            .collect();
        let pairs = build_deblur_pairs(&gan, &triplets).unwrap();
        assert_eq!(pairs.len(), 9);
        assert_eq!(pairs[4].target, triplets[1].middle.image);
        assert!(pairs.iter().all(|p| p.input.len() == 256));
    }

    #[test]
    fn identity_overfit_and_mask_passthrough() {
        let pairs: Vec<DeblurPair> = (0..4)
            .map(|k| {
                let v = ramp(256, k);
                DeblurPair {
                    height: 16,
                    width: 16,
                    input: v.clone(),
                    target: v,
                }
            })
            .collect();
        let config = DeblurConfig {
            max_epochs: 4,
            ..tiny()
        };
        let ckpt = train_deblur::<f32>(&pairs, &pairs, &config, None).unwrap();
        assert!(ckpt.meta.val_l1 < 1e-3, "{}", ckpt.meta.val_l1);

        let imp = ImageMaskPair::new(16, 16, ramp(256, 2), (0..256).map(|i| (i % 7) as u8).collect(), 3).unwrap();
        let out = deblur_imp(&ckpt.model, &imp).unwrap();
        assert_eq!(out.mask, imp.mask);
        assert_eq!(out.image.len(), 256);
        assert_eq!(deblur_imp(&ckpt.model, &imp).unwrap(), out);
        assert!(deblur_image(&ckpt.model, &imp.image, 8, 8).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let pairs = vec![DeblurPair {
            height: 16,
            width: 16,
            input: ramp(256, 1),
            target: ramp(256, 2),
        }];
        let dir = tempfile::tempdir().unwrap();
        let config = DeblurConfig {
            max_epochs: 2,
            ..tiny()
        };
        let ckpt = train_deblur::<f32>(&pairs, &[], &config, Some(dir.path())).unwrap();
        let loaded = load_deblur::<f32>(dir.path()).unwrap();
        assert_eq!(loaded.meta, ckpt.meta);
        assert_eq!(
            deblur_image(&loaded.model, &pairs[0].input, 16, 16).unwrap(),
            deblur_image(&ckpt.model, &pairs[0].input, 16, 16).unwrap()
        );
    }
}
