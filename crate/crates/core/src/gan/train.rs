use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{discriminator_loss, generator_loss, imp_tensor, materialize, GanConfig, InterSliceGan};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::metrics::fid::{fid_from_features, FeatureEmbedder};
use crate::nn::{divergence, Adam, ParamSet};
use crate::phantom::ImageMaskPair;
use crate::plan::{GapSlot, InterpolationRequest, SparseDataset, TrainingTriplet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::util::{config_hash, read_json, stream_seed, unix_time, write_file, write_json};

const TRAIN_RATIOS: [f64; 3] = [0.0, 0.5, 1.0];
const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_fid: f64,
    pub config_hash: String,
    pub seed: u64,
    pub created_at: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_g: f64,
    pub loss_d: f64,
    pub val_fid: f64,
}

/// Best-validation parameters with their sidecar metadata.
#[derive(Clone, Debug)]
pub struct GeneratorCheckpoint<T: Scalar> {
    pub model: InterSliceGan<T>,
    pub meta: CheckpointMeta,
    pub history: Vec<EpochLog>,
}

impl<T: Scalar> GeneratorCheckpoint<T> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.gen_params.save(&dir.join("generator.bin"))?;
        self.model.disc_params.save(&dir.join("discriminator.bin"))?;
        write_json(&dir.join("config.json"), &self.model.config)?;
        write_json(&dir.join("meta.json"), &self.meta)?;
        write_file(&dir.join("train_log.csv"), history_csv(&self.history))
    }
}

pub fn load_generator<T: Scalar>(dir: &Path) -> Result<GeneratorCheckpoint<T>> {
    let config: GanConfig = read_json(&dir.join("config.json"))?;
    let meta: CheckpointMeta = read_json(&dir.join("meta.json"))?;
    let model = InterSliceGan::new(config)?;
    model.gen_params.load(&dir.join("generator.bin"))?;
    model.disc_params.load(&dir.join("discriminator.bin"))?;
    Ok(GeneratorCheckpoint {
        model,
        meta,
        history: Vec::new(),
    })
}

fn history_csv(history: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss_G,loss_D,val_fid\n");
    for h in history {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", h.epoch, h.loss_g, h.loss_d, h.val_fid);
    }
    s
}

/// Ratio-0.5 outputs for every triplet, in order.
pub fn middles_at_half<T: Scalar>(
    model: &InterSliceGan<T>,
    triplets: &[TrainingTriplet],
) -> Result<Vec<ImageMaskPair>> {
    let mut out = Vec::with_capacity(triplets.len());
    for chunk in triplets.chunks(EVAL_BATCH) {
        let left = imp_tensor(&chunk.iter().map(|t| &t.left).collect::<Vec<_>>())?;
        let right = imp_tensor(&chunk.iter().map(|t| &t.right).collect::<Vec<_>>())?;
        let gen = model.forward_ratios(&Var::constant(left), &Var::constant(right), &[0.5])?;
        out.extend(materialize(&gen[0].value(), 0)?);
    }
    Ok(out)
}

/// FID of ratio-0.5 generations against the true middles.
pub fn validation_fid<T: Scalar, E: Scalar>(
    model: &InterSliceGan<T>,
    triplets: &[TrainingTriplet],
    embedder: &FeatureEmbedder<E>,
) -> Result<f64> {
    let generated = middles_at_half(model, triplets)?;
    let real: Vec<ImageMaskPair> = triplets.iter().map(|t| t.middle.clone()).collect();
    fid_from_features(&embedder.embed_pairs(&real)?, &embedder.embed_pairs(&generated)?)
}

fn batch_tensors<T: Scalar>(batch: &[&TrainingTriplet]) -> Result<[Tensor<T>; 3]> {
    Ok([
        imp_tensor(&batch.iter().map(|t| &t.left).collect::<Vec<_>>())?,
        imp_tensor(&batch.iter().map(|t| &t.middle).collect::<Vec<_>>())?,
        imp_tensor(&batch.iter().map(|t| &t.right).collect::<Vec<_>>())?,
    ])
}

/// Alternating discriminator and generator updates on triplets; returns
/// the parameters with the lowest validation FID.
pub fn train_generator<T: Scalar, E: Scalar>(
    triplets: &[TrainingTriplet],
    validation: &[TrainingTriplet],
    config: &GanConfig,
    embedder: &FeatureEmbedder<E>,
    out_dir: Option<&Path>,
) -> Result<GeneratorCheckpoint<T>> {
    if triplets.is_empty() {
        return Err(Error::Config("generator training needs at least one triplet".into()));
    }
    if validation.len() < 2 {
        return Err(Error::Config(format!(
            "validation FID needs at least 2 triplets, got {}",
            validation.len()
        )));
    }
    let model = InterSliceGan::<T>::new(config.clone())?;
    let (h, w) = (triplets[0].left.height, triplets[0].left.width);
    model.check_shape(h, w)?;
    let mut opt_g = Adam::new(&model.gen_params, config.lr, config.beta1, config.beta2);
    let mut opt_d = Adam::new(&model.disc_params, config.lr, config.beta1, config.beta2);
    let sets = |m: &InterSliceGan<T>| -> [(&'static str, ParamSet<T>); 2] {
        [
            ("generator", m.gen_params.clone()),
            ("discriminator", m.disc_params.clone()),
        ]
    };

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor<T>>)> = None;
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(config.seed, epoch, 0)));
        let (mut sum_g, mut sum_d, mut steps) = (0.0, 0.0, 0usize);
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&TrainingTriplet> = idx.iter().map(|&i| &triplets[i]).collect();
            let [l, m, r] = batch_tensors::<T>(&batch)?;
            let outs = model.forward_ratios(&Var::constant(l.clone()), &Var::constant(r.clone()), &TRAIN_RATIOS)?;

            let real = model.discriminate(&Var::constant(Tensor::concat_batch(&[&l, &m, &r])?))?;
            let fakes = outs
                .iter()
                .map(|o| model.discriminate(&o.detach()))
                .collect::<Result<Vec<_>>>()?;
            let loss_d = discriminator_loss(&real, &fakes)?;
            let ld = loss_d.item().as_f64();

            let fakes = outs.iter().map(|o| model.discriminate(o)).collect::<Result<Vec<_>>>()?;
            let targets = [Var::constant(l), Var::constant(m), Var::constant(r)];
            let loss_g = generator_loss(&outs, &targets, &fakes, config.lambda_l1, config.lambda_adv)?;
            let lg = loss_g.item().as_f64();
            if !ld.is_finite() || !lg.is_finite() {
                let s = sets(&model);
                return Err(divergence(
                    out_dir,
                    epoch,
                    step,
                    format!("loss_G = {lg}, loss_D = {ld}"),
                    &[(s[0].0, &s[0].1), (s[1].0, &s[1].1)],
                    &json!({ "epoch": epoch, "step": step, "loss_g": lg, "loss_d": ld }),
                ));
            }
            // generator gradients are taken against the pre-update discriminator
            loss_g.backward();
            model.disc_params.zero_grad();
            opt_g.step(&model.gen_params);
            loss_d.backward();
            opt_d.step(&model.disc_params);
            if model.gen_params.has_non_finite() || model.disc_params.has_non_finite() {
                let s = sets(&model);
                return Err(divergence(
                    out_dir,
                    epoch,
                    step,
                    "non-finite parameters after update".into(),
                    &[(s[0].0, &s[0].1), (s[1].0, &s[1].1)],
                    &json!({ "epoch": epoch, "step": step, "loss_g": lg, "loss_d": ld }),
                ));
            }
            sum_g += lg;
            sum_d += ld;
            steps += 1;
        }
        let val_fid = validation_fid(&model, validation, embedder)?;
        log::info!(
            "generator epoch {epoch}: loss_G {:.4} loss_D {:.4} val FID {val_fid:.4}",
            sum_g / steps as f64,
            sum_d / steps as f64
        );
        history.push(EpochLog {
            epoch,
            loss_g: sum_g / steps as f64,
            loss_d: sum_d / steps as f64,
            val_fid,
        });
        if best.as_ref().is_none_or(|(f, _, _)| val_fid < *f) {
            best = Some((val_fid, epoch, model.gen_params.snapshot()));
        }
        if let Some(dir) = out_dir {
            write_file(&dir.join("train_log.csv"), history_csv(&history))?;
        }
        if config.fid_stop_threshold.is_finite() && val_fid < config.fid_stop_threshold {
            break;
        }
    }

    let (val_fid, epoch) = match best {
        Some((f, e, snapshot)) => {
            model.gen_params.restore(&snapshot)?;
            (f, e)
        }
        None => (validation_fid(&model, validation, embedder)?, 0),
    };
    let checkpoint = GeneratorCheckpoint {
        meta: CheckpointMeta {
            epoch,
            val_fid,
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

/// One generated IMP per (adjacent kept pair, ratio).
pub fn fill_gaps<T: Scalar>(
    sparse: &SparseDataset,
    model: &InterSliceGan<T>,
    requests: &[InterpolationRequest],
) -> Result<BTreeMap<GapSlot, ImageMaskPair>> {
    let steps = sparse.setting.period();
    let mut out = BTreeMap::new();
    for req in requests {
        let pos = sparse.kept_indices.iter().position(|&i| i == req.left);
        let (Some(pos), Some(right)) = (pos, sparse.pair(req.right)) else {
            return Err(Error::Fill(format!(
                "request {}..{} references a slice that is not kept",
                req.left, req.right
            )));
        };
        if sparse.kept_indices.get(pos + 1) != Some(&req.right) {
            return Err(Error::Fill(format!(
                "{}..{} are not adjacent kept slices",
                req.left, req.right
            )));
        }
        let left = &sparse.kept[pos];
        let outs = model.forward_ratios(
            &Var::constant(imp_tensor(&[left])?),
            &Var::constant(imp_tensor(&[right])?),
            &req.ratios,
        )?;
        for (&ratio, o) in req.ratios.iter().zip(&outs) {
            let step = (ratio * steps as f64).round() as usize;
            if step == 0 || step >= steps || (step as f64 / steps as f64 - ratio).abs() > 1e-9 {
                return Err(Error::Fill(format!(
                    "ratio {ratio} is not an interior multiple of 1/{steps}"
                )));
            }
            let slot = GapSlot {
                left: req.left,
                right: req.right,
                step,
                steps,
            };
            let imp = materialize(&o.value(), slot.position().round() as usize)?.remove(0);
            out.insert(slot, imp);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_config;
    use super::*;
    use crate::phantom::{generate_phantom_stack, PhantomConfig};
    use crate::plan::{make_training_triplets, sparsify, AnnotationSetting};

    fn phantom(h: usize, seed: u64) -> crate::phantom::SliceStack {
        let cfg = PhantomConfig {
            num_slices: 9,
            height: h,
            width: h,
            boundary_amplitude_px: 1.0,
            drift_max_px: 1.0,
            min_layer_thickness_px: 2,
            seed,
            ..PhantomConfig::default()
        };
        generate_phantom_stack(&cfg, "p0", "s0").unwrap()
    }

    #[test]
    fn fill_counts_and_labels() {
        let gan = InterSliceGan::<f32>::new(tiny_config()).unwrap();
        let stack = phantom(32, 1);
        let sparse = sparsify(&stack, AnnotationSetting::from_skip(3).unwrap()).unwrap();
        assert_eq!(sparse.kept_indices, vec![0, 4, 8]);
        let filled = fill_gaps(&sparse, &gan, &sparse.interpolation_requests()).unwrap();
        assert_eq!(filled.len(), 6);
        assert!(filled.values().all(|p| p.mask.iter().all(|&m| m < 7) && !p.annotated));
        assert_eq!(
            fill_gaps(&sparse, &gan, &sparse.interpolation_requests()).unwrap(),
            filled
        );

        let sparse1 = sparsify(&phantom(32, 1), AnnotationSetting::from_skip(1).unwrap()).unwrap();
        let req = &sparse1.interpolation_requests()[..1];
        assert_eq!(fill_gaps(&sparse1, &gan, req).unwrap().len(), 1);

        let bad = [InterpolationRequest {
            left: 1,
            right: 4,
            ratios: vec![0.5],
        }];
        assert!(matches!(fill_gaps(&sparse, &gan, &bad), Err(Error::Fill(_))));
    }

    #[test]
    fn infinite_threshold_runs_every_epoch_and_meta_matches() {
        let stack = phantom(32, 2);
        let sparse = sparsify(&stack, AnnotationSetting::from_skip(1).unwrap()).unwrap();
        let triplets = make_training_triplets(&sparse).unwrap();
        let config = GanConfig {
            fid_stop_threshold: f64::INFINITY,
            max_epochs: 3,
            lr: 1e-3,
            ..tiny_config()
        };
        let embedder = FeatureEmbedder::<f32>::seeded(0);
        let dir = tempfile::tempdir().unwrap();
        let ckpt = train_generator::<f32, f32>(&triplets, &triplets, &config, &embedder, Some(dir.path())).unwrap();
        assert_eq!(ckpt.history.len(), 3);
        let best = ckpt.history.iter().map(|h| h.val_fid).fold(f64::INFINITY, f64::min);
        assert_eq!(ckpt.meta.val_fid, best);
        let loaded = load_generator::<f32>(dir.path()).unwrap();
        let again = validation_fid(&loaded.model, &triplets, &embedder).unwrap();
        assert!((again - loaded.meta.val_fid).abs() < 1e-3);
        let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert_eq!(log.lines().count(), 4);
        assert!(log.starts_with("epoch,loss_G,loss_D,val_fid"));
    }

    #[test]
    fn finite_threshold_stops_early() {
        let stack = phantom(32, 3);
        let sparse = sparsify(&stack, AnnotationSetting::from_skip(1).unwrap()).unwrap();
        let triplets = make_training_triplets(&sparse).unwrap();
        let config = GanConfig {
            fid_stop_threshold: 1e12,
            max_epochs: 5,
            ..tiny_config()
        };
        let ckpt =
            train_generator::<f32, f32>(&triplets, &triplets, &config, &FeatureEmbedder::seeded(0), None).unwrap();
        assert_eq!(ckpt.history.len(), 1);
    }
}
