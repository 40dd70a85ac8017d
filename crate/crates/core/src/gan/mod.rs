//! Ratio-conditioned inter-slice generator.
//!
//! Both endpoint IMPs go through a residual encoder; the feature pyramids
//! are blended as `F_left + (F_right - F_left) * ratio` and a UNet-style
//! decoder turns the blend back into an image and a mask. A PatchGAN
//! discriminator scores 2-channel IMPs.

mod loss;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d, ParamSet};
use crate::phantom::{ImageMaskPair, NUM_LABELS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use loss::{discriminator_loss, generator_loss, PROB_EPS};
pub use train::{
    fill_gaps, load_generator, middles_at_half, train_generator, validation_fid, CheckpointMeta, EpochLog,
    GeneratorCheckpoint,
};

const NORM_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;
const MASK_LEVELS: f64 = (NUM_LABELS - 1) as f64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    /// Channel width of each residual stage; the stage count is the depth.
    pub encoder_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    /// PatchGAN widths; every layer but the last has stride 2.
    pub disc_widths: Vec<usize>,
    pub lambda_l1: f64,
    pub lambda_adv: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Stop once validation FID drops below this; non-finite disables it.
    #[serde(with = "crate::util::inf_as_null")]
    pub fid_stop_threshold: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            encoder_widths: vec![64, 128, 256, 512],
            blocks_per_stage: 1,
            disc_widths: vec![64, 128, 256, 512],
            lambda_l1: 100.0,
            lambda_adv: 1.0,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            fid_stop_threshold: 200.0,
            max_epochs: 50,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return bad(format!("encoder widths {:?}", self.encoder_widths));
        }
        if self.disc_widths.is_empty() || self.disc_widths.contains(&0) {
            return bad(format!("discriminator widths {:?}", self.disc_widths));
        }
        if self.blocks_per_stage == 0 || self.batch_size == 0 {
            return bad("blocks_per_stage and batch_size must be positive".into());
        }
        if !(self.lambda_l1 > 0.0 && self.lambda_adv > 0.0) {
            return bad(format!(
                "loss weights must be positive: {} / {}",
                self.lambda_l1, self.lambda_adv
            ));
        }
        if !(self.fid_stop_threshold > 0.0) {
            return bad(format!(
                "fid_stop_threshold {} must be positive",
                self.fid_stop_threshold
            ));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("optimizer settings out of range".into());
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.encoder_widths.len()
    }
}

/// Feature pyramid of a batch of IMPs. Level 0 is the input IMP itself at
/// full resolution; level `l >= 1` has `encoder_widths[l - 1]` channels at
/// `H / 2^l`.
#[derive(Clone, Debug)]
pub struct EncodedImp<T: Scalar> {
    pub levels: Vec<Var<T>>,
}

/// Pyramid blended at one ratio.
#[derive(Clone, Debug)]
pub struct BlendedFeatures<T: Scalar> {
    pub levels: Vec<Var<T>>,
    pub ratio: f64,
}

#[derive(Clone, Debug)]
struct ResBlock<T: Scalar> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    shortcut: Option<Conv2d<T>>,
}

impl<T: Scalar> ResBlock<T> {
    fn new(params: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let shortcut = (stride != 1 || cin != cout)
            .then(|| Conv2d::new(params, &format!("{name}.shortcut"), cin, cout, 1, stride, 0, rng));
        ResBlock {
            conv1: Conv2d::new(params, &format!("{name}.conv1"), cin, cout, 3, stride, 1, rng),
            conv2: Conv2d::new(params, &format!("{name}.conv2"), cout, cout, 3, 1, 1, rng),
            shortcut,
        }
    }

    fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let eps = T::lit(NORM_EPS);
        let h = self.conv1.forward(x)?.instance_norm(eps).relu();
        let h = self.conv2.forward(&h)?.instance_norm(eps);
        let skip = match &self.shortcut {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok(h.add(&skip).relu())
    }
}

#[derive(Clone, Debug)]
struct UpStage<T: Scalar> {
    up: ConvTranspose2d<T>,
    fuse: Conv2d<T>,
}

/// PatchGAN: 4x4 convolutions, stride 2 except the last width, then a
/// 1-channel sigmoid map.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator<T: Scalar> {
    convs: Vec<Conv2d<T>>,
    in_channels: usize,
}

impl<T: Scalar> PatchDiscriminator<T> {
    pub fn new(
        params: &mut ParamSet<T>,
        prefix: &str,
        in_channels: usize,
        widths: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut convs = Vec::new();
        let mut cin = in_channels;
        for (i, &cout) in widths.iter().enumerate() {
            let stride = if i + 1 == widths.len() { 1 } else { 2 };
            convs.push(Conv2d::new(
                params,
                &format!("{prefix}.conv{i}"),
                cin,
                cout,
                4,
                stride,
                1,
                rng,
            ));
            cin = cout;
        }
        convs.push(Conv2d::new(params, &format!("{prefix}.out"), cin, 1, 4, 1, 1, rng));
        PatchDiscriminator { convs, in_channels }
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects [n, {}, h, w], got {shape:?}",
                self.in_channels
            )));
        }
        let mut x = x.clone();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if i == last {
                break;
            }
            if i > 0 {
                x = x.instance_norm(T::lit(NORM_EPS));
            }
            x = x.leaky_relu(T::lit(LEAKY_SLOPE));
        }
        Ok(x.sigmoid())
    }
}

#[derive(Clone, Debug)]
pub struct InterSliceGan<T: Scalar> {
    pub config: GanConfig,
    pub gen_params: ParamSet<T>,
    pub disc_params: ParamSet<T>,
    stem: Conv2d<T>,
    stages: Vec<Vec<ResBlock<T>>>,
    /// Deepest first; the last entry restores full resolution.
    ups: Vec<UpStage<T>>,
    head: Conv2d<T>,
    disc: PatchDiscriminator<T>,
}

impl<T: Scalar> InterSliceGan<T> {
    pub fn new(config: GanConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut g = ParamSet::new();
        let w = config.encoder_widths.clone();
        let stem = Conv2d::new(&mut g, "enc.stem", 2, w[0], 7, 2, 3, &mut rng);
        let mut stages = Vec::new();
        let mut cin = w[0];
        for (l, &cout) in w.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..config.blocks_per_stage {
                let stride = if l > 0 && b == 0 { 2 } else { 1 };
                blocks.push(ResBlock::new(
                    &mut g,
                    &format!("enc.stage{l}.block{b}"),
                    cin,
                    cout,
                    stride,
                    &mut rng,
                ));
                cin = cout;
            }
            stages.push(blocks);
        }
        let mut ups = Vec::new();
        for j in (1..w.len()).rev() {
            ups.push(UpStage {
                up: ConvTranspose2d::new(&mut g, &format!("dec.up{j}"), w[j], w[j - 1], 4, 2, 1, &mut rng),
                fuse: Conv2d::new(
                    &mut g,
                    &format!("dec.fuse{j}"),
                    2 * w[j - 1],
                    w[j - 1],
                    3,
                    1,
                    1,
                    &mut rng,
                ),
            });
        }
        ups.push(UpStage {
            up: ConvTranspose2d::new(&mut g, "dec.up0", w[0], w[0], 4, 2, 1, &mut rng),
            fuse: Conv2d::new(&mut g, "dec.fuse0", w[0] + 2, w[0], 3, 1, 1, &mut rng),
        });
        let head = Conv2d::new(&mut g, "dec.head", w[0], 2, 3, 1, 1, &mut rng);

        let mut d = ParamSet::new();
        let disc = PatchDiscriminator::new(&mut d, "disc", 2, &config.disc_widths, &mut rng);

        Ok(InterSliceGan {
            config,
            gen_params: g,
            disc_params: d,
            stem,
            stages,
            ups,
            head,
            disc,
        })
    }

    pub fn check_shape(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.config.depth();
        if h == 0 || w == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(Error::Shape(format!(
                "{h}x{w} is not divisible by 2^{} = {f}",
                self.config.depth()
            )));
        }
        Ok(())
    }

    /// Encode a `[n, 2, h, w]` IMP batch.
    pub fn encode(&self, imp: &Var<T>) -> Result<EncodedImp<T>> {
        let shape = imp.shape();
        if shape.len() != 4 || shape[1] != 2 {
            return Err(Error::Shape(format!("IMP batch must be [n, 2, h, w], got {shape:?}")));
        }
        self.check_shape(shape[2], shape[3])?;
        let mut levels = vec![imp.clone()];
        let mut x = self.stem.forward(imp)?.instance_norm(T::lit(NORM_EPS)).relu();
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x)?;
            }
            levels.push(x.clone());
        }
        Ok(EncodedImp { levels })
    }

    pub fn decode(&self, features: &BlendedFeatures<T>) -> Result<Var<T>> {
        let b = &features.levels;
        if b.len() != self.config.depth() + 1 {
            return Err(Error::Shape(format!(
                "decoder expects {} levels, got {}",
                self.config.depth() + 1,
                b.len()
            )));
        }
        let eps = T::lit(NORM_EPS);
        let mut x = b[b.len() - 1].clone();
        for (stage, skip) in self.ups.iter().zip(b.iter().rev().skip(1)) {
            let up = stage.up.forward(&x)?.instance_norm(eps).relu();
            if up.shape()[2..] != skip.shape()[2..] {
                return Err(Error::Shape(format!(
                    "decoder stage produced {:?}, skip is {:?}",
                    up.shape(),
                    skip.shape()
                )));
            }
            x = stage
                .fuse
                .forward(&Var::concat_channels(&[&up, skip])?)?
                .instance_norm(eps)
                .relu();
        }
        let out = self.head.forward(&x)?;
        let image = out.narrow_channels(0, 1).tanh().affine(T::lit(0.5), T::lit(0.5));
        let mask = out.narrow_channels(1, 1).sigmoid();
        Var::concat_channels(&[&image, &mask])
    }

    /// Continuous outputs at each ratio from shared endpoint encodings.
    pub fn forward_ratios(&self, left: &Var<T>, right: &Var<T>, ratios: &[f64]) -> Result<Vec<Var<T>>> {
        if left.shape() != right.shape() {
            return Err(Error::Shape(format!(
                "endpoints differ: {:?} vs {:?}",
                left.shape(),
                right.shape()
            )));
        }
        let fl = self.encode(left)?;
        let fr = self.encode(right)?;
        ratios
            .iter()
            .map(|&r| self.decode(&blend_features(&fl, &fr, r)?))
            .collect()
    }

    /// Patch probabilities for a `[n, 2, h, w]` batch.
    pub fn discriminate(&self, imp: &Var<T>) -> Result<Var<T>> {
        self.disc.forward(imp)
    }

    pub fn generate(&self, left: &ImageMaskPair, right: &ImageMaskPair, ratio: f64) -> Result<ImageMaskPair> {
        if !left.same_shape(right) {
            return Err(Error::Shape("endpoint IMPs differ in shape".into()));
        }
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Blend(format!("ratio {ratio} outside [0, 1]")));
        }
        let out = self.forward_ratios(
            &Var::constant(imp_tensor(&[left])?),
            &Var::constant(imp_tensor(&[right])?),
            &[ratio],
        )?;
        let imp = materialize(&out[0].value(), left.slice_index)?.remove(0);
        Ok(imp)
    }

    /// Patch probability map of a single IMP.
    pub fn score(&self, imp: &ImageMaskPair) -> Result<Tensor<T>> {
        Ok(self.discriminate(&Var::constant(imp_tensor(&[imp])?))?.to_tensor())
    }
}

/// `F_left + (F_right - F_left) * ratio` at every level.
pub fn blend_features<T: Scalar>(
    left: &EncodedImp<T>,
    right: &EncodedImp<T>,
    ratio: f64,
) -> Result<BlendedFeatures<T>> {
    if left.levels.len() != right.levels.len() {
        return Err(Error::Blend(format!(
            "pyramids have {} and {} levels",
            left.levels.len(),
            right.levels.len()
        )));
    }
    let r = T::lit(ratio);
    let levels = left
        .levels
        .iter()
        .zip(&right.levels)
        .enumerate()
        .map(|(l, (a, b))| {
            if a.shape() != b.shape() {
                return Err(Error::Blend(format!("level {l}: {:?} vs {:?}", a.shape(), b.shape())));
            }
            Ok(a.add(&b.sub(a).scale(r)))
        })
        .collect::<Result<_>>()?;
    Ok(BlendedFeatures { levels, ratio })
}

/// `[n, 2, h, w]` tensor of image and `label / 6` channels.
pub fn imp_tensor<T: Scalar>(pairs: &[&ImageMaskPair]) -> Result<Tensor<T>> {
    let first = pairs.first().ok_or_else(|| Error::Shape("empty IMP batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(pairs.len() * 2 * h * w);
    for p in pairs {
        if !p.same_shape(first) {
            return Err(Error::Shape(format!(
                "IMP batch mixes {h}x{w} and {}x{}",
                p.height, p.width
            )));
        }
        data.extend(p.image.iter().map(|&v| T::lit(v as f64)));
        data.extend(p.mask.iter().map(|&m| T::lit(m as f64 / MASK_LEVELS)));
    }
    Tensor::from_vec(&[pairs.len(), 2, h, w], data)
}

/// Nearest label for a continuous mask value in `[0, 1]`.
pub fn quantize_mask(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * MASK_LEVELS).round() as u8
}

/// Turn a `[n, 2, h, w]` output into IMPs (not annotated).
pub fn materialize<T: Scalar>(out: &Tensor<T>, slice_index: usize) -> Result<Vec<ImageMaskPair>> {
    let (n, c, h, w) = out.dims4();
    if c != 2 {
        return Err(Error::Shape(format!("expected 2 output channels, got {c}")));
    }
    (0..n)
        .map(|s| {
            let data = out.sample(s);
            let image = data[..h * w]
                .iter()
                .map(|v| v.as_f64().clamp(0.0, 1.0) as f32)
                .collect();
            let mask = data[h * w..].iter().map(|v| quantize_mask(v.as_f64())).collect();
            let mut p = ImageMaskPair::new(h, w, image, mask, slice_index)?;
            p.annotated = false;
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn tiny_config() -> GanConfig {
        GanConfig {
            encoder_widths: vec![4, 8],
            disc_widths: vec![4, 8],
            ..GanConfig::default()
        }
    }

    fn pattern(h: usize, w: usize, phase: usize) -> ImageMaskPair {
        let image = (0..h * w).map(|i| ((i * 7 + phase * 13) % 23) as f32 / 23.0).collect();
        let mask = (0..h * w).map(|i| ((i / w + phase) % 7) as u8).collect();
        ImageMaskPair::new(h, w, image, mask, phase).unwrap()
    }

    #[test]
    fn pyramid_shapes_at_default_widths() {
        let gan = InterSliceGan::<f32>::new(GanConfig::default()).unwrap();
        let x = Var::constant(imp_tensor(&[&pattern(64, 64, 0)]).unwrap());
        let enc = gan.encode(&x).unwrap();
        let shapes: Vec<Vec<usize>> = enc.levels.iter().map(|v| v.shape()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, 2, 64, 64],
                vec![1, 64, 32, 32],
                vec![1, 128, 16, 16],
                vec![1, 256, 8, 8],
                vec![1, 512, 4, 4]
            ]
        );
        assert_eq!(gan.discriminate(&x).unwrap().shape(), vec![1, 1, 6, 6]);
    }

    #[test]
    fn indivisible_shape_is_rejected() {
        let gan = InterSliceGan::<f32>::new(tiny_config()).unwrap();
        let x = Var::constant(imp_tensor(&[&pattern(10, 8, 0)]).unwrap());
        assert!(matches!(gan.encode(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_input_is_finite_and_output_matches_size() {
        let gan = InterSliceGan::<f32>::new(tiny_config()).unwrap();
        let zero = ImageMaskPair::new(16, 16, vec![0.0; 256], vec![0; 256], 0).unwrap();
        let out = gan.generate(&zero, &zero, 0.5).unwrap();
        assert_eq!((out.height, out.width), (16, 16));
        assert!(out.image.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        assert!(out.mask.iter().all(|&m| m < 7));
        assert!(!out.annotated);
    }

    #[test]
    fn blend_examples() {
        let zeros = EncodedImp {
            levels: vec![Var::constant(Tensor::<f64>::zeros(&[1, 2, 2, 2]))],
        };
        let twos = EncodedImp {
            levels: vec![Var::constant(Tensor::full(&[1, 2, 2, 2], 2.0))],
        };
        let b = blend_features(&zeros, &twos, 0.5).unwrap();
        assert!(b.levels[0].value().data().iter().all(|&v| v == 1.0));
        let odd = EncodedImp {
            levels: vec![Var::constant(Tensor::<f64>::zeros(&[1, 2, 4, 4]))],
        };
        assert!(matches!(blend_features(&zeros, &odd, 0.5), Err(Error::Blend(_))));
    }

    #[test]
    fn endpoint_identities() {
        let gan = InterSliceGan::<f32>::new(tiny_config()).unwrap();
        let (l, r1, r2) = (pattern(16, 16, 0), pattern(16, 16, 3), pattern(16, 16, 5));
        assert_eq!(gan.generate(&l, &r1, 0.0).unwrap(), gan.generate(&l, &r2, 0.0).unwrap());
        // ratio 1 reproduces the right pyramid only up to rounding of a + (b - a)
        let (g1, g2) = (gan.generate(&r1, &l, 1.0).unwrap(), gan.generate(&r2, &l, 1.0).unwrap());
        for (a, b) in g1.image.iter().zip(&g2.image) {
            assert!((a - b).abs() < 1e-4);
        }
        let same = gan.generate(&l, &l, 0.0).unwrap();
        for r in [0.1, 0.5, 0.9, 1.0] {
            assert_eq!(gan.generate(&l, &l, r).unwrap(), same);
        }
        assert_eq!(gan.score(&l).unwrap(), gan.score(&l).unwrap());
    }

    #[test]
    fn mask_quantization() {
        assert_eq!(quantize_mask(0.49), 3);
        assert_eq!(quantize_mask(0.0), 0);
        assert_eq!(quantize_mask(1.0), 6);
        assert_eq!(quantize_mask(1.3), 6);
    }

    proptest! {
        #[test]
        fn blend_is_linear(a in proptest::collection::vec(-5.0f64..5.0, 8), b in proptest::collection::vec(-5.0f64..5.0, 8), r in 0.0f64..1.0) {
            let fa = EncodedImp { levels: vec![Var::constant(Tensor::from_vec(&[1, 2, 2, 2], a.clone()).unwrap())] };
            let fb = EncodedImp { levels: vec![Var::constant(Tensor::from_vec(&[1, 2, 2, 2], b.clone()).unwrap())] };
            let out = blend_features(&fa, &fb, r).unwrap();
            for ((&x, &y), &z) in a.iter().zip(&b).zip(out.levels[0].value().data()) {
                let direct = (1.0 - r) * x + r * y;
                prop_assert!((z - direct).abs() <= 1e-6 * x.abs().max(y.abs()).max(1e-12));
            }
        }
    }
}
