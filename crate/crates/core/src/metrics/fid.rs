//! Fréchet distance between Gaussian fits of embedded image sets.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamSet};
use crate::phantom::ImageMaskPair;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Above this dimension the covariance is never materialized.
const MAX_DENSE_DIM: usize = 512;
const EMBED_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EmbedderMode {
    IdentityFlatten,
    SeededRandomConv {
        seed: u64,
    },
    /// Conv stack weights from a user-supplied parameter blob.
    PretrainedClassifier {
        weights: PathBuf,
    },
}

impl Default for EmbedderMode {
    fn default() -> Self {
        EmbedderMode::SeededRandomConv { seed: 0 }
    }
}

/// Maps a grayscale image to a feature vector.
///
/// The conv modes run two stride-2 3x3 convolutions with ReLU and average
/// pool onto a `GRID x GRID` lattice, so features keep coarse layout.
#[derive(Clone, Debug)]
pub struct FeatureEmbedder<T: Scalar> {
    mode: EmbedderMode,
    params: ParamSet<T>,
    convs: Vec<Conv2d<T>>,
}

impl<T: Scalar> FeatureEmbedder<T> {
    pub const CHANNELS: [usize; 2] = [8, 8];
    pub const GRID: usize = 4;

    pub fn new(mode: EmbedderMode) -> Result<Self> {
        let mut params = ParamSet::new();
        let convs = match &mode {
            EmbedderMode::IdentityFlatten => Vec::new(),
            EmbedderMode::SeededRandomConv { seed } => Self::conv_stack(&mut params, *seed),
            EmbedderMode::PretrainedClassifier { weights } => {
                let convs = Self::conv_stack(&mut params, 0);
                params.load(weights)?;
                convs
            }
        };
        Ok(FeatureEmbedder { mode, params, convs })
    }

    pub fn identity() -> Self {
        Self::new(EmbedderMode::IdentityFlatten).unwrap()
    }

    pub fn seeded(seed: u64) -> Self {
        Self::new(EmbedderMode::SeededRandomConv { seed }).unwrap()
    }

    fn conv_stack(params: &mut ParamSet<T>, seed: u64) -> Vec<Conv2d<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2] = Self::CHANNELS;
        vec![
            Conv2d::new(params, "embed.conv1", 1, c1, 3, 2, 1, &mut rng),
            Conv2d::new(params, "embed.conv2", c1, c2, 3, 2, 1, &mut rng),
        ]
    }

    pub fn mode(&self) -> &EmbedderMode {
        &self.mode
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    /// Output dimension for `h x w` inputs.
    pub fn dim(&self, h: usize, w: usize) -> usize {
        match self.mode {
            EmbedderMode::IdentityFlatten => h * w,
            _ => Self::CHANNELS[1] * Self::GRID * Self::GRID,
        }
    }

    pub fn embed(&self, images: &[&[f32]], h: usize, w: usize) -> Result<Vec<Vec<f64>>> {
        if let Some(bad) = images.iter().find(|im| im.len() != h * w) {
            return Err(Error::Shape(format!(
                "embedder expects {h}x{w} images, got {} pixels",
                bad.len()
            )));
        }
        let out: Vec<Vec<f64>> = if self.convs.is_empty() {
            images.iter().map(|im| im.iter().map(|&v| v as f64).collect()).collect()
        } else {
            if h / 4 < Self::GRID || w / 4 < Self::GRID {
                return Err(Error::Shape(format!("{h}x{w} is too small for the conv embedder")));
            }
            let mut out = Vec::with_capacity(images.len());
            for chunk in images.chunks(EMBED_BATCH) {
                let data: Vec<T> = chunk
                    .iter()
                    .flat_map(|im| im.iter().map(|&v| T::lit(v as f64)))
                    .collect();
                let mut x = Var::constant(Tensor::from_vec(&[chunk.len(), 1, h, w], data)?);
                for conv in &self.convs {
                    x = conv.forward(&x)?.relu();
                }
                out.extend(grid_pool(&x.to_tensor(), Self::GRID));
            }
            out
        };
        if out.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Metric("non-finite embedding".into()));
        }
        Ok(out)
    }

    pub fn embed_pairs(&self, pairs: &[ImageMaskPair]) -> Result<Vec<Vec<f64>>> {
        let Some(first) = pairs.first() else {
            return Ok(Vec::new());
        };
        let images: Vec<&[f32]> = pairs.iter().map(|p| p.image.as_slice()).collect();
        self.embed(&images, first.height, first.width)
    }
}

/// Average pool each channel onto a `grid x grid` lattice and flatten.
fn grid_pool<T: Scalar>(x: &Tensor<T>, grid: usize) -> Vec<Vec<f64>> {
    let (n, c, h, w) = x.dims4();
    let rows: Vec<(usize, usize)> = (0..grid).map(|g| (g * h / grid, (g + 1) * h / grid)).collect();
    let cols: Vec<(usize, usize)> = (0..grid).map(|g| (g * w / grid, (g + 1) * w / grid)).collect();
    (0..n)
        .map(|s| {
            let mut f = Vec::with_capacity(c * grid * grid);
            for ch in 0..c {
                let plane = &x.data()[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                for &(r0, r1) in &rows {
                    for &(c0, c1) in &cols {
                        let mut acc = 0.0;
                        for r in r0..r1 {
                            acc += plane[r * w + c0..r * w + c1].iter().map(|v| v.as_f64()).sum::<f64>();
                        }
                        f.push(acc / ((r1 - r0) * (c1 - c0)) as f64);
                    }
                }
            }
            f
        })
        .collect()
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(self) -> f64 {
        self.sum + self.comp
    }
}

/// Mean and unbiased covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats<T: Scalar> {
    pub mean: Vec<T>,
    /// Row-major `dim x dim`.
    pub cov: Vec<T>,
    pub count: usize,
}

impl<T: Scalar> FeatureStats<T> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn from_moments(mean: Vec<T>, cov: Vec<T>, count: usize) -> Result<Self> {
        if cov.len() != mean.len() * mean.len() {
            return Err(Error::Metric("covariance does not match mean dimension".into()));
        }
        Ok(FeatureStats { mean, cov, count })
    }

    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let (n, d) = check_features(features)?;
        let mut mean = vec![CompensatedSum::default(); d];
        for f in features {
            for (m, &v) in mean.iter_mut().zip(f) {
                m.add(v);
            }
        }
        let mean: Vec<f64> = mean.into_iter().map(|m| m.value() / n as f64).collect();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in i..d {
                let mut acc = CompensatedSum::default();
                for f in features {
                    acc.add((f[i] - mean[i]) * (f[j] - mean[j]));
                }
                let v = acc.value() / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(FeatureStats {
            mean: mean.into_iter().map(T::lit).collect(),
            cov: cov.into_iter().map(T::lit).collect(),
            count: n,
        })
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        let m = DMatrix::from_row_iterator(d, d, self.cov.iter().map(|v| v.as_f64()));
        (&m + m.transpose()) * 0.5
    }
}

fn check_features(features: &[Vec<f64>]) -> Result<(usize, usize)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Metric(format!("need at least 2 samples, got {n}")));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Metric("ragged feature vectors".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite embedding".into()));
    }
    Ok((n, d))
}

/// Symmetric PSD square root; negative eigenvalues are clamped to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let root = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
pub fn fid_from_stats<T: Scalar>(a: &FeatureStats<T>, b: &FeatureStats<T>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Metric(format!("dimension {} vs {}", a.dim(), b.dim())));
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    let sa = a.cov_matrix();
    let sb = b.cov_matrix();
    // (S_a S_b)^{1/2} shares its trace with (R S_b R)^{1/2}, R = S_a^{1/2},
    // which is symmetric so the eigenvalues are real.
    let r = sqrt_psd(&sa);
    let m = &r * &sb * &r;
    let m = (&m + m.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum();
    let d = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::Metric("non-finite Fréchet distance".into()));
    }
    Ok(d.max(0.0))
}

/// Same distance from raw features without forming `D x D` covariances:
/// the nonzero spectrum of `S_a S_b` equals that of `C C^T` with
/// `C = X_b X_a^T / sqrt((n_a - 1)(n_b - 1))` on centered rows.
fn fid_low_rank(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let center = |x: &[Vec<f64>]| {
        let n = x.len();
        let d = x[0].len();
        let mut mean = vec![CompensatedSum::default(); d];
        for f in x {
            for (m, &v) in mean.iter_mut().zip(f) {
                m.add(v);
            }
        }
        let mean: Vec<f64> = mean.into_iter().map(|m| m.value() / n as f64).collect();
        let centered = DMatrix::from_fn(n, d, |i, j| x[i][j] - mean[j]);
        (mean, centered)
    };
    let (ma, xa) = center(a);
    let (mb, xb) = center(b);
    let (na, nb) = ((a.len() - 1) as f64, (b.len() - 1) as f64);
    let mean_term: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    let tr_a = xa.norm_squared() / na;
    let tr_b = xb.norm_squared() / nb;
    let c = &xb * xa.transpose() / (na * nb).sqrt();
    let cross: f64 = c.singular_values().iter().sum();
    let d = mean_term + tr_a + tr_b - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::Metric("non-finite Fréchet distance".into()));
    }
    Ok(d.max(0.0))
}

pub fn fid_from_features(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64> {
    let (_, da) = check_features(real)?;
    let (_, db) = check_features(generated)?;
    if da != db {
        return Err(Error::Metric(format!("dimension {da} vs {db}")));
    }
    if da <= MAX_DENSE_DIM {
        fid_from_stats(
            &FeatureStats::<f64>::from_features(real)?,
            &FeatureStats::<f64>::from_features(generated)?,
        )
    } else {
        fid_low_rank(real, generated)
    }
}

pub fn fid<T: Scalar>(
    real: &[ImageMaskPair],
    generated: &[ImageMaskPair],
    embedder: &FeatureEmbedder<T>,
) -> Result<f64> {
    fid_from_features(&embedder.embed_pairs(real)?, &embedder.embed_pairs(generated)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn quantile_sample(n: usize, mean: f64, sd: f64) -> Vec<Vec<f64>> {
        let normal = Normal::new(mean, sd).unwrap();
        (0..n)
            .map(|i| vec![normal.inverse_cdf((i as f64 + 0.5) / n as f64)])
            .collect()
    }

    fn stats_1d(mean: f64, var: f64) -> FeatureStats<f64> {
        FeatureStats::from_moments(vec![mean], vec![var], 2).unwrap()
    }

    #[test]
    fn one_dimensional_closed_forms() {
        assert!((fid_from_stats(&stats_1d(0.0, 1.0), &stats_1d(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!((fid_from_stats(&stats_1d(0.0, 1.0), &stats_1d(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-12);
        let base = quantile_sample(10_000, 0.0, 1.0);
        let shifted = quantile_sample(10_000, 1.0, 1.0);
        let scaled = quantile_sample(10_000, 0.0, 2.0);
        assert!((fid_from_features(&base, &shifted).unwrap() - 1.0).abs() < 0.02);
        assert!((fid_from_features(&base, &scaled).unwrap() - 1.0).abs() < 0.02);
    }

    #[test]
    fn identical_sets_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<Vec<f64>> = (0..12).map(|_| (0..6).map(|_| rng.gen()).collect()).collect();
        assert!(fid_from_features(&x, &x).unwrap() < 1e-6);
        assert!(fid_low_rank(&x, &x).unwrap() < 1e-6);
    }

    #[test]
    fn dense_and_low_rank_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (na, nb, d) in [(10, 14, 5), (8, 8, 20), (30, 25, 12)] {
            let a: Vec<Vec<f64>> = (0..na).map(|_| (0..d).map(|_| rng.gen::<f64>()).collect()).collect();
            let b: Vec<Vec<f64>> = (0..nb)
                .map(|_| (0..d).map(|_| rng.gen::<f64>() * 1.5 + 0.2).collect())
                .collect();
            let dense = fid_from_stats(
                &FeatureStats::<f64>::from_features(&a).unwrap(),
                &FeatureStats::<f64>::from_features(&b).unwrap(),
            )
            .unwrap();
            let low = fid_low_rank(&a, &b).unwrap();
            assert!((dense - low).abs() < 1e-8 * (1.0 + dense), "{dense} vs {low}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(fid_from_features(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
        assert!(fid_from_features(&[vec![f64::NAN], vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn conv_embedder_is_deterministic_and_spatial() {
        let e = FeatureEmbedder::<f32>::seeded(1);
        let top: Vec<f32> = (0..32 * 32).map(|i| if i < 512 { 1.0 } else { 0.0 }).collect();
        let bottom: Vec<f32> = top.iter().rev().copied().collect();
        let f = e.embed(&[&top, &top, &bottom], 32, 32).unwrap();
        assert_eq!(f[0].len(), e.dim(32, 32));
        assert_eq!(f[0], f[1]);
        assert_ne!(f[0], f[2]);
        assert_eq!(
            FeatureEmbedder::<f32>::seeded(1).embed(&[&top], 32, 32).unwrap()[0],
            f[0]
        );
    }

    #[test]
    fn pretrained_loads_blob() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embed.bin");
        let src = FeatureEmbedder::<f32>::seeded(5);
        src.params().save(&path).unwrap();
        let e = FeatureEmbedder::<f32>::new(EmbedderMode::PretrainedClassifier { weights: path }).unwrap();
        let im = vec![0.3f32; 16 * 16];
        assert_eq!(e.embed(&[&im], 16, 16).unwrap(), src.embed(&[&im], 16, 16).unwrap());
    }

    fn feature_set(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, d), n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn symmetric_and_nonnegative(a in feature_set(6, 4), b in feature_set(9, 4)) {
            let ab = fid_from_features(&a, &b).unwrap();
            let ba = fid_from_features(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-6 * (1.0 + ab));
        }

        #[test]
        fn constant_shift_adds_c_squared_d(a in feature_set(8, 16), c in 0.5f64..3.0) {
            let e = FeatureEmbedder::<f32>::identity();
            let imgs: Vec<Vec<f32>> = a.iter().map(|f| f.iter().map(|&v| v as f32).collect()).collect();
            let shifted: Vec<Vec<f32>> = imgs.iter().map(|f| f.iter().map(|&v| v + c as f32).collect()).collect();
            let fa = e.embed(&imgs.iter().map(|v| v.as_slice()).collect::<Vec<_>>(), 4, 4).unwrap();
            let fb = e.embed(&shifted.iter().map(|v| v.as_slice()).collect::<Vec<_>>(), 4, 4).unwrap();
            let base = fid_from_features(&fa, &fa).unwrap();
            let moved = fid_from_features(&fa, &fb).unwrap();
            let expect = (c as f32 as f64).powi(2) * 16.0;
            prop_assert!(((moved - base) - expect).abs() < 0.01 * expect, "{} vs {}", moved - base, expect);
        }
    }
}
