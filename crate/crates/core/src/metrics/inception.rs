//! Inception Score over pluggable label distributions.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::fid::{CompensatedSum, EmbedderMode, FeatureEmbedder};
use crate::phantom::ImageMaskPair;

const NORM_TOL: f64 = 1e-6;

/// Source of `p(y|x)`.
#[derive(Clone, Debug)]
pub enum LabelDistributionModel {
    /// Fixed rows; image `i` gets row `i % rows.len()`.
    TableStub { rows: Vec<Vec<f64>> },
    /// Linear softmax head over embedder features.
    Classifier {
        embedder: FeatureEmbedder<f32>,
        /// `classes x dim`, row-major.
        weight: Vec<f64>,
        bias: Vec<f64>,
        classes: usize,
    },
}

impl LabelDistributionModel {
    /// Random head on the seeded conv embedder.
    pub fn seeded(seed: u64, classes: usize) -> Self {
        let embedder = FeatureEmbedder::<f32>::seeded(seed);
        let dim = embedder.dim(64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1abe1);
        let scale = 4.0 / (dim as f64).sqrt();
        LabelDistributionModel::Classifier {
            embedder,
            weight: (0..classes * dim).map(|_| rng.gen_range(-scale..scale)).collect(),
            bias: vec![0.0; classes],
            classes,
        }
    }

    /// Embedder weights from `embedder_weights`; head as JSON
    /// `{"weight": [[..]..], "bias": [..]}`.
    pub fn pretrained(embedder_weights: &Path, head: &Path) -> Result<Self> {
        #[derive(serde::Deserialize)]
        struct Head {
            weight: Vec<Vec<f64>>,
            bias: Vec<f64>,
        }
        let embedder = FeatureEmbedder::new(EmbedderMode::PretrainedClassifier {
            weights: embedder_weights.to_path_buf(),
        })?;
        let text = std::fs::read_to_string(head).map_err(|e| Error::io(head, e))?;
        let h: Head = serde_json::from_str(&text).map_err(|e| Error::format(head, e.to_string()))?;
        let classes = h.weight.len();
        let dim = embedder.dim(64, 64);
        if h.bias.len() != classes || h.weight.iter().any(|r| r.len() != dim) {
            return Err(Error::format(head, format!("head must be {classes} x {dim}")));
        }
        Ok(LabelDistributionModel::Classifier {
            embedder,
            weight: h.weight.concat(),
            bias: h.bias,
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        match self {
            LabelDistributionModel::TableStub { rows } => rows.first().map_or(0, Vec::len),
            LabelDistributionModel::Classifier { classes, .. } => *classes,
        }
    }

    pub fn predict(&self, images: &[ImageMaskPair]) -> Result<Vec<Vec<f64>>> {
        match self {
            LabelDistributionModel::TableStub { rows } => {
                if rows.is_empty() {
                    return Err(Error::Metric("empty label table".into()));
                }
                Ok((0..images.len()).map(|i| rows[i % rows.len()].clone()).collect())
            }
            LabelDistributionModel::Classifier {
                embedder,
                weight,
                bias,
                classes,
            } => {
                let feats = embedder.embed_pairs(images)?;
                Ok(feats
                    .iter()
                    .map(|f| {
                        let logits: Vec<f64> = (0..*classes)
                            .map(|k| {
                                let row = &weight[k * f.len()..(k + 1) * f.len()];
                                bias[k] + row.iter().zip(f).map(|(w, x)| w * x).sum::<f64>()
                            })
                            .collect();
                        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                        let z: f64 = e.iter().sum();
                        e.into_iter().map(|v| v / z).collect()
                    })
                    .collect())
            }
        }
    }
}

/// `exp(mean_x KL(p(y|x) || p(y)))` per split; returns mean and sample sd
/// over splits (sd is 0 for a single split).
pub fn inception_score(probs: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    if probs.is_empty() {
        return Err(Error::Metric("inception score of an empty set".into()));
    }
    let k = probs[0].len();
    if k < 2 {
        return Err(Error::Metric(format!("need at least 2 classes, got {k}")));
    }
    for (i, p) in probs.iter().enumerate() {
        let s: f64 = p.iter().sum();
        if p.len() != k || (s - 1.0).abs() > NORM_TOL || p.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Metric(format!("p(y|x) of image {i} is not a distribution")));
        }
    }
    if splits == 0 || splits > probs.len() {
        return Err(Error::Metric(format!("{splits} splits for {} images", probs.len())));
    }
    let n = probs.len();
    let scores: Vec<f64> = (0..splits)
        .map(|s| {
            let part = &probs[s * n / splits..(s + 1) * n / splits];
            let mut acc = vec![CompensatedSum::default(); k];
            for p in part {
                for (a, &v) in acc.iter_mut().zip(p) {
                    a.add(v);
                }
            }
            let marginal: Vec<f64> = acc.into_iter().map(|a| a.value() / part.len() as f64).collect();
            let kl: f64 = part
                .iter()
                .map(|p| {
                    p.iter()
                        .zip(&marginal)
                        .filter(|(&v, _)| v > 0.0)
                        .map(|(&v, &m)| v * (v / m).ln())
                        .sum::<f64>()
                })
                .sum::<f64>()
                / part.len() as f64;
            kl.exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let sd = if splits > 1 {
        (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (splits - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok((mean, sd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_forms() {
        let uniform = vec![vec![0.25; 4]; 5];
        assert_eq!(inception_score(&uniform, 1).unwrap().0, 1.0);
        let tenths = vec![vec![0.1; 10]; 50];
        assert_eq!(inception_score(&tenths, 1).unwrap().0, 1.0);
        let two = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((inception_score(&two, 1).unwrap().0 - 2.0).abs() < 1e-12);
        assert_eq!(inception_score(&[vec![0.0, 1.0, 0.0]], 1).unwrap().0, 1.0);
    }

    #[test]
    fn rejects_unnormalized() {
        assert!(inception_score(&[vec![0.5, 0.6]], 1).is_err());
        assert!(inception_score(&[vec![1.0]], 1).is_err());
        assert!(inception_score(&[vec![0.5, 0.5]], 2).is_err());
    }

    #[test]
    fn seeded_head_outputs_distributions() {
        let model = LabelDistributionModel::seeded(2, 5);
        let imgs: Vec<ImageMaskPair> = (0..3)
            .map(|i| {
                let im = (0..64 * 64).map(|p| ((p * (i + 1)) % 17) as f32 / 17.0).collect();
                ImageMaskPair::new(64, 64, im, vec![0; 64 * 64], i).unwrap()
            })
            .collect();
        let p = model.predict(&imgs).unwrap();
        for row in &p {
            assert_eq!(row.len(), 5);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let (is, _) = inception_score(&p, 1).unwrap();
        assert!((1.0..=5.0).contains(&is));
    }

    proptest! {
        #[test]
        fn bounded_by_one_and_k(raw in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 4), 1..20)) {
            let probs: Vec<Vec<f64>> = raw
                .iter()
                .map(|r| { let s: f64 = r.iter().sum(); r.iter().map(|v| v / s).collect() })
                .collect();
            let (is, _) = inception_score(&probs, 1).unwrap();
            prop_assert!((1.0 - 1e-12..=4.0 + 1e-12).contains(&is));
        }
    }
}
