//! Segmentation overlap, generative-quality scores and significance tests.

pub mod dice;
pub mod fid;
pub mod inception;
pub mod stats;

pub use dice::{dice_coefficient, DiceScores};
pub use fid::{fid, fid_from_features, fid_from_stats, EmbedderMode, FeatureEmbedder, FeatureStats};
pub use inception::{inception_score, LabelDistributionModel};
pub use stats::{bonferroni_alpha, cohens_d, paired_t_test, EffectSize, PairedTTest};
