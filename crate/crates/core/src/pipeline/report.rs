//! Held-out evaluation of trained segmenters and generators.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::patients;
use crate::error::{Error, Result};
use crate::gan::{load_generator, middles_at_half};
use crate::metrics::fid::{fid_from_features, EmbedderMode, FeatureEmbedder};
use crate::metrics::{
    bonferroni_alpha, cohens_d, dice_coefficient, inception_score, paired_t_test, DiceScores, EffectSize,
    LabelDistributionModel, PairedTTest,
};
use crate::phantom::{DatasetSplit, ImageMaskPair, SliceStack, TissueLayer, NUM_LAYERS};
use crate::plan::{dense_triplets, AnnotationSetting, TrainingTriplet};
use crate::seg::{load_segmenter, predict_masks};
use crate::util::{write_file, write_json};

use super::EvalConfig;

pub const REPORT_FILES: [&str; 4] = ["report.csv", "generator_report.csv", "report.json", "summary.txt"];

/// A trained segmenter and the patients it saw during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model: String,
    /// `None` for the fully supervised model.
    pub setting: Option<usize>,
    pub checkpoint: PathBuf,
    pub train_patients: BTreeSet<String>,
}

impl ModelRecord {
    fn setting_label(&self) -> String {
        self.setting.map_or_else(|| "full".to_string(), |s| s.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStat {
    pub layer: String,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub setting: String,
    pub n: usize,
    pub layers: Vec<LayerStat>,
    pub mean_dice: f64,
    pub sd_dice: f64,
    /// Difference of overall means against the setting's baseline.
    pub change: Option<f64>,
    pub p_value: Option<f64>,
    pub significant: Option<bool>,
    pub cohens_d: Option<f64>,
    pub effect_size: Option<EffectSize>,
    /// Six-layer mean Dice of every test slice, in test-set order.
    pub per_slice: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub model: String,
    pub baseline: String,
    pub setting: String,
    pub test: PairedTTest,
    pub cohens_d: Option<f64>,
    pub effect_size: Option<EffectSize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRow {
    pub setting: usize,
    pub subset: String,
    pub triplets: usize,
    pub fid: f64,
    pub is_mean: f64,
    pub is_sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub alpha: f64,
    pub comparisons_m: usize,
    pub alpha_adjusted: f64,
    pub test_patients: Vec<String>,
    pub test_slices: usize,
    pub rows: Vec<ReportRow>,
    pub comparisons: Vec<Comparison>,
    pub generator: Vec<GeneratorRow>,
    pub notes: Vec<String>,
}

fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), sd)
}

fn row_for(record: &ModelRecord, scores: &[DiceScores]) -> ReportRow {
    let layers = (0..NUM_LAYERS)
        .map(|i| {
            let v: Vec<f64> = scores.iter().filter_map(|s| s.per_layer[i]).collect();
            let (mean, sd) = mean_sd(&v);
            LayerStat {
                layer: TissueLayer::LAYERS[i].short_name().to_string(),
                mean,
                sd,
                n: v.len(),
            }
        })
        .collect();
    let per_slice: Vec<Option<f64>> = scores.iter().map(|s| s.mean).collect();
    let overall: Vec<f64> = per_slice.iter().flatten().copied().collect();
    let (mean, sd) = mean_sd(&overall);
    ReportRow {
        model: record.model.clone(),
        setting: record.setting_label(),
        n: overall.len(),
        layers,
        mean_dice: mean.unwrap_or(0.0),
        sd_dice: sd.unwrap_or(0.0),
        change: None,
        p_value: None,
        significant: None,
        cohens_d: None,
        effect_size: None,
        per_slice,
    }
}

fn check_leakage(what: &str, trained_on: &BTreeSet<String>, scored: &BTreeSet<String>) -> Result<()> {
    match trained_on.intersection(scored).next() {
        Some(p) => Err(Error::Leakage(format!(
            "{what} was trained on patient {p}, which it would be scored on"
        ))),
        None => Ok(()),
    }
}

fn held_out_triplets(stacks: &[SliceStack], period: usize) -> Vec<TrainingTriplet> {
    stacks
        .iter()
        .flat_map(|s| dense_triplets(s, period, 2 * period))
        .collect()
}

fn label_model(eval: &EvalConfig) -> Result<LabelDistributionModel> {
    match (&eval.embedder, &eval.is_head) {
        (EmbedderMode::PretrainedClassifier { weights }, Some(head)) => {
            LabelDistributionModel::pretrained(weights, head)
        }
        _ => Ok(LabelDistributionModel::seeded(eval.is_seed, eval.is_classes)),
    }
}

/// Score every model on the test patients, compare each model against its
/// setting's `partial` baseline, and evaluate the generators on held-out
/// triplets of subset A validation and subset B.
pub fn evaluate_and_report(
    records: &[ModelRecord],
    split: &DatasetSplit,
    generators: &[(usize, PathBuf)],
    eval: &EvalConfig,
    generator_patients: &BTreeSet<String>,
) -> Result<EvaluationReport> {
    let test: Vec<ImageMaskPair> = split.test.iter().flat_map(|s| s.pairs.iter().cloned()).collect();
    if test.is_empty() {
        return Err(Error::Validation("empty test set".into()));
    }
    if records.is_empty() {
        return Err(Error::Validation("no trained segmenter to evaluate".into()));
    }
    let test_ids = patients(&split.test);
    let (h, w) = (test[0].height, test[0].width);
    let images: Vec<&[f32]> = test.iter().map(|p| p.image.as_slice()).collect();

    let mut rows = Vec::with_capacity(records.len());
    for record in records {
        check_leakage(
            &format!("model {} (setting {})", record.model, record.setting_label()),
            &record.train_patients,
            &test_ids,
        )?;
        let model = load_segmenter::<f32>(&record.checkpoint)?.model;
        let preds = predict_masks(&model, &images, h, w, false)?;
        let scores = preds
            .iter()
            .zip(&test)
            .map(|(p, t)| dice_coefficient(&p.labels, &t.mask))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row_for(record, &scores));
    }

    let pairs: Vec<(usize, usize)> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.model != "partial" && r.setting.is_some())
        .filter_map(|(i, r)| {
            records
                .iter()
                .position(|b| b.model == "partial" && b.setting == r.setting)
                .map(|b| (b, i))
        })
        .collect();
    let m = pairs.len();
    let alpha_adjusted = bonferroni_alpha(eval.alpha, m.max(1))?;
    let mut comparisons = Vec::with_capacity(m);
    for (b, i) in pairs {
        let (base, row) = (&rows[b], &rows[i]);
        let (a, c): (Vec<f64>, Vec<f64>) = base
            .per_slice
            .iter()
            .zip(&row.per_slice)
            .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
            .unzip();
        let test = paired_t_test(&a, &c, eval.alpha, m.max(1))?;
        let d = cohens_d(base.mean_dice, base.sd_dice, row.mean_dice, row.sd_dice).ok();
        let (base_model, base_mean) = (base.model.clone(), base.mean_dice);
        let row = &mut rows[i];
        row.change = Some(row.mean_dice - base_mean);
        row.p_value = Some(test.p);
        row.significant = Some(test.significant);
        row.cohens_d = d;
        row.effect_size = d.map(EffectSize::classify);
        comparisons.push(Comparison {
            model: row.model.clone(),
            baseline: base_model,
            setting: row.setting.clone(),
            test,
            cohens_d: d,
            effect_size: d.map(EffectSize::classify),
        });
    }

    let embedder = FeatureEmbedder::<f32>::new(eval.embedder.clone())?;
    let labeler = label_model(eval)?;
    let mut generator = Vec::new();
    for (setting, dir) in generators {
        let gan = load_generator::<f32>(dir)?.model;
        let period = AnnotationSetting::from_number(*setting)?.period();
        for (subset, stacks) in [("A-val", &split.val), ("B", &split.subset_b)] {
            check_leakage(
                &format!("generator (setting {setting})"),
                generator_patients,
                &patients(stacks),
            )?;
            let triplets = held_out_triplets(stacks, period);
            if triplets.len() < 2 {
                continue;
            }
            let generated = middles_at_half(&gan, &triplets)?;
            let real: Vec<ImageMaskPair> = triplets.iter().map(|t| t.middle.clone()).collect();
            let fid = fid_from_features(&embedder.embed_pairs(&real)?, &embedder.embed_pairs(&generated)?)?;
            let probs = labeler.predict(&generated)?;
            let (is_mean, is_sd) = inception_score(&probs, eval.is_splits.min(probs.len()))?;
            generator.push(GeneratorRow {
                setting: *setting,
                subset: subset.to_string(),
                triplets: triplets.len(),
                fid,
                is_mean,
                is_sd,
            });
        }
    }

    Ok(EvaluationReport {
        alpha: eval.alpha,
        comparisons_m: m,
        alpha_adjusted,
        test_patients: test_ids.into_iter().collect(),
        test_slices: test.len(),
        rows,
        comparisons,
        generator,
        notes: vec![
            "Dice values are fractions in [0, 1]; layer means exclude slices where the layer is absent from both masks.".into(),
            "Standard deviations and paired tests are computed over test slices.".into(),
            "Each model is compared with the partially annotated baseline of its setting; alpha is Bonferroni-adjusted over all comparisons.".into(),
        ],
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

impl EvaluationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,setting,n");
        for l in TissueLayer::LAYERS {
            let _ = write!(s, ",{0}_mean,{0}_sd", l.short_name());
        }
        s.push_str(",mean_dice,sd_dice,performance_change,p_value,significant,cohens_d,effect_size\n");
        for r in &self.rows {
            let _ = write!(s, "{},{},{}", r.model, r.setting, r.n);
            for l in &r.layers {
                let _ = write!(s, ",{},{}", opt(l.mean), opt(l.sd));
            }
            let effect = r
                .effect_size
                .map(|e| {
                    serde_json::to_value(e)
                        .unwrap()
                        .as_str()
                        .unwrap_or_default()
                        .to_string()
                })
                .unwrap_or_default();
            let _ = writeln!(
                s,
                ",{:.6},{:.6},{},{},{},{},{}",
                r.mean_dice,
                r.sd_dice,
                opt(r.change),
                opt(r.p_value),
                r.significant.map_or_else(String::new, |b| b.to_string()),
                opt(r.cohens_d),
                effect
            );
        }
        s
    }

    pub fn generator_csv(&self) -> String {
        let mut s = String::from("setting,subset,triplets,fid,is_mean,is_sd\n");
        for g in &self.generator {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6}",
                g.setting, g.subset, g.triplets, g.fid, g.is_mean, g.is_sd
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "Test set: {} slices from patients {}\nalpha = {}, m = {}, adjusted alpha = {:.6}\n\n",
            self.test_slices,
            self.test_patients.join(", "),
            self.alpha,
            self.comparisons_m,
            self.alpha_adjusted
        );
        let _ = writeln!(
            s,
            "{:<14} {:>7} {:>10} {:>8} {:>10} {:>10} {:>8}",
            "model", "setting", "mean dice", "sd", "change", "p", "d"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:>7} {:>10.4} {:>8.4} {:>10} {:>10} {:>8}",
                r.model,
                r.setting,
                r.mean_dice,
                r.sd_dice,
                r.change.map_or("-".into(), |v| format!("{v:+.4}")),
                r.p_value.map_or("-".into(), |v| format!("{v:.4}")),
                r.cohens_d.map_or("-".into(), |v| format!("{v:.3}")),
            );
        }
        if !self.generator.is_empty() {
            let _ = writeln!(
                s,
                "\n{:<8} {:<7} {:>9} {:>10} {:>8}",
                "setting", "subset", "triplets", "FID", "IS"
            );
            for g in &self.generator {
                let _ = writeln!(
                    s,
                    "{:<8} {:<7} {:>9} {:>10.3} {:>8.3}",
                    g.setting, g.subset, g.triplets, g.fid, g.is_mean
                );
            }
        }
        s.push('\n');
        for n in &self.notes {
            let _ = writeln!(s, "{n}");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("report.csv"), self.to_csv())?;
        write_file(&dir.join("generator_report.csv"), self.generator_csv())?;
        write_json(&dir.join("report.json"), self)?;
        write_file(&dir.join("summary.txt"), self.summary())
    }
}
