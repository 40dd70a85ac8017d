//! Partial-annotation settings, generator training triplets, gap-filling
//! requests, and reassembly of the interpolated dataset.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{ImageMaskPair, SliceStack};

/// Periodic annotation: keep slice `i` iff `i % (skip + 1) == 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AnnotationSetting {
    skip: usize,
}

impl AnnotationSetting {
    pub const SKIPS: [usize; 4] = [1, 2, 3, 7];

    pub fn from_skip(skip: usize) -> Result<Self> {
        if !Self::SKIPS.contains(&skip) {
            return Err(Error::Planning(format!(
                "skip count {skip} is not one of {:?}",
                Self::SKIPS
            )));
        }
        Ok(AnnotationSetting { skip })
    }

    /// Settings are numbered 1..=4 for skip counts 1, 2, 3, 7.
    pub fn from_number(number: usize) -> Result<Self> {
        match number {
            1..=4 => Ok(AnnotationSetting {
                skip: Self::SKIPS[number - 1],
            }),
            _ => Err(Error::Planning(format!("setting {number} is not in 1..=4"))),
        }
    }

    pub fn number(self) -> usize {
        Self::SKIPS.iter().position(|&k| k == self.skip).unwrap() + 1
    }

    pub fn skip(self) -> usize {
        self.skip
    }

    /// Distance between consecutive kept slices.
    pub fn period(self) -> usize {
        self.skip + 1
    }

    /// Asymptotic labelled fraction `1 / (k + 1)`.
    pub fn label_fraction(self) -> f64 {
        1.0 / self.period() as f64
    }

    /// The rounded-down percentage used to name the setting (50/33/25/12).
    pub fn nominal_percent(self) -> u32 {
        (100.0 * self.label_fraction()).floor() as u32
    }
}

/// The annotated subset of one stack.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDataset {
    pub patient_id: String,
    pub scan_id: String,
    pub setting: AnnotationSetting,
    pub num_slices: usize,
    pub kept_indices: Vec<usize>,
    /// Trailing slices after the last kept index.
    pub dropped_indices: Vec<usize>,
    /// Kept pairs, in `kept_indices` order, flagged annotated.
    pub kept: Vec<ImageMaskPair>,
}

impl SparseDataset {
    pub fn actual_fraction(&self) -> f64 {
        self.kept_indices.len() as f64 / self.num_slices as f64
    }

    pub fn pair(&self, slice: usize) -> Option<&ImageMaskPair> {
        self.kept_indices
            .iter()
            .position(|&i| i == slice)
            .map(|k| &self.kept[k])
    }

    /// Adjacent kept pairs, each with its fill ratios.
    pub fn interpolation_requests(&self) -> Vec<InterpolationRequest> {
        let ratios = plan_inference_ratios(self.setting.skip());
        self.kept_indices
            .windows(2)
            .map(|w| InterpolationRequest {
                left: w[0],
                right: w[1],
                ratios: ratios.clone(),
            })
            .collect()
    }

    pub fn plan(&self) -> Result<AnnotationPlan> {
        Ok(AnnotationPlan {
            setting: self.setting.number(),
            skip: self.setting.skip(),
            patient_id: self.patient_id.clone(),
            scan_id: self.scan_id.clone(),
            kept_indices: self.kept_indices.clone(),
            dropped_indices: self.dropped_indices.clone(),
            triplets: make_training_triplets(self)?.iter().map(|t| t.indices()).collect(),
            requests: self.interpolation_requests(),
        })
    }
}

/// Serializable audit record of a sparsification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationPlan {
    pub setting: usize,
    pub skip: usize,
    pub patient_id: String,
    pub scan_id: String,
    pub kept_indices: Vec<usize>,
    pub dropped_indices: Vec<usize>,
    pub triplets: Vec<[usize; 3]>,
    pub requests: Vec<InterpolationRequest>,
}

/// Three annotated slices, the middle equidistant from the ends.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTriplet {
    pub left: ImageMaskPair,
    pub middle: ImageMaskPair,
    pub right: ImageMaskPair,
}

impl TrainingTriplet {
    pub fn indices(&self) -> [usize; 3] {
        [self.left.slice_index, self.middle.slice_index, self.right.slice_index]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationRequest {
    pub left: usize,
    pub right: usize,
    pub ratios: Vec<f64>,
}

/// Position `left + (right - left) * step / steps` inside one gap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GapSlot {
    pub left: usize,
    pub right: usize,
    pub step: usize,
    pub steps: usize,
}

impl GapSlot {
    pub fn ratio(&self) -> f64 {
        self.step as f64 / self.steps as f64
    }

    pub fn position(&self) -> f64 {
        self.left as f64 + (self.right - self.left) as f64 * self.ratio()
    }

    /// Slots of every request of a sparse dataset.
    pub fn all(sparse: &SparseDataset) -> Vec<GapSlot> {
        let steps = sparse.setting.period();
        sparse
            .kept_indices
            .windows(2)
            .flat_map(|w| {
                (1..steps).map(move |step| GapSlot {
                    left: w[0],
                    right: w[1],
                    step,
                    steps,
                })
            })
            .collect()
    }
}

/// Keep every `(k + 1)`-th slice of `stack`.
pub fn sparsify(stack: &SliceStack, setting: AnnotationSetting) -> Result<SparseDataset> {
    let n = stack.len();
    let period = setting.period();
    if n < 2 * period + 1 {
        return Err(Error::Planning(format!(
            "stack {} has {n} slices; setting {} needs at least {}",
            stack.scan_id,
            setting.number(),
            2 * period + 1
        )));
    }
    let kept_indices: Vec<usize> = (0..n).step_by(period).collect();
    let last = *kept_indices.last().unwrap();
    let kept = kept_indices
        .iter()
        .map(|&i| {
            let mut p = stack.pairs[i].clone();
            p.annotated = true;
            p
        })
        .collect();
    Ok(SparseDataset {
        patient_id: stack.patient_id.clone(),
        scan_id: stack.scan_id.clone(),
        setting,
        num_slices: n,
        kept_indices,
        dropped_indices: (last + 1..n).collect(),
        kept,
    })
}

/// One triplet per window of three consecutive kept slices.
pub fn make_training_triplets(sparse: &SparseDataset) -> Result<Vec<TrainingTriplet>> {
    if sparse.kept.len() < 3 {
        return Err(Error::Planning(format!(
            "{} kept slices cannot form a triplet",
            sparse.kept.len()
        )));
    }
    Ok(sparse
        .kept
        .windows(3)
        .map(|w| TrainingTriplet {
            left: w[0].clone(),
            middle: w[1].clone(),
            right: w[2].clone(),
        })
        .collect())
}

/// Triplets spaced `period` apart taken from a fully annotated stack
/// (validation and transfer evaluation), starting every `stride` slices.
pub fn dense_triplets(stack: &SliceStack, period: usize, stride: usize) -> Vec<TrainingTriplet> {
    let span = 2 * period;
    (0..stack.len().saturating_sub(span))
        .step_by(stride.max(1))
        .map(|i| TrainingTriplet {
            left: stack.pairs[i].clone(),
            middle: stack.pairs[i + period].clone(),
            right: stack.pairs[i + span].clone(),
        })
        .collect()
}

/// Uniform fill ratios `j / (k + 1)` for `j = 1..=k`.
pub fn plan_inference_ratios(skip: usize) -> Vec<f64> {
    let period = (skip + 1) as f64;
    (1..=skip).map(|j| j as f64 / period).collect()
}

/// Kept and generated pairs merged in slice order.
#[derive(Clone, Debug)]
pub struct AssembledDataset {
    /// Pairs ordered by position; `slice_index` is the (integral) position.
    pub stack: SliceStack,
    pub positions: Vec<f64>,
    pub dropped_indices: Vec<usize>,
}

/// Merge kept slices with generated ones; every gap slot must be covered.
pub fn assemble_interpolated_dataset(
    sparse: &SparseDataset,
    generated: &BTreeMap<GapSlot, ImageMaskPair>,
) -> Result<AssembledDataset> {
    let mut items: Vec<(f64, ImageMaskPair)> = sparse
        .kept
        .iter()
        .zip(&sparse.kept_indices)
        .map(|(p, &i)| (i as f64, p.clone()))
        .collect();
    for slot in GapSlot::all(sparse) {
        let imp = generated.get(&slot).ok_or_else(|| {
            Error::Assembly(format!(
                "no generated pair for gap {}..{} at ratio {:.4}",
                slot.left,
                slot.right,
                slot.ratio()
            ))
        })?;
        let mut imp = imp.clone();
        imp.annotated = false;
        items.push((slot.position(), imp));
    }
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    let positions: Vec<f64> = items.iter().map(|(p, _)| *p).collect();
    let pairs = items
        .into_iter()
        .map(|(pos, mut p)| {
            p.slice_index = pos.round() as usize;
            p
        })
        .collect();
    Ok(AssembledDataset {
        stack: SliceStack {
            pairs,
            patient_id: sparse.patient_id.clone(),
            scan_id: sparse.scan_id.clone(),
            side: crate::phantom::Side::Left,
            location: crate::phantom::Location::Multifidus,
            pixel_spacing_mm: 1.0,
        },
        positions,
        dropped_indices: sparse.dropped_indices.clone(),
    })
}
