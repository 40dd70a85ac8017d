use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::NUM_LAYERS;

/// Per-layer Dice for labels 1..=6; `None` where both masks lack the layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    pub per_layer: [Option<f64>; NUM_LAYERS],
    pub mean: Option<f64>,
}

pub fn dice_coefficient(prediction: &[u8], target: &[u8]) -> Result<DiceScores> {
    if prediction.len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, target {}",
            prediction.len(),
            target.len()
        )));
    }
    let mut inter = [0usize; NUM_LAYERS + 1];
    let mut np = [0usize; NUM_LAYERS + 1];
    let mut nt = [0usize; NUM_LAYERS + 1];
    for (&p, &t) in prediction.iter().zip(target) {
        if p as usize > NUM_LAYERS || t as usize > NUM_LAYERS {
            return Err(Error::Metric(format!("label outside 0..=6: {p} / {t}")));
        }
        np[p as usize] += 1;
        nt[t as usize] += 1;
        if p == t {
            inter[p as usize] += 1;
        }
    }
    let mut per_layer = [None; NUM_LAYERS];
    for c in 1..=NUM_LAYERS {
        let denom = np[c] + nt[c];
        if denom > 0 {
            per_layer[c - 1] = Some(2.0 * inter[c] as f64 / denom as f64);
        }
    }
    let present: Vec<f64> = per_layer.iter().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(DiceScores { per_layer, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn trivial_cases() {
        let t = [0, 1, 1, 2, 2, 3, 4, 5, 6];
        let d = dice_coefficient(&t, &t).unwrap();
        assert!(d.per_layer.iter().all(|v| *v == Some(1.0)));
        assert_eq!(d.mean, Some(1.0));

        let d = dice_coefficient(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap();
        assert_eq!(d.per_layer[0], Some(0.0));
        assert_eq!(d.per_layer[1], None);

        let p = [1, 1, 1, 1, 0, 0, 0, 0];
        let t = [0, 0, 1, 1, 1, 1, 0, 0];
        assert_eq!(dice_coefficient(&p, &t).unwrap().per_layer[0], Some(0.5));
    }

    #[test]
    fn empty_target_with_prediction_scores_zero() {
        let d = dice_coefficient(&[2, 0], &[0, 0]).unwrap();
        assert_eq!(d.per_layer[1], Some(0.0));
        assert_eq!(d.mean, Some(0.0));
        assert!(dice_coefficient(&[0], &[0, 0]).is_err());
    }

    proptest! {
        #[test]
        fn symmetric(p in proptest::collection::vec(0u8..7, 64), t in proptest::collection::vec(0u8..7, 64)) {
            let a = dice_coefficient(&p, &t).unwrap();
            let b = dice_coefficient(&t, &p).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
