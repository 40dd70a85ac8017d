//! Interpolation and augmentation baselines compared against the
//! inter-slice generator.

use std::collections::BTreeMap;
use std::path::Path;

use crate::deblur::{deblur_image, train_deblur, DeblurCheckpoint, DeblurConfig, DeblurPair};
use crate::error::{Error, Result};
use crate::phantom::ImageMaskPair;
use crate::plan::{GapSlot, InterpolationRequest, SparseDataset};
use crate::scalar::Scalar;

/// Linear image blend; the mask is copied from the nearer side, the left
/// one on a tie.
pub fn bilinear_baseline(left: &ImageMaskPair, right: &ImageMaskPair, ratio: f64) -> Result<ImageMaskPair> {
    if !left.same_shape(right) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            left.height, left.width, right.height, right.width
        )));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Validation(format!("ratio {ratio} outside [0, 1]")));
    }
    let image = left
        .image
        .iter()
        .zip(&right.image)
        .map(|(&a, &b)| ((1.0 - ratio) * a as f64 + ratio * b as f64) as f32)
        .collect();
    let mask = if ratio > 0.5 { &right.mask } else { &left.mask };
    let span = right.slice_index as f64 - left.slice_index as f64;
    Ok(ImageMaskPair {
        height: left.height,
        width: left.width,
        image,
        mask: mask.clone(),
        slice_index: (left.slice_index as f64 + span * ratio).round() as usize,
        annotated: false,
    })
}

/// Bilinear counterpart of the generator's gap filling.
pub fn fill_gaps_bilinear(
    sparse: &SparseDataset,
    requests: &[InterpolationRequest],
) -> Result<BTreeMap<GapSlot, ImageMaskPair>> {
    let steps = sparse.setting.period();
    let mut out = BTreeMap::new();
    for req in requests {
        let (Some(left), Some(right)) = (sparse.pair(req.left), sparse.pair(req.right)) else {
            return Err(Error::Fill(format!(
                "request {}..{} references a slice that is not kept",
                req.left, req.right
            )));
        };
        for &ratio in &req.ratios {
            let step = (ratio * steps as f64).round() as usize;
            if step == 0 || step >= steps {
                return Err(Error::Fill(format!("ratio {ratio} is not interior")));
            }
            let slot = GapSlot {
                left: req.left,
                right: req.right,
                step,
                steps,
            };
            out.insert(slot, bilinear_baseline(left, right, slot.ratio())?);
        }
    }
    Ok(out)
}

/// Train an image-to-image network to reproduce its input, reconstruct
/// every image, and return the originals followed by the reconstructions.
/// The network is always built without the residual path.
pub fn gan_reconstruction_baseline<T: Scalar>(
    dataset: &[ImageMaskPair],
    config: &DeblurConfig,
    out_dir: Option<&Path>,
) -> Result<(Vec<ImageMaskPair>, DeblurCheckpoint<T>)> {
    if dataset.is_empty() {
        return Err(Error::Config(
            "reconstruction baseline needs a non-empty dataset".into(),
        ));
    }
    let config = DeblurConfig {
        residual: false,
        ..config.clone()
    };
    let pairs: Vec<DeblurPair> = dataset
        .iter()
        .map(|p| DeblurPair {
            height: p.height,
            width: p.width,
            input: p.image.clone(),
            target: p.image.clone(),
        })
        .collect();
    let ckpt = train_deblur::<T>(&pairs, &[], &config, out_dir)?;
    let mut combined = dataset.to_vec();
    for p in dataset {
        combined.push(ImageMaskPair {
            image: deblur_image(&ckpt.model, &p.image, p.height, p.width)?,
            annotated: false,
            ..p.clone()
        });
    }
    Ok((combined, ckpt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deblur::deblur_l1;
    use crate::plan::{sparsify, AnnotationSetting};
    use crate::seg::tests::{slices, stack};
    use proptest::prelude::*;

    fn flat(v: f32, label: u8, idx: usize) -> ImageMaskPair {
        ImageMaskPair::new(4, 4, vec![v; 16], vec![label; 16], idx).unwrap()
    }

    #[test]
    fn examples() {
        let (l, r) = (flat(0.0, 2, 0), flat(1.0, 3, 4));
        let mid = bilinear_baseline(&l, &r, 0.5).unwrap();
        assert!(mid.image.iter().all(|&v| v == 0.5));
        assert!(mid.mask.iter().all(|&m| m == 2));
        assert_eq!(mid.slice_index, 2);
        assert!(!mid.annotated);
        let start = bilinear_baseline(&l, &r, 0.0).unwrap();
        assert_eq!((start.image, start.mask), (l.image.clone(), l.mask.clone()));
        assert!(bilinear_baseline(&l, &r, 0.75).unwrap().mask.iter().all(|&m| m == 3));
        let other = ImageMaskPair::new(2, 8, vec![0.0; 16], vec![0; 16], 1).unwrap();
        assert!(bilinear_baseline(&l, &other, 0.5).is_err());
        assert!(bilinear_baseline(&l, &r, 1.5).is_err());
    }

    #[test]
    fn bilinear_fill_covers_every_gap() {
        let stack = stack(9, 1);
        let sparse = sparsify(&stack, AnnotationSetting::from_skip(1).unwrap()).unwrap();
        let filled = fill_gaps_bilinear(&sparse, &sparse.interpolation_requests()).unwrap();
        assert_eq!(filled.keys().copied().collect::<Vec<_>>(), GapSlot::all(&sparse));
    }

    #[test]
    fn reconstruction_doubles_and_keeps_masks() {
        let data = slices(4, 2);
        let config = DeblurConfig {
            widths: vec![8, 16],
            disc_widths: vec![4, 8],
            lr: 2e-3,
            max_epochs: 40,
            patience: 10,
            batch_size: 2,
            ..DeblurConfig::default()
        };
        let (combined, ckpt) = gan_reconstruction_baseline::<f32>(&data, &config, None).unwrap();
        assert_eq!(combined.len(), 8);
        for (orig, rec) in data.iter().zip(&combined[4..]) {
            assert_eq!(orig.mask, rec.mask);
        }
        assert_eq!(&combined[..4], &data[..]);
        let pairs: Vec<DeblurPair> = data
            .iter()
            .map(|p| DeblurPair {
                height: 32,
                width: 32,
                input: p.image.clone(),
                target: p.image.clone(),
            })
            .collect();
        let l1 = deblur_l1(&ckpt.model, &pairs).unwrap();
        assert!(l1 < 0.05, "{l1}");
    }

    proptest! {
        #[test]
        fn image_matches_two_term_form(
            a in proptest::collection::vec(0.0f32..=1.0, 16),
            b in proptest::collection::vec(0.0f32..=1.0, 16),
            r in 0.0f64..=1.0,
        ) {
            let l = ImageMaskPair::new(4, 4, a.clone(), vec![1; 16], 0).unwrap();
            let rr = ImageMaskPair::new(4, 4, b.clone(), vec![2; 16], 2).unwrap();
            let out = bilinear_baseline(&l, &rr, r).unwrap();
            for i in 0..16 {
                let expect = (1.0 - r) * a[i] as f64 + r * b[i] as f64;
                prop_assert!((out.image[i] as f64 - expect).abs() < 1e-6);
            }
        }
    }
}
