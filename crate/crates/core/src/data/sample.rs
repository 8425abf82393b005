use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{augment_reference, distort_mask, mask_out, AnnotatedImage, AugmentationPolicy, EditMask};
use crate::error::{Error, Result};
use crate::image::Image;

/// Value written into the edit region of the masked source.
pub const MASK_FILL: f64 = 0.0;

/// `{(masked source, reference, mask), target}` training tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub masked_source: Image,
    pub mask: EditMask,
    pub reference: Image,
    pub target: Image,
}

/// How [`make_training_sample`] builds references and masks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub augmentation: AugmentationPolicy,
    /// Distort box masks into brush-like shapes.
    pub distort_masks: bool,
    /// With distortion on, probability of keeping the plain box mask anyway.
    pub plain_box_prob: f64,
    /// Side of the square the reference crop is resized to.
    pub reference_size: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            augmentation: AugmentationPolicy::default(),
            distort_masks: true,
            plain_box_prob: 0.3,
            reference_size: 32,
        }
    }
}

impl SynthesisConfig {
    /// Plain box masks and unaugmented crops.
    pub fn plain(reference_size: usize) -> Self {
        SynthesisConfig {
            augmentation: AugmentationPolicy::identity(),
            distort_masks: false,
            plain_box_prob: 1.0,
            reference_size,
        }
    }
}

/// Picks one box uniformly and turns the image into a self-reference pair:
/// the box content becomes the (augmented) reference and the (distorted) box
/// becomes the region the model must restore.
pub fn make_training_sample(
    annotated: &AnnotatedImage,
    config: &SynthesisConfig,
    rng: &mut impl Rng,
) -> Result<TrainingSample> {
    if annotated.boxes.is_empty() {
        return Err(Error::Parameter("annotated image has no boxes".into()));
    }
    let image = &annotated.image;
    let bbox = annotated.boxes[rng.random_range(0..annotated.boxes.len())];
    bbox.validate(image.height(), image.width())?;
    let crop = image.crop(bbox.x, bbox.y, bbox.w, bbox.h);
    let reference = augment_reference(&crop, &config.augmentation, rng)
        .resize(config.reference_size, config.reference_size);
    let size = (image.height(), image.width());
    let mask = if config.distort_masks && !rng.random_bool(config.plain_box_prob) {
        distort_mask(&bbox, size, rng)?
    } else {
        EditMask::from_box(&bbox, size.0, size.1)
    };
    let masked_source = mask_out(image, &mask, MASK_FILL)?;
    Ok(TrainingSample {
        masked_source,
        mask,
        reference,
        target: image.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{composite, generate_toy_dataset, BBox};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unmasked_region_is_bit_identical_and_partition_restores_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = generate_toy_dataset(20, (32, 32), &mut rng);
        let cfg = SynthesisConfig::default();
        for item in &data {
            let s = make_training_sample(item, &cfg, &mut rng).unwrap();
            assert_eq!(s.target, item.image);
            assert_eq!(s.reference.dims(), (32, 32, 3));
            for y in 0..32 {
                for x in 0..32 {
                    if s.mask.get(y, x) {
                        assert!(s.masked_source.pixel(y, x).iter().all(|&v| v == MASK_FILL));
                    } else {
                        assert_eq!(s.masked_source.pixel(y, x), s.target.pixel(y, x));
                    }
                }
            }
            assert_eq!(composite(&s.masked_source, &s.target, &s.mask).unwrap(), s.target);
        }
    }

    #[test]
    fn plain_config_reference_is_the_raw_crop() {
        let image = Image::from_fn(32, 32, 3, |y, x, c| ((y * 5 + x * 3 + c) % 23) as f64 / 11.5 - 1.0);
        let bbox = BBox::new(4, 6, 16, 16);
        let item = AnnotatedImage {
            image: image.clone(),
            boxes: vec![bbox],
        };
        let s = make_training_sample(&item, &SynthesisConfig::plain(16), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(s.reference.pixel(y, x), image.pixel(6 + y, 4 + x));
            }
        }
        assert_eq!(s.mask, EditMask::from_box(&bbox, 32, 32));
    }

    #[test]
    fn no_boxes_is_an_error() {
        let item = AnnotatedImage {
            image: Image::filled(16, 16, 3, 0.0),
            boxes: vec![],
        };
        let r = make_training_sample(&item, &SynthesisConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Parameter(_))));
    }
}
