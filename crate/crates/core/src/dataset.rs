//! Synthetic field and aerial tile sets.
//!
//! Field tiles go through the field preprocessing (resize, smoothing, gamma,
//! random crops). Aerial tiles are rendered from the same kind of scene,
//! resized to the working resolution and then degraded with
//! [`domain_shift`] before cropping.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::imaging::{
    domain_shift, preprocess_field, resize_bilinear, resize_nearest, synth_scene,
    DomainShiftParams, PreprocessParams, SceneSpec,
};
use crate::training::Sample;

/// Scene seed `i` of a dataset with base seed `base`.
pub fn scene_seed(base: u64, i: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64 + 1)
}

fn crop_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x0c0f_fee0_dead_beef)
}

pub fn field_tiles(
    spec: &SceneSpec,
    seeds: &[u64],
    params: &PreprocessParams,
) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(seeds.len() * params.tiles_per_image);
    for &seed in seeds {
        let (image, mask) = synth_scene(&SceneSpec { seed, ..spec.clone() })?;
        let mut rng = crop_rng(seed);
        for (image, mask) in preprocess_field(&image, &mask, &mut rng, params)? {
            out.push(Sample { image, mask });
        }
    }
    Ok(out)
}

pub fn aerial_tiles(
    spec: &SceneSpec,
    seeds: &[u64],
    params: &PreprocessParams,
    shift: &DomainShiftParams,
) -> Result<Vec<Sample>> {
    let plain = PreprocessParams {
        sigma: Some(0.0),
        gamma: 1.0,
        ..params.clone()
    };
    let mut out = Vec::with_capacity(seeds.len() * params.tiles_per_image);
    for &seed in seeds {
        let (image, mask) = synth_scene(&SceneSpec { seed, ..spec.clone() })?;
        let small = resize_bilinear(&image, params.work_width, params.work_height);
        let small_mask = resize_nearest(&mask, params.work_width, params.work_height);
        let shifted = domain_shift(&small, shift);
        let mut rng = crop_rng(seed);
        for (image, mask) in preprocess_field(&shifted, &small_mask, &mut rng, &plain)? {
            out.push(Sample { image, mask });
        }
    }
    Ok(out)
}
