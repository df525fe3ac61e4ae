//! Joint affine augmentation for image and mask.
//!
//! One parameter draw warps both tensors, so spatial correspondence
//! survives by construction. Draws are deterministic in
//! `(policy.seed, draw_index)` and independent across samples.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{rng_stream, StreamDomain};
use crate::{cf, Scalar};

/// Draws that empty the mask are redrawn this many times before giving
/// up and returning the pair untouched.
const EMPTY_RETRIES: u64 = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub horizontal_flip_prob: f64,
    /// Rotation is drawn from +-this many degrees.
    pub rotation_degrees: f64,
    /// Translation per axis, drawn from +-this fraction of the dimension.
    pub translation_fraction: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub seed: u64,
}

impl AugmentPolicy {
    pub fn with_seed(seed: u64) -> Self {
        AugmentPolicy {
            horizontal_flip_prob: 0.5,
            rotation_degrees: 15.0,
            translation_fraction: 0.10,
            scale_min: 0.8,
            scale_max: 1.25,
            seed,
        }
    }

    /// No-op policy: every draw is the identity transform.
    pub fn identity(seed: u64) -> Self {
        AugmentPolicy {
            horizontal_flip_prob: 0.0,
            rotation_degrees: 0.0,
            translation_fraction: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.horizontal_flip_prob) {
            return Err(Error::Config("flip probability outside [0, 1]".into()));
        }
        if self.rotation_degrees < 0.0 || self.translation_fraction < 0.0 {
            return Err(Error::Config("negative augmentation range".into()));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::Config("bad scale range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub flip: bool,
    /// Radians, counterclockwise about the image center.
    pub theta: f64,
    /// Pixels.
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
}

impl AffineParams {
    pub fn identity() -> Self {
        AffineParams { flip: false, theta: 0.0, tx: 0.0, ty: 0.0, scale: 1.0 }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.theta == 0.0 && self.tx == 0.0 && self.ty == 0.0 && self.scale == 1.0
    }
}

fn sym_range(rng: &mut impl Rng, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.gen_range(-half_width..=half_width)
    } else {
        0.0
    }
}

pub fn draw_params(policy: &AugmentPolicy, dims: (usize, usize), rng: &mut impl Rng) -> AffineParams {
    let (h, w) = dims;
    let flip = rng.gen::<f64>() < policy.horizontal_flip_prob;
    let theta = sym_range(rng, policy.rotation_degrees).to_radians();
    let tx = sym_range(rng, policy.translation_fraction) * w as f64;
    let ty = sym_range(rng, policy.translation_fraction) * h as f64;
    let scale = if policy.scale_min < policy.scale_max {
        rng.gen_range(policy.scale_min..=policy.scale_max)
    } else {
        policy.scale_min
    };
    AffineParams { flip, theta, tx, ty, scale }
}

/// Warps image and mask with one transform. Output pixels are pulled from
/// the inverse-mapped input location by bilinear interpolation; locations
/// outside the frame read the image's per-channel mean, and zero for the
/// mask. Mask values stay in [0, 1].
pub fn apply_params<F: Scalar>(
    image: ArrayView3<F>,
    mask: ArrayView2<F>,
    params: &AffineParams,
) -> (Array3<F>, Array2<F>) {
    let (c, h, w) = image.dim();
    debug_assert_eq!(mask.dim(), (h, w));
    if params.is_identity() {
        return (image.to_owned(), mask.to_owned());
    }
    let mut fill = vec![0.0f64; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for v in image.index_axis(ndarray::Axis(0), ch).iter() {
            sum += v.to_f64().unwrap_or(0.0);
        }
        fill[ch] = sum / (h * w) as f64;
    }

    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (sin, cos) = params.theta.sin_cos();
    let inv_scale = 1.0 / params.scale;

    let mut out_img = Array3::zeros((c, h, w));
    let mut out_mask = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            // Inverse transform: undo translation, rotation, scale, flip.
            let dx = x as f64 - cx - params.tx;
            let dy = y as f64 - cy - params.ty;
            let rx = (dx * cos + dy * sin) * inv_scale;
            let ry = (-dx * sin + dy * cos) * inv_scale;
            let sx = if params.flip { cx - rx } else { cx + rx };
            let sy = cy + ry;

            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            let weights = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1, y0, fx * (1.0 - fy)),
                (x0, y0 + 1, (1.0 - fx) * fy),
                (x0 + 1, y0 + 1, fx * fy),
            ];
            for ch in 0..c {
                let mut acc = 0.0;
                for &(ix, iy, wgt) in &weights {
                    if wgt == 0.0 {
                        continue;
                    }
                    let v = if ix >= 0 && iy >= 0 && (ix as usize) < w && (iy as usize) < h {
                        image[[ch, iy as usize, ix as usize]].to_f64().unwrap_or(0.0)
                    } else {
                        fill[ch]
                    };
                    acc += wgt * v;
                }
                out_img[[ch, y, x]] = cf::<F>(acc);
            }
            let mut acc = 0.0;
            for &(ix, iy, wgt) in &weights {
                if wgt == 0.0 {
                    continue;
                }
                let v = if ix >= 0 && iy >= 0 && (ix as usize) < w && (iy as usize) < h {
                    mask[[iy as usize, ix as usize]].to_f64().unwrap_or(0.0)
                } else {
                    0.0
                };
                acc += wgt * v;
            }
            out_mask[[y, x]] = cf::<F>(acc.clamp(0.0, 1.0));
        }
    }
    (out_img, out_mask)
}

/// Augments one sample. The transform is drawn from
/// `(policy.seed, draw_index)`; a draw that wipes out the mask is retried
/// with fresh parameters a bounded number of times, after which the pair
/// is returned untransformed.
pub fn augment_pair<F: Scalar>(
    image: ArrayView3<F>,
    mask: ArrayView2<F>,
    policy: &AugmentPolicy,
    draw_index: u64,
) -> Result<(Array3<F>, Array2<F>)> {
    policy.validate()?;
    let (_, h, w) = image.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "mask {:?} does not match image {}x{}",
            mask.dim(),
            h,
            w
        )));
    }
    let input_mass: f64 = mask.iter().map(|v| v.to_f64().unwrap_or(0.0)).sum();
    if input_mass == 0.0 {
        return Ok((image.to_owned(), mask.to_owned()));
    }
    for attempt in 0..EMPTY_RETRIES {
        let mut rng = rng_stream(
            policy.seed,
            StreamDomain::Augment,
            draw_index * EMPTY_RETRIES + attempt,
        );
        let params = draw_params(policy, (h, w), &mut rng);
        let (out_img, out_mask) = apply_params(image, mask, &params);
        let mass: f64 = out_mask.iter().map(|v| v.to_f64().unwrap_or(0.0)).sum();
        if mass >= 1.0 {
            return Ok((out_img, out_mask));
        }
    }
    Ok((image.to_owned(), mask.to_owned()))
}
