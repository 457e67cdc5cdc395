//! Rigid in-plane augmentation applied identically to every slice of a stack.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SliceStack;
use crate::mask::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub enabled: bool,
    /// Maximum shift per axis, in whole pixels.
    pub max_translation: i32,
    pub max_rotation_deg: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            max_translation: 16,
            max_rotation_deg: 40.0,
        }
    }
}

/// Rotation about the image center followed by an integer shift.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Transform {
    pub dy: i32,
    pub dx: i32,
    pub rotation_deg: f64,
}

impl Transform {
    pub fn sample<R: Rng + ?Sized>(spec: &AugmentationSpec, rng: &mut R) -> Self {
        let t = spec.max_translation.abs();
        let a = spec.max_rotation_deg.abs();
        Self {
            dy: rng.random_range(-t..=t),
            dx: rng.random_range(-t..=t),
            rotation_deg: if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 },
        }
    }
}

/// Samples one transform and applies it to the whole stack. Returns the
/// stack unchanged when augmentation is disabled.
pub fn augment<R: Rng + ?Sized>(stack: &SliceStack, spec: &AugmentationSpec, rng: &mut R) -> SliceStack {
    if !spec.enabled {
        return stack.clone();
    }
    apply_transform(stack, Transform::sample(spec, rng))
}

/// Mean of the image border, used to fill regions moved in from outside.
fn border_mean(img: &[f32], h: usize, w: usize) -> f32 {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for r in 0..h {
        for c in 0..w {
            if r == 0 || c == 0 || r + 1 == h || c + 1 == w {
                sum += img[r * w + c] as f64;
                n += 1;
            }
        }
    }
    (sum / n as f64) as f32
}

/// Resamples every slice (bilinear) and mask (nearest neighbor) under `t`.
pub fn apply_transform(stack: &SliceStack, t: Transform) -> SliceStack {
    let (h, w) = (stack.height(), stack.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let theta = t.rotation_deg.to_radians();
    let (sin, cos) = if t.rotation_deg == 0.0 {
        (0.0, 1.0)
    } else {
        theta.sin_cos()
    };
    // Output pixel p samples the input at R^-1 (p - shift - center) + center.
    let source = |r: usize, c: usize| -> (f64, f64) {
        let y = r as f64 - t.dy as f64 - cy;
        let x = c as f64 - t.dx as f64 - cx;
        (cos * y + sin * x + cy, -sin * y + cos * x + cx)
    };

    let mut images = Vec::with_capacity(stack.images().len());
    for s in 0..stack.slices() {
        let img = stack.image(s);
        let fill = border_mean(img, h, w);
        let at = |r: isize, c: isize| -> f64 {
            if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                fill as f64
            } else {
                img[r as usize * w + c as usize] as f64
            }
        };
        for r in 0..h {
            for c in 0..w {
                let (y, x) = source(r, c);
                let (y0, x0) = (y.floor(), x.floor());
                let (fy, fx) = (y - y0, x - x0);
                let (y0, x0) = (y0 as isize, x0 as isize);
                let v = if fy == 0.0 && fx == 0.0 {
                    at(y0, x0)
                } else {
                    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                        + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
                };
                images.push(v as f32);
            }
        }
    }
    let masks = stack.masks().map(|ms| {
        ms.iter()
            .map(|m| {
                Mask::from_fn(h, w, |r, c| {
                    let (y, x) = source(r, c);
                    let (y, x) = (y.round(), x.round());
                    y >= 0.0 && x >= 0.0 && y < h as f64 && x < w as f64 && m.get(y as usize, x as usize)
                })
            })
            .collect()
    });
    SliceStack::new(
        stack.subject.clone(),
        stack.phase,
        stack.slices(),
        h,
        w,
        stack.spacing_mm(),
        images,
        masks,
    )
    .expect("resampling preserves dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomConfig};

    fn stack() -> SliceStack {
        generate_phantom(&PhantomConfig::default(), "a").unwrap()
    }

    fn iou(a: &Mask, b: &Mask) -> f64 {
        let inter = a.pixels().iter().zip(b.pixels()).filter(|(&x, &y)| x && y).count();
        let union = a.pixels().iter().zip(b.pixels()).filter(|(&x, &y)| x || y).count();
        inter as f64 / union as f64
    }

    #[test]
    fn zero_transform_is_identity() {
        let s = stack();
        assert_eq!(apply_transform(&s, Transform::default()), s);
    }

    #[test]
    fn translation_shifts_centroids_exactly() {
        let s = stack();
        let moved = apply_transform(
            &s,
            Transform {
                dy: 3,
                dx: 0,
                rotation_deg: 0.0,
            },
        );
        for (a, b) in s.masks().unwrap().iter().zip(moved.masks().unwrap()) {
            let (ra, ca) = a.centroid().unwrap();
            let (rb, cb) = b.centroid().unwrap();
            assert!((rb - ra - 3.0).abs() < 1e-12 && (cb - ca).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_round_trip_keeps_masks() {
        let s = stack();
        let rot = |st: &SliceStack, deg| {
            apply_transform(
                st,
                Transform {
                    dy: 0,
                    dx: 0,
                    rotation_deg: deg,
                },
            )
        };
        let back = rot(&rot(&s, 40.0), -40.0);
        for (a, b) in s.masks().unwrap().iter().zip(back.masks().unwrap()) {
            assert!(iou(a, b) > 0.95, "{}", iou(a, b));
        }
    }

    #[test]
    fn sampled_transforms_respect_bounds() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let spec = AugmentationSpec::default();
        for _ in 0..500 {
            let t = Transform::sample(&spec, &mut rng);
            assert!(t.dy.abs() <= 16 && t.dx.abs() <= 16);
            assert!(t.rotation_deg.abs() <= 40.0);
        }
    }

    #[test]
    fn disabled_spec_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let spec = AugmentationSpec {
            enabled: false,
            ..AugmentationSpec::default()
        };
        let s = stack();
        assert_eq!(augment(&s, &spec, &mut rng), s);
    }
}
