//! Deterministic synthetic short-axis stacks.
//!
//! Each slice shows a circular blood pool inside a myocardial ring on a
//! darker background. The pool radius shrinks linearly from base to apex, the
//! center follows a seeded random walk, and contrast fades toward the apex. In
//! ambiguity mode the most apical quarter of the slices has no contrast at
//! all, so their masks can only be inferred from the trend of earlier slices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Phase, SliceStack};
use crate::mask::Mask;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhantomError {
    #[error("invalid phantom config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub slices: usize,
    /// Image height and width in pixels.
    pub size: usize,
    pub spacing_mm: f64,
    pub r_base_mm: f64,
    pub r_apex_mm: f64,
    /// Myocardial wall thickness.
    pub wall_mm: f64,
    /// Maximum offset of the base-slice center from the image center, per axis.
    pub center_jitter_mm: f64,
    /// Standard deviation of the per-slice center step, per axis.
    pub drift_sigma_mm: f64,
    pub blood: f32,
    pub myocardium: f32,
    pub background: f32,
    /// Contrast falls linearly from 1 at the base to `1 - contrast_decay` at the apex.
    pub contrast_decay: f64,
    pub noise_sigma: f64,
    pub ambiguous: bool,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            slices: 9,
            size: 64,
            spacing_mm: 2.0,
            r_base_mm: 20.0,
            r_apex_mm: 8.0,
            wall_mm: 6.0,
            center_jitter_mm: 8.0,
            drift_sigma_mm: 1.0,
            blood: 0.85,
            myocardium: 0.35,
            background: 0.15,
            contrast_decay: 0.5,
            noise_sigma: 0.05,
            ambiguous: false,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    /// Pixel spacing of a 320 mm field of view sampled on 256 pixels.
    pub const WIDE_FOV_SPACING_MM: f64 = 1.25;

    fn half_fov_mm(&self) -> f64 {
        0.5 * self.size as f64 * self.spacing_mm
    }

    /// Largest allowed distance of the center from the image center, per axis,
    /// so that the myocardial ring stays inside the field of view.
    fn center_limit_mm(&self) -> f64 {
        self.half_fov_mm() - self.r_base_mm - self.wall_mm - self.spacing_mm
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::Invalid(m));
        if self.slices < 2 {
            return bad(format!("need at least 2 slices, got {}", self.slices));
        }
        if self.size < 8 {
            return bad(format!("size must be at least 8, got {}", self.size));
        }
        if !(self.spacing_mm > 0.0) {
            return bad(format!("spacing must be positive, got {}", self.spacing_mm));
        }
        if !(self.r_base_mm > self.r_apex_mm && self.r_apex_mm > 0.0) {
            return bad(format!(
                "radii must satisfy r_base > r_apex > 0, got {} and {}",
                self.r_base_mm, self.r_apex_mm
            ));
        }
        if self.wall_mm < 0.0 || self.drift_sigma_mm < 0.0 || self.center_jitter_mm < 0.0 || self.noise_sigma < 0.0 {
            return bad("wall, drift, jitter and noise must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.contrast_decay) {
            return bad(format!(
                "contrast_decay must lie in [0, 1], got {}",
                self.contrast_decay
            ));
        }
        if self.center_limit_mm() < self.center_jitter_mm {
            return bad(format!(
                "ring of radius {} mm with center jitter {} mm does not fit a {} mm field of view",
                self.r_base_mm + self.wall_mm,
                self.center_jitter_mm,
                2.0 * self.half_fov_mm()
            ));
        }
        Ok(())
    }

    /// Blood-pool radius of slice `s` (0 = base).
    pub fn radius_mm(&self, s: usize) -> f64 {
        let t = s as f64 / (self.slices - 1) as f64;
        self.r_base_mm + t * (self.r_apex_mm - self.r_base_mm)
    }

    /// Number of apical slices without contrast in ambiguity mode, `ceil(S/4)`.
    pub fn ambiguous_slices(&self) -> usize {
        self.slices.div_ceil(4)
    }

    fn contrast(&self, s: usize) -> f64 {
        if self.ambiguous && s + self.ambiguous_slices() >= self.slices {
            return 0.0;
        }
        1.0 - self.contrast_decay * s as f64 / (self.slices - 1) as f64
    }
}

/// Generates one stack with ground-truth masks (the blood-pool disks).
pub fn generate_phantom(cfg: &PhantomConfig, subject: impl Into<String>) -> Result<SliceStack, PhantomError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.size;
    let limit = cfg.center_limit_mm();
    let step = Normal::new(0.0, cfg.drift_sigma_mm).expect("sigma validated");
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
    let mut center = [
        rng.random_range(-cfg.center_jitter_mm..=cfg.center_jitter_mm),
        rng.random_range(-cfg.center_jitter_mm..=cfg.center_jitter_mm),
    ];
    let mid = (n as f64 - 1.0) / 2.0;
    let mut images = Vec::with_capacity(cfg.slices * n * n);
    let mut masks = Vec::with_capacity(cfg.slices);
    for s in 0..cfg.slices {
        if s > 0 {
            for c in &mut center {
                *c += step.sample(&mut rng);
                // Reflect at the limits so the ring stays in view.
                if *c > limit {
                    *c = 2.0 * limit - *c;
                } else if *c < -limit {
                    *c = -2.0 * limit - *c;
                }
                *c = c.clamp(-limit, limit);
            }
        }
        let r = cfg.radius_mm(s);
        let contrast = cfg.contrast(s);
        let level = |d: f64| -> f64 {
            let tissue = if d <= r {
                cfg.blood
            } else if d <= r + cfg.wall_mm {
                cfg.myocardium
            } else {
                cfg.background
            } as f64;
            cfg.background as f64 + contrast * (tissue - cfg.background as f64)
        };
        let dist = |row: usize, col: usize| {
            let y = (row as f64 - mid) * cfg.spacing_mm - center[0];
            let x = (col as f64 - mid) * cfg.spacing_mm - center[1];
            y.hypot(x)
        };
        for row in 0..n {
            for col in 0..n {
                let v = level(dist(row, col)) + noise.sample(&mut rng);
                images.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        masks.push(Mask::from_fn(n, n, |row, col| dist(row, col) <= r));
    }
    let stack = SliceStack::new(
        subject,
        Phase::EndDiastole,
        cfg.slices,
        n,
        n,
        cfg.spacing_mm,
        images,
        Some(masks),
    )
    .expect("generator produces consistent dimensions");
    Ok(stack)
}

/// `count` phantoms whose base and apex radii vary per subject
/// (base ×[0.8, 1.2], apex ×[0.5, 1.5] of the template). Subject `i` is
/// named `phantom-{i:03}`. Everything derives from `seed`.
pub fn phantom_family(template: &PhantomConfig, count: usize, seed: u64) -> Result<Vec<SliceStack>, PhantomError> {
    template.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let r_base_mm = template.r_base_mm * rng.random_range(0.8..=1.2);
            let r_apex_mm = (template.r_apex_mm * rng.random_range(0.5..=1.5)).min(0.9 * r_base_mm);
            let cfg = PhantomConfig {
                r_base_mm,
                r_apex_mm,
                seed: rng.random(),
                ..template.clone()
            };
            let mut cfg = cfg;
            // Large sampled bases may not fit with the full jitter; shrink it.
            cfg.center_jitter_mm = cfg.center_jitter_mm.min(cfg.center_limit_mm().max(0.0));
            generate_phantom(&cfg, format!("phantom-{i:03}"))
        })
        .collect()
}
