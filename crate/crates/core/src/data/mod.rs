//! Slice stacks, the synthetic cardiac phantom, augmentation, stack files
//! and dataset splitting.

mod augment;
mod io;
mod phantom;
mod split;

pub use augment::{apply_transform, augment, AugmentationSpec, Transform};
pub use io::{load_stack, save_stack, stack_paths, StackHeader, StackIoError, DTYPE_F32LE, STACK_FORMAT};
pub use phantom::{generate_phantom, phantom_family, PhantomConfig, PhantomError};
pub use split::{split_dataset, DatasetSplit, SplitError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::Mask;
use crate::tensor::Tensor;

/// Cardiac phase at which the stack was acquired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "ED")]
    EndDiastole,
    #[serde(rename = "ES")]
    EndSystole,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StackError {
    #[error("stack dimensions must be positive, got {slices}x{height}x{width}")]
    EmptyDimension { slices: usize, height: usize, width: usize },
    #[error("expected {expected} image values, got {actual}")]
    ImageLength { expected: usize, actual: usize },
    #[error("expected {expected} masks of {height}x{width}, got {actual}")]
    Masks {
        expected: usize,
        actual: usize,
        height: usize,
        width: usize,
    },
    #[error("pixel spacing must be positive and finite, got {0}")]
    Spacing(f64),
}

/// Short-axis slices of one subject, ordered base (index 0) to apex, with
/// optional ground-truth masks.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    pub subject: String,
    pub phase: Phase,
    slices: usize,
    height: usize,
    width: usize,
    spacing_mm: f64,
    images: Vec<f32>,
    masks: Option<Vec<Mask>>,
}

impl SliceStack {
    /// `images` holds `slices * height * width` intensities, slice-major.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        subject: impl Into<String>,
        phase: Phase,
        slices: usize,
        height: usize,
        width: usize,
        spacing_mm: f64,
        images: Vec<f32>,
        masks: Option<Vec<Mask>>,
    ) -> Result<Self, StackError> {
        if slices == 0 || height == 0 || width == 0 {
            return Err(StackError::EmptyDimension { slices, height, width });
        }
        if !(spacing_mm.is_finite() && spacing_mm > 0.0) {
            return Err(StackError::Spacing(spacing_mm));
        }
        let expected = slices * height * width;
        if images.len() != expected {
            return Err(StackError::ImageLength {
                expected,
                actual: images.len(),
            });
        }
        if let Some(m) = &masks {
            if m.len() != slices || m.iter().any(|m| m.shape() != (height, width)) {
                return Err(StackError::Masks {
                    expected: slices,
                    actual: m.len(),
                    height,
                    width,
                });
            }
        }
        Ok(Self {
            subject: subject.into(),
            phase,
            slices,
            height,
            width,
            spacing_mm,
            images,
            masks,
        })
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn spacing_mm(&self) -> f64 {
        self.spacing_mm
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn image(&self, s: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.images[s * plane..(s + 1) * plane]
    }

    pub fn masks(&self) -> Option<&[Mask]> {
        self.masks.as_deref()
    }

    pub fn with_masks(mut self, masks: Option<Vec<Mask>>) -> Result<Self, StackError> {
        let images = std::mem::take(&mut self.images);
        Self::new(
            self.subject,
            self.phase,
            self.slices,
            self.height,
            self.width,
            self.spacing_mm,
            images,
            masks,
        )
    }

    /// Images as a network input `[S, 1, H, W]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[self.slices, 1, self.height, self.width], self.images.clone())
            .expect("stack dimensions are validated on construction")
    }

    /// Ground-truth class ids (0 = background, 1 = LV) in `[S, H, W]` order.
    pub fn targets(&self) -> Option<Vec<usize>> {
        self.masks.as_ref().map(|ms| {
            ms.iter()
                .flat_map(|m| m.pixels().iter().map(|&p| usize::from(p)))
                .collect()
        })
    }
}
