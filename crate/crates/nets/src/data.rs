//! Conversion between images and tensors, gradient features, padding and
//! augmentation.

use intrinsic_autodiff::{Shape, Tensor};
use intrinsic_core::{concat_channels, gradient, Image};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::GradientMode;
use crate::{Error, Result};

/// An image with its reflectance and shading targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: Image,
    pub reflectance: Image,
    pub shading: Image,
}

impl TrainSample {
    pub fn new(image: Image, reflectance: Image, shading: Image) -> Result<Self> {
        let image = to_rgb(&image)?;
        let reflectance = to_rgb(&reflectance)?;
        let shading = to_rgb(&shading)?;
        if !image.same_size(&reflectance) || !image.same_size(&shading) {
            return Err(Error::Config("image, reflectance and shading sizes differ".into()));
        }
        Ok(TrainSample {
            image,
            reflectance,
            shading,
        })
    }

    pub fn map(&self, f: impl Fn(&Image) -> Image) -> TrainSample {
        TrainSample {
            image: f(&self.image),
            reflectance: f(&self.reflectance),
            shading: f(&self.shading),
        }
    }
}

impl From<intrinsic_core::synth::StoredSample> for TrainSample {
    fn from(s: intrinsic_core::synth::StoredSample) -> Self {
        TrainSample {
            image: s.image,
            reflectance: s.set.reflectance,
            shading: s.set.shading,
        }
    }
}

/// 1-channel images are replicated to RGB.
pub fn to_rgb(img: &Image) -> Result<Image> {
    Ok(img.broadcast_channels(3)?)
}

/// Stacks images (HWC) into an `N×C×H×W` tensor.
pub fn batch_tensor(images: &[&Image]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Config("empty batch".into()))?;
    let (h, w, c) = first.shape();
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if img.shape() != (h, w, c) {
            return Err(Error::Config("images in a batch must share one shape".into()));
        }
        let src = img.data();
        for ch in 0..c {
            data.extend((0..h * w).map(|p| src[p * c + ch]));
        }
    }
    Ok(Tensor::new(Shape::new(images.len(), c, h, w), data)?)
}

/// Sample `n` of a tensor as an image.
pub fn tensor_image(t: &Tensor<f32>, n: usize) -> Result<Image> {
    let s = t.shape();
    let plane = s.plane();
    let src = t.sample(n);
    let mut data = Vec::with_capacity(s.sample_len());
    for p in 0..plane {
        data.extend((0..s.c()).map(|ch| src[ch * plane + p]));
    }
    Ok(Image::new(s.h(), s.w(), s.c(), data)?)
}

/// Per-channel forward-difference gradients: magnitudes (3 channels) or
/// `gx` then `gy` (6 channels).
pub fn gradient_features(img: &Image, mode: GradientMode) -> Result<Image> {
    let g = gradient(img)?;
    Ok(match mode {
        GradientMode::Magnitude => g.magnitude,
        GradientMode::Signed => concat_channels(&[&g.gx, &g.gy])?,
    })
}

/// Zero padding that makes both extents multiples of `multiple`, split
/// evenly (the extra pixel goes to the bottom/right).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn for_size(height: usize, width: usize, multiple: usize) -> Self {
        let extra = |n: usize| n.div_ceil(multiple) * multiple - n;
        let (eh, ew) = (extra(height), extra(width));
        Padding {
            top: eh / 2,
            bottom: eh - eh / 2,
            left: ew / 2,
            right: ew - ew / 2,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Padding::default()
    }

    pub fn apply(&self, img: &Image) -> Image {
        if self.is_zero() {
            return img.clone();
        }
        img.pad(self.top, self.bottom, self.left, self.right)
    }

    pub fn remove(&self, img: &Image) -> Result<Image> {
        if self.is_zero() {
            return Ok(img.clone());
        }
        let h = img.height() - self.top - self.bottom;
        let w = img.width() - self.left - self.right;
        Ok(img.crop(self.top, self.left, h, w)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
}

/// One draw of the geometric augmentation, applied identically to an image
/// and all its targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augmentation {
    pub flip: Flip,
    pub dy: isize,
    pub dx: isize,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        flip: Flip::None,
        dy: 0,
        dx: 0,
    };

    pub fn draw(rng: &mut impl Rng, max_shift: usize) -> Self {
        let flip = match rng.random_range(0..3) {
            0 => Flip::None,
            1 => Flip::Horizontal,
            _ => Flip::Vertical,
        };
        let m = max_shift as i64;
        Augmentation {
            flip,
            dy: rng.random_range(-m..=m) as isize,
            dx: rng.random_range(-m..=m) as isize,
        }
    }

    /// Flip, then shift with zero fill.
    pub fn apply(&self, img: &Image) -> Image {
        let flipped = match self.flip {
            Flip::None => img.clone(),
            Flip::Horizontal => img.flip(true),
            Flip::Vertical => img.flip(false),
        };
        if self.dy == 0 && self.dx == 0 {
            flipped
        } else {
            flipped.shift(self.dy, self.dx)
        }
    }
}
