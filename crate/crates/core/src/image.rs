//! Linear-light rasters and the image formation model.
//!
//! Pixels are stored interleaved in row-major order: row, then column, then
//! channel. All ground truth is linear HDR; gamma is applied only by
//! [`to_display`] when writing previews.

use crate::{Error, Result};

/// Clamp applied to reflectance by [`derive_shading`] when none is given.
pub const DEFAULT_SHADING_EPSILON: f32 = 1e-4;

/// An `height x width x channels` float raster.
///
/// Values must be finite. Images holding radiance or intrinsic components are
/// additionally non-negative; gradient fields and log images are signed, so
/// non-negativity is checked where data enters the system (see
/// [`Image::ensure_nonnegative`]) rather than on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Dimension(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "expected {} values for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty image");
        assert!(value.is_finite());
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    /// Builds an image from a function of `(row, column, channel)`.
    ///
    /// Panics if the function yields a non-finite value.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for i in 0..height {
            for j in 0..width {
                for c in 0..channels {
                    data.push(f(i, j, c));
                }
            }
        }
        Image::new(height, width, channels, data).expect("from_fn produced an invalid image")
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[self.index(row, col, channel)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f32) {
        let idx = self.index(row, col, channel);
        self.data[idx] = value;
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.same_size(other) && self.channels == other.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn ensure_nonnegative(&self) -> Result<()> {
        match self.data.iter().position(|&v| v < 0.0) {
            Some(pos) => Err(Error::InvalidData(format!(
                "negative value {} at flat index {pos}",
                self.data[pos]
            ))),
            None => Ok(()),
        }
    }

    /// Extracts one channel as a single-channel image.
    pub fn channel(&self, channel: usize) -> Image {
        assert!(channel < self.channels, "channel {channel} out of range");
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self
                .data
                .iter()
                .skip(channel)
                .step_by(self.channels)
                .copied()
                .collect(),
        }
    }

    /// Repeats a single-channel image across `channels` channels.
    pub fn broadcast_channels(&self, channels: usize) -> Result<Image> {
        if self.channels == channels {
            return Ok(self.clone());
        }
        if self.channels != 1 {
            return Err(Error::Dimension(format!(
                "cannot broadcast {} channels to {channels}",
                self.channels
            )));
        }
        Ok(Image {
            height: self.height,
            width: self.width,
            channels,
            data: self
                .data
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, channels))
                .collect(),
        })
    }

    /// Per-pixel mean over channels.
    pub fn channel_mean(&self) -> Image {
        let c = self.channels as f32;
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self
                .data
                .chunks_exact(self.channels)
                .map(|px| px.iter().sum::<f32>() / c)
                .collect(),
        }
    }

    /// Copies the `height x width` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Image> {
        if row + height > self.height || col + width > self.width || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "crop {height}x{width}@({row},{col}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for i in row..row + height {
            let start = self.index(i, col, 0);
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Ok(Image {
            height,
            width,
            channels: self.channels,
            data,
        })
    }

    /// Zero-pads by the given number of pixels on each side.
    pub fn pad(&self, top: usize, bottom: usize, left: usize, right: usize) -> Image {
        let h = self.height + top + bottom;
        let w = self.width + left + right;
        let mut out = Image::zeros(h, w, self.channels);
        for i in 0..self.height {
            let src = self.index(i, 0, 0);
            let dst = out.index(i + top, left, 0);
            out.data[dst..dst + self.width * self.channels]
                .copy_from_slice(&self.data[src..src + self.width * self.channels]);
        }
        out
    }

    /// Mirrors columns (`horizontal`) or rows.
    pub fn flip(&self, horizontal: bool) -> Image {
        Image::from_fn(self.height, self.width, self.channels, |i, j, c| {
            if horizontal {
                self.get(i, self.width - 1 - j, c)
            } else {
                self.get(self.height - 1 - i, j, c)
            }
        })
    }

    /// Translates content by `(dy, dx)` pixels, filling uncovered pixels with zero.
    pub fn shift(&self, dy: isize, dx: isize) -> Image {
        let (h, w) = (self.height as isize, self.width as isize);
        Image::from_fn(self.height, self.width, self.channels, |i, j, c| {
            let si = i as isize - dy;
            let sj = j as isize - dx;
            if si < 0 || sj < 0 || si >= h || sj >= w {
                0.0
            } else {
                self.get(si as usize, sj as usize, c)
            }
        })
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        assert!(self.same_shape(other), "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Light source color: one RGB triple for the whole scene, or a per-pixel map.
#[derive(Debug, Clone, PartialEq)]
pub enum Illuminant {
    Global([f32; 3]),
    PerPixel(Image),
}

impl Illuminant {
    /// Expands to a per-pixel image of the given size.
    pub fn to_image(&self, height: usize, width: usize) -> Image {
        match self {
            Illuminant::Global(rgb) => Image::from_fn(height, width, 3, |_, _, c| rgb[c]),
            Illuminant::PerPixel(img) => img.clone(),
        }
    }
}

/// Reflectance, shading and the optional specular and illuminant components
/// of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct IntrinsicSet {
    pub reflectance: Image,
    pub shading: Image,
    pub specular: Option<Image>,
    pub illuminant: Option<Illuminant>,
}

impl IntrinsicSet {
    pub fn new(reflectance: Image, shading: Image) -> Result<Self> {
        let set = IntrinsicSet {
            reflectance,
            shading,
            specular: None,
            illuminant: None,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.reflectance;
        if !r.same_size(&self.shading) {
            return Err(Error::Dimension(format!(
                "shading {}x{} does not match reflectance {}x{}",
                self.shading.height(),
                self.shading.width(),
                r.height(),
                r.width()
            )));
        }
        if let Some(h) = &self.specular {
            if !r.same_size(h) {
                return Err(Error::Dimension("specular size differs from reflectance".into()));
            }
        }
        match &self.illuminant {
            Some(Illuminant::PerPixel(e)) if !r.same_size(e) || e.channels() != 3 => Err(
                Error::Dimension("per-pixel illuminant must be 3-channel and match in size".into()),
            ),
            Some(Illuminant::Global(rgb)) if rgb.iter().any(|&v| v <= 0.0) => Err(Error::Domain(
                format!("global illuminant channels must be positive, got {rgb:?}"),
            )),
            _ => Ok(()),
        }
    }

    /// The image implied by whichever components are present.
    pub fn compose(&self) -> Result<Image> {
        match (&self.specular, &self.illuminant) {
            (Some(h), light) => compose_specular(&self.reflectance, &self.shading, h, light.as_ref()),
            (None, Some(e)) => compose_with_light(&self.reflectance, &self.shading, e),
            (None, None) => compose_diffuse(&self.reflectance, &self.shading),
        }
    }
}

fn check_broadcast(base: &Image, other: &Image, what: &str) -> Result<()> {
    if !base.same_size(other) {
        return Err(Error::Dimension(format!(
            "{what} is {}x{}, expected {}x{}",
            other.height(),
            other.width(),
            base.height(),
            base.width()
        )));
    }
    if other.channels() != 1 && other.channels() != base.channels() {
        return Err(Error::Dimension(format!(
            "{what} has {} channels, expected 1 or {}",
            other.channels(),
            base.channels()
        )));
    }
    Ok(())
}

/// Element-wise product with `other` broadcast over channels when it has one.
fn multiply(base: &Image, other: &Image) -> Image {
    let c = base.channels();
    let data = if other.channels() == c {
        base.data().iter().zip(other.data()).map(|(a, b)| a * b).collect()
    } else {
        base.data()
            .chunks_exact(c)
            .zip(other.data())
            .flat_map(|(px, &s)| px.iter().map(move |a| a * s))
            .collect()
    };
    Image {
        height: base.height(),
        width: base.width(),
        channels: c,
        data,
    }
}

fn multiply_light(base: &Image, light: &Illuminant) -> Result<Image> {
    match light {
        Illuminant::Global(rgb) => {
            if let Some(bad) = rgb.iter().find(|&&v| v <= 0.0 || !v.is_finite()) {
                return Err(Error::Domain(format!(
                    "global illuminant channels must be positive, got {bad}"
                )));
            }
            if base.channels() != 3 {
                return Err(Error::Dimension(format!(
                    "global RGB illuminant needs a 3-channel image, got {}",
                    base.channels()
                )));
            }
            Ok(Image {
                height: base.height(),
                width: base.width(),
                channels: 3,
                data: base
                    .data()
                    .chunks_exact(3)
                    .flat_map(|px| [px[0] * rgb[0], px[1] * rgb[1], px[2] * rgb[2]])
                    .collect(),
            })
        }
        Illuminant::PerPixel(e) => {
            check_broadcast(base, e, "illuminant")?;
            Ok(multiply(base, e))
        }
    }
}

/// `I = R x S`, the diffuse formation model. Single-channel shading is
/// broadcast across the reflectance channels.
pub fn compose_diffuse(reflectance: &Image, shading: &Image) -> Result<Image> {
    check_broadcast(reflectance, shading, "shading")?;
    Ok(multiply(reflectance, shading))
}

/// `I = R x S x E` for a per-pixel or global light color.
pub fn compose_with_light(
    reflectance: &Image,
    shading: &Image,
    light: &Illuminant,
) -> Result<Image> {
    let body = compose_diffuse(reflectance, shading)?;
    multiply_light(&body, light)
}

/// Diffuse plus specular term: `R x S + H`, or `R x S x E + H x E` when a
/// light color is given.
pub fn compose_specular(
    reflectance: &Image,
    shading: &Image,
    specular: &Image,
    light: Option<&Illuminant>,
) -> Result<Image> {
    check_broadcast(reflectance, specular, "specular")?;
    let specular = specular.broadcast_channels(reflectance.channels())?;
    let (body, surface) = match light {
        None => (compose_diffuse(reflectance, shading)?, specular),
        Some(e) => (
            compose_with_light(reflectance, shading, e)?,
            multiply_light(&specular, e)?,
        ),
    };
    let data = body
        .data()
        .iter()
        .zip(surface.data())
        .map(|(b, s)| b + s)
        .collect();
    Ok(Image { data, ..body })
}

/// Inverts the diffuse model: `S = I / max(R, epsilon)`.
///
/// Where reflectance is below `epsilon` the clamp applies and shading becomes
/// `I / epsilon`.
pub fn derive_shading(image: &Image, reflectance: &Image, epsilon: f32) -> Result<Image> {
    if !image.same_shape(reflectance) {
        return Err(Error::Dimension(format!(
            "image {:?} and reflectance {:?} differ",
            image.shape(),
            reflectance.shape()
        )));
    }
    if epsilon <= 0.0 {
        return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(Image {
        data: image
            .data()
            .iter()
            .zip(reflectance.data())
            .map(|(i, r)| i / r.max(epsilon))
            .collect(),
        ..image.clone()
    })
}

/// Forward-difference gradients of every channel and their magnitude.
///
/// `gx` is zero in the last column and `gy` is zero in the last row, so all
/// three fields keep the shape of the source.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub gx: Image,
    pub gy: Image,
    pub magnitude: Image,
}

pub fn gradient(image: &Image) -> Result<GradientField> {
    let (h, w, c) = image.shape();
    if h < 2 || w < 2 {
        return Err(Error::Dimension(format!(
            "gradient needs at least 2x2 pixels, got {h}x{w}"
        )));
    }
    let gx = Image::from_fn(h, w, c, |i, j, k| {
        if j + 1 < w {
            image.get(i, j + 1, k) - image.get(i, j, k)
        } else {
            0.0
        }
    });
    let gy = Image::from_fn(h, w, c, |i, j, k| {
        if i + 1 < h {
            image.get(i + 1, j, k) - image.get(i, j, k)
        } else {
            0.0
        }
    });
    let magnitude = Image {
        data: gx
            .data()
            .iter()
            .zip(gy.data())
            .map(|(x, y)| (x * x + y * y).sqrt())
            .collect(),
        ..gx.clone()
    };
    Ok(GradientField { gx, gy, magnitude })
}

/// Stacks channels of equally sized images in argument order.
pub fn concat_channels(images: &[&Image]) -> Result<Image> {
    let first = images
        .first()
        .ok_or_else(|| Error::Dimension("concat_channels needs at least one image".into()))?;
    if let Some(bad) = images.iter().find(|im| !im.same_size(first)) {
        return Err(Error::Dimension(format!(
            "cannot concatenate {}x{} with {}x{}",
            bad.height(),
            bad.width(),
            first.height(),
            first.width()
        )));
    }
    let channels: usize = images.iter().map(|im| im.channels()).sum();
    let mut data = Vec::with_capacity(first.height() * first.width() * channels);
    for p in 0..first.height() * first.width() {
        for im in images {
            let c = im.channels();
            data.extend_from_slice(&im.data()[p * c..(p + 1) * c]);
        }
    }
    Image::new(first.height(), first.width(), channels, data)
}

/// Preview encoding: clamp to `[0, 1]`, then raise to `1 / gamma`.
pub fn to_display(image: &Image, gamma: f32) -> Result<Image> {
    if gamma <= 0.0 || !gamma.is_finite() {
        return Err(Error::Domain(format!("gamma must be positive, got {gamma}")));
    }
    let inv = 1.0 / gamma;
    Ok(image.map(|v| v.clamp(0.0, 1.0).powf(inv)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Image {
        Image::from_fn(h, w, 1, |i, j, _| f(i, j))
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(matches!(Image::new(2, 2, 1, vec![0.0; 3]), Err(Error::Dimension(_))));
        assert!(matches!(
            Image::new(1, 2, 1, vec![0.0, f32::NAN]),
            Err(Error::InvalidData(_))
        ));
    }

    #[test]
    fn diffuse_constant_product() {
        let r = Image::filled(3, 4, 3, 0.5);
        let s = Image::filled(3, 4, 3, 0.8);
        let i = compose_diffuse(&r, &s).unwrap();
        assert!(i.data().iter().all(|&v| v == 0.5 * 0.8));
    }

    #[test]
    fn diffuse_unit_shading_is_identity() {
        let r = Image::from_fn(4, 5, 3, |i, j, c| 0.1 * (i + j + c) as f32);
        let one = Image::filled(4, 5, 1, 1.0);
        assert_eq!(compose_diffuse(&r, &one).unwrap(), r);
    }

    #[test]
    fn diffuse_shape_mismatch() {
        let r = Image::filled(3, 4, 3, 0.5);
        assert!(matches!(
            compose_diffuse(&r, &Image::filled(3, 5, 3, 1.0)),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            compose_diffuse(&r, &Image::filled(3, 4, 2, 1.0)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn light_unit_matches_diffuse() {
        let r = Image::from_fn(3, 3, 3, |i, j, c| 0.2 + 0.1 * (i * j + c) as f32);
        let s = Image::from_fn(3, 3, 1, |i, j, _| 0.3 * (i + j) as f32);
        let lit = compose_with_light(&r, &s, &Illuminant::Global([1.0; 3])).unwrap();
        assert_eq!(lit, compose_diffuse(&r, &s).unwrap());
    }

    #[test]
    fn light_colors_unit_scene() {
        let one = Image::filled(2, 2, 3, 1.0);
        let lit = compose_with_light(&one, &one, &Illuminant::Global([0.9, 0.8, 0.7])).unwrap();
        for px in lit.data().chunks(3) {
            assert_eq!(px, &[0.9, 0.8, 0.7]);
        }
    }

    #[test]
    fn light_rejects_non_positive_global() {
        let one = Image::filled(2, 2, 3, 1.0);
        assert!(matches!(
            compose_with_light(&one, &one, &Illuminant::Global([1.0, 0.0, 1.0])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn per_pixel_light_is_associative() {
        let r = Image::from_fn(4, 4, 3, |i, j, c| ((i * 7 + j * 3 + c) % 5) as f32 * 0.2);
        let s = Image::from_fn(4, 4, 3, |i, j, c| ((i + 2 * j + c) % 3) as f32 * 0.4);
        let e = Image::from_fn(4, 4, 3, |i, j, c| 0.5 + ((i + j * c) % 4) as f32 * 0.1);
        let lit = compose_with_light(&r, &s, &Illuminant::PerPixel(e.clone())).unwrap();
        let nested = compose_diffuse(&compose_diffuse(&r, &s).unwrap(), &e).unwrap();
        assert_eq!(lit, nested);
    }

    #[test]
    fn specular_zero_is_diffuse() {
        let r = Image::from_fn(3, 3, 3, |i, j, c| 0.1 * (1 + i + j + c) as f32);
        let s = Image::from_fn(3, 3, 3, |i, _, _| 0.5 + i as f32);
        let h = Image::zeros(3, 3, 3);
        assert_eq!(
            compose_specular(&r, &s, &h, None).unwrap(),
            compose_diffuse(&r, &s).unwrap()
        );
    }

    #[test]
    fn specular_units_give_two() {
        let one = Image::filled(2, 3, 3, 1.0);
        let img =
            compose_specular(&one, &one, &one, Some(&Illuminant::Global([1.0; 3]))).unwrap();
        assert!(img.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn derive_shading_clamps_black_reflectance() {
        let i = Image::filled(2, 2, 3, 0.3);
        let r = Image::zeros(2, 2, 3);
        let s = derive_shading(&i, &r, 1e-4).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.3 / 1e-4));
    }

    #[test]
    fn derive_shading_self_is_one() {
        let i = Image::from_fn(3, 5, 3, |a, b, c| 0.05 + 0.1 * (a + b + c) as f32);
        let s = derive_shading(&i, &i, DEFAULT_SHADING_EPSILON).unwrap();
        assert!(s.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let g = gradient(&Image::filled(4, 5, 3, 0.7)).unwrap();
        for f in [&g.gx, &g.gy, &g.magnitude] {
            assert!(f.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gradient_horizontal_ramp() {
        let g = gradient(&ramp(4, 6, |_, j| j as f32)).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                let expected = if j < 5 { 1.0 } else { 0.0 };
                assert_eq!(g.gx.get(i, j, 0), expected);
                assert_eq!(g.gy.get(i, j, 0), 0.0);
                assert_eq!(g.magnitude.get(i, j, 0), expected);
            }
        }
    }

    #[test]
    fn gradient_diagonal_ramp() {
        let g = gradient(&ramp(5, 5, |i, j| (i + j) as f32)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((g.magnitude.get(i, j, 0) - 2f32.sqrt()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gradient_rejects_degenerate() {
        assert!(matches!(gradient(&Image::zeros(1, 5, 1)), Err(Error::Dimension(_))));
        assert!(matches!(gradient(&Image::zeros(5, 1, 3)), Err(Error::Dimension(_))));
    }

    #[test]
    fn concat_builds_six_and_nine_channels() {
        let rgb = Image::from_fn(4, 4, 3, |i, j, c| (i + j + c) as f32 * 0.1);
        let g = gradient(&rgb).unwrap().magnitude;
        let six = concat_channels(&[&rgb, &g]).unwrap();
        assert_eq!(six.channels(), 6);
        assert_eq!(six.get(2, 1, 4), g.get(2, 1, 1));
        assert_eq!(six.get(2, 1, 2), rgb.get(2, 1, 2));
        let nine = concat_channels(&[&rgb, &g, &g]).unwrap();
        assert_eq!(nine.channels(), 9);
        assert_eq!(concat_channels(&[&rgb]).unwrap(), rgb);
        assert!(concat_channels(&[&rgb, &Image::zeros(4, 3, 1)]).is_err());
    }

    #[test]
    fn display_encoding() {
        let img = Image::new(1, 3, 1, vec![0.25, 4.0, 0.5]).unwrap();
        let same = to_display(&img.map(|v| v.min(1.0)), 1.0).unwrap();
        assert_eq!(same.data(), &[0.25, 1.0, 0.5]);
        let g22 = to_display(&img, 2.2).unwrap();
        assert_eq!(g22.get(0, 1, 0), 1.0);
        let g2 = to_display(&img, 2.0).unwrap();
        assert!((g2.get(0, 0, 0) - 0.5).abs() < 1e-7);
        assert!(to_display(&img, 0.0).is_err());
    }

    fn image_strategy(
        h: usize,
        w: usize,
        c: usize,
        lo: f32,
        hi: f32,
    ) -> impl Strategy<Value = Image> {
        proptest::collection::vec(lo..hi, h * w * c)
            .prop_map(move |d| Image::new(h, w, c, d).unwrap())
    }

    proptest! {
        #[test]
        fn shading_round_trip(
            r in image_strategy(5, 6, 3, 1e-4, 1.0),
            s in image_strategy(5, 6, 3, 0.0, 10.0),
        ) {
            let i = compose_diffuse(&r, &s).unwrap();
            let back = derive_shading(&i, &r, 1e-4).unwrap();
            for (a, b) in back.data().iter().zip(s.data()) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-6));
            }
        }

        #[test]
        fn zero_specular_matches_lit_composition(
            r in image_strategy(4, 4, 3, 0.0, 1.0),
            s in image_strategy(4, 4, 1, 0.0, 2.0),
            e in proptest::array::uniform3(0.01f32..2.0),
        ) {
            let light = Illuminant::Global(e);
            let h = Image::zeros(4, 4, 3);
            prop_assert_eq!(
                compose_specular(&r, &s, &h, Some(&light)).unwrap(),
                compose_with_light(&r, &s, &light).unwrap()
            );
        }

        #[test]
        fn gradient_is_linear(
            a in -3.0f32..3.0,
            b in -3.0f32..3.0,
            x in image_strategy(4, 5, 2, -1.0, 1.0),
            y in image_strategy(4, 5, 2, -1.0, 1.0),
        ) {
            let combo = Image::new(4, 5, 2,
                x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
            let (gc, gx, gy) = (gradient(&combo).unwrap(), gradient(&x).unwrap(), gradient(&y).unwrap());
            for k in 0..combo.len() {
                let ex = a * gx.gx.data()[k] + b * gy.gx.data()[k];
                let ey = a * gx.gy.data()[k] + b * gy.gy.data()[k];
                prop_assert!((gc.gx.data()[k] - ex).abs() < 1e-4);
                prop_assert!((gc.gy.data()[k] - ey).abs() < 1e-4);
            }
        }

        #[test]
        fn magnitude_bounds_components(x in image_strategy(5, 5, 3, -2.0, 2.0)) {
            let g = gradient(&x).unwrap();
            for k in 0..x.len() {
                let m = g.magnitude.data()[k];
                prop_assert!(m >= g.gx.data()[k].abs() && m >= g.gy.data()[k].abs());
            }
        }

        #[test]
        fn gradient_scales_with_constant_shading(
            r in image_strategy(4, 4, 3, 0.0, 1.0),
            s in 0.0f32..4.0,
        ) {
            let shaded = compose_diffuse(&r, &Image::filled(4, 4, 1, s)).unwrap();
            let (gi, gr) = (gradient(&shaded).unwrap(), gradient(&r).unwrap());
            for k in 0..r.len() {
                prop_assert!((gi.gx.data()[k] - s * gr.gx.data()[k]).abs() < 1e-5);
                prop_assert!((gi.gy.data()[k] - s * gr.gy.data()[k]).abs() < 1e-5);
            }
        }
    }
}
