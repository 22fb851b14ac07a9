//! Image files: PFM for linear HDR data, PNG for 8-bit previews and external
//! benchmark inputs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::image::{to_display, Image};
use crate::{Error, Result};

/// Encodes an image as PFM with a little-endian (negative) scale field.
///
/// Rows are written bottom to top, as the format requires.
pub fn encode_pfm(image: &Image) -> Result<Vec<u8>> {
    let tag = match image.channels() {
        1 => "Pf",
        3 => "PF",
        c => {
            return Err(Error::Dimension(format!(
                "PFM stores 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", image.width(), image.height()).into_bytes();
    let row_len = image.width() * image.channels();
    out.reserve(image.len() * 4);
    for row in image.data().chunks_exact(row_len).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_pfm(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pfm(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn header_line(reader: &mut impl BufRead, path: &Path) -> Result<String> {
    let mut line = String::new();
    reader
        .read_line(&mut line)
        .map_err(|e| Error::io(path, e))?;
    if line.is_empty() {
        return Err(Error::format(path, "truncated PFM header"));
    }
    Ok(line.trim().to_string())
}

pub fn decode_pfm(reader: impl Read, path: &Path) -> Result<Image> {
    let mut reader = BufReader::new(reader);
    let channels = match header_line(&mut reader, path)?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::format(path, format!("bad PFM magic {other:?}"))),
    };
    let dims = header_line(&mut reader, path)?;
    let mut parts = dims.split_whitespace().map(str::parse::<usize>);
    let (width, height) = match (parts.next(), parts.next(), parts.next()) {
        (Some(Ok(w)), Some(Ok(h)), None) if w > 0 && h > 0 => (w, h),
        _ => return Err(Error::format(path, format!("bad PFM dimensions {dims:?}"))),
    };
    let scale_line = header_line(&mut reader, path)?;
    let scale: f32 = scale_line
        .parse()
        .map_err(|_| Error::format(path, format!("bad PFM scale {scale_line:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(path, "PFM scale must be non-zero"));
    }
    let little_endian = scale < 0.0;

    let count = width * height * channels;
    let mut raw = vec![0u8; count * 4];
    reader
        .read_exact(&mut raw)
        .map_err(|_| Error::format(path, format!("expected {} bytes of pixel data", count * 4)))?;
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            if little_endian {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect();
    let row_len = width * channels;
    let mut data = Vec::with_capacity(count);
    for row in values.chunks_exact(row_len).rev() {
        data.extend_from_slice(row);
    }
    if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::format(
            path,
            format!("PFM contains invalid pixel value {bad}"),
        ));
    }
    Image::new(height, width, channels, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(file, path)
}

/// Writes a gamma-encoded 8-bit preview. Values are clamped to `[0, 1]`
/// first; 1-channel images are written as grayscale.
pub fn write_png_preview(path: impl AsRef<Path>, image: &Image, gamma: f32) -> Result<()> {
    let path = path.as_ref();
    let encoded = to_display(image, gamma)?;
    let bytes: Vec<u8> = encoded
        .data()
        .iter()
        .map(|v| (v * 255.0).round() as u8)
        .collect();
    let (w, h) = (image.width() as u32, image.height() as u32);
    let color = match image.channels() {
        1 => ::image::ExtendedColorType::L8,
        3 => ::image::ExtendedColorType::Rgb8,
        c => {
            return Err(Error::Dimension(format!(
                "PNG previews take 1 or 3 channels, got {c}"
            )))
        }
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    ::image::write_buffer_with_format(
        &mut writer,
        &bytes,
        w,
        h,
        color,
        ::image::ImageFormat::Png,
    )
    .map_err(|e| Error::format(path, e.to_string()))?;
    writer.flush().map_err(|e| Error::io(path, e))
}

/// An 8-bit PNG decoded to linear floats.
#[derive(Debug, Clone)]
pub struct DecodedPng {
    pub color: Image,
    /// Alpha mapped to `{0, 1}`; zero-alpha pixels are excluded from metrics.
    pub mask: Option<Image>,
}

/// Reads an 8-bit PNG, mapping values to `[0, 1]`. With `inverse_gamma`,
/// values are additionally raised to `gamma` to undo display encoding.
pub fn read_png(path: impl AsRef<Path>, inverse_gamma: Option<f32>) -> Result<DecodedPng> {
    let path = path.as_ref();
    let dynamic = ::image::open(path).map_err(|e| match e {
        ::image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let has_alpha = dynamic.color().has_alpha();
    let gray = matches!(
        dynamic.color(),
        ::image::ColorType::L8 | ::image::ColorType::La8 | ::image::ColorType::L16
    );
    let rgba = dynamic.to_rgba8();
    let (w, h) = (rgba.width() as usize, rgba.height() as usize);
    let channels = if gray { 1 } else { 3 };
    let decode = |v: u8| {
        let lin = v as f32 / 255.0;
        match inverse_gamma {
            Some(g) => lin.powf(g),
            None => lin,
        }
    };
    let mut color = Vec::with_capacity(w * h * channels);
    let mut alpha = Vec::with_capacity(w * h);
    for px in rgba.pixels() {
        color.extend(px.0[..channels].iter().map(|&v| decode(v)));
        alpha.push(if px.0[3] == 0 { 0.0 } else { 1.0 });
    }
    Ok(DecodedPng {
        color: Image::new(h, w, channels, color)?,
        mask: if has_alpha {
            Some(Image::new(h, w, 1, alpha)?)
        } else {
            None
        },
    })
}

/// Reads a PFM or PNG image, chosen by extension. PNG data is linearized
/// with `png_gamma` when given.
pub fn read_image(path: impl AsRef<Path>, png_gamma: Option<f32>) -> Result<Image> {
    let path = path.as_ref();
    match extension(path).as_deref() {
        Some("pfm") => read_pfm(path),
        Some("png") => Ok(read_png(path, png_gamma)?.color),
        _ => Err(Error::format(path, "unsupported image extension (expected .pfm or .png)")),
    }
}

pub(crate) fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}
