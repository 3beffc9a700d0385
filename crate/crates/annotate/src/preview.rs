//! Noise-ladder previews shown to the annotator.

use aqpl_core::dataset::ImageShape;
use aqpl_core::numerics::{stream, Rng};
use aqpl_core::perturb::{perturb, NoiseFamily, NoiseSpec};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreviewError {
    #[error("image shape {rows}x{cols} needs {expected} values, example has {got}")]
    Shape {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    #[error("png encoding failed: {0}")]
    Encode(String),
}

/// One rung of a ladder as the annotator sees it.
#[derive(Debug, Clone, PartialEq)]
pub enum Preview {
    /// Grayscale PNG of the noisy image.
    Png(Vec<u8>),
    /// Noisy feature vector for data that has no visual form.
    Numeric(Vec<f64>),
}

impl Preview {
    pub fn png(&self) -> Option<&[u8]> {
        match self {
            Preview::Png(bytes) => Some(bytes),
            Preview::Numeric(_) => None,
        }
    }

    pub fn values(&self) -> Option<&[f64]> {
        match self {
            Preview::Png(_) => None,
            Preview::Numeric(v) => Some(v),
        }
    }
}

/// Maps [0, 1] intensities to bytes; values outside are clamped.
pub fn to_gray_bytes(x: &[f64]) -> Vec<u8> {
    x.iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn encode_gray_png(pixels: &[u8], shape: ImageShape) -> Result<Vec<u8>, PreviewError> {
    if pixels.len() != shape.pixels() {
        return Err(PreviewError::Shape {
            rows: shape.rows,
            cols: shape.cols,
            expected: shape.pixels(),
            got: pixels.len(),
        });
    }
    let encode_err = |e: png::EncodingError| PreviewError::Encode(e.to_string());
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, shape.cols as u32, shape.rows as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(encode_err)?;
        writer.write_image_data(pixels).map_err(encode_err)?;
        writer.finish().map_err(encode_err)?;
    }
    Ok(out)
}

/// Renders one preview per ladder rung with a single fixed noise draw per
/// rung (stream `(seed, PREVIEW, rung)`), so refetching gives identical
/// bytes. Images are clipped to [0, 1]; a zero level reproduces `x`.
pub fn render_ladder_previews(
    x: &[f64],
    ladder: &[f64],
    seed: u64,
    family: NoiseFamily,
    shape: Option<ImageShape>,
) -> Result<Vec<Preview>, PreviewError> {
    if let Some(shape) = shape {
        if shape.pixels() != x.len() {
            return Err(PreviewError::Shape {
                rows: shape.rows,
                cols: shape.cols,
                expected: shape.pixels(),
                got: x.len(),
            });
        }
    }
    ladder
        .iter()
        .enumerate()
        .map(|(rung, &sigma)| {
            let mut rng = Rng::substream(seed, &[stream::PREVIEW, rung as u64]);
            let noisy = perturb(x, NoiseSpec { family, sigma }, &mut rng, shape.is_some());
            match shape {
                Some(shape) => encode_gray_png(&to_gray_bytes(&noisy), shape).map(Preview::Png),
                None => Ok(Preview::Numeric(noisy)),
            }
        })
        .collect()
}
