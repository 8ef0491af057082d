//! IDX image/label files and bilinear sampling of images onto meshes.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:#x}, expected {expected:#x}")]
    Magic { found: u32, expected: u32 },
    #[error("truncated file: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("pixel buffer has {got} values, expected {expected}")]
    PixelCount { got: usize, expected: usize },
}

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

/// Grayscale images in `[0, 1]`, row-major, with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
    labels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            need: at + 4,
            have: bytes.len(),
        })
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses an IDX3 image file: returns `(count, rows, cols, bytes)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8]), IdxError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(IdxError::Magic {
            found: magic,
            expected: IMAGE_MAGIC,
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        return Err(IdxError::Truncated { need, have: bytes.len() });
    }
    Ok((count, rows, cols, &bytes[16..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8], IdxError> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(IdxError::Magic {
            found: magic,
            expected: LABEL_MAGIC,
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(IdxError::Truncated { need, have: bytes.len() });
    }
    Ok(&bytes[8..need])
}

impl LabeledImages {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>, labels: Vec<u8>) -> Result<Self, IdxError> {
        let expected = width * height * labels.len();
        if pixels.len() != expected {
            return Err(IdxError::PixelCount {
                got: pixels.len(),
                expected,
            });
        }
        Ok(LabeledImages {
            width,
            height,
            pixels,
            labels,
        })
    }

    pub fn from_idx_bytes(images: &[u8], labels: &[u8]) -> Result<Self, IdxError> {
        let (count, rows, cols, raw) = parse_idx_images(images)?;
        let labels = parse_idx_labels(labels)?;
        if labels.len() != count {
            return Err(IdxError::CountMismatch {
                images: count,
                labels: labels.len(),
            });
        }
        let pixels = raw.iter().map(|&p| f32::from(p) / 255.0).collect();
        LabeledImages::new(cols, rows, pixels, labels.to_vec())
    }

    pub fn load_idx(images: &Path, labels: &Path) -> Result<Self, IdxError> {
        LabeledImages::from_idx_bytes(&read(images)?, &read(labels)?)
    }

    /// The conventional file pair in `dir` for `split` = `train` or `t10k`.
    pub fn load_split(dir: &Path, split: &str) -> Result<Self, IdxError> {
        LabeledImages::load_idx(
            &dir.join(format!("{split}-images-idx3-ubyte")),
            &dir.join(format!("{split}-labels-idx1-ubyte")),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn label(&self, k: usize) -> u8 {
        self.labels[k]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, k: usize) -> &[f32] {
        let size = self.width * self.height;
        &self.pixels[k * size..(k + 1) * size]
    }

    /// The first `n` samples.
    pub fn truncated(&self, n: usize) -> LabeledImages {
        let n = n.min(self.len());
        LabeledImages {
            width: self.width,
            height: self.height,
            pixels: self.pixels[..n * self.width * self.height].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Bilinear value of image `k` at parameter point `(u, v)` in the unit
    /// square; `u` runs along columns, `v` along rows, and `(0, 0)` and
    /// `(1, 1)` are the centres of the first and last pixel.
    pub fn sample(&self, k: usize, u: f64, v: f64) -> f64 {
        let img = self.image(k);
        let x = (u.clamp(0.0, 1.0) * (self.width - 1) as f64).min((self.width - 1) as f64);
        let y = (v.clamp(0.0, 1.0) * (self.height - 1) as f64).min((self.height - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let at = |i: usize, j: usize| f64::from(img[j * self.width + i]);
        (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x1, y0)) + fy * ((1.0 - fx) * at(x0, y1) + fx * at(x1, y1))
    }

    pub fn sample_into(&self, k: usize, uv: &[[f64; 2]], out: &mut [f64]) {
        for (o, &[u, v]) in out.iter_mut().zip(uv) {
            *o = self.sample(k, u, v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_pair() -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        for w in [IMAGE_MAGIC, 2, 2, 3] {
            images.extend_from_slice(&w.to_be_bytes());
        }
        images.extend_from_slice(&[0, 255, 0, 51, 102, 153, 1, 2, 3, 4, 5, 6]);
        let mut labels = Vec::new();
        for w in [LABEL_MAGIC, 2] {
            labels.extend_from_slice(&w.to_be_bytes());
        }
        labels.extend_from_slice(&[7, 1]);
        (images, labels)
    }

    #[test]
    fn parses_idx() {
        let (i, l) = idx_pair();
        let set = LabeledImages::from_idx_bytes(&i, &l).unwrap();
        assert_eq!((set.len(), set.width(), set.height()), (2, 3, 2));
        assert_eq!(set.label(0), 7);
        assert!((set.image(0)[1] - 1.0).abs() < 1e-7);
        assert!(matches!(
            LabeledImages::from_idx_bytes(&l, &l),
            Err(IdxError::Magic { found: LABEL_MAGIC, .. })
        ));
        assert!(matches!(
            LabeledImages::from_idx_bytes(&i[..20], &l),
            Err(IdxError::Truncated { .. })
        ));
    }

    #[test]
    fn bilinear_sampling_hits_pixel_centres() {
        let (i, l) = idx_pair();
        let set = LabeledImages::from_idx_bytes(&i, &l).unwrap();
        assert!((set.sample(0, 0.5, 0.0) - 1.0).abs() < 1e-7);
        assert!((set.sample(0, 1.0, 1.0) - 0.6).abs() < 1e-7);
        // Midway between (0,0)=0 and (1,0)=1.
        assert!((set.sample(0, 0.25, 0.0) - 0.5).abs() < 1e-7);
    }
}
