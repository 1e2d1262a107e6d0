use std::io::Cursor;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default upload cap: 10 MiB.
pub const DEFAULT_IMAGE_SIZE_CAP: usize = 10 * 1024 * 1024;

const PNG_MAGIC: &[u8] = &[0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];
const JPEG_MAGIC: &[u8] = &[0xFF, 0xD8, 0xFF];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ImageFormat {
    Png,
    Jpeg,
}

impl ImageFormat {
    /// Detects the format from the payload's magic bytes.
    pub fn sniff(bytes: &[u8]) -> Option<Self> {
        if bytes.starts_with(PNG_MAGIC) {
            Some(ImageFormat::Png)
        } else if bytes.starts_with(JPEG_MAGIC) {
            Some(ImageFormat::Jpeg)
        } else {
            None
        }
    }

    pub fn mime(self) -> &'static str {
        match self {
            ImageFormat::Png => "image/png",
            ImageFormat::Jpeg => "image/jpeg",
        }
    }

    pub fn from_mime(mime: &str) -> Option<Self> {
        match mime.trim().to_ascii_lowercase().as_str() {
            "image/png" => Some(ImageFormat::Png),
            "image/jpeg" | "image/jpg" => Some(ImageFormat::Jpeg),
            _ => None,
        }
    }

    pub fn from_extension(ext: &str) -> Option<Self> {
        match ext.to_ascii_lowercase().as_str() {
            "png" => Some(ImageFormat::Png),
            "jpg" | "jpeg" => Some(ImageFormat::Jpeg),
            _ => None,
        }
    }

    fn codec(self) -> image::ImageFormat {
        match self {
            ImageFormat::Png => image::ImageFormat::Png,
            ImageFormat::Jpeg => image::ImageFormat::Jpeg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImageError {
    #[error("image payload is empty")]
    Empty,
    #[error("image payload is {size} bytes, over the {cap}-byte cap")]
    TooLarge { size: usize, cap: usize },
    #[error("payload is neither PNG nor JPEG")]
    UnknownFormat,
    #[error("declared format {declared:?} does not match payload magic ({actual:?})")]
    FormatMismatch {
        declared: ImageFormat,
        actual: ImageFormat,
    },
    #[error("cannot decode image header: {0}")]
    Undecodable(String),
    #[error("image has zero width or height")]
    ZeroDimensions,
    #[error("sha256 mismatch: recorded {recorded}, computed {computed}")]
    HashMismatch { recorded: String, computed: String },
}

/// A raster chart image plus the metadata needed to address it by content.
///
/// The payload is not part of the serialized form; the store keeps it as a
/// content-addressed blob and re-attaches it on load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChartImage {
    pub id: String,
    #[serde(skip)]
    pub bytes: Vec<u8>,
    pub format: ImageFormat,
    pub width_px: u32,
    pub height_px: u32,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ChartImage {
    /// Validates a payload and builds the image record.
    ///
    /// When `declared` is `None` the format is taken from the magic bytes.
    pub fn from_bytes(
        id: impl Into<String>,
        bytes: Vec<u8>,
        declared: Option<ImageFormat>,
        size_cap: usize,
    ) -> Result<Self, ImageError> {
        if bytes.is_empty() {
            return Err(ImageError::Empty);
        }
        if bytes.len() > size_cap {
            return Err(ImageError::TooLarge {
                size: bytes.len(),
                cap: size_cap,
            });
        }
        let actual = ImageFormat::sniff(&bytes).ok_or(ImageError::UnknownFormat)?;
        if let Some(declared) = declared {
            if declared != actual {
                return Err(ImageError::FormatMismatch { declared, actual });
            }
        }
        let (width_px, height_px) = image::ImageReader::with_format(Cursor::new(&bytes), actual.codec())
            .into_dimensions()
            .map_err(|e| ImageError::Undecodable(e.to_string()))?;
        if width_px == 0 || height_px == 0 {
            return Err(ImageError::ZeroDimensions);
        }
        let sha256 = sha256_hex(&bytes);
        Ok(ChartImage {
            id: id.into(),
            bytes,
            format: actual,
            width_px,
            height_px,
            sha256,
        })
    }

    /// Re-checks magic bytes and content hash of an attached payload.
    pub fn verify(&self) -> Result<(), ImageError> {
        if self.bytes.is_empty() {
            return Err(ImageError::Empty);
        }
        match ImageFormat::sniff(&self.bytes) {
            None => return Err(ImageError::UnknownFormat),
            Some(actual) if actual != self.format => {
                return Err(ImageError::FormatMismatch {
                    declared: self.format,
                    actual,
                })
            }
            Some(_) => {}
        }
        if self.width_px == 0 || self.height_px == 0 {
            return Err(ImageError::ZeroDimensions);
        }
        let computed = sha256_hex(&self.bytes);
        if computed != self.sha256 {
            return Err(ImageError::HashMismatch {
                recorded: self.sha256.clone(),
                computed,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn png_bytes(width: u32, height: u32) -> Vec<u8> {
        let img = image::RgbImage::from_fn(width, height, |x, y| {
            image::Rgb([(x % 256) as u8, (y % 256) as u8, 128])
        });
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).unwrap();
        out.into_inner()
    }

    fn jpeg_bytes(width: u32, height: u32) -> Vec<u8> {
        let img = image::RgbImage::from_pixel(width, height, image::Rgb([10, 20, 30]));
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Jpeg).unwrap();
        out.into_inner()
    }

    #[test]
    fn valid_png_reads_dimensions_and_hash() {
        let bytes = png_bytes(640, 480);
        let img = ChartImage::from_bytes("a", bytes.clone(), Some(ImageFormat::Png), DEFAULT_IMAGE_SIZE_CAP).unwrap();
        assert_eq!((img.width_px, img.height_px), (640, 480));
        assert_eq!(img.sha256, sha256_hex(&bytes));
        assert_eq!(img.format, ImageFormat::Png);
        img.verify().unwrap();
    }

    #[test]
    fn jpeg_declared_as_png_is_rejected() {
        let err = ChartImage::from_bytes("a", jpeg_bytes(8, 8), Some(ImageFormat::Png), DEFAULT_IMAGE_SIZE_CAP)
            .unwrap_err();
        assert_eq!(
            err,
            ImageError::FormatMismatch {
                declared: ImageFormat::Png,
                actual: ImageFormat::Jpeg
            }
        );
    }

    #[test]
    fn empty_and_oversized_payloads_are_rejected() {
        assert_eq!(
            ChartImage::from_bytes("a", vec![], None, DEFAULT_IMAGE_SIZE_CAP).unwrap_err(),
            ImageError::Empty
        );
        let bytes = png_bytes(4, 4);
        let len = bytes.len();
        assert_eq!(
            ChartImage::from_bytes("a", bytes, None, 10).unwrap_err(),
            ImageError::TooLarge { size: len, cap: 10 }
        );
        assert_eq!(
            ChartImage::from_bytes("a", b"GIF89a....".to_vec(), None, 100).unwrap_err(),
            ImageError::UnknownFormat
        );
    }

    #[test]
    fn truncated_png_is_undecodable() {
        let bytes = png_bytes(4, 4)[..12].to_vec();
        assert!(matches!(
            ChartImage::from_bytes("a", bytes, None, 100).unwrap_err(),
            ImageError::Undecodable(_)
        ));
    }

    #[test]
    fn verify_detects_tampering() {
        let mut img = ChartImage::from_bytes("a", png_bytes(4, 4), None, 1 << 20).unwrap();
        let last = img.bytes.len() - 1;
        img.bytes[last] ^= 0xFF;
        assert!(matches!(img.verify(), Err(ImageError::HashMismatch { .. })));
    }
}
