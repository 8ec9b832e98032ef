//! Inference jobs and their raster payloads.

use std::io::Cursor;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediaType {
    Png,
    Jpeg,
    Tiff,
}

impl MediaType {
    pub fn mime(self) -> &'static str {
        match self {
            Self::Png => "image/png",
            Self::Jpeg => "image/jpeg",
            Self::Tiff => "image/tiff",
        }
    }

    /// Accepts `png`, `jpeg`/`jpg`, `tiff`/`tif`, with or without `image/`.
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().trim_start_matches("image/") {
            "png" => Some(Self::Png),
            "jpeg" | "jpg" => Some(Self::Jpeg),
            "tiff" | "tif" => Some(Self::Tiff),
            _ => None,
        }
    }

    fn format(self) -> image::ImageFormat {
        match self {
            Self::Png => image::ImageFormat::Png,
            Self::Jpeg => image::ImageFormat::Jpeg,
            Self::Tiff => image::ImageFormat::Tiff,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum JobError {
    #[error("prompt must be non-empty")]
    EmptyPrompt,
    #[error("unsupported image type {0:?}; expected png, jpeg or tiff")]
    UnsupportedMediaType(String),
    #[error("image could not be decoded: {0}")]
    UndecodableImage(String),
    #[error("image dimensions {height}x{width}x{channels} are out of range")]
    BadDimensions { height: u32, width: u32, channels: u8 },
}

/// Raster input I with its shape H×W×C.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePayload {
    #[serde(skip)]
    pub bytes: Vec<u8>,
    pub media_type: MediaType,
    pub height: u32,
    pub width: u32,
    pub channels: u8,
}

impl std::fmt::Debug for ImagePayload {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImagePayload")
            .field("bytes", &self.bytes.len())
            .field("media_type", &self.media_type)
            .field("shape", &(self.height, self.width, self.channels))
            .finish()
    }
}

impl ImagePayload {
    /// Sniffs and decodes `bytes` to learn the shape. A declared media type,
    /// if given, must be supported and agree with the content.
    pub fn from_bytes(bytes: Vec<u8>, declared: Option<&str>) -> Result<Self, JobError> {
        let declared = match declared.filter(|d| !d.trim().is_empty() && *d != "application/octet-stream") {
            Some(d) => Some(MediaType::parse(d).ok_or_else(|| JobError::UnsupportedMediaType(d.to_owned()))?),
            None => None,
        };
        let sniffed = match image::guess_format(&bytes) {
            Ok(image::ImageFormat::Png) => MediaType::Png,
            Ok(image::ImageFormat::Jpeg) => MediaType::Jpeg,
            Ok(image::ImageFormat::Tiff) => MediaType::Tiff,
            Ok(other) => return Err(JobError::UnsupportedMediaType(format!("{other:?}").to_lowercase())),
            Err(e) => return Err(JobError::UndecodableImage(e.to_string())),
        };
        if let Some(d) = declared.filter(|d| *d != sniffed) {
            return Err(JobError::UnsupportedMediaType(format!(
                "declared {} but content is {}",
                d.mime(),
                sniffed.mime()
            )));
        }
        let img = image::load(Cursor::new(&bytes), sniffed.format())
            .map_err(|e| JobError::UndecodableImage(e.to_string()))?;
        let payload = Self {
            media_type: sniffed,
            height: img.height(),
            width: img.width(),
            channels: img.color().channel_count(),
            bytes,
        };
        payload.validate()?;
        Ok(payload)
    }

    pub fn validate(&self) -> Result<(), JobError> {
        if self.height == 0 || self.width == 0 || !matches!(self.channels, 1 | 3 | 4) {
            return Err(JobError::BadDimensions {
                height: self.height,
                width: self.width,
                channels: self.channels,
            });
        }
        Ok(())
    }
}

/// One (I, q) request. `version: None` targets the active version;
/// `deadline_ms` is a budget relative to submission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceJob {
    pub job_id: String,
    pub model_id: String,
    pub version: Option<String>,
    pub prompt: String,
    pub image: ImagePayload,
    pub submitted_at: i64,
    pub deadline_ms: Option<u64>,
}

impl InferenceJob {
    pub fn validate(&self) -> Result<(), JobError> {
        if self.prompt.trim().is_empty() {
            return Err(JobError::EmptyPrompt);
        }
        self.image.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub job_id: String,
    pub output_text: String,
    pub model_id: String,
    pub version: String,
    pub replica_id: String,
    pub latency_ms: u64,
    pub batch_id: String,
    pub audit_id: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::{png_1x1, raster};

    #[test]
    fn shapes_of_supported_formats() {
        let p = ImagePayload::from_bytes(png_1x1(), Some("image/png")).unwrap();
        assert_eq!((p.height, p.width, p.channels, p.media_type), (1, 1, 3, MediaType::Png));
        let j = ImagePayload::from_bytes(raster(3, 2, image::ImageFormat::Jpeg), None).unwrap();
        assert_eq!((j.height, j.width, j.media_type), (2, 3, MediaType::Jpeg));
        let t = ImagePayload::from_bytes(raster(2, 2, image::ImageFormat::Tiff), Some("tif")).unwrap();
        assert_eq!(t.media_type, MediaType::Tiff);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            ImagePayload::from_bytes(b"GIF89a....".to_vec(), None),
            Err(JobError::UnsupportedMediaType(_))
        ));
        assert!(matches!(
            ImagePayload::from_bytes(png_1x1(), Some("image/gif")),
            Err(JobError::UnsupportedMediaType(_))
        ));
        assert!(matches!(
            ImagePayload::from_bytes(png_1x1(), Some("jpeg")),
            Err(JobError::UnsupportedMediaType(_))
        ));
        assert!(matches!(
            ImagePayload::from_bytes(b"not an image".to_vec(), None),
            Err(JobError::UndecodableImage(_))
        ));
        let mut two_channel = ImagePayload::from_bytes(png_1x1(), None).unwrap();
        two_channel.channels = 2;
        assert!(two_channel.validate().is_err());
    }

    #[test]
    fn empty_prompt() {
        let job = InferenceJob {
            job_id: "j".into(),
            model_id: "m".into(),
            version: None,
            prompt: "  ".into(),
            image: ImagePayload::from_bytes(png_1x1(), None).unwrap(),
            submitted_at: 0,
            deadline_ms: None,
        };
        assert_eq!(job.validate(), Err(JobError::EmptyPrompt));
    }
}
