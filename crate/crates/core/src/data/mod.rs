//! Annotation schema, format converters, dataset split and clip IO.

mod clip;
mod coco;
mod split;
mod synth;
mod vat;
mod vgs;
mod voc;

pub use clip::{
    load_clip, read_frame, read_identity, save_clip, tracks_from_records, write_identity, ClipData, IdentityRow,
};
pub use coco::{
    coco_to_vgs, head_box_of, vgs_to_coco, CocoAnnotation, CocoCategory, CocoDocument, CocoImage, CocoInfo,
    GAZE_CATEGORY, HEAD_CATEGORY,
};
pub use split::{split_frames, test_size, DatasetSplit};
pub use synth::{synth_scene, Envelope, SynthClip, SynthConfig, SynthPerson};
pub use vat::{vat_to_vgs, vgs_to_vat, VatImport, VAT_HEADER};
pub use vgs::{read_vgs, write_vgs, FrameKey, Role, VgsDataset, VgsRecord, VideoHeader};
pub use voc::{vgs_to_voc, voc_to_vgs, VocDocument};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate key {key}")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: box out of bounds: {message}")]
    OutOfBounds { line: usize, message: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Image { path: String, message: String },
    #[error(transparent)]
    Audio(#[from] crate::audio::DspError),
}

impl DataError {
    pub fn parse(line: usize, message: impl Into<String>) -> Self {
        Self::Parse { line, message: message.into() }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }
}
