//! Active speaker identification from lip motion and audio.
//!
//! Every tracked face contributes 200 ms lip windows (five frames). Each is
//! paired with the twenty MFCC frames of the same span, both are embedded on
//! the unit sphere, and a person's score for a frame is the median
//! embedding distance over the windows covering it. The closest person is
//! the speaker if the score falls under a threshold, otherwise nobody is.

mod sync;
mod window;

pub use sync::{
    build_sync_corpus, classify_speakers, identity_rows, sync_distance, train_sync, FeatureNorm, FrameLabels,
    IdentityLabel, SyncClip, SyncCorpus, SyncModel, SyncPair, SyncTrainConfig, SyncTraining, EMBED_DIM,
};
pub use window::{
    audio_window, crop_mouth, make_windows, mouth_box, track_patches, window_starts, AudioWindow, LipWindow,
};

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::nn::NnError;

pub const MOUTH_H: usize = 48;
pub const MOUTH_W: usize = 96;
pub const LIP_FRAMES: usize = 5;
pub const AUDIO_FRAMES: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum SpeakerError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dsp(#[from] crate::audio::DspError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub frame: u32,
    pub face: BBox,
}

/// Face boxes of one person, one entry per visible frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceTrack {
    pub person_id: u32,
    pub entries: Vec<TrackEntry>,
}

impl FaceTrack {
    pub fn validate(&self) -> Result<(), SpeakerError> {
        for w in self.entries.windows(2) {
            if w[1].frame <= w[0].frame {
                return Err(SpeakerError::InvalidArgument(format!(
                    "track {}: frame {} follows frame {}",
                    self.person_id, w[1].frame, w[0].frame
                )));
            }
        }
        Ok(())
    }

    pub fn face_at(&self, frame: u32) -> Option<BBox> {
        self.entries.binary_search_by_key(&frame, |e| e.frame).ok().map(|i| self.entries[i].face)
    }
}
