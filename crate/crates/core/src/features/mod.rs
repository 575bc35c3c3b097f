//! Audio front-end, keypoint/audio clip types, and the corpus file format.

mod clip;
pub mod corpus;
pub mod mfcc;

pub use clip::{
    align, audio_segment, AudioFeatSequence, AvClip, KeypointSequence, POSITION_LIMIT, SEGMENT_AUDIO_FRAMES,
    SEGMENT_FRAMES,
};
pub use corpus::{load_clips, load_corpus, write_corpus, LoadReport};
pub use mfcc::{mfcc, Waveform};
