//! Corner detection, binary description and descriptor matching.
//!
//! Corners come from the FAST-12 segment test; descriptors are 256 intensity
//! comparisons over a smoothed 31x31 patch; matching is brute-force Hamming
//! with a ratio test and mutual cross-check. Views handed to this module are
//! expected to be at roughly equal scale, so nothing here is scale or
//! rotation invariant.

mod brief;
mod fast;
mod matching;

pub use brief::{describe, describe_with, BriefPattern, Descriptor, DEFAULT_PATTERN_SEED};
pub use fast::{detect_keypoints, segment_test, Keypoint, BORDER};
pub use matching::{match_descriptors, Match};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("image {width}x{height} is smaller than the 32x32 minimum")]
    ImageTooSmall { width: usize, height: usize },
    #[error("feature detection needs a grayscale raster")]
    NotGrayscale,
    #[error("threshold must be positive")]
    InvalidThreshold,
    #[error("keypoint ({x}, {y}) is closer than {BORDER} px to the border")]
    KeypointTooCloseToBorder { x: f64, y: f64 },
    #[error("ratio {0} outside (0, 1]")]
    InvalidRatio(f64),
}

#[derive(Serialize)]
struct DumpKeypoint {
    x: f64,
    y: f64,
    score: f64,
}

#[derive(Serialize)]
struct DumpMatch {
    src: [f64; 2],
    dst: [f64; 2],
    distance: u32,
}

/// JSON overlay dump of keypoints and matches for consoles and debugging.
pub fn debug_dump(src: &[Keypoint], dst: &[Keypoint], matches: &[Match]) -> serde_json::Value {
    let kp = |k: &[Keypoint]| -> Vec<DumpKeypoint> {
        k.iter()
            .map(|k| DumpKeypoint {
                x: k.position.x,
                y: k.position.y,
                score: k.score,
            })
            .collect()
    };
    let m: Vec<DumpMatch> = matches
        .iter()
        .map(|m| DumpMatch {
            src: [src[m.src_index].position.x, src[m.src_index].position.y],
            dst: [dst[m.dst_index].position.x, dst[m.dst_index].position.y],
            distance: m.distance,
        })
        .collect();
    serde_json::json!({ "src_keypoints": kp(src), "dst_keypoints": kp(dst), "matches": m })
}
