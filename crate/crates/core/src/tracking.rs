//! Frame-to-frame tracking of a slide patch and stage guidance.
//!
//! Motion between live frames is a pure translation. Alignment matches
//! binary features and takes a one-point consensus over displacements.
//! Sign convention: moving the stage by `+d` mm moves image content by
//! `-d * px_per_mm` pixels, so the stage must move opposite to the desired
//! image motion.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    describe_with, detect_keypoints, match_descriptors, BriefPattern, Descriptor, FeatureError, Keypoint,
    DEFAULT_PATTERN_SEED,
};
use crate::geom::Point2;
use crate::imagecore::{to_grayscale, Raster};
use crate::scopemodel::{CalibrationMap, StageCoord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackError {
    #[error("frames differ in size: {0:?} vs {1:?}")]
    SizeMismatch([usize; 2], [usize; 2]),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error("track is lost; no guidance available")]
    Lost,
    #[error("invalid guidance target: {0}")]
    InvalidTarget(String),
}

/// Inlier ratio below which a frame does not update the track.
pub const MIN_CONFIDENCE: f64 = 0.3;
/// Consecutive low-confidence frames before the lock is dropped.
pub const LOSS_FRAMES: u32 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignParams {
    pub fast_threshold: u8,
    pub max_keypoints: usize,
    pub ratio: f64,
    /// Translation consensus threshold in pixels.
    pub threshold: f64,
    pub min_matches: usize,
}

impl Default for AlignParams {
    fn default() -> Self {
        Self { fast_threshold: 12, max_keypoints: 800, ratio: 0.8, threshold: 2.0, min_matches: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// Image-content motion from `prev` to `curr`, in pixels.
    pub shift: Point2,
    /// Inlier ratio of the translation consensus; 0 when unmatched.
    pub confidence: f64,
}

/// Keypoints and descriptors of one frame. A live loop keeps the current
/// frame's features as the next frame's `prev`.
#[derive(Clone, Debug)]
pub struct FrameFeatures {
    size: [usize; 2],
    keypoints: Vec<Keypoint>,
    descriptors: Vec<Descriptor>,
}

impl FrameFeatures {
    pub fn size(&self) -> [usize; 2] {
        self.size
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

pub fn frame_features(frame: &Raster, p: &AlignParams) -> Result<FrameFeatures, TrackError> {
    let gray = to_grayscale(frame);
    let keypoints = detect_keypoints(&gray, p.fast_threshold, p.max_keypoints)?;
    let descriptors = describe_with(&gray, &keypoints, &BriefPattern::new(DEFAULT_PATTERN_SEED))?;
    Ok(FrameFeatures { size: [frame.width(), frame.height()], keypoints, descriptors })
}

/// Estimates the translation taking `prev` content to `curr`.
pub fn align_frames(prev: &Raster, curr: &Raster) -> Result<Alignment, TrackError> {
    align_frames_with(prev, curr, &AlignParams::default())
}

pub fn align_frames_with(prev: &Raster, curr: &Raster, p: &AlignParams) -> Result<Alignment, TrackError> {
    let (a, b) = ([prev.width(), prev.height()], [curr.width(), curr.height()]);
    if a != b {
        return Err(TrackError::SizeMismatch(a, b));
    }
    align_features(&frame_features(prev, p)?, &frame_features(curr, p)?, p)
}

pub fn align_features(prev: &FrameFeatures, curr: &FrameFeatures, p: &AlignParams) -> Result<Alignment, TrackError> {
    if prev.size != curr.size {
        return Err(TrackError::SizeMismatch(prev.size, curr.size));
    }
    let lost = Alignment { shift: Point2::new(0.0, 0.0), confidence: 0.0 };
    let (ka, kb) = (&prev.keypoints, &curr.keypoints);
    let matches = match_descriptors(&prev.descriptors, &curr.descriptors, p.ratio)?;
    if matches.len() < p.min_matches {
        return Ok(lost);
    }
    let disp: Vec<Point2> = matches
        .iter()
        .map(|m| kb[m.dst_index].position - ka[m.src_index].position)
        .collect();
    // Every displacement is a one-point hypothesis; keep the best supported.
    let t2 = p.threshold * p.threshold;
    let mut best: Option<(usize, f64, usize)> = None;
    for (i, h) in disp.iter().enumerate() {
        let mut count = 0;
        let mut err = 0.0;
        for d in &disp {
            let e = (*d - *h).x.powi(2) + (*d - *h).y.powi(2);
            if e < t2 {
                count += 1;
                err += e;
            }
        }
        let better = match best {
            None => true,
            Some((c, e, _)) => count > c || (count == c && err < e),
        };
        if better {
            best = Some((count, err, i));
        }
    }
    let (_, _, hi) = best.expect("non-empty");
    let h = disp[hi];
    let inliers: Vec<Point2> = disp
        .iter()
        .copied()
        .filter(|d| (*d - h).x.powi(2) + (*d - h).y.powi(2) < t2)
        .collect();
    let n = inliers.len() as f64;
    let mean = Point2::new(
        inliers.iter().map(|d| d.x).sum::<f64>() / n,
        inliers.iter().map(|d| d.y).sum::<f64>() / n,
    );
    Ok(Alignment { shift: mean, confidence: n / disp.len() as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lock {
    Locked,
    Lost,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    pub patch_center: Point2,
    pub cumulative_shift: Point2,
    pub frames_seen: u64,
    pub lock: Lock,
    /// Consecutive frames below [`MIN_CONFIDENCE`].
    pub low_streak: u32,
    pub last_confidence: f64,
}

impl TrackState {
    pub fn new(patch_center: Point2) -> Self {
        Self {
            patch_center,
            cumulative_shift: Point2::new(0.0, 0.0),
            frames_seen: 0,
            lock: Lock::Locked,
            low_streak: 0,
            last_confidence: 1.0,
        }
    }
}

/// Applies one frame's alignment. Low-confidence frames leave the patch in
/// place; the lock drops after [`LOSS_FRAMES`] of them in a row and returns on
/// the next confident frame.
pub fn update_track(state: &TrackState, shift: Point2, confidence: f64) -> TrackState {
    let mut s = state.clone();
    s.frames_seen += 1;
    s.last_confidence = confidence;
    if confidence >= MIN_CONFIDENCE {
        s.patch_center = s.patch_center + shift;
        s.cumulative_shift = s.cumulative_shift + shift;
        s.low_streak = 0;
        s.lock = Lock::Locked;
    } else {
        s.low_streak += 1;
        if s.low_streak >= LOSS_FRAMES {
            s.lock = Lock::Lost;
        }
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceTarget {
    pub target_center: Point2,
    pub target_radius: f64,
}

impl GuidanceTarget {
    pub fn new(target_center: Point2, target_radius: f64, frame: [usize; 2]) -> Result<Self, TrackError> {
        if !(target_radius > 0.0) {
            return Err(TrackError::InvalidTarget("radius must be positive".into()));
        }
        let c = target_center;
        if !(c.x >= -0.5 && c.y >= -0.5 && c.x <= frame[0] as f64 - 0.5 && c.y <= frame[1] as f64 - 0.5) {
            return Err(TrackError::InvalidTarget("center outside the frame".into()));
        }
        Ok(Self { target_center, target_radius })
    }
}

/// Where, in a frame taken at stage reading `stage`, a patch must sit to be
/// centered after switching to the objective that `next` calibrates to.
///
/// `next` maps readings at the current objective to readings of the same
/// feature at the next one. The objective switch keeps the stage fixed, so
/// the next view centers the feature whose current-objective reading is
/// `next^-1(stage)`.
pub fn calibrated_target(
    next: &CalibrationMap,
    stage: StageCoord,
    frame: [usize; 2],
    px_per_mm: f64,
    radius: f64,
) -> Result<GuidanceTarget, TrackError> {
    let back = next.inverse();
    let unshifted = [
        back.scale * stage.x_mm + back.offset_mm[0],
        back.scale * stage.y_mm + back.offset_mm[1],
    ];
    let c = Point2::new(
        (frame[0] as f64 - 1.0) / 2.0 + (unshifted[0] - stage.x_mm) * px_per_mm,
        (frame[1] as f64 - 1.0) / 2.0 + (unshifted[1] - stage.y_mm) * px_per_mm,
    );
    GuidanceTarget::new(c, radius, frame)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Guidance {
    pub view_vector: Point2,
    pub stage_vector_mm: Point2,
    pub arrived: bool,
    pub lock: Lock,
}

pub fn guidance_vector(state: &TrackState, target: &GuidanceTarget, px_per_mm: f64) -> Result<Guidance, TrackError> {
    if state.lock == Lock::Lost {
        return Err(TrackError::Lost);
    }
    let v = target.target_center - state.patch_center;
    Ok(Guidance {
        view_vector: v,
        stage_vector_mm: Point2::new(-v.x / px_per_mm + 0.0, -v.y / px_per_mm + 0.0),
        arrived: v.norm() <= target.target_radius,
        lock: state.lock,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::Channels;
    use crate::scopemodel::{CalibrationEndpoint, CalibrationKind, Magnification, ProfileSet};
    use crate::virtualscope::{generate_scene, render_view, ViewSpec};

    fn frame(stage: StageCoord) -> Raster {
        let ps = ProfileSet::ideal();
        let scene = generate_scene(21, [0.8, 0.8], 8000.0, 0.1).unwrap();
        let mut spec = ViewSpec::new("hcm", Magnification::X100, stage);
        spec.out_size = [320, 240];
        render_view(&scene, &spec, &ps).unwrap().0
    }

    #[test]
    fn identical_frames() {
        let f = frame(StageCoord::new(0.4, 0.4));
        let a = align_frames(&f, &f).unwrap();
        assert_eq!(a.shift, Point2::new(0.0, 0.0));
        assert_eq!(a.confidence, 1.0);
    }

    #[test]
    fn cached_features_match_direct_alignment() {
        let a = frame(StageCoord::new(0.4, 0.4));
        let b = frame(StageCoord::new(0.407, 0.396));
        let p = AlignParams::default();
        let (fa, fb) = (frame_features(&a, &p).unwrap(), frame_features(&b, &p).unwrap());
        assert!(!fa.is_empty() && fa.size() == [a.width(), a.height()]);
        assert_eq!(align_features(&fa, &fb, &p).unwrap(), align_frames(&a, &b).unwrap());
    }

    #[test]
    fn synthetic_roll() {
        let f = frame(StageCoord::new(0.4, 0.4));
        let (w, h) = (f.width(), f.height());
        let mut data = vec![0u8; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                let sx = (x as isize - 5).rem_euclid(w as isize) as usize;
                let sy = (y as isize + 3).rem_euclid(h as isize) as usize;
                for c in 0..3 {
                    data[(y * w + x) * 3 + c] = f.get(sx, sy, c);
                }
            }
        }
        let g = Raster::new(w, h, Channels::Rgb, data).unwrap();
        let a = align_frames(&f, &g).unwrap();
        assert!((a.shift.x - 5.0).abs() < 0.5 && (a.shift.y + 3.0).abs() < 0.5, "{:?}", a.shift);
    }

    #[test]
    fn stage_motion_moves_content_opposite() {
        let a = frame(StageCoord::new(0.4, 0.4));
        let b = frame(StageCoord::new(0.41, 0.395));
        let r = align_frames(&a, &b).unwrap();
        assert!((r.shift.x + 10.0).abs() < 0.5 && (r.shift.y - 5.0).abs() < 0.5, "{:?}", r.shift);
        assert!(r.confidence > 0.5);
    }

    #[test]
    fn unrelated_frame_is_lost() {
        let a = frame(StageCoord::new(0.2, 0.2));
        let b = Raster::filled(320, 240, Channels::Rgb, 128).unwrap();
        let r = align_frames(&a, &b).unwrap();
        assert_eq!(r.confidence, 0.0);
        let s = (0..5).fold(TrackState::new(Point2::new(10.0, 10.0)), |s, _| update_track(&s, r.shift, r.confidence));
        assert_eq!(s.lock, Lock::Lost);
    }

    #[test]
    fn lock_rules() {
        let s = TrackState::new(Point2::new(100.0, 100.0));
        let moved = update_track(&s, Point2::new(2.0, 0.0), 0.9);
        assert_eq!(moved.patch_center, Point2::new(102.0, 100.0));
        let lost = (0..5).fold(s.clone(), |s, _| update_track(&s, Point2::new(0.0, 0.0), 0.0));
        assert_eq!(lost.lock, Lock::Lost);
        let mut t = (0..4).fold(s.clone(), |s, _| update_track(&s, Point2::new(9.0, 9.0), 0.1));
        assert_eq!(t.patch_center, s.patch_center);
        t = update_track(&t, Point2::new(1.0, 1.0), 0.8);
        assert_eq!(t.lock, Lock::Locked);
        assert_eq!(t.low_streak, 0);
        assert_eq!(t.frames_seen, 5);
    }

    #[test]
    fn guidance_examples() {
        let s = TrackState::new(Point2::new(100.0, 100.0));
        let t = GuidanceTarget::new(Point2::new(400.0, 300.0), 20.0, [1024, 768]).unwrap();
        let g = guidance_vector(&s, &t, 1000.0).unwrap();
        assert_eq!(g.view_vector, Point2::new(300.0, 200.0));
        assert!(!g.arrived);

        let inside = TrackState::new(Point2::new(410.0, 305.0));
        assert!(guidance_vector(&inside, &t, 1000.0).unwrap().arrived);

        let s = TrackState::new(Point2::new(0.0, 0.0));
        let t = GuidanceTarget::new(Point2::new(100.0, 0.0), 5.0, [1024, 768]).unwrap();
        let g = guidance_vector(&s, &t, 10000.0).unwrap();
        assert!((g.stage_vector_mm.x + 0.010).abs() < 1e-15 && g.stage_vector_mm.y == 0.0);

        let mut lost = s.clone();
        lost.lock = Lock::Lost;
        assert_eq!(guidance_vector(&lost, &t, 1.0), Err(TrackError::Lost));
        assert!(GuidanceTarget::new(Point2::new(1.0, 1.0), 0.0, [10, 10]).is_err());
    }

    #[test]
    fn calibrated_target_offsets_by_inverse_map() {
        let ep = |m| CalibrationEndpoint { microscope: "hcm".into(), magnification: m };
        let map = CalibrationMap {
            kind: CalibrationKind::CrossMagnification,
            from: ep(Magnification::X100),
            to: ep(Magnification::X400),
            offset_mm: [0.012, -0.008],
            scale: 1.0,
            rms_mm: 0.0,
        };
        let t = calibrated_target(&map, StageCoord::new(5.0, 5.0), [1024, 768], 1000.0, 10.0).unwrap();
        assert!((t.target_center.x - (511.5 - 12.0)).abs() < 1e-9);
        assert!((t.target_center.y - (383.5 + 8.0)).abs() < 1e-9);
    }
}
