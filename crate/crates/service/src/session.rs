//! Sessions and the per-frame tracking step.

use serde::{Deserialize, Serialize};

use slidereg_core::geom::Point2;
use slidereg_core::scopemodel::{CalibrationKind, CalibrationMap, Magnification, StageCoord};
use slidereg_core::tracking::{
    align_features, calibrated_target, frame_features, guidance_vector, update_track, AlignParams, FrameFeatures,
    Guidance, GuidanceTarget, Lock, TrackState,
};
use slidereg_core::Raster;

use crate::error::{ApiError, ApiResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    LiveGuidance,
    Verification,
    Simulation,
}

pub const DEFAULT_TARGET_RADIUS: f64 = 10.0;

#[derive(Clone, Debug, Deserialize)]
pub struct CreateSession {
    pub mode: Mode,
    pub profile: String,
    #[serde(default)]
    pub magnification: Option<Magnification>,
    /// Where the tracked patch starts; the frame center when omitted.
    #[serde(default)]
    pub patch_center: Option<Point2>,
    /// Explicit target; otherwise derived from a stored calibration and
    /// `stage_mm`, or the frame center.
    #[serde(default)]
    pub target: Option<GuidanceTarget>,
    #[serde(default)]
    pub target_radius: Option<f64>,
    #[serde(default)]
    pub stage_mm: Option<[f64; 2]>,
}

#[derive(Clone, Debug)]
pub struct LiveState {
    pub last_index: Option<u64>,
    /// Features of the last accepted frame.
    pub prev: Option<FrameFeatures>,
    pub track: Option<TrackState>,
    pub target: Option<GuidanceTarget>,
    pub last: Option<FrameResponse>,
    pub stream_active: bool,
}

#[derive(Clone, Debug)]
pub struct Session {
    pub id: String,
    pub mode: Mode,
    pub profile: String,
    pub magnification: Magnification,
    pub px_per_mm: f64,
    pub request: CreateSession,
    /// Map from this objective to the next one, if calibrated.
    pub calibration: Option<CalibrationMap>,
    pub live: Option<LiveState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameResponse {
    pub index: u64,
    pub shift: Point2,
    pub confidence: f64,
    /// Absent while the track is lost.
    pub guidance: Option<Guidance>,
    pub arrived: bool,
    pub lock: Lock,
    pub patch_center: Point2,
    pub target: GuidanceTarget,
}

#[derive(Clone, Debug, Serialize)]
pub struct SessionView {
    pub session_id: String,
    pub mode: Mode,
    pub profile: String,
    pub magnification: Magnification,
    pub px_per_mm: f64,
    pub last_index: Option<u64>,
    pub track: Option<TrackState>,
    pub target: Option<GuidanceTarget>,
    pub last: Option<FrameResponse>,
}

impl Session {
    pub fn new(
        id: String,
        req: CreateSession,
        px_per_mm: f64,
        magnification: Magnification,
        calibrations: &[CalibrationMap],
    ) -> Self {
        let calibration = calibrations
            .iter()
            .filter(|c| c.kind == CalibrationKind::CrossMagnification)
            .find(|c| c.from.microscope == req.profile && c.from.magnification == magnification)
            .cloned();
        let live = (req.mode == Mode::LiveGuidance).then_some(LiveState {
            last_index: None,
            prev: None,
            track: None,
            target: None,
            last: None,
            stream_active: false,
        });
        Self {
            id,
            mode: req.mode,
            profile: req.profile.clone(),
            magnification,
            px_per_mm,
            request: req,
            calibration,
            live,
        }
    }

    pub fn view(&self) -> SessionView {
        SessionView {
            session_id: self.id.clone(),
            mode: self.mode,
            profile: self.profile.clone(),
            magnification: self.magnification,
            px_per_mm: self.px_per_mm,
            last_index: self.live.as_ref().and_then(|l| l.last_index),
            track: self.live.as_ref().and_then(|l| l.track.clone()),
            target: self.live.as_ref().and_then(|l| l.target),
            last: self.live.as_ref().and_then(|l| l.last.clone()),
        }
    }

    pub fn live_mut(&mut self) -> ApiResult<&mut LiveState> {
        let id = self.id.clone();
        self.live
            .as_mut()
            .ok_or_else(|| ApiError::bad_request(format!("session {id} is not a live guidance session")))
    }

    fn initial_target(&self, size: [usize; 2]) -> ApiResult<GuidanceTarget> {
        let radius = self.request.target_radius.unwrap_or(DEFAULT_TARGET_RADIUS);
        let bad = |e: slidereg_core::tracking::TrackError| ApiError::bad_request(e.to_string());
        if let Some(t) = self.request.target {
            return GuidanceTarget::new(t.target_center, t.target_radius, size).map_err(bad);
        }
        if let (Some(map), Some(s)) = (&self.calibration, self.request.stage_mm) {
            return calibrated_target(map, StageCoord::new(s[0], s[1]), size, self.px_per_mm, radius).map_err(bad);
        }
        let c = Point2::new((size[0] as f64 - 1.0) / 2.0, (size[1] as f64 - 1.0) / 2.0);
        GuidanceTarget::new(c, radius, size).map_err(bad)
    }

    /// Checks the frame index before any work is done.
    pub fn check_index(&mut self, index: u64) -> ApiResult<()> {
        let live = self.live_mut()?;
        if let Some(last) = live.last_index {
            if index <= last {
                return Err(ApiError::conflict(format!("frame {index} is not after frame {last}"))
                    .with_detail(serde_json::json!({ "last_index": last })));
            }
        }
        Ok(())
    }

    /// Registers `frame` against the previous one and updates guidance.
    pub fn ingest(&mut self, index: u64, frame: Raster) -> ApiResult<FrameResponse> {
        self.check_index(index)?;
        let size = [frame.width(), frame.height()];
        let target = match self.live.as_ref().and_then(|l| l.target) {
            Some(t) => t,
            None => self.initial_target(size)?,
        };
        let start = self
            .request
            .patch_center
            .unwrap_or(Point2::new((size[0] as f64 - 1.0) / 2.0, (size[1] as f64 - 1.0) / 2.0));
        let ppm = self.px_per_mm;
        let params = AlignParams::default();
        let features = frame_features(&frame, &params).map_err(|e| ApiError::bad_request(e.to_string()))?;
        let live = self.live_mut()?;
        let (shift, confidence, track) = match (&live.prev, &live.track) {
            (Some(prev), Some(track)) => {
                let a = align_features(prev, &features, &params).map_err(|e| ApiError::bad_request(e.to_string()))?;
                (a.shift, a.confidence, update_track(track, a.shift, a.confidence))
            }
            _ => (Point2::new(0.0, 0.0), 1.0, TrackState::new(start)),
        };
        let guidance = guidance_vector(&track, &target, ppm).ok();
        let resp = FrameResponse {
            index,
            shift,
            confidence,
            arrived: guidance.is_some_and(|g| g.arrived),
            guidance,
            lock: track.lock,
            patch_center: track.patch_center,
            target,
        };
        live.last_index = Some(index);
        live.prev = Some(features);
        live.track = Some(track);
        live.target = Some(target);
        live.last = Some(resp.clone());
        Ok(resp)
    }
}
