use serde::{Deserialize, Serialize};

use super::{Magnification, ScopeError};

/// Stage quantum: readings are kept to the micrometre.
pub const STAGE_QUANTUM_MM: f64 = 0.001;
/// Fits with a larger residual are rejected.
pub const MAX_RMS_MM: f64 = 0.05;

fn quantize(v: f64) -> f64 {
    let q = (v / STAGE_QUANTUM_MM).round() * STAGE_QUANTUM_MM;
    q + 0.0
}

/// A stage reading in millimetres, rounded to [`STAGE_QUANTUM_MM`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCoord {
    pub x_mm: f64,
    pub y_mm: f64,
}

impl StageCoord {
    pub fn new(x_mm: f64, y_mm: f64) -> Self {
        Self { x_mm: quantize(x_mm), y_mm: quantize(y_mm) }
    }

    pub fn distance(self, o: StageCoord) -> f64 {
        (self.x_mm - o.x_mm).hypot(self.y_mm - o.y_mm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationKind {
    /// Same stage, different objective: scale and offset.
    CrossMagnification,
    /// Different microscopes at one magnification: offset only.
    CrossMicroscope,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEndpoint {
    pub microscope: String,
    pub magnification: Magnification,
}

/// `to = scale * from + offset`, applied per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    pub kind: CalibrationKind,
    pub from: CalibrationEndpoint,
    pub to: CalibrationEndpoint,
    pub offset_mm: [f64; 2],
    pub scale: f64,
    pub rms_mm: f64,
}

impl CalibrationMap {
    pub fn apply(&self, c: StageCoord) -> StageCoord {
        StageCoord::new(
            self.scale * c.x_mm + self.offset_mm[0],
            self.scale * c.y_mm + self.offset_mm[1],
        )
    }

    pub fn inverse(&self) -> CalibrationMap {
        CalibrationMap {
            kind: self.kind,
            from: self.to.clone(),
            to: self.from.clone(),
            offset_mm: [-self.offset_mm[0] / self.scale, -self.offset_mm[1] / self.scale],
            scale: 1.0 / self.scale,
            rms_mm: self.rms_mm,
        }
    }
}

/// Closed-form least-squares fit over paired readings of the same slide
/// feature. Cross-magnification fits a shared scale and per-axis offset and
/// needs two distinct points; cross-microscope fits an offset from one or more
/// pairs.
pub fn fit_calibration(
    pairs: &[(StageCoord, StageCoord)],
    kind: CalibrationKind,
    from: CalibrationEndpoint,
    to: CalibrationEndpoint,
) -> Result<CalibrationMap, ScopeError> {
    let needed = match kind {
        CalibrationKind::CrossMagnification => 2,
        CalibrationKind::CrossMicroscope => 1,
    };
    if pairs.len() < needed {
        return Err(ScopeError::TooFewPairs { needed, got: pairs.len() });
    }
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(&(StageCoord, StageCoord)) -> f64| pairs.iter().map(f).sum::<f64>() / n;
    let (ax, ay) = (mean(&|p| p.0.x_mm), mean(&|p| p.0.y_mm));
    let (bx, by) = (mean(&|p| p.1.x_mm), mean(&|p| p.1.y_mm));

    let scale = match kind {
        CalibrationKind::CrossMicroscope => 1.0,
        CalibrationKind::CrossMagnification => {
            let mut num = 0.0;
            let mut den = 0.0;
            for (a, b) in pairs {
                let (dx, dy) = (a.x_mm - ax, a.y_mm - ay);
                num += dx * (b.x_mm - bx) + dy * (b.y_mm - by);
                den += dx * dx + dy * dy;
            }
            if den < 1e-12 {
                return Err(ScopeError::DegeneratePairs);
            }
            num / den
        }
    };
    let offset = [bx - scale * ax, by - scale * ay];
    let sq: f64 = pairs
        .iter()
        .map(|(a, b)| {
            let ex = scale * a.x_mm + offset[0] - b.x_mm;
            let ey = scale * a.y_mm + offset[1] - b.y_mm;
            ex * ex + ey * ey
        })
        .sum();
    let rms_mm = (sq / n).sqrt();
    if rms_mm > MAX_RMS_MM {
        return Err(ScopeError::ResidualTooLarge { rms_mm, limit_mm: MAX_RMS_MM });
    }
    Ok(CalibrationMap { kind, from, to, offset_mm: offset, scale, rms_mm })
}
