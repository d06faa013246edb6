use serde::{Deserialize, Serialize};

use super::TransferError;
use crate::features::{describe_with, detect_keypoints, match_descriptors, BriefPattern, DEFAULT_PATTERN_SEED};
use crate::geom::{ransac_homography, Correspondence, Homography, RansacParams};
use super::direct::refine_direct;
use crate::imagecore::{Plane, Raster};

/// Fewer matches than this is reported as [`TransferError::TooFewMatches`].
pub const MIN_MATCHES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationParams {
    pub fast_threshold: u8,
    pub max_keypoints: usize,
    pub ratio: f64,
    pub pattern_seed: u64,
    pub ransac: RansacParams,
    /// Polish the feature-based estimate on band-passed intensities.
    pub photometric_polish: bool,
    /// Known optical blur of src and dst, in their own pixels. The sharper
    /// image is blurred to match at the working resolution.
    #[serde(default)]
    pub blur_sigma_px: [f64; 2],
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            fast_threshold: 12,
            max_keypoints: 2500,
            ratio: 0.75,
            pattern_seed: DEFAULT_PATTERN_SEED,
            ransac: RansacParams { threshold: 2.0, ..RansacParams::default() },
            photometric_polish: true,
            blur_sigma_px: [0.0, 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationDiagnostics {
    pub src_keypoints: usize,
    pub dst_keypoints: usize,
    pub match_count: usize,
    pub inlier_count: usize,
    pub inlier_ratio: f64,
    /// Mean forward reprojection error of inliers at matching resolution.
    pub mean_inlier_error: f64,
    pub ransac_iterations: usize,
    /// Factors applied to src and dst before matching.
    pub working_scale: [f64; 2],
    /// Present when the intensity-based polish was applied.
    pub photometric: Option<PhotometricDiagnostics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhotometricDiagnostics {
    pub initial_rms: f64,
    pub final_rms: f64,
    pub iterations: usize,
}

fn scale_matrix(f: f64) -> Homography {
    let off = 0.5 * f - 0.5;
    Homography::similarity(f, 0.0, off, off)
}

/// Registers `src` onto `dst` where `dst` is expected to be `expected_scale`
/// times denser than `src`.
///
/// Matching runs at the coarser of the two sampling densities: the finer
/// image is pre-filtered and downscaled so local patches compare at near 1:1.
/// The returned homography maps original src pixels to original dst pixels.
pub fn register_pair(
    src: &Raster,
    dst: &Raster,
    expected_scale: f64,
    params: &RegistrationParams,
) -> Result<(Homography, RegistrationDiagnostics), TransferError> {
    if !(expected_scale.is_finite() && expected_scale > 0.0) {
        return Err(TransferError::InvalidScale(expected_scale));
    }
    let (fs, fd) = if expected_scale < 1.0 {
        (expected_scale, 1.0)
    } else {
        (1.0, 1.0 / expected_scale)
    };
    let blur = [params.blur_sigma_px[0] * fs, params.blur_sigma_px[1] * fd];
    let target = blur[0].max(blur[1]);
    let prepare = |img: &Raster, f: f64, own: f64| -> Result<(Plane, Raster), TransferError> {
        let luma = img.luma_plane();
        let mut plane = if (f - 1.0).abs() < 1e-12 { luma } else { luma.rescaled(f) };
        let extra = (target * target - own * own).max(0.0).sqrt();
        if extra > 0.05 {
            plane = plane.blurred(extra);
        }
        let raster = Raster::from_planes(std::slice::from_ref(&plane)).map_err(|_| TransferError::InvalidScale(f))?;
        Ok((plane, raster))
    };
    let (ps, ws) = prepare(src, fs, blur[0])?;
    let (pd, wd) = prepare(dst, fd, blur[1])?;
    let pattern = BriefPattern::new(params.pattern_seed);
    let ks = detect_keypoints(&ws, params.fast_threshold, params.max_keypoints)?;
    let kd = detect_keypoints(&wd, params.fast_threshold, params.max_keypoints)?;
    let ds = describe_with(&ws, &ks, &pattern)?;
    let dd = describe_with(&wd, &kd, &pattern)?;
    let matches = match_descriptors(&ds, &dd, params.ratio)?;
    if matches.len() < MIN_MATCHES {
        return Err(TransferError::TooFewMatches { found: matches.len(), needed: MIN_MATCHES });
    }
    let pairs: Vec<Correspondence> = matches
        .iter()
        .map(|m| Correspondence::new(ks[m.src_index].position, kd[m.dst_index].position))
        .collect();
    let report = ransac_homography(&pairs, &params.ransac)?;
    let polished = if params.photometric_polish {
        refine_direct(&ps, &pd, &report.homography)
    } else {
        None
    };
    let working = polished.as_ref().map_or(report.homography, |p| p.homography);

    let h = scale_matrix(fd)
        .inverse()?
        .after(&working)?
        .after(&scale_matrix(fs))?;
    let diag = RegistrationDiagnostics {
        src_keypoints: ks.len(),
        dst_keypoints: kd.len(),
        match_count: matches.len(),
        inlier_count: report.inlier_indices.len(),
        inlier_ratio: report.inlier_ratio,
        mean_inlier_error: report.mean_inlier_error,
        ransac_iterations: report.iterations_run,
        working_scale: [fs, fd],
        photometric: polished.map(|p| PhotometricDiagnostics {
            initial_rms: p.initial_rms,
            final_rms: p.final_rms,
            iterations: p.iterations,
        }),
    };
    Ok((h, diag))
}
