//! Photometric polish of a feature-based homography.
//!
//! Gauss-Newton on band-passed intensities over the region the two images
//! share, with a compositional eight-parameter update in normalized source
//! coordinates, a closed-form gain, and Huber weights. Keypoints are only
//! located to the pixel; this brings the estimate to a small fraction of one.

use nalgebra::{Matrix3, SMatrix, SVector};

use crate::geom::Homography;
use crate::imagecore::Plane;

const MAX_SAMPLES: usize = 40_000;
const MAX_ITERS: usize = 20;
const MARGIN: f64 = 6.0;
/// Refinements that move an overlap corner further than this fraction of the
/// overlap diagonal (and at least 3 px) are rejected.
const MAX_CORNER_SHIFT: f64 = 0.03;

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct DirectResult {
    pub homography: Homography,
    pub initial_rms: f64,
    pub final_rms: f64,
    pub iterations: usize,
}

/// (inner, outer) band-pass sigmas, coarse level first.
const LEVELS: [(f64, f64); 2] = [(2.5, 8.0), (1.0, 5.0)];

fn bandpass(p: &Plane, inner: f64, outer: f64) -> Plane {
    let fine = p.blurred(inner);
    let coarse = p.blurred(outer);
    let data = fine.data().iter().zip(coarse.data()).map(|(a, b)| a - b).collect();
    Plane::from_vec(p.width(), p.height(), data)
}

fn gradients(p: &Plane) -> (Plane, Plane) {
    let (w, h) = (p.width(), p.height());
    let mut gx = vec![0f32; w * h];
    let mut gy = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            gx[y * w + x] = 0.5 * (p.at_clamped(xi + 1, yi) - p.at_clamped(xi - 1, yi));
            gy[y * w + x] = 0.5 * (p.at_clamped(xi, yi + 1) - p.at_clamped(xi, yi - 1));
        }
    }
    (Plane::from_vec(w, h, gx), Plane::from_vec(w, h, gy))
}

struct Sample {
    x: f64,
    y: f64,
    value: f32,
}

fn inside(p: (f64, f64), w: usize, h: usize) -> bool {
    p.0 >= MARGIN && p.1 >= MARGIN && p.0 <= w as f64 - 1.0 - MARGIN && p.1 <= h as f64 - 1.0 - MARGIN
}

fn project(m: &Matrix3<f64>, x: f64, y: f64) -> Option<(f64, f64, f64)> {
    let w = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
    if w.abs() < 1e-12 {
        return None;
    }
    Some((
        (m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / w,
        (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / w,
        w,
    ))
}

/// Robust cost and gain of `m` over the samples that land inside `dst`.
fn evaluate(m: &Matrix3<f64>, samples: &[Sample], dst: &Plane, scale: f64) -> Option<(f64, f64, usize)> {
    let (mut sdd, mut sds, mut used) = (0.0, 0.0, 0usize);
    let mut vals = Vec::with_capacity(samples.len());
    for s in samples {
        let Some((u, v, _)) = project(m, s.x, s.y) else { continue };
        if !inside((u, v), dst.width(), dst.height()) {
            vals.push(None);
            continue;
        }
        let d = dst.sample_clamped(u, v) as f64;
        sdd += d * d;
        sds += d * s.value as f64;
        used += 1;
        vals.push(Some(d));
    }
    if used < 200 || sdd <= 0.0 {
        return None;
    }
    let gain = sds / sdd;
    let k = 1.345 * scale;
    let mut cost = 0.0;
    for (s, d) in samples.iter().zip(&vals) {
        let Some(d) = d else { continue };
        let r = (gain * d - s.value as f64).abs();
        cost += if r <= k { 0.5 * r * r } else { k * (r - 0.5 * k) };
    }
    Some((cost / used as f64, gain, used))
}

/// Border kept around each crop so band-pass values at the samples match the
/// uncropped image.
const CROP_PAD: f64 = 32.0;

/// Pixel box in `p` covering the image of four corners, padded and clamped.
fn covering_box(m: &Matrix3<f64>, corners: [(f64, f64); 4], p: &Plane) -> Option<[usize; 4]> {
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (x, y) in corners {
        let (u, v, _) = project(m, x, y)?;
        lo = (lo.0.min(u), lo.1.min(v));
        hi = (hi.0.max(u), hi.1.max(v));
    }
    let (w, h) = (p.width() as f64 - 1.0, p.height() as f64 - 1.0);
    let x0 = (lo.0 - CROP_PAD).clamp(0.0, w).floor() as usize;
    let y0 = (lo.1 - CROP_PAD).clamp(0.0, h).floor() as usize;
    let x1 = (hi.0 + CROP_PAD).clamp(0.0, w).ceil() as usize;
    let y1 = (hi.1 + CROP_PAD).clamp(0.0, h).ceil() as usize;
    (x1 > x0 && y1 > y0).then_some([x0, y0, x1, y1])
}

fn crop(p: &Plane, b: [usize; 4]) -> Plane {
    let [x0, y0, x1, y1] = b;
    let w = x1 - x0 + 1;
    let mut data = Vec::with_capacity(w * (y1 - y0 + 1));
    for y in y0..=y1 {
        data.extend_from_slice(&p.data()[y * p.width() + x0..y * p.width() + x1 + 1]);
    }
    Plane::from_vec(w, y1 - y0 + 1, data)
}

fn frame_corners(p: &Plane) -> [(f64, f64); 4] {
    let (w, h) = (p.width() as f64 - 1.0, p.height() as f64 - 1.0);
    [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)]
}

fn shift(tx: f64, ty: f64) -> Matrix3<f64> {
    Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0)
}

pub(crate) fn refine_direct(src: &Plane, dst: &Plane, h0: &Homography) -> Option<DirectResult> {
    let m0 = h0.matrix();
    let inv0 = m0.try_inverse()?;
    // Work only on the shared region of each image.
    let sb = covering_box(&inv0, frame_corners(dst), src)?;
    let src_c = crop(src, sb);
    let (sx, sy) = (sb[0] as f64, sb[1] as f64);
    let src_corners = frame_corners(&src_c).map(|(x, y)| (x + sx, y + sy));
    let db = covering_box(&m0, src_corners, dst)?;
    let dst_c = crop(dst, db);
    let (dx, dy) = (db[0] as f64, db[1] as f64);
    let to_crop = |m: &Matrix3<f64>| shift(-dx, -dy) * m * shift(sx, sy);

    let mut current = Homography::from_matrix(&to_crop(&m0)).ok()?;
    let mut first = None;
    let mut last = None;
    for (inner, outer) in LEVELS {
        if let Some(r) = refine_level(&src_c, &dst_c, &current, inner, outer) {
            current = r.homography;
            first.get_or_insert(r.initial_rms);
            last = Some(r);
        }
    }
    let last = last?;
    let current = Homography::from_matrix(&(shift(dx, dy) * current.matrix() * shift(-sx, -sy))).ok()?;
    let m = current.matrix();
    let (dw, dh) = (dst.width() as f64 - 1.0, dst.height() as f64 - 1.0);
    let (sw, sh) = (src.width() as f64 - 1.0, src.height() as f64 - 1.0);
    let mut pts = Vec::new();
    for (u, v) in [(0.0, 0.0), (dw, 0.0), (0.0, dh), (dw, dh)] {
        let (x, y, _) = project(&inv0, u, v)?;
        pts.push((x.clamp(0.0, sw), y.clamp(0.0, sh)));
    }
    let (xa, xb) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (ya, yb) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.1), a.1.max(p.1)));
    let a = project(&m0, xa, ya)?;
    let b = project(&m0, xb, yb)?;
    let limit = (MAX_CORNER_SHIFT * (a.0 - b.0).hypot(a.1 - b.1)).max(3.0);
    for (x, y) in [(xa, ya), (xb, ya), (xa, yb), (xb, yb)] {
        let p = project(&m0, x, y)?;
        let q = project(&m, x, y)?;
        if (p.0 - q.0).hypot(p.1 - q.1) > limit {
            return None;
        }
    }
    Some(DirectResult {
        homography: current,
        initial_rms: first.unwrap_or(last.initial_rms),
        final_rms: last.final_rms,
        iterations: last.iterations,
    })
}

fn refine_level(src: &Plane, dst: &Plane, h0: &Homography, inner: f64, outer: f64) -> Option<DirectResult> {
    let s = bandpass(src, inner, outer);
    let d = bandpass(dst, inner, outer);
    let (gx, gy) = gradients(&d);
    let (sw, sh) = (src.width(), src.height());
    let m0 = h0.matrix();
    let inv0 = m0.try_inverse()?;
    // Source-side bounding box of the destination frame.
    let (dw, dh) = (d.width() as f64 - 1.0, d.height() as f64 - 1.0);
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (u, v) in [(0.0, 0.0), (dw, 0.0), (0.0, dh), (dw, dh)] {
        let (x, y, _) = project(&inv0, u, v)?;
        lo = (lo.0.min(x), lo.1.min(y));
        hi = (hi.0.max(x), hi.1.max(y));
    }
    let x0 = lo.0.max(0.0).floor() as usize;
    let y0 = lo.1.max(0.0).floor() as usize;
    let x1 = (hi.0.min(sw as f64 - 1.0).ceil().max(0.0) as usize).min(sw - 1);
    let y1 = (hi.1.min(sh as f64 - 1.0).ceil().max(0.0) as usize).min(sh - 1);
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    let area = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
    let stride = ((area / MAX_SAMPLES as f64).sqrt().ceil() as usize).max(1);
    let mut samples = Vec::new();
    for y in (y0..=y1).step_by(stride) {
        for x in (x0..=x1).step_by(stride) {
            let (xf, yf) = (x as f64, y as f64);
            if !inside((xf, yf), sw, sh) {
                continue;
            }
            if let Some((u, v, _)) = project(&m0, xf, yf) {
                if inside((u, v), d.width(), d.height()) {
                    samples.push(Sample { x: xf, y: yf, value: s.at(x, y) });
                }
            }
        }
    }
    if samples.len() < 500 {
        return None;
    }
    let (cx, cy) = ((sw as f64 - 1.0) / 2.0, (sh as f64 - 1.0) / 2.0);
    let sc = sw.max(sh) as f64 / 2.0;
    let norm = Matrix3::new(1.0 / sc, 0.0, -cx / sc, 0.0, 1.0 / sc, -cy / sc, 0.0, 0.0, 1.0);
    let denorm = norm.try_inverse()?;

    // Residual scale from the initial alignment (median absolute residual).
    let mut abs_r: Vec<f64> = samples
        .iter()
        .filter_map(|sm| {
            let (u, v, _) = project(&m0, sm.x, sm.y)?;
            inside((u, v), d.width(), d.height()).then(|| (d.sample_clamped(u, v) - sm.value).abs() as f64)
        })
        .collect();
    abs_r.sort_by(f64::total_cmp);
    let scale = (abs_r[abs_r.len() / 2] * 1.4826).max(1e-3);

    let (initial_cost, _, _) = evaluate(&m0, &samples, &d, scale)?;
    let mut m = m0;
    let mut cost = initial_cost;
    let mut iterations = 0;
    for _ in 0..MAX_ITERS {
        iterations += 1;
        let Some((_, gain, _)) = evaluate(&m, &samples, &d, scale) else { break };
        let k = 1.345 * scale;
        let mut jtj = SMatrix::<f64, 8, 8>::zeros();
        let mut jtr = SVector::<f64, 8>::zeros();
        for sm in &samples {
            let Some((u, v, w)) = project(&m, sm.x, sm.y) else { continue };
            if !inside((u, v), d.width(), d.height()) {
                continue;
            }
            let val = gain * d.sample_clamped(u, v) as f64;
            let r = val - sm.value as f64;
            let wt = if r.abs() <= k { 1.0 } else { k / r.abs() };
            let g = (gain * gx.sample_clamped(u, v) as f64, gain * gy.sample_clamped(u, v) as f64);
            // d(u,v)/d(x,y) of the current homography at the sample.
            let j00 = (m[(0, 0)] - u * m[(2, 0)]) / w;
            let j01 = (m[(0, 1)] - u * m[(2, 1)]) / w;
            let j10 = (m[(1, 0)] - v * m[(2, 0)]) / w;
            let j11 = (m[(1, 1)] - v * m[(2, 1)]) / w;
            let gxs = g.0 * j00 + g.1 * j10;
            let gys = g.0 * j01 + g.1 * j11;
            let xn = (sm.x - cx) / sc;
            let yn = (sm.y - cy) / sc;
            let row = SVector::<f64, 8>::from([
                gxs * xn,
                gxs * yn,
                gxs,
                gys * xn,
                gys * yn,
                gys,
                -(gxs * xn + gys * yn) * xn,
                -(gxs * xn + gys * yn) * yn,
            ]) * sc;
            jtj += row * row.transpose() * wt;
            jtr += row * (r * wt);
        }
        let Some(chol) = jtj.cholesky() else { break };
        let delta = -chol.solve(&jtr);
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..6 {
            let p = delta * step;
            let a = Matrix3::new(1.0 + p[0], p[1], p[2], p[3], 1.0 + p[4], p[5], p[6], p[7], 1.0);
            let cand = m * denorm * a * norm;
            if let Some((c, _, _)) = evaluate(&cand, &samples, &d, scale) {
                if c < cost {
                    m = cand;
                    cost = c;
                    improved = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !improved || delta.amax() * step * sc < 1e-4 {
            break;
        }
    }
    let h = Homography::from_matrix(&m).ok()?;
    Some(DirectResult {
        homography: h,
        initial_rms: (2.0 * initial_cost).sqrt(),
        final_rms: (2.0 * cost).sqrt(),
        iterations,
    })
}
