use std::f64::consts::TAU;

use super::noise::{hash2, lod_weight, splitmix, unit01, value_noise};
use super::{Cell, SimError, SlideScene, ViewGeometry, ViewSpec};
use crate::annotation::{Annotation, CellClass};
use crate::geom::BBox;
use super::noise;
use crate::imagecore::{degrade, Plane, Raster, RasterMeta};
use crate::scopemodel::ProfileSet;

/// Clean camera and objective blur, in pixels at the painted density.
const CAMERA_PSF_PX: f64 = 0.5;
const PLASMA: [f32; 3] = [236.0, 222.0, 228.0];
const PLASMA_TINT: [f32; 3] = [1.0, 0.85, 0.95];
/// (wavelength mm, amplitude in grey levels)
const BACKGROUND_OCTAVES: [(f64, f32); 5] =
    [(0.030, 7.0), (0.010, 7.0), (0.0035, 8.0), (0.0014, 7.0), (0.0006, 6.0)];
const CELL_BODY: [f32; 3] = [204.0, 128.0, 142.0];
const PALLOR: [f32; 3] = [24.0, 40.0, 34.0];
const MEMBRANE: [f32; 3] = [30.0, 38.0, 30.0];
const CELL_OCTAVES: [(f64, f32); 2] = [(0.0022, 10.0), (0.0009, 8.0)];
const CHROMATIN: [f32; 3] = [92.0, 42.0, 128.0];
const SPECK_TINT: [f32; 3] = [0.55, 0.85, 0.5];
const SPECK_LATTICE_MM: f64 = 0.005;
const SPECK_PROBABILITY: f64 = 0.55;
const SPECK_SIGMA_MM: [f64; 2] = [0.0003, 0.0009];

/// Renders a view and its ground-truth boxes for infected cells.
///
/// Views on microscopes with non-identity degradation are painted at
/// `px_per_mm * fov_crop` and then degraded, so the crop-and-resize step lands
/// exactly on the profile sampling density.
pub fn render_view(
    scene: &SlideScene,
    spec: &ViewSpec,
    profiles: &ProfileSet,
) -> Result<(Raster, Vec<Annotation>), SimError> {
    let profile = profiles.get(&spec.microscope)?;
    let geo = ViewGeometry::of(spec, profiles)?;
    let deg = &profile.degradation;
    let clean = deg.is_identity();
    let paint_geo = ViewGeometry {
        px_per_mm: if clean { geo.px_per_mm } else { geo.px_per_mm * deg.fov_crop },
        ..geo
    };
    let mut raster = paint(scene, &paint_geo)?;
    if !clean {
        let seed = splitmix(
            scene.background_seed
                ^ hash2(
                    spec.magnification.value() as u64,
                    (spec.stage.x_mm * 1000.0).round() as i64,
                    (spec.stage.y_mm * 1000.0).round() as i64,
                ),
        );
        raster = degrade(&raster, deg, seed)?;
    }
    let raster = raster.with_meta(RasterMeta {
        microscope: spec.microscope.clone(),
        magnification: spec.magnification.value(),
        stage_mm: [spec.stage.x_mm, spec.stage.y_mm],
    });
    Ok((raster, ground_truth(scene, &geo)))
}

/// The boxes [`render_view`] would return, without painting.
pub fn view_truth(scene: &SlideScene, spec: &ViewSpec, profiles: &ProfileSet) -> Result<Vec<Annotation>, SimError> {
    Ok(ground_truth(scene, &ViewGeometry::of(spec, profiles)?))
}

fn ground_truth(scene: &SlideScene, geo: &ViewGeometry) -> Vec<Annotation> {
    let bounds = BBox::image_bounds(geo.width, geo.height);
    let mut out = Vec::new();
    for (i, cell) in scene.cells.iter().enumerate() {
        let Some(label) = cell.label else { continue };
        let full = geo.cell_box(cell);
        let Some(clipped) = full.intersection(&bounds) else { continue };
        let mut a = Annotation::expert(format!("c{i}"), clipped, label);
        if clipped.area() < full.area() - 1e-9 {
            a.truncated = true;
            a.full_box = Some(full);
        }
        out.push(a);
    }
    out
}

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn paint(scene: &SlideScene, geo: &ViewGeometry) -> Result<Raster, SimError> {
    let (w, h) = (geo.width, geo.height);
    let ppm = geo.px_per_mm;
    let mut buf = vec![[0f32; 3]; w * h];
    let x0 = geo.to_mm([0.0, 0.0]);

    let mut field = vec![0f32; w * h];
    for (i, &(l, a)) in BACKGROUND_OCTAVES.iter().enumerate() {
        let amp = a * lod_weight(l * ppm);
        if amp > 0.0 {
            add_octave(&mut field, w, h, x0, ppm, l, amp, splitmix(scene.background_seed + i as u64));
        }
    }
    for (px, n) in buf.iter_mut().zip(&field) {
        for c in 0..3 {
            px[c] = PLASMA[c] + n * PLASMA_TINT[c];
        }
    }

    paint_specks(scene.background_seed, geo, &mut buf);

    let max_r = scene
        .cells
        .iter()
        .map(|c| c.radii_mm[0].max(c.radii_mm[1]))
        .fold(0.0, f64::max);
    let fp = geo.footprint_mm();
    let start = scene.cells.partition_point(|c| c.center_mm[0] < fp.x1 - max_r);
    for cell in &scene.cells[start..] {
        if cell.center_mm[0] > fp.x2 + max_r {
            break;
        }
        if cell.center_mm[1] < fp.y1 - max_r || cell.center_mm[1] > fp.y2 + max_r {
            continue;
        }
        paint_cell(cell, geo, &mut buf);
    }

    let planes: Vec<Plane> = (0..3)
        .map(|c| Plane::from_vec(w, h, buf.iter().map(|px| px[c]).collect()).blurred(CAMERA_PSF_PX))
        .collect();
    Ok(Raster::from_planes(&planes)?)
}

/// Adds one value-noise octave over the whole view. Equivalent to sampling
/// `value_noise` per pixel, with the lattice and interpolation weights
/// tabulated once per row and column.
#[allow(clippy::too_many_arguments)]
fn add_octave(field: &mut [f32], w: usize, h: usize, origin: [f64; 2], ppm: f64, l: f64, amp: f32, seed: u64) {
    let axis = |n: usize, o: f64| -> (i64, Vec<(usize, f32)>) {
        let first = (o / l).floor() as i64;
        let table = (0..n)
            .map(|i| {
                let u = (o + i as f64 / ppm) / l;
                let f = u.floor();
                let t = (u - f) as f32;
                ((f as i64 - first) as usize, t * t * (3.0 - 2.0 * t))
            })
            .collect();
        (first, table)
    };
    let (ix0, cols) = axis(w, origin[0]);
    let (iy0, rows) = axis(h, origin[1]);
    let nx = cols.last().map_or(0, |c| c.0) + 2;
    let ny = rows.last().map_or(0, |r| r.0) + 2;
    let mut lattice = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            lattice.push(noise::lattice_value(seed, ix0 + i as i64, iy0 + j as i64));
        }
    }
    for (y, &(jy, sy)) in rows.iter().enumerate() {
        let r0 = &lattice[jy * nx..(jy + 1) * nx];
        let r1 = &lattice[(jy + 1) * nx..(jy + 2) * nx];
        let out = &mut field[y * w..(y + 1) * w];
        for (o, &(jx, sx)) in out.iter_mut().zip(&cols) {
            let a = r0[jx] + (r0[jx + 1] - r0[jx]) * sx;
            let b = r1[jx] + (r1[jx + 1] - r1[jx]) * sx;
            *o += amp * (a + (b - a) * sy);
        }
    }
}

/// Pixel index range covering `[lo, hi]` in pixel coordinates.
fn span(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    let a = lo.floor().max(0.0);
    let b = hi.ceil().min(n as f64 - 1.0);
    (a <= b).then_some((a as usize, b as usize))
}

/// Small stain specks on a jittered lattice, drawn as pixel-integrated
/// Gaussians so their mass is preserved at every sampling density.
fn paint_specks(seed: u64, geo: &ViewGeometry, buf: &mut [[f32; 3]]) {
    let ppm = geo.px_per_mm;
    let fp = geo.footprint_mm();
    let reach = 3.0 * SPECK_SIGMA_MM[1] + 1.5 / ppm;
    let l = SPECK_LATTICE_MM;
    let s = splitmix(seed ^ 0x5EC5);
    let (gx0, gx1) = (((fp.x1 - reach) / l).floor() as i64, ((fp.x2 + reach) / l).floor() as i64);
    let (gy0, gy1) = (((fp.y1 - reach) / l).floor() as i64, ((fp.y2 + reach) / l).floor() as i64);
    for gy in gy0..=gy1 {
        for gx in gx0..=gx1 {
            let h0 = hash2(s, gx, gy);
            if unit01(h0) >= SPECK_PROBABILITY {
                continue;
            }
            let h1 = splitmix(h0);
            let h2 = splitmix(h1);
            let h3 = splitmix(h2);
            let c = [(gx as f64 + unit01(h1)) * l, (gy as f64 + unit01(h2)) * l];
            let sigma = SPECK_SIGMA_MM[0] + (SPECK_SIGMA_MM[1] - SPECK_SIGMA_MM[0]) * unit01(h3);
            let amp = 50.0 + 50.0 * unit01(splitmix(h3)) as f32;
            let sp = sigma * ppm;
            let s2 = sp * sp + 1.0 / 12.0;
            let peak = amp * (sp * sp / s2) as f32;
            let cp = geo.to_px(c);
            let r = 3.0 * s2.sqrt();
            let (Some((xa, xb)), Some((ya, yb))) =
                (span(cp[0] - r, cp[0] + r, geo.width), span(cp[1] - r, cp[1] + r, geo.height))
            else {
                continue;
            };
            for y in ya..=yb {
                let dy = y as f64 - cp[1];
                for x in xa..=xb {
                    let dx = x as f64 - cp[0];
                    let g = peak * (-(dx * dx + dy * dy) / (2.0 * s2)).exp() as f32;
                    let px = &mut buf[y * geo.width + x];
                    for ch in 0..3 {
                        px[ch] -= g * SPECK_TINT[ch];
                    }
                }
            }
        }
    }
}

/// Gaussian line profile of half-width `w` (normalized units) widened to at
/// least a pixel footprint, with integrated intensity preserved.
fn band(delta: f64, w: f64, px: f64) -> f64 {
    let we = (w * w + 0.16 * px * px).sqrt();
    (w / we) * (-(delta * delta) / (2.0 * we * we)).exp()
}

fn coverage(signed_dist: f64, px: f64) -> f64 {
    (0.5 + signed_dist / px).clamp(0.0, 1.0)
}

fn polar(r: f64, a: f64) -> (f64, f64) {
    (r * a.cos(), r * a.sin())
}

/// Parasite stain density in [0, 1] at normalized cell coordinates.
fn motif(class: CellClass, seed: u64, nu: f64, nv: f64, px: f64) -> f64 {
    let h1 = splitmix(seed ^ 0xA11);
    let h2 = splitmix(h1);
    let h3 = splitmix(h2);
    let phi0 = unit01(h1) * TAU;
    let phi1 = unit01(h2) * TAU;
    let phi2 = unit01(h3) * TAU;
    let dist = |c: (f64, f64)| ((nu - c.0).powi(2) + (nv - c.1).powi(2)).sqrt();
    let dot = |c: (f64, f64), s: f64| {
        let d = dist(c);
        let se2 = s * s + 0.16 * px * px;
        (s * s / se2) * (-(d * d) / (2.0 * se2)).exp()
    };
    match class {
        CellClass::Ring => {
            let c = polar(0.3, phi0);
            let ring = 0.9 * band(dist(c) - 0.32, 0.07, px);
            let (ox, oy) = polar(0.32, phi1);
            ring.max(dot((c.0 + ox, c.1 + oy), 0.1))
        }
        CellClass::Trophozoite => {
            let c = polar(0.2, phi0);
            let (dx, dy) = (nu - c.0, nv - c.1);
            let ang = dy.atan2(dx);
            let r = 0.42 * (1.0 + 0.22 * (3.0 * ang + phi1).sin() + 0.12 * (5.0 * ang + phi2).sin());
            let body = 0.75 * coverage(r - dx.hypot(dy), px);
            body.max(dot(c, 0.08))
        }
        CellClass::Schizont => {
            let n = 8 + (h3 % 7) as usize;
            let mut d: f64 = 0.0;
            for k in 0..n {
                let r = 0.52 * ((k as f64 + 0.5) / n as f64).sqrt();
                d = d.max(dot(polar(r, k as f64 * 2.399_963 + phi0), 0.085));
            }
            d
        }
        CellClass::Gametocyte => {
            let outer = coverage(0.78 - dist((0.0, 0.0)), px);
            let inner = coverage(0.62 - dist(polar(0.36, phi0)), px);
            let crescent = 0.8 * outer * (1.0 - inner);
            crescent.max(0.8 * dot(polar(0.5, phi0 + std::f64::consts::PI), 0.09))
        }
    }
}

fn paint_cell(cell: &Cell, geo: &ViewGeometry, buf: &mut [[f32; 3]]) {
    let ppm = geo.px_per_mm;
    let b = geo.cell_box(cell);
    let (Some((xa, xb)), Some((ya, yb))) = (
        span(b.x1 - 1.0, b.x2 + 1.0, geo.width),
        span(b.y1 - 1.0, b.y2 + 1.0, geo.height),
    ) else {
        return;
    };
    let [a, bb] = cell.radii_mm;
    let (sn, cs) = cell.orientation_rad.sin_cos();
    let px_mm = 1.0 / ppm;
    let px_norm = px_mm / a.min(bb);
    let tex: Vec<(f64, f32, u64)> = CELL_OCTAVES
        .iter()
        .enumerate()
        .map(|(i, &(l, amp))| (l, amp * lod_weight(l * ppm), splitmix(cell.texture_seed + i as u64)))
        .filter(|o| o.1 > 0.0)
        .collect();
    let origin = geo.to_mm([0.0, 0.0]);
    for y in ya..=yb {
        let dy = origin[1] + y as f64 * px_mm - cell.center_mm[1];
        for x in xa..=xb {
            let dx = origin[0] + x as f64 * px_mm - cell.center_mm[0];
            let u = dx * cs + dy * sn;
            let v = -dx * sn + dy * cs;
            let (nu, nv) = (u / a, v / bb);
            let rho = nu.hypot(nv);
            let grad = ((nu / a).powi(2) + (nv / bb).powi(2)).sqrt();
            let sd = if rho > 1e-9 { (1.0 - rho) * rho / grad } else { a.min(bb) };
            let cov = coverage(sd, px_mm) as f32;
            if cov <= 0.0 {
                continue;
            }
            let pallor = (1.0 - smoothstep(0.15, 0.6, rho)) as f32;
            let membrane = band(rho - 0.9, 0.08, px_norm) as f32;
            let mut t = 0f32;
            for &(l, amp, s) in &tex {
                t += amp * value_noise(s, u / l, v / l);
            }
            let mut inner = [0f32; 3];
            for c in 0..3 {
                inner[c] = CELL_BODY[c] + PALLOR[c] * pallor - MEMBRANE[c] * membrane + t;
            }
            if let Some(class) = cell.label {
                let d = motif(class, cell.texture_seed, nu, nv, px_norm) as f32;
                inner = lerp3(inner, CHROMATIN, 0.85 * d.min(1.0));
            }
            let px = &mut buf[y * geo.width + x];
            *px = lerp3(*px, inner, cov);
        }
    }
}
