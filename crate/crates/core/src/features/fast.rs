use serde::{Deserialize, Serialize};

use super::FeatureError;
use crate::geom::Point2;
use crate::imagecore::Raster;

/// Keypoints nearer than this to any border are discarded so that the
/// descriptor patch always fits.
pub const BORDER: usize = 16;

/// Bresenham circle of radius 3, clockwise from twelve o'clock.
pub(crate) const CIRCLE: [(isize, isize); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

const ARC: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub position: Point2,
    pub score: f64,
}

/// Full segment test at one pixel. Returns the score (sum of absolute
/// differences over the longest qualifying contiguous arc) when at least 12
/// contiguous circle pixels are all brighter than `center + t` or all darker
/// than `center - t`.
pub fn segment_test(ring: &[i16; 16], center: i16, threshold: i16) -> Option<u32> {
    let mut best: Option<u32> = None;
    for sign in [1i16, -1] {
        let mut run = 0usize;
        let mut run_sum = 0u32;
        let mut best_run = 0usize;
        let mut best_sum = 0u32;
        // Walk the ring twice to catch arcs wrapping past index 0.
        for k in 0..32 {
            let d = (ring[k % 16] - center) * sign;
            if d > threshold {
                run += 1;
                run_sum += d as u32;
                if run > 16 {
                    // Entire ring qualifies; drop the element that fell off.
                    let old = (ring[(k - 16) % 16] - center) * sign;
                    run = 16;
                    run_sum -= old as u32;
                }
                if run > best_run || (run == best_run && run_sum > best_sum) {
                    best_run = run;
                    best_sum = run_sum;
                }
            } else {
                run = 0;
                run_sum = 0;
            }
        }
        if best_run >= ARC {
            best = Some(best.map_or(best_sum, |b: u32| b.max(best_sum)));
        }
    }
    best
}

pub fn detect_keypoints(
    img: &Raster,
    threshold: u8,
    max_count: usize,
) -> Result<Vec<Keypoint>, FeatureError> {
    let (w, h) = (img.width(), img.height());
    if w < 32 || h < 32 {
        return Err(FeatureError::ImageTooSmall {
            width: w,
            height: h,
        });
    }
    if !img.is_gray() {
        return Err(FeatureError::NotGrayscale);
    }
    if threshold == 0 {
        return Err(FeatureError::InvalidThreshold);
    }
    let data = img.data();
    let t = threshold as i16;
    let offsets: Vec<isize> = CIRCLE.iter().map(|&(dx, dy)| dy * w as isize + dx).collect();

    // Scores on [BORDER-1, dim-BORDER] so suppression near the kept region
    // sees its neighbours.
    let (x0, x1) = (BORDER - 1, w - BORDER + 1);
    let (y0, y1) = (BORDER - 1, h - BORDER + 1);
    let mut score = vec![0u32; w * h];
    for y in y0..y1 {
        for x in x0..x1 {
            let i = y * w + x;
            let c = data[i] as i16;
            let at = |k: usize| data[(i as isize + offsets[k]) as usize] as i16;
            // At least three of the four compass points must agree.
            let compass = [at(0), at(4), at(8), at(12)];
            let bright = compass.iter().filter(|&&v| v > c + t).count();
            let dark = compass.iter().filter(|&&v| v < c - t).count();
            if bright < 3 && dark < 3 {
                continue;
            }
            let mut ring = [0i16; 16];
            for (k, r) in ring.iter_mut().enumerate() {
                *r = at(k);
            }
            if let Some(s) = segment_test(&ring, c, t) {
                score[i] = s;
            }
        }
    }

    let mut out = Vec::new();
    for y in BORDER..h - BORDER {
        for x in BORDER..w - BORDER {
            let s = score[y * w + x];
            if s == 0 {
                continue;
            }
            let mut keep = true;
            'nms: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let n = score[((y as isize + dy) as usize) * w + (x as isize + dx) as usize];
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if n > s || (earlier && n == s) {
                        keep = false;
                        break 'nms;
                    }
                }
            }
            if keep {
                out.push(Keypoint {
                    position: Point2::new(x as f64, y as f64),
                    score: s as f64,
                });
            }
        }
    }
    // Row-major insertion order makes this a stable (score desc, row-major) order.
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(max_count);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::Channels;

    /// Independent brute-force segment test: rotate a 12-window around the
    /// circle and check every pixel of the window.
    fn oracle_is_corner(img: &Raster, x: usize, y: usize, t: i16) -> bool {
        let c = img.get(x, y, 0) as i16;
        let ring: Vec<i16> = CIRCLE
            .iter()
            .map(|&(dx, dy)| img.get((x as isize + dx) as usize, (y as isize + dy) as usize, 0) as i16)
            .collect();
        (0..16).any(|start| {
            (0..12).all(|k| ring[(start + k) % 16] > c + t)
                || (0..12).all(|k| ring[(start + k) % 16] < c - t)
        })
    }

    #[test]
    fn constant_image_has_no_corners() {
        let img = Raster::filled(64, 64, Channels::Gray, 90).unwrap();
        assert!(detect_keypoints(&img, 10, 100).unwrap().is_empty());
    }

    #[test]
    fn single_dot_is_detected() {
        let img = Raster::from_fn_gray(40, 40, |x, y| if (x, y) == (20, 21) { 255 } else { 0 })
            .unwrap();
        let kps = detect_keypoints(&img, 20, 10).unwrap();
        assert!(!kps.is_empty());
        assert!(kps
            .iter()
            .any(|k| k.position.distance(Point2::new(20.0, 21.0)) <= 1.0));
        // Oracle agrees on the dot pixel and nowhere else.
        let oracle: Vec<_> = (3..37)
            .flat_map(|y| (3..37).map(move |x| (x, y)))
            .filter(|&(x, y)| oracle_is_corner(&img, x, y, 20))
            .collect();
        assert_eq!(oracle, vec![(20, 21)]);
    }

    #[test]
    fn checkerboard_corners_only_at_junctions() {
        // 8 px squares in a 48x48 board centred on a 96x96 mid-gray canvas.
        let img = Raster::from_fn_gray(96, 96, |x, y| {
            if (24..72).contains(&x) && (24..72).contains(&y) {
                if ((x - 24) / 8 + (y - 24) / 8) % 2 == 0 {
                    230
                } else {
                    20
                }
            } else {
                125
            }
        })
        .unwrap();
        let kps = detect_keypoints(&img, 30, 1000).unwrap();
        let near_junction = |p: Point2| {
            let gx = ((p.x - 23.5) / 8.0).round() * 8.0 + 23.5;
            let gy = ((p.y - 23.5) / 8.0).round() * 8.0 + 23.5;
            (p.x - gx).abs() <= 2.5 && (p.y - gy).abs() <= 2.5
        };
        for k in &kps {
            let (x, y) = (k.position.x as usize, k.position.y as usize);
            assert!(oracle_is_corner(&img, x, y, 30), "detector/oracle disagree at {x},{y}");
            assert!(near_junction(k.position), "corner inside a square at {x},{y}");
        }
        // Every oracle corner away from the discard border is within one pixel
        // of a detected keypoint (suppression may merge neighbours).
        for y in BORDER..96 - BORDER {
            for x in BORDER..96 - BORDER {
                if oracle_is_corner(&img, x, y, 30) {
                    assert!(near_junction(Point2::new(x as f64, y as f64)));
                    assert!(kps
                        .iter()
                        .any(|k| k.position.distance(Point2::new(x as f64, y as f64)) <= 1.5));
                }
            }
        }
    }

    #[test]
    fn brightness_shift_invariance() {
        let base = Raster::from_fn_gray(64, 64, |x, y| {
            (((x * 7 + y * 13) % 23) as f64 * 4.0 + ((x / 9 + y / 5) % 3) as f64 * 30.0) as u8
        })
        .unwrap();
        let shifted = Raster::from_fn_gray(64, 64, |x, y| base.get(x, y, 0) + 40).unwrap();
        assert_eq!(
            detect_keypoints(&base, 15, 500).unwrap(),
            detect_keypoints(&shifted, 15, 500).unwrap()
        );
    }

    #[test]
    fn rejects_small_and_color() {
        let small = Raster::filled(31, 40, Channels::Gray, 0).unwrap();
        assert!(matches!(
            detect_keypoints(&small, 10, 10),
            Err(FeatureError::ImageTooSmall { .. })
        ));
        let rgb = Raster::filled(40, 40, Channels::Rgb, 0).unwrap();
        assert_eq!(detect_keypoints(&rgb, 10, 10), Err(FeatureError::NotGrayscale));
    }
}
