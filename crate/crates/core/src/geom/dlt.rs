//! Normalized direct linear transform.

use nalgebra::{DMatrix, Matrix3};

use super::{Correspondence, GeomError, Homography, Point2};

/// Ratio below which the second-smallest singular value marks the system as
/// rank deficient.
const RANK_EPS: f64 = 1e-10;

/// Similarity moving the centroid to the origin with mean distance sqrt(2).
pub fn normalizing_transform(points: impl Iterator<Item = Point2> + Clone) -> Option<Matrix3<f64>> {
    let mut n = 0usize;
    let (mut cx, mut cy) = (0.0, 0.0);
    for p in points.clone() {
        cx += p.x;
        cy += p.y;
        n += 1;
    }
    if n == 0 {
        return None;
    }
    cx /= n as f64;
    cy /= n as f64;
    let mean = points.map(|p| (p.x - cx).hypot(p.y - cy)).sum::<f64>() / n as f64;
    if !(mean > 1e-12) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean;
    Some(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn apply(t: &Matrix3<f64>, p: Point2) -> Point2 {
    Point2::new(t[(0, 0)] * p.x + t[(0, 2)], t[(1, 1)] * p.y + t[(1, 2)])
}

/// Right singular vector for the smallest singular value of `a`, or an error
/// when the null space is more than one-dimensional. `a` must have at least
/// 9 rows.
pub(crate) fn null_vector(a: &DMatrix<f64>) -> Result<[f64; 9], GeomError> {
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.ok_or(GeomError::DegenerateConfiguration)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let smallest = order[0];
    let second = svd.singular_values[order[1]];
    let largest = svd.singular_values[*order.last().expect("nine singular values")];
    if !(second >= RANK_EPS * largest) || largest == 0.0 {
        return Err(GeomError::DegenerateConfiguration);
    }
    let mut h = [0.0; 9];
    for (k, v) in h.iter_mut().enumerate() {
        *v = v_t[(smallest, k)];
    }
    Ok(h)
}

/// Estimates the homography mapping each `src` to its `dst` by algebraic
/// least squares on Hartley-normalized coordinates.
pub fn estimate_dlt(pairs: &[Correspondence]) -> Result<Homography, GeomError> {
    if pairs.len() < 4 {
        return Err(GeomError::TooFewPoints {
            needed: 4,
            got: pairs.len(),
        });
    }
    let t_src = normalizing_transform(pairs.iter().map(|c| c.src))
        .ok_or(GeomError::DegenerateConfiguration)?;
    let t_dst = normalizing_transform(pairs.iter().map(|c| c.dst))
        .ok_or(GeomError::DegenerateConfiguration)?;

    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, c) in pairs.iter().enumerate() {
        let s = apply(&t_src, c.src);
        let d = apply(&t_dst, c.dst);
        let (x, y, u, v) = (s.x, s.y, d.x, d.y);
        let r = 2 * k;
        a[(r, 0)] = -x;
        a[(r, 1)] = -y;
        a[(r, 2)] = -1.0;
        a[(r, 6)] = u * x;
        a[(r, 7)] = u * y;
        a[(r, 8)] = u;
        a[(r + 1, 3)] = -x;
        a[(r + 1, 4)] = -y;
        a[(r + 1, 5)] = -1.0;
        a[(r + 1, 6)] = v * x;
        a[(r + 1, 7)] = v * y;
        a[(r + 1, 8)] = v;
    }
    let h = null_vector(&a)?;
    let hn = Matrix3::from_row_slice(&h);
    let t_dst_inv = t_dst.try_inverse().ok_or(GeomError::DegenerateConfiguration)?;
    Homography::from_matrix(&(t_dst_inv * hn * t_src)).map_err(|_| GeomError::DegenerateConfiguration)
}

/// True when three points are collinear relative to their spread.
pub(crate) fn collinear(a: Point2, b: Point2, c: Point2) -> bool {
    let cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    let scale = (b - a).norm().max((c - a).norm()).max((c - b).norm());
    cross.abs() <= 1e-9 * scale * scale || scale == 0.0
}

/// True when any three of the four points are collinear.
pub(crate) fn minimal_sample_degenerate(p: [Point2; 4]) -> bool {
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES
        .iter()
        .any(|t| collinear(p[t[0]], p[t[1]], p[t[2]]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn known() -> Homography {
        let base = Homography::similarity(2.5, 10f64.to_radians(), 10.0, -4.0);
        let mut m = *base.rows();
        m[2][0] = 1e-4;
        Homography::new(m).unwrap()
    }

    #[test]
    fn unit_square_identity() {
        let sq = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        let pairs: Vec<_> = sq
            .iter()
            .map(|&(x, y)| Correspondence::new(Point2::new(x, y), Point2::new(x, y)))
            .collect();
        let h = estimate_dlt(&pairs).unwrap();
        assert!(h.max_abs_diff(&Homography::identity()) < 1e-9);
    }

    #[test]
    fn recovers_constructed_homography() {
        let truth = known();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs: Vec<_> = (0..8)
            .map(|_| {
                let p = Point2::new(rng.gen_range(0.0..256.0), rng.gen_range(0.0..256.0));
                Correspondence::new(p, truth.map_point(p).unwrap())
            })
            .collect();
        let h = estimate_dlt(&pairs).unwrap();
        for c in &pairs {
            assert!(h.map_point(c.src).unwrap().distance(c.dst) < 1e-6);
        }
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pairs: Vec<_> = (0..4)
            .map(|i| {
                let p = Point2::new(i as f64, 2.0 * i as f64 + 1.0);
                Correspondence::new(p, Point2::new(p.x * 3.0, p.y + 2.0))
            })
            .collect();
        assert_eq!(estimate_dlt(&pairs), Err(GeomError::DegenerateConfiguration));
        assert!(matches!(
            estimate_dlt(&pairs[..3]),
            Err(GeomError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn invariant_under_similarity_renormalization() {
        // Estimating in re-scaled coordinates and mapping back gives the same H.
        let truth = known();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pairs: Vec<_> = (0..12)
            .map(|_| {
                let p = Point2::new(rng.gen_range(0.0..256.0), rng.gen_range(0.0..256.0));
                let q = truth.map_point(p).unwrap();
                Correspondence::new(p, q + Point2::new(rng.gen_range(-0.5..0.5), 0.0))
            })
            .collect();
        let h = estimate_dlt(&pairs).unwrap();
        let sim = Homography::similarity(0.37, 0.8, -50.0, 12.0);
        let moved: Vec<_> = pairs
            .iter()
            .map(|c| Correspondence::new(sim.map_point(c.src).unwrap(), sim.map_point(c.dst).unwrap()))
            .collect();
        let h2 = estimate_dlt(&moved).unwrap();
        let back = sim.inverse().unwrap().after(&h2.after(&sim).unwrap()).unwrap();
        assert!(back.max_abs_diff(&h) < 1e-9, "{}", back.max_abs_diff(&h));
    }
}
