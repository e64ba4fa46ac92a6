//! Raw geometric kernels over flat `N × 3` coordinate slices.
//!
//! These are shared by the differentiable ops, the point-cloud utilities and
//! the metrics, so they work on plain slices rather than on [`PointCloud`].
//!
//! [`PointCloud`]: crate::cloud::PointCloud

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn point(points: &[f64], i: usize) -> &[f64] {
    &points[3 * i..3 * i + 3]
}

/// Exact k-nearest neighbours of every point, excluding the point itself.
///
/// Returns a flat `n × k` index matrix. Each row is sorted by ascending
/// distance; equal distances keep the lower index first.
pub fn knn(points: &[f64], k: usize) -> Vec<usize> {
    let n = points.len() / 3;
    let mut out = Vec::with_capacity(n * k);
    let mut dist = vec![0.0; n];
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    // Structure-of-arrays copy so the distance sweep vectorizes.
    let axis = |a: usize| -> Vec<f64> { points.chunks_exact(3).map(|p| p[a]).collect() };
    let (xs, ys, zs) = (axis(0), axis(1), axis(2));
    for i in 0..n {
        let (xi, yi, zi) = (xs[i], ys[i], zs[i]);
        for (((d, &x), &y), &z) in dist.iter_mut().zip(&xs).zip(&ys).zip(&zs) {
            let (dx, dy, dz) = (x - xi, y - yi, z - zi);
            *d = dx * dx + dy * dy + dz * dz;
        }
        dist[i] = f64::INFINITY;
        best.clear();
        // Until `best` holds k entries the threshold stays infinite.
        let mut worst = f64::INFINITY;
        for (j, &d) in dist.iter().enumerate() {
            if d >= worst || j == i {
                continue;
            }
            // j is scanned in increasing order, so equal distances go after.
            let pos = best.partition_point(|&(bd, _)| bd <= d);
            best.insert(pos, (d, j));
            if best.len() > k {
                best.pop();
            }
            if best.len() == k {
                worst = best[k - 1].0;
            }
        }
        out.extend(best.iter().map(|&(_, j)| j));
    }
    out
}

/// For every point of `from`, the lowest-index nearest point of `to` and the
/// squared distance to it.
pub fn nearest(from: &[f64], to: &[f64]) -> Vec<(usize, f64)> {
    let axis = |a: usize| -> Vec<f64> { to.chunks_exact(3).map(|p| p[a]).collect() };
    let (xs, ys, zs) = (axis(0), axis(1), axis(2));
    let mut dist = vec![0.0; xs.len()];
    from.chunks_exact(3)
        .map(|p| {
            for (((d, &x), &y), &z) in dist.iter_mut().zip(&xs).zip(&ys).zip(&zs) {
                let (dx, dy, dz) = (x - p[0], y - p[1], z - p[2]);
                *d = dx * dx + dy * dy + dz * dz;
            }
            let mut best = (0usize, f64::INFINITY);
            for (j, &d) in dist.iter().enumerate() {
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

/// Coordinate-wise median of a cloud (average of the two middle values for
/// even counts).
pub fn median_center(points: &[f64]) -> [f64; 3] {
    let n = points.len() / 3;
    let mut c = [0.0; 3];
    let mut buf = Vec::with_capacity(n);
    for (axis, slot) in c.iter_mut().enumerate() {
        buf.clear();
        buf.extend(points.chunks_exact(3).map(|p| p[axis]));
        buf.sort_by(f64::total_cmp);
        *slot = if n % 2 == 1 {
            buf[n / 2]
        } else {
            0.5 * (buf[n / 2 - 1] + buf[n / 2])
        };
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knn_on_line() {
        let pts = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 3.0, 0.0, 0.0];
        assert_eq!(knn(&pts, 1), vec![1, 0, 1]);
        assert_eq!(knn(&pts, 2), vec![1, 2, 0, 2, 1, 0]);
    }

    #[test]
    fn knn_tie_prefers_lower_index() {
        // Point 0 is equidistant from 1 and 2.
        let pts = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, -1.0, 0.0, 0.0];
        assert_eq!(&knn(&pts, 1)[..1], &[1]);
    }

    #[test]
    fn nearest_ties() {
        let to = [0.0, 0.0, 0.0, 2.0, 0.0, 0.0];
        let from = [1.0, 0.0, 0.0];
        assert_eq!(nearest(&from, &to), vec![(0, 1.0)]);
    }

    #[test]
    fn median_of_odd_and_even() {
        let odd = [0.0, 5.0, 1.0, 1.0, 4.0, 2.0, 9.0, 3.0, 3.0];
        assert_eq!(median_center(&odd), [1.0, 4.0, 2.0]);
        let even = [0.0, 0.0, 0.0, 2.0, 4.0, 6.0];
        assert_eq!(median_center(&even), [1.0, 2.0, 3.0]);
    }
}
