use crate::error::{ensure, Result};
use crate::geometry;

use super::PointCloud;

/// Greedy farthest-point sampling of `m` indices starting at `seed_index`.
///
/// Each step adds the point whose minimum distance to the selected set is
/// largest; ties go to the lowest index.
pub fn fps(cloud: &PointCloud, m: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    ensure(m >= 1 && m <= n, || format!("fps needs 1 <= m <= N (m={m}, N={n})"))?;
    ensure(seed_index < n, || format!("fps seed index {seed_index} out of range for N={n}"))?;
    let pts = cloud.flat();
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(m);
    let mut current = seed_index;
    for _ in 0..m {
        out.push(current);
        taken[current] = true;
        let pc = geometry::point(pts, current);
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for j in 0..n {
            if taken[j] {
                continue;
            }
            let d = geometry::sq_dist(pc, geometry::point(pts, j));
            if d < min_d[j] {
                min_d[j] = d;
            }
            if min_d[j] > best_d {
                best_d = min_d[j];
                best = j;
            }
        }
        current = best;
    }
    Ok(out)
}

/// Row `i` holds the `k` nearest other points of point `i`, closest first.
pub fn knn_indices(cloud: &PointCloud, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = cloud.len();
    ensure(k < n, || format!("knn needs k < N (k={k}, N={n})"))?;
    if k == 0 {
        return Ok(vec![Vec::new(); n]);
    }
    Ok(geometry::knn(cloud.flat(), k)
        .chunks_exact(k)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Centers the cloud at its centroid and scales the farthest point to norm 1.
/// A cloud whose points all coincide is only centered.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> PointCloud {
    let n = cloud.len() as f64;
    let mut c = [0.0; 3];
    for p in cloud.points() {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    for v in &mut c {
        *v /= n;
    }
    let mut out: Vec<f64> = cloud
        .flat()
        .chunks_exact(3)
        .flat_map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let r = out
        .chunks_exact(3)
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    if r > 0.0 {
        for v in &mut out {
            *v /= r;
        }
    }
    PointCloud { coords: out }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(xs: &[f64]) -> PointCloud {
        PointCloud::from_points(&xs.iter().map(|&x| [x, 0.0, 0.0]).collect::<Vec<_>>()).unwrap()
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::from_flat((0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn fps_examples() {
        let c = line(&[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(fps(&c, 1, 2).unwrap(), vec![2]);
        assert_eq!(fps(&c, 2, 0).unwrap(), vec![0, 3]);
        let mut all = fps(&c, 4, 1).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(fps(&c, 5, 0).is_err());
        assert!(fps(&c, 2, 4).is_err());
    }

    #[test]
    fn fps_handles_duplicates_without_repeats() {
        let c = line(&[0.0, 0.0, 0.0]);
        let mut idx = fps(&c, 3, 0).unwrap();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn knn_examples() {
        let c = line(&[0.0, 1.0, 3.0]);
        assert_eq!(knn_indices(&c, 1).unwrap(), vec![vec![1], vec![0], vec![1]]);
        let full = knn_indices(&c, 2).unwrap();
        for (i, row) in full.iter().enumerate() {
            let mut r = row.clone();
            r.sort();
            let expect: Vec<usize> = (0..3).filter(|&j| j != i).collect();
            assert_eq!(r, expect);
        }
        assert!(knn_indices(&c, 3).is_err());
    }

    #[test]
    fn normalize_examples() {
        let single = PointCloud::from_points(&[[3.0, -1.0, 2.0]]).unwrap();
        assert_eq!(normalize_unit_sphere(&single).flat(), &[0.0, 0.0, 0.0]);
        let c = normalize_unit_sphere(&random_cloud(50, 1));
        let again = normalize_unit_sphere(&c);
        for (a, b) in c.flat().iter().zip(again.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
        let max_norm = c.points().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).fold(0.0, f64::max);
        assert!((max_norm - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn normalize_is_similarity_invariant(seed in 0u64..1000, scale in 0.01f64..100.0, t in proptest::array::uniform3(-10.0f64..10.0)) {
            let c = random_cloud(40, seed);
            let moved = PointCloud::from_flat(
                c.flat().chunks_exact(3).flat_map(|p| [p[0] * scale + t[0], p[1] * scale + t[1], p[2] * scale + t[2]]).collect(),
            ).unwrap();
            let (a, b) = (normalize_unit_sphere(&c), normalize_unit_sphere(&moved));
            for (x, y) in a.flat().iter().zip(b.flat()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn fps_no_duplicates_and_spacing_shrinks(seed in 0u64..500, n in 2usize..40) {
            let c = random_cloud(n, seed);
            let idx = fps(&c, n, 0).unwrap();
            let mut sorted = idx.clone();
            sorted.sort();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), n);
            let mut prev = f64::INFINITY;
            for m in 2..=n {
                let sel = &idx[..m];
                let mut min_pair = f64::INFINITY;
                for a in 0..m {
                    for b in a + 1..m {
                        min_pair = min_pair.min(geometry::sq_dist(geometry::point(c.flat(), sel[a]), geometry::point(c.flat(), sel[b])));
                    }
                }
                prop_assert!(min_pair <= prev);
                prev = min_pair;
            }
        }

        #[test]
        fn knn_rows_exclude_self_and_are_sorted(seed in 0u64..500, n in 2usize..40, k in 1usize..8) {
            let k = k.min(n - 1);
            let c = random_cloud(n, seed);
            let rows = knn_indices(&c, k).unwrap();
            for (i, row) in rows.iter().enumerate() {
                prop_assert!(!row.contains(&i));
                let d: Vec<f64> = row.iter().map(|&j| geometry::sq_dist(geometry::point(c.flat(), i), geometry::point(c.flat(), j))).collect();
                prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }
}
