//! Dynamic time warping: the exact quadratic program and FastDTW
//! (multi-level coarsening with a refinement radius).

use super::AnomalyError;

/// Optimal warping between two series.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// Sum of `|a[i] - b[j]|` along the path.
    pub distance: f64,
    /// Monotone path from `(0, 0)` to `(a.len() - 1, b.len() - 1)`.
    pub path: Vec<(usize, usize)>,
}

/// Per-row inclusive column ranges the dynamic program may visit.
#[derive(Debug, Clone)]
struct Window {
    rows: Vec<(usize, usize)>,
}

impl Window {
    fn full(n: usize, m: usize) -> Self {
        Window { rows: vec![(0, m - 1); n] }
    }
}

pub fn dtw_exact(a: &[f64], b: &[f64]) -> Result<Alignment, AnomalyError> {
    if a.is_empty() || b.is_empty() {
        return Err(AnomalyError::EmptySeries);
    }
    Ok(dtw_windowed(a, b, &Window::full(a.len(), b.len())))
}

/// Approximate DTW in linear time for a fixed `radius`.
///
/// The result is never below the exact distance, and equals it once the
/// radius is as large as the longer series.
pub fn fast_dtw(a: &[f64], b: &[f64], radius: usize) -> Result<Alignment, AnomalyError> {
    if a.is_empty() || b.is_empty() {
        return Err(AnomalyError::EmptySeries);
    }
    Ok(fast_dtw_inner(a, b, radius))
}

fn fast_dtw_inner(a: &[f64], b: &[f64], radius: usize) -> Alignment {
    let min_size = radius + 2;
    if a.len() < min_size || b.len() < min_size {
        return dtw_windowed(a, b, &Window::full(a.len(), b.len()));
    }
    let coarse_a = halve(a);
    let coarse_b = halve(b);
    let coarse = fast_dtw_inner(&coarse_a, &coarse_b, radius);
    let window = project_window(&coarse.path, coarse_a.len(), coarse_b.len(), a.len(), b.len(), radius);
    dtw_windowed(a, b, &window)
}

/// Pairwise means; an odd trailing element is dropped.
fn halve(x: &[f64]) -> Vec<f64> {
    x.chunks_exact(2).map(|p| (p[0] + p[1]) / 2.0).collect()
}

fn project_window(
    path: &[(usize, usize)],
    coarse_n: usize,
    coarse_m: usize,
    n: usize,
    m: usize,
    radius: usize,
) -> Window {
    // column span per coarse row after growing every path cell by `radius`
    let mut coarse: Vec<Option<(usize, usize)>> = vec![None; coarse_n];
    for &(i, j) in path {
        let lo_i = i.saturating_sub(radius);
        let hi_i = (i + radius).min(coarse_n - 1);
        let lo_j = j.saturating_sub(radius);
        let hi_j = (j + radius).min(coarse_m - 1);
        for row in &mut coarse[lo_i..=hi_i] {
            *row = Some(match *row {
                Some((lo, hi)) => (lo.min(lo_j), hi.max(hi_j)),
                None => (lo_j, hi_j),
            });
        }
    }

    let mut rows = vec![(usize::MAX, 0usize); n];
    for (ci, span) in coarse.iter().enumerate() {
        let Some((lo, hi)) = *span else { continue };
        let fine_lo = 2 * lo;
        // the last coarse column also owns the odd trailing fine column
        let fine_hi = if hi + 1 == coarse_m { m - 1 } else { 2 * hi + 1 };
        let last_row = if ci + 1 == coarse_n { n - 1 } else { 2 * ci + 1 };
        for row in &mut rows[2 * ci..=last_row] {
            row.0 = row.0.min(fine_lo);
            row.1 = row.1.max(fine_hi);
        }
    }

    // keep the band connected and anchored at both corners
    rows[0].0 = 0;
    rows[n - 1].1 = m - 1;
    for i in 1..n {
        if rows[i].0 == usize::MAX {
            rows[i] = rows[i - 1];
        }
        rows[i].0 = rows[i].0.max(rows[i - 1].0).min(rows[i - 1].1 + 1).min(m - 1);
        rows[i].1 = rows[i].1.max(rows[i - 1].1).max(rows[i].0);
    }
    rows[n - 1].1 = m - 1;
    Window { rows }
}

fn dtw_windowed(a: &[f64], b: &[f64], window: &Window) -> Alignment {
    let n = a.len();
    // cost[i][k] holds the accumulated cost of cell (i, window.rows[i].0 + k)
    let mut cost: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let (lo, hi) = window.rows[i];
        let mut row = vec![f64::INFINITY; hi - lo + 1];
        for j in lo..=hi {
            let local = (a[i] - b[j]).abs();
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let up = lookup(&cost, window, i.wrapping_sub(1), j);
                let diag = if j > 0 { lookup(&cost, window, i.wrapping_sub(1), j - 1) } else { f64::INFINITY };
                let left = if j > lo { row[j - 1 - lo] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            row[j - lo] = local + best;
        }
        cost.push(row);
    }

    let m = b.len();
    let distance = lookup(&cost, window, n - 1, m - 1);
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let candidates = [
            (i.checked_sub(1), j.checked_sub(1)),
            (i.checked_sub(1), Some(j)),
            (Some(i), j.checked_sub(1)),
        ];
        let mut best: Option<((usize, usize), f64)> = None;
        for cand in candidates {
            if let (Some(ci), Some(cj)) = cand {
                let c = lookup(&cost, window, ci, cj);
                if best.is_none_or(|(_, b)| c < b) {
                    best = Some(((ci, cj), c));
                }
            }
        }
        let ((ni, nj), _) = best.expect("a predecessor always exists away from the origin");
        i = ni;
        j = nj;
        path.push((i, j));
    }
    path.reverse();
    Alignment { distance, path }
}

fn lookup(cost: &[Vec<f64>], window: &Window, i: usize, j: usize) -> f64 {
    let Some(row) = cost.get(i) else { return f64::INFINITY };
    let (lo, hi) = window.rows[i];
    if j < lo || j > hi {
        f64::INFINITY
    } else {
        row[j - lo]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Minimum cost over every monotone path, by exhaustive recursion.
    fn brute_force(a: &[f64], b: &[f64]) -> f64 {
        fn walk(a: &[f64], b: &[f64], i: usize, j: usize) -> f64 {
            let here = (a[i] - b[j]).abs();
            if i + 1 == a.len() && j + 1 == b.len() {
                return here;
            }
            let mut best = f64::INFINITY;
            if i + 1 < a.len() {
                best = best.min(walk(a, b, i + 1, j));
            }
            if j + 1 < b.len() {
                best = best.min(walk(a, b, i, j + 1));
            }
            if i + 1 < a.len() && j + 1 < b.len() {
                best = best.min(walk(a, b, i + 1, j + 1));
            }
            here + best
        }
        walk(a, b, 0, 0)
    }

    fn random_series(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<f64> {
        let len = rng.random_range(1..=max_len);
        (0..len).map(|_| rng.random_range(-10.0..10.0)).collect()
    }

    fn path_cost(a: &[f64], b: &[f64], path: &[(usize, usize)]) -> f64 {
        path.iter().map(|&(i, j)| (a[i] - b[j]).abs()).sum()
    }

    fn assert_valid_path(path: &[(usize, usize)], n: usize, m: usize) {
        assert_eq!(path.first(), Some(&(0, 0)));
        assert_eq!(path.last(), Some(&(n - 1, m - 1)));
        for w in path.windows(2) {
            let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            assert!(matches!((di, dj), (1, 0) | (0, 1) | (1, 1)), "bad step {w:?}");
        }
    }

    #[test]
    fn identical_series_have_zero_distance() {
        let a = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        assert_eq!(dtw_exact(&a, &a).unwrap().distance, 0.0);
        for r in 0..4 {
            assert_eq!(fast_dtw(&a, &a, r).unwrap().distance, 0.0);
        }
    }

    #[test]
    fn single_bump() {
        let res = dtw_exact(&[0.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(res.distance, 1.0);
        assert_valid_path(&res.path, 3, 3);
    }

    #[test]
    fn empty_series_rejected() {
        assert_eq!(dtw_exact(&[], &[1.0]), Err(AnomalyError::EmptySeries));
        assert_eq!(fast_dtw(&[1.0], &[], 2), Err(AnomalyError::EmptySeries));
    }

    #[test]
    fn exact_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..150 {
            let a = random_series(&mut rng, 7);
            let b = random_series(&mut rng, 7);
            let res = dtw_exact(&a, &b).unwrap();
            let oracle = brute_force(&a, &b);
            assert!((res.distance - oracle).abs() < 1e-9, "{a:?} {b:?}");
            assert_valid_path(&res.path, a.len(), b.len());
            assert!((path_cost(&a, &b, &res.path) - res.distance).abs() < 1e-9);
            let swapped = dtw_exact(&b, &a).unwrap().distance;
            assert!((swapped - res.distance).abs() < 1e-9);
        }
    }

    #[test]
    fn fast_dtw_bounds_and_full_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..120 {
            let a = random_series(&mut rng, 64);
            let b = random_series(&mut rng, 64);
            let exact = dtw_exact(&a, &b).unwrap().distance;
            for radius in [0, 1, 2, 5] {
                let approx = fast_dtw(&a, &b, radius).unwrap();
                assert!(approx.distance >= exact - 1e-9);
                assert_valid_path(&approx.path, a.len(), b.len());
                assert!((path_cost(&a, &b, &approx.path) - approx.distance).abs() < 1e-6);
            }
            let full = fast_dtw(&a, &b, a.len().max(b.len())).unwrap().distance;
            assert_eq!(full, exact);
        }
    }

    #[test]
    fn fast_dtw_radius_one_is_close_on_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut rel_errors = Vec::new();
        for _ in 0..100 {
            let len_a = rng.random_range(16..=64);
            let len_b = rng.random_range(16..=64);
            // smooth random walks, the regime FastDTW is meant for
            let walk = |rng: &mut ChaCha8Rng, len: usize| {
                let mut x = 0.0;
                (0..len)
                    .map(|_| {
                        x += rng.random_range(-1.0..1.0);
                        x
                    })
                    .collect::<Vec<f64>>()
            };
            let a = walk(&mut rng, len_a);
            let b = walk(&mut rng, len_b);
            let exact = dtw_exact(&a, &b).unwrap().distance;
            let approx = fast_dtw(&a, &b, 1).unwrap().distance;
            rel_errors.push((approx - exact) / exact.max(1e-12));
        }
        let mean = rel_errors.iter().sum::<f64>() / rel_errors.len() as f64;
        assert!(mean < 0.10, "mean relative error {mean}");
    }

    #[test]
    fn long_series_stay_linear() {
        let a: Vec<f64> = (0..10_800).map(|i| ((i as f64) / 300.0).sin() * 100.0).collect();
        let b: Vec<f64> = (0..10_800).map(|i| ((i as f64 + 3.0) / 300.0).sin() * 100.0).collect();
        let res = fast_dtw(&a, &b, 2).unwrap();
        assert!(res.distance < 10_800.0);
        assert_valid_path(&res.path, a.len(), b.len());
    }
}
