//! Indicator points and point-to-ground-truth distances.
//!
//! Polygons follow the annotation convention: the first half of the vertices
//! is the top boundary left→right, the second half the bottom boundary
//! right→left.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Point = [f64; 2];

static DEGENERATE_FALLBACKS: AtomicU64 = AtomicU64::new(0);

/// Number of times a degenerate polygon forced a centroid fallback.
pub fn degenerate_fallbacks() -> u64 {
    DEGENERATE_FALLBACKS.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointMode {
    #[default]
    Central,
    TopLeft,
    Random,
}

impl std::str::FromStr for PointMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "central" => Ok(PointMode::Central),
            "top-left" | "topleft" => Ok(PointMode::TopLeft),
            "random" => Ok(PointMode::Random),
            other => Err(format!("unknown point mode `{}` (central|top-left|random)", other)),
        }
    }
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn chain_length(chain: &[Point]) -> f64 {
    chain.windows(2).map(|w| dist(w[0], w[1])).sum()
}

/// Point at the given arc length along a polyline.
pub fn point_at_arc(chain: &[Point], s: f64) -> Point {
    let mut left = s;
    for w in chain.windows(2) {
        let seg = dist(w[0], w[1]);
        if left <= seg && seg > 0.0 {
            let t = left / seg;
            return [w[0][0] + t * (w[1][0] - w[0][0]), w[0][1] + t * (w[1][1] - w[0][1])];
        }
        left -= seg;
    }
    *chain.last().expect("non-empty chain")
}

/// Midpoint by arc length of a polyline.
pub fn arc_midpoint(chain: &[Point]) -> Point {
    point_at_arc(chain, chain_length(chain) / 2.0)
}

/// Area-weighted centroid; vertex mean for zero-area polygons.
pub fn centroid(poly: &[Point]) -> Point {
    let n = poly.len();
    let mut a = 0.0;
    let mut cx = 0.0;
    let mut cy = 0.0;
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        let cross = p[0] * q[1] - q[0] * p[1];
        a += cross;
        cx += (p[0] + q[0]) * cross;
        cy += (p[1] + q[1]) * cross;
    }
    if a.abs() < 1e-12 {
        let sx: f64 = poly.iter().map(|p| p[0]).sum();
        let sy: f64 = poly.iter().map(|p| p[1]).sum();
        return [sx / n as f64, sy / n as f64];
    }
    [cx / (3.0 * a), cy / (3.0 * a)]
}

pub fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let p = poly[i];
            let q = poly[(i + 1) % n];
            p[0] * q[1] - q[0] * p[1]
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

/// Mean of the arc-length midpoints of the top and bottom chains.
pub fn central_point(poly: &[Point]) -> Point {
    let half = poly.len() / 2;
    let (top, bottom) = poly.split_at(half);
    if top.len() < 2 || bottom.len() < 2 || chain_length(top) == 0.0 || chain_length(bottom) == 0.0 {
        DEGENERATE_FALLBACKS.fetch_add(1, Ordering::Relaxed);
        log::warn!("degenerate polygon chain, using centroid");
        return centroid(poly);
    }
    let a = arc_midpoint(top);
    let b = arc_midpoint(bottom);
    [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]
}

/// Even-odd ray casting. Points on the boundary may land on either side.
pub fn point_in_polygon(p: Point, poly: &[Point]) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return dist(p, a);
    }
    let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
    dist(p, [a[0] + t * dx, a[1] + t * dy])
}

/// Distance to the closed polygon region: zero inside.
pub fn polygon_distance(p: Point, poly: &[Point]) -> f64 {
    if point_in_polygon(p, poly) {
        return 0.0;
    }
    let n = poly.len();
    (0..n)
        .map(|i| point_segment_distance(p, poly[i], poly[(i + 1) % n]))
        .fold(f64::INFINITY, f64::min)
}

const MAX_REJECTION_DRAWS: usize = 1000;

/// Indicator point of a polygon under the given mode. `seed` only matters for
/// [`PointMode::Random`].
pub fn indicator(poly: &[Point], mode: PointMode, seed: u64) -> Point {
    match mode {
        PointMode::Central => central_point(poly),
        PointMode::TopLeft => poly[0],
        PointMode::Random => {
            let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for p in poly {
                x0 = x0.min(p[0]);
                y0 = y0.min(p[1]);
                x1 = x1.max(p[0]);
                y1 = y1.max(p[1]);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if x1 > x0 && y1 > y0 {
                for _ in 0..MAX_REJECTION_DRAWS {
                    let p = [rng.random_range(x0..x1), rng.random_range(y0..y1)];
                    if point_in_polygon(p, poly) {
                        return p;
                    }
                }
            }
            centroid(poly)
        }
    }
}

/// Evaluation distance from a predicted point to a ground-truth polygon.
pub fn eval_distance(pred: Point, gt: &[Point], mode: PointMode) -> f64 {
    match mode {
        PointMode::Central => dist(pred, central_point(gt)),
        PointMode::TopLeft => dist(pred, gt[0]),
        PointMode::Random => polygon_distance(pred, gt),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rect() -> Vec<Point> {
        vec![[10., 20.], [50., 20.], [50., 30.], [10., 30.]]
    }

    #[test]
    fn rectangle_center() {
        assert_eq!(central_point(&rect()), [30.0, 25.0]);
    }

    #[test]
    fn collinear_top_chain() {
        let poly = vec![[0., 0.], [2., 0.], [4., 0.], [4., 2.], [2., 2.], [0., 2.]];
        // three-point chains: top (0,0)-(2,0)-(4,0), bottom (4,2)-(2,2)-(0,2)
        assert_eq!(central_point(&poly), [2.0, 1.0]);
    }

    fn curved(seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(3..8);
        let r = rng.random_range(40.0..120.0);
        let th0 = rng.random_range(-1.0..1.0);
        let span = rng.random_range(0.3..1.5);
        let h = rng.random_range(5.0..20.0);
        let c = [100.0, 150.0];
        let mut top = Vec::new();
        let mut bottom = Vec::new();
        for i in 0..n {
            let t = th0 + span * i as f64 / (n - 1) as f64;
            top.push([c[0] + r * t.cos(), c[1] - r * t.sin()]);
            bottom.push([c[0] + (r - h) * t.cos(), c[1] - (r - h) * t.sin()]);
        }
        bottom.reverse();
        top.into_iter().chain(bottom).collect()
    }

    /// Dense resampling oracle: walk each chain in 10,000 equal arc steps and
    /// take the middle sample.
    fn resampled_center(poly: &[Point]) -> Point {
        let half = poly.len() / 2;
        let mid = |chain: &[Point]| {
            let n = 10_000;
            let total = chain_length(chain);
            let mut samples = Vec::with_capacity(n + 1);
            for i in 0..=n {
                samples.push(point_at_arc(chain, total * i as f64 / n as f64));
            }
            samples[n / 2]
        };
        let a = mid(&poly[..half]);
        let b = mid(&poly[half..]);
        [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]
    }

    #[test]
    fn curved_center_matches_resampling() {
        for seed in 0..50 {
            let poly = curved(seed);
            let got = central_point(&poly);
            let want = resampled_center(&poly);
            assert!(dist(got, want) < 1e-6, "seed {}: {:?} vs {:?}", seed, got, want);
        }
    }

    #[test]
    fn indicator_modes() {
        assert_eq!(indicator(&rect(), PointMode::TopLeft, 0), [10.0, 20.0]);
        assert_eq!(indicator(&rect(), PointMode::Central, 0), central_point(&rect()));
        for seed in 0..1000 {
            let p = indicator(&curved(seed % 17), PointMode::Random, seed);
            assert!(point_in_polygon(p, &curved(seed % 17)));
        }
        assert_eq!(indicator(&rect(), PointMode::Random, 5), indicator(&rect(), PointMode::Random, 5));
    }

    #[test]
    fn degenerate_polygon_falls_back() {
        let poly = vec![[5., 5.], [5., 5.], [5., 5.], [5., 5.]];
        assert_eq!(central_point(&poly), [5.0, 5.0]);
        let line = vec![[0., 0.], [0., 0.], [4., 0.], [4., 0.]];
        let before = degenerate_fallbacks();
        let c = central_point(&line);
        assert!(degenerate_fallbacks() > before);
        assert_eq!(c, [2.0, 0.0]);
    }

    #[test]
    fn distances() {
        assert_eq!(eval_distance([30., 25.], &rect(), PointMode::Central), 0.0);
        assert_eq!(eval_distance([20., 22.], &rect(), PointMode::Random), 0.0);
        assert_eq!(point_segment_distance([0., 0.], [3., 4.], [3., 8.]), 5.0);
        let seg_poly = vec![[3., 4.], [3., 8.], [3.5, 8.], [3.5, 4.]];
        assert_eq!(eval_distance([0., 0.], &seg_poly, PointMode::Random), 5.0);
        assert_eq!(eval_distance([13., 24.], &rect(), PointMode::TopLeft), 5.0);
    }

    #[test]
    fn parses_modes() {
        assert_eq!("top-left".parse::<PointMode>().unwrap(), PointMode::TopLeft);
        assert!("middle".parse::<PointMode>().is_err());
    }

    proptest! {
        #[test]
        fn central_point_is_equivariant(seed in 0u64..500, alpha in 0.1f64..5.0, tx in -100.0f64..100.0, ty in -100.0f64..100.0) {
            let poly = curved(seed);
            let moved: Vec<Point> = poly.iter().map(|p| [alpha * p[0] + tx, alpha * p[1] + ty]).collect();
            let c = central_point(&poly);
            let cm = central_point(&moved);
            prop_assert!((cm[0] - (alpha * c[0] + tx)).abs() < 1e-8);
            prop_assert!((cm[1] - (alpha * c[1] + ty)).abs() < 1e-8);
        }

        #[test]
        fn eval_distance_nonnegative(seed in 0u64..200, px in -50.0f64..300.0, py in -50.0f64..300.0) {
            let poly = curved(seed);
            for mode in [PointMode::Central, PointMode::TopLeft, PointMode::Random] {
                let d = eval_distance([px, py], &poly, mode);
                prop_assert!(d >= 0.0);
            }
            let c = central_point(&poly);
            prop_assert_eq!(eval_distance(c, &poly, PointMode::Central), 0.0);
            prop_assert_eq!(eval_distance(poly[0], &poly, PointMode::TopLeft), 0.0);
        }
    }
}
