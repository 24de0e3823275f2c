use gsmakeup::avatar::sigmoid;
use gsmakeup::render::{render_f64, Camera, Splat2D};
use nalgebra::Matrix4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn exact(splats: &[Splat2D], size: usize, bg: [f64; 3]) -> Vec<[f64; 3]> {
    let mut order: Vec<&Splat2D> = splats.iter().collect();
    order.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source_index.cmp(&b.source_index)));
    let mut out = Vec::new();
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut c = [0.0; 3];
            let mut t = 1.0;
            for s in &order {
                let [a, b, d] = s.cov2d;
                let (dx, dy) = (px - s.mean2d[0], py - s.mean2d[1]);
                let alpha = s.opacity * (-0.5 * (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / (a * d - b * b)).exp();
                for k in 0..3 {
                    c[k] += t * alpha * s.color[k];
                }
                t *= 1.0 - alpha;
            }
            out.push([0, 1, 2].map(|k| c[k] + t * bg[k]));
        }
    }
    out
}

#[test]
fn five_overlapping_splats_match_exact_compositing() {
    let cam = Camera::new("c", 8, 8, 10.0, 10.0, 4.0, 4.0, Matrix4::identity()).unwrap();
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let splats: Vec<Splat2D> = (0..5)
            .map(|i| {
                let s: f64 = rng.random_range(1.0..3.0);
                Splat2D {
                    mean2d: [rng.random_range(2.0..6.0), rng.random_range(2.0..6.0)],
                    cov2d: [s * s, 0.0, s * s],
                    depth: rng.random_range(1.0..4.0),
                    color: [rng.random(), rng.random(), rng.random()],
                    opacity: sigmoid(rng.random_range(-1.0..3.0)),
                    source_index: i,
                }
            })
            .collect();
        let bg = [rng.random(), rng.random(), rng.random()];
        let got = render_f64(&splats, &cam, bg);
        for (g, w) in got.iter().zip(exact(&splats, 8, bg)) {
            for k in 0..3 {
                assert!((g[k] - w[k]).abs() < 5e-3, "seed {seed}: {} vs {}", g[k], w[k]);
            }
        }
    }
}

fn thresholded(splats: &[Splat2D], size: usize, bg: [f64; 3]) -> Vec<[f64; 3]> {
    let mut order: Vec<&Splat2D> = splats.iter().collect();
    order.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source_index.cmp(&b.source_index)));
    let mut out = Vec::new();
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut c = [0.0; 3];
            let mut t = 1.0;
            for s in &order {
                let [a, b, d] = s.cov2d;
                let (dx, dy) = (px - s.mean2d[0], py - s.mean2d[1]);
                let alpha = (s.opacity * (-0.5 * (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / (a * d - b * b)).exp()).min(0.999);
                if alpha < 1.0 / 255.0 {
                    continue;
                }
                for k in 0..3 {
                    c[k] += t * alpha * s.color[k];
                }
                t *= 1.0 - alpha;
                if t < 1e-4 {
                    break;
                }
            }
            out.push([0, 1, 2].map(|k| c[k] + t * bg[k]));
        }
    }
    out
}

#[test]
fn renderer_equals_thresholded_compositing() {
    let cam = Camera::new("c", 24, 24, 10.0, 10.0, 12.0, 12.0, Matrix4::identity()).unwrap();
    for seed in 0..40 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=30);
        let splats: Vec<Splat2D> = (0..n)
            .map(|i| {
                let (sx, sy): (f64, f64) = (rng.random_range(0.5..5.0), rng.random_range(0.5..5.0));
                let rho: f64 = rng.random_range(-0.8..0.8);
                Splat2D {
                    mean2d: [rng.random_range(-4.0..28.0), rng.random_range(-4.0..28.0)],
                    cov2d: [sx * sx, rho * sx * sy, sy * sy],
                    depth: rng.random_range(1.0..4.0),
                    color: [rng.random(), rng.random(), rng.random()],
                    opacity: sigmoid(rng.random_range(-4.0..8.0)),
                    source_index: i,
                }
            })
            .collect();
        let bg = [rng.random(), rng.random(), rng.random()];
        for (g, w) in render_f64(&splats, &cam, bg).iter().zip(thresholded(&splats, 24, bg)) {
            for k in 0..3 {
                assert!((g[k] - w[k]).abs() < 1e-12, "seed {seed}");
            }
        }
    }
}
