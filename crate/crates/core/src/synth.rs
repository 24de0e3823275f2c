//! Procedural test head: a UV-unwrapped ellipsoid with a nose, labelled
//! makeup regions, a handful of expressions, camera rings and Gaussian
//! kernels seeded on the surface.
//!
//! The head faces +z with +y up. UV is the longitude/latitude chart:
//! `u` runs from the back seam around through the face, `v` from the crown
//! (0) to the chin pole (1).

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Rotation3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::avatar::{bind_indices, logit, triangle_frames, AvatarModel, MeshPose, TriangleMesh, Vec3, WorldGaussian};
use crate::error::Result;
use crate::guidance::{MaskSpec, ProceduralMakeupSpec, RegionOverlay};
use crate::render::Camera;

pub const SKIN: u32 = 0;
pub const LIPS: u32 = 1;
pub const EYES: u32 = 2;
pub const CHEEKS: u32 = 3;
pub const HAIR: u32 = 4;

pub const POSE_IDS: [&str; 5] = ["neutral", "jaw_open", "smile", "turn", "brow_raise"];
pub const CANONICAL_POSE: &str = "neutral";

const RADII: [f64; 3] = [0.85, 1.05, 0.95];
/// Grid warps that concentrate triangles on the face.
const LON_WARP: f64 = 0.7;
const LAT_WARP: f64 = 0.6;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_lon: usize,
    pub n_lat: usize,
    /// Kernels per triangle: one at the centroid plus jittered extras.
    pub density: usize,
    pub seed: u64,
    /// Camera image size (square).
    pub resolution: usize,
    pub ring_views: usize,
    pub camera_distance: f64,
    /// Focal length as a multiple of the image size.
    pub focal_factor: f64,
    /// Initial kernel opacity.
    pub opacity: f64,
    /// In-plane kernel scale relative to the triangle size.
    pub footprint: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_lon: 40,
            n_lat: 28,
            density: 5,
            seed: 7,
            resolution: 512,
            ring_views: 16,
            camera_distance: 3.5,
            focal_factor: 1.2,
            opacity: 0.88,
            footprint: 0.22,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthHead {
    pub model: AvatarModel,
    /// `POSE_IDS` order; the first is canonical.
    pub poses: Vec<MeshPose>,
    /// Bake ring at elevation 0 over azimuths −90°..90°.
    pub ring_cameras: Vec<Camera>,
    /// Evaluation cameras at azimuths −45°, 0°, 45°.
    pub eval_cameras: Vec<Camera>,
}

/// Longitude/latitude of every vertex, kept for pose deformations.
struct Chart {
    params: Vec<(f64, f64)>,
}

fn surface(phi: f64, theta: f64) -> Vec3 {
    let nose = 1.0 + 0.16 * (-(phi / 0.22).powi(2) - ((theta + 0.02) / 0.28).powi(2)).exp();
    Vec3::new(
        RADII[0] * theta.cos() * phi.sin(),
        RADII[1] * theta.sin(),
        RADII[2] * theta.cos() * phi.cos(),
    ) * nose
}

fn region_of(phi: f64, theta: f64) -> u32 {
    let a = phi.abs();
    if theta > 0.55 || a > 2.0 {
        HAIR
    } else if a < 0.50 && (-0.68..=-0.38).contains(&theta) {
        LIPS
    } else if (0.12..=0.60).contains(&a) && (0.04..=0.36).contains(&theta) {
        EYES
    } else if (0.45..=0.95).contains(&a) && (-0.40..=-0.05).contains(&theta) {
        CHEEKS
    } else {
        SKIN
    }
}

pub fn region_color(label: u32) -> [f64; 3] {
    match label {
        LIPS => [0.72, 0.38, 0.40],
        EYES => [0.80, 0.64, 0.56],
        CHEEKS => [0.87, 0.66, 0.58],
        HAIR => [0.25, 0.17, 0.12],
        _ => [0.86, 0.70, 0.60],
    }
}

/// Builds the head mesh: `2 · n_lon · (n_lat − 1)` triangles.
pub fn head_mesh(n_lon: usize, n_lat: usize) -> Result<TriangleMesh> {
    head_mesh_with_chart(n_lon, n_lat).map(|(m, _)| m)
}

fn head_mesh_with_chart(n_lon: usize, n_lat: usize) -> Result<(TriangleMesh, Chart)> {
    assert!(n_lon >= 3 && n_lat >= 3, "grid too coarse");
    let lon = |j: usize| {
        let u = -PI + 2.0 * PI * j as f64 / n_lon as f64;
        u - LON_WARP * u.sin()
    };
    let lat = |i: usize| {
        let s = FRAC_PI_2 - PI * i as f64 / n_lat as f64;
        s - 0.5 * LAT_WARP * (2.0 * s).sin()
    };

    let mut params = vec![(0.0, FRAC_PI_2)];
    for i in 1..n_lat {
        for j in 0..n_lon {
            params.push((lon(j), lat(i)));
        }
    }
    params.push((0.0, -FRAC_PI_2));
    let south = params.len() as u32 - 1;
    let ring = |i: usize, j: usize| (1 + (i - 1) * n_lon + j % n_lon) as u32;
    let uv = |i: usize, j: f64| [j / n_lon as f64, i as f64 / n_lat as f64];

    let mut triangles = Vec::new();
    let mut uv_corners = Vec::new();
    let mut centers = Vec::new();
    for j in 0..n_lon {
        let jf = j as f64;
        triangles.push([ring(1, j), ring(1, j + 1), 0]);
        uv_corners.push([uv(1, jf), uv(1, jf + 1.0), uv(0, jf + 0.5)]);
        centers.push(((lon(j) + lon(j + 1)) / 2.0, lat(1) * 2.0 / 3.0 + FRAC_PI_2 / 3.0));
    }
    for i in 1..n_lat - 1 {
        for j in 0..n_lon {
            let jf = j as f64;
            let (a, b, c, d) = (ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1));
            let center = ((lon(j) + lon(j + 1)) / 2.0, (lat(i) + lat(i + 1)) / 2.0);
            triangles.push([c, d, a]);
            uv_corners.push([uv(i + 1, jf), uv(i + 1, jf + 1.0), uv(i, jf)]);
            centers.push(center);
            triangles.push([d, b, a]);
            uv_corners.push([uv(i + 1, jf + 1.0), uv(i, jf + 1.0), uv(i, jf)]);
            centers.push(center);
        }
    }
    for j in 0..n_lon {
        let jf = j as f64;
        triangles.push([south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)]);
        uv_corners.push([uv(n_lat, jf + 0.5), uv(n_lat - 1, jf + 1.0), uv(n_lat - 1, jf)]);
        centers.push(((lon(j) + lon(j + 1)) / 2.0, lat(n_lat - 1) * 2.0 / 3.0 - FRAC_PI_2 / 3.0));
    }

    let vertices = params.iter().map(|&(p, t)| surface(p, t)).collect();
    let region_labels = centers.iter().map(|&(p, t)| region_of(p, t)).collect();
    let mesh = TriangleMesh::new(vertices, triangles, uv_corners, region_labels)?;
    Ok((mesh, Chart { params }))
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn deform(id: &str, v: &Vec3, phi: f64, theta: f64) -> Vec3 {
    match id {
        "jaw_open" => {
            let w = smoothstep(-0.25, -0.6, theta) * smoothstep(-0.2, 0.3, phi.cos());
            if w == 0.0 {
                return *v;
            }
            let pivot = Vec3::new(0.0, -0.15, -0.2);
            let rot = Rotation3::from_axis_angle(&Vec3::x_axis(), 0.22 * w);
            rot * (v - pivot) + pivot
        }
        "smile" => {
            let band = (-((theta + 0.5) / 0.2).powi(2)).exp() * smoothstep(0.0, 0.6, phi.cos());
            let side = (phi.sin() / 0.5_f64.sin()).powi(2).min(1.5);
            v + Vec3::new(0.03 * phi.sin() * band, 0.06 * side * band, 0.0)
        }
        "turn" => Rotation3::from_axis_angle(&Vec3::y_axis(), 20f64.to_radians()) * v,
        "brow_raise" => {
            let w = (-((theta - 0.32) / 0.15).powi(2)).exp() * smoothstep(0.3, 0.8, phi.cos());
            v + Vec3::new(0.0, 0.05 * w, 0.0)
        }
        _ => *v,
    }
}

fn head_poses(mesh: &TriangleMesh, chart: &Chart) -> Result<Vec<MeshPose>> {
    POSE_IDS
        .iter()
        .map(|&id| {
            let pose = MeshPose {
                pose_id: id.to_string(),
                vertex_positions: mesh
                    .vertices
                    .iter()
                    .zip(&chart.params)
                    .map(|(v, &(p, t))| deform(id, v, p, t))
                    .collect(),
            };
            pose.validate(mesh)?;
            Ok(pose)
        })
        .collect()
}

/// Cameras on a horizontal circle around the head, azimuths evenly spaced
/// over `[from_deg, to_deg]`.
pub fn camera_ring(prefix: &str, views: usize, from_deg: f64, to_deg: f64, config: &SynthConfig) -> Result<Vec<Camera>> {
    (0..views)
        .map(|i| {
            let az = if views == 1 {
                (from_deg + to_deg) / 2.0
            } else {
                from_deg + (to_deg - from_deg) * i as f64 / (views - 1) as f64
            };
            Camera::orbit(
                format!("{prefix}{i:02}"),
                config.resolution,
                config.resolution,
                config.focal_factor * config.resolution as f64,
                config.camera_distance,
                az,
                0.0,
                Vec3::zeros(),
            )
        })
        .collect()
}

/// The −45°, 0°, 45° evaluation views.
pub fn eval_cameras(config: &SynthConfig) -> Result<Vec<Camera>> {
    [("eval_m45", -45.0), ("eval_000", 0.0), ("eval_p45", 45.0)]
        .into_iter()
        .map(|(id, az)| {
            Camera::orbit(
                id,
                config.resolution,
                config.resolution,
                config.focal_factor * config.resolution as f64,
                config.camera_distance,
                az,
                0.0,
                Vec3::zeros(),
            )
        })
        .collect()
}

/// Seeds `density` kernels per triangle and binds them. Extras are placed
/// at jittered points inside the triangle, pulled toward the centroid and
/// re-drawn until they bind back to their own triangle.
fn seed_kernels(mesh: &TriangleMesh, config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<WorldGaussian>, Vec<u32>)> {
    let frames = triangle_frames(mesh, &mesh.vertices)?;
    let centroids = mesh.centroids(&mesh.vertices);
    let mut world = Vec::with_capacity(mesh.num_triangles() * config.density);
    let mut source = Vec::with_capacity(world.capacity());
    for (t, frame) in frames.iter().enumerate() {
        let [a, b, c] = mesh.corners(t, &mesh.vertices);
        let base = region_color(mesh.region_labels[t]);
        for n in 0..config.density.max(1) {
            let mut p = centroids[t];
            if n > 0 {
                for _ in 0..16 {
                    let (r1, r2): (f64, f64) = (rng.random(), rng.random());
                    let s = r1.sqrt();
                    let q = a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2);
                    let cand = centroids[t] + (q - centroids[t]) * 0.6;
                    if bind_indices(mesh, std::slice::from_ref(&cand))?[0] as usize == t {
                        p = cand;
                        break;
                    }
                }
            }
            let spin = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), rng.random_range(0.0..PI));
            let k = frame.scale;
            world.push(WorldGaussian {
                position: p,
                rotation: frame.quaternion() * spin,
                scale: Vec3::new(
                    config.footprint * k * rng.random_range(0.85..1.15),
                    config.footprint * k * rng.random_range(0.85..1.15),
                    0.04 * k,
                ),
                color: base.map(|v| (v + rng.random_range(-0.01..0.01)).clamp(0.0, 1.0)),
                opacity_logit: logit(config.opacity),
            });
            source.push(t as u32);
        }
    }
    Ok((world, source))
}

pub fn synth_head(config: &SynthConfig) -> Result<SynthHead> {
    let (mesh, chart) = head_mesh_with_chart(config.n_lon, config.n_lat)?;
    let poses = head_poses(&mesh, &chart)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (world, source) = seed_kernels(&mesh, config, &mut rng)?;
    let model = AvatarModel::bind(mesh, &world)?;
    debug_assert_eq!(model.binding, source);
    Ok(SynthHead {
        model,
        poses,
        ring_cameras: camera_ring("ring", config.ring_views, -90.0, 90.0, config)?,
        eval_cameras: eval_cameras(config)?,
    })
}

/// Red lips and blue eyeshadow.
pub fn default_makeup() -> ProceduralMakeupSpec {
    ProceduralMakeupSpec::new([
        (LIPS, RegionOverlay::flat([0.78, 0.10, 0.16], 1.0)),
        (EYES, RegionOverlay::flat([0.22, 0.32, 0.80], 1.0)),
    ])
}

pub fn default_mask() -> MaskSpec {
    MaskSpec::new([LIPS, EYES])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::rasterize_mesh;

    fn small() -> SynthConfig {
        SynthConfig {
            resolution: 96,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn mesh_is_closed_outward_and_labelled() {
        let mesh = head_mesh(40, 28).unwrap();
        assert_eq!(mesh.num_triangles(), 2 * 40 * 27);
        let c = mesh.centroids(&mesh.vertices);
        for t in 0..mesh.num_triangles() {
            let [a, b, d] = mesh.corners(t, &mesh.vertices);
            assert!((b - a).cross(&(d - a)).dot(&c[t]) > 0.0, "triangle {t} faces inward");
        }
        for label in [SKIN, LIPS, EYES, CHEEKS, HAIR] {
            assert!(mesh.region_labels.contains(&label), "label {label} missing");
        }
    }

    #[test]
    fn kernels_bind_to_their_source_triangle() {
        let head = synth_head(&small()).unwrap();
        let m = &head.model;
        assert_eq!(m.kernels.len(), m.mesh.num_triangles() * 5);
        let mut rng = ChaCha8Rng::seed_from_u64(small().seed);
        let (_, source) = seed_kernels(&m.mesh, &small(), &mut rng).unwrap();
        assert_eq!(m.binding, source);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = synth_head(&small()).unwrap();
        let b = synth_head(&small()).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.poses, b.poses);
        let c = synth_head(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.model.kernels, c.model.kernels);
    }

    #[test]
    fn front_view_sees_face_regions() {
        let head = synth_head(&small()).unwrap();
        let front = &head.eval_cameras[1];
        let gb = rasterize_mesh(&head.model.mesh, &head.poses[0], front).unwrap();
        for label in [LIPS, EYES, SKIN] {
            assert!(gb.label_mask(&[label]).count() > 10, "label {label} barely visible");
        }
        // the head fills a good part of the frame but not all of it
        let cov = gb.coverage().count() as f64 / (96.0 * 96.0);
        assert!((0.2..0.8).contains(&cov), "{cov}");
    }

    #[test]
    fn expressions_move_the_expected_parts() {
        let head = synth_head(&small()).unwrap();
        let neutral = &head.poses[0];
        for pose in &head.poses[1..] {
            assert_eq!(pose.vertex_positions.len(), neutral.vertex_positions.len());
            assert!(pose.vertex_positions != neutral.vertex_positions, "{} is static", pose.pose_id);
        }
        let jaw = &head.poses[1];
        let crown = 0;
        assert_eq!(jaw.vertex_positions[crown], neutral.vertex_positions[crown]);
    }
}
