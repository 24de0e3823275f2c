//! Triangle meshes, per-triangle local frames and mesh-bound Gaussian kernels.
//!
//! Every kernel lives in the local frame `(T, R, k)` of the triangle it is
//! bound to. Posing the mesh moves the frame, and the kernel follows:
//!
//! ```text
//! r' = R r          (orientation)
//! μ' = k R μ + T    (position)
//! s' = k s          (scale)
//! ```
//!
//! The frame convention is fixed here: `R = [e1, n × e1, n]` where `e1` is the
//! normalized first edge and `n` the unit normal of the counter-clockwise
//! triangle. Binding inverts exactly the same frame, so any right-handed
//! convention round-trips.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::par;

pub type Vec3 = Vector3<f64>;

/// Triangles with `|cross| / 2` at or below this are rejected.
pub const EPSILON_AREA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    /// Canonical-pose vertex positions.
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    /// UV coordinates per triangle corner, in `[0, 1]²`.
    pub uv_corners: Vec<[[f64; 2]; 3]>,
    /// 0 is non-makeup skin; anything else names a region.
    pub region_labels: Vec<u32>,
}

impl TriangleMesh {
    pub fn new(
        vertices: Vec<Vec3>,
        triangles: Vec<[u32; 3]>,
        uv_corners: Vec<[[f64; 2]; 3]>,
        region_labels: Vec<u32>,
    ) -> Result<Self> {
        let mesh = Self {
            vertices,
            triangles,
            uv_corners,
            region_labels,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn empty() -> Self {
        Self {
            vertices: Vec::new(),
            triangles: Vec::new(),
            uv_corners: Vec::new(),
            region_labels: Vec::new(),
        }
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn validate(&self) -> Result<()> {
        let nt = self.triangles.len();
        if self.uv_corners.len() != nt || self.region_labels.len() != nt {
            return Err(Error::InvalidMesh(format!(
                "{} triangles but {} uv corner triples and {} labels",
                nt,
                self.uv_corners.len(),
                self.region_labels.len()
            )));
        }
        let nv = self.vertices.len();
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&i| i as usize >= nv) {
                return Err(Error::InvalidMesh(format!(
                    "triangle {t} references a vertex outside 0..{nv}"
                )));
            }
        }
        for (t, corners) in self.uv_corners.iter().enumerate() {
            let ok = corners
                .iter()
                .flatten()
                .all(|c| c.is_finite() && (0.0..=1.0).contains(c));
            if !ok {
                return Err(Error::InvalidMesh(format!("triangle {t} has UVs outside [0,1]")));
            }
        }
        if self.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh("non-finite vertex".into()));
        }
        triangle_frames(self, &self.vertices)?;
        Ok(())
    }

    /// Corner positions of triangle `t` under the given vertex array.
    #[inline]
    pub fn corners(&self, t: usize, positions: &[Vec3]) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [
            positions[a as usize],
            positions[b as usize],
            positions[c as usize],
        ]
    }

    pub fn centroids(&self, positions: &[Vec3]) -> Vec<Vec3> {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.corners(t, positions);
                (a + b + c) / 3.0
            })
            .collect()
    }
}

/// One expression of the mesh, given as a full vertex array.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshPose {
    pub pose_id: String,
    pub vertex_positions: Vec<Vec3>,
}

impl MeshPose {
    pub fn canonical(mesh: &TriangleMesh, pose_id: impl Into<String>) -> Self {
        Self {
            pose_id: pose_id.into(),
            vertex_positions: mesh.vertices.clone(),
        }
    }

    pub fn validate(&self, mesh: &TriangleMesh) -> Result<()> {
        if self.vertex_positions.len() != mesh.vertices.len() {
            return Err(Error::MismatchedInputs(format!(
                "pose `{}` has {} vertices, mesh has {}",
                self.pose_id,
                self.vertex_positions.len(),
                mesh.vertices.len()
            )));
        }
        triangle_frames(mesh, &self.vertex_positions).map(|_| ())
    }

    /// Applies `x -> q x + t` to every vertex.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vec3) -> Self {
        Self {
            pose_id: self.pose_id.clone(),
            vertex_positions: self
                .vertex_positions
                .iter()
                .map(|v| rotation * v + translation)
                .collect(),
        }
    }
}

/// Translation, orientation and scale of one posed triangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleFrame {
    pub translation: Vec3,
    pub rotation: Matrix3<f64>,
    pub scale: f64,
}

impl TriangleFrame {
    pub fn from_vertices(v1: &Vec3, v2: &Vec3, v3: &Vec3) -> Result<Self> {
        Self::from_vertices_indexed(v1, v2, v3, 0)
    }

    fn from_vertices_indexed(v1: &Vec3, v2: &Vec3, v3: &Vec3, triangle: usize) -> Result<Self> {
        let edge = v2 - v1;
        let cross = edge.cross(&(v3 - v1));
        let area = 0.5 * cross.norm();
        if !(area > EPSILON_AREA) {
            return Err(Error::DegenerateTriangle { triangle, area });
        }
        let edge_len = edge.norm();
        let e1 = edge / edge_len;
        let n = cross / cross.norm();
        let e2 = n.cross(&e1);
        // distance from v3 to the line through v1, v2
        let height = 2.0 * area / edge_len;
        Ok(Self {
            translation: (v1 + v2 + v3) / 3.0,
            rotation: Matrix3::from_columns(&[e1, e2, n]),
            scale: 0.5 * (edge_len + height),
        })
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    pub fn to_world_position(&self, local: &Vec3) -> Vec3 {
        self.scale * (self.rotation * local) + self.translation
    }

    pub fn to_local_position(&self, world: &Vec3) -> Vec3 {
        self.rotation.transpose() * (world - self.translation) / self.scale
    }
}

/// Frames for every triangle of `mesh` with vertices at `positions`.
pub fn triangle_frames(mesh: &TriangleMesh, positions: &[Vec3]) -> Result<Vec<TriangleFrame>> {
    if positions.len() != mesh.vertices.len() {
        return Err(Error::MismatchedInputs(format!(
            "{} positions for {} vertices",
            positions.len(),
            mesh.vertices.len()
        )));
    }
    let frames = par::map_range(mesh.triangles.len(), |t| {
        let [a, b, c] = mesh.corners(t, positions);
        TriangleFrame::from_vertices_indexed(&a, &b, &c, t)
    });
    frames.into_iter().collect()
}

/// A Gaussian expressed in its bound triangle's local frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    pub mu_local: Vec3,
    pub q_local: UnitQuaternion<f64>,
    pub s_local: Vec3,
    /// Degree-0 RGB in `[0, 1]`.
    pub color: [f64; 3],
    pub opacity_logit: f64,
}

impl GaussianKernel {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }
}

/// A Gaussian in world space, as produced by posing or consumed by binding.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldGaussian {
    pub position: Vec3,
    pub rotation: UnitQuaternion<f64>,
    pub scale: Vec3,
    pub color: [f64; 3],
    pub opacity_logit: f64,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AvatarModel {
    pub mesh: TriangleMesh,
    pub kernels: Vec<GaussianKernel>,
    /// Triangle index per kernel.
    pub binding: Vec<u32>,
}

impl AvatarModel {
    pub fn new(mesh: TriangleMesh, kernels: Vec<GaussianKernel>, binding: Vec<u32>) -> Result<Self> {
        let model = Self {
            mesh,
            kernels,
            binding,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.binding.len() != self.kernels.len() {
            return Err(Error::InvalidModel(format!(
                "{} kernels but {} bindings",
                self.kernels.len(),
                self.binding.len()
            )));
        }
        let nt = self.mesh.num_triangles() as u32;
        if let Some(k) = self.binding.iter().position(|&t| t >= nt) {
            return Err(Error::InvalidModel(format!("kernel {k} bound to a missing triangle")));
        }
        for (i, k) in self.kernels.iter().enumerate() {
            if !k.s_local.iter().all(|&s| s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidModel(format!("kernel {i} has a non-positive scale")));
            }
            if (k.q_local.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidModel(format!("kernel {i} quaternion is not unit")));
            }
        }
        Ok(())
    }

    /// Binds world-space Gaussians to the nearest triangle (by centroid) of the
    /// canonical mesh and rewrites them into that triangle's local frame.
    pub fn bind(mesh: TriangleMesh, world: &[WorldGaussian]) -> Result<Self> {
        let positions: Vec<Vec3> = world.iter().map(|g| g.position).collect();
        let binding = bind_indices(&mesh, &positions)?;
        let frames = triangle_frames(&mesh, &mesh.vertices)?;
        let kernels = world
            .iter()
            .zip(&binding)
            .map(|(g, &t)| {
                let frame = &frames[t as usize];
                GaussianKernel {
                    mu_local: frame.to_local_position(&g.position),
                    q_local: frame.quaternion().inverse() * g.rotation,
                    s_local: g.scale / frame.scale,
                    color: g.color,
                    opacity_logit: g.opacity_logit,
                }
            })
            .collect();
        Ok(Self {
            mesh,
            kernels,
            binding,
        })
    }

    /// World-space Gaussians under `pose`.
    pub fn pose(&self, pose: &MeshPose) -> Result<Vec<WorldGaussian>> {
        let frames = triangle_frames(&self.mesh, &pose.vertex_positions)?;
        let quats: Vec<UnitQuaternion<f64>> = frames.iter().map(TriangleFrame::quaternion).collect();
        Ok(par::map_range(self.kernels.len(), |i| {
            let k = &self.kernels[i];
            let t = self.binding[i] as usize;
            let frame = &frames[t];
            WorldGaussian {
                position: frame.to_world_position(&k.mu_local),
                rotation: quats[t] * k.q_local,
                scale: k.s_local * frame.scale,
                color: k.color,
                opacity_logit: k.opacity_logit,
            }
        }))
    }

    /// Geometry-only fingerprint: every local position, rotation and scale.
    pub fn geometry_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.kernels.len() * 10);
        for k in &self.kernels {
            out.extend(k.mu_local.iter());
            out.extend(k.q_local.coords.iter());
            out.extend(k.s_local.iter());
        }
        out
    }
}

/// Index of the triangle whose centroid is nearest to each position; ties go
/// to the lowest triangle index.
pub fn bind_indices(mesh: &TriangleMesh, positions: &[Vec3]) -> Result<Vec<u32>> {
    if mesh.triangles.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let centroids = mesh.centroids(&mesh.vertices);
    Ok(par::map_slice(positions, |p| nearest_centroid(&centroids, p) as u32))
}

fn nearest_centroid(centroids: &[Vec3], p: &Vec3) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (t, c) in centroids.iter().enumerate() {
        let d = (c - p).norm_squared();
        if d < best_d {
            best_d = d;
            best = t;
        }
    }
    best
}
