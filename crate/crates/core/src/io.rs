//! On-disk formats: avatars and poses (text header followed by
//! little-endian arrays), camera rigs and training logs (line-oriented text).
//!
//! Avatar layout after the header, in order: vertices `f32×3`, triangles
//! `u32×3`, uv_corners `f32×6`, region_labels `u32`, then per kernel
//! mu_local `f32×3`, q_local `f32×4` (w, x, y, z), s_local `f32×3`, color
//! `f32×3`, opacity_logit `f32`, and finally binding `u32`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Quaternion, UnitQuaternion};

use crate::avatar::{AvatarModel, GaussianKernel, MeshPose, TriangleMesh, Vec3};
use crate::error::{Error, Result};
use crate::render::Camera;
use crate::train::LogRecord;

const AVATAR_MAGIC: &str = "gsavatar";
const POSE_MAGIC: &str = "gspose";
const VERSION: u32 = 1;
const AVATAR_FIELDS: &str =
    "vertices:f32x3 triangles:u32x3 uv_corners:f32x6 region_labels:u32 mu_local:f32x3 q_local:f32x4 s_local:f32x3 color:f32x3 opacity_logit:f32 binding:u32";
const POSE_FIELDS: &str = "vertex_positions:f32x3";

struct Writer(Vec<u8>);

impl Writer {
    fn f32s(&mut self, vals: impl IntoIterator<Item = f64>) {
        for v in vals {
            self.0.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    fn u32s(&mut self, vals: impl IntoIterator<Item = u32>) {
        for v in vals {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    kind: &'static str,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take4(&mut self) -> Result<[u8; 4]> {
        let end = self.pos + 4;
        let b = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::format(self.kind, self.path, "truncated data"))?;
        self.pos = end;
        Ok([b[0], b[1], b[2], b[3]])
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take4()?) as f64)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take4()?))
    }

    fn vec3(&mut self) -> Result<Vec3> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.kind, self.path, "trailing bytes after data"));
        }
        Ok(())
    }
}

/// Splits a header terminated by an `end_header` line from the binary body.
fn split_header<'a>(bytes: &'a [u8], kind: &'static str, path: &Path) -> Result<(Vec<(String, String)>, &'a [u8])> {
    const END: &[u8] = b"end_header\n";
    let at = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::format(kind, path, "missing end_header"))?;
    let text = std::str::from_utf8(&bytes[..at]).map_err(|_| Error::format(kind, path, "header is not UTF-8"))?;
    let entries = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| match l.split_once(' ') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => (l.to_string(), String::new()),
        })
        .collect();
    Ok((entries, &bytes[at + END.len()..]))
}

fn header_value<'h>(header: &'h [(String, String)], key: &str, kind: &'static str, path: &Path) -> Result<&'h str> {
    header
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::format(kind, path, format!("header lacks `{key}`")))
}

fn header_count(header: &[(String, String)], key: &str, kind: &'static str, path: &Path) -> Result<usize> {
    header_value(header, key, kind, path)?
        .parse()
        .map_err(|_| Error::format(kind, path, format!("`{key}` is not a count")))
}

fn check_magic(header: &[(String, String)], magic: &str, kind: &'static str, path: &Path) -> Result<()> {
    if header.first().map(|(k, _)| k.as_str()) != Some(magic) {
        return Err(Error::format(kind, path, "bad magic"));
    }
    let version: u32 = header_value(header, "version", kind, path)?
        .parse()
        .map_err(|_| Error::format(kind, path, "bad version"))?;
    if version != VERSION {
        return Err(Error::format(kind, path, format!("unsupported version {version}")));
    }
    Ok(())
}

pub fn encode_avatar(model: &AvatarModel) -> Vec<u8> {
    let mesh = &model.mesh;
    let mut w = Writer(Vec::new());
    let header = format!(
        "{AVATAR_MAGIC}\nversion {VERSION}\nvertices {}\ntriangles {}\nkernels {}\nfields {AVATAR_FIELDS}\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len(),
        model.kernels.len()
    );
    w.0.extend_from_slice(header.as_bytes());
    w.f32s(mesh.vertices.iter().flat_map(|v| [v.x, v.y, v.z]));
    w.u32s(mesh.triangles.iter().flatten().copied());
    w.f32s(mesh.uv_corners.iter().flatten().flatten().copied());
    w.u32s(mesh.region_labels.iter().copied());
    for k in &model.kernels {
        w.f32s(k.mu_local.iter().copied());
        let q = k.q_local.quaternion();
        w.f32s([q.w, q.i, q.j, q.k]);
        w.f32s(k.s_local.iter().copied());
        w.f32s(k.color);
        w.f32s([k.opacity_logit]);
    }
    w.u32s(model.binding.iter().copied());
    w.0
}

pub fn decode_avatar(bytes: &[u8], path: &Path) -> Result<AvatarModel> {
    let kind = "avatar";
    let (header, body) = split_header(bytes, kind, path)?;
    check_magic(&header, AVATAR_MAGIC, kind, path)?;
    if header_value(&header, "fields", kind, path)? != AVATAR_FIELDS {
        return Err(Error::format(kind, path, "unexpected field layout"));
    }
    let nv = header_count(&header, "vertices", kind, path)?;
    let nt = header_count(&header, "triangles", kind, path)?;
    let nk = header_count(&header, "kernels", kind, path)?;
    let need = 4 * (3 * nv + 3 * nt + 6 * nt + nt + 14 * nk + nk);
    if body.len() != need {
        return Err(Error::format(kind, path, format!("expected {need} data bytes, found {}", body.len())));
    }
    let mut r = Reader {
        bytes: body,
        pos: 0,
        kind,
        path,
    };
    let vertices = (0..nv).map(|_| r.vec3()).collect::<Result<Vec<_>>>()?;
    let triangles = (0..nt)
        .map(|_| Ok([r.u32()?, r.u32()?, r.u32()?]))
        .collect::<Result<Vec<_>>>()?;
    let uv_corners = (0..nt)
        .map(|_| Ok([[r.f64()?, r.f64()?], [r.f64()?, r.f64()?], [r.f64()?, r.f64()?]]))
        .collect::<Result<Vec<_>>>()?;
    let region_labels = (0..nt).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let kernels = (0..nk)
        .map(|_| {
            let mu_local = r.vec3()?;
            let (w, x, y, z) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            Ok(GaussianKernel {
                mu_local,
                // stored values are kept verbatim so files round-trip exactly
                q_local: UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z)),
                s_local: r.vec3()?,
                color: [r.f64()?, r.f64()?, r.f64()?],
                opacity_logit: r.f64()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let binding = (0..nk).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let mesh = TriangleMesh {
        vertices,
        triangles,
        uv_corners,
        region_labels,
    };
    mesh.validate()?;
    AvatarModel::new(mesh, kernels, binding)
}

pub fn save_avatar(model: &AvatarModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_avatar(model)).map_err(|e| Error::io(path, e))
}

pub fn load_avatar(path: impl AsRef<Path>) -> Result<AvatarModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_avatar(&bytes, path)
}

pub fn encode_pose(pose: &MeshPose) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    let header = format!(
        "{POSE_MAGIC}\nversion {VERSION}\npose_id {}\nvertices {}\nfields {POSE_FIELDS}\nend_header\n",
        pose.pose_id,
        pose.vertex_positions.len()
    );
    w.0.extend_from_slice(header.as_bytes());
    w.f32s(pose.vertex_positions.iter().flat_map(|v| [v.x, v.y, v.z]));
    w.0
}

pub fn decode_pose(bytes: &[u8], path: &Path) -> Result<MeshPose> {
    let kind = "pose";
    let (header, body) = split_header(bytes, kind, path)?;
    check_magic(&header, POSE_MAGIC, kind, path)?;
    let pose_id = header_value(&header, "pose_id", kind, path)?.to_string();
    if pose_id.is_empty() || pose_id.contains(char::is_whitespace) {
        return Err(Error::format(kind, path, "pose_id must be a non-empty word"));
    }
    let n = header_count(&header, "vertices", kind, path)?;
    if body.len() != 12 * n {
        return Err(Error::format(kind, path, "vertex data length does not match count"));
    }
    let mut r = Reader {
        bytes: body,
        pos: 0,
        kind,
        path,
    };
    let vertex_positions = (0..n).map(|_| r.vec3()).collect::<Result<Vec<_>>>()?;
    Ok(MeshPose {
        pose_id,
        vertex_positions,
    })
}

pub fn save_pose(pose: &MeshPose, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pose(pose)).map_err(|e| Error::io(path, e))
}

pub fn load_pose(path: impl AsRef<Path>) -> Result<MeshPose> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pose(&bytes, path)
}

/// Writes each pose to `<dir>/<pose_id>.pose`.
pub fn save_pose_dir(poses: &[MeshPose], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    poses
        .iter()
        .map(|p| {
            let path = dir.join(format!("{}.pose", p.pose_id));
            save_pose(p, &path)?;
            Ok(path)
        })
        .collect()
}

/// Loads every `*.pose` file in `dir`, ordered by pose id.
pub fn load_pose_dir(dir: impl AsRef<Path>) -> Result<Vec<MeshPose>> {
    let dir = dir.as_ref();
    let mut poses = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "pose") {
            poses.push(load_pose(&path)?);
        }
    }
    poses.sort_by(|a, b| a.pose_id.cmp(&b.pose_id));
    Ok(poses)
}

/// One camera per line: `camera_id width height fx fy cx cy` followed by the
/// 16 row-major entries of the world-to-camera matrix.
pub fn format_camera_rig(cameras: &[Camera]) -> String {
    let mut s = String::from("# camera_id width height fx fy cx cy world_to_camera[16, row-major]\n");
    for c in cameras {
        let _ = write!(s, "{} {} {} {} {} {} {}", c.camera_id, c.width, c.height, c.fx, c.fy, c.cx, c.cy);
        for r in 0..4 {
            for col in 0..4 {
                let _ = write!(s, " {}", c.world_to_camera[(r, col)]);
            }
        }
        s.push('\n');
    }
    s
}

pub fn parse_camera_rig(text: &str, path: &Path) -> Result<Vec<Camera>> {
    let mut cams: Vec<Camera> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |r: &str| Error::format("camera rig", path, format!("line {}: {r}", lineno + 1));
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 23 {
            return Err(bad("expected 23 fields"));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        let m: Vec<f64> = tok[7..].iter().map(|s| num(s)).collect::<Result<_>>()?;
        let cam = Camera::new(
            tok[0],
            int(tok[1])?,
            int(tok[2])?,
            num(tok[3])?,
            num(tok[4])?,
            num(tok[5])?,
            num(tok[6])?,
            Matrix4::from_row_slice(&m),
        )?;
        if cams.iter().any(|c| c.camera_id == cam.camera_id) {
            return Err(bad("duplicate camera id"));
        }
        cams.push(cam);
    }
    Ok(cams)
}

pub fn save_camera_rig(cameras: &[Camera], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_camera_rig(cameras)).map_err(|e| Error::io(path, e))
}

pub fn load_camera_rig(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_camera_rig(&text, path)
}

pub const LOG_HEADER: &str = "iteration\tstage\tpose_id\tcamera_id\ttimestep\tmakeup\tres\tperceptual\ttotal";

pub fn format_log_record(r: &LogRecord) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        r.iteration,
        r.stage,
        r.pose_id,
        r.camera_id,
        r.timestep.map_or_else(|| "-".to_string(), |t| t.to_string()),
        r.loss.makeup,
        r.loss.res,
        r.loss.perceptual,
        r.loss.total
    )
}

pub fn write_training_log(records: &[LogRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(LOG_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&format_log_record(r));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::Stage;
    use crate::train::LossBreakdown;

    fn tiny_model() -> AvatarModel {
        let mesh = TriangleMesh {
            vertices: vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(1.0, 1.0, 0.5)],
            triangles: vec![[0, 1, 2], [1, 3, 2]],
            uv_corners: vec![[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]],
            region_labels: vec![0, 2],
        };
        let kernels = (0..3)
            .map(|i| GaussianKernel {
                mu_local: Vec3::new(0.1 * i as f64, -0.2, 0.03),
                q_local: UnitQuaternion::from_euler_angles(0.1 * i as f64, 0.2, -0.3),
                s_local: Vec3::new(0.2, 0.1, 0.01),
                color: [0.1, 0.5, 0.9],
                opacity_logit: -1.5 + i as f64,
            })
            .collect();
        AvatarModel::new(mesh, kernels, vec![0, 1, 1]).unwrap()
    }

    #[test]
    fn avatar_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.gsa");
        let m = tiny_model();
        save_avatar(&m, &p).unwrap();
        let back = load_avatar(&p).unwrap();
        assert_eq!(back.binding, m.binding);
        assert_eq!(back.mesh.triangles, m.mesh.triangles);
        for (a, b) in back.kernels.iter().zip(&m.kernels) {
            assert!((a.mu_local - b.mu_local).norm() < 1e-6);
            assert!((a.opacity_logit - b.opacity_logit).abs() < 1e-6);
        }
        assert_eq!(encode_avatar(&back), fs::read(&p).unwrap());
    }

    #[test]
    fn corrupt_avatars_are_rejected() {
        let p = Path::new("x");
        let bytes = encode_avatar(&tiny_model());
        assert!(decode_avatar(&bytes[..bytes.len() - 2], p).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode_avatar(&wrong, p).is_err());
        assert!(decode_avatar(b"gsavatar\nversion 1\n", p).is_err());
    }

    #[test]
    fn pose_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_model();
        let a = MeshPose::canonical(&m.mesh, "neutral");
        let b = MeshPose {
            pose_id: "smile".into(),
            vertex_positions: a.vertex_positions.iter().map(|v| v * 2.0).collect(),
        };
        save_pose_dir(&[b.clone(), a.clone()], dir.path()).unwrap();
        let back = load_pose_dir(dir.path()).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn camera_rig_round_trip_is_exact() {
        let cams = vec![
            Camera::orbit("left", 64, 48, 70.5, 3.5, -45.0, 5.0, Vec3::new(0.0, 0.1, 0.0)).unwrap(),
            Camera::orbit("front", 64, 48, 70.5, 3.5, 0.0, 0.0, Vec3::zeros()).unwrap(),
        ];
        let text = format_camera_rig(&cams);
        assert_eq!(parse_camera_rig(&text, Path::new("r")).unwrap(), cams);
        assert!(parse_camera_rig("a 1 2 3", Path::new("r")).is_err());
        let dup = format!("{text}{}", text.lines().nth(1).unwrap());
        assert!(parse_camera_rig(&dup, Path::new("r")).is_err());
    }

    #[test]
    fn log_lines() {
        let r = LogRecord {
            iteration: 3,
            stage: Stage::Refine,
            pose_id: "smile".into(),
            camera_id: "c1".into(),
            timestep: Some(120),
            loss: LossBreakdown {
                makeup: 0.5,
                res: 0.25,
                perceptual: 0.0,
                total: 7.5,
            },
        };
        assert_eq!(format_log_record(&r), "3\trefine\tsmile\tc1\t120\t0.5\t0.25\t0\t7.5");
    }
}
