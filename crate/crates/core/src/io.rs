//! File formats: binary grids and masks, TOML rigs, TUM trajectories and
//! scene bundles.
//!
//! A binary grid is four little-endian `u32` words `magic, H, W, D` followed
//! by `H*W*D` little-endian `f32` values in row-major order with the channel
//! innermost. Masks use the same header with a different magic and one byte
//! per pixel (0 = masked).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covis::{parse_dump, Edge, FrameId};
use crate::dba::InverseDepthField;
use crate::flow::Mask;
use crate::geometry::{Camera, Intrinsics, Pose, Rig};
use crate::simulator::{DepthSpec, NoiseSpec, OracleEdge, RigSpec, Scene, TrajectorySpec};

pub const GRID_MAGIC: u32 = u32::from_le_bytes(*b"MCGF");
pub const MASK_MAGIC: u32 = u32::from_le_bytes(*b"MCGM");
pub const BUNDLE_FORMAT: &str = "mcdba-scene";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    /// Malformed or inconsistent content.
    #[error("{path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
}

impl IoError {
    pub fn is_validation(&self) -> bool {
        matches!(self, IoError::Invalid { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

fn invalid(path: &Path, reason: impl Into<String>) -> IoError {
    IoError::Invalid { path: path.to_path_buf(), reason: reason.into() }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(io_err(path))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_text(path: &Path) -> Result<String, IoError> {
    String::from_utf8(read_file(path)?).map_err(|_| invalid(path, "not valid UTF-8"))
}

/// Dense `H x W x D` grid of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub values: Vec<f64>,
}

fn header(magic: u32, h: usize, w: usize, d: usize) -> Vec<u8> {
    [magic, h as u32, w as u32, d as u32].iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn parse_header(path: &Path, bytes: &[u8], magic: u32) -> Result<(usize, usize, usize), IoError> {
    if bytes.len() < 16 {
        return Err(invalid(path, "truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != magic {
        return Err(invalid(path, format!("bad magic {:#010x}", word(0))));
    }
    Ok((word(1) as usize, word(2) as usize, word(3) as usize))
}

pub fn encode_grid(g: &Grid) -> Vec<u8> {
    let mut out = header(GRID_MAGIC, g.height, g.width, g.depth);
    out.reserve(4 * g.values.len());
    for v in &g.values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_grid(path: &Path, bytes: &[u8]) -> Result<Grid, IoError> {
    let (h, w, d) = parse_header(path, bytes, GRID_MAGIC)?;
    let n = h * w * d;
    if bytes.len() != 16 + 4 * n {
        return Err(invalid(path, format!("expected {} bytes of data, found {}", 4 * n, bytes.len() - 16)));
    }
    let values = bytes[16..].chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect();
    Ok(Grid { height: h, width: w, depth: d, values })
}

pub fn write_grid(path: &Path, g: &Grid) -> Result<(), IoError> {
    write_file(path, &encode_grid(g))
}

pub fn read_grid(path: &Path) -> Result<Grid, IoError> {
    decode_grid(path, &read_file(path)?)
}

pub fn write_mask(path: &Path, m: &Mask) -> Result<(), IoError> {
    let mut out = header(MASK_MAGIC, m.height, m.width, 1);
    out.extend(m.values.iter().map(|&v| if v { 255u8 } else { 0 }));
    write_file(path, &out)
}

pub fn read_mask(path: &Path) -> Result<Mask, IoError> {
    let bytes = read_file(path)?;
    let (h, w, d) = parse_header(path, &bytes, MASK_MAGIC)?;
    if d != 1 || bytes.len() != 16 + h * w {
        return Err(invalid(path, "mask must hold one byte per pixel"));
    }
    Ok(Mask { width: w, height: h, values: bytes[16..].iter().map(|&b| b != 0).collect() })
}

pub fn depth_to_grid(d: &InverseDepthField) -> Grid {
    Grid { height: d.height, width: d.width, depth: 1, values: d.values.clone() }
}

pub fn grid_to_depth(path: &Path, g: Grid) -> Result<InverseDepthField, IoError> {
    if g.depth != 1 {
        return Err(invalid(path, "depth grid must have one channel"));
    }
    Ok(InverseDepthField::new(g.width, g.height, g.values))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    /// Camera-to-rig rotation as `[qx, qy, qz, qw]`.
    rotation: [f64; 4],
    translation: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigRecord {
    reference_camera: usize,
    cameras: Vec<CameraRecord>,
}

fn quat_from_xyzw(q: [f64; 4]) -> UnitQuaternion<f64> {
    UnitQuaternion::new_unchecked(Quaternion::new(q[3], q[0], q[1], q[2]))
}

fn quat_to_xyzw(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.i, q.j, q.k, q.w]
}

pub fn rig_to_toml(rig: &Rig) -> String {
    let rec = RigRecord {
        reference_camera: rig.reference_camera,
        cameras: rig
            .cameras
            .iter()
            .map(|c| {
                let i = c.intrinsics;
                let t = c.extrinsic.translation;
                CameraRecord {
                    fx: i.fx,
                    fy: i.fy,
                    cx: i.cx,
                    cy: i.cy,
                    width: i.width,
                    height: i.height,
                    rotation: quat_to_xyzw(&c.extrinsic.rotation),
                    translation: [t.x, t.y, t.z],
                }
            })
            .collect(),
    };
    toml::to_string(&rec).expect("rig serializes")
}

fn check_unit(path: &Path, q: [f64; 4]) -> Result<UnitQuaternion<f64>, IoError> {
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
        return Err(invalid(path, format!("quaternion norm {n} is not 1")));
    }
    Ok(quat_from_xyzw(q))
}

pub fn rig_from_toml(path: &Path, text: &str) -> Result<Rig, IoError> {
    let rec: RigRecord = toml::from_str(text).map_err(|e| invalid(path, e.to_string()))?;
    let cameras = rec
        .cameras
        .iter()
        .map(|c| {
            let intrinsics = Intrinsics::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height).map_err(|e| invalid(path, e.to_string()))?;
            let rotation = check_unit(path, c.rotation)?;
            let t = c.translation;
            Ok(Camera { intrinsics, extrinsic: Pose::new(rotation, Vector3::new(t[0], t[1], t[2])) })
        })
        .collect::<Result<Vec<_>, IoError>>()?;
    Rig::new(cameras, rec.reference_camera).map_err(|e| invalid(path, e.to_string()))
}

/// One `t tx ty tz qx qy qz qw` line per pose.
pub fn format_tum(poses: &[(usize, Pose)]) -> String {
    let mut out = String::new();
    for (t, p) in poses {
        let q = quat_to_xyzw(&p.rotation);
        let v = p.translation;
        out.push_str(&format!("{t} {} {} {} {} {} {} {}\n", v.x, v.y, v.z, q[0], q[1], q[2], q[3]));
    }
    out
}

pub fn parse_tum(path: &Path, text: &str) -> Result<Vec<(usize, Pose)>, IoError> {
    let mut out: Vec<(usize, Pose)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(invalid(path, format!("line {}: expected 8 fields, found {}", n + 1, fields.len())));
        }
        let t: usize = fields[0].parse().map_err(|_| invalid(path, format!("line {}: bad timestep {:?}", n + 1, fields[0])))?;
        let mut v = [0.0; 7];
        for (k, f) in fields[1..].iter().enumerate() {
            v[k] = f.parse().map_err(|_| invalid(path, format!("line {}: bad number {f:?}", n + 1)))?;
        }
        if out.last().is_some_and(|(prev, _)| *prev >= t) {
            return Err(invalid(path, format!("line {}: timesteps must increase", n + 1)));
        }
        let rotation = check_unit(path, [v[3], v[4], v[5], v[6]])?;
        out.push((t, Pose::new(rotation, Vector3::new(v[0], v[1], v[2]))));
    }
    Ok(out)
}

pub fn write_tum(path: &Path, poses: &[(usize, Pose)]) -> Result<(), IoError> {
    write_file(path, format_tum(poses).as_bytes())
}

pub fn read_tum(path: &Path) -> Result<Vec<(usize, Pose)>, IoError> {
    parse_tum(path, &read_text(path)?)
}

/// One JSON object per line.
pub fn format_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Everything needed to regenerate or re-check a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub n_steps: usize,
    pub n_cameras: usize,
    pub width: usize,
    pub height: usize,
    pub n_edges: usize,
    pub rig_file: String,
    pub trajectory_file: String,
    pub depth_dir: String,
    pub edges_file: String,
    pub targets_dir: String,
    pub rig: RigSpec,
    pub trajectory: TrajectorySpec,
    pub depth: DepthSpec,
    pub noise: NoiseSpec,
}

/// Loaded bundle: the scene plus the stored edge targets.
#[derive(Clone, Debug)]
pub struct Bundle {
    pub manifest: BundleManifest,
    pub scene: Scene,
    pub edges: Vec<Edge>,
    /// Per edge: targets and confidences as `[tx, ty, wx, wy]` per pixel.
    pub targets: BTreeMap<Edge, Grid>,
}

pub fn depth_file_name(f: FrameId) -> String {
    format!("{:05}_{}.bin", f.t, f.c)
}

pub fn target_file_name(e: &Edge) -> String {
    format!("{:05}_{}_{:05}_{}.bin", e.from.t, e.from.c, e.to.t, e.to.c)
}

pub fn oracle_to_grid(o: &OracleEdge, width: usize, height: usize) -> Grid {
    let values = o.targets.iter().zip(&o.confidence.values).flat_map(|(t, w)| [t[0], t[1], w[0], w[1]]).collect();
    Grid { height, width, depth: 4, values }
}

pub fn save_bundle(dir: &Path, manifest: &BundleManifest, scene: &Scene, targets: &BTreeMap<Edge, OracleEdge>) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_file(&dir.join("manifest.toml"), toml::to_string(manifest).expect("manifest serializes").as_bytes())?;
    write_file(&dir.join(&manifest.rig_file), rig_to_toml(&scene.rig).as_bytes())?;
    let traj: Vec<(usize, Pose)> = scene.trajectory.iter().copied().enumerate().collect();
    write_tum(&dir.join(&manifest.trajectory_file), &traj)?;
    for (f, d) in &scene.depths {
        write_grid(&dir.join(&manifest.depth_dir).join(depth_file_name(*f)), &depth_to_grid(d))?;
    }
    let mut edge_list = String::new();
    for (e, o) in targets {
        edge_list.push_str(&e.dump_line());
        edge_list.push('\n');
        write_grid(&dir.join(&manifest.targets_dir).join(target_file_name(e)), &oracle_to_grid(o, manifest.width, manifest.height))?;
    }
    write_file(&dir.join(&manifest.edges_file), edge_list.as_bytes())
}

fn relative(dir: &Path, manifest_path: &Path, name: &str) -> Result<PathBuf, IoError> {
    let p = Path::new(name);
    if name.is_empty() || p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(invalid(manifest_path, format!("path {name:?} must be relative to the bundle")));
    }
    Ok(dir.join(p))
}

pub fn read_manifest(dir: &Path) -> Result<BundleManifest, IoError> {
    let path = dir.join("manifest.toml");
    let m: BundleManifest = toml::from_str(&read_text(&path)?).map_err(|e| invalid(&path, e.to_string()))?;
    if m.format != BUNDLE_FORMAT || m.version != BUNDLE_VERSION {
        return Err(invalid(&path, format!("unsupported bundle {} v{}", m.format, m.version)));
    }
    Ok(m)
}

pub fn load_bundle(dir: &Path) -> Result<Bundle, IoError> {
    let manifest = read_manifest(dir)?;
    let mpath = dir.join("manifest.toml");
    let rig_path = relative(dir, &mpath, &manifest.rig_file)?;
    let rig = rig_from_toml(&rig_path, &read_text(&rig_path)?)?;
    if rig.len() != manifest.n_cameras {
        return Err(invalid(&rig_path, format!("{} cameras, manifest says {}", rig.len(), manifest.n_cameras)));
    }
    let traj_path = relative(dir, &mpath, &manifest.trajectory_file)?;
    let traj = read_tum(&traj_path)?;
    if traj.len() != manifest.n_steps || traj.iter().enumerate().any(|(k, (t, _))| *t != k) {
        return Err(invalid(&traj_path, format!("expected timesteps 0..{}", manifest.n_steps)));
    }
    let depth_dir = relative(dir, &mpath, &manifest.depth_dir)?;
    let mut depths = BTreeMap::new();
    for t in 0..manifest.n_steps {
        for c in 0..manifest.n_cameras {
            let f = FrameId::new(t, c);
            let path = depth_dir.join(depth_file_name(f));
            let g = read_grid(&path)?;
            if (g.height, g.width) != (manifest.height, manifest.width) {
                return Err(invalid(&path, "depth grid size differs from the manifest"));
            }
            depths.insert(f, grid_to_depth(&path, g)?);
        }
    }
    let edges_path = relative(dir, &mpath, &manifest.edges_file)?;
    let edges = parse_dump(&read_text(&edges_path)?).map_err(|e| invalid(&edges_path, e.to_string()))?;
    if edges.len() != manifest.n_edges {
        return Err(invalid(&edges_path, format!("{} edges, manifest says {}", edges.len(), manifest.n_edges)));
    }
    let targets_dir = relative(dir, &mpath, &manifest.targets_dir)?;
    let mut targets = BTreeMap::new();
    for e in &edges {
        let path = targets_dir.join(target_file_name(e));
        let g = read_grid(&path)?;
        if (g.height, g.width, g.depth) != (manifest.height, manifest.width, 4) {
            return Err(invalid(&path, "target grid shape differs from the manifest"));
        }
        targets.insert(*e, g);
    }
    let scene = Scene { rig, trajectory: traj.into_iter().map(|(_, p)| p).collect(), depths };
    Ok(Bundle { manifest, scene, edges, targets })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid { height: 2, width: 3, depth: 2, values: (0..12).map(|i| i as f64 * 0.25 - 1.0).collect() };
        let path = dir.path().join("g.bin");
        write_grid(&path, &g).unwrap();
        let bytes = read_file(&path).unwrap();
        assert_eq!(&bytes[..4], b"MCGF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(read_grid(&path).unwrap(), g);
        assert!(decode_grid(&path, &bytes[..bytes.len() - 1]).unwrap_err().is_validation());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_grid(&path, &bad).unwrap_err().is_validation());
        assert!(!read_grid(&dir.path().join("missing.bin")).unwrap_err().is_validation());
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mask { width: 3, height: 2, values: vec![true, false, true, true, false, false] };
        let path = dir.path().join("m.bin");
        write_mask(&path, &m).unwrap();
        assert_eq!(read_mask(&path).unwrap(), m);
        assert!(read_grid(&path).is_err());
    }

    #[test]
    fn rig_and_tum_round_trip_exactly() {
        let rig = crate::simulator::make_rig(&RigSpec::default()).unwrap();
        let p = Path::new("rig.toml");
        assert_eq!(rig_from_toml(p, &rig_to_toml(&rig)).unwrap(), rig);
        let traj = crate::simulator::make_trajectory(&TrajectorySpec::default()).unwrap();
        let poses: Vec<(usize, Pose)> = traj.into_iter().enumerate().collect();
        assert_eq!(parse_tum(p, &format_tum(&poses)).unwrap(), poses);
        assert!(parse_tum(p, "0 1 2 3 0 0 0\n").unwrap_err().is_validation());
        assert!(parse_tum(p, "0 1 2 3 0 0 0 2\n").unwrap_err().is_validation());
        assert!(parse_tum(p, "1 0 0 0 0 0 0 1\n0 0 0 0 0 0 0 1\n").is_err());
        assert!(rig_from_toml(p, "reference_camera = 0\ncameras = []\nextra = 1\n").is_err());
    }
}
