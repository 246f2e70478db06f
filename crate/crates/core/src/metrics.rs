//! Depth error metrics, camera-wise median scaling and trajectory error.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no valid pixels to evaluate")]
    NoValidPixels,
    #[error("camera {0} has no valid pixels")]
    EmptyCamera(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// One predicted and ground-truth depth map (metric depth, not inverse).
#[derive(Clone, Copy, Debug)]
pub struct DepthPair<'a> {
    pub camera: usize,
    pub pred: &'a [f64],
    pub gt: &'a [f64],
    /// Pixels with usable ground truth; `None` means all.
    pub valid: Option<&'a [bool]>,
}

impl DepthPair<'_> {
    fn usable(&self, max_depth: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.gt.len())
            .filter(move |&i| {
                let g = self.gt[i];
                self.valid.is_none_or(|v| v[i]) && g > 0.0 && g <= max_depth && g.is_finite() && self.pred[i].is_finite()
            })
            .map(|i| (self.pred[i], self.gt[i]))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthErrors {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    /// Fraction of pixels with `max(d/d*, d*/d) < 1.25^n` for n = 1, 2, 3.
    pub delta: [f64; 3],
}

impl DepthErrors {
    fn mean(items: &[DepthErrors]) -> DepthErrors {
        let n = items.len() as f64;
        let mut m = DepthErrors::default();
        for e in items {
            m.abs_rel += e.abs_rel / n;
            m.sq_rel += e.sq_rel / n;
            m.rmse += e.rmse / n;
            for k in 0..3 {
                m.delta[k] += e.delta[k] / n;
            }
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthEval {
    /// Mean over cameras of the per-camera means.
    pub aggregate: DepthErrors,
    pub per_camera: BTreeMap<usize, DepthErrors>,
    pub n_frames: usize,
}

/// Errors of one frame, or `None` if it has no usable pixel.
pub fn frame_errors(pair: &DepthPair<'_>, max_depth: f64) -> Option<DepthErrors> {
    let mut n = 0usize;
    let mut e = DepthErrors::default();
    let mut sq = 0.0;
    for (p, g) in pair.usable(max_depth) {
        n += 1;
        let diff = p - g;
        e.abs_rel += diff.abs() / g;
        e.sq_rel += diff * diff / g;
        sq += diff * diff;
        let ratio = (p / g).max(g / p);
        for (k, d) in e.delta.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *d += 1.0;
            }
        }
    }
    if n == 0 {
        return None;
    }
    let nf = n as f64;
    e.abs_rel /= nf;
    e.sq_rel /= nf;
    e.rmse = (sq / nf).sqrt();
    for d in e.delta.iter_mut() {
        *d /= nf;
    }
    Some(e)
}

/// Per-frame errors averaged per camera, then across cameras. Frames with
/// no usable pixel are skipped.
pub fn depth_metrics(frames: &[DepthPair<'_>], max_depth: f64) -> Result<DepthEval, MetricsError> {
    let mut by_cam: BTreeMap<usize, Vec<DepthErrors>> = BTreeMap::new();
    for f in frames {
        if f.pred.len() != f.gt.len() {
            return Err(MetricsError::LengthMismatch(f.pred.len(), f.gt.len()));
        }
        if let Some(e) = frame_errors(f, max_depth) {
            by_cam.entry(f.camera).or_default().push(e);
        }
    }
    if by_cam.is_empty() {
        return Err(MetricsError::NoValidPixels);
    }
    let n_frames = by_cam.values().map(Vec::len).sum();
    let per_camera: BTreeMap<usize, DepthErrors> = by_cam.iter().map(|(c, v)| (*c, DepthErrors::mean(v))).collect();
    let aggregate = DepthErrors::mean(&per_camera.values().copied().collect::<Vec<_>>());
    Ok(DepthEval { aggregate, per_camera, n_frames })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `(1/C) sum_c median(gt_c) / median(pred_c)`, pooling all frames of a
/// camera. Cameras are taken from the frames' `camera` field.
pub fn median_scale(frames: &[DepthPair<'_>], max_depth: f64) -> Result<f64, MetricsError> {
    let mut by_cam: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for f in frames {
        let entry = by_cam.entry(f.camera).or_default();
        for (p, g) in f.usable(max_depth) {
            entry.0.push(p);
            entry.1.push(g);
        }
    }
    if by_cam.is_empty() {
        return Err(MetricsError::NoValidPixels);
    }
    let mut total = 0.0;
    for (c, (mut p, mut g)) in by_cam.iter().map(|(c, v)| (*c, v.clone())) {
        if p.is_empty() {
            return Err(MetricsError::EmptyCamera(c));
        }
        total += median(&mut g) / median(&mut p);
    }
    Ok(total / by_cam.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AteOptions {
    /// Rigidly align the predicted positions to ground truth first.
    pub umeyama: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajEval {
    pub ate: f64,
    pub ate_scaled: f64,
    pub scale: f64,
}

/// Rotation and translation minimizing `sum |R a_i + t - b_i|^2`.
pub fn umeyama_rigid(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = a.len() as f64;
    let ma = a.iter().sum::<Vector3<f64>>() / n;
    let mb = b.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (x, y) in a.iter().zip(b) {
        cov += (y - mb) * (x - ma).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    (r, mb - r * ma)
}

/// RMSE of the translational part of `Q_i^-1 S P_i`. With `S = s I` this is
/// `|s t_P - t_Q|`, and the least-squares scale is
/// `s = sum t_P . t_Q / sum |t_P|^2`.
pub fn ate(pred: &[Pose], gt: &[Pose], opts: &AteOptions) -> Result<TrajEval, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::LengthMismatch(0, 0));
    }
    let mut tp: Vec<Vector3<f64>> = pred.iter().map(|p| p.translation).collect();
    let tq: Vec<Vector3<f64>> = gt.iter().map(|p| p.translation).collect();
    if opts.umeyama {
        let (r, t) = umeyama_rigid(&tp, &tq);
        tp = tp.iter().map(|x| r * x + t).collect();
    }
    let rmse = |s: f64| (tp.iter().zip(&tq).map(|(p, q)| (s * p - q).norm_squared()).sum::<f64>() / tp.len() as f64).sqrt();
    let den: f64 = tp.iter().map(|p| p.norm_squared()).sum();
    let scale = if den > 0.0 { tp.iter().zip(&tq).map(|(p, q)| p.dot(q)).sum::<f64>() / den } else { 1.0 };
    Ok(TrajEval { ate: rmse(1.0), ate_scaled: rmse(scale), scale })
}

/// `key: value` lines for a depth and trajectory evaluation.
pub fn format_report(depth: Option<&DepthEval>, traj: Option<&TrajEval>, depth_scale: Option<f64>) -> String {
    let mut out = String::new();
    let mut errors = |prefix: &str, e: &DepthErrors| {
        let _ = writeln!(out, "{prefix}abs_rel: {:.6e}", e.abs_rel);
        let _ = writeln!(out, "{prefix}sq_rel: {:.6e}", e.sq_rel);
        let _ = writeln!(out, "{prefix}rmse: {:.6e}", e.rmse);
        for (k, d) in e.delta.iter().enumerate() {
            let _ = writeln!(out, "{prefix}delta_{}: {:.6}", k + 1, d);
        }
    };
    if let Some(d) = depth {
        errors("depth.", &d.aggregate);
        for (c, e) in &d.per_camera {
            errors(&format!("depth.cam{c}."), e);
        }
    }
    if let Some(s) = depth_scale {
        let _ = writeln!(out, "depth.median_scale: {s:.6e}");
    }
    if let Some(t) = traj {
        let _ = writeln!(out, "traj.ate: {:.6e}", t.ate);
        let _ = writeln!(out, "traj.ate_scaled: {:.6e}", t.ate_scaled);
        let _ = writeln!(out, "traj.scale: {:.6e}", t.scale);
    }
    out
}
