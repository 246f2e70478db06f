//! Flow fields, confidences and the view-synthesis operators used for
//! self-supervision.

use nalgebra::UnitQuaternion;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dba::InverseDepthField;
use crate::geometry::{project, unproject, HomoPoint, Intrinsics, Pose};
use crate::parallel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no outgoing edges to pool")]
    EmptyEdgeList,
    #[error("no reference views")]
    NoReferences,
    #[error("confidence {0} outside [0, 1]")]
    ConfidenceRange(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Per-pixel displacement; invalid pixels carry zero flow.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub values: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, values: vec![[0.0; 2]; width * height], valid: vec![true; width * height] }
    }

    pub fn constant(width: usize, height: usize, flow: [f64; 2]) -> Self {
        Self { width, height, values: vec![flow; width * height], valid: vec![true; width * height] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Mean flow magnitude over valid pixels, 0 if none are valid.
    pub fn mean_magnitude(&self) -> f64 {
        let (sum, n) = self
            .values
            .iter()
            .zip(&self.valid)
            .filter(|(_, v)| **v)
            .fold((0.0, 0usize), |(s, n), (f, _)| (s + f[0].hypot(f[1]), n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Target coordinates `x + f` for every pixel.
    pub fn targets(&self) -> Vec<[f64; 2]> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, f)| [(i % self.width) as f64 + f[0], (i / self.width) as f64 + f[1]])
            .collect()
    }
}

/// Two-channel confidence in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceField {
    pub width: usize,
    pub height: usize,
    pub values: Vec<[f64; 2]>,
}

impl ConfidenceField {
    pub fn new(width: usize, height: usize, values: Vec<[f64; 2]>) -> Result<Self, FlowError> {
        if values.len() != width * height {
            return Err(FlowError::ShapeMismatch(format!("{} values for {width}x{height}", values.len())));
        }
        if let Some(bad) = values.iter().flatten().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(FlowError::ConfidenceRange(*bad));
        }
        Ok(Self { width, height, values })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![[value; 2]; width * height]).expect("constant confidence in range")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<bool>,
}

impl Mask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self { width, height, values: vec![value; width * height] }
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|v| **v).count()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            values: self.values.iter().zip(&other.values).map(|(a, b)| *a && *b).collect(),
        }
    }
}

/// Row-major image with interleaved channels, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, FlowError> {
        if data.len() != width * height * channels || channels == 0 {
            return Err(FlowError::ShapeMismatch(format!("{} values for {width}x{height}x{channels}", data.len())));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn at(&self, x: usize, y: usize, k: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + k]
    }

    fn same_shape(&self, other: &Image) -> Result<(), FlowError> {
        if (self.width, self.height, self.channels) != (other.width, other.height, other.channels) {
            return Err(FlowError::ShapeMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )));
        }
        Ok(())
    }
}

/// Flow induced by inverse depth `d` under the relative pose `g` (frame i to j).
pub fn induced_flow(d: &InverseDepthField, g: &Pose, intr_i: &Intrinsics, intr_j: &Intrinsics, epsilon_z: f64) -> FlowField {
    let w = d.width;
    let per_pixel = parallel::map_range(d.len(), |idx| {
        let (u, v) = ((idx % w) as f64, (idx / w) as f64);
        let x = g.transform_homo(&unproject(intr_i, u, v, d.values[idx]));
        match project(intr_j, &x, epsilon_z) {
            Ok(p) => ([p[0] - u, p[1] - v], true),
            Err(_) => ([0.0; 2], false),
        }
    });
    let (values, valid) = per_pixel.into_iter().unzip();
    FlowField { width: w, height: d.height, values, valid }
}

/// Removes the part of `f_star` explained by the extrinsic rotation between
/// the two cameras, evaluated at unit inverse depth.
pub fn rotation_compensate(
    f_star: &FlowField,
    r_ci: &UnitQuaternion<f64>,
    r_cj: &UnitQuaternion<f64>,
    intr_i: &Intrinsics,
    intr_j: &Intrinsics,
    epsilon_z: f64,
) -> FlowField {
    let rot = Pose::from_rotation(r_cj.inverse() * r_ci);
    let w = f_star.width;
    let mut out = f_star.clone();
    for idx in 0..f_star.len() {
        let (u, v) = ((idx % w) as f64, (idx / w) as f64);
        let x: HomoPoint = rot.transform_homo(&unproject(intr_i, u, v, 1.0));
        match project(intr_j, &x, epsilon_z) {
            Ok(p) if f_star.valid[idx] => {
                let f = f_star.values[idx];
                out.values[idx] = [u + f[0] - p[0], v + f[1] - p[1]];
            }
            _ => {
                out.values[idx] = [0.0; 2];
                out.valid[idx] = false;
            }
        }
    }
    out
}

/// Per-pixel maximum over edges of the mean of the two confidence channels.
pub fn pool_confidence(edges: &[&ConfidenceField]) -> Result<Vec<f64>, FlowError> {
    let first = edges.first().ok_or(FlowError::EmptyEdgeList)?;
    if edges.iter().any(|e| e.values.len() != first.values.len()) {
        return Err(FlowError::ShapeMismatch("edge confidences differ in size".into()));
    }
    Ok((0..first.values.len())
        .map(|i| edges.iter().map(|e| 0.5 * (e.values[i][0] + e.values[i][1])).fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Zeroes depth and confidence wherever the pooled confidence is below `beta`.
pub fn sparsify(d: &InverseDepthField, w: &[f64], beta: f64) -> Result<(InverseDepthField, Vec<f64>), FlowError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(FlowError::InvalidParameter(format!("beta {beta} outside [0, 1]")));
    }
    if w.len() != d.len() {
        return Err(FlowError::ShapeMismatch("confidence and depth differ in size".into()));
    }
    let keep: Vec<bool> = w.iter().map(|&x| x >= beta).collect();
    let values = d.values.iter().zip(&keep).map(|(&v, &k)| if k { v } else { 0.0 }).collect();
    let ws = w.iter().zip(&keep).map(|(&v, &k)| if k { v } else { 0.0 }).collect();
    Ok((InverseDepthField::new(d.width, d.height, values), ws))
}

/// Bilinear weights of the four neighbours of `(x, y)` if it lies inside the
/// pixel-centre grid.
fn bilinear_taps(width: usize, height: usize, x: f64, y: f64) -> Option<[(usize, f64); 4]> {
    if !(x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(width.saturating_sub(2));
    let y0 = (y.floor() as usize).min(height.saturating_sub(2));
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let (ax, ay) = (x - x0 as f64, y - y0 as f64);
    Some([
        (y0 * width + x0, (1.0 - ax) * (1.0 - ay)),
        (y0 * width + x1, ax * (1.0 - ay)),
        (y1 * width + x0, (1.0 - ax) * ay),
        (y1 * width + x1, ax * ay),
    ])
}

/// Samples `reference` at `coords`; pixels sampling outside the image are
/// zero and flagged invalid.
pub fn warp_image(reference: &Image, coords: &[[f64; 2]]) -> (Image, Mask) {
    let ch = reference.channels;
    let mut data = vec![0.0; coords.len() * ch];
    let mut valid = vec![false; coords.len()];
    for (i, c) in coords.iter().enumerate() {
        if let Some(taps) = bilinear_taps(reference.width, reference.height, c[0], c[1]) {
            valid[i] = true;
            for k in 0..ch {
                data[i * ch + k] = taps.iter().map(|&(p, w)| w * reference.data[p * ch + k]).sum();
            }
        }
    }
    (
        Image { width: reference.width, height: reference.height, channels: ch, data },
        Mask { width: reference.width, height: reference.height, values: valid },
    )
}

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PHOTOMETRIC_ALPHA: f64 = 0.85;

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// Structural similarity with a 3x3 box window and reflect padding, per
/// pixel and channel-averaged.
pub fn ssim(a: &Image, b: &Image) -> Result<Vec<f64>, FlowError> {
    a.same_shape(b)?;
    let (w, h, ch) = (a.width, a.height, a.channels);
    Ok(parallel::map_range(w * h, |idx| {
        let (x, y) = ((idx % w) as isize, (idx / w) as isize);
        let mut total = 0.0;
        for k in 0..ch {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (xx, yy) = (reflect(x + dx, w), reflect(y + dy, h));
                    let (va, vb) = (a.at(xx, yy, k), b.at(xx, yy, k));
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            let (ma, mb) = (sa / 9.0, sb / 9.0);
            let va = saa / 9.0 - ma * ma;
            let vb = sbb / 9.0 - mb * mb;
            let cov = sab / 9.0 - ma * mb;
            total += (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total / ch as f64
    }))
}

/// `alpha/2 (1 - SSIM) + (1 - alpha) L1`, channel-averaged.
pub fn photometric_error(target: &Image, warped: &Image) -> Result<Vec<f64>, FlowError> {
    let s = ssim(target, warped)?;
    let ch = target.channels;
    Ok(s.iter()
        .enumerate()
        .map(|(i, s)| {
            let l1: f64 = (0..ch).map(|k| (target.data[i * ch + k] - warped.data[i * ch + k]).abs()).sum::<f64>() / ch as f64;
            let d = ((1.0 - s) * 0.5).clamp(0.0, 1.0);
            PHOTOMETRIC_ALPHA * d + (1.0 - PHOTOMETRIC_ALPHA) * l1
        })
        .collect())
}

/// True where the warped reference explains the target better than the
/// unwarped reference.
pub fn static_mask(target: &Image, warped: &Image, reference: &Image) -> Result<Mask, FlowError> {
    let pw = photometric_error(target, warped)?;
    let pr = photometric_error(target, reference)?;
    Ok(Mask { width: target.width, height: target.height, values: pw.iter().zip(&pr).map(|(a, b)| a < b).collect() })
}

/// True where the forward flow and the reverse flow sampled at the forward
/// target cancel to within `gamma` pixels.
pub fn flow_consistency_mask(fwd: &FlowField, bwd: &FlowField, gamma: f64) -> Result<Mask, FlowError> {
    if !(gamma > 0.0) {
        return Err(FlowError::InvalidParameter(format!("gamma {gamma} must be positive")));
    }
    let w = fwd.width;
    let values = (0..fwd.len())
        .map(|idx| {
            if !fwd.valid[idx] {
                return false;
            }
            let f = fwd.values[idx];
            let (x, y) = ((idx % w) as f64 + f[0], (idx / w) as f64 + f[1]);
            let Some(taps) = bilinear_taps(bwd.width, bwd.height, x, y) else {
                return false;
            };
            if taps.iter().any(|&(p, wt)| wt > 0.0 && !bwd.valid[p]) {
                return false;
            }
            let b = taps.iter().fold([0.0; 2], |acc, &(p, wt)| [acc[0] + wt * bwd.values[p][0], acc[1] + wt * bwd.values[p][1]]);
            (f[0] + b[0]).hypot(f[1] + b[1]) < gamma
        })
        .collect();
    Ok(Mask { width: w, height: fwd.height, values })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Confidence threshold for sparsification.
    pub beta: f64,
    /// Flow-consistency threshold in pixels.
    pub gamma: f64,
    /// Smoothness weight.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { beta: 0.5, gamma: 3.0, lambda: 1e-3 }
    }
}

/// Photometric error of one reference view and its combined static and
/// flow-consistency mask.
#[derive(Clone, Debug)]
pub struct ReferenceTerm {
    pub pe: Vec<f64>,
    pub mask: Mask,
}

/// Edge-aware first-order smoothness of mean-normalized inverse depth.
pub fn smoothness(d: &InverseDepthField, image: &Image) -> Result<f64, FlowError> {
    let (w, h) = (d.width, d.height);
    if (image.width, image.height) != (w, h) {
        return Err(FlowError::ShapeMismatch("depth and image differ in size".into()));
    }
    let mean = d.values.iter().sum::<f64>() / d.len() as f64;
    let norm = |i: usize| if mean > 0.0 { d.values[i] / mean } else { 0.0 };
    let img_grad = |a: usize, b: usize| (0..image.channels).map(|k| (image.data[a * image.channels + k] - image.data[b * image.channels + k]).abs()).sum::<f64>() / image.channels as f64;
    let mut gx = (0.0, 0usize);
    let mut gy = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                gx.0 += (norm(i) - norm(i + 1)).abs() * (-img_grad(i, i + 1)).exp();
                gx.1 += 1;
            }
            if y + 1 < h {
                gy.0 += (norm(i) - norm(i + w)).abs() * (-img_grad(i, i + w)).exp();
                gy.1 += 1;
            }
        }
    }
    let mean_of = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(mean_of(gx) + mean_of(gy))
}

/// Minimum masked photometric error over references, averaged over pixels
/// with at least one unmasked reference, plus `lambda` times smoothness.
/// `occlusion` marks pixels of the target camera that are never supervised.
pub fn masked_loss(refs: &[ReferenceTerm], occlusion: &Mask, d: &InverseDepthField, image: &Image, lambda: f64) -> Result<f64, FlowError> {
    if refs.is_empty() {
        return Err(FlowError::NoReferences);
    }
    let n = d.len();
    if occlusion.values.len() != n || refs.iter().any(|r| r.pe.len() != n || r.mask.values.len() != n) {
        return Err(FlowError::ShapeMismatch("reference terms differ in size".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        if !occlusion.values[i] {
            continue;
        }
        let best = refs.iter().filter(|r| r.mask.values[i]).map(|r| r.pe[i]).fold(f64::INFINITY, f64::min);
        if best.is_finite() {
            sum += best;
            count += 1;
        }
    }
    let photometric = if count == 0 { 0.0 } else { sum / count as f64 };
    Ok(photometric + lambda * smoothness(d, image)?)
}
