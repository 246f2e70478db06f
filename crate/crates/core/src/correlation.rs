//! All-pairs feature correlation, its pooled pyramid, and bilinear lookup.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parallel;

pub const PYRAMID_LEVELS: usize = 4;
/// Smallest target-image side accepted by [`build_pyramid`].
pub const MIN_PYRAMID_SIDE: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrError {
    #[error("channel mismatch: {0} vs {1}")]
    ChannelMismatch(usize, usize),
    #[error("target image {0}x{1} too small for a pyramid")]
    TooSmall(usize, usize),
    #[error("invalid feature grid: {0}")]
    InvalidGrid(String),
}

/// Dense per-pixel feature vectors, row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self, CorrError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(CorrError::InvalidGrid("dimensions must be positive".into()));
        }
        if values.len() != height * width * channels {
            return Err(CorrError::InvalidGrid(format!("{} values for {height}x{width}x{channels}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CorrError::InvalidGrid("non-finite feature value".into()));
        }
        Ok(Self { height, width, channels, values })
    }

    pub fn feature(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.values[start..start + self.channels]
    }
}

/// Correlation of every source pixel with every target pixel, indexed
/// `[y, x, y', x']`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrVolume {
    pub height: usize,
    pub width: usize,
    pub target_height: usize,
    pub target_width: usize,
    pub level: usize,
    pub values: Vec<f64>,
}

impl CorrVolume {
    pub fn at(&self, y: usize, x: usize, ty: usize, tx: usize) -> f64 {
        self.values[((y * self.width + x) * self.target_height + ty) * self.target_width + tx]
    }

    fn target_slice(&self, pixel: usize) -> &[f64] {
        let n = self.target_height * self.target_width;
        &self.values[pixel * n..(pixel + 1) * n]
    }
}

pub fn build_correlation(fi: &FeatureGrid, fj: &FeatureGrid) -> Result<CorrVolume, CorrError> {
    if fi.channels != fj.channels {
        return Err(CorrError::ChannelMismatch(fi.channels, fj.channels));
    }
    let n_target = fj.height * fj.width;
    let rows = parallel::map_range(fi.height * fi.width, |p| {
        let a = &fi.values[p * fi.channels..(p + 1) * fi.channels];
        (0..n_target)
            .map(|q| {
                let b = &fj.values[q * fj.channels..(q + 1) * fj.channels];
                a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
            })
            .collect::<Vec<f64>>()
    });
    Ok(CorrVolume {
        height: fi.height,
        width: fi.width,
        target_height: fj.height,
        target_width: fj.width,
        level: 0,
        values: rows.concat(),
    })
}

fn pool(c: &CorrVolume) -> CorrVolume {
    let (th, tw) = (c.target_height / 2, c.target_width / 2);
    let rows = parallel::map_range(c.height * c.width, |p| {
        let src = c.target_slice(p);
        let mut out = Vec::with_capacity(th * tw);
        for y in 0..th {
            for x in 0..tw {
                let i = 2 * y * c.target_width + 2 * x;
                out.push(0.25 * (src[i] + src[i + 1] + src[i + c.target_width] + src[i + c.target_width + 1]));
            }
        }
        out
    });
    CorrVolume {
        height: c.height,
        width: c.width,
        target_height: th,
        target_width: tw,
        level: c.level + 1,
        values: rows.concat(),
    }
}

/// Level 0 followed by three 2x average-pooled levels over the target axes.
/// Odd target sides drop their last row or column when pooled.
pub fn build_pyramid(c0: &CorrVolume) -> Result<Vec<CorrVolume>, CorrError> {
    if c0.target_height < MIN_PYRAMID_SIDE || c0.target_width < MIN_PYRAMID_SIDE {
        return Err(CorrError::TooSmall(c0.target_height, c0.target_width));
    }
    let mut pyr = vec![c0.clone()];
    for _ in 1..PYRAMID_LEVELS {
        let next = pool(pyr.last().unwrap());
        pyr.push(next);
    }
    Ok(pyr)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LookupConfig {
    pub radius: usize,
    /// Side of the sample grid; defaults to `radius + 1`.
    pub grid_side: Option<usize>,
}

impl Default for LookupConfig {
    fn default() -> Self {
        Self { radius: 3, grid_side: None }
    }
}

impl LookupConfig {
    pub fn side(&self) -> usize {
        self.grid_side.unwrap_or(self.radius + 1)
    }

    /// Offsets of the sample grid along one axis, centred on zero.
    pub fn offsets(&self) -> Vec<f64> {
        let s = self.side();
        let half = (s as f64 - 1.0) / 2.0;
        (0..s).map(|k| k as f64 - half).collect()
    }

    /// Features per source pixel over all levels.
    pub fn feature_len(&self, levels: usize) -> usize {
        levels * self.side() * self.side()
    }
}

/// Bilinear sample of one target slice; neighbours outside the grid count as 0.
fn sample_zero_padded(slice: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (ax, ay) = (x - x0, y - y0);
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - ay), (1.0, ay)] {
        for (dx, wx) in [(0.0, 1.0 - ax), (1.0, ax)] {
            let (xx, yy) = (x0 + dx, y0 + dy);
            let wgt = wx * wy;
            if wgt != 0.0 && xx >= 0.0 && yy >= 0.0 && xx < w as f64 && yy < h as f64 {
                acc += wgt * slice[yy as usize * w + xx as usize];
            }
        }
    }
    acc
}

/// Samples a `side x side` grid around `coords / 2^level` in every level.
/// Output is `[pixel][level][dy][dx]`, flattened.
pub fn lookup(pyr: &[CorrVolume], coords: &[[f64; 2]], cfg: &LookupConfig) -> Vec<f64> {
    let Some(base) = pyr.first() else {
        return Vec::new();
    };
    let offsets = cfg.offsets();
    let k = cfg.feature_len(pyr.len());
    assert_eq!(coords.len(), base.height * base.width, "one coordinate per source pixel");
    let rows = parallel::map_range(coords.len(), |p| {
        let mut out = Vec::with_capacity(k);
        for level in pyr {
            let scale = (1u64 << level.level) as f64;
            let (cx, cy) = (coords[p][0] / scale, coords[p][1] / scale);
            let slice = level.target_slice(p);
            for oy in &offsets {
                for ox in &offsets {
                    out.push(sample_zero_padded(slice, level.target_height, level.target_width, cx + ox, cy + oy));
                }
            }
        }
        out
    });
    rows.concat()
}
