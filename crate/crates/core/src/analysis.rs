//! Feature-map diagnostics: target/distractor discriminability, channel
//! diversity and L1 heatmap export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity, l1_map, Tensor};

/// How the map is scaled to `[0, 1]` before the Euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MinMaxScope {
    /// one min/max over the whole map
    #[default]
    Joint,
    PerChannel,
}

/// Inclusive rectangle `rows r0..=r1, cols c0..=c1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExcludeBox {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl ExcludeBox {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.r0..=self.r1).contains(&r) && (self.c0..=self.c1).contains(&c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminabilityReport {
    /// `None` when the target or distractor vector is all zeros.
    pub cosine: Option<f64>,
    pub euclidean_norm01: f64,
    pub target_pos: (usize, usize),
    pub distractor_pos: (usize, usize),
}

impl DiscriminabilityReport {
    pub fn is_degenerate(&self) -> bool {
        self.cosine.is_none()
    }
}

fn channel_vector(t: &Tensor, pos: (usize, usize)) -> Vec<f32> {
    let (c, h, w) = t.dims3().expect("rank checked by caller");
    (0..c).map(|ch| t.data()[(ch * h + pos.0) * w + pos.1]).collect()
}

fn min_max(values: &[f32]) -> Vec<f64> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    let range = hi - lo;
    values.iter().map(|&v| if range > 0.0 { (v as f64 - lo) / range } else { 0.0 }).collect()
}

/// Min-max scales `t` to `[0, 1]` in `f64`; constant regions map to 0.
pub fn normalize01(t: &Tensor, scope: MinMaxScope) -> Result<Vec<f64>> {
    let (c, h, w) = t.dims3()?;
    Ok(match scope {
        MinMaxScope::Joint => min_max(t.data()),
        MinMaxScope::PerChannel => (0..c).flat_map(|ch| min_max(&t.data()[ch * h * w..(ch + 1) * h * w])).collect(),
    })
}

/// Compares the feature vector at `target` with the strongest response
/// (largest channel L1 norm) outside `exclude`.
pub fn discriminability(corr: &Tensor, target: (usize, usize), exclude: ExcludeBox, scope: MinMaxScope) -> Result<DiscriminabilityReport> {
    let (c, h, w) = corr.dims3()?;
    if target.0 >= h || target.1 >= w {
        return Err(Error::InvalidArgument(format!("target {target:?} outside {h}x{w} map")));
    }
    if exclude.r0 > exclude.r1 || exclude.c0 > exclude.c1 || exclude.r1 >= h || exclude.c1 >= w {
        return Err(Error::InvalidArgument(format!("exclusion box {exclude:?} invalid for {h}x{w} map")));
    }
    let l1 = l1_map(corr)?;
    let mut best: Option<((usize, usize), f32)> = None;
    for r in 0..h {
        for col in 0..w {
            if exclude.contains(r, col) {
                continue;
            }
            let v = l1.data()[r * w + col];
            // strict comparison keeps the first occurrence in row-major order
            if best.is_none_or(|(_, b)| v > b) {
                best = Some(((r, col), v));
            }
        }
    }
    let (distractor, _) = best.ok_or(Error::EmptyExterior)?;

    let tv = channel_vector(corr, target);
    let dv = channel_vector(corr, distractor);
    let cosine = match cosine_similarity(&tv, &dv) {
        Ok(v) => Some(v),
        Err(Error::ZeroVector) => None,
        Err(e) => return Err(e),
    };
    let norm = normalize01(corr, scope)?;
    let at = |ch: usize, p: (usize, usize)| norm[(ch * h + p.0) * w + p.1];
    let euclidean_norm01 = (0..c).map(|ch| (at(ch, target) - at(ch, distractor)).powi(2)).sum::<f64>().sqrt();
    Ok(DiscriminabilityReport { cosine, euclidean_norm01, target_pos: target, distractor_pos: distractor })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDiversity {
    pub per_channel_max_normalized: Vec<f64>,
    pub mean: f64,
}

/// Per-channel maxima divided by the global maximum, and their mean.
pub fn channel_diversity(corr: &Tensor) -> Result<ChannelDiversity> {
    let (c, h, w) = corr.dims3()?;
    let plane = h * w;
    let maxima: Vec<f64> =
        (0..c).map(|ch| corr.data()[ch * plane..(ch + 1) * plane].iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64))).collect();
    let global = maxima.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(global > 0.0) {
        return Err(Error::NonPositiveMax);
    }
    let per_channel_max_normalized: Vec<f64> = maxima.iter().map(|m| m / global).collect();
    let mean = per_channel_max_normalized.iter().sum::<f64>() / c as f64;
    Ok(ChannelDiversity { per_channel_max_normalized, mean })
}

/// L1 map as CSV: one line per row, comma-separated, LF endings. Values use
/// the shortest representation that parses back to the same `f32`.
pub fn heatmap_csv(corr: &Tensor) -> Result<String> {
    let m = l1_map(corr)?;
    let (h, w) = (m.shape()[0], m.shape()[1]);
    let mut s = String::new();
    for r in 0..h {
        for c in 0..w {
            if c > 0 {
                s.push(',');
            }
            write!(s, "{}", m.data()[r * w + c]).expect("writing to a String");
        }
        s.push('\n');
    }
    Ok(s)
}

/// L1 map as binary PGM (P5, maxval 255), min-max scaled with rounding.
/// A constant map renders all zeros.
pub fn heatmap_pgm(corr: &Tensor) -> Result<Vec<u8>> {
    let m = l1_map(corr)?;
    let (h, w) = (m.shape()[0], m.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(min_max(m.data()).into_iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

/// Writes `<prefix>.csv` and `<prefix>.pgm`; returns both paths.
pub fn heatmap_export(corr: &Tensor, prefix: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let prefix = prefix.as_ref();
    let csv = prefix.with_extension("csv");
    let pgm = prefix.with_extension("pgm");
    let csv_text = heatmap_csv(corr)?;
    let pgm_bytes = heatmap_pgm(corr)?;
    fs::write(&csv, csv_text)?;
    fs::write(&pgm, pgm_bytes)?;
    Ok((csv, pgm))
}
