//! Selection heatmaps: `p̄` on the patch grid as a binary graymap plus CSV.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Gray level of every cell when all probabilities are equal.
pub const FLAT_GRAY: u8 = 128;

/// Side of the square grid holding `n` cells.
pub fn grid_side(n: usize) -> Result<usize> {
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n || n == 0 {
        return Err(Error::Input(format!("{n} tokens do not form a square grid")));
    }
    Ok(g)
}

/// Min-max normalizes `probs` to `0..=255`. A constant input maps to
/// [`FLAT_GRAY`].
pub fn gray_levels(probs: &[f64]) -> Vec<u8> {
    let lo = probs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![FLAT_GRAY; probs.len()];
    }
    probs.iter().map(|p| ((p - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Binary PGM (`P5`) of a `side×side` image.
pub fn encode_pgm(levels: &[u8], side: usize) -> Vec<u8> {
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend_from_slice(levels);
    out
}

pub fn heatmap_csv(probs: &[f64], mask: &[bool], side: usize) -> String {
    let mut out = String::from("row,col,prob,kept\n");
    for (j, (p, k)) in probs.iter().zip(mask).enumerate() {
        out.push_str(&format!("{},{},{:e},{}\n", j / side, j % side, p, u8::from(*k)));
    }
    out
}

/// File stem `{prefix}sel_{kept}of{n}`.
pub fn heatmap_stem(prefix: &str, mask: &[bool]) -> String {
    let kept = mask.iter().filter(|&&k| k).count();
    format!("{prefix}sel_{kept}of{}", mask.len())
}

/// Writes `<stem>.pgm` and `<stem>.csv` into `dir` and returns both paths.
pub fn export_heatmap(dir: &Path, prefix: &str, probs: &[f64], mask: &[bool]) -> Result<(PathBuf, PathBuf)> {
    if probs.len() != mask.len() {
        return Err(Error::Input(format!("{} probabilities for {} mask entries", probs.len(), mask.len())));
    }
    let side = grid_side(probs.len())?;
    fs::create_dir_all(dir)?;
    let stem = heatmap_stem(prefix, mask);
    let pgm = dir.join(format!("{stem}.pgm"));
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&pgm, encode_pgm(&gray_levels(probs), side))?;
    fs::write(&csv, heatmap_csv(probs, mask, side))?;
    Ok((pgm, csv))
}
