use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::bidiratt::BidirAttWeights;
use crate::error::{Error, Result};

/// One patch of an exported heatmap.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapRow {
    pub row: usize,
    pub col: usize,
    pub w: f64,
    pub w_fa: f64,
    pub w_ba: f64,
}

fn rows_for(weights: &BidirAttWeights, grid: (usize, usize)) -> Result<Vec<HeatmapRow>> {
    let n = grid.0 * grid.1;
    if weights.w.len() != n + 1 {
        return Err(Error::shape("heatmap", &[weights.w.len()], &[n + 1]));
    }
    Ok((0..n)
        .map(|j| HeatmapRow {
            row: j / grid.1,
            col: j % grid.1,
            w: weights.w[j + 1],
            w_fa: weights.w_fa[j + 1],
            w_ba: weights.w_ba[j + 1],
        })
        .collect())
}

/// `row,col,w,w_fa,w_ba` per patch, `[CLS]` excluded.
pub fn write_heatmap_csv(path: &Path, weights: &BidirAttWeights, grid: (usize, usize)) -> Result<()> {
    let mut out = String::from("row,col,w,w_fa,w_ba\n");
    for r in rows_for(weights, grid)? {
        writeln!(out, "{},{},{:e},{:e},{:e}", r.row, r.col, r.w, r.w_fa, r.w_ba).expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Binary greymap of the patch weights, min-max scaled to 0..=255.
pub fn pgm_bytes(weights: &BidirAttWeights, grid: (usize, usize)) -> Result<Vec<u8>> {
    let rows = rows_for(weights, grid)?;
    let lo = rows.iter().map(|r| r.w).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.w).fold(f64::NEG_INFINITY, f64::max);
    let mut bytes = format!("P5\n{} {}\n255\n", grid.1, grid.0).into_bytes();
    for r in &rows {
        let v = if hi > lo { (r.w - lo) / (hi - lo) } else { 0.0 };
        bytes.push((v * 255.0).round() as u8);
    }
    Ok(bytes)
}

pub fn write_heatmap_pgm(path: &Path, weights: &BidirAttWeights, grid: (usize, usize)) -> Result<()> {
    fs::write(path, pgm_bytes(weights, grid)?)?;
    Ok(())
}
