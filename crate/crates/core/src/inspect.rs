//! Sliding-window screening of full-resolution images.
//!
//! Images are cut into fixed-size patches, the patches are scored in
//! batches, and crack-positive patches are reported in source coordinates.

use crate::augment::{preprocess, ImageBuffer, Normalization};
use crate::error::{Error, Result};
use crate::loss::CRACK;
use crate::model::Model;
use crate::tensor::Tensor;
use crate::train::crack_probabilities;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

pub const REPORT_VERSION: u32 = 1;
pub const DEFAULT_PATCH: usize = 224;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileGrid {
    pub width: usize,
    pub height: usize,
    pub patch: usize,
    pub stride: usize,
    /// Top-left corners, ordered by `(y, x)`.
    pub tiles: Vec<(usize, usize)>,
}

/// Window starts along one axis, the last one clamped to `len − patch`.
fn axis_starts(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = len - patch;
    let mut out = Vec::new();
    let mut c = 0;
    loop {
        out.push(c.min(last));
        if c >= last {
            break;
        }
        c += stride;
    }
    out.dedup();
    out
}

pub fn plan_tiles(width: usize, height: usize, patch: usize, stride: usize) -> Result<TileGrid> {
    if patch == 0 || patch > width.min(height) {
        return Err(Error::Tiling(format!("patch {patch} does not fit a {width}x{height} image")));
    }
    if stride == 0 || stride > patch {
        return Err(Error::Tiling(format!("stride {stride} must be in 1..={patch}")));
    }
    let xs = axis_starts(width, patch, stride);
    let tiles = axis_starts(height, patch, stride)
        .into_iter()
        .flat_map(|y| xs.iter().map(move |&x| (x, y)))
        .collect();
    Ok(TileGrid {
        width,
        height,
        patch,
        stride,
        tiles,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRegion {
    pub image: String,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    /// Softmax crack probability of the patch.
    pub score: f64,
    pub label: usize,
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold <= 1.0 {
        Ok(())
    } else {
        Err(Error::config("inspect.threshold", format!("{threshold} is outside (0, 1]")))
    }
}

/// Crack probability of every tile, in grid order.
pub fn score_tiles(
    model: &Model<f32>,
    image: &ImageBuffer,
    grid: &TileGrid,
    batch_size: usize,
    norm: &Normalization,
) -> Result<Vec<f64>> {
    if (image.width(), image.height()) != (grid.width, grid.height) {
        return Err(Error::Tiling(format!(
            "grid planned for {}x{}, image is {}x{}",
            grid.width,
            grid.height,
            image.width(),
            image.height()
        )));
    }
    let hw = model.config.input_hw;
    let mut scores = Vec::with_capacity(grid.tiles.len());
    for chunk in grid.tiles.chunks(batch_size.max(1)) {
        let patches: Vec<Tensor<f32>> = chunk
            .par_iter()
            .map(|&(x, y)| preprocess(&image.crop(x, y, grid.patch, grid.patch)?, hw, norm))
            .collect::<Result<_>>()?;
        scores.extend(crack_probabilities(&model.predict_logits(&Tensor::stack(&patches)?)?));
    }
    Ok(scores)
}

/// Tiles whose crack probability reaches `threshold`, sorted by `(y, x)`.
pub fn classify_tiles(
    model: &Model<f32>,
    image_id: &str,
    image: &ImageBuffer,
    grid: &TileGrid,
    batch_size: usize,
    threshold: f64,
    norm: &Normalization,
) -> Result<Vec<CandidateRegion>> {
    check_threshold(threshold)?;
    let scores = score_tiles(model, image, grid, batch_size, norm)?;
    Ok(grid
        .tiles
        .iter()
        .zip(scores)
        .filter(|(_, s)| *s >= threshold)
        .map(|(&(x, y), score)| CandidateRegion {
            image: image_id.to_string(),
            x,
            y,
            w: grid.patch,
            h: grid.patch,
            score,
            label: CRACK,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub version: u32,
    pub checkpoint: String,
    pub patch: usize,
    pub stride: usize,
    pub threshold: f64,
    /// The only field that varies between identical runs.
    pub timing_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InspectionReport {
    pub header: ReportHeader,
    pub candidates: Vec<CandidateRegion>,
}

/// Writes the header line followed by one line per candidate.
pub fn emit_report(report: &InspectionReport, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = |v: String| writeln!(w, "{v}").map_err(|e| Error::io(path, e));
    line(serde_json::to_string(&report.header)?)?;
    for c in &report.candidates {
        line(serde_json::to_string(c)?)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<InspectionReport> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty report", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header = serde_json::from_str(&first)?;
    let mut candidates = Vec::new();
    for l in lines {
        let l = l.map_err(|e| Error::io(path, e))?;
        if !l.trim().is_empty() {
            candidates.push(serde_json::from_str(&l)?);
        }
    }
    Ok(InspectionReport { header, candidates })
}

/// Copy of `image` with a red outline around each candidate.
pub fn draw_candidates(image: &ImageBuffer, candidates: &[CandidateRegion]) -> ImageBuffer {
    const EDGE: usize = 2;
    let mut out = image.clone();
    for c in candidates {
        let (x1, y1) = ((c.x + c.w).min(image.width()), (c.y + c.h).min(image.height()));
        for y in c.y..y1 {
            for x in c.x..x1 {
                let border = x < c.x + EDGE || x + EDGE >= x1 || y < c.y + EDGE || y + EDGE >= y1;
                if border {
                    for (ch, v) in [1.0, 0.0, 0.0].into_iter().enumerate() {
                        out.set(y, x, ch, v);
                    }
                }
            }
        }
    }
    out
}
