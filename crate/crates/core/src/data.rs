//! Dataset catalog, stratified partitions and the synthetic crack generator.
//!
//! On-disk layout: `<root>/CD/*` holds cracked tiles, `<root>/UD/*`
//! uncracked ones. Synthetic datasets add `<root>/masks/CD/*` with the
//! ground-truth crack pixels of each cracked tile.

use crate::augment::{sample_rng, ImageBuffer};
use crate::error::{Error, Result};
use crate::loss::CRACK;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const NON_CRACK: usize = 0;
pub const CRACK_DIR: &str = "CD";
pub const NON_CRACK_DIR: &str = "UD";
pub const MASK_DIR: &str = "masks";

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    /// Relative to the dataset root, `/`-separated.
    pub path: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub entries: Vec<Entry>,
    /// Images that could not be decoded and were left out.
    pub skipped: usize,
}

impl DatasetIndex {
    /// `[non_crack, crack]`.
    pub fn counts(&self) -> [usize; 2] {
        let crack = self.entries.iter().filter(|e| e.label == CRACK).count();
        [self.entries.len() - crack, crack]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn abs_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, rel: &str) -> Option<usize> {
        self.entries.binary_search_by(|e| e.path.as_str().cmp(rel)).ok()
    }
}

pub fn label_of(rel: &str) -> Result<usize> {
    match rel.split('/').next() {
        Some(CRACK_DIR) => Ok(CRACK),
        Some(NON_CRACK_DIR) => Ok(NON_CRACK),
        _ => Err(Error::Layout(format!("`{rel}` is not under {CRACK_DIR}/ or {NON_CRACK_DIR}/"))),
    }
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for item in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = item.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if p.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn readable(p: &Path) -> bool {
    image::ImageReader::open(p)
        .and_then(|r| r.with_guessed_format())
        .map_err(|_| ())
        .and_then(|r| r.into_dimensions().map_err(|_| ()))
        .is_ok()
}

/// Catalogs `<root>/CD` and `<root>/UD`, sorted by relative path.
pub fn scan_dataset(root: &Path) -> Result<DatasetIndex> {
    let mut entries = Vec::new();
    let mut skipped = 0;
    for (dir, label) in [(CRACK_DIR, CRACK), (NON_CRACK_DIR, NON_CRACK)] {
        let d = root.join(dir);
        if !d.is_dir() {
            return Err(Error::Layout(format!("missing class directory {}", d.display())));
        }
        for p in list_images(&d)? {
            if !readable(&p) {
                skipped += 1;
                continue;
            }
            let name = p.file_name().and_then(|n| n.to_str()).ok_or_else(|| Error::Layout(format!("non-UTF-8 file name {}", p.display())))?;
            entries.push(Entry {
                path: format!("{dir}/{name}"),
                label,
            });
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} unreadable images skipped under {}", root.display());
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let index = DatasetIndex {
        root: root.to_path_buf(),
        entries,
        skipped,
    };
    if index.counts().contains(&0) {
        log::warn!("dataset {} has an empty class: counts {:?}", root.display(), index.counts());
    }
    Ok(index)
}

/// Train/validation/test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for Fractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

fn snap(v: f64) -> f64 {
    (v * 1e9).round() / 1e9
}

/// Per-class `(train, val, test)` sizes: validation rounds to nearest with
/// halves up, test rounds to nearest with halves down, train takes the rest.
pub fn split_sizes(n: usize, f: &Fractions) -> (usize, usize, usize) {
    let val = (snap(f.val * n as f64) + 0.5).floor() as usize;
    let test = ((snap(f.test * n as f64) - 0.5).ceil().max(0.0) as usize).min(n - val);
    (n - val - test, val, test)
}

/// Index lists into a [`DatasetIndex`], each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn class_members(labels: &[usize], class: usize, seed: u64) -> Vec<usize> {
    let mut m: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
    m.shuffle(&mut sample_rng(seed, class as u64));
    m
}

pub fn stratified_split(labels: &[usize], fractions: &Fractions, seed: u64) -> Result<Split> {
    let f = fractions;
    if [f.train, f.val, f.test].iter().any(|v| !(0.0..=1.0).contains(v)) || (f.train + f.val + f.test - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!("fractions {f:?} must be non-negative and sum to 1")));
    }
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for class in [NON_CRACK, CRACK] {
        let members = class_members(labels, class, seed);
        if members.len() < 3 {
            return Err(Error::Split(format!("class {class} has {} samples, need at least 3", members.len())));
        }
        let (_, nv, nt) = split_sizes(members.len(), f);
        split.val.extend_from_slice(&members[..nv]);
        split.test.extend_from_slice(&members[nv..nv + nt]);
        split.train.extend_from_slice(&members[nv + nt..]);
    }
    for part in [&mut split.train, &mut split.val, &mut split.test] {
        part.sort_unstable();
    }
    Ok(split)
}

/// `k` (train, validation) pairs; per class the shuffled members are dealt
/// round-robin, continuing the deal across classes.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::Split(format!("k = {k}, need at least 2 folds")));
    }
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for class in [NON_CRACK, CRACK] {
        let members = class_members(labels, class, seed);
        if members.len() < k {
            return Err(Error::Split(format!("class {class} has {} samples, fewer than {k} folds", members.len())));
        }
        for i in members {
            folds[next % k].push(i);
            next += 1;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok((0..k)
        .map(|v| {
            let mut train: Vec<usize> = (0..k).filter(|&j| j != v).flat_map(|j| folds[j].iter().copied()).collect();
            train.sort_unstable();
            (train, folds[v].clone())
        })
        .collect())
}

/// Persisted split: relative paths per partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub fractions: Fractions,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn new(index: &DatasetIndex, split: &Split, fractions: Fractions, seed: u64) -> Self {
        let paths = |ids: &[usize]| ids.iter().map(|&i| index.entries[i].path.clone()).collect();
        Self {
            seed,
            fractions,
            train: paths(&split.train),
            val: paths(&split.val),
            test: paths(&split.test),
        }
    }

    /// Resolves paths back to indices; unknown paths are a layout error.
    pub fn resolve(&self, index: &DatasetIndex) -> Result<Split> {
        let ids = |paths: &[String]| -> Result<Vec<usize>> {
            paths
                .iter()
                .map(|p| index.position(p).ok_or_else(|| Error::Layout(format!("manifest path `{p}` not in dataset"))))
                .collect()
        };
        Ok(Split {
            train: ids(&self.train)?,
            val: ids(&self.val)?,
            test: ids(&self.test)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Parameters of the synthetic crack generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub size: usize,
    pub crack_fraction: f64,
    /// Per-image base brightness range.
    pub brightness: [f64; 2],
    /// Amplitude of the smooth background undulation.
    pub texture_amplitude: f64,
    /// Std of per-pixel grain.
    pub grain: f64,
    /// Maximum number of dark stains per image (both classes).
    pub max_stains: usize,
    pub stain_darkness: [f64; 2],
    /// Random-walk steps, in pixels.
    pub crack_length: [usize; 2],
    pub crack_width: [usize; 2],
    /// Fractional intensity drop along the crack.
    pub crack_darkness: [f64; 2],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            size: 64,
            crack_fraction: 1.0 / 6.7,
            brightness: [0.45, 0.75],
            texture_amplitude: 0.06,
            grain: 0.03,
            max_stains: 3,
            stain_darkness: [0.1, 0.25],
            crack_length: [40, 90],
            crack_width: [1, 3],
            crack_darkness: [0.3, 0.6],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: ImageBuffer,
    pub label: usize,
    /// Row-major crack pixels; all false for non-crack samples.
    pub mask: Vec<bool>,
}

impl SyntheticSample {
    pub fn mask_image(&self) -> ImageBuffer {
        let n = self.image.width();
        ImageBuffer::from_fn(self.image.height(), n, |y, x, _| if self.mask[y * n + x] { 1.0 } else { 0.0 }).expect("same size")
    }
}

/// Exact number of crack samples among `n`.
pub fn crack_count(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction).round() as usize
}

fn smooth_field<R: Rng>(size: usize, cells: usize, rng: &mut R) -> Vec<f64> {
    let grid: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(size * size);
    let scale = cells as f64 / size as f64;
    for y in 0..size {
        for x in 0..size {
            let (gx, gy) = (x as f64 * scale, y as f64 * scale);
            let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            let at = |i: usize, j: usize| grid[j * (cells + 1) + i];
            let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
            let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn render_sample(spec: &SyntheticSpec, label: usize, seed: u64, id: u64) -> SyntheticSample {
    let mut rng = sample_rng(seed, id);
    let n = spec.size;
    let base = rng.random_range(spec.brightness[0]..spec.brightness[1]);
    let tint = [0; 3].map(|_| rng.random_range(-0.02..0.02));
    let field = smooth_field(n, 4, &mut rng);
    let grain = Normal::new(0.0, spec.grain).expect("finite std");
    let mut gray: Vec<f64> = field
        .iter()
        .map(|f| base + spec.texture_amplitude * f + grain.sample(&mut rng))
        .collect();

    // soft elliptical stains, present in both classes
    for _ in 0..rng.random_range(0..=spec.max_stains) {
        let (cx, cy) = (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64));
        let (a, b) = (rng.random_range(0.08..0.25) * n as f64, rng.random_range(0.08..0.25) * n as f64);
        let depth = rng.random_range(spec.stain_darkness[0]..spec.stain_darkness[1]);
        for y in 0..n {
            for x in 0..n {
                let d = ((x as f64 - cx) / a).powi(2) + ((y as f64 - cy) / b).powi(2);
                if d < 1.0 {
                    gray[y * n + x] *= 1.0 - depth * (1.0 - d);
                }
            }
        }
    }

    let mut mask = vec![false; n * n];
    if label == CRACK {
        let steps = rng.random_range(spec.crack_length[0]..=spec.crack_length[1]);
        let width = rng.random_range(spec.crack_width[0]..=spec.crack_width[1]);
        let darkness = rng.random_range(spec.crack_darkness[0]..spec.crack_darkness[1]);
        let r = width as f64 / 2.0;
        let mut p = [rng.random_range(0.2..0.8) * n as f64, rng.random_range(0.2..0.8) * n as f64];
        let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        for _ in 0..steps {
            for dy in -2..=2i64 {
                for dx in -2..=2i64 {
                    let (x, y) = (p[0].floor() as i64 + dx, p[1].floor() as i64 + dy);
                    if x < 0 || y < 0 || x >= n as i64 || y >= n as i64 {
                        continue;
                    }
                    let (cx, cy) = (x as f64 + 0.5 - p[0], y as f64 + 0.5 - p[1]);
                    if cx * cx + cy * cy <= r * r {
                        mask[y as usize * n + x as usize] = true;
                    }
                }
            }
            heading += rng.random_range(-0.35..0.35);
            p[0] += heading.cos();
            p[1] += heading.sin();
            // bounce off the border
            for (v, flip) in [(0, true), (1, false)] {
                if p[v] < 1.0 || p[v] > n as f64 - 1.0 {
                    p[v] = p[v].clamp(1.0, n as f64 - 1.0);
                    heading = if flip { std::f64::consts::PI - heading } else { -heading };
                }
            }
        }
        for (g, &m) in gray.iter_mut().zip(&mask) {
            if m {
                *g *= 1.0 - darkness;
            }
        }
    }

    let image = ImageBuffer::from_fn(n, n, |y, x, c| (gray[y * n + x] + tint[c]).clamp(0.0, 1.0) as f32).expect("positive size");
    SyntheticSample { image, label, mask }
}

/// `n` samples with exactly [`crack_count`] cracks at seed-shuffled positions.
pub fn generate_synthetic(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    if n == 0 || spec.size < 8 {
        return Err(Error::Domain(format!("need n ≥ 1 and size ≥ 8, got n={n} size={}", spec.size)));
    }
    let cracks = crack_count(n, spec.crack_fraction);
    let mut labels: Vec<usize> = (0..n).map(|i| if i < cracks { CRACK } else { NON_CRACK }).collect();
    labels.shuffle(&mut sample_rng(seed, u64::MAX));
    Ok(labels
        .par_iter()
        .enumerate()
        .map(|(i, &l)| render_sample(spec, l, seed, i as u64))
        .collect())
}

/// Writes samples in the class-directory layout plus crack masks.
pub fn write_synthetic(root: &Path, samples: &[SyntheticSample]) -> Result<()> {
    for d in [root.join(CRACK_DIR), root.join(NON_CRACK_DIR), root.join(MASK_DIR).join(CRACK_DIR)] {
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    samples.par_iter().enumerate().try_for_each(|(i, s)| -> Result<()> {
        let name = format!("syn_{i:05}.png");
        if s.label == CRACK {
            s.image.save_png(&root.join(CRACK_DIR).join(&name))?;
            s.mask_image().save_png(&root.join(MASK_DIR).join(CRACK_DIR).join(&name))
        } else {
            s.image.save_png(&root.join(NON_CRACK_DIR).join(&name))
        }
    })
}

/// Crack mask stored next to a synthetic dataset, if any.
pub fn load_mask(root: &Path, rel: &str) -> Result<Option<Vec<bool>>> {
    let p = root.join(MASK_DIR).join(rel);
    if !p.exists() {
        return Ok(None);
    }
    let m = ImageBuffer::load(&p)?;
    Ok(Some(m.gray().iter().map(|&v| v > 0.5).collect()))
}
