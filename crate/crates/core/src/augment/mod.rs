//! Inspection-scene degradations and model-input preprocessing.
//!
//! A [`DegradationSpec`] lists entries in application order. For each
//! sample, [`apply_pipeline`] walks the list once, drawing a Bernoulli
//! trial per entry and, on a hit, a concrete [`Degradation`] whose
//! magnitude is uniform over the entry's range. Several entries may fire
//! on the same sample. All draws come from a per-sample stream keyed by
//! `(seed, sample_id)`.

mod buffer;
mod ops;

pub use buffer::{preprocess, ImageBuffer, Normalization};
pub use ops::{convolve, disk_kernel, line_kernel, Degradation, LOW_LIGHT_GAMMA, SHADOW_FEATHER};

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    Contrast,
    MotionBlur,
    DefocusBlur,
    Fog,
    Shadow,
    Perspective,
    ColorJitter,
    LowLight,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 8] = [
        DegradationKind::Contrast,
        DegradationKind::MotionBlur,
        DegradationKind::DefocusBlur,
        DegradationKind::Fog,
        DegradationKind::Shadow,
        DegradationKind::Perspective,
        DegradationKind::ColorJitter,
        DegradationKind::LowLight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DegradationKind::Contrast => "contrast",
            DegradationKind::MotionBlur => "motion_blur",
            DegradationKind::DefocusBlur => "defocus_blur",
            DegradationKind::Fog => "fog",
            DegradationKind::Shadow => "shadow",
            DegradationKind::Perspective => "perspective",
            DegradationKind::ColorJitter => "color_jitter",
            DegradationKind::LowLight => "low_light",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::config("augment.kind", format!("unknown degradation `{name}`")))
    }

    fn of(d: &Degradation) -> Self {
        match d {
            Degradation::Contrast { .. } => DegradationKind::Contrast,
            Degradation::MotionBlur { .. } => DegradationKind::MotionBlur,
            Degradation::DefocusBlur { .. } => DegradationKind::DefocusBlur,
            Degradation::Fog { .. } => DegradationKind::Fog,
            Degradation::Shadow { .. } => DegradationKind::Shadow,
            Degradation::Perspective { .. } => DegradationKind::Perspective,
            Degradation::ColorJitter { .. } => DegradationKind::ColorJitter,
            Degradation::LowLight { .. } => DegradationKind::LowLight,
        }
    }
}

impl Degradation {
    pub fn kind(&self) -> DegradationKind {
        DegradationKind::of(self)
    }
}

/// One row of the degradation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationEntry {
    pub kind: DegradationKind,
    pub probability: f64,
    /// Primary magnitude: gain (contrast, jitter, low light), kernel length,
    /// disk radius, fog density, shadow factor, or corner displacement fraction.
    pub range: [f64; 2],
    /// Contrast bias, fog haze level or jitter brightness shift.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secondary: Option<[f64; 2]>,
}

impl DegradationEntry {
    fn new(kind: DegradationKind, probability: f64, range: [f64; 2], secondary: Option<[f64; 2]>) -> Self {
        Self {
            kind,
            probability,
            range,
            secondary,
        }
    }

    fn uniform<R: Rng>(range: [f64; 2], rng: &mut R) -> f64 {
        if range[0] == range[1] {
            range[0]
        } else {
            rng.random_range(range[0]..range[1])
        }
    }

    /// Draws a concrete degradation for an `height × width` image.
    pub fn sample<R: Rng>(&self, height: usize, width: usize, rng: &mut R) -> Degradation {
        let second = |rng: &mut R, default: [f64; 2]| Self::uniform(self.secondary.unwrap_or(default), rng);
        match self.kind {
            DegradationKind::Contrast => Degradation::Contrast {
                gain: Self::uniform(self.range, rng),
                bias: second(rng, [0.0, 0.0]),
            },
            DegradationKind::MotionBlur => Degradation::MotionBlur {
                length: rng.random_range(self.range[0].round() as usize..=self.range[1].round() as usize),
                angle_deg: rng.random_range(0.0..180.0),
            },
            DegradationKind::DefocusBlur => Degradation::DefocusBlur {
                radius: Self::uniform(self.range, rng),
            },
            DegradationKind::Fog => Degradation::Fog {
                density: Self::uniform(self.range, rng),
                haze: second(rng, [0.8, 0.8]),
            },
            DegradationKind::Shadow => {
                let factor = Self::uniform(self.range, rng);
                let (w, h) = (width as f64, height as f64);
                let (cx, cy) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
                let (a, b) = (rng.random_range(0.25..0.6) * w, rng.random_range(0.25..0.6) * h);
                let phi: f64 = rng.random_range(0.0..TAU);
                let mut angles: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..TAU)).collect();
                angles.sort_by(f64::total_cmp);
                // points on an ellipse in angular order form a convex polygon
                let corners = [0, 1, 2, 3].map(|i| {
                    let (ex, ey) = (a * angles[i].cos(), b * angles[i].sin());
                    [cx + ex * phi.cos() - ey * phi.sin(), cy + ex * phi.sin() + ey * phi.cos()]
                });
                Degradation::Shadow { factor, corners }
            }
            DegradationKind::Perspective => Degradation::Perspective {
                extent: Self::uniform(self.range, rng),
                offsets: [0; 4].map(|_| [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]),
            },
            DegradationKind::ColorJitter => Degradation::ColorJitter {
                gains: [0; 3].map(|_| Self::uniform(self.range, rng)),
                shift: second(rng, [0.0, 0.0]),
            },
            DegradationKind::LowLight => Degradation::LowLight {
                gain: Self::uniform(self.range, rng),
            },
        }
    }
}

/// Ordered degradation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub entries: Vec<DegradationEntry>,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        use DegradationKind::*;
        Self {
            entries: vec![
                DegradationEntry::new(Contrast, 0.5, [0.5, 0.9], Some([-0.2, 0.1])),
                DegradationEntry::new(MotionBlur, 0.3, [3.0, 7.0], None),
                DegradationEntry::new(DefocusBlur, 0.2, [3.0, 5.0], None),
                DegradationEntry::new(Fog, 0.2, [0.1, 0.4], Some([0.7, 0.9])),
                DegradationEntry::new(Shadow, 0.25, [0.4, 0.8], None),
                DegradationEntry::new(Perspective, 0.2, [0.03, 0.08], None),
                DegradationEntry::new(ColorJitter, 0.3, [0.8, 1.2], Some([-0.1, 0.1])),
                DegradationEntry::new(LowLight, 0.2, [0.3, 0.6], None),
            ],
        }
    }
}

impl DegradationSpec {
    /// Same table with every probability set to zero.
    pub fn disabled() -> Self {
        let mut s = Self::default();
        s.entries.iter_mut().for_each(|e| e.probability = 0.0);
        s
    }

    pub fn entry(&self, kind: DegradationKind) -> Option<&DegradationEntry> {
        self.entries.iter().find(|e| e.kind == kind)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            let path = |f: &str| format!("augment.entries[{i}].{f}");
            if !(0.0..=1.0).contains(&e.probability) {
                return Err(Error::config(path("probability"), format!("{} outside [0, 1]", e.probability)));
            }
            for (name, r) in [("range", Some(e.range)), ("secondary", e.secondary)] {
                if let Some([lo, hi]) = r {
                    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                        return Err(Error::config(path(name), format!("empty range [{lo}, {hi}]")));
                    }
                }
            }
            // extremes of the range must be valid parameters
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let probe = ImageBuffer::filled(4, 4, [0.5; 3])?;
            for bound in [e.range[0], e.range[1]] {
                let fixed = DegradationEntry {
                    range: [bound, bound],
                    ..e.clone()
                };
                fixed
                    .sample(4, 4, &mut rng)
                    .apply(&probe)
                    .map_err(|err| Error::config(path("range"), err.to_string()))?;
            }
        }
        Ok(())
    }
}

/// Per-sample random stream.
pub fn sample_rng(seed: u64, sample_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_id);
    rng
}

/// Applies `degradation` after checking it against the table entry.
pub fn apply_degradation(img: &ImageBuffer, entry: &DegradationEntry, degradation: &Degradation) -> Result<ImageBuffer> {
    if degradation.kind() != entry.kind {
        return Err(Error::config(
            "augment.kind",
            format!("{} parameters for a {} entry", degradation.kind().name(), entry.kind.name()),
        ));
    }
    let [lo, hi] = entry.range;
    if let Some(m) = degradation.magnitudes().into_iter().find(|m| !(lo..=hi).contains(m)) {
        return Err(Error::Domain(format!(
            "{} magnitude {m} outside [{lo}, {hi}]",
            entry.kind.name()
        )));
    }
    degradation.apply(img)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub image: ImageBuffer,
    pub applied: Vec<DegradationKind>,
}

pub fn apply_pipeline(img: &ImageBuffer, spec: &DegradationSpec, seed: u64, sample_id: u64) -> Result<Augmented> {
    let mut rng = sample_rng(seed, sample_id);
    let mut image = img.clone();
    let mut applied = Vec::new();
    for entry in &spec.entries {
        if rng.random::<f64>() < entry.probability {
            let d = entry.sample(image.height(), image.width(), &mut rng);
            image = apply_degradation(&image, entry, &d)?;
            applied.push(entry.kind);
        }
    }
    Ok(Augmented { image, applied })
}

/// Writes `<kind>_before.png` / `<kind>_after.png` for every entry, each with
/// a freshly sampled magnitude.
pub fn write_previews(img: &ImageBuffer, spec: &DegradationSpec, dir: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (i, entry) in spec.entries.iter().enumerate() {
        let mut rng = sample_rng(seed, i as u64);
        let d = entry.sample(img.height(), img.width(), &mut rng);
        let after = apply_degradation(img, entry, &d)?;
        for (suffix, im) in [("before", img), ("after", &after)] {
            let p = dir.join(format!("{}_{suffix}.png", entry.kind.name()));
            im.save_png(&p)?;
            written.push(p);
        }
    }
    Ok(written)
}
