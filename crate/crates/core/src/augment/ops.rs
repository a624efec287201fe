use super::ImageBuffer;
use crate::error::{Error, Result};
use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

/// Shadow edges ramp to full strength over this many pixels.
pub const SHADOW_FEATHER: f64 = 5.0;
pub const LOW_LIGHT_GAMMA: f32 = 1.2;

/// One concrete degradation with all of its random choices resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Degradation {
    /// `v → gain·(v − 0.5) + 0.5 + bias`
    Contrast { gain: f64, bias: f64 },
    MotionBlur { length: usize, angle_deg: f64 },
    DefocusBlur { radius: f64 },
    /// `v → (1 − density)·v + density·haze`
    Fog { density: f64, haze: f64 },
    /// Convex quadrilateral (pixel coordinates, `[x, y]`) darkened by `factor`.
    Shadow { factor: f64, corners: [[f64; 2]; 4] },
    /// Corner `i` moves by `offsets[i] · extent · (width, height)`, offsets in `[-1, 1]`.
    Perspective { extent: f64, offsets: [[f64; 2]; 4] },
    ColorJitter { gains: [f64; 3], shift: f64 },
    /// `v → (gain·v)^1.2`
    LowLight { gain: f64 },
}

impl Degradation {
    /// Values that must fall inside the configured magnitude range.
    pub fn magnitudes(&self) -> Vec<f64> {
        match *self {
            Degradation::Contrast { gain, .. } => vec![gain],
            Degradation::MotionBlur { length, .. } => vec![length as f64],
            Degradation::DefocusBlur { radius } => vec![radius],
            Degradation::Fog { density, .. } => vec![density],
            Degradation::Shadow { factor, .. } => vec![factor],
            Degradation::Perspective { extent, .. } => vec![extent],
            Degradation::ColorJitter { gains, .. } => gains.to_vec(),
            Degradation::LowLight { gain } => vec![gain],
        }
    }

    fn check(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Domain(format!("invalid {what} in {self:?}")));
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        match *self {
            Degradation::Contrast { gain, bias } if !(gain > 0.0 && bias.is_finite()) => bad("gain/bias"),
            Degradation::MotionBlur { length, angle_deg } if length == 0 || !angle_deg.is_finite() => bad("length"),
            Degradation::DefocusBlur { radius } if !(radius >= 0.0 && radius < 64.0) => bad("radius"),
            Degradation::Fog { density, haze } if !(unit(density) && unit(haze)) => bad("density/haze"),
            Degradation::Shadow { factor, corners } if !(unit(factor) && corners.iter().flatten().all(|v| v.is_finite())) => bad("factor"),
            Degradation::Perspective { extent, offsets }
                if !((0.0..0.5).contains(&extent) && offsets.iter().flatten().all(|v| (-1.0..=1.0).contains(v))) =>
            {
                bad("extent/offsets")
            }
            Degradation::ColorJitter { gains, shift } if !(gains.iter().all(|&g| g >= 0.0 && g.is_finite()) && shift.is_finite()) => bad("gains"),
            Degradation::LowLight { gain } if !(gain > 0.0 && gain <= 1.0) => bad("gain"),
            _ => Ok(()),
        }
    }

    /// Applies the degradation; output is clamped to `[0, 1]`.
    pub fn apply(&self, img: &ImageBuffer) -> Result<ImageBuffer> {
        self.check()?;
        let out = match *self {
            Degradation::Contrast { gain, bias } => {
                let (g, b) = (gain as f32, bias as f32);
                img.map(|v, _| g * (v - 0.5) + 0.5 + b)
            }
            Degradation::MotionBlur { length, angle_deg } => convolve(img, &line_kernel(length, angle_deg)),
            Degradation::DefocusBlur { radius } => convolve(img, &disk_kernel(radius)),
            Degradation::Fog { density, haze } => {
                let (t, f) = (density as f32, haze as f32);
                img.map(|v, _| (1.0 - t) * v + t * f)
            }
            Degradation::Shadow { factor, corners } => shadow(img, factor, &corners),
            Degradation::Perspective { extent, offsets } => perspective(img, extent, &offsets)?,
            Degradation::ColorJitter { gains, shift } => img.map(|v, c| gains[c] as f32 * v + shift as f32),
            Degradation::LowLight { gain } => {
                let g = gain as f32;
                img.map(|v, _| (g * v.max(0.0)).powf(LOW_LIGHT_GAMMA))
            }
        };
        Ok(out.clamp01())
    }
}

/// Reflect index into `[0, n)` without repeating the edge sample.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

fn reflect_coord(v: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let m = v.rem_euclid(period);
    if m > (n - 1) as f64 {
        period - m
    } else {
        m
    }
}

/// `(dy, dx, weight)` taps summing to one.
type Kernel = Vec<(isize, isize, f32)>;

/// Unit-weight samples along a centered segment, merged per pixel.
pub fn line_kernel(length: usize, angle_deg: f64) -> Kernel {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let mut taps: Kernel = Vec::new();
    let w = 1.0 / length as f32;
    for i in 0..length {
        let t = i as f64 - (length - 1) as f64 / 2.0;
        let dx = (t * c).round() as isize;
        let dy = (t * s).round() as isize;
        match taps.iter_mut().find(|(y, x, _)| *y == dy && *x == dx) {
            Some(tap) => tap.2 += w,
            None => taps.push((dy, dx, w)),
        }
    }
    taps
}

/// Uniform disk `dx² + dy² ≤ r²`.
pub fn disk_kernel(radius: f64) -> Kernel {
    let r = radius.floor() as isize;
    let mut taps: Kernel = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dx * dx + dy * dy) as f64) <= radius * radius {
                taps.push((dy, dx, 1.0));
            }
        }
    }
    let n = taps.len() as f32;
    taps.iter_mut().for_each(|t| t.2 /= n);
    taps
}

/// Correlation with reflect padding.
pub fn convolve(img: &ImageBuffer, kernel: &Kernel) -> ImageBuffer {
    let (h, w) = (img.height(), img.width());
    let mut out = ImageBuffer::filled(h, w, [0.0; 3]).expect("non-empty");
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for &(dy, dx, k) in kernel {
                let sy = reflect(y as isize + dy, h);
                let sx = reflect(x as isize + dx, w);
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += k * img.get(sy, sx, c);
                }
            }
            for (c, a) in acc.into_iter().enumerate() {
                out.set(y, x, c, a);
            }
        }
    }
    out
}

fn shadow(img: &ImageBuffer, factor: f64, corners: &[[f64; 2]; 4]) -> ImageBuffer {
    let area2: f64 = (0..4)
        .map(|i| {
            let (a, b) = (corners[i], corners[(i + 1) % 4]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    let orient = if area2 >= 0.0 { 1.0 } else { -1.0 };
    // inward unit normals and offsets of the four edge lines
    let edges: Vec<(f64, f64, f64)> = (0..4)
        .filter_map(|i| {
            let (a, b) = (corners[i], corners[(i + 1) % 4]);
            let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
            let len = (ex * ex + ey * ey).sqrt();
            (len > 1e-9).then(|| {
                let (nx, ny) = (-ey * orient / len, ex * orient / len);
                (nx, ny, -(nx * a[0] + ny * a[1]))
            })
        })
        .collect();
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (px, py) = (x as f64, y as f64);
            let inside = edges.iter().map(|&(nx, ny, d)| nx * px + ny * py + d).fold(f64::INFINITY, f64::min);
            let alpha = (inside / SHADOW_FEATHER).clamp(0.0, 1.0);
            if alpha > 0.0 {
                let m = (1.0 - alpha * (1.0 - factor)) as f32;
                for c in 0..3 {
                    out.set(y, x, c, img.get(y, x, c) * m);
                }
            }
        }
    }
    out
}

/// Homography taking each `src[i]` to `dst[i]`.
pub(crate) fn homography(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> Result<SMatrix<f64, 3, 3>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let ([x, y], [u, v]) = (src[i], dst[i]);
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Degenerate("perspective corners are collinear".into()))?;
    Ok(SMatrix::<f64, 3, 3>::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

fn sample_bilinear(img: &ImageBuffer, x: f64, y: f64, c: usize) -> f32 {
    let x = reflect_coord(x, img.width());
    let y = reflect_coord(y, img.height());
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width() - 1), (y0 + 1).min(img.height() - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let top = img.get(y0, x0, c) * (1.0 - fx) + img.get(y0, x1, c) * fx;
    let bottom = img.get(y1, x0, c) * (1.0 - fx) + img.get(y1, x1, c) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn perspective(img: &ImageBuffer, extent: f64, offsets: &[[f64; 2]; 4]) -> Result<ImageBuffer> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let (xm, ym) = (w - 1.0, h - 1.0);
    let corners = [[0.0, 0.0], [xm, 0.0], [xm, ym], [0.0, ym]];
    let mut moved = corners;
    for (m, o) in moved.iter_mut().zip(offsets) {
        m[0] += o[0] * extent * w;
        m[1] += o[1] * extent * h;
    }
    // output pixel → source location
    let hm = homography(&corners, &moved)?;
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let p = hm * nalgebra::Vector3::new(x as f64, y as f64, 1.0);
            let (sx, sy) = (p[0] / p[2], p[1] / p[2]);
            for c in 0..3 {
                out.set(y, x, c, sample_bilinear(img, sx, sy, c));
            }
        }
    }
    Ok(out)
}
