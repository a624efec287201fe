//! Gradient-weighted class activation maps on the post-attention features.
//!
//! Channel weights are spatial means of the target logit's gradient with
//! respect to the final feature map; the map is the rectified weighted sum
//! of channels.

use crate::augment::{preprocess, ImageBuffer, Normalization};
use crate::error::{shape_err, Error, Result};
use crate::model::Model;
use crate::nn::{global_avg_pool, Pass};
use crate::tensor::{Graph, Tensor};
use rayon::prelude::*;

/// Blend weight of the colormap at full heat.
pub const OVERLAY_ALPHA: f32 = 0.4;

#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    /// Rectified map at feature resolution, row-major `[feature_hw.0, feature_hw.1]`.
    pub heatmap: Vec<f32>,
    pub feature_hw: (usize, usize),
    /// Bilinearly upsampled and max-normalized map, row-major `[height, width]`.
    pub upsampled: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub target_class: usize,
    /// The raw map was identically zero; `upsampled` is all zeros.
    pub is_zero: bool,
}

impl CamMap {
    /// Weighted channel sum of `features` `[C, h, w]`, rectified, upsampled
    /// to `height × width` and normalized by its maximum.
    pub fn from_features(
        features: &[f32],
        grads: &[f32],
        channels: usize,
        feature_hw: (usize, usize),
        (height, width): (usize, usize),
        target_class: usize,
    ) -> Result<Self> {
        let plane = feature_hw.0 * feature_hw.1;
        if features.len() != channels * plane || grads.len() != features.len() || plane == 0 {
            return Err(shape_err!(
                "features {} / gradients {} for {channels}x{}x{}",
                features.len(),
                grads.len(),
                feature_hw.0,
                feature_hw.1
            ));
        }
        let mut heatmap = vec![0.0f32; plane];
        for (a, g) in features.chunks(plane).zip(grads.chunks(plane)) {
            let alpha = g.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            for (h, &v) in heatmap.iter_mut().zip(a) {
                *h += (alpha * v as f64) as f32;
            }
        }
        for h in &mut heatmap {
            *h = h.max(0.0);
        }
        let is_zero = heatmap.iter().all(|&v| v == 0.0);
        let upsampled = if is_zero {
            vec![0.0; height * width]
        } else {
            let small = ImageBuffer::from_fn(feature_hw.0, feature_hw.1, |y, x, _| heatmap[y * feature_hw.1 + x])?;
            let big = small.resize(height, width)?;
            let raw: Vec<f32> = big.data().chunks(3).map(|px| px[0].max(0.0)).collect();
            let peak = raw.iter().copied().fold(0.0f32, f32::max);
            if peak > 0.0 {
                raw.iter().map(|&v| (v / peak).min(1.0)).collect()
            } else {
                raw
            }
        };
        Ok(Self {
            heatmap,
            feature_hw,
            upsampled,
            height,
            width,
            target_class,
            is_zero,
        })
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.upsampled[y * self.width + x]
    }

    /// The normalized map rendered through [`colormap`].
    pub fn to_image(&self) -> ImageBuffer {
        ImageBuffer::from_fn(self.height, self.width, |y, x, c| colormap(self.at(y, x))[c]).expect("non-empty map")
    }

    /// Upsampled map quantized to 16 bits.
    pub fn to_gray16(&self) -> image::ImageBuffer<image::Luma<u16>, Vec<u16>> {
        let raw = self.upsampled.iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
        image::ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("map size matches")
    }
}

/// Black-red-yellow-white ramp; every channel is non-decreasing in `t`.
pub fn colormap(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0) * 3.0;
    [t.min(1.0), (t - 1.0).clamp(0.0, 1.0), (t - 2.0).clamp(0.0, 1.0)]
}

/// Blends the colormap into `image`, weighted by `OVERLAY_ALPHA` times the
/// local heat, so cold pixels are left untouched.
pub fn overlay(cam: &CamMap, image: &ImageBuffer) -> Result<ImageBuffer> {
    if (image.height(), image.width()) != (cam.height, cam.width) {
        return Err(shape_err!(
            "map is {}x{}, image is {}x{}",
            cam.height,
            cam.width,
            image.height(),
            image.width()
        ));
    }
    ImageBuffer::from_fn(cam.height, cam.width, |y, x, c| {
        let h = cam.at(y, x);
        let w = OVERLAY_ALPHA * h;
        image.get(y, x, c) * (1.0 - w) + colormap(h)[c] * w
    })
}

/// Maps for a preprocessed batch `[B, 3, hw, hw]`, one target per sample.
pub fn grad_cam_batch(model: &Model<f32>, batch: &Tensor<f32>, targets: &[usize]) -> Result<Vec<CamMap>> {
    let s = batch.shape();
    if s.len() != 4 || s[0] != targets.len() {
        return Err(shape_err!("{} targets for batch {s:?}", targets.len()));
    }
    let classes = model.config.head.num_classes;
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::Domain(format!("target class {bad} out of range for {classes} classes")));
    }
    let features = {
        let mut g = Graph::new();
        let mut pass = Pass::eval(&mut g);
        let x = pass.graph.constant(batch);
        let f = model.forward_features(&mut pass, x)?;
        pass.graph.tensor(f)
    };
    let fs = features.shape().to_vec();
    let mut g = Graph::new();
    let mut pass = Pass::eval(&mut g);
    let leaf = pass.graph.input(&fs, features.data().to_vec(), true)?;
    let pooled = global_avg_pool(pass.graph, leaf)?;
    let logits = model.head(&mut pass, pooled)?;
    // samples are independent in eval mode, so one sweep yields every gradient
    let picked = pass.graph.gather(logits, targets)?;
    let total = pass.graph.sum_all(picked)?;
    pass.graph.backward(total)?;
    let grads = pass.graph.grad(leaf).ok_or_else(|| Error::Contract("feature map received no gradient".into()))?;
    let per = fs[1] * fs[2] * fs[3];
    let out_hw = (s[2], s[3]);
    features
        .data()
        .par_chunks(per)
        .zip(grads.par_chunks(per))
        .zip(targets.par_iter())
        .map(|((a, gr), &t)| CamMap::from_features(a, gr, fs[1], (fs[2], fs[3]), out_hw, t))
        .collect()
}

/// Map for one preprocessed image `[3, hw, hw]`.
pub fn grad_cam(model: &Model<f32>, image: &Tensor<f32>, target_class: usize) -> Result<CamMap> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(shape_err!("expected [C, H, W], got {s:?}"));
    }
    let batch = image.clone().reshape(&[1, s[0], s[1], s[2]])?;
    Ok(grad_cam_batch(model, &batch, &[target_class])?.remove(0))
}

/// Preprocesses raw images to the model's input size and computes their maps.
pub fn grad_cam_images(
    model: &Model<f32>,
    images: &[ImageBuffer],
    norm: &Normalization,
    target_class: usize,
) -> Result<Vec<CamMap>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let hw = model.config.input_hw;
    let tensors: Vec<Tensor<f32>> = images.par_iter().map(|img| preprocess(img, hw, norm)).collect::<Result<_>>()?;
    grad_cam_batch(model, &Tensor::stack(&tensors)?, &vec![target_class; images.len()])
}

/// Mean normalized heat over mask pixels and over the rest.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Concentration {
    pub inside: f64,
    pub outside: f64,
}

impl Concentration {
    pub fn is_concentrated(&self) -> bool {
        self.inside > self.outside
    }
}

/// Compares heat on and off a row-major mask of size `mask_hw`, resampled
/// to the map by nearest neighbour. `None` when either region is empty.
pub fn concentration(cam: &CamMap, mask: &[bool], mask_hw: (usize, usize)) -> Result<Option<Concentration>> {
    if mask.len() != mask_hw.0 * mask_hw.1 || mask.is_empty() {
        return Err(shape_err!("mask of {} pixels for {}x{}", mask.len(), mask_hw.0, mask_hw.1));
    }
    let (mut sum, mut n) = ([0.0f64; 2], [0usize; 2]);
    for y in 0..cam.height {
        let my = y * mask_hw.0 / cam.height;
        for x in 0..cam.width {
            let mx = x * mask_hw.1 / cam.width;
            let k = mask[my * mask_hw.1 + mx] as usize;
            sum[k] += cam.at(y, x) as f64;
            n[k] += 1;
        }
    }
    if n[0] == 0 || n[1] == 0 {
        return Ok(None);
    }
    Ok(Some(Concentration {
        inside: sum[1] / n[1] as f64,
        outside: sum[0] / n[0] as f64,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchConfig;
    use crate::loss::CRACK;
    use crate::nn::Module;
    use proptest::prelude::*;

    fn tiny(seed: u64) -> Model<f32> {
        Model::new(&ArchConfig::preset("tiny-cbam").unwrap(), seed).unwrap()
    }

    fn input(seed: u64) -> Tensor<f32> {
        Tensor::from_fn(&[3, 64, 64], |i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f32 / 500.0) - 1.0)
    }

    fn features(model: &Model<f32>, x: &Tensor<f32>) -> Tensor<f32> {
        let mut g = Graph::new();
        let mut pass = Pass::eval(&mut g);
        let v = pass.graph.constant(&x.clone().reshape(&[1, 3, 64, 64]).unwrap());
        let f = model.forward_features(&mut pass, v).unwrap();
        pass.graph.tensor(f)
    }

    #[test]
    fn single_channel_logit_gives_that_channel() {
        let mut m = tiny(1);
        let c = m.fc.inputs();
        // crack logit = spatial mean of channel 0
        m.fc.weight = Tensor::from_fn(&[2, c], |i| if i == c { 1.0 } else { 0.0 });
        m.fc.bias = Tensor::zeros(&[2]);
        let x = input(3);
        let cam = grad_cam(&m, &x, CRACK).unwrap();
        let f = features(&m, &x);
        let plane = cam.feature_hw.0 * cam.feature_hw.1;
        let relu0: Vec<f32> = f.data()[..plane].iter().map(|v| v.max(0.0)).collect();
        let scale = 1.0 / plane as f32;
        for (h, r) in cam.heatmap.iter().zip(&relu0) {
            assert!((h - r * scale).abs() <= 1e-6 * (1.0 + r.abs()), "{h} vs {}", r * scale);
        }
    }

    #[test]
    fn constant_logit_gives_zero_map() {
        let mut m = tiny(2);
        m.fc.weight = Tensor::zeros(m.fc.weight.shape());
        let cam = grad_cam(&m, &input(0), CRACK).unwrap();
        assert!(cam.is_zero);
        assert!(cam.heatmap.iter().chain(&cam.upsampled).all(|&v| v == 0.0));
        assert_eq!(cam.upsampled.len(), 64 * 64);
    }

    #[test]
    fn resnet18_map_is_seven_by_seven() {
        let m = Model::<f32>::new(&ArchConfig::preset("resnet18-cbam").unwrap(), 0).unwrap();
        let x = Tensor::from_fn(&[3, 224, 224], |i| ((i % 29) as f32 / 29.0) - 0.5);
        let cam = grad_cam(&m, &x, CRACK).unwrap();
        assert_eq!(cam.feature_hw, (7, 7));
        assert_eq!((cam.height, cam.width, cam.upsampled.len()), (224, 224, 224 * 224));
    }

    #[test]
    fn batch_matches_single_calls() {
        let m = tiny(5);
        let xs = [input(1), input(2)];
        let batch = Tensor::stack(&xs).unwrap();
        let both = grad_cam_batch(&m, &batch, &[CRACK, 0]).unwrap();
        for (k, (x, t)) in xs.iter().zip([CRACK, 0]).enumerate() {
            let one = grad_cam(&m, x, t).unwrap();
            for (a, b) in one.heatmap.iter().zip(&both[k].heatmap) {
                assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn bad_target_is_rejected() {
        assert!(matches!(grad_cam(&tiny(0), &input(0), 2), Err(Error::Domain(_))));
    }

    #[test]
    fn eval_call_leaves_model_untouched() {
        let m = tiny(4);
        let before: Vec<f32> = {
            let mut v = Vec::new();
            m.visit("", &mut |_, t| v.extend_from_slice(t.data()));
            v
        };
        grad_cam(&m, &input(1), CRACK).unwrap();
        let mut after = Vec::new();
        m.visit("", &mut |_, t| after.extend_from_slice(t.data()));
        assert_eq!(before, after);
    }

    fn flat(h: usize, w: usize, v: f32) -> CamMap {
        CamMap {
            heatmap: vec![v; 4],
            feature_hw: (2, 2),
            upsampled: vec![v; h * w],
            height: h,
            width: w,
            target_class: CRACK,
            is_zero: v == 0.0,
        }
    }

    #[test]
    fn overlay_endpoints() {
        let img = ImageBuffer::from_fn(4, 5, |y, x, c| (y * 5 + x + c) as f32 / 30.0).unwrap();
        assert_eq!(overlay(&flat(4, 5, 0.0), &img).unwrap(), img);
        let hot = overlay(&flat(4, 5, 1.0), &img).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                for c in 0..3 {
                    let want = 0.6 * img.get(y, x, c) + 0.4 * colormap(1.0)[c];
                    assert!((hot.get(y, x, c) - want).abs() < 1e-6);
                }
            }
        }
        assert_eq!(colormap(1.0), [1.0, 1.0, 1.0]);
        assert!(matches!(overlay(&flat(5, 4, 0.5), &img), Err(Error::Shape(_))));
    }

    #[test]
    fn concentration_counts_regions() {
        let mut cam = flat(4, 4, 0.0);
        cam.upsampled[5] = 1.0;
        let mut mask = vec![false; 16];
        mask[5] = true;
        let c = concentration(&cam, &mask, (4, 4)).unwrap().unwrap();
        assert_eq!((c.inside, c.outside), (1.0, 0.0));
        assert!(c.is_concentrated());
        assert_eq!(concentration(&cam, &[false; 16], (4, 4)).unwrap(), None);
    }

    proptest! {
        #[test]
        fn maps_are_bounded(
            feats in proptest::collection::vec(-3.0f32..3.0, 3 * 9),
            grads in proptest::collection::vec(-3.0f32..3.0, 3 * 9),
        ) {
            let cam = CamMap::from_features(&feats, &grads, 3, (3, 3), (11, 13), CRACK).unwrap();
            prop_assert!(cam.heatmap.iter().all(|&v| v >= 0.0));
            prop_assert!(cam.upsampled.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let peak = cam.upsampled.iter().copied().fold(0.0f32, f32::max);
            if cam.is_zero {
                prop_assert_eq!(peak, 0.0);
            } else {
                prop_assert!((peak - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn colormap_is_monotone(a in 0.0f32..1.0, b in 0.0f32..1.0) {
            let (lo, hi) = (colormap(a.min(b)), colormap(a.max(b)));
            prop_assert!((0..3).all(|c| lo[c] <= hi[c]));
        }
    }
}
