//! Attribution-map baselines over the frozen slice classifier: CAM
//! (head-weight combination of the final feature maps) and Grad-CAM
//! (gradient-pooled channel weights), thresholded into masks through the
//! same per-slice positivity filtering the guided method uses.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::phantom::Volume;
use crate::predictor::{stack_25d, volume_predictions, Classifier};
use crate::tensor::{bilinear_upsample_2d, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttributionMethod {
    Cam,
    GradCam,
}

impl FromStr for AttributionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cam" => Ok(AttributionMethod::Cam),
            "gradcam" => Ok(AttributionMethod::GradCam),
            other => Err(Error::Config(format!(
                "unknown attribution method '{other}' (expected cam or gradcam)"
            ))),
        }
    }
}

/// Final conv feature maps for one slab: `[channels, h', w', 1]`.
pub fn features(f: &Classifier, slab: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = f.bind(&tape, false);
    let sv = tape.constant(slab.clone());
    let feats = bound.features(&tape, sv)?;
    Ok(tape.value(feats))
}

/// Logit produced by the pooling head from a feature tensor.
pub fn head_logit(f: &Classifier, feats: &Tensor) -> Result<f32> {
    let tape = Tape::new();
    let bound = f.bind(&tape, false);
    let fv = tape.constant(feats.clone());
    let logit = bound.logit_from_features(&tape, fv)?;
    Ok(tape.value(logit).data()[0])
}

/// Weighted channel sum, relu, bilinear upsample to `(out_h, out_w)`,
/// then min-max normalization to [0, 1]. A constant combined map (no
/// dynamic range, e.g. all relu-clipped) normalizes to all zeros.
pub fn combine_feature_maps(
    feats: &Tensor,
    weights: &[f32],
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    let s = feats.shape();
    if s.len() != 4 || s[3] != 1 {
        return Err(Error::Invalid(format!("feature maps must be [c, h, w, 1], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if weights.len() != c {
        return Err(Error::Invalid(format!("{} weights for {c} channels", weights.len())));
    }
    let mut map = vec![0.0f32; h * w];
    for (ci, &wc) in weights.iter().enumerate() {
        let plane = &feats.data()[ci * h * w..][..h * w];
        for (m, &v) in map.iter_mut().zip(plane) {
            *m += wc * v;
        }
    }
    for v in &mut map {
        *v = v.max(0.0);
    }
    let up = bilinear_upsample_2d(&map, h, w, out_h, out_w);
    let lo = up.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = up.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let norm: Vec<f32> = if hi > lo {
        up.iter().map(|&v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; up.len()]
    };
    Tensor::from_vec(vec![out_h, out_w], norm).map_err(Error::from)
}

/// Class activation map: the head weights combine the final feature maps
/// directly. Returns a `[h, w]` map normalized to [0, 1].
pub fn cam(f: &Classifier, slab: &Tensor) -> Result<Tensor> {
    let shape = slab.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Invalid(format!("slab must be [k, h, w, 1], got {shape:?}")));
    }
    let feats = features(f, slab)?;
    combine_feature_maps(&feats, f.head_weights().data(), shape[1], shape[2])
}

/// Grad-CAM channel weights: the spatial mean of the logit's gradient at
/// each final feature map.
pub fn grad_cam_channel_weights(f: &Classifier, slab: &Tensor) -> Result<Vec<f32>> {
    let tape = Tape::new();
    // Bind with gradients enabled so intermediate feature grads exist.
    let bound = f.bind(&tape, true);
    let sv = tape.constant(slab.clone());
    let feats = bound.features(&tape, sv)?;
    let logit = bound.logit_from_features(&tape, feats)?;
    let shape = tape.shape_of(feats);
    let grads = tape.backward(logit)?;
    let g = grads
        .get(feats)
        .ok_or_else(|| Error::Numeric("logit has no gradient at the feature maps".into()))?;
    let (c, spatial) = (shape[0], shape[1] * shape[2] * shape[3]);
    Ok((0..c)
        .map(|ci| {
            let plane = &g.data()[ci * spatial..][..spatial];
            plane.iter().sum::<f32>() / spatial as f32
        })
        .collect())
}

/// Grad-CAM: like `cam`, but the channel weights come from the pooled
/// logit gradient instead of the head. For a global-avgpool + linear head
/// the two coincide after normalization.
pub fn grad_cam(f: &Classifier, slab: &Tensor) -> Result<Tensor> {
    let shape = slab.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Invalid(format!("slab must be [k, h, w, 1], got {shape:?}")));
    }
    let weights = grad_cam_channel_weights(f, slab)?;
    let feats = features(f, slab)?;
    combine_feature_maps(&feats, &weights, shape[1], shape[2])
}

/// Per-slice attribution maps for a whole volume; `None` marks slices
/// whose nodule probability does not exceed `positive_threshold`, which
/// contribute empty attribution.
pub fn attribution_maps(
    f: &Classifier,
    x: &Volume,
    method: AttributionMethod,
    positive_threshold: f32,
) -> Result<Vec<Option<Tensor>>> {
    let probs = volume_predictions(f, x, f.k)?;
    probs
        .iter()
        .enumerate()
        .map(|(c, &p)| {
            if p > positive_threshold {
                let slab = stack_25d(x, c, f.k)?;
                let map = match method {
                    AttributionMethod::Cam => cam(f, &slab)?,
                    AttributionMethod::GradCam => grad_cam(f, &slab)?,
                };
                Ok(Some(map))
            } else {
                Ok(None)
            }
        })
        .collect()
}

/// Stack per-slice maps into a binary volume: voxels strictly above
/// `theta` become 1.0, negative-predicted slices stay all zero.
pub fn attribution_mask(
    maps: &[Option<Tensor>],
    dims: [usize; 3],
    spacing: [f32; 3],
    theta: f32,
) -> Result<Volume> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Config(format!("attribution threshold {theta} outside [0, 1]")));
    }
    if maps.len() != dims[2] {
        return Err(Error::Invalid(format!("{} maps for depth {}", maps.len(), dims[2])));
    }
    let [d0, d1, d2] = dims;
    let mut vals = vec![0.0f32; d0 * d1 * d2];
    for (slice, map) in maps.iter().enumerate() {
        let Some(map) = map else { continue };
        if map.shape() != [d0, d1] {
            return Err(Error::Invalid(format!(
                "map for slice {slice} is {:?}, volume slices are [{d0}, {d1}]",
                map.shape()
            )));
        }
        for i in 0..d0 {
            for j in 0..d1 {
                if map.data()[i * d1 + j] > theta {
                    vals[(i * d1 + j) * d2 + slice] = 1.0;
                }
            }
        }
    }
    Volume::with_values(dims, spacing, vals)
}

/// Full baseline path for one volume: per-slice attributions on positive
/// slices, stacked and thresholded into a mask.
pub fn baseline_segment(
    f: &Classifier,
    x: &Volume,
    method: AttributionMethod,
    positive_threshold: f32,
    theta: f32,
) -> Result<Volume> {
    let maps = attribution_maps(f, x, method, positive_threshold)?;
    attribution_mask(&maps, x.dims, x.spacing, theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_classifier(seed: u64, k: usize) -> Classifier {
        let mut r = rng::substream(seed, "baselines.test");
        Classifier::new(k, &mut r).unwrap()
    }

    fn random_slab(seed: u64, k: usize, h: usize, w: usize) -> Tensor {
        let mut r = rng::substream(seed, "baselines.slab");
        Tensor::rand_uniform(vec![k, h, w, 1], 0.0, 255.0, &mut r)
    }

    #[test]
    fn method_names_parse() {
        assert_eq!("cam".parse::<AttributionMethod>().unwrap(), AttributionMethod::Cam);
        assert_eq!("gradcam".parse::<AttributionMethod>().unwrap(), AttributionMethod::GradCam);
        assert!("tfg".parse::<AttributionMethod>().is_err());
    }

    #[test]
    fn zero_features_give_a_zero_map() {
        let feats = Tensor::zeros(vec![4, 2, 2, 1]);
        let map = combine_feature_maps(&feats, &[1.0, -2.0, 0.5, 3.0], 8, 8).unwrap();
        assert_eq!(map.shape(), &[8, 8]);
        assert!(map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_feature_map_with_unit_weight_is_the_map_normalized() {
        let mut r = rng::substream(1, "t");
        let feats = Tensor::randn(vec![1, 4, 4, 1], 1.0, &mut r);
        let map = combine_feature_maps(&feats, &[1.0], 4, 4).unwrap();
        let relu: Vec<f32> = feats.data().iter().map(|&v| v.max(0.0)).collect();
        let lo = relu.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = relu.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        for (m, v) in map.data().iter().zip(&relu) {
            assert!((m - (v - lo) / (hi - lo)).abs() <= 1e-6);
        }
    }

    #[test]
    fn cam_matches_an_explicit_channel_loop() {
        let clf = random_classifier(2, 3);
        let slab = random_slab(3, 3, 8, 8);
        let map = cam(&clf, &slab).unwrap();

        // Oracle: recompute the weighted sum per pixel in f64, then run
        // the same documented upsample + normalize steps.
        let feats = features(&clf, &slab).unwrap();
        let s = feats.shape().to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let weights = clf.head_weights().data().to_vec();
        let mut raw = vec![0.0f32; h * w];
        for p in 0..h * w {
            let mut acc = 0.0f64;
            for ci in 0..c {
                acc += weights[ci] as f64 * feats.data()[ci * h * w + p] as f64;
            }
            raw[p] = (acc as f32).max(0.0);
        }
        let up = bilinear_upsample_2d(&raw, h, w, 8, 8);
        let lo = up.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = up.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        for (m, &v) in map.data().iter().zip(&up) {
            let want = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
            assert!((m - want).abs() <= 1e-5, "{m} vs {want}");
        }
    }

    #[test]
    fn grad_cam_equals_cam_for_the_pooling_head() {
        // The head is global-avgpool + linear, so the gradient-pooled
        // weights are the head weights scaled by a positive constant and
        // the normalized maps coincide up to f32 round-off.
        for seed in 0..5u64 {
            let clf = random_classifier(10 + seed, 3);
            let slab = random_slab(20 + seed, 3, 8, 8);
            let a = cam(&clf, &slab).unwrap();
            let b = grad_cam(&clf, &slab).unwrap();
            let worst = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(worst <= 1e-4, "seed {seed}: maps differ by {worst}");
        }
    }

    #[test]
    fn gradient_channel_weights_match_finite_differences() {
        let clf = random_classifier(4, 3);
        let slab = random_slab(5, 3, 8, 8);
        let weights = grad_cam_channel_weights(&clf, &slab).unwrap();
        let feats = features(&clf, &slab).unwrap();
        let s = feats.shape().to_vec();
        let spatial = s[1] * s[2] * s[3];

        // Shift one whole channel by +-eps: the logit moves by
        // eps * spatial * weight.
        let eps = 1e-2f32;
        for ci in [0usize, 7, 18, 31] {
            let mut plus = feats.data().to_vec();
            let mut minus = feats.data().to_vec();
            for p in 0..spatial {
                plus[ci * spatial + p] += eps;
                minus[ci * spatial + p] -= eps;
            }
            let lp = head_logit(&clf, &Tensor::from_vec(s.clone(), plus).unwrap()).unwrap();
            let lm = head_logit(&clf, &Tensor::from_vec(s.clone(), minus).unwrap()).unwrap();
            let fd = (lp - lm) / (2.0 * eps * spatial as f32);
            assert!(
                (fd - weights[ci]).abs() <= 1e-2 * weights[ci].abs().max(1e-3),
                "channel {ci}: finite difference {fd} vs {}",
                weights[ci]
            );
        }
    }

    #[test]
    fn zero_head_zeroes_both_attributions() {
        let mut clf = random_classifier(6, 3);
        clf.params.set_value("w2", Tensor::zeros(vec![32, 1])).unwrap();
        let slab = random_slab(7, 3, 8, 8);
        assert!(cam(&clf, &slab).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grad_cam(&clf, &slab).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attribution_maps_are_deterministic() {
        let clf = random_classifier(8, 3);
        let slab = random_slab(9, 3, 8, 8);
        assert!(cam(&clf, &slab).unwrap().bits_eq(&cam(&clf, &slab).unwrap()));
        assert!(grad_cam(&clf, &slab).unwrap().bits_eq(&grad_cam(&clf, &slab).unwrap()));
    }

    #[test]
    fn mask_stacking_and_thresholds() {
        let dims = [4, 4, 3];
        let uniform = Tensor::full(vec![4, 4], 0.6);
        let maps = vec![Some(uniform.clone()), None, Some(uniform)];
        let mask = attribution_mask(&maps, dims, [1.0; 3], 0.5).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(mask.at(i, j, 0), 1.0);
                assert_eq!(mask.at(i, j, 1), 0.0);
                assert_eq!(mask.at(i, j, 2), 1.0);
            }
        }
        // theta = 1.0 empties everything, even saturated maps.
        let ones = Tensor::full(vec![4, 4], 1.0);
        let mask = attribution_mask(&[Some(ones), None, None], dims, [1.0; 3], 1.0).unwrap();
        assert!(mask.values.iter().all(|&v| v == 0.0));
        assert!(attribution_mask(&[None, None], dims, [1.0; 3], 0.5).is_err());
        let bad = Tensor::full(vec![2, 2], 0.6);
        assert!(attribution_mask(&[Some(bad), None, None], dims, [1.0; 3], 0.5).is_err());
        assert!(attribution_mask(&[None, None, None], dims, [1.0; 3], 1.5).is_err());
    }

    #[test]
    fn geometry_places_map_pixels_on_their_slice() {
        // One hot pixel at (1, 2) of slice 1 must land at volume (1, 2, 1).
        let mut vals = vec![0.0f32; 16];
        vals[1 * 4 + 2] = 0.9;
        let map = Tensor::from_vec(vec![4, 4], vals).unwrap();
        let maps = vec![None, Some(map), None];
        let mask = attribution_mask(&maps, [4, 4, 3], [1.0; 3], 0.5).unwrap();
        let total: f32 = mask.values.iter().sum();
        assert_eq!(total, 1.0);
        assert_eq!(mask.at(1, 2, 1), 1.0);
    }

    #[test]
    fn negative_predictions_give_an_empty_baseline_mask() {
        // Zero weights: every probability is exactly 0.5, never above it.
        let mut clf = random_classifier(11, 3);
        let names: Vec<String> = clf.params.iter().map(|p| p.name.clone()).collect();
        for n in &names {
            let shape = clf.params.get(n).unwrap().shape().to_vec();
            clf.params.set_value(n, Tensor::zeros(shape)).unwrap();
        }
        let mut r = rng::substream(12, "t");
        let x = Volume::from_tensor(
            &Tensor::rand_uniform(vec![1, 8, 8, 8], 0.0, 255.0, &mut r),
            [1.0; 3],
        )
        .unwrap();
        let mask = baseline_segment(&clf, &x, AttributionMethod::Cam, 0.5, 0.5).unwrap();
        assert!(mask.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_case_produces_a_valid_normalized_mask_volume() {
        let clf = random_classifier(13, 3);
        let mut r = rng::substream(14, "t");
        let x = Volume::from_tensor(
            &Tensor::rand_uniform(vec![1, 8, 8, 8], 0.0, 255.0, &mut r),
            [1.0; 3],
        )
        .unwrap();
        for method in [AttributionMethod::Cam, AttributionMethod::GradCam] {
            let maps = attribution_maps(&clf, &x, method, 0.5).unwrap();
            assert_eq!(maps.len(), 8);
            for map in maps.iter().flatten() {
                assert_eq!(map.shape(), &[8, 8]);
                assert!(map.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
            let mask = attribution_mask(&maps, x.dims, x.spacing, 0.5).unwrap();
            assert!(mask.values.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}
