//! Reference attribution methods for the comparison table: integrated
//! gradients, GradCAM, a grid-patch LIME variant, and occlusion.
//!
//! All four return the same channel-summed `RelevanceMap` as the LRP engine
//! so they plug into the metrics unchanged.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::lrp::RelevanceMap;
use crate::net::{Layer, Model};
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Partition of an image into square patches, validated to tile exactly.
#[derive(Debug, Clone, Copy)]
pub struct PatchGrid {
    patch_size: usize,
    rows: usize,
    cols: usize,
    height: usize,
    width: usize,
}

impl PatchGrid {
    pub fn new(patch_size: usize, height: usize, width: usize) -> Result<PatchGrid> {
        if patch_size == 0 || height % patch_size != 0 || width % patch_size != 0 {
            return Err(Error::InvalidArgument(format!(
                "patch size {patch_size} does not tile a {height}x{width} image"
            )));
        }
        Ok(PatchGrid {
            patch_size,
            rows: height / patch_size,
            cols: width / patch_size,
            height,
            width,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.rows * self.cols
    }

    fn check_input(&self, input: &Tensor) -> Result<(usize, usize, usize)> {
        match *input.shape() {
            [c, h, w] if h == self.height && w == self.width => Ok((c, h, w)),
            _ => Err(Error::shape(
                "patch grid input",
                &[0, self.height, self.width],
                input.shape(),
            )),
        }
    }

    /// Patch index of a spatial position.
    fn patch_of(&self, row: usize, col: usize) -> usize {
        (row / self.patch_size) * self.cols + col / self.patch_size
    }

    /// Copy of `input` with every patch whose mask entry is false filled
    /// with `fill`, across all channels.
    pub fn apply_mask(&self, input: &Tensor, mask: &[bool], fill: f32) -> Result<Tensor> {
        let (c, h, w) = self.check_input(input)?;
        if mask.len() != self.n_patches() {
            return Err(Error::shape("patch mask", &[self.n_patches()], &[mask.len()]));
        }
        let mut data = input.data().to_vec();
        for row in 0..h {
            for col in 0..w {
                if !mask[self.patch_of(row, col)] {
                    for ch in 0..c {
                        data[ch * h * w + row * w + col] = fill;
                    }
                }
            }
        }
        Tensor::new(input.shape().to_vec(), data)
    }

    /// Expand one value per patch to a full (H, W) pixel map.
    fn broadcast(&self, per_patch: &[f64]) -> Tensor {
        let mut data = vec![0.0f32; self.height * self.width];
        for row in 0..self.height {
            for col in 0..self.width {
                data[row * self.width + col] = per_patch[self.patch_of(row, col)] as f32;
            }
        }
        Tensor::from_raw(vec![self.height, self.width], data)
    }
}

fn check_target(model: &Model, target_class: usize) -> Result<()> {
    if target_class >= model.n_classes() {
        return Err(Error::InvalidTargetClass {
            class: target_class,
            n_classes: model.n_classes(),
        });
    }
    Ok(())
}

fn one_hot_logit_grad(model: &Model, target_class: usize) -> Tensor {
    let mut grad = vec![0.0f32; model.n_classes()];
    grad[target_class] = 1.0;
    Tensor::from_raw(vec![model.n_classes()], grad)
}

/// Sum a (C, H, W) buffer over channels into an (H, W) tensor.
fn channel_sum(values: &[f64], c: usize, h: usize, w: usize) -> Tensor {
    let mut out = vec![0.0f32; h * w];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for ch in 0..c {
            acc += values[ch * h * w + i];
        }
        *o = acc as f32;
    }
    Tensor::from_raw(vec![h, w], out)
}

/// Integrated gradients along the straight path from `baseline` to `input`,
/// with midpoint-rule quadrature: the gradient of the target logit is
/// averaged at `steps` path midpoints and multiplied by (input − baseline).
pub fn integrated_gradients(
    model: &Model,
    input: &Tensor,
    target_class: usize,
    baseline: &Tensor,
    steps: usize,
) -> Result<RelevanceMap> {
    let [c, h, w] = model.input_shape;
    if input.shape() != [c, h, w] {
        return Err(Error::shape("integrated gradients input", &[c, h, w], input.shape()));
    }
    if baseline.shape() != input.shape() {
        return Err(Error::shape(
            "integrated gradients baseline",
            input.shape(),
            baseline.shape(),
        ));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "integrated gradients needs at least one step".into(),
        ));
    }
    check_target(model, target_class)?;

    let out_grad = one_hot_logit_grad(model, target_class);
    let mut grad_acc = vec![0.0f64; input.len()];
    for t in 1..=steps {
        let frac = (t as f64 - 0.5) / steps as f64;
        let point_data: Vec<f32> = input
            .data()
            .iter()
            .zip(baseline.data())
            .map(|(x, b)| b + frac as f32 * (x - b))
            .collect();
        let point = Tensor::new(input.shape().to_vec(), point_data)?;
        let trace = model.forward(&point)?;
        let grads = model.backward(&trace, &out_grad)?;
        for (acc, g) in grad_acc.iter_mut().zip(grads.input.data()) {
            *acc += f64::from(*g);
        }
    }

    let attribution: Vec<f64> = input
        .data()
        .iter()
        .zip(baseline.data())
        .zip(&grad_acc)
        .map(|((x, b), acc)| f64::from(x - b) * (acc / steps as f64))
        .collect();
    Ok(RelevanceMap {
        values: channel_sum(&attribution, c, h, w),
        target_class,
        method: "integrated_gradients".into(),
        rules: None,
    })
}

/// Bilinear resize with half-pixel-centered sampling and edge clamping.
fn bilinear_upsample(src: &[f64], h_src: usize, w_src: usize, h_dst: usize, w_dst: usize) -> Vec<f64> {
    let mut dst = vec![0.0f64; h_dst * w_dst];
    let sy = h_src as f64 / h_dst as f64;
    let sx = w_src as f64 / w_dst as f64;
    for y in 0..h_dst {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h_src - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h_src - 1);
        let wy = fy - y0 as f64;
        for x in 0..w_dst {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w_src - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w_src - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * w_src + x0] * (1.0 - wx) + src[y0 * w_src + x1] * wx;
            let bottom = src[y1 * w_src + x0] * (1.0 - wx) + src[y1 * w_src + x1] * wx;
            dst[y * w_dst + x] = top * (1.0 - wy) + bottom * wy;
        }
    }
    dst
}

/// GradCAM at the last Conv2d layer: feature maps weighted by the spatial
/// mean of the target logit's gradient, rectified, bilinearly upsampled to
/// the input size. Non-negative by construction.
pub fn gradcam(model: &Model, input: &Tensor, target_class: usize) -> Result<RelevanceMap> {
    check_target(model, target_class)?;
    let conv_idx = model
        .layers
        .iter()
        .rposition(|l| matches!(l, Layer::Conv2d { .. }))
        .ok_or_else(|| Error::InvalidModel("gradcam needs at least one Conv2d layer".into()))?;

    let trace = model.forward(input)?;
    let grads = model.backward(&trace, &one_hot_logit_grad(model, target_class))?;
    let features = trace.output(conv_idx);
    let feature_grad = &grads.activations[conv_idx + 1];
    let [k, fh, fw] = *features.shape() else {
        return Err(Error::shape("gradcam feature maps", &[0, 0, 0], features.shape()));
    };

    let plane = fh * fw;
    let mut cam = vec![0.0f64; plane];
    for ch in 0..k {
        let gslice = &feature_grad.data()[ch * plane..(ch + 1) * plane];
        let weight: f64 = gslice.iter().map(|g| f64::from(*g)).sum::<f64>() / plane as f64;
        let fslice = &features.data()[ch * plane..(ch + 1) * plane];
        for (acc, f) in cam.iter_mut().zip(fslice) {
            *acc += weight * f64::from(*f);
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }

    let [_, h, w] = model.input_shape;
    let upsampled = bilinear_upsample(&cam, fh, fw, h, w);
    let values: Vec<f32> = upsampled.iter().map(|v| *v as f32).collect();
    Ok(RelevanceMap {
        values: Tensor::from_raw(vec![h, w], values),
        target_class,
        method: "gradcam".into(),
        rules: None,
    })
}

/// Weighted ridge solve of (XᵀWX + Λ)β = XᵀWy with the intercept (column 0)
/// unpenalized. Returns None when the system is not positive definite.
fn ridge_solve(
    design: &DMatrix<f64>,
    weights: &[f64],
    targets: &[f64],
    lambda: f64,
) -> Option<DVector<f64>> {
    let k = design.ncols();
    let mut normal = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    for (s, (&wgt, &y)) in weights.iter().zip(targets).enumerate() {
        let row = design.row(s);
        for i in 0..k {
            rhs[i] += wgt * row[i] * y;
            for j in 0..k {
                normal[(i, j)] += wgt * row[i] * row[j];
            }
        }
    }
    for i in 1..k {
        normal[(i, i)] += lambda;
    }
    Cholesky::new(normal).map(|chol| chol.solve(&rhs))
}

/// Grid-patch LIME: random binary patch masks (masked patches filled with
/// 0), an exponential locality kernel on the hamming distance to the intact
/// image, and a weighted ridge fit from masks to the target logit. The patch
/// coefficients, broadcast to pixels, are the attribution.
#[allow(clippy::too_many_arguments)]
pub fn lime_lite(
    model: &Model,
    input: &Tensor,
    target_class: usize,
    grid: &PatchGrid,
    n_samples: usize,
    kernel_width: f64,
    ridge_lambda: f64,
    seed: u64,
) -> Result<RelevanceMap> {
    let (_, _, _) = grid.check_input(input)?;
    check_target(model, target_class)?;
    let n_patches = grid.n_patches();
    if n_samples < n_patches {
        return Err(Error::InvalidArgument(format!(
            "lime needs at least as many samples as patches ({n_patches}), got {n_samples}"
        )));
    }
    if !(kernel_width > 0.0) || !(ridge_lambda >= 0.0) {
        return Err(Error::InvalidArgument(
            "kernel width must be positive and ridge lambda non-negative".into(),
        ));
    }

    let mut stream = rng::substream(seed, "lime", 0);
    let mut design = DMatrix::zeros(n_samples, n_patches + 1);
    let mut targets = vec![0.0f64; n_samples];
    let mut weights = vec![0.0f64; n_samples];
    let mut mask = vec![false; n_patches];
    for s in 0..n_samples {
        for m in mask.iter_mut() {
            *m = stream.random::<bool>();
        }
        let masked = grid.apply_mask(input, &mask, 0.0)?;
        targets[s] = f64::from(model.forward(&masked)?.logits().data()[target_class]);
        let hamming = mask.iter().filter(|&&m| !m).count() as f64;
        weights[s] = (-hamming * hamming / (kernel_width * kernel_width)).exp();
        design[(s, 0)] = 1.0;
        for (p, &m) in mask.iter().enumerate() {
            design[(s, p + 1)] = f64::from(u8::from(m));
        }
    }

    // A rank-deficient system gets one shot at a stiffer ridge before the
    // failure is surfaced.
    let solution = ridge_solve(&design, &weights, &targets, ridge_lambda)
        .or_else(|| ridge_solve(&design, &weights, &targets, ridge_lambda * 100.0 + 1e-8))
        .ok_or_else(|| {
            Error::SingularSystem(format!(
                "lime ridge system is singular at lambda {ridge_lambda} (and after the retry bump)"
            ))
        })?;

    let coefficients = &solution.as_slice()[1..];
    Ok(RelevanceMap {
        values: grid.broadcast(coefficients),
        target_class,
        method: "lime".into(),
        rules: None,
    })
}

/// Occlusion attribution: each patch's value is the drop of the target
/// logit when that patch alone is zeroed. Deterministic; no sampling.
pub fn occlusion_map(
    model: &Model,
    input: &Tensor,
    target_class: usize,
    grid: &PatchGrid,
) -> Result<RelevanceMap> {
    grid.check_input(input)?;
    check_target(model, target_class)?;
    let base = f64::from(model.forward(input)?.logits().data()[target_class]);
    let n = grid.n_patches();
    let mut drops = vec![0.0f64; n];
    let mut mask = vec![true; n];
    for (p, drop) in drops.iter_mut().enumerate() {
        mask[p] = false;
        let masked = grid.apply_mask(input, &mask, 0.0)?;
        mask[p] = true;
        let masked_logit = f64::from(model.forward(&masked)?.logits().data()[target_class]);
        *drop = base - masked_logit;
    }
    Ok(RelevanceMap {
        values: grid.broadcast(&drops),
        target_class,
        method: "occlusion".into(),
        rules: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_shapes;
    use crate::train::{train, TrainConfig};

    /// Flatten + Dense over a (1, 4, 4) input, two classes, zero bias.
    fn linear_model(w0: [f32; 16]) -> Model {
        let mut weight = w0.to_vec();
        weight.extend((0..16).map(|i| 0.01 * i as f32));
        Model {
            layers: vec![
                Layer::Flatten,
                Layer::Dense {
                    weight: Tensor::new(vec![2, 16], weight).unwrap(),
                    bias: Tensor::zeros(vec![2]),
                },
            ],
            input_shape: [1, 4, 4],
            class_names: vec!["a".into(), "b".into()],
        }
    }

    fn dyadic_input() -> Tensor {
        let data: Vec<f32> = (0..16).map(|i| 0.125 * (i % 5) as f32).collect();
        Tensor::new(vec![1, 4, 4], data).unwrap()
    }

    #[test]
    fn integrated_gradients_on_a_linear_model_is_gradient_times_input() {
        let w: [f32; 16] = std::array::from_fn(|i| 0.25 * ((i % 3) as f32 - 1.0));
        let model = linear_model(w);
        let x = dyadic_input();
        let baseline = Tensor::zeros(vec![1, 4, 4]);
        for steps in [1, 7, 64] {
            let map = integrated_gradients(&model, &x, 0, &baseline, steps).unwrap();
            for (i, v) in map.values.data().iter().enumerate() {
                let expected = f64::from(w[i]) * f64::from(x.data()[i]);
                assert!(
                    (f64::from(*v) - expected).abs() < 1e-6,
                    "pixel {i}: {v} vs {expected} at {steps} steps"
                );
            }
        }
    }

    #[test]
    fn integrated_gradients_of_the_baseline_itself_is_zero() {
        let model = linear_model(std::array::from_fn(|i| i as f32 * 0.1));
        let x = dyadic_input();
        let map = integrated_gradients(&model, &x, 1, &x, 16).unwrap();
        assert!(map.values.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn integrated_gradients_completeness_on_a_trained_model() {
        let data = generate_shapes(50, 16, 0.05, 5).unwrap();
        let trained = train(
            &data,
            &TrainConfig {
                epochs: 30,
                stop_at_accuracy: Some(0.9),
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let model = &trained.model;
        let baseline = Tensor::zeros(vec![1, 16, 16]);

        for i in 0..6 {
            let x = &data.images[i];
            let target = data.labels[i];
            let logit_x = f64::from(model.forward(x).unwrap().logits().data()[target]);
            let logit_b = f64::from(model.forward(&baseline).unwrap().logits().data()[target]);
            let exact = logit_x - logit_b;

            let map = integrated_gradients(model, x, target, &baseline, 64).unwrap();
            let total = map.values.sum_f64();
            assert!(
                (total - exact).abs() <= 0.02 * exact.abs(),
                "sample {i}: sum {total} vs logit difference {exact}"
            );
        }
    }

    #[test]
    fn integrated_gradients_error_shrinks_with_more_steps() {
        let data = generate_shapes(1, 16, 0.05, 11).unwrap();
        let model = Model::desk_cnn([1, 16, 16], data.class_names.clone(), 101).unwrap();
        let x = &data.images[2];
        let baseline = Tensor::zeros(vec![1, 16, 16]);
        let logit_x = f64::from(model.forward(x).unwrap().logits().data()[0]);
        let logit_b = f64::from(model.forward(&baseline).unwrap().logits().data()[0]);
        let exact = logit_x - logit_b;

        let errors: Vec<f64> = [8usize, 16, 32, 64]
            .iter()
            .map(|&steps| {
                let map = integrated_gradients(&model, x, 0, &baseline, steps).unwrap();
                (map.values.sum_f64() - exact).abs()
            })
            .collect();
        for pair in errors.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-9,
                "quadrature error did not shrink: {errors:?}"
            );
        }
    }

    #[test]
    fn gradcam_is_non_negative_and_input_sized() {
        let data = generate_shapes(1, 16, 0.05, 19).unwrap();
        let model = Model::desk_cnn([1, 16, 16], data.class_names.clone(), 3).unwrap();
        let map = gradcam(&model, &data.images[0], 2).unwrap();
        assert_eq!(map.values.shape(), [16, 16]);
        assert!(map.values.data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn gradcam_with_a_cut_classifier_head_is_zero() {
        // A zero Dense head kills the gradient at the conv features.
        let mut model = Model::desk_cnn(
            [1, 16, 16],
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            3,
        )
        .unwrap();
        let last = model.layers.len() - 1;
        if let Layer::Dense { weight, .. } = &mut model.layers[last] {
            *weight = Tensor::zeros(weight.shape().to_vec());
        }
        let x = Tensor::filled(vec![1, 16, 16], 0.5).unwrap();
        let map = gradcam(&model, &x, 0).unwrap();
        assert!(map.values.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradcam_requires_a_conv_layer() {
        let model = linear_model([0.1; 16]);
        let err = gradcam(&model, &dyadic_input(), 0).unwrap_err();
        assert!(matches!(err, Error::InvalidModel(_)));
    }

    #[test]
    fn patch_grid_validates_tiling_and_masks() {
        assert!(PatchGrid::new(3, 16, 16).is_err());
        assert!(PatchGrid::new(0, 16, 16).is_err());
        let grid = PatchGrid::new(4, 16, 16).unwrap();
        assert_eq!(grid.n_patches(), 16);

        let x = Tensor::filled(vec![1, 16, 16], 1.0).unwrap();
        let mut mask = vec![true; 16];
        mask[5] = false;
        let masked = grid.apply_mask(&x, &mask, 0.0).unwrap();
        let zeroed = masked.data().iter().filter(|v| **v == 0.0).count();
        assert_eq!(zeroed, 16);
        assert!(grid.apply_mask(&x, &mask[..3], 0.0).is_err());
    }

    #[test]
    fn occlusion_on_a_linear_model_recovers_patch_sums() {
        let w: [f32; 16] = std::array::from_fn(|i| 0.25 * ((i % 7) as f32 - 3.0));
        let model = linear_model(w);
        let x = dyadic_input();
        let grid = PatchGrid::new(2, 4, 4).unwrap();
        let map = occlusion_map(&model, &x, 0, &grid).unwrap();
        for row in 0..4 {
            for col in 0..4 {
                let p = grid.patch_of(row, col);
                let mut expected = 0.0f64;
                for rr in 0..4 {
                    for cc in 0..4 {
                        if grid.patch_of(rr, cc) == p {
                            let i = rr * 4 + cc;
                            expected += f64::from(w[i]) * f64::from(x.data()[i]);
                        }
                    }
                }
                let got = f64::from(map.values.data()[row * 4 + col]);
                assert!((got - expected).abs() < 1e-6, "patch {p}: {got} vs {expected}");
            }
        }
    }

    #[test]
    fn occluding_an_empty_patch_of_an_empty_background_drops_nothing() {
        let data = generate_shapes(1, 16, 0.0, 23).unwrap();
        let model = Model::desk_cnn([1, 16, 16], data.class_names.clone(), 29).unwrap();
        let x = &data.images[0];
        let grid = PatchGrid::new(4, 16, 16).unwrap();

        // Find a patch that is entirely background (exact zeros, noise-free).
        let hw = 16;
        let all_zero_patch = (0..grid.n_patches()).find(|&p| {
            (0..hw * hw).all(|i| {
                let (row, col) = (i / hw, i % hw);
                grid.patch_of(row, col) != p || x.data()[i] == 0.0
            })
        });
        let Some(p) = all_zero_patch else {
            panic!("expected at least one empty patch in a shape image");
        };

        let map = occlusion_map(&model, x, data.labels[0], &grid).unwrap();
        let (row, col) = ((p / 4) * 4, (p % 4) * 4);
        assert_eq!(map.values.data()[row * hw + col], 0.0);
    }

    #[test]
    fn lime_on_a_constant_model_finds_no_signal() {
        let model = linear_model([0.0; 16]);
        let x = dyadic_input();
        let grid = PatchGrid::new(2, 4, 4).unwrap();
        let map = lime_lite(&model, &x, 0, &grid, 200, 4.0, 1e-4, 31).unwrap();
        assert!(map.values.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn lime_isolates_the_only_informative_patch() {
        // Logit 0 reads only patch 3 (rows 0..2, cols 6..8 of the 2x2 grid
        // over 4x4... patch index 3 = top-right of a 2-patch-per-side grid).
        let mut w = [0.0f32; 16];
        let grid = PatchGrid::new(2, 4, 4).unwrap();
        for row in 0..4 {
            for col in 0..4 {
                if grid.patch_of(row, col) == 3 {
                    w[row * 4 + col] = 1.0;
                }
            }
        }
        let model = linear_model(w);
        let x = Tensor::filled(vec![1, 4, 4], 0.5).unwrap();
        let map = lime_lite(&model, &x, 0, &grid, 500, 4.0, 1e-6, 37).unwrap();

        let coef_at = |p: usize| {
            let row = (p / 2) * 2;
            let col = (p % 2) * 2;
            f64::from(map.values.data()[row * 4 + col])
        };
        let informative = coef_at(3).abs();
        for p in 0..3 {
            assert!(
                informative > 5.0 * coef_at(p).abs(),
                "patch 3 coef {informative} vs patch {p} coef {}",
                coef_at(p)
            );
        }
    }

    #[test]
    fn lime_is_deterministic_per_seed() {
        let data = generate_shapes(1, 16, 0.05, 41).unwrap();
        let model = Model::desk_cnn([1, 16, 16], data.class_names.clone(), 43).unwrap();
        let grid = PatchGrid::new(4, 16, 16).unwrap();
        let a = lime_lite(&model, &data.images[0], 1, &grid, 64, 4.0, 1e-3, 47).unwrap();
        let b = lime_lite(&model, &data.images[0], 1, &grid, 64, 4.0, 1e-3, 47).unwrap();
        assert_eq!(a.values.data(), b.values.data());
        let c = lime_lite(&model, &data.images[0], 1, &grid, 64, 4.0, 1e-3, 48).unwrap();
        assert_ne!(a.values.data(), c.values.data());
    }

    #[test]
    fn lime_matches_an_independent_least_squares_oracle() {
        // Additive patch model: logit is a weighted sum of patch presence,
        // so the (barely regularized) ridge fit must match a from-scratch
        // Gaussian-elimination solve of the same weighted normal equations.
        let grid = PatchGrid::new(2, 4, 4).unwrap();
        let mut w = [0.0f32; 16];
        let patch_gain = [0.8f32, -0.4, 0.25, 0.6];
        for row in 0..4 {
            for col in 0..4 {
                w[row * 4 + col] = patch_gain[grid.patch_of(row, col)] / 4.0;
            }
        }
        let model = linear_model(w);
        let x = Tensor::filled(vec![1, 4, 4], 1.0).unwrap();
        let (n_samples, kernel_width, lambda, seed) = (300, 4.0, 1e-6, 53);
        let map = lime_lite(&model, &x, 0, &grid, n_samples, kernel_width, lambda, seed).unwrap();

        // Rebuild the exact same sampled system the implementation saw.
        let mut stream = rng::substream(seed, "lime", 0);
        let n_patches = grid.n_patches();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut weights = Vec::new();
        let mut ys = Vec::new();
        let mut mask = vec![false; n_patches];
        for _ in 0..n_samples {
            for m in mask.iter_mut() {
                *m = stream.random::<bool>();
            }
            let masked = grid.apply_mask(&x, &mask, 0.0).unwrap();
            ys.push(f64::from(model.forward(&masked).unwrap().logits().data()[0]));
            let hamming = mask.iter().filter(|&&m| !m).count() as f64;
            weights.push((-hamming * hamming / (kernel_width * kernel_width)).exp());
            let mut row = vec![1.0f64];
            row.extend(mask.iter().map(|&m| f64::from(u8::from(m))));
            rows.push(row);
        }

        // Naive weighted normal equations + Gaussian elimination.
        let k = n_patches + 1;
        let mut normal = vec![vec![0.0f64; k + 1]; k];
        for ((row, &wgt), &y) in rows.iter().zip(&weights).zip(&ys) {
            for i in 0..k {
                normal[i][k] += wgt * row[i] * y;
                for j in 0..k {
                    normal[i][j] += wgt * row[i] * row[j];
                }
            }
        }
        for (i, row) in normal.iter_mut().enumerate().skip(1) {
            row[i] += lambda;
        }
        for col in 0..k {
            let pivot = (col..k)
                .max_by(|&a, &b| normal[a][col].abs().total_cmp(&normal[b][col].abs()))
                .unwrap();
            normal.swap(col, pivot);
            let p = normal[col][col];
            for r in 0..k {
                if r != col {
                    let f = normal[r][col] / p;
                    for cc in col..=k {
                        normal[r][cc] -= f * normal[col][cc];
                    }
                }
            }
        }
        let oracle: Vec<f64> = (0..k).map(|i| normal[i][k] / normal[i][i]).collect();

        for p in 0..n_patches {
            let row = (p / 2) * 2;
            let col = (p % 2) * 2;
            let got = f64::from(map.values.data()[row * 4 + col]);
            assert!(
                (got - oracle[p + 1]).abs() < 1e-4,
                "patch {p}: {got} vs oracle {}",
                oracle[p + 1]
            );
        }
    }

    #[test]
    fn lime_surfaces_unsalvageable_singular_systems() {
        // A vanishing kernel width zeroes every sample weight (no draw hits
        // the intact image), so even the bumped ridge cannot rescue the
        // unpenalized intercept row.
        let model = linear_model([0.1; 16]);
        let x = dyadic_input();
        let grid = PatchGrid::new(2, 4, 4).unwrap();
        let err = lime_lite(&model, &x, 0, &grid, 40, 1e-300, 0.0, 59).unwrap_err();
        assert!(matches!(err, Error::SingularSystem(_)));
    }

    #[test]
    fn lime_rejects_undersampled_grids() {
        let model = linear_model([0.1; 16]);
        let x = dyadic_input();
        let grid = PatchGrid::new(2, 4, 4).unwrap();
        assert!(lime_lite(&model, &x, 0, &grid, 3, 4.0, 1e-3, 61).is_err());
    }

    #[test]
    fn bilinear_upsample_preserves_constants_and_interpolates() {
        let flat = bilinear_upsample(&[2.0, 2.0, 2.0, 2.0], 2, 2, 8, 8);
        assert!(flat.iter().all(|v| (v - 2.0).abs() < 1e-12));

        let ramp = bilinear_upsample(&[0.0, 1.0], 1, 2, 1, 4);
        assert!(ramp.windows(2).all(|p| p[1] >= p[0]), "not monotone: {ramp:?}");
        assert_eq!(ramp[0], 0.0);
        assert_eq!(ramp[3], 1.0);
    }
}
