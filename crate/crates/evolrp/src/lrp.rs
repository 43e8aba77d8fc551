//! Layer-wise Relevance Propagation with a per-trainable-layer rule
//! assignment, plus conservation diagnostics.
//!
//! Relevance buffers are f64 end to end; only the final map is stored as an
//! f32 tensor. Each weighted layer is handled by the forward/backward
//! redistribution scheme: z = modified-forward(a), s = R/z elementwise,
//! c = modified-backward(s), R_in = a ⊙ c, which is algebraically the
//! summation form of the rules. Biases enter the z denominators and absorb
//! their share of relevance; zero denominators contribute zero.

use crate::error::{Error, Result};
use crate::net::{conv_bwd_data, conv_fwd_acc, maxpool2x2_with_argmax, ConvDims, Layer, Model};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// One propagation rule. Epsilon carries ε ∈ (0, 1]; AlphaBeta carries
/// α ≥ 1 with β = α − 1 implied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrpRule {
    Zero,
    Epsilon(f64),
    AlphaBeta(f64),
}

impl LrpRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LrpRule::Zero => Ok(()),
            LrpRule::Epsilon(e) if e > 0.0 && e <= 1.0 && e.is_finite() => Ok(()),
            LrpRule::Epsilon(e) => Err(Error::InvalidRule(format!(
                "epsilon must lie in (0, 1], got {e}"
            ))),
            LrpRule::AlphaBeta(a) if a >= 1.0 && a.is_finite() => Ok(()),
            LrpRule::AlphaBeta(a) => Err(Error::InvalidRule(format!(
                "alpha must be >= 1 (beta = alpha - 1 >= 0), got {a}"
            ))),
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            LrpRule::Zero => "zero",
            LrpRule::Epsilon(_) => "epsilon",
            LrpRule::AlphaBeta(_) => "alpha_beta",
        }
    }
}

/// One rule per trainable layer, in model order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRuleConfig {
    pub rules: Vec<LrpRule>,
}

impl LayerRuleConfig {
    pub fn uniform(rule: LrpRule, n_layers: usize) -> LayerRuleConfig {
        LayerRuleConfig { rules: vec![rule; n_layers] }
    }

    /// All-layers LRP-0, the untuned baseline configuration.
    pub fn zero_baseline(model: &Model) -> LayerRuleConfig {
        LayerRuleConfig::uniform(LrpRule::Zero, model.trainable_indices().len())
    }

    pub fn validate_for(&self, model: &Model) -> Result<()> {
        let expected = model.trainable_indices().len();
        if self.rules.len() != expected {
            return Err(Error::ConfigLength { expected, actual: self.rules.len() });
        }
        for rule in &self.rules {
            rule.validate()?;
        }
        Ok(())
    }
}

/// Signed input-level attribution, summed over input channels.
#[derive(Debug, Clone)]
pub struct RelevanceMap {
    /// Shape (H, W).
    pub values: Tensor,
    pub target_class: usize,
    pub method: String,
    /// The rule assignment that produced the map; None for non-LRP methods.
    pub rules: Option<LayerRuleConfig>,
}

/// Per-layer relevance totals recorded while propagating.
#[derive(Debug, Clone, Serialize)]
pub struct ConservationReport {
    pub target_class: usize,
    pub logit: f64,
    /// relevance_sums[i] = Σ R at the input of layer i; the last entry is
    /// the output relevance (the target logit).
    pub relevance_sums: Vec<f64>,
    /// Trainable layers with any nonzero bias; these absorb relevance and
    /// break exact conservation.
    pub bias_absorbing_layers: Vec<usize>,
}

/// ε stabilizer with sign(0) = +1.
fn stabilize(z: f64, eps: f64) -> f64 {
    z + if z >= 0.0 { eps } else { -eps }
}

/// Safe redistribution ratio: a zero denominator contributes zero.
fn ratio(num: f64, denom: f64) -> f64 {
    if denom == 0.0 {
        0.0
    } else {
        num / denom
    }
}

/// Propagate relevance backward through one Dense or Conv2d layer.
/// `a` is the layer's recorded input activation; `r_out` is relevance at its
/// output, one f64 per output element.
pub fn lrp_linear_step(a: &Tensor, layer: &Layer, r_out: &[f64], rule: LrpRule) -> Result<Vec<f64>> {
    rule.validate()?;
    let label = format!("lrp {}", layer.kind_name());
    let out_shape = layer.output_shape(a.shape(), &label)?;
    let out_len: usize = out_shape.iter().product();
    if r_out.len() != out_len {
        return Err(Error::shape(&label, &[out_len], &[r_out.len()]));
    }
    match layer {
        Layer::Dense { weight, bias } => Ok(dense_redistribute(a.data(), weight, bias, r_out, rule)),
        Layer::Conv2d { weight, bias, stride } => {
            Ok(conv_redistribute(a, weight, bias, *stride, r_out, rule))
        }
        other => Err(Error::InvalidArgument(format!(
            "lrp_linear_step applies to Dense/Conv2d, got {}",
            other.kind_name()
        ))),
    }
}

fn dense_redistribute(a: &[f32], weight: &Tensor, bias: &Tensor, r_out: &[f64], rule: LrpRule) -> Vec<f64> {
    let (of, inf) = (weight.shape()[0], weight.shape()[1]);
    let w = weight.data();
    let b = bias.data();
    let mut r_in = vec![0.0f64; inf];
    match rule {
        LrpRule::Zero | LrpRule::Epsilon(_) => {
            for k in 0..of {
                let row = &w[k * inf..(k + 1) * inf];
                let mut z = f64::from(b[k]);
                for j in 0..inf {
                    z += f64::from(row[j]) * f64::from(a[j]);
                }
                let denom = match rule {
                    LrpRule::Epsilon(e) => stabilize(z, e),
                    _ => z,
                };
                let s = ratio(r_out[k], denom);
                if s != 0.0 {
                    for j in 0..inf {
                        r_in[j] += f64::from(row[j]) * s;
                    }
                }
            }
        }
        LrpRule::AlphaBeta(alpha) => {
            let beta = alpha - 1.0;
            for k in 0..of {
                let row = &w[k * inf..(k + 1) * inf];
                let mut zp = f64::from(b[k].max(0.0));
                let mut zn = f64::from(b[k].min(0.0));
                for j in 0..inf {
                    let c = f64::from(row[j]) * f64::from(a[j]);
                    if row[j] >= 0.0 {
                        zp += c;
                    } else {
                        zn += c;
                    }
                }
                let sp = alpha * ratio(r_out[k], zp);
                let sn = beta * ratio(r_out[k], zn);
                for j in 0..inf {
                    let wv = f64::from(row[j]);
                    if row[j] >= 0.0 {
                        r_in[j] += wv * sp;
                    } else {
                        r_in[j] -= wv * sn;
                    }
                }
            }
        }
    }
    for (r, &av) in r_in.iter_mut().zip(a) {
        *r *= f64::from(av);
    }
    r_in
}

fn conv_redistribute(a: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, r_out: &[f64], rule: LrpRule) -> Vec<f64> {
    let dims = ConvDims::new(a.shape(), weight.shape(), stride);
    let c = match rule {
        LrpRule::Zero | LrpRule::Epsilon(_) => {
            let z = conv_fwd_acc(a.data(), weight.data(), Some(bias.data()), &dims);
            let s: Vec<f64> = z
                .iter()
                .zip(r_out)
                .map(|(&zk, &rk)| match rule {
                    LrpRule::Epsilon(e) => rk / stabilize(zk, e),
                    _ => ratio(rk, zk),
                })
                .collect();
            conv_bwd_data(&s, weight.data(), &dims)
        }
        LrpRule::AlphaBeta(alpha) => {
            let beta = alpha - 1.0;
            let wp: Vec<f32> = weight.data().iter().map(|&v| v.max(0.0)).collect();
            let wn: Vec<f32> = weight.data().iter().map(|&v| v.min(0.0)).collect();
            let bp: Vec<f32> = bias.data().iter().map(|&v| v.max(0.0)).collect();
            let bn: Vec<f32> = bias.data().iter().map(|&v| v.min(0.0)).collect();
            let zp = conv_fwd_acc(a.data(), &wp, Some(&bp), &dims);
            let zn = conv_fwd_acc(a.data(), &wn, Some(&bn), &dims);
            let sp: Vec<f64> = zp
                .iter()
                .zip(r_out)
                .map(|(&z, &r)| alpha * ratio(r, z))
                .collect();
            let sn: Vec<f64> = zn
                .iter()
                .zip(r_out)
                .map(|(&z, &r)| beta * ratio(r, z))
                .collect();
            let cp = conv_bwd_data(&sp, &wp, &dims);
            let cn = conv_bwd_data(&sn, &wn, &dims);
            cp.iter().zip(&cn).map(|(&p, &n)| p - n).collect()
        }
    };
    c.iter()
        .zip(a.data())
        .map(|(&cv, &av)| cv * f64::from(av))
        .collect()
}

/// Relevance through parameter-free layers: ReLU passes through, MaxPool
/// routes winner-take-all to the recorded argmax, Flatten reshapes.
pub fn lrp_nonparam_step(layer: &Layer, input: &Tensor, r_out: &[f64]) -> Result<Vec<f64>> {
    let label = format!("lrp {}", layer.kind_name());
    let out_shape = layer.output_shape(input.shape(), &label)?;
    let out_len: usize = out_shape.iter().product();
    if r_out.len() != out_len {
        return Err(Error::shape(&label, &[out_len], &[r_out.len()]));
    }
    match layer {
        Layer::ReLU | Layer::Flatten => Ok(r_out.to_vec()),
        Layer::MaxPool2x2 => {
            let (_, argmax) = maxpool2x2_with_argmax(input);
            let mut r_in = vec![0.0f64; input.len()];
            for (o, &src) in argmax.iter().enumerate() {
                r_in[src] += r_out[o];
            }
            Ok(r_in)
        }
        other => Err(Error::InvalidArgument(format!(
            "lrp_nonparam_step applies to ReLU/MaxPool2x2/Flatten, got {}",
            other.kind_name()
        ))),
    }
}

/// Walk the model in reverse, returning the f64 input relevance and the
/// per-activation relevance sums (index-aligned with the trace).
fn propagate(model: &Model, input: &Tensor, target_class: usize, config: &LayerRuleConfig) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    config.validate_for(model)?;
    if target_class >= model.n_classes() {
        return Err(Error::InvalidTargetClass {
            class: target_class,
            n_classes: model.n_classes(),
        });
    }
    let trace = model.forward(input)?;
    let logit = f64::from(trace.logits().data()[target_class]);
    let n = model.layers.len();

    let mut slot_of_layer = vec![usize::MAX; n];
    for (slot, &li) in model.trainable_indices().iter().enumerate() {
        slot_of_layer[li] = slot;
    }

    let mut r: Vec<f64> = vec![0.0; trace.logits().len()];
    r[target_class] = logit;
    let mut sums = vec![0.0f64; n + 1];
    sums[n] = r.iter().sum();
    for i in (0..n).rev() {
        let layer = &model.layers[i];
        r = if layer.is_trainable() {
            lrp_linear_step(trace.input(i), layer, &r, config.rules[slot_of_layer[i]])?
        } else {
            lrp_nonparam_step(layer, trace.input(i), &r)?
        };
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "relevance after layer {i} ({})",
                layer.kind_name()
            )));
        }
        sums[i] = r.iter().sum();
    }
    Ok((r, sums, logit))
}

/// LRP attribution for one input and target class: starts from
/// R = one-hot(target) · logit(target) at the output, propagates through
/// every layer, and returns the input map summed over channels.
pub fn explain_lrp(model: &Model, input: &Tensor, target_class: usize, config: &LayerRuleConfig) -> Result<RelevanceMap> {
    let (r, _, _) = propagate(model, input, target_class, config)?;
    let [c, h, w] = model.input_shape;
    let mut values = vec![0.0f32; h * w];
    for ch in 0..c {
        for (v, &rv) in values.iter_mut().zip(&r[ch * h * w..(ch + 1) * h * w]) {
            *v = (f64::from(*v) + rv) as f32;
        }
    }
    Ok(RelevanceMap {
        values: Tensor::new(vec![h, w], values)?,
        target_class,
        method: "lrp".to_string(),
        rules: Some(config.clone()),
    })
}

/// Per-layer relevance sums for conservation diagnostics.
pub fn conservation_report(model: &Model, input: &Tensor, target_class: usize, config: &LayerRuleConfig) -> Result<ConservationReport> {
    let (_, sums, logit) = propagate(model, input, target_class, config)?;
    let bias_absorbing_layers = model
        .trainable_indices()
        .into_iter()
        .filter(|&li| match &model.layers[li] {
            Layer::Conv2d { bias, .. } | Layer::Dense { bias, .. } => {
                bias.data().iter().any(|&b| b != 0.0)
            }
            _ => false,
        })
        .collect();
    Ok(ConservationReport {
        target_class,
        logit,
        relevance_sums: sums,
        bias_absorbing_layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_shapes;
    use crate::train::{train, TrainConfig};

    fn dense(weight: Vec<f32>, shape: Vec<usize>, bias: Vec<f32>) -> Layer {
        let of = shape[0];
        Layer::Dense {
            weight: Tensor::new(shape, weight).unwrap(),
            bias: Tensor::new(vec![of], bias).unwrap(),
        }
    }

    /// Direct summation form of the rules for Dense layers; the production
    /// code uses the redistribution scheme, so this is an independent oracle.
    fn dense_lrp_summation(a: &[f32], weight: &Tensor, bias: &[f32], r_out: &[f64], rule: LrpRule) -> Vec<f64> {
        let (of, inf) = (weight.shape()[0], weight.shape()[1]);
        let w = weight.data();
        let mut r_in = vec![0.0f64; inf];
        for j in 0..inf {
            for k in 0..of {
                let contrib = f64::from(a[j]) * f64::from(w[k * inf + j]);
                let term = match rule {
                    LrpRule::Zero | LrpRule::Epsilon(_) => {
                        let mut z = f64::from(bias[k]);
                        for jj in 0..inf {
                            z += f64::from(a[jj]) * f64::from(w[k * inf + jj]);
                        }
                        let denom = match rule {
                            LrpRule::Epsilon(e) => stabilize(z, e),
                            _ => z,
                        };
                        ratio(contrib, denom) * r_out[k]
                    }
                    LrpRule::AlphaBeta(alpha) => {
                        let beta = alpha - 1.0;
                        let (mut zp, mut zn) = (f64::from(bias[k].max(0.0)), f64::from(bias[k].min(0.0)));
                        for jj in 0..inf {
                            let c = f64::from(a[jj]) * f64::from(w[k * inf + jj]);
                            if w[k * inf + jj] >= 0.0 {
                                zp += c;
                            } else {
                                zn += c;
                            }
                        }
                        let part = if w[k * inf + j] >= 0.0 {
                            alpha * ratio(contrib, zp)
                        } else {
                            -beta * ratio(contrib, zn)
                        };
                        part * r_out[k]
                    }
                };
                r_in[j] += term;
            }
        }
        r_in
    }

    #[test]
    fn hand_example_lrp_zero() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let layer = dense(vec![1.0, 1.0], vec![1, 2], vec![0.0]);
        let r = lrp_linear_step(&a, &layer, &[3.0], LrpRule::Zero).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-12 && (r[1] - 2.0).abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn hand_example_lrp_epsilon_absorbs_relevance() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let layer = dense(vec![1.0, 1.0], vec![1, 2], vec![0.0]);
        let r = lrp_linear_step(&a, &layer, &[3.0], LrpRule::Epsilon(0.5)).unwrap();
        assert!((r[0] - 6.0 / 7.0).abs() < 1e-12, "{r:?}");
        assert!((r[1] - 12.0 / 7.0).abs() < 1e-12, "{r:?}");
        assert!(r.iter().sum::<f64>() < 3.0);
    }

    #[test]
    fn hand_example_alpha_one_keeps_positive_path_only() {
        let a = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let layer = dense(vec![2.0, -1.0], vec![1, 2], vec![0.0]);
        let r = lrp_linear_step(&a, &layer, &[1.0], LrpRule::AlphaBeta(1.0)).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-12 && r[1].abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn redistribution_matches_summation_oracle_on_random_dense_layers() {
        use rand::Rng;
        for seed in 0..5u64 {
            let mut rng = crate::rng::substream(seed, "lrp-oracle", 0);
            let (inf, of) = (rng.random_range(3..9), rng.random_range(2..7));
            let a: Vec<f32> = (0..inf).map(|_| rng.random_range(-1.0f32..1.5)).collect();
            let w: Vec<f32> = (0..of * inf).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let b: Vec<f32> = (0..of).map(|_| rng.random_range(-0.5f32..0.5)).collect();
            let r_out: Vec<f64> = (0..of).map(|_| rng.random_range(-2.0f64..2.0)).collect();
            let layer = dense(w.clone(), vec![of, inf], b.clone());
            let at = Tensor::new(vec![inf], a.clone()).unwrap();
            for rule in [LrpRule::Zero, LrpRule::Epsilon(0.3), LrpRule::AlphaBeta(1.5), LrpRule::AlphaBeta(2.0)] {
                let fast = lrp_linear_step(&at, &layer, &r_out, rule).unwrap();
                let oracle = dense_lrp_summation(&a, &Tensor::new(vec![of, inf], w.clone()).unwrap(), &b, &r_out, rule);
                for (x, y) in fast.iter().zip(&oracle) {
                    let denom = y.abs().max(1e-9);
                    assert!(
                        ((x - y) / denom).abs() < 1e-6,
                        "rule {rule:?}: {fast:?} vs {oracle:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn conv_redistribution_agrees_with_dense_equivalent() {
        // A 1x1-kernel conv on a 1x1 image is exactly a Dense layer.
        let a_img = Tensor::new(vec![2, 1, 1], vec![0.7, -0.3]).unwrap();
        let conv = Layer::Conv2d {
            weight: Tensor::new(vec![3, 2, 1, 1], vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap(),
            bias: Tensor::new(vec![3], vec![0.1, -0.2, 0.0]).unwrap(),
            stride: 1,
        };
        let a_vec = Tensor::new(vec![2], vec![0.7, -0.3]).unwrap();
        let dense_eq = dense(vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5], vec![3, 2], vec![0.1, -0.2, 0.0]);
        let r_out = [1.0, -0.5, 2.0];
        for rule in [LrpRule::Zero, LrpRule::Epsilon(0.2), LrpRule::AlphaBeta(1.3)] {
            let rc = lrp_linear_step(&a_img, &conv, &r_out, rule).unwrap();
            let rd = lrp_linear_step(&a_vec, &dense_eq, &r_out, rule).unwrap();
            for (x, y) in rc.iter().zip(&rd) {
                assert!((x - y).abs() < 1e-12, "rule {rule:?}: {rc:?} vs {rd:?}");
            }
        }
    }

    #[test]
    fn maxpool_routes_relevance_to_the_window_max() {
        let input = Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 2.0, 0.0]).unwrap();
        let r = lrp_nonparam_step(&Layer::MaxPool2x2, &input, &[5.0]).unwrap();
        assert_eq!(r, vec![0.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_and_flatten_conserve_relevance() {
        let input = Tensor::new(vec![4], vec![-1.0, 2.0, 0.0, 3.0]).unwrap();
        let r_out = [1.0, -2.0, 0.5, 4.0];
        let relu = lrp_nonparam_step(&Layer::ReLU, &input, &r_out).unwrap();
        assert_eq!(relu.iter().sum::<f64>(), r_out.iter().sum::<f64>());
        let img = Tensor::new(vec![1, 2, 2], vec![-1.0, 2.0, 0.0, 3.0]).unwrap();
        let flat = lrp_nonparam_step(&Layer::Flatten, &img, &r_out).unwrap();
        assert_eq!(flat, r_out.to_vec());
    }

    #[test]
    fn one_layer_linear_model_recovers_w_times_x() {
        // Bias-free f(x) = w.x under LRP-0: map = w ⊙ x, sum = logit.
        let model = Model {
            layers: vec![
                Layer::Flatten,
                dense(vec![0.5, -1.0, 2.0, 0.0, 1.0, 1.0, -1.0, 0.5], vec![2, 4], vec![0.0, 0.0]),
            ],
            input_shape: [1, 2, 2],
            class_names: vec!["a".into(), "b".into()],
        };
        let input = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let config = LayerRuleConfig::zero_baseline(&model);
        let map = explain_lrp(&model, &input, 0, &config).unwrap();
        let expected = [0.5, -2.0, 6.0, 0.0];
        for (v, e) in map.values.data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-6, "{:?}", map.values.data());
        }
        let logit = model.forward(&input).unwrap().logits().data()[0];
        assert!((map.values.sum_f64() - f64::from(logit)).abs() < 1e-6);
    }

    #[test]
    fn zero_input_on_bias_free_net_yields_zero_map() {
        let data = generate_shapes(1, 16, 0.0, 3).unwrap();
        let model = train(&data, &TrainConfig { epochs: 1, ..TrainConfig::default() })
            .unwrap()
            .model
            .zero_biases();
        let input = Tensor::zeros(vec![1, 16, 16]);
        let config = LayerRuleConfig::zero_baseline(&model);
        let map = explain_lrp(&model, &input, 0, &config).unwrap();
        assert!(map.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn small_epsilon_approaches_lrp_zero() {
        let data = generate_shapes(1, 16, 0.0, 5).unwrap();
        let model = train(&data, &TrainConfig { epochs: 1, ..TrainConfig::default() })
            .unwrap()
            .model
            .zero_biases();
        let input = &data.images[1];
        let n = model.trainable_indices().len();
        let zero = explain_lrp(&model, input, 2, &LayerRuleConfig::zero_baseline(&model)).unwrap();
        let eps = explain_lrp(&model, input, 2, &LayerRuleConfig::uniform(LrpRule::Epsilon(1e-6), n)).unwrap();
        let diff: f64 = zero
            .values
            .data()
            .iter()
            .zip(eps.values.data())
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = zero.values.l2_norm_f64().max(1e-12);
        assert!(diff / norm < 1e-3, "relative gap {}", diff / norm);
    }

    #[test]
    fn conservation_holds_for_lrp_zero_on_bias_free_model() {
        let data = generate_shapes(2, 16, 0.02, 9).unwrap();
        let model = train(&data, &TrainConfig { epochs: 2, ..TrainConfig::default() })
            .unwrap()
            .model
            .zero_biases();
        let config = LayerRuleConfig::zero_baseline(&model);
        for idx in [0usize, 3, 5] {
            let label = data.labels[idx];
            let report = conservation_report(&model, &data.images[idx], label, &config).unwrap();
            assert!(report.bias_absorbing_layers.is_empty());
            let scale = report.logit.abs().max(1e-12);
            for (i, &s) in report.relevance_sums.iter().enumerate() {
                assert!(
                    ((s - report.logit) / scale).abs() < 1e-5,
                    "layer {i}: sum {s} vs logit {}",
                    report.logit
                );
            }
        }
    }

    #[test]
    fn biases_are_flagged_as_absorbing() {
        let data = generate_shapes(1, 16, 0.0, 3).unwrap();
        let model = train(&data, &TrainConfig { epochs: 2, ..TrainConfig::default() })
            .unwrap()
            .model;
        let config = LayerRuleConfig::zero_baseline(&model);
        let report = conservation_report(&model, &data.images[0], 0, &config).unwrap();
        assert!(
            !report.bias_absorbing_layers.is_empty(),
            "trained model should have nonzero biases"
        );
    }

    #[test]
    fn alpha_one_map_is_non_negative_for_positive_logit() {
        let data = generate_shapes(2, 16, 0.02, 9).unwrap();
        let result = train(&data, &TrainConfig { epochs: 3, ..TrainConfig::default() }).unwrap();
        let model = result.model;
        let n = model.trainable_indices().len();
        let config = LayerRuleConfig::uniform(LrpRule::AlphaBeta(1.0), n);
        let mut checked = 0;
        for (img, &label) in data.images.iter().zip(&data.labels) {
            let logit = f64::from(model.forward(img).unwrap().logits().data()[label]);
            if logit <= 0.0 {
                continue;
            }
            let map = explain_lrp(&model, img, label, &config).unwrap();
            assert!(
                map.values.data().iter().all(|&v| v >= -1e-6),
                "negative relevance under alpha=1"
            );
            checked += 1;
        }
        assert!(checked > 0, "no positive logits to check");
    }

    #[test]
    fn rejects_bad_rules_and_config_lengths() {
        assert!(LrpRule::Epsilon(0.0).validate().is_err());
        assert!(LrpRule::Epsilon(1.5).validate().is_err());
        assert!(LrpRule::AlphaBeta(0.5).validate().is_err());
        let data = generate_shapes(1, 16, 0.0, 3).unwrap();
        let model = train(&data, &TrainConfig { epochs: 1, ..TrainConfig::default() })
            .unwrap()
            .model;
        let short = LayerRuleConfig::uniform(LrpRule::Zero, 2);
        assert!(matches!(
            explain_lrp(&model, &data.images[0], 0, &short).unwrap_err(),
            Error::ConfigLength { .. }
        ));
        let config = LayerRuleConfig::zero_baseline(&model);
        assert!(matches!(
            explain_lrp(&model, &data.images[0], 9, &config).unwrap_err(),
            Error::InvalidTargetClass { .. }
        ));
    }

    #[test]
    fn rule_config_serializes_readably() {
        let config = LayerRuleConfig {
            rules: vec![LrpRule::Zero, LrpRule::Epsilon(0.5), LrpRule::AlphaBeta(1.7)],
        };
        let json = serde_json::to_string(&config).unwrap();
        assert!(json.contains("\"zero\"") && json.contains("\"epsilon\""), "{json}");
        let back: LayerRuleConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, config);
    }
}
