//! Attribution quality metrics: faithfulness correlation (FC), average
//! sensitivity (AS), and Gini sparseness (SP), plus batch aggregation.
//!
//! All sampling is keyed by `(config seed, purpose, content hash of the
//! input)`, so a sample's metric value depends only on the sample and the
//! seed, never on its position in a batch. Batch reports are therefore
//! invariant under permutation of the batch.

use rand::seq::index::sample as index_sample;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::lrp::RelevanceMap;
use crate::net::Model;
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Attribution function under evaluation: `(model, input, target class)` to a
/// relevance map. LRP, the gradient baselines, and test stubs all fit this
/// shape; configuration is captured by the closure.
pub type Explainer<'a> = dyn Fn(&Model, &Tensor, usize) -> Result<RelevanceMap> + Sync + 'a;

/// The three metrics. `Faithfulness` and `Sparseness` improve upward,
/// `Sensitivity` improves downward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Faithfulness,
    Sensitivity,
    Sparseness,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Faithfulness => "faithfulness",
            Metric::Sensitivity => "sensitivity",
            Metric::Sparseness => "sparseness",
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Sensitivity)
    }
}

/// Sampling parameters for FC (subset masking) and AS (input perturbation).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Number of masked feature subsets drawn for FC.
    pub n_subsets: usize,
    /// Spatial positions masked per subset. Must stay below the pixel count.
    pub subset_size: usize,
    /// Fill value for masked positions; 0 is the dataset background.
    pub baseline_value: f32,
    /// Number of Gaussian perturbations drawn for AS.
    pub n_perturbations: usize,
    /// Standard deviation of the AS input perturbation.
    pub perturb_std: f64,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            n_subsets: 100,
            subset_size: 56,
            baseline_value: 0.0,
            n_perturbations: 8,
            perturb_std: 0.05,
            seed: 7,
        }
    }
}

impl MetricConfig {
    /// Checks the FC sampling parameters against a concrete feature count.
    pub fn validate_faithfulness(&self, n_features: usize) -> Result<()> {
        if self.n_subsets < 2 {
            return Err(Error::InvalidArgument(format!(
                "n_subsets must be at least 2, got {}",
                self.n_subsets
            )));
        }
        if self.subset_size == 0 || self.subset_size >= n_features {
            return Err(Error::InvalidArgument(format!(
                "subset_size must be in 1..{n_features}, got {}",
                self.subset_size
            )));
        }
        if !self.baseline_value.is_finite() {
            return Err(Error::InvalidArgument(
                "baseline_value must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Checks the AS perturbation parameters.
    pub fn validate_sensitivity(&self) -> Result<()> {
        if self.n_perturbations < 2 {
            return Err(Error::InvalidArgument(format!(
                "n_perturbations must be at least 2, got {}",
                self.n_perturbations
            )));
        }
        if !(self.perturb_std > 0.0) || !self.perturb_std.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "perturb_std must be finite and positive, got {}",
                self.perturb_std
            )));
        }
        Ok(())
    }
}

/// FC result. `degenerate` marks a zero-variance sample (constant drops or
/// constant relevance sums), where the correlation is undefined and the value
/// is reported as 0.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FaithfulnessValue {
    pub value: f64,
    pub degenerate: bool,
}

/// Mean and population standard deviation of one metric over a batch, with
/// the per-sample values retained in batch order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricStats {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

/// Per-method metric summary over a batch. Unrequested metrics stay `None`
/// and are omitted from the serialized form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub n_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub faithfulness: Option<MetricStats>,
    /// Count of batch samples whose FC was degenerate (zero variance).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degenerate_faithfulness_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<MetricStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparseness: Option<MetricStats>,
}

/// Content hash of a tensor (shape and raw values), used to key per-sample
/// random streams independently of batch position.
pub(crate) fn sample_key(t: &Tensor) -> u64 {
    let mut bytes = Vec::with_capacity(8 * t.shape().len() + 4 * t.len());
    for d in t.shape() {
        bytes.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    rng::content_key(&bytes)
}

fn spatial_dims(input: &Tensor) -> Result<(usize, usize, usize)> {
    match *input.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape("metric input", &[0, 0, 0], input.shape())),
    }
}

fn check_map_alignment(context: &str, map: &RelevanceMap, h: usize, w: usize) -> Result<()> {
    if map.values.shape() != [h, w] {
        return Err(Error::shape(context, &[h, w], map.values.shape()));
    }
    Ok(())
}

/// Pearson correlation coefficient; `None` when either side has zero
/// variance.
fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx.sqrt() * syy.sqrt()))
    }
}

/// Masked subsets and their logit drops for one input. The drops depend only
/// on the model, the input, and the random stream, never on the attribution
/// map, so one `FcDrops` can score every candidate map of an optimization
/// generation.
pub(crate) struct FcDrops {
    subsets: Vec<Vec<usize>>,
    drops: Vec<f64>,
}

pub(crate) fn fc_drops(
    model: &Model,
    input: &Tensor,
    target_class: usize,
    cfg: &MetricConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FcDrops> {
    let (c, h, w) = spatial_dims(input)?;
    let hw = h * w;
    cfg.validate_faithfulness(hw)?;
    if target_class >= model.n_classes() {
        return Err(Error::InvalidTargetClass {
            class: target_class,
            n_classes: model.n_classes(),
        });
    }

    let base_logit = f64::from(model.forward(input)?.logits().data()[target_class]);
    let mut subsets = Vec::with_capacity(cfg.n_subsets);
    let mut drops = Vec::with_capacity(cfg.n_subsets);
    let mut masked = input.data().to_vec();
    for _ in 0..cfg.n_subsets {
        let subset = index_sample(rng, hw, cfg.subset_size).into_vec();
        masked.copy_from_slice(input.data());
        for &p in &subset {
            for ch in 0..c {
                masked[ch * hw + p] = cfg.baseline_value;
            }
        }
        let masked_input = Tensor::new(input.shape().to_vec(), masked.clone())?;
        let masked_logit = f64::from(model.forward(&masked_input)?.logits().data()[target_class]);
        drops.push(base_logit - masked_logit);
        subsets.push(subset);
    }
    Ok(FcDrops { subsets, drops })
}

/// Scores an attribution map against precomputed drops.
pub(crate) fn fc_from_drops(drops: &FcDrops, map_values: &Tensor) -> FaithfulnessValue {
    let data = map_values.data();
    let sums: Vec<f64> = drops
        .subsets
        .iter()
        .map(|subset| subset.iter().map(|&p| f64::from(data[p])).sum())
        .collect();
    match pearson(&drops.drops, &sums) {
        Some(r) => FaithfulnessValue {
            value: r.abs().min(1.0),
            degenerate: false,
        },
        None => FaithfulnessValue {
            value: 0.0,
            degenerate: true,
        },
    }
}

/// Faithfulness correlation: |Pearson| between logit drops under random
/// subset masking and the summed relevance of the masked positions. The
/// target class is the one the map attributes.
pub fn faithfulness_correlation(
    model: &Model,
    input: &Tensor,
    map: &RelevanceMap,
    cfg: &MetricConfig,
) -> Result<FaithfulnessValue> {
    let (_, h, w) = spatial_dims(input)?;
    check_map_alignment("faithfulness map", map, h, w)?;
    let mut stream = rng::substream(cfg.seed, "fc", sample_key(input));
    let drops = fc_drops(model, input, map.target_class, cfg, &mut stream)?;
    Ok(fc_from_drops(&drops, &map.values))
}

/// Average sensitivity: mean over Gaussian input perturbations of
/// ‖R(x+δ) − R(x)‖₂, divided by ‖R(x)‖₂ when `normalized`. Errors when the
/// unperturbed attribution has zero norm.
pub fn avg_sensitivity(
    explainer: &Explainer,
    model: &Model,
    input: &Tensor,
    target_class: usize,
    cfg: &MetricConfig,
    normalized: bool,
) -> Result<f64> {
    let (_, h, w) = spatial_dims(input)?;
    cfg.validate_sensitivity()?;
    let base = explainer(model, input, target_class)?;
    check_map_alignment("sensitivity base map", &base, h, w)?;
    let base_norm = base.values.l2_norm_f64();
    if base_norm == 0.0 {
        return Err(Error::DegenerateMetric(
            "attribution of the unperturbed input has zero norm".into(),
        ));
    }

    let mut stream = rng::substream(cfg.seed, "as", sample_key(input));
    let normal = Normal::new(0.0, cfg.perturb_std)
        .map_err(|e| Error::InvalidArgument(format!("perturbation distribution: {e}")))?;
    let mut total = 0.0;
    for _ in 0..cfg.n_perturbations {
        let perturbed_data: Vec<f32> = input
            .data()
            .iter()
            .map(|&v| v + normal.sample(&mut stream) as f32)
            .collect();
        let perturbed = Tensor::new(input.shape().to_vec(), perturbed_data)?;
        let shifted = explainer(model, &perturbed, target_class)?;
        check_map_alignment("sensitivity perturbed map", &shifted, h, w)?;
        let mut sq = 0.0;
        for (a, b) in shifted.values.data().iter().zip(base.values.data()) {
            let d = f64::from(*a) - f64::from(*b);
            sq += d * d;
        }
        let dist = sq.sqrt();
        total += if normalized { dist / base_norm } else { dist };
    }
    Ok(total / cfg.n_perturbations as f64)
}

/// Gini index of a slice of absolute values. Input need not be sorted.
pub(crate) fn gini_abs(values: &[f32]) -> Result<f64> {
    let mut xs: Vec<f64> = values.iter().map(|v| f64::from(v.abs())).collect();
    let total: f64 = xs.iter().sum();
    if total == 0.0 {
        return Err(Error::DegenerateMetric(
            "sparseness of an all-zero map is undefined".into(),
        ));
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut acc = 0.0;
    for (i, x) in xs.iter().enumerate() {
        acc += (2.0 * (i + 1) as f64 - n - 1.0) * x;
    }
    Ok((acc / (n * total)).clamp(0.0, 1.0))
}

/// Sparseness: Gini index of the absolute relevance values. 0 for a uniform
/// map, (n−1)/n for a one-hot map. Errors on an all-zero map.
pub fn sparseness(map: &RelevanceMap) -> Result<f64> {
    gini_abs(map.values.data())
}

struct SampleEval {
    key: u64,
    faithfulness: Option<FaithfulnessValue>,
    sensitivity: Option<f64>,
    sparseness: Option<f64>,
}

/// Mean and population std computed in a canonical order (sorted by sample
/// key, then value) so the result is bit-identical under batch permutation.
pub(crate) fn aggregate(mut keyed: Vec<(u64, f64)>) -> (f64, f64) {
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let n = keyed.len() as f64;
    let mean = keyed.iter().map(|kv| kv.1).sum::<f64>() / n;
    let var = keyed.iter().map(|kv| (kv.1 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn stats_for(evals: &[SampleEval], pick: impl Fn(&SampleEval) -> f64) -> MetricStats {
    let keyed: Vec<(u64, f64)> = evals.iter().map(|e| (e.key, pick(e))).collect();
    let values: Vec<f64> = keyed.iter().map(|kv| kv.1).collect();
    let (mean, std) = aggregate(keyed);
    MetricStats { mean, std, values }
}

/// Evaluates the selected metrics for one attribution method over a labeled
/// batch. The target class of every attribution is the sample's ground-truth
/// label. Per-sample random streams are derived from the config seed and the
/// sample's content hash, so the report does not depend on batch order.
pub fn evaluate_batch(
    model: &Model,
    batch: &Dataset,
    method: &str,
    explainer: &Explainer,
    selection: &[Metric],
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument(
            "evaluate_batch needs a non-empty batch".into(),
        ));
    }
    if selection.is_empty() {
        return Err(Error::InvalidArgument(
            "evaluate_batch needs at least one metric selected".into(),
        ));
    }
    let want_fc = selection.contains(&Metric::Faithfulness);
    let want_as = selection.contains(&Metric::Sensitivity);
    let want_sp = selection.contains(&Metric::Sparseness);

    let results: Vec<Result<SampleEval>> = batch
        .images
        .par_iter()
        .zip(&batch.labels)
        .map(|(input, &label)| {
            let (_, h, w) = spatial_dims(input)?;
            if label >= model.n_classes() {
                return Err(Error::InvalidTargetClass {
                    class: label,
                    n_classes: model.n_classes(),
                });
            }
            let key = sample_key(input);
            let base_map = if want_fc || want_sp {
                let map = explainer(model, input, label)?;
                check_map_alignment("batch attribution map", &map, h, w)?;
                Some(map)
            } else {
                None
            };
            let faithfulness = if want_fc {
                let map = base_map.as_ref().expect("map built when FC selected");
                let mut stream = rng::substream(cfg.seed, "fc", key);
                let drops = fc_drops(model, input, label, cfg, &mut stream)?;
                Some(fc_from_drops(&drops, &map.values))
            } else {
                None
            };
            let sensitivity = if want_as {
                Some(avg_sensitivity(explainer, model, input, label, cfg, true)?)
            } else {
                None
            };
            let sparseness = if want_sp {
                let map = base_map.as_ref().expect("map built when SP selected");
                Some(gini_abs(map.values.data())?)
            } else {
                None
            };
            Ok(SampleEval {
                key,
                faithfulness,
                sensitivity,
                sparseness,
            })
        })
        .collect();

    let mut evals = Vec::with_capacity(results.len());
    for r in results {
        evals.push(r?);
    }

    let faithfulness = want_fc.then(|| {
        stats_for(&evals, |e| {
            e.faithfulness.expect("FC computed for every sample").value
        })
    });
    let degenerate = want_fc.then(|| {
        evals
            .iter()
            .filter(|e| e.faithfulness.expect("FC computed").degenerate)
            .count()
    });
    let sensitivity = want_as
        .then(|| stats_for(&evals, |e| e.sensitivity.expect("AS computed for every sample")));
    let sparseness = want_sp
        .then(|| stats_for(&evals, |e| e.sparseness.expect("SP computed for every sample")));

    Ok(MetricReport {
        method: method.to_string(),
        n_samples: batch.len(),
        faithfulness,
        degenerate_faithfulness_samples: degenerate,
        sensitivity,
        sparseness,
    })
}
