//! LRP hyperparameter tuning: genome encoding/decoding, metric-driven
//! objectives for the CMA-ES core, and a bi-objective scalarization sweep
//! with non-dominated filtering and knee-point selection.
//!
//! Genomes are unconstrained real vectors, one coordinate per trainable
//! layer. Smooth transforms (softplus, logistic) map them onto the valid
//! rule ranges, so the optimizer never sees a constraint boundary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cmaes::{run_cmaes, CmaConfig};
use crate::data::Dataset;
use crate::lrp::{explain_lrp, LayerRuleConfig, LrpRule};
use crate::metrics::{
    aggregate, avg_sensitivity, fc_drops, fc_from_drops, sample_key, FcDrops, Metric, MetricConfig,
};
use crate::net::Model;
use crate::rng;
use crate::{Error, Result};

/// Which single-parameter rule family a genome tunes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleFamily {
    Epsilon,
    AlphaBeta,
}

impl RuleFamily {
    pub fn name(self) -> &'static str {
        match self {
            RuleFamily::Epsilon => "epsilon",
            RuleFamily::AlphaBeta => "alpha_beta",
        }
    }
}

/// One point in the tuning search space: an unconstrained parameter per
/// trainable layer plus the family it decodes into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genome {
    pub theta: Vec<f64>,
    pub rule_family: RuleFamily,
}

/// ln(1 + eᵗ), stable for large |t|.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// 1/(1 + e⁻ᵗ), stable for large |t|.
fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn decode_parameter(theta: f64, family: RuleFamily) -> LrpRule {
    match family {
        RuleFamily::AlphaBeta => LrpRule::AlphaBeta(1.0 + softplus(theta)),
        RuleFamily::Epsilon => LrpRule::Epsilon(logistic(theta).max(1e-9)),
    }
}

/// Maps a genome onto a per-layer rule assignment. The transforms are
/// monotone and cover the full valid ranges (α ∈ [1, ∞), ε ∈ (0, 1]), so
/// every finite genome decodes to a valid configuration.
pub fn decode_genome(genome: &Genome) -> Result<LayerRuleConfig> {
    if genome.theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidArgument(
            "genome parameters must be finite".into(),
        ));
    }
    Ok(LayerRuleConfig {
        rules: genome
            .theta
            .iter()
            .map(|&t| decode_parameter(t, genome.rule_family))
            .collect(),
    })
}

/// Seed shared by every candidate of one generation, so fitness noise is
/// common across the population (common random numbers).
pub fn generation_seed(base: u64, generation: usize) -> u64 {
    rng::substream_seed(base, "gen", generation as u64)
}

/// Faithfulness drops cache for one generation. Drops depend on the model,
/// the input, and the generation's random stream, but not on the candidate,
/// so the whole population shares one set per image.
struct DropsCache {
    generation: Option<usize>,
    by_image: HashMap<u64, FcDrops>,
}

impl DropsCache {
    fn new() -> DropsCache {
        DropsCache {
            generation: None,
            by_image: HashMap::new(),
        }
    }

    fn roll_to(&mut self, generation: usize) {
        if self.generation != Some(generation) {
            self.generation = Some(generation);
            self.by_image.clear();
        }
    }
}

/// Per-batch means of the selected metrics under one rule assignment,
/// computed exactly as `evaluate_batch` would (same streams, same canonical
/// aggregation order), with FC drops taken from the shared cache.
fn metric_means(
    model: &Model,
    batch: &Dataset,
    rules: &LayerRuleConfig,
    metrics: &[Metric],
    cfg: &MetricConfig,
    cache: &mut DropsCache,
) -> Result<Vec<f64>> {
    let explainer =
        |m: &Model, x: &crate::Tensor, t: usize| explain_lrp(m, x, t, rules);
    let mut keyed: Vec<Vec<(u64, f64)>> = vec![Vec::with_capacity(batch.len()); metrics.len()];

    for (input, &label) in batch.images.iter().zip(&batch.labels) {
        let key = sample_key(input);
        let needs_map = metrics
            .iter()
            .any(|m| matches!(m, Metric::Faithfulness | Metric::Sparseness));
        let map = if needs_map {
            Some(explain_lrp(model, input, label, rules)?)
        } else {
            None
        };
        for (slot, metric) in metrics.iter().enumerate() {
            let value = match metric {
                Metric::Faithfulness => {
                    if !cache.by_image.contains_key(&key) {
                        let mut stream = rng::substream(cfg.seed, "fc", key);
                        let drops = fc_drops(model, input, label, cfg, &mut stream)?;
                        cache.by_image.insert(key, drops);
                    }
                    let map = map.as_ref().expect("map built for FC");
                    fc_from_drops(&cache.by_image[&key], &map.values).value
                }
                Metric::Sensitivity => {
                    avg_sensitivity(&explainer, model, input, label, cfg, true)?
                }
                Metric::Sparseness => {
                    let map = map.as_ref().expect("map built for SP");
                    crate::metrics::gini_abs(map.values.data())?
                }
            };
            keyed[slot].push((key, value));
        }
    }
    Ok(keyed.into_iter().map(|kv| aggregate(kv).0).collect())
}

fn genome_context(theta: &[f64], family: RuleFamily, e: Error) -> Error {
    Error::Optimizer(format!(
        "objective failed for genome theta={theta:?} family={family:?}: {e}"
    ))
}

/// Builds the minimization objective for one metric: the negated (for
/// upward metrics) batch mean of the metric under the decoded genome.
/// The generation index selects the shared random draws of the population.
pub fn evolrp_objective<'a>(
    model: &'a Model,
    batch: &'a Dataset,
    family: RuleFamily,
    metric: Metric,
    cfg: &'a MetricConfig,
) -> Result<impl FnMut(&[f64], usize) -> Result<f64> + 'a> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument(
            "objective needs a non-empty batch".into(),
        ));
    }
    let mut cache = DropsCache::new();
    Ok(move |theta: &[f64], generation: usize| {
        let genome = Genome {
            theta: theta.to_vec(),
            rule_family: family,
        };
        let rules = decode_genome(&genome)?;
        rules
            .validate_for(model)
            .map_err(|e| genome_context(theta, family, e))?;
        cache.roll_to(generation);
        let gen_cfg = MetricConfig {
            seed: generation_seed(cfg.seed, generation),
            ..cfg.clone()
        };
        let means = metric_means(model, batch, &rules, &[metric], &gen_cfg, &mut cache)
            .map_err(|e| genome_context(theta, family, e))?;
        let mean = means[0];
        Ok(if metric.higher_is_better() { -mean } else { mean })
    })
}

/// Like `evolrp_objective` but evaluates two metrics in one sweep (sharing
/// the per-sample attribution map) and returns their raw batch means.
pub fn evolrp_pair_objective<'a>(
    model: &'a Model,
    batch: &'a Dataset,
    family: RuleFamily,
    metrics: [Metric; 2],
    cfg: &'a MetricConfig,
) -> Result<impl FnMut(&[f64], usize) -> Result<[f64; 2]> + 'a> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument(
            "objective needs a non-empty batch".into(),
        ));
    }
    let mut cache = DropsCache::new();
    Ok(move |theta: &[f64], generation: usize| {
        let genome = Genome {
            theta: theta.to_vec(),
            rule_family: family,
        };
        let rules = decode_genome(&genome)?;
        rules
            .validate_for(model)
            .map_err(|e| genome_context(theta, family, e))?;
        cache.roll_to(generation);
        let gen_cfg = MetricConfig {
            seed: generation_seed(cfg.seed, generation),
            ..cfg.clone()
        };
        let means = metric_means(model, batch, &rules, &metrics, &gen_cfg, &mut cache)
            .map_err(|e| genome_context(theta, family, e))?;
        Ok([means[0], means[1]])
    })
}

/// Two-objective evaluator: raw objective values (not direction-adjusted).
pub type PairObjective<'a> = dyn FnMut(&[f64], usize) -> Result<[f64; 2]> + 'a;

/// One evaluated point of a bi-objective run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluatedPoint {
    pub theta: Vec<f64>,
    pub values: [f64; 2],
}

/// Non-dominated set with its knee point. `points[i]` belongs to
/// `genomes[i]`; the list is sorted by the first objective ascending.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParetoFront {
    pub points: Vec<[f64; 2]>,
    pub genomes: Vec<Genome>,
    pub knee_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiObjectiveConfig {
    /// Number of weighted-sum scalarizations, spread uniformly over the
    /// simplex (endpoints included). At least 2.
    pub n_weights: usize,
    /// Optimization direction per objective (`true` = maximize).
    pub higher_is_better: [bool; 2],
    /// Family tag attached to the genomes of the returned front.
    pub rule_family: RuleFamily,
    /// Budget of each scalarized run; its seed is re-derived per run.
    pub cma: CmaConfig,
}

#[derive(Debug, Clone)]
pub struct BiObjectiveResult {
    pub front: ParetoFront,
    /// Every point evaluated across all scalarized runs, in evaluation
    /// order: the raw material for dominance auditing.
    pub log: Vec<EvaluatedPoint>,
}

fn dominates(a: [f64; 2], b: [f64; 2], higher_is_better: [bool; 2]) -> bool {
    let no_worse = |i: usize| {
        if higher_is_better[i] {
            a[i] >= b[i]
        } else {
            a[i] <= b[i]
        }
    };
    let better = |i: usize| {
        if higher_is_better[i] {
            a[i] > b[i]
        } else {
            a[i] < b[i]
        }
    };
    no_worse(0) && no_worse(1) && (better(0) || better(1))
}

/// Indices of the non-dominated points, exact duplicates collapsed to their
/// earliest occurrence, sorted by (first objective, second, index).
pub fn pareto_front_indices(points: &[[f64; 2]], higher_is_better: [bool; 2]) -> Vec<usize> {
    let mut seen: HashMap<(u64, u64), ()> = HashMap::new();
    let mut front = Vec::new();
    'outer: for (i, p) in points.iter().enumerate() {
        let fingerprint = (p[0].to_bits(), p[1].to_bits());
        if seen.contains_key(&fingerprint) {
            continue;
        }
        for q in points {
            if dominates(*q, *p, higher_is_better) {
                continue 'outer;
            }
        }
        seen.insert(fingerprint, ());
        front.push(i);
    }
    front.sort_by(|&a, &b| {
        points[a][0]
            .total_cmp(&points[b][0])
            .then(points[a][1].total_cmp(&points[b][1]))
            .then(a.cmp(&b))
    });
    front
}

/// Knee of a front sorted by the first objective: the interior point with
/// the largest perpendicular distance to the chord between the two extreme
/// points (ties to the lowest index). Fronts of one or two points have no
/// interior, so the first point is returned.
pub fn knee_point_index(front: &[[f64; 2]]) -> usize {
    if front.len() <= 2 {
        return 0;
    }
    let a = front[0];
    let b = front[front.len() - 1];
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let chord = (dx * dx + dy * dy).sqrt();
    let mut best = 1;
    let mut best_dist = -1.0;
    for (i, p) in front.iter().enumerate().take(front.len() - 1).skip(1) {
        let dist = ((p[0] - a[0]) * dy - (p[1] - a[1]) * dx).abs() / chord;
        if dist > best_dist {
            best_dist = dist;
            best = i;
        }
    }
    best
}

/// Sweeps weighted-sum scalarizations of a two-objective problem with one
/// CMA-ES run each, pools every evaluated point, and reduces the pool to a
/// non-dominated front with a knee point.
pub fn run_biobjective(
    pair: &mut PairObjective,
    config: &BiObjectiveConfig,
) -> Result<BiObjectiveResult> {
    if config.n_weights < 2 {
        return Err(Error::InvalidArgument(format!(
            "n_weights must be at least 2, got {}",
            config.n_weights
        )));
    }
    let hib = config.higher_is_better;
    let mut log: Vec<EvaluatedPoint> = Vec::new();

    for k in 0..config.n_weights {
        let w = k as f64 / (config.n_weights - 1) as f64;
        let run_cfg = CmaConfig {
            seed: rng::substream_seed(config.cma.seed, "scalarization", k as u64),
            ..config.cma.clone()
        };
        let mut scalarized = |theta: &[f64], generation: usize| -> Result<f64> {
            let values = pair(theta, generation)?;
            log.push(EvaluatedPoint {
                theta: theta.to_vec(),
                values,
            });
            let adjust = |i: usize| if hib[i] { -values[i] } else { values[i] };
            Ok(w * adjust(0) + (1.0 - w) * adjust(1))
        };
        run_cmaes(&mut scalarized, &run_cfg)?;
    }

    let points: Vec<[f64; 2]> = log.iter().map(|e| e.values).collect();
    let indices = pareto_front_indices(&points, hib);
    let front_points: Vec<[f64; 2]> = indices.iter().map(|&i| points[i]).collect();
    let genomes: Vec<Genome> = indices
        .iter()
        .map(|&i| Genome {
            theta: log[i].theta.clone(),
            rule_family: config.rule_family,
        })
        .collect();
    let knee_index = knee_point_index(&front_points);

    Ok(BiObjectiveResult {
        front: ParetoFront {
            points: front_points,
            genomes,
            knee_index,
        },
        log,
    })
}
