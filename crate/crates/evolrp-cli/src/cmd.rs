//! The six subcommands. Each resolves its configuration (flags over config
//! file over defaults), writes a manifest with the resolved values, runs,
//! and writes its artifacts into the output directory.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use evolrp::baselines::{gradcam, integrated_gradients, lime_lite, occlusion_map, PatchGrid};
use evolrp::cmaes::{default_lambda, run_cmaes, CmaConfig, GenerationStats};
use evolrp::evo::{decode_genome, evolrp_objective, Genome, RuleFamily};
use evolrp::lrp::{explain_lrp, LayerRuleConfig, LrpRule, RelevanceMap};
use evolrp::maps::{composite_map, render_heatmap, HeatmapFormat};
use evolrp::metrics::{evaluate_batch, Metric, MetricConfig, MetricReport, MetricStats};
use evolrp::model_io::save_model;
use evolrp::net::Model;
use evolrp::tensor::Tensor;
use evolrp::train::{train as run_training, TrainConfig};

use crate::opts::{
    load_config_file, load_model_file, load_rules_file, resolve_metric_config, usage, write_json,
    write_manifest, DataConfig, DataFile, DataOpts, MethodFile, MethodOpts, MethodParams,
    MetricFile, MetricOpts, SCHEMA_VERSION,
};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MetricArg {
    Faithfulness,
    Sensitivity,
    Sparseness,
}

impl MetricArg {
    fn to_metric(self) -> Metric {
        match self {
            MetricArg::Faithfulness => Metric::Faithfulness,
            MetricArg::Sensitivity => Metric::Sensitivity,
            MetricArg::Sparseness => Metric::Sparseness,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FamilyArg {
    Epsilon,
    Alphabeta,
}

impl FamilyArg {
    fn to_family(self) -> RuleFamily {
        match self {
            FamilyArg::Epsilon => RuleFamily::Epsilon,
            FamilyArg::Alphabeta => RuleFamily::AlphaBeta,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RuleArg {
    Zero,
    Epsilon,
    Alphabeta,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Png,
    Pgm,
    Csv,
}

impl FormatArg {
    fn to_format(self) -> (HeatmapFormat, &'static str) {
        match self {
            FormatArg::Png => (HeatmapFormat::Png, "png"),
            FormatArg::Pgm => (HeatmapFormat::Pgm, "pgm"),
            FormatArg::Csv => (HeatmapFormat::Csv, "csv"),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Lrp0,
    Evolrp,
    Ig,
    Gradcam,
    Lime,
    Occlusion,
}

impl MethodArg {
    fn name(self) -> &'static str {
        match self {
            MethodArg::Lrp0 => "lrp0",
            MethodArg::Evolrp => "evolrp",
            MethodArg::Ig => "ig",
            MethodArg::Gradcam => "gradcam",
            MethodArg::Lime => "lime",
            MethodArg::Occlusion => "occlusion",
        }
    }
}

type Explainer = Box<dyn Fn(&Model, &Tensor, usize) -> evolrp::Result<RelevanceMap> + Sync>;

/// Closure form of one attribution method, plus the LRP rules it uses when
/// it is an LRP variant (echoed into manifests).
fn build_explainer(
    method: MethodArg,
    model: &Model,
    params: &MethodParams,
    rules_file: &Option<PathBuf>,
) -> anyhow::Result<(Explainer, Option<LayerRuleConfig>)> {
    match method {
        MethodArg::Lrp0 => {
            let config = LayerRuleConfig::zero_baseline(model);
            let captured = config.clone();
            Ok((Box::new(move |m, x, t| explain_lrp(m, x, t, &captured)), Some(config)))
        }
        MethodArg::Evolrp => {
            let Some(path) = rules_file else {
                return Err(usage("--rules-file is required with the evolrp method"));
            };
            let config = load_rules_file(path, model)?;
            let captured = config.clone();
            Ok((Box::new(move |m, x, t| explain_lrp(m, x, t, &captured)), Some(config)))
        }
        MethodArg::Ig => {
            let steps = params.ig_steps;
            Ok((
                Box::new(move |m, x, t| {
                    let baseline = Tensor::zeros(x.shape().to_vec());
                    integrated_gradients(m, x, t, &baseline, steps)
                }),
                None,
            ))
        }
        MethodArg::Gradcam => Ok((Box::new(gradcam), None)),
        MethodArg::Lime => {
            let p = params.clone();
            Ok((
                Box::new(move |m, x, t| {
                    let [_, h, w] = m.input_shape;
                    let grid = PatchGrid::new(p.patch_size, h, w)?;
                    lime_lite(m, x, t, &grid, p.lime_samples, p.lime_kernel_width, p.lime_lambda, p.lime_seed)
                }),
                None,
            ))
        }
        MethodArg::Occlusion => {
            let patch = params.patch_size;
            Ok((
                Box::new(move |m, x, t| {
                    let [_, h, w] = m.input_shape;
                    let grid = PatchGrid::new(patch, h, w)?;
                    occlusion_map(m, x, t, &grid)
                }),
                None,
            ))
        }
    }
}

fn stat_line(label: &str, stats: Option<&MetricStats>) {
    if let Some(s) = stats {
        println!("  {label:<13} mean {:.4}  std {:.4}", s.mean, s.std);
    }
}

fn metric_mean(report: &MetricReport, metric: Metric) -> Option<f64> {
    let stats = match metric {
        Metric::Faithfulness => &report.faithfulness,
        Metric::Sensitivity => &report.sensitivity,
        Metric::Sparseness => &report.sparseness,
    };
    stats.as_ref().map(|s| s.mean)
}

// ---------------------------------------------------------------- train --

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Output directory for the model, history, and manifest
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; explicit flags win on conflict
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataOpts,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Seed for weight init and batch shuffling
    #[arg(long)]
    train_seed: Option<u64>,
    /// Stop early once training accuracy reaches this value
    #[arg(long)]
    stop_at_accuracy: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct TrainFile {
    #[serde(flatten)]
    data: DataFile,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    momentum: Option<f64>,
    train_seed: Option<u64>,
    stop_at_accuracy: Option<f64>,
}

#[derive(Serialize)]
struct TrainRun {
    out: String,
    data: DataConfig,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    momentum: f64,
    train_seed: u64,
    stop_at_accuracy: Option<f64>,
}

#[derive(Serialize)]
struct HistoryDoc<'a> {
    schema_version: u32,
    history: &'a [evolrp::train::EpochStats],
}

pub fn train(args: TrainArgs) -> anyhow::Result<()> {
    let file: TrainFile = load_config_file(&args.config)?;
    let defaults = TrainConfig::default();
    let run = TrainRun {
        out: args.out.display().to_string(),
        data: DataConfig::resolve(&args.data, &file.data, 500),
        epochs: args.epochs.or(file.epochs).unwrap_or(defaults.epochs),
        batch_size: args.batch_size.or(file.batch_size).unwrap_or(defaults.batch_size),
        learning_rate: args
            .learning_rate
            .or(file.learning_rate)
            .unwrap_or(defaults.learning_rate),
        momentum: args.momentum.or(file.momentum).unwrap_or(defaults.momentum),
        train_seed: args.train_seed.or(file.train_seed).unwrap_or(defaults.seed),
        stop_at_accuracy: args.stop_at_accuracy.or(file.stop_at_accuracy),
    };
    write_manifest(&args.out, "train", &run)?;

    let dataset = run.data.generate()?;
    println!(
        "training on {} images (data seed {}, train seed {})",
        dataset.len(),
        run.data.data_seed,
        run.train_seed
    );
    let result = run_training(
        &dataset,
        &TrainConfig {
            epochs: run.epochs,
            batch_size: run.batch_size,
            learning_rate: run.learning_rate,
            momentum: run.momentum,
            seed: run.train_seed,
            stop_at_accuracy: run.stop_at_accuracy,
        },
    )?;

    let model_path = args.out.join("model.json");
    save_model(&result.model, &model_path)?;
    write_json(
        &args.out.join("history.json"),
        &HistoryDoc { schema_version: SCHEMA_VERSION, history: &result.history },
    )?;

    let last = result.history.last().expect("training history is never empty");
    println!(
        "epoch {}: loss {:.4}, accuracy {:.4}",
        last.epoch, last.mean_loss, last.accuracy
    );
    println!("model: {}", model_path.display());
    Ok(())
}

// -------------------------------------------------------------- explain --

#[derive(Args, Debug)]
pub struct ExplainArgs {
    /// Trained model file
    #[arg(long)]
    model: PathBuf,
    /// Output directory for the heatmap and manifest
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; explicit flags win on conflict
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataOpts,
    /// Index of the image to explain within the generated set
    #[arg(long)]
    image_index: Option<usize>,
    /// Class to explain (defaults to the image's label)
    #[arg(long)]
    target: Option<usize>,
    /// Uniform rule family applied to every trainable layer
    #[arg(long, value_enum)]
    rule: Option<RuleArg>,
    /// Rule parameter: epsilon for the epsilon rule, alpha for alphabeta
    #[arg(long)]
    param: Option<f64>,
    /// Tuned per-layer rules JSON; overrides --rule/--param
    #[arg(long)]
    rules_file: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct ExplainFile {
    #[serde(flatten)]
    data: DataFile,
    image_index: Option<usize>,
    target: Option<usize>,
    param: Option<f64>,
}

#[derive(Serialize)]
struct ExplainRun {
    model: String,
    out: String,
    data: DataConfig,
    image_index: usize,
    target_class: usize,
    rules: LayerRuleConfig,
    format: &'static str,
}

pub fn explain(args: ExplainArgs) -> anyhow::Result<()> {
    let file: ExplainFile = load_config_file(&args.config)?;
    let model = load_model_file(&args.model)?;

    let data = DataConfig::resolve(&args.data, &file.data, 4);
    let dataset = data.generate()?;
    let image_index = args.image_index.or(file.image_index).unwrap_or(0);
    if image_index >= dataset.len() {
        anyhow::bail!("image index {image_index} outside the {} generated images", dataset.len());
    }
    let target_class = args.target.or(file.target).unwrap_or(dataset.labels[image_index]);

    let rules = match &args.rules_file {
        Some(path) => load_rules_file(path, &model)?,
        None => {
            let n_layers = model.trainable_indices().len();
            let rule = match args.rule.unwrap_or(RuleArg::Zero) {
                RuleArg::Zero => LrpRule::Zero,
                RuleArg::Epsilon => LrpRule::Epsilon(args.param.or(file.param).unwrap_or(0.25)),
                RuleArg::Alphabeta => LrpRule::AlphaBeta(args.param.or(file.param).unwrap_or(2.0)),
            };
            let config = LayerRuleConfig::uniform(rule, n_layers);
            config.validate_for(&model)?;
            config
        }
    };

    let format = args.format.unwrap_or(FormatArg::Png);
    let (heat_format, ext) = format.to_format();
    let run = ExplainRun {
        model: args.model.display().to_string(),
        out: args.out.display().to_string(),
        data,
        image_index,
        target_class,
        rules: rules.clone(),
        format: ext,
    };
    write_manifest(&args.out, "explain", &run)?;

    let image = &dataset.images[image_index];
    let map = explain_lrp(&model, image, target_class, &rules)?;
    let out_path = args.out.join(format!("heatmap.{ext}"));
    render_heatmap(&map, &out_path, heat_format)?;

    let logit = f64::from(model.forward(image)?.logits().data()[target_class]);
    println!(
        "image {image_index} (label {}, data seed {}), class {} \"{}\": logit {:.4}",
        dataset.labels[image_index],
        run.data.data_seed,
        target_class,
        model.class_names[target_class],
        logit
    );
    println!("heatmap: {}", out_path.display());
    Ok(())
}

// ------------------------------------------------------------- evaluate --

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Trained model file
    #[arg(long)]
    model: PathBuf,
    /// Output directory for the report and manifest
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; explicit flags win on conflict
    #[arg(long)]
    config: Option<PathBuf>,
    /// Attribution method to score
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Comma-separated metric selection (default: all three)
    #[arg(long, value_enum, value_delimiter = ',')]
    metrics: Option<Vec<MetricArg>>,
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    metric_opts: MetricOpts,
    #[command(flatten)]
    method_opts: MethodOpts,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct EvaluateFile {
    #[serde(flatten)]
    data: DataFile,
    #[serde(flatten)]
    metric: MetricFile,
    #[serde(flatten)]
    method: MethodFile,
}

#[derive(Serialize)]
struct EvaluateRun<'a> {
    model: String,
    out: String,
    method: &'static str,
    metrics: Vec<&'static str>,
    data: DataConfig,
    metric_config: &'a MetricConfig,
    method_params: &'a MethodParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    rules: Option<&'a LayerRuleConfig>,
}

#[derive(Serialize)]
struct ReportDoc<'a> {
    schema_version: u32,
    report: &'a MetricReport,
}

fn selected_metrics(choice: &Option<Vec<MetricArg>>) -> Vec<Metric> {
    let all = [Metric::Faithfulness, Metric::Sensitivity, Metric::Sparseness];
    match choice {
        None => all.to_vec(),
        Some(picked) => {
            let mut out = Vec::new();
            for arg in picked {
                let metric = arg.to_metric();
                if !out.contains(&metric) {
                    out.push(metric);
                }
            }
            out
        }
    }
}

pub fn evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let file: EvaluateFile = load_config_file(&args.config)?;
    let model = load_model_file(&args.model)?;

    let data = DataConfig::resolve(&args.data, &file.data, 4);
    let metric_config = resolve_metric_config(&args.metric_opts, &file.metric);
    let method_params = MethodParams::resolve(&args.method_opts, &file.method);
    let selection = selected_metrics(&args.metrics);
    let (explainer, rules) =
        build_explainer(args.method, &model, &method_params, &args.method_opts.rules_file)?;

    let run = EvaluateRun {
        model: args.model.display().to_string(),
        out: args.out.display().to_string(),
        method: args.method.name(),
        metrics: selection.iter().map(|m| m.name()).collect(),
        data: data.clone(),
        metric_config: &metric_config,
        method_params: &method_params,
        rules: rules.as_ref(),
    };
    write_manifest(&args.out, "evaluate", &run)?;

    let batch = data.generate()?;
    let report = evaluate_batch(
        &model,
        &batch,
        args.method.name(),
        explainer.as_ref(),
        &selection,
        &metric_config,
    )?;
    let report_path = args.out.join("report.json");
    write_json(&report_path, &ReportDoc { schema_version: SCHEMA_VERSION, report: &report })?;

    println!(
        "method {} on {} images (data seed {}, metric seed {})",
        report.method,
        report.n_samples,
        data.data_seed,
        metric_config.seed
    );
    stat_line("faithfulness", report.faithfulness.as_ref());
    if let Some(n) = report.degenerate_faithfulness_samples {
        if n > 0 {
            println!("  ({n} samples had zero-variance faithfulness drops)");
        }
    }
    stat_line("sensitivity", report.sensitivity.as_ref());
    stat_line("sparseness", report.sparseness.as_ref());
    println!("report: {}", report_path.display());
    Ok(())
}

// ------------------------------------------------------------- optimize --

#[derive(Args, Debug)]
pub struct OptimizeArgs {
    /// Trained model file
    #[arg(long)]
    model: PathBuf,
    /// Output directory for the result, tuned rules, and manifest
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; explicit flags win on conflict
    #[arg(long)]
    config: Option<PathBuf>,
    /// Metric the tuner optimizes
    #[arg(long, value_enum)]
    metric: MetricArg,
    /// Rule family whose per-layer parameters are tuned
    #[arg(long, value_enum)]
    rule: FamilyArg,
    /// CMA-ES generations (0 evaluates only the starting configuration)
    #[arg(long)]
    iters: Option<usize>,
    /// Population size per generation
    #[arg(long)]
    lambda: Option<usize>,
    /// Initial step size of the search
    #[arg(long)]
    sigma0: Option<f64>,
    /// Seed of the optimizer's sampling stream
    #[arg(long)]
    cma_seed: Option<u64>,
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    metric_opts: MetricOpts,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct OptimizeFile {
    #[serde(flatten)]
    data: DataFile,
    #[serde(flatten)]
    metric: MetricFile,
    iters: Option<usize>,
    lambda: Option<usize>,
    sigma0: Option<f64>,
    cma_seed: Option<u64>,
}

#[derive(Serialize)]
struct OptimizeRun<'a> {
    model: String,
    out: String,
    metric: &'static str,
    rule_family: RuleFamily,
    iters: usize,
    lambda: usize,
    sigma0: f64,
    cma_seed: u64,
    data: DataConfig,
    metric_config: &'a MetricConfig,
}

#[derive(Serialize)]
struct SolutionReport {
    theta: Vec<f64>,
    rules: LayerRuleConfig,
    /// Internal minimized fitness (maximized metrics are negated).
    fitness: f64,
    /// The metric on its natural scale.
    metric_value: f64,
}

#[derive(Serialize)]
struct OptimizeDoc<'a> {
    schema_version: u32,
    metric: &'static str,
    rule_family: RuleFamily,
    higher_is_better: bool,
    evaluations: usize,
    best: SolutionReport,
    initial: SolutionReport,
    /// The untuned all-zero-rule reference on the same batch and seeds.
    lrp0_baseline_metric_value: f64,
    history: &'a [GenerationStats],
}

fn solution_report(
    theta: &[f64],
    fitness: f64,
    family: RuleFamily,
    metric: Metric,
) -> anyhow::Result<SolutionReport> {
    let rules = decode_genome(&Genome { theta: theta.to_vec(), rule_family: family })?;
    let metric_value = if metric.higher_is_better() { -fitness } else { fitness };
    Ok(SolutionReport { theta: theta.to_vec(), rules, fitness, metric_value })
}

pub fn optimize(args: OptimizeArgs) -> anyhow::Result<()> {
    let file: OptimizeFile = load_config_file(&args.config)?;
    let model = load_model_file(&args.model)?;
    let metric = args.metric.to_metric();
    let family = args.rule.to_family();
    let dim = model.trainable_indices().len();

    let data = DataConfig::resolve(&args.data, &file.data, 4);
    let metric_config = resolve_metric_config(&args.metric_opts, &file.metric);
    let run = OptimizeRun {
        model: args.model.display().to_string(),
        out: args.out.display().to_string(),
        metric: metric.name(),
        rule_family: family,
        iters: args.iters.or(file.iters).unwrap_or(50),
        lambda: args.lambda.or(file.lambda).unwrap_or_else(|| default_lambda(dim)),
        sigma0: args.sigma0.or(file.sigma0).unwrap_or(0.5),
        cma_seed: args.cma_seed.or(file.cma_seed).unwrap_or(7),
        data: data.clone(),
        metric_config: &metric_config,
    };
    write_manifest(&args.out, "optimize", &run)?;

    let batch = data.generate()?;
    println!(
        "tuning {} ({}) for {} with lambda {} over {} images (cma seed {}, metric seed {})",
        run.rule_family.name(),
        dim,
        run.metric,
        run.lambda,
        batch.len(),
        run.cma_seed,
        metric_config.seed
    );

    let mut objective = evolrp_objective(&model, &batch, family, metric, &metric_config)?;
    let cma = CmaConfig {
        theta0: vec![0.0; dim],
        lambda: Some(run.lambda),
        max_iter: run.iters,
        sigma0: run.sigma0,
        seed: run.cma_seed,
        tol: None,
    };
    let result = run_cmaes(&mut objective, &cma)?;

    let initial_gen = result.history.first().expect("run history is never empty");
    let best = solution_report(&result.best_theta, result.best_fitness, family, metric)?;
    let initial = solution_report(&initial_gen.best_theta, initial_gen.best_fitness, family, metric)?;

    let zero_rules = LayerRuleConfig::zero_baseline(&model);
    let zero_explainer: Explainer = Box::new(move |m, x, t| explain_lrp(m, x, t, &zero_rules));
    let baseline_report =
        evaluate_batch(&model, &batch, "lrp0", zero_explainer.as_ref(), &[metric], &metric_config)?;
    let lrp0_baseline_metric_value =
        metric_mean(&baseline_report, metric).expect("requested metric present");

    let doc = OptimizeDoc {
        schema_version: SCHEMA_VERSION,
        metric: metric.name(),
        rule_family: family,
        higher_is_better: metric.higher_is_better(),
        evaluations: result.evaluations,
        best,
        initial,
        lrp0_baseline_metric_value,
        history: &result.history,
    };
    let result_path = args.out.join("result.json");
    write_json(&result_path, &doc)?;
    write_json(&args.out.join("best_rules.json"), &doc.best.rules)?;

    println!(
        "{} evaluations, best {} {:.4} (initial {:.4}, untuned lrp0 {:.4})",
        doc.evaluations, doc.metric, doc.best.metric_value, doc.initial.metric_value,
        doc.lrp0_baseline_metric_value
    );
    println!("result: {}", result_path.display());
    Ok(())
}

// -------------------------------------------------------------- compare --

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Trained model file
    #[arg(long)]
    model: PathBuf,
    /// Output directory for the comparison table and manifest
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; explicit flags win on conflict
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generations for the built-in tuning run when no --rules-file is given
    #[arg(long)]
    evolrp_iters: Option<usize>,
    /// Metric the built-in tuning run optimizes
    #[arg(long, value_enum)]
    evolrp_metric: Option<MetricArg>,
    /// Rule family for the built-in tuning run
    #[arg(long, value_enum)]
    evolrp_rule: Option<FamilyArg>,
    /// Seed of the built-in tuning run
    #[arg(long)]
    cma_seed: Option<u64>,
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    metric_opts: MetricOpts,
    #[command(flatten)]
    method_opts: MethodOpts,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct CompareFile {
    #[serde(flatten)]
    data: DataFile,
    #[serde(flatten)]
    metric: MetricFile,
    #[serde(flatten)]
    method: MethodFile,
    evolrp_iters: Option<usize>,
    cma_seed: Option<u64>,
}

#[derive(Serialize)]
struct CompareRun<'a> {
    model: String,
    out: String,
    data: DataConfig,
    metric_config: &'a MetricConfig,
    method_params: &'a MethodParams,
    evolrp_rules: &'a LayerRuleConfig,
}

#[derive(Serialize)]
struct ComparisonDoc<'a> {
    schema_version: u32,
    evolrp_rules: &'a LayerRuleConfig,
    rows: &'a [MetricReport],
}

fn table_cell(stats: Option<&MetricStats>) -> String {
    match stats {
        Some(s) => format!("{:.4} ({:.4})", s.mean, s.std),
        None => "-".into(),
    }
}

pub fn compare(args: CompareArgs) -> anyhow::Result<()> {
    let file: CompareFile = load_config_file(&args.config)?;
    let model = load_model_file(&args.model)?;

    let data = DataConfig::resolve(&args.data, &file.data, 4);
    let metric_config = resolve_metric_config(&args.metric_opts, &file.metric);
    let method_params = MethodParams::resolve(&args.method_opts, &file.method);
    let batch = data.generate()?;

    let evolrp_rules = match &args.method_opts.rules_file {
        Some(path) => load_rules_file(path, &model)?,
        None => {
            let iters = args.evolrp_iters.or(file.evolrp_iters).unwrap_or(10);
            let metric = args.evolrp_metric.unwrap_or(MetricArg::Faithfulness).to_metric();
            let family = args.evolrp_rule.unwrap_or(FamilyArg::Alphabeta).to_family();
            let dim = model.trainable_indices().len();
            let seed = args.cma_seed.or(file.cma_seed).unwrap_or(7);
            println!(
                "no --rules-file; tuning {} for {} over {} generations first (cma seed {seed})",
                family.name(),
                metric.name(),
                iters
            );
            let mut objective = evolrp_objective(&model, &batch, family, metric, &metric_config)?;
            let result = run_cmaes(
                &mut objective,
                &CmaConfig {
                    theta0: vec![0.0; dim],
                    lambda: None,
                    max_iter: iters,
                    sigma0: 0.5,
                    seed,
                    tol: None,
                },
            )?;
            decode_genome(&Genome { theta: result.best_theta, rule_family: family })?
        }
    };

    let run = CompareRun {
        model: args.model.display().to_string(),
        out: args.out.display().to_string(),
        data: data.clone(),
        metric_config: &metric_config,
        method_params: &method_params,
        evolrp_rules: &evolrp_rules,
    };
    write_manifest(&args.out, "compare", &run)?;

    let selection = [Metric::Faithfulness, Metric::Sensitivity, Metric::Sparseness];
    let tuned = evolrp_rules.clone();
    let tuned_explainer: Explainer = Box::new(move |m, x, t| explain_lrp(m, x, t, &tuned));
    let mut table: Vec<(&str, Explainer)> = vec![
        ("LIME", build_explainer(MethodArg::Lime, &model, &method_params, &None)?.0),
        ("IG", build_explainer(MethodArg::Ig, &model, &method_params, &None)?.0),
        ("GradCAM", build_explainer(MethodArg::Gradcam, &model, &method_params, &None)?.0),
        ("LRP-0", build_explainer(MethodArg::Lrp0, &model, &method_params, &None)?.0),
        ("EVO-LRP", tuned_explainer),
    ];

    let mut rows = Vec::new();
    for (name, explainer) in table.drain(..) {
        rows.push(evaluate_batch(&model, &batch, name, explainer.as_ref(), &selection, &metric_config)?);
    }
    let table_path = args.out.join("comparison.json");
    write_json(
        &table_path,
        &ComparisonDoc { schema_version: SCHEMA_VERSION, evolrp_rules: &evolrp_rules, rows: &rows },
    )?;

    println!(
        "{} images (data seed {}, metric seed {}); mean (std) per metric",
        batch.len(),
        data.data_seed,
        metric_config.seed
    );
    println!("{:<9} {:<17} {:<17} {:<17}", "method", "faithfulness", "sensitivity", "sparseness");
    for row in &rows {
        println!(
            "{:<9} {:<17} {:<17} {:<17}",
            row.method,
            table_cell(row.faithfulness.as_ref()),
            table_cell(row.sensitivity.as_ref()),
            table_cell(row.sparseness.as_ref()),
        );
    }
    println!("table: {}", table_path.display());
    Ok(())
}

// ------------------------------------------------------------ composite --

#[derive(Args, Debug)]
pub struct CompositeArgs {
    /// Trained model file
    #[arg(long)]
    model: PathBuf,
    /// Output directory for the composite heatmap and manifest
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; explicit flags win on conflict
    #[arg(long)]
    config: Option<PathBuf>,
    /// Tuned rules JSON, given three times (one file per tuned metric)
    #[arg(long = "rules")]
    rules: Vec<PathBuf>,
    #[command(flatten)]
    data: DataOpts,
    /// Index of the image to explain within the generated set
    #[arg(long)]
    image_index: Option<usize>,
    /// Class to explain (defaults to the image's label)
    #[arg(long)]
    target: Option<usize>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct CompositeFile {
    #[serde(flatten)]
    data: DataFile,
    image_index: Option<usize>,
    target: Option<usize>,
}

#[derive(Serialize)]
struct CompositeRun {
    model: String,
    out: String,
    data: DataConfig,
    image_index: usize,
    target_class: usize,
    rules: Vec<LayerRuleConfig>,
    format: &'static str,
}

pub fn composite(args: CompositeArgs) -> anyhow::Result<()> {
    let file: CompositeFile = load_config_file(&args.config)?;
    let model = load_model_file(&args.model)?;

    if args.rules.len() != 3 {
        return Err(usage(format!(
            "composite needs --rules three times (one per tuned metric), got {}",
            args.rules.len()
        )));
    }
    let mut configs = Vec::new();
    for path in &args.rules {
        configs.push(load_rules_file(path, &model)?);
    }
    let configs: [LayerRuleConfig; 3] = configs.try_into().expect("length checked above");

    let data = DataConfig::resolve(&args.data, &file.data, 4);
    let dataset = data.generate()?;
    let image_index = args.image_index.or(file.image_index).unwrap_or(0);
    if image_index >= dataset.len() {
        anyhow::bail!("image index {image_index} outside the {} generated images", dataset.len());
    }
    let target_class = args.target.or(file.target).unwrap_or(dataset.labels[image_index]);
    let format = args.format.unwrap_or(FormatArg::Png);
    let (heat_format, ext) = format.to_format();

    let run = CompositeRun {
        model: args.model.display().to_string(),
        out: args.out.display().to_string(),
        data,
        image_index,
        target_class,
        rules: configs.to_vec(),
        format: ext,
    };
    write_manifest(&args.out, "composite", &run)?;

    let map = composite_map(&model, &dataset.images[image_index], target_class, &configs)?;
    let out_path = args.out.join(format!("composite.{ext}"));
    render_heatmap(&map, &out_path, heat_format)?;

    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for v in map.values.data() {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    println!(
        "image {image_index} (data seed {}), class {} \"{}\": composite range [{lo:.4}, {hi:.4}]",
        run.data.data_seed, target_class, model.class_names[target_class]
    );
    println!("composite: {}", out_path.display());
    Ok(())
}
