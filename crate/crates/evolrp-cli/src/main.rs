mod cmd;
mod opts;

use clap::{Parser, Subcommand};

/// Desk-scale attribution toolkit: train a small shapes classifier, explain
/// it with tunable LRP rules, score the attributions, tune the rules with
/// CMA-ES, and compare against standard baseline methods.
#[derive(Parser)]
#[command(name = "evolrp", version, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the shapes classifier and save it with its training history
    Train(cmd::TrainArgs),
    /// Render an attribution heatmap for one image
    Explain(cmd::ExplainArgs),
    /// Score one attribution method on a generated batch
    Evaluate(cmd::EvaluateArgs),
    /// Tune per-layer LRP rule parameters with CMA-ES
    Optimize(cmd::OptimizeArgs),
    /// Method-by-metric comparison table over all attribution methods
    Compare(cmd::CompareArgs),
    /// Composite heatmap from three tuned rule configurations
    Composite(cmd::CompositeArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd::train(args),
        Command::Explain(args) => cmd::explain(args),
        Command::Evaluate(args) => cmd::evaluate(args),
        Command::Optimize(args) => cmd::optimize(args),
        Command::Compare(args) => cmd::compare(args),
        Command::Composite(args) => cmd::composite(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        // Usage-level mistakes (bad flags are caught by the parser already;
        // missing files and malformed configs land here) exit 2.
        let code = if err.is::<opts::UsageError>() { 2 } else { 1 };
        std::process::exit(code);
    }
}
