use clap::{Parser, Subcommand};
use forge::error::ForgeError;
use forge::graph::schema;
use forge::passes::{self, ExportOpts};
use forge::train::{data, pipeline, report, state, sweep, ExperimentConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "forge", about = "Gradient-based architecture, channel and precision search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured method chain at a single lambda.
    Run { config: PathBuf },
    /// Run one independent search per lambda and write records + CSV.
    Sweep { config: PathBuf },
    /// Export a saved search state to a plain graph.
    Export {
        /// Search-state directory (graph.json + state.dnft + meta.json).
        ckpt: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Re-materialize folded batch norms.
        #[arg(long)]
        unfold_bn: bool,
        /// Also emit report.json: selected branches, per-layer kept/total
        /// channels, frozen precisions, removed nodes.
        #[arg(long)]
        report: bool,
    },
    /// Regenerate the CSV and SVG for a sweep output directory.
    Report {
        dir: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            match e {
                ForgeError::Config(_) | ForgeError::Json(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn run(cli: Cli) -> forge::Result<()> {
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            if cfg.lambdas.len() != 1 {
                return Err(ForgeError::Config(format!(
                    "`forge run` needs exactly one lambda in the config, got {} (use `forge sweep`)",
                    cfg.lambdas.len()
                )));
            }
            let lambda = cfg.lambdas[0];
            let splits = data::generate_dataset(&cfg.task, cfg.seed, cfg.dataset_sizes)?;
            let out = PathBuf::from(&cfg.export_dir);
            let result = pipeline::run_chain(&cfg, lambda, &splits, &out)?;
            for s in &result.stages {
                println!(
                    "stage {:<8} accuracy {:.4}  params {:>8}  bytes {:>10}  macs {:>10}",
                    s.stage, s.accuracy, s.params, s.params_bytes, s.macs
                );
            }
            println!(
                "final    accuracy {:.4}  params {:>8}  bytes {:>10}  macs {:>10}  -> {}",
                result.final_accuracy,
                result.final_params,
                result.final_params_bytes,
                result.final_macs,
                result.export_path
            );
            Ok(())
        }
        Command::Sweep { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let records = sweep::sweep(&cfg)?;
            for r in &records {
                println!(
                    "lambda {:>9.1e}  accuracy {:.4}  params {:>8}  bytes {:>10}  {}",
                    r.lambda,
                    r.accuracy,
                    r.params,
                    r.params_bytes,
                    if r.dominated { "dominated" } else { "front" }
                );
            }
            println!("wrote {}/pareto.csv", cfg.export_dir);
            Ok(())
        }
        Command::Export { ckpt, out, unfold_bn, report } => {
            let sg = state::load_search_state(&ckpt)?;
            let (exported, rep) = passes::export(&sg, ExportOpts { unfold_bn })?;
            schema::save_graph_dir(&exported, &out)?;
            if report {
                std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&rep)?)?;
            }
            println!("exported {} -> {}", sg.method.name(), out.display());
            Ok(())
        }
        Command::Report { dir, csv, svg } => {
            let records = report::load_records(&dir)?;
            let csv_path = csv.unwrap_or_else(|| dir.join("pareto.csv"));
            report::write_csv(&records, &csv_path)?;
            println!("wrote {}", csv_path.display());
            if let Some(svg_path) = svg {
                report::write_svg(&records, &svg_path)?;
                println!("wrote {}", svg_path.display());
            }
            Ok(())
        }
    }
}
