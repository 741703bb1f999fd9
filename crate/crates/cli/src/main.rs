use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use congruent::data::generate;
use congruent::experiment::{
    compare_methods, emit_comparison, emit_ensemble_sweep, emit_focal_sweep, emit_report, parse_grid,
    sweep_ensemble, ExperimentConfig, Format, Lab, Method,
};
use congruent::metrics::{flip_report, read_records_csv, restrict_to_old_classes, FlipReport};

/// Positive-congruent update experiments on synthetic data.
#[derive(Parser, Debug)]
#[command(name = "congruent", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset described by the config to `dataset.csv`.
    Generate(Common),
    /// Run the configured method for every repetition.
    Run(Common),
    /// Compare several methods against one shared old model.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated method names.
        #[arg(long, default_value = "NoTreatment,Naive,FD-KL,FD-LM,Ensemble(16)")]
        methods: String,
    },
    /// Focal distillation over a grid of (alpha, beta).
    SweepFocal {
        #[command(flatten)]
        common: Common,
        /// Comma-separated `alpha:beta` pairs.
        #[arg(long, default_value = "0:0,0:1,1:0,1:1,1:2,1:5,1:10,1:20")]
        grid: String,
    },
    /// Old versus new ensembles of increasing size.
    SweepEnsemble {
        #[command(flatten)]
        common: Common,
        /// Comma-separated, strictly increasing ensemble sizes.
        #[arg(long, default_value = "1,2,4,8,16")]
        sizes: String,
    },
    /// Flip report of a per-sample prediction CSV.
    Report {
        /// CSV with columns sample_id,true_label,old_pred,new_pred[,quadrant].
        flips: PathBuf,
        /// Keep only samples whose true label is below this class count.
        #[arg(long)]
        old_classes: Option<usize>,
        /// Directory for `report.<format>`; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "json")]
        format: String,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment config; built-in reference defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Base seed (the dataset seed for `generate`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: String,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, Format)> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.train.seed = seed;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        let format: Format = self.format.parse()?;
        config.validate()?;
        Ok((config, format))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Generate(common) => {
            let (mut config, _) = common.load()?;
            if let Some(seed) = common.seed {
                config.dataset.seed = seed;
            }
            let dataset = generate(&config.dataset)?;
            fs::create_dir_all(&config.output_dir)?;
            let path = config.output_dir.join("dataset.csv");
            dataset.write_csv(fs::File::create(&path)?)?;
            println!("wrote {} samples to {}", dataset.len(), path.display());
        }
        Command::Run(common) => {
            let (config, format) = common.load()?;
            let result = Lab::new(&config)?.run()?;
            emit_report(&result, &config.output_dir, format)?;
            let s = &result.summary;
            println!(
                "{}: {}/{} repetitions succeeded; median NFR {}, ER_new {} -> {}",
                s.method,
                s.succeeded,
                s.repetitions,
                pct(s.nfr.map(|v| v.median)),
                pct(s.er_new.map(|v| v.median)),
                config.output_dir.display()
            );
            if s.succeeded == 0 {
                bail!("every repetition failed: {}", s.failures[0].error);
            }
        }
        Command::Compare { common, methods } => {
            let (config, format) = common.load()?;
            let methods = methods
                .split(',')
                .filter(|m| !m.trim().is_empty())
                .map(str::parse)
                .collect::<congruent::Result<Vec<Method>>>()?;
            let table = compare_methods(&Lab::new(&config)?, &methods)?;
            let path = emit_comparison(&table, &config.output_dir, format)?;
            for row in &table.rows {
                println!(
                    "{:<14} ER_old {} ER_new {} NFR {} rel {} params {}",
                    row.method,
                    pct(row.er_old),
                    pct(row.er_new),
                    pct(row.nfr),
                    pct(row.rel_nfr),
                    row.params
                );
            }
            println!("wrote {}", path.display());
        }
        Command::SweepFocal { common, grid } => {
            let (config, format) = common.load()?;
            let sweep = congruent::experiment::sweep_focal(&Lab::new(&config)?, &parse_grid(&grid)?)?;
            let path = emit_focal_sweep(&sweep, &config.output_dir, format)?;
            for row in &sweep.rows {
                println!(
                    "alpha {:<4} beta {:<5} ER_new {} NFR {} rel {} ({} ok)",
                    row.alpha,
                    row.beta,
                    pct(row.er_new),
                    pct(row.nfr),
                    pct(row.rel_nfr),
                    row.succeeded
                );
            }
            println!("wrote {}", path.display());
        }
        Command::SweepEnsemble { common, sizes } => {
            let (config, format) = common.load()?;
            let sizes = sizes
                .split(',')
                .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad ensemble size {s:?}")))
                .collect::<Result<Vec<_>>>()?;
            let sweep = sweep_ensemble(&Lab::new(&config)?, &sizes)?;
            let paths = emit_ensemble_sweep(&sweep, &config.output_dir, format)?;
            for row in &sweep.rows {
                println!(
                    "L {:<3} ER_old {} ER_new {} NFR {} rel {}",
                    row.size,
                    pct(Some(row.er_old)),
                    pct(Some(row.er_new)),
                    pct(Some(row.nfr)),
                    pct(row.rel_nfr)
                );
            }
            println!("wrote {} files to {}", paths.len(), config.output_dir.display());
        }
        Command::Report {
            flips,
            old_classes,
            out,
            format,
        } => {
            let format: Format = format.parse()?;
            let file = fs::File::open(&flips).with_context(|| format!("opening {}", flips.display()))?;
            let mut records = read_records_csv(file)?;
            if let Some(k) = old_classes {
                records = restrict_to_old_classes(&records, k);
            }
            let report = flip_report(&records)?;
            let text = render_report(&report, format)?;
            match out {
                Some(dir) => {
                    fs::create_dir_all(&dir)?;
                    let path = dir.join(format!("report.{}", format.extension()));
                    fs::write(&path, text)?;
                    println!("wrote {}", path.display());
                }
                None => std::io::stdout().write_all(text.as_bytes())?,
            }
        }
    }
    Ok(())
}

fn render_report(report: &FlipReport, format: Format) -> Result<String> {
    Ok(match format {
        Format::Json => report.to_json()? + "\n",
        Format::Csv => {
            let q = &report.quadrant_counts;
            let rel = report.rel_nfr.map(|v| v.to_string()).unwrap_or_default();
            format!(
                "n,both_correct,negative_flip,positive_flip,both_wrong,er_old,er_new,nfr,pfr,rel_nfr\n{},{},{},{},{},{},{},{},{},{}\n",
                report.n,
                q.both_correct,
                q.negative_flip,
                q.positive_flip,
                q.both_wrong,
                report.er_old,
                report.er_new,
                report.nfr,
                report.pfr,
                rel
            )
        }
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}%", 100.0 * v))
}

