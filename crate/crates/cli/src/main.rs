use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use oodseg::eval::parse_grid;
use oodseg::npy::{read_label_mask, read_prob_map};
use oodseg::{
    extract_segments, feature_weights, label_segments, read_feature_csv, sweep, write_feature_csv,
    write_npy, Benchmark, Connectivity, FeatureTable, FitOptions, MetaModel, Metric, SceneConfig,
    SweepOptions,
};

#[derive(Parser)]
#[command(
    name = "oodseg",
    version,
    about = "Unknown-object detection from segmentation softmax outputs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute a pixel-wise uncertainty map from a probability tensor.
    Score {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "entropy")]
        metric: Metric,
        #[arg(long)]
        out: PathBuf,
        /// Skip the sum-to-one check on the input.
        #[arg(long)]
        no_validate: bool,
    },
    /// Threshold the entropy map and write the segment feature table.
    Segments {
        #[arg(long)]
        prob: PathBuf,
        #[arg(long)]
        t: f64,
        #[arg(long, default_value = "8")]
        connectivity: Connectivity,
        #[arg(long, default_value_t = 10)]
        min_size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Ground truth used to append meta-classifier training labels.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        tau_tp: f64,
    },
    /// Fit the logistic meta classifier on labelled feature tables.
    FitMeta {
        #[arg(long, required = true)]
        features: Vec<PathBuf>,
        #[arg(long, default_value_t = 1e-3)]
        lambda: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep detection thresholds over a benchmark directory.
    Eval {
        #[arg(long)]
        bench: PathBuf,
        /// Comma-separated, strictly increasing thresholds in [0, 1].
        #[arg(long)]
        grid: String,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        coverage: f64,
        #[arg(long, default_value_t = 10)]
        min_size: usize,
        /// Meta-classifier probability below which a segment is removed.
        #[arg(long, default_value_t = 0.5)]
        cutoff: f64,
        #[arg(long, default_value = "8")]
        connectivity: Connectivity,
        #[arg(long)]
        out: PathBuf,
        /// Summary JSON path; defaults to the CSV path with a `.summary.json` extension.
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Generate a seeded synthetic benchmark.
    Synth {
        /// Scene configuration JSON; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

enum Failure {
    Lib(oodseg::Error),
    Io(PathBuf, io::Error),
}

impl From<oodseg::Error> for Failure {
    fn from(e: oodseg::Error) -> Self {
        Failure::Lib(e)
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Failure + '_ {
    move |e| Failure::Io(path.to_path_buf(), e)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 3 })
        }
        Err(Failure::Io(path, e)) => {
            eprintln!("error: i/o error on {}: {e}", path.display());
            ExitCode::from(3)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Score {
            input,
            metric,
            out,
            no_validate,
        } => {
            let probs = read_prob_map(&input, !no_validate)?;
            write_npy(&metric.score(&probs), &out)?;
        }
        Command::Segments {
            prob,
            t,
            connectivity,
            min_size,
            out,
            gt,
            tau_tp,
        } => {
            let probs = read_prob_map(&prob, true)?;
            let segments = extract_segments(&probs, t, connectivity, min_size)?;
            let mut table = FeatureTable::from_segments(&segments);
            if let Some(gt) = gt {
                let gt = read_label_mask(&gt)?;
                gt.validate(probs.num_classes())?;
                if (gt.height(), gt.width()) != (probs.height(), probs.width()) {
                    return Err(oodseg::Error::Schema(
                        "ground truth shape differs from the probability map".into(),
                    )
                    .into());
                }
                table = table.with_labels(&label_segments(&segments, &gt, tau_tp)?);
            }
            write_feature_csv(&table, &out)?;
        }
        Command::FitMeta {
            features,
            lambda,
            out,
        } => {
            let (mut rows, mut labels) = (Vec::new(), Vec::new());
            for path in &features {
                let (r, l) = read_feature_csv(path)?.labelled_rows();
                rows.extend(r);
                labels.extend(l);
            }
            if rows.is_empty() {
                return Err(oodseg::Error::Validation(
                    "no labelled rows in the feature tables".into(),
                )
                .into());
            }
            let options = FitOptions {
                l2_lambda: lambda,
                ..FitOptions::default()
            };
            let model = MetaModel::fit_segments(&rows, &labels, options)?;
            model.save(&out)?;
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            for (rank, (name, weight)) in feature_weights(&model).iter().enumerate() {
                writeln!(lock, "{:>2} {name:<24} {weight:+.6}", rank + 1)
                    .map_err(io_err(Path::new("<stdout>")))?;
            }
        }
        Command::Eval {
            bench,
            grid,
            model,
            coverage,
            min_size,
            cutoff,
            connectivity,
            out,
            summary,
            jobs,
        } => {
            let grid = parse_grid(&grid)?;
            let bench = Benchmark::load(&bench)?;
            let model = model.map(MetaModel::load).transpose()?;
            let options = SweepOptions {
                connectivity,
                min_size,
                coverage,
                meta_cutoff: cutoff,
                jobs,
            };
            let result = sweep(&bench, &grid, model.as_ref(), &options)?;

            let file = File::create(&out).map_err(io_err(&out))?;
            let mut writer = BufWriter::new(file);
            result.write_csv(&mut writer).map_err(io_err(&out))?;
            writer.flush().map_err(io_err(&out))?;

            let summary_path = summary.unwrap_or_else(|| out.with_extension("summary.json"));
            let doc = serde_json::json!({
                "grid": result.grid,
                "reference_miou": result.reference_miou,
                "meta_available": result.meta_available,
                "gt_components": result.gt_components,
                "combinations": result.combinations,
            });
            let text = serde_json::to_string_pretty(&doc).expect("summary serializes") + "\n";
            std::fs::write(&summary_path, text).map_err(io_err(&summary_path))?;
        }
        Command::Synth {
            config,
            scenes,
            out,
            jobs,
        } => {
            let cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
                    serde_json::from_str::<SceneConfig>(&text)
                        .map_err(|e| oodseg::Error::Config(format!("{}: {e}", path.display())))?
                }
                None => SceneConfig::default(),
            };
            if scenes == 0 {
                return Err(oodseg::Error::Config("--scenes must be at least 1".into()).into());
            }
            let bench = Benchmark::generate(&cfg, scenes, jobs)?;
            let manifest = bench.save(&out)?;
            println!("{}", manifest.display());
        }
    }
    Ok(())
}
