use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lkaguard_harness::config::HarnessConfig;
use lkaguard_harness::manifest::RunManifest;
use lkaguard_harness::pipeline::{self, BuildOptions, PipelineError, SplitSel};
use lkaguard_harness::{service, synthetic};

#[derive(Parser)]
#[command(name = "lkaguard", version, about = "Lane-keeping failure alerting pipeline")]
struct Cli {
    /// Seed for every seeded stage (defaults to `train.seed` from the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `section.key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory for outputs and `manifest.json` (defaults to `runs/<command>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labeled synthetic dataset.
    GenSynthetic {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        rain_min: Option<f64>,
        #[arg(long)]
        rain_max: Option<f64>,
    },
    /// Mine failure windows from telemetry logs and assemble the dataset.
    BuildDataset {
        /// Telemetry CSV; the file stem becomes the source id. Repeatable.
        #[arg(long, required = true)]
        telemetry: Vec<PathBuf>,
        /// Frame root laid out as `<source>/<ms>.rgb.ppm` with `.bin.pgm` / `.ins.pgm` masks.
        #[arg(long)]
        frames: PathBuf,
        /// Apply `<out>/annotations.jsonl` before splitting.
        #[arg(long)]
        apply_annotations: bool,
        #[arg(long)]
        val_fraction: Option<f64>,
    },
    /// Serve the annotation API for a built dataset.
    AnnotateServe {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
    /// Train LoRA adapters on the train split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Drop the mask streams from the input.
        #[arg(long)]
        unguided: bool,
    },
    /// Evaluate a checkpoint and write an EvalReport.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val", value_parser = ["train", "val", "all"])]
        split: String,
        /// Report path (defaults to `<out>/report.json`).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Fold the adapters into the base weights before evaluating.
        #[arg(long)]
        merged: bool,
    },
    /// Train and evaluate with and without mask guidance.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Recover integer confusion matrices from published metric rows.
    InvertTable {
        #[arg(long, default_value_t = pipeline::PUBLISHED_N_POS)]
        n_pos: u64,
        #[arg(long, default_value_t = pipeline::PUBLISHED_N_NEG)]
        n_neg: u64,
        /// `name=accuracy,precision,recall,f1`; repeatable. Defaults to the built-in rows.
        #[arg(long)]
        row: Vec<String>,
    },
    /// Render EvalReports as one results table.
    Report {
        /// `name=path` or a bare path (named after its parent directory). Repeatable.
        #[arg(long = "report", required = true)]
        reports: Vec<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSynthetic { .. } => "gen-synthetic",
            Command::BuildDataset { .. } => "build-dataset",
            Command::AnnotateServe { .. } => "annotate-serve",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
            Command::InvertTable { .. } => "invert-table",
            Command::Report { .. } => "report",
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

fn finish(manifest: RunManifest, out: &Path) -> Result<(), PipelineError> {
    manifest.finish(out).map(|_| ()).map_err(|e| PipelineError::Io {
        path: out.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => HarnessConfig::load(path)?,
        None => HarnessConfig::default(),
    };
    let seed = cli.seed.unwrap_or(cfg.train.seed);
    cfg = cfg.with_seed(seed);
    let name = cli.command.name();
    let out = cli.out.clone().unwrap_or_else(|| Path::new("runs").join(name));
    let mut manifest = RunManifest::start(name, std::env::args().skip(1).collect(), &cfg);
    manifest.seed("run", seed);

    match cli.command {
        Command::GenSynthetic {
            count,
            rain_min,
            rain_max,
        } => {
            let mut s = cfg.synthetic.clone();
            s.count = count.unwrap_or(s.count);
            s.rain_min = rain_min.unwrap_or(s.rain_min);
            s.rain_max = rain_max.unwrap_or(s.rain_max);
            manifest.config.synthetic = s.clone();
            let summary = synthetic::gen_synthetic(&out, &s, seed)?;
            manifest.outputs = vec![out.join(pipeline::DATASET_FILE), out.join("scenes.jsonl")];
            print_json(&summary);
        }
        Command::BuildDataset {
            telemetry,
            frames,
            apply_annotations,
            val_fraction,
        } => {
            let opts = BuildOptions {
                telemetry: telemetry.clone(),
                frames: frames.clone(),
                out: out.clone(),
                apply_annotations,
                val_fraction: val_fraction.unwrap_or(cfg.data.val_fraction),
                seed,
            };
            manifest.config.data.val_fraction = opts.val_fraction;
            let summary = pipeline::build_dataset(&opts, &cfg)?;
            manifest.inputs = telemetry;
            manifest.inputs.push(frames);
            if apply_annotations {
                manifest.inputs.push(out.join(pipeline::ANNOTATIONS_FILE));
            }
            manifest.outputs = [pipeline::DATASET_FILE, pipeline::BASE_SAMPLES_FILE, pipeline::WINDOWS_FILE]
                .iter()
                .map(|f| out.join(f))
                .collect();
            print_json(&summary);
        }
        Command::AnnotateServe { data, bind } => {
            manifest.inputs = vec![data.clone()];
            finish(manifest, &out)?;
            let runtime = tokio::runtime::Runtime::new().map_err(|e| PipelineError::Io {
                path: PathBuf::from(&bind),
                source: e,
            })?;
            eprintln!("serving {} on http://{bind}", data.display());
            return runtime.block_on(service::serve(&data, &bind));
        }
        Command::Train { data, steps, unguided } => {
            cfg.train.max_steps = steps.unwrap_or(cfg.train.max_steps);
            cfg.train.guided = !unguided;
            manifest.config = cfg.clone();
            manifest.seed("encoder", cfg.encoder.seed).seed("decoder", cfg.decoder.seed);
            let summary = pipeline::train_model(&data, &out, &cfg)?;
            manifest.inputs = vec![data.join(pipeline::DATASET_FILE)];
            manifest.outputs = vec![
                summary.checkpoint.clone(),
                pipeline::vocab_path(&summary.checkpoint),
                out.join(pipeline::TRAIN_LOG_FILE),
            ];
            print_json(&summary);
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            report,
            merged,
        } => {
            let split = SplitSel::parse(&split)?;
            let r = pipeline::evaluate_checkpoint(&checkpoint, &data, split, merged, &cfg)?;
            let path = report.unwrap_or_else(|| out.join("report.json"));
            pipeline::write_report(&path, &r)?;
            manifest.inputs = vec![checkpoint, data.join(pipeline::DATASET_FILE)];
            manifest.outputs = vec![path];
            println!("{}", pipeline::render_table(&[("model".to_string(), r)]));
        }
        Command::Ablate { data, steps } => {
            cfg.train.max_steps = steps.unwrap_or(cfg.train.max_steps);
            if cfg.train.eval_every == 0 {
                cfg.train.eval_every = (cfg.train.max_steps / 12).max(1);
            }
            manifest.config = cfg.clone();
            let summary = pipeline::ablate(&data, &out, &cfg)?;
            manifest.inputs = vec![data.join(pipeline::DATASET_FILE)];
            manifest.outputs = vec![out.join("ablation.json"), out.join("ablation.md")];
            println!("{}", summary.table());
            println!(
                "peak val accuracy: guided {:.2}, unguided {:.2}",
                summary.guided.peak_val_accuracy, summary.unguided.peak_val_accuracy
            );
        }
        Command::InvertTable { n_pos, n_neg, row } => {
            let rows: Vec<(String, lkaguard::metrics::PublishedRow)> = if row.is_empty() {
                pipeline::PUBLISHED_ROWS.iter().map(|(n, r)| (n.to_string(), *r)).collect()
            } else {
                row.iter()
                    .map(|spec| {
                        let (name, values) = spec.split_once('=').unwrap_or(("row", spec.as_str()));
                        Ok((name.to_string(), pipeline::parse_published_row(values)?))
                    })
                    .collect::<Result<_, PipelineError>>()?
            };
            let inverted = pipeline::invert_rows(&rows, n_pos, n_neg);
            let path = out.join("inversion.json");
            std::fs::create_dir_all(&out).map_err(|e| PipelineError::Io {
                path: out.clone(),
                source: e,
            })?;
            std::fs::write(&path, serde_json::to_string_pretty(&inverted).expect("rows serialize") + "\n")
                .map_err(|e| PipelineError::Io {
                    path: path.clone(),
                    source: e,
                })?;
            manifest.outputs = vec![path];
            print!("{}", pipeline::render_inversion(&inverted));
        }
        Command::Report { reports } => {
            let mut rows = Vec::new();
            for spec in &reports {
                let (name, path) = match spec.split_once('=') {
                    Some((n, p)) => (n.to_string(), PathBuf::from(p)),
                    None => {
                        let p = PathBuf::from(spec);
                        let n = p
                            .parent()
                            .and_then(|d| d.file_name())
                            .map(|d| d.to_string_lossy().into_owned())
                            .unwrap_or_else(|| spec.clone());
                        (n, p)
                    }
                };
                rows.push((name, pipeline::read_report(&path)?));
                manifest.inputs.push(path);
            }
            let table = pipeline::render_table(&rows);
            let path = out.join("report.md");
            std::fs::create_dir_all(&out)
                .and_then(|_| std::fs::write(&path, &table))
                .map_err(|e| PipelineError::Io {
                    path: path.clone(),
                    source: e,
                })?;
            manifest.outputs = vec![path];
            print!("{table}");
        }
    }
    finish(manifest, &out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.name());
            ExitCode::FAILURE
        }
    }
}
