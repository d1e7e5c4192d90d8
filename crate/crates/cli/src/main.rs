use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use synthaug_core::data::{self, SourceFilterSpec, SplitSpec};
use synthaug_core::detector::load_predictions;
use synthaug_core::eval::{self, detections_from_predictions, evaluate, EvalConfig, EvalResult, Interpolation};
use synthaug_core::generate::{generate, GenerationRequest};
use synthaug_core::manifest::{DatasetManifest, QualityRecord};
use synthaug_core::prompt::{apply_variant, enumerate_all, Vocabulary};
use synthaug_core::quality::{self, score_pool, PoolScores, SurrogateStats};
use synthaug_core::raster;
use synthaug_core::sample::{rounds_select, SelectionOutput, SelectionPlan, SelectionSource, TieBreak};
use synthaug_cli::config::{load_config, parse_config, Config};
use synthaug_cli::matrix::{self, build_backend, build_extractor, build_metric, metric_polarity, RunOptions};
use synthaug_cli::report;

#[derive(Parser)]
#[command(name = "synthaug", version, about = "Synthetic data augmentation for person detection")]
struct Cli {
    /// Experiment configuration (TOML, or YAML by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the mock generator and trainer.
    #[arg(long, global = true)]
    mock: bool,
    /// Worker threads, overriding the configuration.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract a feature image from one source image.
    Extract {
        #[arg(long, default_value = "canny")]
        extractor: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "source")]
        id: String,
    },
    /// List caption variants.
    Prompt {
        caption: String,
        /// Variant index; all variants are listed when absent.
        #[arg(long)]
        index: Option<usize>,
        /// Vocabulary JSON (list of word slots).
        #[arg(long)]
        vocabulary: Option<PathBuf>,
    },
    /// Render one image from a feature image and prompt.
    Generate {
        #[arg(long)]
        feature: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score every record of a manifest with a quality metric.
    Score {
        #[arg(long, default_value = "brisque")]
        metric: String,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Fit BRISQUE surrogate statistics on clean images or procedural scenes.
    FitSurrogate {
        /// Manifest of clean images; procedural scenes are used when absent.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        root: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        size: u32,
        #[arg(long)]
        output: PathBuf,
    },
    /// Nested selection rounds over a scored or unscored pool.
    Sample(SampleArgs),
    /// Dataset construction.
    #[command(subcommand)]
    Build(Build),
    /// Evaluate a prediction file against a manifest.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = ".")]
        root: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Interp::Points101)]
        interpolation: Interp,
    },
    /// Run (or resume) the experiment matrix of `--config`.
    Run {
        #[arg(long)]
        out: PathBuf,
    },
    /// CSV and charts for a matrix directory.
    Report {
        /// `<out>/<matrix name>` of a run.
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Interp {
    Points101,
    AllPoints,
}

#[derive(Args)]
struct SampleArgs {
    /// Pool manifest (for `random`) or ignored when `--scores` is given.
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Scores JSON written by `score`.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long, default_value = "random")]
    method: String,
    #[arg(long)]
    rounds: usize,
    #[arg(long, default_value_t = 125)]
    increment: usize,
    #[arg(long)]
    shuffle_ties: bool,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Subcommand)]
enum Build {
    /// Manifest from COCO instances (and optional captions) JSON.
    Coco {
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        captions: Option<PathBuf>,
        #[arg(long, default_value = "images")]
        image_prefix: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Manifest from Flickr30k Entities sentences and region annotations.
    Flickr {
        #[arg(long)]
        sentences: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value = "images")]
        image_prefix: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Keep single-person images within the area band.
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        min_area: f64,
        #[arg(long, default_value_t = 0.80)]
        max_area: f64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Seeded train/val/test split into `<out>/{train,val,test}.json`.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.15)]
        val: f64,
        #[arg(long, default_value_t = 0.15)]
        test: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Nested real baselines into `<out>/baseline_{small,large}.json`.
    Baselines {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = data::SMALL_BASELINE)]
        small: usize,
        #[arg(long, default_value_t = data::LARGE_BASELINE)]
        large: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Base manifest plus the last selection round.
    Mix {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        selection: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Base manifest duplicated up to `total` records.
    Ablation {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        total: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Procedural single-person scenes with a manifest.
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: u32,
    },
}

fn config(cli: &Cli) -> Result<Config> {
    match &cli.config {
        Some(p) => Ok(load_config(p)?),
        None => parse_config("[dataset]\nsource = \"toy\"\n", false).map_err(anyhow::Error::msg),
    }
}

fn write_json<T: serde::Serialize>(v: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    synthaug_core::manifest::write_file(path, s.as_bytes())?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Extract { extractor, input, output, id } => {
            let cfg = config(&cli)?;
            let scratch = output.with_extension("scratch");
            let feature = build_extractor(&cfg, extractor)?.extract(id, input, &scratch)?;
            feature.save(output)?;
            info!("{} feature written to {}", feature.extractor_name, output.display());
        }
        Command::Prompt { caption, index, vocabulary } => {
            let vocab = match vocabulary {
                Some(p) => Vocabulary::load(p)?,
                None => Vocabulary::new(config(&cli)?.generation.vocabulary)?,
            };
            let variants = match index {
                Some(j) => vec![apply_variant(caption, &vocab, *j)?],
                None => enumerate_all(caption, &vocab)?,
            };
            for v in variants {
                println!("{}\t{}", v.variant_index, v.text);
            }
        }
        Command::Generate { feature, prompt, output } => {
            let cfg = config(&cli)?;
            let feature = synthaug_core::extract::FeatureImage::load(feature)?;
            let backend = build_backend(&cfg, cli.mock, &output.with_extension("scratch"));
            let request = GenerationRequest {
                feature,
                prompt: prompt.clone(),
                seed,
                backend_id: backend.descriptor().backend_id.clone(),
                controlnet_id: cfg.generation.controlnet_id.clone(),
            };
            let img = generate(backend.as_ref(), &request)?;
            raster::save_rgb(&img.raster, output)?;
        }
        Command::Score { metric, manifest, root, output } => {
            let cfg = config(&cli)?;
            let m = DatasetManifest::load(manifest)?;
            let metric = build_metric(&cfg, metric, &output.with_extension("scratch"))?;
            let scores = score_pool(&m, root, metric.as_ref(), cfg.metrics.max_failure_fraction)?;
            info!("{} scored, {} excluded", scores.records.len(), scores.excluded.len());
            write_json(&scores, output)?;
        }
        Command::FitSurrogate { manifest, root, count, size, output } => {
            let stats = match manifest {
                Some(p) => {
                    let m = DatasetManifest::load(p)?;
                    let features = m
                        .records
                        .iter()
                        .map(|r| Ok(quality::brisque_features(&raster::load_image(&r.resolve(root))?.to_luma8())?))
                        .collect::<Result<Vec<_>>>()?;
                    SurrogateStats::fit(&features, format!("{} images of {}", features.len(), p.display()))?
                }
                None => SurrogateStats::procedural(*count, *size, seed)?,
            };
            stats.save(output)?;
        }
        Command::Sample(args) => {
            let cfg = config(&cli)?;
            let plan = SelectionPlan {
                metric_name: args.method.clone(),
                rounds: args.rounds,
                increment: args.increment,
                seed,
                tie_break: if args.shuffle_ties { TieBreak::BySeedShuffle } else { TieBreak::ById },
            };
            let rounds = match (&args.scores, &args.pool) {
                (Some(s), _) => {
                    let scores: PoolScores = read_json(s)?;
                    let records: Vec<QualityRecord> = scores.records;
                    let polarity = metric_polarity(&cfg, &args.method);
                    rounds_select(&plan, SelectionSource::Scores { records: &records, polarity }, None)?
                }
                (None, Some(p)) if args.method == "random" => {
                    let ids = DatasetManifest::load(p)?.ids();
                    rounds_select(&plan, SelectionSource::Random { pool_ids: &ids }, None)?
                }
                _ => bail!("`sample` needs --scores, or --pool with --method random"),
            };
            write_json(&SelectionOutput { plan, rounds }, &args.output)?;
        }
        Command::Build(b) => build(b, seed)?,
        Command::Evaluate { manifest, root, predictions, output, interpolation } => {
            let m = DatasetManifest::load(manifest)?;
            let preds = load_predictions(predictions)?;
            let dets = detections_from_predictions(&preds, &m, root)?;
            let interpolation = match interpolation {
                Interp::Points101 => Interpolation::Points101,
                Interp::AllPoints => Interpolation::AllPoints,
            };
            let r: EvalResult = evaluate(&dets, &m, &EvalConfig { interpolation, ..EvalConfig::default() })?;
            println!("{}", eval::CSV_HEADER.join(","));
            println!("{}", eval::csv_row(&m.name, &r).join(","));
            if let Some(o) = output {
                r.save(o)?;
            }
        }
        Command::Run { out } => {
            if cli.config.is_none() {
                bail!("`run` needs --config");
            }
            let cfg = config(&cli)?;
            let opts = RunOptions { mock: cli.mock, workers: cli.workers, master_seed: cli.seed };
            let outcome = matrix::run_matrix(&cfg, out, &opts)?;
            let dir = out.join(&cfg.matrix.name);
            let summary = report::write_report(&outcome.results, &dir.join("report"))?;
            println!(
                "{} cells ({} failed); report in {}",
                outcome.cells.len(),
                outcome.failed(),
                summary.csv.parent().unwrap_or(Path::new(".")).display()
            );
        }
        Command::Report { matrix, out } => {
            let results = report::load_results(matrix)?;
            let out = out.clone().unwrap_or_else(|| matrix.join("report"));
            let summary = report::write_report(&results, &out)?;
            println!("{} rows, {} charts in {}", summary.rows, summary.charts.len(), out.display());
        }
    }
    Ok(())
}

fn build(b: &Build, seed: u64) -> Result<()> {
    match b {
        Build::Coco { instances, captions, image_prefix, output } => {
            data::load_coco(instances, captions.as_deref(), image_prefix)?.save(output)?;
        }
        Build::Flickr { sentences, annotations, image_prefix, output } => {
            data::load_flickr(sentences, annotations, image_prefix)?.save(output)?;
        }
        Build::Filter { input, min_area, max_area, output } => {
            let spec = SourceFilterSpec { min_area: *min_area, max_area: *max_area, ..SourceFilterSpec::default() };
            let m = data::filter_source(&DatasetManifest::load(input)?, &spec)?;
            info!("{} records kept", m.len());
            m.save(output)?;
        }
        Build::Split { input, val, test, out } => {
            let s = data::split_real(&DatasetManifest::load(input)?, &SplitSpec { val_fraction: *val, test_fraction: *test }, seed)?;
            s.train.save(&out.join("train.json"))?;
            s.val.save(&out.join("val.json"))?;
            s.test.save(&out.join("test.json"))?;
        }
        Build::Baselines { input, small, large, out } => {
            let (s, l) = data::build_baselines_sized(&DatasetManifest::load(input)?, *small, *large, seed)?;
            s.save(&out.join("baseline_small.json"))?;
            l.save(&out.join("baseline_large.json"))?;
        }
        Build::Mix { base, pool, selection, output } => {
            let sel: SelectionOutput = read_json(selection)?;
            let chosen = sel.rounds.last().cloned().unwrap_or_default();
            data::mix(&DatasetManifest::load(base)?, &DatasetManifest::load(pool)?, &chosen)?.save(output)?;
        }
        Build::Ablation { base, total, output } => {
            data::build_ablation(&DatasetManifest::load(base)?, *total, seed)?.save(output)?;
        }
        Build::Toy { out, count, size } => {
            let m = data::write_toy_dataset(out, *count, (*size, *size), seed)?;
            m.save(&out.join("manifest.json"))?;
        }
    }
    Ok(())
}
