use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use attnloc_core::checkpoint::load_checkpoint;
use attnloc_core::corpus::{ingest_summary, load_corpus, split_corpus, SplitSpec};
use attnloc_core::locality::{BlockMetric, LocalityScheduleSpec};
use attnloc_core::metrics::evaluate;
use attnloc_core::partition::{fixed_window_partition, partition_stats, PartitionSource, ThresholdMode};
use attnloc_core::runner::{inspect_attention, render_report, run_experiment, ExperimentMatrix, ExperimentResult, QueryPosition, ReportFormat};
use attnloc_core::segment::segment_split;
use attnloc_core::stats::{one_way_anova, paired_t, summarize, SampleSet};
use attnloc_core::train::{PartitionPlan, RunSpec, TrainConfig};
use attnloc_core::{BoundaryPolicy, ModelConfig, ModelParams, Partition, PartitionMethod, TokenSequence};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "attnloc", version, about = "Attention locality training and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Fixed,
    Semantic,
}

#[derive(Clone, Copy, ValueEnum)]
enum TauMode {
    Adaptive,
    Fixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Index,
    Indicator,
}

impl From<Metric> for BlockMetric {
    fn from(m: Metric) -> Self {
        match m {
            Metric::Index => BlockMetric::Index,
            Metric::Indicator => BlockMetric::Indicator,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Markdown,
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize a corpus and print split sizes.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "0.8,0.1,0.1")]
        splits: SplitSpec,
        #[arg(long, default_value_t = 128)]
        context_length: usize,
    },
    /// Partition a text into blocks; prints stats as JSON.
    Partition {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "semantic")]
        method: Method,
        #[arg(long, default_value_t = 8)]
        window: usize,
        #[arg(long, value_enum, default_value = "adaptive")]
        tau_mode: TauMode,
        /// Threshold for --tau-mode fixed.
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long, default_value_t = 0.5)]
        k: f64,
        #[arg(long, default_value_t = 2)]
        min_len: usize,
        #[arg(long, default_value_t = 12)]
        max_len: usize,
        #[arg(long)]
        ref_checkpoint: Option<PathBuf>,
        /// Partition file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one configuration and seed.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "0.8,0.1,0.1")]
        splits: SplitSpec,
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long, default_value = "uniform_distributed")]
        schedule: LocalityScheduleSpec,
        #[arg(long, default_value = "fixed:8")]
        partition: PartitionMethod,
        #[arg(long, value_enum, default_value = "index")]
        metric: Metric,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "0.8,0.1,0.1")]
        splits: SplitSpec,
        /// `fixed:W`, `semantic:REF`, or `semantic` to segment with the
        /// evaluated checkpoint itself.
        #[arg(long, default_value = "fixed:8")]
        partition: PartitionMethod,
        #[arg(long)]
        context_length: Option<usize>,
    },
    /// Summaries, paired tests and ANOVA from a config,seed,value CSV.
    Stats {
        #[arg(long)]
        input: PathBuf,
        /// Reference configuration for paired tests; first one by default.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Run the configuration × seed matrix.
    Experiment {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Render result tables from an experiment directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "markdown")]
        format: Format,
    },
    /// Per-block attention shares of one query position.
    InspectAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value = "semantic")]
        partition: PartitionMethod,
        #[arg(long, default_value = "last")]
        query: QueryPosition,
        #[arg(long)]
        per_layer: bool,
        #[arg(long)]
        json: bool,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// Semantic references name a checkpoint; without one, `fallback` is used.
fn reference_for(method: &PartitionMethod, fallback: Option<&ModelParams<f32>>) -> Result<Option<ModelParams<f32>>> {
    Ok(match method {
        PartitionMethod::Fixed { .. } => None,
        PartitionMethod::Semantic { reference: Some(p), .. } => Some(load_checkpoint(p)?),
        PartitionMethod::Semantic { reference: None, .. } => match fallback {
            Some(m) => Some(m.clone()),
            None => bail!("semantic partitions need a reference checkpoint (semantic:PATH)"),
        },
    })
}

fn partition_text(seq: &TokenSequence, method: &PartitionMethod, reference: Option<&ModelParams<f32>>) -> Result<Partition> {
    Ok(match method {
        PartitionMethod::Fixed { window } => fixed_window_partition(seq.len(), *window)?,
        PartitionMethod::Semantic { policy, .. } => {
            segment_split(reference.context("missing reference checkpoint")?, seq, policy)?
        }
    })
}

fn stats_command(input: &Path, baseline: Option<String>) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let mut groups: BTreeMap<String, BTreeMap<u64, f64>> = BTreeMap::new();
    let mut order = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if line.trim().is_empty() {
            continue;
        }
        if fields.len() != 3 {
            bail!("line {}: expected config,seed,value", i + 1);
        }
        let (Ok(seed), Ok(value)) = (fields[1].parse::<u64>(), fields[2].parse::<f64>()) else {
            if i == 0 {
                continue;
            }
            bail!("line {}: bad seed or value", i + 1);
        };
        if !groups.contains_key(fields[0]) {
            order.push(fields[0].to_string());
        }
        if groups.entry(fields[0].to_string()).or_default().insert(seed, value).is_some() {
            bail!("line {}: duplicate seed {seed} for {}", i + 1, fields[0]);
        }
    }
    let base = baseline.or_else(|| order.first().cloned()).context("no rows")?;
    let base_vals = groups.get(&base).with_context(|| format!("unknown baseline {base}"))?;
    let sets: Vec<SampleSet> = order
        .iter()
        .map(|c| SampleSet::new(c.clone(), groups[c].values().copied().collect()))
        .collect();
    let mut configs = Vec::new();
    for set in &sets {
        let vals = &groups[&set.label];
        let paired = if set.label == base {
            serde_json::Value::Null
        } else if vals.keys().ne(base_vals.keys()) {
            serde_json::json!({ "error": "seeds differ from baseline" })
        } else {
            let a = SampleSet::new(base.clone(), base_vals.values().copied().collect());
            match paired_t(&a, set) {
                Ok(t) => serde_json::to_value(t)?,
                Err(e) => serde_json::json!({ "error": e.to_string() }),
            }
        };
        configs.push(serde_json::json!({
            "config": set.label,
            "summary": summarize(set).map_or_else(|e| serde_json::json!({ "error": e.to_string(), "mean": set.mean() }), |s| serde_json::to_value(s).unwrap()),
            "paired_vs_baseline": paired,
        }));
    }
    let anova = match one_way_anova(&sets) {
        Ok(a) => serde_json::to_value(a)?,
        Err(e) => serde_json::json!({ "error": e.to_string() }),
    };
    Ok(serde_json::json!({ "baseline": base, "configs": configs, "anova": anova }))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Ingest { input, splits, context_length } => {
            let seq = load_corpus(&input)?;
            let s = split_corpus(&seq, &splits, context_length)?;
            print_json(&ingest_summary(&seq, &s))?;
        }
        Command::Partition { input, method, window, tau_mode, tau, k, min_len, max_len, ref_checkpoint, out } => {
            let seq = load_corpus(&input)?;
            let method = match method {
                Method::Fixed => PartitionMethod::Fixed { window },
                Method::Semantic => {
                    let mode = match tau_mode {
                        TauMode::Adaptive => ThresholdMode::Adaptive,
                        TauMode::Fixed => ThresholdMode::Fixed,
                    };
                    let policy = BoundaryPolicy {
                        threshold_mode: mode,
                        fixed_tau: tau,
                        adaptive_k: k,
                        min_block_len: min_len,
                        max_block_len: max_len,
                    };
                    policy.validate()?;
                    PartitionMethod::Semantic { reference: None, policy }
                }
            };
            let reference = match &ref_checkpoint {
                Some(p) => Some(load_checkpoint(p)?),
                None => None,
            };
            if matches!(method, PartitionMethod::Semantic { .. }) && reference.is_none() {
                bail!("--method semantic needs --ref-checkpoint");
            }
            let p = partition_text(&seq, &method, reference.as_ref())?;
            match out {
                Some(path) => {
                    p.save(&path)?;
                    print_json(&partition_stats(&p))?;
                }
                None => {
                    print!("{}", p.to_text());
                    eprintln!("{}", serde_json::to_string(&partition_stats(&p))?);
                }
            }
        }
        Command::Train { corpus, splits, model_config, train_config, schedule, partition, metric, seed, out } => {
            let model: ModelConfig = model_config.as_deref().map_or_else(|| Ok(ModelConfig::default()), read_json)?;
            let mut train: TrainConfig = train_config.as_deref().map_or_else(|| Ok(TrainConfig::default()), read_json)?;
            if let Some(s) = seed {
                train.seed = s;
            }
            let seq = load_corpus(&corpus)?;
            let s = split_corpus(&seq, &splits, train.context_length)?;
            let spec = RunSpec {
                label: schedule.label(),
                model,
                train,
                schedule,
                metric: metric.into(),
                partition: partition.clone(),
            };
            let spec = spec.with_seed(spec.train.seed);
            let reference = reference_for(&partition, None)?;
            let plan = PartitionPlan::build(&partition, &s, reference.as_ref(), !schedule.is_inactive())?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let every = (spec.train.steps / 20).max(1);
            let result = attnloc_core::train::train_run(&spec, &s, &plan, Some(&out.join("model.ckpt")), |step, r| {
                if step % every == 0 || step + 1 == spec.train.steps {
                    eprintln!("step {:>5}  lm {:.4}  penalty {:.4}", step + 1, r.lm_loss, r.penalty.total);
                }
            })?;
            std::fs::write(out.join("result.json"), serde_json::to_vec_pretty(&result)?)?;
            print_json(&result)?;
        }
        Command::Eval { checkpoint, corpus, splits, partition, context_length } => {
            let params = load_checkpoint(&checkpoint)?;
            let ctx = context_length.unwrap_or(params.config().context_length);
            let seq = load_corpus(&corpus)?;
            let s = split_corpus(&seq, &splits, ctx)?;
            let source = match &partition {
                PartitionMethod::Fixed { window } => PartitionSource::Fixed { window: *window },
                PartitionMethod::Semantic { .. } => {
                    let reference = reference_for(&partition, Some(&params))?;
                    PartitionSource::Global(partition_text(&s.test, &partition, reference.as_ref())?)
                }
            };
            print_json(&evaluate(&params, &s.test, ctx, &source)?)?;
        }
        Command::Stats { input, baseline } => print_json(&stats_command(&input, baseline)?)?,
        Command::Experiment { corpus, matrix, out, jobs } => {
            let matrix = match matrix {
                Some(p) => ExperimentMatrix::load(p)?,
                None => ExperimentMatrix::default(),
            };
            let seq = load_corpus(&corpus)?;
            let result = run_experiment(&matrix, &seq, &out, jobs, &|msg| eprintln!("{msg}"))?;
            let failed: Vec<_> = result.failures().collect();
            eprintln!(
                "{} cells, {} trained this run, {} failed",
                result.cells.len(),
                result.trained.len(),
                failed.len()
            );
            for c in &failed {
                eprintln!("  {}@{}: {}", c.label, c.seed, c.error.as_deref().unwrap_or("missing"));
            }
            if !failed.is_empty() {
                std::process::exit(1);
            }
        }
        Command::Report { input, format } => {
            let result = ExperimentResult::load(&input)?;
            let format = match format {
                Format::Markdown => ReportFormat::Markdown,
                Format::Csv => ReportFormat::Csv,
                Format::Json => ReportFormat::Json,
            };
            print!("{}", render_report(&result, format)?);
            if format == ReportFormat::Markdown {
                let m = &result.matrix;
                println!("\n## Layer weights\n");
                println!("| Configuration | {} |", (0..m.model.num_layers).map(|l| format!("λ({l})")).collect::<Vec<_>>().join(" | "));
                println!("|---|{}", "---|".repeat(m.model.num_layers));
                for c in &m.configs {
                    let l: Vec<String> = c.schedule.lambdas(m.model.num_layers).iter().map(|x| format!("{x:.4}")).collect();
                    println!("| {} | {} |", c.label, l.join(" | "));
                }
            }
        }
        Command::InspectAttention { checkpoint, text, partition, query, per_layer, json } => {
            let params = load_checkpoint(&checkpoint)?;
            let seq = TokenSequence::from_text(&text, "inspect")?;
            let reference = reference_for(&partition, Some(&params))?;
            let p = partition_text(&seq, &partition, reference.as_ref())?;
            let report = inspect_attention(&params, &text, &p, query, per_layer)?;
            if json {
                print_json(&report)?;
            } else {
                print!("{report}");
            }
        }
    }
    Ok(())
}

