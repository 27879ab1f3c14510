//! `spartan`: train, evaluate, benchmark and inspect memory-layer plugins
//! on a frozen encoder.
//!
//! Settings come from a JSON run configuration (`spartan config` prints the
//! defaults); command-line flags override the file, which overrides the
//! built-in defaults.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use spartan::accounting::ParamReport;
use spartan::analysis::{collect_selections, specialization_stats, write_selections_csv, LayerChoice};
use spartan::backbone::{BackboneConfig, Model, PluginConfig};
use spartan::bench::{Architecture, BenchMode};
use spartan::checkpoint::Checkpoint;
use spartan::config::RunConfig;
use spartan::data::{
    few_shot_sample, generate_topic_dataset, load_jsonl, load_label_manifest, write_jsonl, write_label_manifest,
    SyntheticTopicTask,
};
use spartan::numerics::Rng;
use spartan::training::{evaluate, train};

#[derive(Parser)]
#[command(name = "spartan", version, about = "Sparse hierarchical memory plugins for frozen encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune the plugin and head; writes checkpoint.json and metrics.csv
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training JSONL (overrides data.train)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Held-out JSONL evaluated after training (overrides data.eval)
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Train on this many label-stratified examples for train.few_shot_steps steps
        #[arg(long)]
        few_shot: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a checkpoint on a JSONL file
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the JSON result here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Throughput in instances per minute
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// spartan, adapter, adapter-x2, none or spartan-dense
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// inference, finetune or micro (plugin layer only)
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long)]
        seconds: Option<f64>,
        /// Memory-layer top-K
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Writes PREFIX.json and PREFIX.csv
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-instance parent selection at one layer, with label histograms
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Layer index or "last"
        #[arg(long, default_value = "last")]
        layer: String,
        /// Writes PREFIX.csv and PREFIX.summary.json
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter and storage accounting
    Params {
        /// Without a config, base-size shapes (d = 768, 12 layers) are used
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replace the plugin kind: spartan, adapter, adapter-x2 or none
        #[arg(long)]
        arch: Option<String>,
        #[arg(long, default_value_t = 1)]
        tasks: u64,
        /// Also write the report as JSON
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Generate a synthetic topic-classification JSONL file and labels.json
    Synth {
        #[arg(long, default_value_t = 4)]
        topics: usize,
        #[arg(long, default_value_t = 250)]
        per_topic: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default run configuration
    Config,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use spartan::Error;
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Data { .. } | Error::Io { .. } | Error::Json(_) | Error::Consistency(_)) => 2,
        Some(Error::Numerical { .. } | Error::DegenerateSelection) => 3,
        _ => 1,
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train {
            config,
            data,
            eval_data,
            few_shot,
            steps,
            seed,
            out,
        } => cmd_train(config, data, eval_data, few_shot, steps, seed, &out),
        Command::Eval { model, data, out } => cmd_eval(&model, &data, out.as_deref()),
        Command::Bench {
            config,
            arch,
            threads,
            batch,
            mode,
            seq_len,
            seconds,
            top_k,
            seed,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?.bench;
            if let Some(a) = arch {
                cfg.architecture = a.parse()?;
            }
            if let Some(m) = mode {
                cfg.mode = m.parse::<BenchMode>()?;
            }
            cfg.threads = threads.unwrap_or(cfg.threads);
            cfg.batch_size = batch.unwrap_or(cfg.batch_size);
            cfg.seq_len = seq_len.unwrap_or(cfg.seq_len);
            cfg.measure_seconds = seconds.unwrap_or(cfg.measure_seconds);
            cfg.spartan.top_k = top_k.unwrap_or(cfg.spartan.top_k);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let report = spartan::bench::run(&cfg)?;
            println!(
                "{} {:?}: {:.1} instances/min ({} instances in {:.2} s, {} threads), {} MACs/instance, plugin {} MACs/position",
                cfg.architecture,
                cfg.mode,
                report.instances_per_minute,
                report.instances,
                report.elapsed_seconds,
                cfg.threads,
                report.macs_per_instance,
                report.plugin_macs_per_position,
            );
            if let Some(prefix) = out {
                report.write_json(&with_suffix(&prefix, ".json"))?;
                report.write_csv(&with_suffix(&prefix, ".csv"))?;
            }
            Ok(())
        }
        Command::Analyze {
            model,
            data,
            layer,
            out,
        } => cmd_analyze(&model, &data, &layer, &out),
        Command::Params {
            config,
            arch,
            tasks,
            json,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => {
                    let backbone = BackboneConfig::base_shapes();
                    RunConfig {
                        backbone,
                        plugin: PluginConfig::Spartan(spartan::memory::SpartanConfig::with_dim(backbone.d)),
                        ..RunConfig::default()
                    }
                }
            };
            if let Some(a) = arch {
                let bench = &cfg.bench;
                let arch: Architecture = a.parse()?;
                let d = cfg.backbone.d;
                cfg.plugin = arch.plugin(
                    spartan::memory::SpartanConfig { d, ..bench.spartan },
                    spartan::adapter::AdapterConfig { d, ..bench.adapter },
                );
            }
            let report = ParamReport::from_config(&cfg.model_config(), tasks)?;
            print!("{report}");
            if let Some(p) = json {
                std::fs::write(&p, serde_json::to_string_pretty(&report)?)
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            Ok(())
        }
        Command::Synth {
            topics,
            per_topic,
            noise,
            seed,
            out,
        } => {
            let task = SyntheticTopicTask::new(topics, per_topic, noise);
            let examples = generate_topic_dataset(&task, &mut Rng::seed_from_u64(seed))?;
            write_jsonl(&out, &examples)?;
            write_label_manifest(&out, &task.label_manifest())?;
            println!("wrote {} examples to {}", examples.len(), out.display());
            Ok(())
        }
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&RunConfig::default())?);
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_train(
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    eval_data: Option<PathBuf>,
    few_shot: Option<usize>,
    steps: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> anyhow::Result<()> {
    let mut cfg = load_config(config.as_deref())?;
    cfg.seed = seed.unwrap_or(cfg.seed);
    if data.is_some() {
        cfg.data.train = data;
    }
    if eval_data.is_some() {
        cfg.data.eval = eval_data;
    }
    let train_path = cfg
        .data
        .train
        .clone()
        .ok_or_else(|| spartan::Error::Config("no training data: pass --data or set data.train".into()))?;
    let mut examples = load_jsonl(&train_path)?;
    let labels = load_label_manifest(&train_path)?;
    cfg.check_labels(&examples, labels.as_ref())?;
    if let Some(k) = few_shot {
        examples = few_shot_sample(&examples, k, &mut Rng::seed_from_u64(cfg.seed).fork(4))?;
        cfg.train.steps = cfg.train.few_shot_steps;
    }
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    let held_out = match &cfg.data.eval {
        Some(p) => {
            let e = load_jsonl(p)?;
            cfg.check_labels(&e, None)?;
            Some(e)
        }
        None => None,
    };
    cfg.validate()?;

    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    let history = train(&mut model, &examples, held_out.as_deref(), &cfg.train_config())?;
    std::fs::create_dir_all(out).map_err(|e| spartan::Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    Checkpoint::from_model(&model, &cfg, labels)?.save(&out.join("checkpoint.json"))?;
    history.write_csv(&out.join("metrics.csv"))?;

    let train_acc = evaluate(&model, &examples)?;
    let final_loss = history.records.last().map(|r| r.loss);
    let eval_acc = history.records.last().and_then(|r| r.eval_accuracy);
    let summary = serde_json::json!({
        "train_examples": examples.len(),
        "steps": cfg.train.steps,
        "final_loss": final_loss,
        "train_accuracy": train_acc,
        "eval_accuracy": eval_acc,
    });
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)
        .with_context(|| format!("writing {}", out.join("summary.json").display()))?;
    println!("{summary}");
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<(Checkpoint, Model)> {
    let ck = Checkpoint::load(path)?;
    let model = ck.to_model()?;
    Ok((ck, model))
}

fn load_eval_data(ck: &Checkpoint, data: &Path) -> anyhow::Result<Vec<spartan::data::Example>> {
    let manifest = load_label_manifest(data)?.or_else(|| ck.labels.clone());
    let examples = spartan::data::load_jsonl_with(data, manifest.as_ref())?;
    if examples.is_empty() {
        return Err(spartan::Error::Data {
            path: data.to_path_buf(),
            line: 0,
            message: "no examples".into(),
        }
        .into());
    }
    ck.config.check_labels(&examples, None)?;
    Ok(examples)
}

fn cmd_eval(model: &Path, data: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let (ck, model) = load_model(model)?;
    let examples = load_eval_data(&ck, data)?;
    let accuracy = evaluate(&model, &examples)?;
    let result = serde_json::json!({ "accuracy": accuracy, "examples": examples.len() });
    println!("{result}");
    if let Some(p) = out {
        std::fs::write(p, serde_json::to_string_pretty(&result)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_analyze(model: &Path, data: &Path, layer: &str, out: &Path) -> anyhow::Result<()> {
    let (ck, model) = load_model(model)?;
    let examples = load_eval_data(&ck, data)?;
    let layer: LayerChoice = layer.parse()?;
    let records = collect_selections(&model, &examples, layer)?;
    let stats = specialization_stats(&records)?;
    write_selections_csv(&with_suffix(out, ".csv"), &records)?;
    let summary_path = with_suffix(out, ".summary.json");
    let summary = serde_json::json!({
        "layer": records[0].layer,
        "records": records.len(),
        "stats": stats,
    });
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)
        .with_context(|| format!("writing {}", summary_path.display()))?;
    println!(
        "layer {}: NMI {:.4}, max purity {}",
        records[0].layer,
        stats.nmi,
        stats.max_purity(1).map_or("n/a".to_string(), |p| format!("{p:.4}"))
    );
    for (p, row) in stats.histogram.iter().enumerate() {
        println!("parent {p}: {row:?}");
    }
    Ok(())
}
