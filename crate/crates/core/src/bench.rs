//! Throughput measurement under a capped worker pool.
//!
//! Three modes: the plugin layer alone (`micro`), end-to-end inference
//! through the encoder, and fine-tuning steps. Throughput is instances per
//! minute at a fixed batch size.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, AdapterParams};
use crate::backbone::{BackboneConfig, Model, ModelConfig, PluginConfig};
use crate::error::{Error, Result};
use crate::memory::{SpartanConfig, SpartanLayerParams};
use crate::numerics::{macs, Matrix, Rng, Vector};
use crate::training::{adam_step, batch_gradient, csv_error, Encoded, OptimizerState, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Spartan,
    Adapter,
    #[serde(rename = "adapter-x2")]
    AdapterX2,
    None,
    /// Memory layer with every parent selected.
    SpartanDense,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::Spartan,
        Architecture::Adapter,
        Architecture::AdapterX2,
        Architecture::None,
        Architecture::SpartanDense,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Spartan => "spartan",
            Architecture::Adapter => "adapter",
            Architecture::AdapterX2 => "adapter-x2",
            Architecture::None => "none",
            Architecture::SpartanDense => "spartan-dense",
        }
    }

    pub fn plugin(self, spartan: SpartanConfig, adapter: AdapterConfig) -> PluginConfig {
        match self {
            Architecture::Spartan => PluginConfig::Spartan(spartan),
            Architecture::SpartanDense => PluginConfig::Spartan(SpartanConfig {
                top_k: spartan.num_parents,
                ..spartan
            }),
            Architecture::Adapter => PluginConfig::Adapter(adapter),
            Architecture::AdapterX2 => PluginConfig::AdapterX2(adapter),
            Architecture::None => PluginConfig::None,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let valid: Vec<_> = Architecture::ALL.iter().map(|a| a.name()).collect();
            Error::Parameter(format!("unknown architecture {s:?}; valid values: {}", valid.join(", ")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMode {
    Inference,
    Finetune,
    Micro,
}

impl FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inference" => Ok(BenchMode::Inference),
            "finetune" => Ok(BenchMode::Finetune),
            "micro" => Ok(BenchMode::Micro),
            _ => Err(Error::Parameter(format!(
                "unknown mode {s:?}; valid values: inference, finetune, micro"
            ))),
        }
    }
}

/// Plugin multiply–accumulates per position. Layer normalization inside
/// adapters is not included.
pub fn count_macs(architecture: Architecture, spartan: &SpartanConfig, adapter: &AdapterConfig) -> u64 {
    match architecture.plugin(*spartan, *adapter) {
        PluginConfig::None => 0,
        PluginConfig::Spartan(c) => c.macs_per_position(),
        PluginConfig::Adapter(c) => c.macs_per_position(),
        PluginConfig::AdapterX2(c) => 2 * c.macs_per_position(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub architecture: Architecture,
    pub mode: BenchMode,
    pub threads: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub warmup_batches: usize,
    pub measure_seconds: f64,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub spartan: SpartanConfig,
    pub adapter: AdapterConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::base_shapes();
        BenchConfig {
            architecture: Architecture::Spartan,
            mode: BenchMode::Micro,
            threads: 1,
            batch_size: 32,
            seq_len: 16,
            warmup_batches: 1,
            measure_seconds: 2.0,
            seed: 0,
            backbone,
            spartan: SpartanConfig::with_dim(backbone.d),
            adapter: AdapterConfig::with_dim(backbone.d),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("threads, batch_size and seq_len must be >= 1".into()));
        }
        if !(self.measure_seconds >= 1.0) {
            return Err(Error::Config(format!(
                "measure_seconds must be >= 1, got {}",
                self.measure_seconds
            )));
        }
        if self.mode != BenchMode::Micro && self.seq_len > self.backbone.max_seq_len {
            return Err(Error::Config(format!(
                "seq_len {} exceeds backbone max_seq_len {}",
                self.seq_len, self.backbone.max_seq_len
            )));
        }
        self.model_config().validate()
    }

    pub fn plugin(&self) -> PluginConfig {
        self.architecture.plugin(self.spartan, self.adapter)
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone,
            plugin: self.plugin(),
            num_labels: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub available_cores: usize,
    pub worker_threads: usize,
    pub scalar: String,
    pub os: String,
    pub arch: String,
}

impl Fingerprint {
    fn current(threads: usize) -> Self {
        Fingerprint {
            available_cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
            worker_threads: threads,
            scalar: "f64".into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub instances_per_minute: f64,
    pub instances: u64,
    pub elapsed_seconds: f64,
    /// Multiply–accumulates counted while processing one instance.
    pub macs_per_instance: u64,
    /// Closed-form plugin cost per position.
    pub plugin_macs_per_position: u64,
    pub config: BenchConfig,
    pub environment: Fingerprint,
}

impl BenchReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let c = &self.config;
        w.write_record([
            "architecture",
            "mode",
            "threads",
            "batch_size",
            "seq_len",
            "d",
            "instances_per_minute",
            "instances",
            "elapsed_seconds",
            "macs_per_instance",
            "plugin_macs_per_position",
            "available_cores",
            "scalar",
        ])
        .map_err(|e| csv_error(path, e))?;
        w.write_record([
            c.architecture.name().to_string(),
            serde_json::to_value(c.mode)?.as_str().unwrap_or_default().to_string(),
            c.threads.to_string(),
            c.batch_size.to_string(),
            c.seq_len.to_string(),
            c.backbone.d.to_string(),
            self.instances_per_minute.to_string(),
            self.instances.to_string(),
            self.elapsed_seconds.to_string(),
            self.macs_per_instance.to_string(),
            self.plugin_macs_per_position.to_string(),
            self.environment.available_cores.to_string(),
            self.environment.scalar.clone(),
        ])
        .map_err(|e| csv_error(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Runs `batch` `warmup` times, then repeatedly until `seconds` have passed.
fn measure(cfg: &BenchConfig, mut batch: impl FnMut() -> Result<()>) -> Result<(u64, f64)> {
    for _ in 0..cfg.warmup_batches {
        batch()?;
    }
    let start = Instant::now();
    let mut batches = 0u64;
    loop {
        batch()?;
        batches += 1;
        let elapsed = start.elapsed().as_secs_f64();
        if elapsed >= cfg.measure_seconds {
            return Ok((batches * cfg.batch_size as u64, elapsed));
        }
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build a pool of {threads} threads: {e}")))
}

enum Layer {
    Identity,
    Spartan(SpartanLayerParams),
    Adapters(Vec<AdapterParams>),
}

impl Layer {
    fn build(plugin: &PluginConfig, rng: &mut Rng) -> Result<Self> {
        Ok(match plugin {
            PluginConfig::None => Layer::Identity,
            PluginConfig::Spartan(c) => {
                let mut p = SpartanLayerParams::init(*c, rng)?;
                // Non-zero values so the layer is not a pass-through.
                let sd = 1.0 / (c.d as f64).sqrt();
                for v in &mut p.child_values {
                    *v = Matrix::gaussian(v.rows(), v.cols(), sd, rng);
                }
                Layer::Spartan(p)
            }
            PluginConfig::Adapter(c) => Layer::Adapters(vec![AdapterParams::init(*c, rng)?]),
            PluginConfig::AdapterX2(c) => {
                Layer::Adapters(vec![AdapterParams::init(*c, rng)?, AdapterParams::init(*c, rng)?])
            }
        })
    }

    fn apply(&self, x: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        match self {
            Layer::Identity => out.copy_from_slice(x),
            Layer::Spartan(p) => p.infer_into(x, out),
            Layer::Adapters(stack) => {
                scratch.copy_from_slice(x);
                for a in stack {
                    a.infer_into(scratch, out);
                    scratch.copy_from_slice(out);
                }
            }
        }
    }

    fn instance(&self, positions: &[Vector], d: usize) -> f64 {
        let mut out = vec![0.0; d];
        let mut scratch = vec![0.0; d];
        let mut acc = 0.0;
        for x in positions {
            self.apply(x, &mut out, &mut scratch);
            acc += out[0];
        }
        acc
    }
}

/// Plugin layer alone: every instance is `seq_len` random positions.
pub fn run_micro_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let d = cfg.backbone.d;
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let layer = Layer::build(&cfg.plugin(), &mut rng)?;
    let inputs: Vec<Vec<Vector>> = (0..cfg.batch_size)
        .map(|_| (0..cfg.seq_len).map(|_| (0..d).map(|_| rng.normal()).collect::<Vec<_>>().into()).collect())
        .collect();
    let (_, macs_per_instance) = macs::measure(|| layer.instance(&inputs[0], d));
    let workers = pool(cfg.threads)?;
    let (instances, elapsed) = workers.install(|| {
        measure(cfg, || {
            let s: f64 = inputs.par_iter().map(|inst| layer.instance(inst, d)).sum();
            std::hint::black_box(s);
            Ok(())
        })
    })?;
    Ok(report(cfg, instances, elapsed, macs_per_instance))
}

fn random_ids(cfg: &BenchConfig, rng: &mut Rng) -> Vec<Vec<usize>> {
    (0..cfg.batch_size)
        .map(|_| {
            let mut ids = vec![crate::backbone::BOS_ID];
            ids.extend((1..cfg.seq_len).map(|_| 1 + rng.below(cfg.backbone.vocab_hash_buckets - 1)));
            ids
        })
        .collect()
}

/// Encoder plus plugin plus head on random token sequences.
pub fn run_inference_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let model = Model::new(cfg.model_config(), cfg.seed)?;
    let mut rng = Rng::seed_from_u64(cfg.seed).fork(3);
    let batch = random_ids(cfg, &mut rng);
    let (probe, macs_per_instance) = macs::measure(|| model.logits(&batch[0]));
    probe?;
    let workers = pool(cfg.threads)?;
    let (instances, elapsed) = workers.install(|| {
        measure(cfg, || {
            let logits: Vec<Vector> = batch.par_iter().map(|ids| model.logits(ids)).collect::<Result<_>>()?;
            std::hint::black_box(logits);
            Ok(())
        })
    })?;
    Ok(report(cfg, instances, elapsed, macs_per_instance))
}

/// Forward, backward and optimizer update over batches of random
/// sequences with random labels.
pub fn run_finetune_bench(cfg: &BenchConfig, train: &TrainConfig) -> Result<BenchReport> {
    cfg.validate()?;
    train.validate()?;
    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    let mut rng = Rng::seed_from_u64(cfg.seed).fork(3);
    let data: Vec<Encoded> = random_ids(cfg, &mut rng)
        .into_iter()
        .map(|ids| Encoded {
            ids,
            label: rng.below(2),
        })
        .collect();
    let batch: Vec<&Encoded> = data.iter().collect();
    let (probe, macs_per_instance) = macs::measure(|| batch_gradient(&model, &batch[..1]));
    probe?;
    let mut state = OptimizerState::new(&model.trainable);
    let workers = pool(cfg.threads)?;
    let (instances, elapsed) = workers.install(|| {
        measure(cfg, || {
            let (_, grads) = batch_gradient(&model, &batch)?;
            adam_step(&mut state, &mut model.trainable, &grads, train)
        })
    })?;
    Ok(report(cfg, instances, elapsed, macs_per_instance))
}

/// Dispatches on `cfg.mode`, using default training settings for the
/// fine-tuning mode.
pub fn run(cfg: &BenchConfig) -> Result<BenchReport> {
    match cfg.mode {
        BenchMode::Micro => run_micro_bench(cfg),
        BenchMode::Inference => run_inference_bench(cfg),
        BenchMode::Finetune => run_finetune_bench(cfg, &TrainConfig::for_plugin(&cfg.plugin())),
    }
}

fn report(cfg: &BenchConfig, instances: u64, elapsed: f64, macs_per_instance: u64) -> BenchReport {
    BenchReport {
        instances_per_minute: instances as f64 * 60.0 / elapsed,
        instances,
        elapsed_seconds: elapsed,
        macs_per_instance,
        plugin_macs_per_position: count_macs(cfg.architecture, &cfg.spartan, &cfg.adapter),
        config: *cfg,
        environment: Fingerprint::current(cfg.threads),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Pooling;

    fn tiny() -> BenchConfig {
        let backbone = BackboneConfig {
            d: 16,
            layers: 2,
            heads: 2,
            ffn_dim: 16,
            vocab_hash_buckets: 64,
            max_seq_len: 8,
            pooling: Pooling::FirstToken,
        };
        BenchConfig {
            backbone,
            spartan: SpartanConfig {
                d: 16,
                num_parents: 6,
                children_per_parent: 2,
                top_k: 2,
            },
            adapter: AdapterConfig { d: 16, bottleneck: 4 },
            batch_size: 4,
            seq_len: 8,
            measure_seconds: 1.0,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn count_macs_examples() {
        let s = SpartanConfig::with_dim(768);
        let a = AdapterConfig::with_dim(768);
        assert_eq!(count_macs(Architecture::Spartan, &s, &a), 16 * 768 + 2 * 8 * 3 * 768);
        assert_eq!(count_macs(Architecture::Spartan, &s, &a), 49_152);
        assert_eq!(count_macs(Architecture::SpartanDense, &s, &a), 86_016);
        assert_eq!(count_macs(Architecture::Adapter, &s, &a), 98_304);
        assert_eq!(count_macs(Architecture::AdapterX2, &s, &a), 196_608);
        assert_eq!(count_macs(Architecture::None, &s, &a), 0);
        let minimal = SpartanConfig {
            d: 768,
            num_parents: 16,
            children_per_parent: 1,
            top_k: 1,
        };
        assert_eq!(count_macs(Architecture::Spartan, &minimal, &a), 16 * 768 + 2 * 768);
    }

    #[test]
    fn parse_errors_list_valid_values() {
        let msg = "dense".parse::<Architecture>().unwrap_err().to_string();
        for a in Architecture::ALL {
            assert!(msg.contains(a.name()), "{msg}");
        }
        assert_eq!("adapter-x2".parse::<Architecture>().unwrap(), Architecture::AdapterX2);
        assert!("fast".parse::<BenchMode>().is_err());
    }

    #[test]
    fn validation() {
        assert!(BenchConfig {
            measure_seconds: 0.0,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(BenchConfig { threads: 0, ..tiny() }.validate().is_err());
        assert_eq!(BenchConfig::default().batch_size, 32);
    }

    #[test]
    fn micro_macs_are_exact() {
        for arch in Architecture::ALL {
            let cfg = BenchConfig {
                architecture: arch,
                ..tiny()
            };
            let r = run_micro_bench(&cfg).unwrap();
            assert_eq!(r.macs_per_instance, cfg.seq_len as u64 * r.plugin_macs_per_position, "{arch}");
            assert!(r.instances_per_minute > 0.0);
        }
    }

    #[test]
    fn end_to_end_modes_run() {
        let cfg = BenchConfig {
            mode: BenchMode::Inference,
            ..tiny()
        };
        let r = run(&cfg).unwrap();
        assert!(r.instances_per_minute > 0.0 && r.macs_per_instance > 0);
        let r = run(&BenchConfig {
            mode: BenchMode::Finetune,
            ..cfg
        })
        .unwrap();
        assert!(r.instances_per_minute > 0.0);
        let dir = tempfile::tempdir().unwrap();
        r.write_json(&dir.path().join("r.json")).unwrap();
        r.write_csv(&dir.path().join("r.csv")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert!(csv.lines().nth(1).unwrap().starts_with("spartan,finetune,1,4,8,16,"), "{csv}");
    }
}
