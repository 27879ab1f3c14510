//! Parameter and storage accounting for a backbone shared across tasks.
//!
//! Counts come from the tensor shapes a configuration implies, so the
//! base-size shapes can be counted without allocating them. The closed-form
//! multi-task formula for memory layers is reported next to the enumeration
//! and any disagreement is flagged rather than reconciled.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, ModelConfig, PluginConfig};
use crate::error::Result;
use crate::tensors::ParamSet;

/// Bytes per stored scalar in the storage estimate (32-bit floats).
pub const BYTES_PER_SCALAR: u64 = 4;

/// `N_base + 2·T·(P + P·C)·d·L`, evaluated as written.
pub fn spartan_formula_total(n_base: u64, tasks: u64, parents: u64, children: u64, d: u64, layers: u64) -> u64 {
    n_base + 2 * tasks * (parents + parents * children) * d * layers
}

pub type Shapes = Vec<(String, Vec<usize>)>;

fn linear(out: &mut Shapes, name: &str, inputs: usize, outputs: usize) {
    out.push((format!("{name}.weight"), vec![outputs, inputs]));
    out.push((format!("{name}.bias"), vec![outputs]));
}

fn norm(out: &mut Shapes, name: &str, d: usize) {
    out.push((format!("{name}.gain"), vec![d]));
    out.push((format!("{name}.bias"), vec![d]));
}

/// Frozen tensors of a backbone, in the order [`crate::backbone::Model`]
/// stores them.
pub fn backbone_shapes(cfg: &BackboneConfig) -> Shapes {
    let d = cfg.d;
    let mut s = vec![
        ("backbone.token_embedding".to_string(), vec![cfg.vocab_hash_buckets, d]),
        ("backbone.position_embedding".to_string(), vec![cfg.max_seq_len, d]),
    ];
    norm(&mut s, "backbone.embed_norm", d);
    for l in 0..cfg.layers {
        let p = format!("backbone.layers.{l}");
        for name in ["query", "key", "value", "output"] {
            linear(&mut s, &format!("{p}.{name}"), d, d);
        }
        norm(&mut s, &format!("{p}.attn_norm"), d);
        linear(&mut s, &format!("{p}.ffn_in"), d, cfg.ffn_dim);
        linear(&mut s, &format!("{p}.ffn_out"), cfg.ffn_dim, d);
        norm(&mut s, &format!("{p}.ffn_norm"), d);
    }
    s
}

/// Trainable plugin tensors for `layers` encoder layers.
pub fn plugin_shapes(plugin: &PluginConfig, layers: usize) -> Shapes {
    let mut s = Vec::new();
    for l in 0..layers {
        match plugin {
            PluginConfig::None => {}
            PluginConfig::Spartan(c) => {
                s.push((format!("plugin.{l}.parents"), vec![c.num_parents, c.d]));
                for kind in ["child_keys", "child_values"] {
                    for i in 0..c.num_parents {
                        s.push((format!("plugin.{l}.{kind}.{i}"), vec![c.children_per_parent, c.d]));
                    }
                }
            }
            PluginConfig::Adapter(c) | PluginConfig::AdapterX2(c) => {
                let stack = if matches!(plugin, PluginConfig::AdapterX2(_)) { 2 } else { 1 };
                for j in 0..stack {
                    let p = format!("plugin.{l}.{j}");
                    linear(&mut s, &format!("{p}.down"), c.d, c.bottleneck);
                    linear(&mut s, &format!("{p}.up"), c.bottleneck, c.d);
                    norm(&mut s, &format!("{p}.norm"), c.d);
                }
            }
        }
    }
    s
}

pub fn head_shapes(d: usize, num_labels: usize) -> Shapes {
    let mut s = Vec::new();
    linear(&mut s, "head", d, num_labels);
    s
}

pub fn count(shapes: &Shapes) -> u64 {
    shapes.iter().map(|(_, dims)| dims.iter().product::<usize>() as u64).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub architecture: String,
    pub tasks: u64,
    pub backbone_params: u64,
    pub plugin_params_per_task: u64,
    pub head_params_per_task: u64,
    /// Plugin plus head.
    pub added_params_per_task: u64,
    /// `backbone + tasks × added`.
    pub total_enumerated: u64,
    /// Only for memory-layer plugins: the closed-form total.
    pub total_formula: Option<u64>,
    pub formula_added_per_task: Option<u64>,
    /// `(formula − enumerated) / enumerated` over the plugin additions.
    pub formula_gap: Option<f64>,
    pub storage_bytes: u64,
    /// Size of the JSON name/shape manifest, reported apart from tensor data.
    pub manifest_bytes: u64,
    pub frozen_params: u64,
    pub trainable_params_per_task: u64,
}

impl ParamReport {
    pub fn from_config(cfg: &ModelConfig, tasks: u64) -> Result<Self> {
        cfg.validate()?;
        let backbone = backbone_shapes(&cfg.backbone);
        let plugin = plugin_shapes(&cfg.plugin, cfg.backbone.layers);
        let head = head_shapes(cfg.backbone.d, cfg.num_labels);
        Self::assemble(cfg, tasks, &backbone, &plugin, &head)
    }

    /// Same report from the tensors a constructed model actually holds.
    pub fn from_model(model: &crate::backbone::Model, tasks: u64) -> Result<Self> {
        let backbone = model.backbone.shapes("backbone");
        let plugin = model.trainable.plugin.shapes("plugin");
        let head = model.trainable.head.shapes("head");
        Self::assemble(model.config(), tasks, &backbone, &plugin, &head)
    }

    fn assemble(cfg: &ModelConfig, tasks: u64, backbone: &Shapes, plugin: &Shapes, head: &Shapes) -> Result<Self> {
        let backbone_params = count(backbone);
        let plugin_params = count(plugin);
        let head_params = count(head);
        let added = plugin_params + head_params;
        let total_enumerated = backbone_params + tasks * added;
        let (total_formula, formula_added, formula_gap) = match cfg.plugin {
            PluginConfig::Spartan(c) => {
                let per_task = spartan_formula_total(
                    0,
                    1,
                    c.num_parents as u64,
                    c.children_per_parent as u64,
                    c.d as u64,
                    cfg.backbone.layers as u64,
                );
                let total = spartan_formula_total(
                    backbone_params,
                    tasks,
                    c.num_parents as u64,
                    c.children_per_parent as u64,
                    c.d as u64,
                    cfg.backbone.layers as u64,
                );
                let gap = (per_task as f64 - plugin_params as f64) / plugin_params as f64;
                (Some(total), Some(per_task), Some(gap))
            }
            _ => (None, None, None),
        };
        let all: Vec<_> = backbone.iter().chain(plugin).chain(head).collect();
        let manifest_bytes = serde_json::to_vec(&all)?.len() as u64;
        Ok(ParamReport {
            architecture: cfg.plugin.name().to_string(),
            tasks,
            backbone_params,
            plugin_params_per_task: plugin_params,
            head_params_per_task: head_params,
            added_params_per_task: added,
            total_enumerated,
            total_formula,
            formula_added_per_task: formula_added,
            formula_gap,
            storage_bytes: BYTES_PER_SCALAR * total_enumerated,
            manifest_bytes,
            frozen_params: backbone_params,
            trainable_params_per_task: added,
        })
    }

    /// True when the closed-form count disagrees with enumeration.
    pub fn has_formula_gap(&self) -> bool {
        self.formula_gap.is_some_and(|g| g != 0.0)
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let row = |f: &mut fmt::Formatter<'_>, k: &str, v: String| writeln!(f, "{k:<34} {v:>16}");
        row(f, "architecture", self.architecture.clone())?;
        row(f, "tasks", self.tasks.to_string())?;
        row(f, "backbone (frozen)", self.backbone_params.to_string())?;
        row(f, "plugin per task", self.plugin_params_per_task.to_string())?;
        row(f, "head per task", self.head_params_per_task.to_string())?;
        row(f, "added per task", self.added_params_per_task.to_string())?;
        row(f, "total (enumerated)", self.total_enumerated.to_string())?;
        if let (Some(total), Some(per_task), Some(gap)) = (self.total_formula, self.formula_added_per_task, self.formula_gap)
        {
            row(f, "plugin per task (formula)", per_task.to_string())?;
            row(f, "total (formula)", total.to_string())?;
            row(f, "formula vs enumeration", format!("{:+.2}%", 100.0 * gap))?;
            if self.has_formula_gap() {
                writeln!(
                    f,
                    "note: the closed-form count differs from the enumerated tensors; \
                     the formula doubles the parent term, which has no key/value split"
                )?;
            }
        }
        row(f, "storage (4-byte scalars)", format!("{} B", self.storage_bytes))?;
        row(f, "shape manifest", format!("{} B", self.manifest_bytes))
    }
}
