//! Which parents do instances of each label pick?
//!
//! For every example the routing distribution is read at the position the
//! classifier pools from (position 0), at one chosen layer.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Model, PluginTrace};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::numerics::{argmax, Vector};
use crate::training::csv_error;

/// Layer whose routing is analysed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerChoice {
    Index(usize),
    Last,
}

impl LayerChoice {
    pub fn resolve(self, layers: usize) -> Result<usize> {
        match self {
            LayerChoice::Last => Ok(layers - 1),
            LayerChoice::Index(i) if i < layers => Ok(i),
            LayerChoice::Index(i) => Err(Error::Parameter(format!(
                "layer {i} out of range; the model has layers 0..{}",
                layers - 1
            ))),
        }
    }
}

impl FromStr for LayerChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "last" {
            return Ok(LayerChoice::Last);
        }
        s.parse()
            .map(LayerChoice::Index)
            .map_err(|_| Error::Parameter(format!("layer must be \"last\" or an index, got {s:?}")))
    }
}

impl fmt::Display for LayerChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerChoice::Index(i) => write!(f, "{i}"),
            LayerChoice::Last => f.write_str("last"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub example: usize,
    pub label: usize,
    pub layer: usize,
    pub argmax_parent: usize,
    pub parent_probs: Vector,
}

/// Parent routing of every example at `layer`, in example order. Leaves the
/// model untouched.
pub fn collect_selections(model: &Model, examples: &[Example], layer: LayerChoice) -> Result<Vec<SelectionRecord>> {
    if model.trainable.plugin.spartan_layers().is_none() {
        return Err(Error::Config("selection analysis needs a model with memory-layer plugins".into()));
    }
    let layer = layer.resolve(model.config().backbone.layers)?;
    examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let cache = model.encode_traced(&model.tokenize(&ex.text))?;
            let PluginTrace::Spartan(traces) = &cache.layers[layer].plugin else {
                return Err(Error::Consistency("missing memory-layer trace".into()));
            };
            let probs = traces[0].parent_probs.clone();
            Ok(SelectionRecord {
                example: i,
                label: ex.label,
                layer,
                argmax_parent: argmax(&probs),
                parent_probs: probs,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecializationStats {
    pub num_records: usize,
    /// `histogram[parent][label]`: how many instances of `label` pick `parent`.
    pub histogram: Vec<Vec<usize>>,
    pub parent_counts: Vec<usize>,
    /// Share of a parent's instances carrying its most common label.
    pub purity: Vec<Option<f64>>,
    pub majority_label: Vec<Option<usize>>,
    /// Mutual information between parent and label divided by the mean of
    /// their entropies; 0 when either entropy is 0.
    pub nmi: f64,
}

impl SpecializationStats {
    /// Highest purity among parents chosen by at least `min_support`
    /// instances.
    pub fn max_purity(&self, min_support: usize) -> Option<f64> {
        self.purity
            .iter()
            .zip(&self.parent_counts)
            .filter(|(_, &n)| n >= min_support.max(1))
            .filter_map(|(p, _)| *p)
            .reduce(f64::max)
    }
}

/// Histogram, purity and normalized mutual information of argmax parent
/// versus gold label.
pub fn specialization_stats(records: &[SelectionRecord]) -> Result<SpecializationStats> {
    if records.is_empty() {
        return Err(Error::Parameter("no selection records".into()));
    }
    let parents = records[0].parent_probs.dim();
    let labels = records.iter().map(|r| r.label + 1).max().unwrap_or(0);
    let mut histogram = vec![vec![0usize; labels]; parents];
    for r in records {
        if r.parent_probs.dim() != parents || r.argmax_parent >= parents {
            return Err(Error::Consistency("records disagree on the number of parents".into()));
        }
        histogram[r.argmax_parent][r.label] += 1;
    }
    let parent_counts: Vec<usize> = histogram.iter().map(|row| row.iter().sum()).collect();
    let (purity, majority_label) = histogram
        .iter()
        .zip(&parent_counts)
        .map(|(row, &n)| {
            if n == 0 {
                return (None, None);
            }
            let best = argmax(&row.iter().map(|&c| c as f64).collect::<Vec<_>>());
            (Some(row[best] as f64 / n as f64), Some(best))
        })
        .unzip();
    Ok(SpecializationStats {
        num_records: records.len(),
        nmi: nmi(&histogram),
        histogram,
        parent_counts,
        purity,
        majority_label,
    })
}

/// NMI of a contingency table with arithmetic-mean normalization.
pub fn nmi(table: &[Vec<usize>]) -> f64 {
    let total: usize = table.iter().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let cols = table.first().map_or(0, Vec::len);
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum::<usize>() as f64 / n).collect();
    let colsum: Vec<f64> = (0..cols).map(|j| table.iter().map(|r| r[j]).sum::<usize>() as f64 / n).collect();
    let entropy = |p: &[f64]| -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
    let (hr, hc) = (entropy(&rows), entropy(&colsum));
    if hr <= 0.0 || hc <= 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let pij = c as f64 / n;
                mi += pij * (pij / (rows[i] * colsum[j])).ln();
            }
        }
    }
    (mi / (0.5 * (hr + hc))).clamp(0.0, 1.0)
}

/// `example_id,label,layer,argmax_parent,p_0..p_{N-1}` per record.
pub fn write_selections_csv(path: &Path, records: &[SelectionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let parents = records.first().map_or(0, |r| r.parent_probs.dim());
    let mut header: Vec<String> = ["example_id", "label", "layer", "argmax_parent"].map(String::from).to_vec();
    header.extend((0..parents).map(|i| format!("p_{i}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in records {
        let mut row = vec![
            r.example.to_string(),
            r.label.to_string(),
            r.layer.to_string(),
            r.argmax_parent.to_string(),
        ];
        row.extend(r.parent_probs.iter().map(|p| p.to_string()));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, ModelConfig, PluginConfig, Pooling};
    use crate::memory::SpartanConfig;
    use crate::numerics::{Matrix, Rng};
    use crate::tensors::ParamSet;
    use proptest::prelude::{prop_assert, proptest};

    /// Direct sum over every record pair class, independent of the
    /// contingency-table code path.
    fn brute_force_nmi(pairs: &[(usize, usize)]) -> f64 {
        let n = pairs.len() as f64;
        let xs: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let mut ux = xs.clone();
        ux.sort();
        ux.dedup();
        let mut uy = ys.clone();
        uy.sort();
        uy.dedup();
        let px = |a: usize| xs.iter().filter(|&&x| x == a).count() as f64 / n;
        let py = |b: usize| ys.iter().filter(|&&y| y == b).count() as f64 / n;
        let hx: f64 = ux.iter().map(|&a| -px(a) * px(a).ln()).sum();
        let hy: f64 = uy.iter().map(|&b| -py(b) * py(b).ln()).sum();
        if hx == 0.0 || hy == 0.0 {
            return 0.0;
        }
        let mut mi = 0.0;
        for &a in &ux {
            for &b in &uy {
                let pab = pairs.iter().filter(|&&p| p == (a, b)).count() as f64 / n;
                if pab > 0.0 {
                    mi += pab * (pab / (px(a) * py(b))).ln();
                }
            }
        }
        mi / ((hx + hy) / 2.0)
    }

    fn record(parent: usize, label: usize, parents: usize) -> SelectionRecord {
        let mut p = Vector::zeros(parents);
        p[parent] = 1.0;
        SelectionRecord {
            example: 0,
            label,
            layer: 0,
            argmax_parent: parent,
            parent_probs: p,
        }
    }

    fn model(parents: usize) -> Model {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                d: 8,
                layers: 2,
                heads: 2,
                ffn_dim: 8,
                vocab_hash_buckets: 64,
                max_seq_len: 8,
                pooling: Pooling::FirstToken,
            },
            plugin: PluginConfig::Spartan(SpartanConfig {
                d: 8,
                num_parents: parents,
                children_per_parent: 1,
                top_k: 1,
            }),
            num_labels: 3,
        };
        Model::new(cfg, 1).unwrap()
    }

    fn examples(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                text: format!("word{i} other{}", i * 7),
                label: i % 3,
            })
            .collect()
    }

    #[test]
    fn perfect_correspondence() {
        let recs: Vec<_> = (0..40).map(|i| record(i % 4, i % 4, 4)).collect();
        let s = specialization_stats(&recs).unwrap();
        assert!((s.nmi - 1.0).abs() < 1e-12);
        assert_eq!(s.max_purity(1), Some(1.0));
        assert_eq!(s.parent_counts, vec![10; 4]);
        for (row, &n) in s.histogram.iter().zip(&s.parent_counts) {
            assert_eq!(row.iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn independent_choice_has_low_nmi() {
        let mut rng = Rng::seed_from_u64(3);
        let recs: Vec<_> = (0..20_000).map(|_| record(rng.below(5), rng.below(4), 5)).collect();
        assert!(specialization_stats(&recs).unwrap().nmi < 0.05);
    }

    #[test]
    fn zero_parents_give_uniform_probs_and_argmax_zero() {
        let mut m = model(5);
        if let crate::backbone::Plugin::Spartan(layers) = &mut m.trainable.plugin {
            for l in layers {
                l.parents = Matrix::zeros(5, 8);
            }
        }
        let recs = collect_selections(&m, &examples(12), LayerChoice::Last).unwrap();
        assert_eq!(recs.len(), 12);
        for r in &recs {
            assert_eq!(r.argmax_parent, 0);
            assert_eq!(r.layer, 1);
            assert!(r.parent_probs.iter().all(|&p| (p - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn single_parent_and_layer_range() {
        let m = model(1);
        let recs = collect_selections(&m, &examples(9), LayerChoice::Index(0)).unwrap();
        assert!(recs.iter().all(|r| r.argmax_parent == 0));
        assert!(collect_selections(&m, &examples(2), LayerChoice::Index(2)).is_err());
        assert_eq!("last".parse::<LayerChoice>().unwrap(), LayerChoice::Last);
        assert_eq!("3".parse::<LayerChoice>().unwrap(), LayerChoice::Index(3));
        assert!("x".parse::<LayerChoice>().is_err());
    }

    #[test]
    fn collection_is_a_pure_read() {
        let m = model(4);
        let before = m.checksum();
        let a = collect_selections(&m, &examples(10), LayerChoice::Last).unwrap();
        assert_eq!(m.checksum(), before);
        assert_eq!(a, collect_selections(&m, &examples(10), LayerChoice::Last).unwrap());
        for r in &a {
            assert!((r.parent_probs.sum() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_selections_csv(&p, &[record(1, 0, 2)]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "example_id,label,layer,argmax_parent,p_0,p_1\n0,0,0,1,0,1\n"
        );
    }

    proptest! {
        #[test]
        fn nmi_matches_brute_force(pairs in proptest::collection::vec((0usize..5, 0usize..4), 1..200)) {
            let recs: Vec<_> = pairs.iter().map(|&(p, l)| record(p, l, 5)).collect();
            let s = specialization_stats(&recs).unwrap();
            prop_assert!((s.nmi - brute_force_nmi(&pairs)).abs() <= 1e-9);
            prop_assert!((0.0..=1.0).contains(&s.nmi));
            prop_assert!(s.histogram.iter().flatten().sum::<usize>() == pairs.len());
        }
    }
}
