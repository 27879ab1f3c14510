use std::collections::BTreeSet;

use spartan::adapter::AdapterConfig;
use spartan::backbone::{BackboneConfig, Model, ModelConfig, Plugin, PluginConfig, PluginTrace, Pooling};
use spartan::data::{generate_topic_dataset, Example, SyntheticTopicTask};
use spartan::memory::SpartanConfig;
use spartan::numerics::Rng;
use spartan::tensors::ParamSet;
use spartan::training::{batch_gradient, encode_examples, evaluate, moving_average, train, TrainConfig};

fn backbone() -> BackboneConfig {
    BackboneConfig {
        d: 24,
        layers: 2,
        heads: 2,
        ffn_dim: 48,
        vocab_hash_buckets: 512,
        max_seq_len: 16,
        pooling: Pooling::FirstToken,
    }
}

fn memory(top_k: usize) -> PluginConfig {
    PluginConfig::Spartan(SpartanConfig {
        d: 24,
        num_parents: 8,
        children_per_parent: 2,
        top_k,
    })
}

fn model(plugin: PluginConfig, seed: u64) -> Model {
    Model::new(
        ModelConfig {
            backbone: backbone(),
            plugin,
            num_labels: 4,
        },
        seed,
    )
    .unwrap()
}

fn topics(per_topic: usize, seed: u64) -> Vec<Example> {
    generate_topic_dataset(&SyntheticTopicTask::new(4, per_topic, 0.05), &mut Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn small_model_learns_the_topic_task() {
    let mut m = model(memory(4), 0);
    let data = topics(40, 1);
    let history = train(
        &mut m,
        &data,
        None,
        &TrainConfig {
            steps: 120,
            batch_size: 16,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let smooth = moving_average(&history.losses(), 20);
    assert!(smooth[smooth.len() - 1] < 0.5 * smooth[19], "{:?}", &smooth[19..]);
    assert!(evaluate(&m, &data).unwrap() > 0.9);
}

#[test]
fn training_leaves_the_backbone_untouched() {
    let data = topics(8, 3);
    for plugin in [
        memory(3),
        PluginConfig::Adapter(AdapterConfig { d: 24, bottleneck: 6 }),
        PluginConfig::AdapterX2(AdapterConfig { d: 24, bottleneck: 6 }),
        PluginConfig::None,
    ] {
        let mut m = model(plugin, 4);
        let frozen = m.backbone.checksum();
        let before = m.trainable.checksum();
        train(
            &mut m,
            &data,
            None,
            &TrainConfig {
                steps: 4,
                batch_size: 8,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(m.backbone.checksum(), frozen, "{}", plugin.name());
        assert_ne!(m.trainable.checksum(), before, "{}", plugin.name());
    }
}

/// Parents that no loss-relevant position in the batch selects get exactly
/// zero gradient, and every parent some such position selects gets a
/// non-zero one.
#[test]
fn batch_gradient_is_zero_for_parents_nobody_selects() {
    let mut m = model(memory(2), 5);
    // The head and child values start at zero; make both non-zero so the
    // loss depends on the routing.
    let mut rng = Rng::seed_from_u64(6);
    m.trainable.head.visit_mut("", &mut |_, _, d| d.iter_mut().for_each(|x| *x = rng.normal()));
    if let Plugin::Spartan(layers) = &mut m.trainable.plugin {
        for layer in layers {
            for v in &mut layer.child_values {
                v.as_mut_slice().iter_mut().for_each(|x| *x = 0.3 * rng.normal());
            }
        }
    }
    let short = [
        Example { text: "match goal".into(), label: 2 },
        Example { text: "market shares".into(), label: 0 },
    ];
    let data = encode_examples(&m, &short).unwrap();
    let batch: Vec<_> = data.iter().collect();
    let (_, grads) = batch_gradient(&m, &batch).unwrap();

    let layers = m.backbone.layers.len();
    let mut used = vec![BTreeSet::new(); layers];
    for e in &data {
        let cache = m.encode_traced(&e.ids).unwrap();
        for (l, lc) in cache.layers.iter().enumerate() {
            let PluginTrace::Spartan(traces) = &lc.plugin else { unreachable!() };
            // Nothing downstream reads the last layer beyond the pooled
            // first position.
            let reach = if l + 1 == layers { 1 } else { traces.len() };
            for t in &traces[..reach] {
                used[l].extend(t.selected.iter().copied());
            }
        }
    }
    let Plugin::Spartan(g) = &grads.plugin else { unreachable!() };
    let mut zero_rows = 0;
    for (l, layer) in g.iter().enumerate() {
        for p in 0..8 {
            let row_zero = layer.parents.row(p).iter().all(|&v| v == 0.0)
                && layer.child_keys[p].as_slice().iter().all(|&v| v == 0.0)
                && layer.child_values[p].as_slice().iter().all(|&v| v == 0.0);
            assert_eq!(row_zero, !used[l].contains(&p), "layer {l}, parent {p}");
            zero_rows += usize::from(row_zero);
        }
    }
    assert!(zero_rows > 0);
}

#[test]
fn parallel_and_sequential_gradients_agree() {
    let m = model(memory(3), 8);
    let data = encode_examples(&m, &topics(3, 9)).unwrap();
    let batch: Vec<_> = data.iter().collect();
    let (loss, whole) = batch_gradient(&m, &batch).unwrap();

    let mut sum = whole.zeros_like();
    let mut loss_sum = 0.0;
    for e in &batch {
        let (l, g) = batch_gradient(&m, &[*e]).unwrap();
        loss_sum += l;
        sum.add_scaled(1.0, &g);
    }
    let n = batch.len() as f64;
    assert!((loss - loss_sum / n).abs() < 1e-12);
    for (a, b) in whole.flatten().iter().zip(sum.flatten()) {
        assert!((a - b / n).abs() < 1e-12);
    }
}
