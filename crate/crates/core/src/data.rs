//! Labelled text examples: a synthetic topic task, JSONL files, and
//! stratified few-shot sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub label: usize,
}

const BUSINESS: &[&str] = &[
    "market", "shares", "profit", "bank", "investor", "economy", "revenue", "stock", "merger", "firm",
    "earnings", "dividend", "inflation", "trade", "exports", "retail", "quarterly", "ceo", "bonds", "lender",
];
const ENTERTAINMENT: &[&str] = &[
    "film", "actor", "album", "singer", "oscar", "movie", "concert", "director", "comedy", "festival",
    "celebrity", "soundtrack", "premiere", "drama", "band", "theatre", "television", "starring", "chart", "novel",
];
const SPORTS: &[&str] = &[
    "match", "goal", "coach", "league", "striker", "tournament", "championship", "midfielder", "season", "cup",
    "referee", "defender", "tennis", "rugby", "stadium", "penalty", "olympic", "sprinter", "injury", "fixture",
];
const POLITICS: &[&str] = &[
    "minister", "election", "parliament", "party", "vote", "policy", "government", "campaign", "senator", "labour",
    "tory", "referendum", "cabinet", "opposition", "manifesto", "constituency", "legislation", "mp", "coalition", "whip",
];
const TECH: &[&str] = &[
    "software", "computer", "internet", "mobile", "broadband", "digital", "online", "users", "gadget", "network",
    "chip", "browser", "laptop", "virus", "download", "server", "phone", "website", "robot", "wireless",
];

const BUILTIN_TOPICS: &[(&str, &[&str])] = &[
    ("business", BUSINESS),
    ("entertainment", ENTERTAINMENT),
    ("sports", SPORTS),
    ("politics", POLITICS),
    ("tech", TECH),
];

/// Bag-of-keywords classification task with one disjoint keyword pool per
/// topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTopicTask {
    pub topic_names: Vec<String>,
    pub keyword_pools: Vec<Vec<String>>,
    pub examples_per_topic: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Probability that a word is drawn from another topic's pool.
    pub noise: f64,
}

impl SyntheticTopicTask {
    /// `num_topics` topics; the first five use news-like keyword pools, any
    /// further ones get generated placeholder words.
    pub fn new(num_topics: usize, examples_per_topic: usize, noise: f64) -> Self {
        let (names, pools) = (0..num_topics)
            .map(|t| match BUILTIN_TOPICS.get(t) {
                Some((name, words)) => (name.to_string(), words.iter().map(|w| w.to_string()).collect()),
                None => (format!("topic{t}"), (0..20).map(|j| format!("t{t}w{j}")).collect()),
            })
            .unzip();
        SyntheticTopicTask {
            topic_names: names,
            keyword_pools: pools,
            examples_per_topic,
            min_words: 6,
            max_words: 12,
            noise,
        }
    }

    pub fn num_topics(&self) -> usize {
        self.keyword_pools.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.keyword_pools.is_empty() || self.topic_names.len() != self.keyword_pools.len() {
            return Err(Error::Config("need one name and one keyword pool per topic".into()));
        }
        if let Some(t) = self.keyword_pools.iter().position(|p| p.is_empty()) {
            return Err(Error::Config(format!("keyword pool for topic {t} is empty")));
        }
        let mut seen = BTreeSet::new();
        for pool in &self.keyword_pools {
            for w in pool {
                if !seen.insert(w.as_str()) {
                    return Err(Error::Config(format!("keyword {w:?} appears in more than one topic")));
                }
            }
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::Config("need 1 <= min_words <= max_words".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 1]", self.noise)));
        }
        if self.noise > 0.0 && self.num_topics() < 2 {
            return Err(Error::Config("noise needs at least two topics".into()));
        }
        Ok(())
    }

    /// Maps topic names to label ids.
    pub fn label_manifest(&self) -> LabelManifest {
        self.topic_names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect()
    }
}

/// `examples_per_topic` examples per topic in shuffled order.
pub fn generate_topic_dataset(task: &SyntheticTopicTask, rng: &mut Rng) -> Result<Vec<Example>> {
    task.validate()?;
    let topics = task.num_topics();
    let mut out = Vec::with_capacity(topics * task.examples_per_topic);
    for i in 0..topics * task.examples_per_topic {
        let label = i % topics;
        let len = task.min_words + rng.below(task.max_words - task.min_words + 1);
        let words: Vec<&str> = (0..len)
            .map(|_| {
                let source = if task.noise > 0.0 && rng.uniform() < task.noise {
                    let other = rng.below(topics - 1);
                    if other >= label {
                        other + 1
                    } else {
                        other
                    }
                } else {
                    label
                };
                let pool = &task.keyword_pools[source];
                pool[rng.below(pool.len())].as_str()
            })
            .collect();
        out.push(Example {
            text: words.join(" "),
            label,
        });
    }
    rng.shuffle(&mut out);
    Ok(out)
}

/// String label → id, stored as `labels.json` next to a JSONL file.
pub type LabelManifest = BTreeMap<String, usize>;

pub const LABEL_MANIFEST_FILE: &str = "labels.json";

fn manifest_path(data: &Path) -> PathBuf {
    data.with_file_name(LABEL_MANIFEST_FILE)
}

/// Reads the label manifest next to `data`, if there is one.
pub fn load_label_manifest(data: &Path) -> Result<Option<LabelManifest>> {
    let path = manifest_path(data);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map(Some).map_err(|e| Error::Data {
        path,
        line: e.line(),
        message: e.to_string(),
    })
}

/// Loads one example per non-blank line. String labels are resolved through
/// `labels.json` in the same directory.
pub fn load_jsonl(path: &Path) -> Result<Vec<Example>> {
    let manifest = load_label_manifest(path)?;
    load_jsonl_with(path, manifest.as_ref())
}

pub fn load_jsonl_with(path: &Path, manifest: Option<&LabelManifest>) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Data {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        let text = value
            .get("text")
            .and_then(|t| t.as_str())
            .ok_or_else(|| fail("missing string field \"text\"".into()))?;
        let label = match value.get("label") {
            Some(serde_json::Value::Number(n)) => n
                .as_u64()
                .map(|n| n as usize)
                .ok_or_else(|| fail(format!("label {n} is not a non-negative integer")))?,
            Some(serde_json::Value::String(s)) => match manifest.and_then(|m| m.get(s)) {
                Some(&id) => id,
                None => return Err(fail(format!("label {s:?} not found in {LABEL_MANIFEST_FILE}"))),
            },
            Some(_) => return Err(fail("field \"label\" must be an integer or string".into())),
            None => return Err(fail("missing field \"label\"".into())),
        };
        out.push(Example {
            text: text.to_string(),
            label,
        });
    }
    Ok(out)
}

/// Writes examples with integer labels, one JSON object per line.
pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut buf = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut buf, ex)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn write_label_manifest(data: &Path, manifest: &LabelManifest) -> Result<()> {
    let path = manifest_path(data);
    fs::write(&path, serde_json::to_string_pretty(manifest)?).map_err(|e| Error::io(&path, e))
}

/// Samples `k` examples without replacement, spreading them over labels as
/// evenly as availability allows.
///
/// Labels take turns in ascending order; a label that runs out of examples
/// drops out of the rotation. The result is shuffled.
pub fn few_shot_sample(examples: &[Example], k: usize, rng: &mut Rng) -> Result<Vec<Example>> {
    if k > examples.len() {
        return Err(Error::Parameter(format!(
            "cannot sample {k} examples from {}",
            examples.len()
        )));
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        by_label.entry(ex.label).or_default().push(i);
    }
    for idx in by_label.values_mut() {
        rng.shuffle(idx);
    }
    let mut queues: Vec<std::vec::IntoIter<usize>> = by_label.into_values().map(Vec::into_iter).collect();
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k {
        for q in queues.iter_mut() {
            if picked.len() == k {
                break;
            }
            if let Some(i) = q.next() {
                picked.push(i);
            }
        }
    }
    rng.shuffle(&mut picked);
    Ok(picked.into_iter().map(|i| examples[i].clone()).collect())
}

/// Number of examples per label id, indexed by label.
pub fn label_counts(examples: &[Example]) -> Vec<usize> {
    let n = examples.iter().map(|e| e.label + 1).max().unwrap_or(0);
    let mut counts = vec![0; n];
    for e in examples {
        counts[e.label] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn dataset(noise: f64, seed: u64) -> (SyntheticTopicTask, Vec<Example>) {
        let task = SyntheticTopicTask::new(4, 50, noise);
        let data = generate_topic_dataset(&task, &mut Rng::seed_from_u64(seed)).unwrap();
        (task, data)
    }

    #[test]
    fn noise_free_examples_use_own_pool() {
        let (task, data) = dataset(0.0, 1);
        for ex in &data {
            for w in ex.text.split(' ') {
                assert!(task.keyword_pools[ex.label].iter().any(|k| k == w), "{w} in {}", ex.label);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        assert_eq!(dataset(0.1, 7).1, dataset(0.1, 7).1);
        assert_ne!(dataset(0.1, 7).1, dataset(0.1, 8).1);
        assert_eq!(label_counts(&dataset(0.1, 7).1), vec![50; 4]);
    }

    #[test]
    fn keyword_count_classifier_is_perfect_without_noise() {
        let (task, data) = dataset(0.0, 3);
        for ex in &data {
            let counts: Vec<usize> = task
                .keyword_pools
                .iter()
                .map(|pool| ex.text.split(' ').filter(|w| pool.iter().any(|k| k == w)).count())
                .collect();
            assert_eq!(crate::numerics::argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>()), ex.label);
        }
    }

    #[test]
    fn builtin_pools_are_valid() {
        SyntheticTopicTask::new(5, 1, 0.05).validate().unwrap();
        SyntheticTopicTask::new(8, 1, 0.05).validate().unwrap();
        let mut t = SyntheticTopicTask::new(3, 1, 0.0);
        t.keyword_pools[1].clear();
        assert!(t.validate().is_err());
        let mut t = SyntheticTopicTask::new(3, 1, 0.0);
        t.keyword_pools[1].push("market".into());
        assert!(t.validate().is_err());
    }

    #[test]
    fn jsonl_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(&p, "").unwrap();
        assert!(load_jsonl(&p).unwrap().is_empty());

        fs::write(&p, "{\"text\":\"a\",\"label\":0}\n{\"text\":\"b\",\"label\":2}\n{\"text\":\"c\",\"label\":1}\n").unwrap();
        let got: Vec<usize> = load_jsonl(&p).unwrap().iter().map(|e| e.label).collect();
        assert_eq!(got, vec![0, 2, 1]);

        fs::write(&p, "{\"text\":\"a\",\"label\":0}\n{\"text\":\"b\"}\n").unwrap();
        match load_jsonl(&p).unwrap_err() {
            Error::Data { line, .. } => assert_eq!(line, 2),
            e => panic!("{e}"),
        }

        fs::write(&p, "{\"text\":\"a\",\"label\":\"sports\"}\n").unwrap();
        assert!(load_jsonl(&p).is_err());
        write_label_manifest(&p, &SyntheticTopicTask::new(4, 1, 0.0).label_manifest()).unwrap();
        assert_eq!(load_jsonl(&p).unwrap()[0].label, 2);
    }

    #[test]
    fn missing_file_names_path() {
        let msg = load_jsonl(Path::new("/nonexistent/x.jsonl")).unwrap_err().to_string();
        assert!(msg.contains("/nonexistent/x.jsonl"), "{msg}");
    }

    #[test]
    fn few_shot_examples() {
        let (_, data) = dataset(0.05, 2);
        let all = few_shot_sample(&data, data.len(), &mut Rng::seed_from_u64(0)).unwrap();
        let mut a: Vec<String> = all.iter().map(|e| e.text.clone()).collect();
        let mut b: Vec<String> = data.iter().map(|e| e.text.clone()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);

        let big = generate_topic_dataset(&SyntheticTopicTask::new(4, 100, 0.05), &mut Rng::seed_from_u64(1)).unwrap();
        let s = few_shot_sample(&big, 200, &mut Rng::seed_from_u64(5)).unwrap();
        assert_eq!(label_counts(&s), vec![50; 4]);
        assert_eq!(s, few_shot_sample(&big, 200, &mut Rng::seed_from_u64(5)).unwrap());
        assert!(few_shot_sample(&big, 401, &mut Rng::seed_from_u64(5)).is_err());
    }

    proptest! {
        #[test]
        fn jsonl_round_trip(texts in proptest::collection::vec(".*", 0..20), seed in 0u64..1000) {
            let mut rng = Rng::seed_from_u64(seed);
            let examples: Vec<Example> = texts
                .into_iter()
                .map(|text| Example { text, label: rng.below(7) })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.jsonl");
            write_jsonl(&p, &examples).unwrap();
            prop_assert_eq!(load_jsonl(&p).unwrap(), examples);
        }

        #[test]
        fn stratified_counts_differ_by_at_most_one(
            labels in proptest::collection::vec(0usize..5, 1..120),
            frac in 0.0f64..=1.0,
            seed in 0u64..1000,
        ) {
            let examples: Vec<Example> = labels
                .iter()
                .enumerate()
                .map(|(i, &label)| Example { text: i.to_string(), label })
                .collect();
            let k = (frac * examples.len() as f64) as usize;
            let s = few_shot_sample(&examples, k, &mut Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(s.len(), k);
            let avail = label_counts(&examples);
            let got = label_counts(&s);
            // Every label either received its full supply or is within one
            // of the largest allocation.
            let top = got.iter().copied().max().unwrap_or(0);
            for (l, &a) in avail.iter().enumerate() {
                let g = got.get(l).copied().unwrap_or(0);
                prop_assert!(g == a || g + 1 >= top);
            }
        }
    }
}
