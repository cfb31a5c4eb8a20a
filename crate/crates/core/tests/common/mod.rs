//! Scripted fixtures shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::json;
use trustorch::gateway::{AgentSpec, FixtureEntry};
use trustorch::model::{ExperimentConfig, FixedClock, LabelSet, RunPolicy, Sample, Stage};
use trustorch::orchestrator::{Orchestrator, RunSummary};
use trustorch::trust::TrustProfile;
use trustorch::vector_store::{write_embedding_dir, EmbeddingRecord, VectorIndex};

pub const FIXTURE_CLOCK_MS: u64 = 1_000;
pub const N_IMAGES: usize = 160;

/// Trust profile rows as published for the two zero-shot agents.
pub fn published_profiles() -> Vec<TrustProfile> {
    vec![
        TrustProfile {
            agent_id: "qwen".into(),
            n: 512,
            accuracy: 0.492,
            avg_conf: 0.945,
            conf_correct: Some(0.950),
            conf_incorrect: Some(0.941),
            confidence_gap: Some(0.009),
            consistency_gap: None,
            ocr: Some(0.508),
            hcw: 260,
            thc: 512,
            ccc: Some(0.126),
            ccc_p_value: Some(0.0042),
            ece: Some(0.453),
            cwa: Some(0.495),
        },
        TrustProfile {
            agent_id: "gpt".into(),
            n: 512,
            accuracy: 0.584,
            avg_conf: 0.877,
            conf_correct: Some(0.890),
            conf_incorrect: Some(0.860),
            confidence_gap: Some(0.030),
            consistency_gap: None,
            ocr: Some(0.416),
            hcw: 213,
            thc: 512,
            ccc: Some(0.361),
            ccc_p_value: Some(0.0),
            ece: Some(0.293),
            cwa: Some(0.592),
        },
    ]
}

pub fn image_id(i: usize) -> String {
    format!("img-{i:03}")
}

pub fn truth_of(i: usize) -> String {
    LabelSet::apple_leaf().labels()[i % 4].clone()
}

/// A label other than `label`: the next one in label-set order.
pub fn wrong(label: &str) -> String {
    let labels = LabelSet::apple_leaf();
    let i = labels.index_of(label).unwrap();
    labels.labels()[(i + 1) % labels.len()].clone()
}

fn reply(category: &str, confidence: f64, text_key: &str, text: &str) -> String {
    json!({"category": category, text_key: text, "confidence": confidence}).to_string()
}

/// Scripted answers engineered to the published GPT re-evaluation counts:
/// 3 overcorrections, 20 reaffirmations (3 of them correct), and an arbiter
/// that disagrees with GPT's final answer 36 times, 16 of them correctly.
pub struct AuditScript {
    /// (initial, revised) per image.
    pub gpt: Vec<(String, String)>,
    pub qwen: Vec<(String, String)>,
    pub decision: Vec<String>,
}

impl AuditScript {
    pub fn build() -> Self {
        let mut gpt = Vec::new();
        let mut qwen = Vec::new();
        let mut decision = Vec::new();
        for i in 0..N_IMAGES {
            let t = truth_of(i);
            let w = wrong(&t);
            let (init, rev) = match i {
                0..=2 => (t.clone(), w.clone()),  // overcorrections
                3..=5 => (t.clone(), t.clone()),  // reaffirmed, correct
                6..=22 => (w.clone(), w.clone()), // reaffirmed, wrong
                _ => (w.clone(), t.clone()),      // corrections
            };
            let d = match i {
                6..=21 => t.clone(),  // disagrees with GPT, right
                23..=42 => w.clone(), // disagrees with GPT, wrong
                _ => rev.clone(),
            };
            let q = if i % 2 == 0 { t.clone() } else { w.clone() };
            gpt.push((init, rev));
            qwen.push((q.clone(), q));
            decision.push(d);
        }
        Self { gpt, qwen, decision }
    }
}

pub struct Fixture {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub samples: Vec<Sample>,
}

impl Fixture {
    pub fn orchestrator(&self) -> Orchestrator {
        Orchestrator::from_config(self.config.clone(), &self.dir, Arc::new(FixedClock(FIXTURE_CLOCK_MS))).unwrap()
    }

    pub fn run(&self, samples: &[Sample], out: &Path) -> RunSummary {
        self.orchestrator().run_experiment(samples, out).unwrap()
    }
}

fn write_jsonl(path: &Path, rows: &[FixtureEntry]) {
    let text: String = rows.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    fs::write(path, text).unwrap();
}

/// Writes the 160-image trust-aware fixture into `dir`. With `scripted_arbiter`
/// the final decisions come from a scripted text-only arbiter; otherwise the
/// rule arbiter decides.
pub fn audit_fixture(dir: &Path, scripted_arbiter: bool) -> Fixture {
    let script = AuditScript::build();
    let labels = LabelSet::apple_leaf();
    let mut gpt = Vec::new();
    let mut qwen = Vec::new();
    let mut arbiter = Vec::new();
    for i in 0..N_IMAGES {
        let id = image_id(i);
        let (gi, gr) = &script.gpt[i];
        let (qi, qr) = &script.qwen[i];
        let lat = 100.0 + i as f64;
        let push = |rows: &mut Vec<FixtureEntry>, stage, text: String| {
            let mut e = FixtureEntry::single(&id, stage, text);
            e.latency_ms = Some(lat);
            rows.push(e);
        };
        push(&mut gpt, Stage::Initial, reply(gi, 0.9, "justification", "lesions look typical"));
        push(&mut gpt, Stage::Reeval, reply(gr, 0.85, "justification", "after reviewing exemplars"));
        push(&mut qwen, Stage::Initial, reply(qi, 0.95, "justification", "clear pattern"));
        push(&mut qwen, Stage::Reeval, reply(qr, 0.95, "justification", "unchanged"));
        arbiter.push(FixtureEntry::single(
            &id,
            Stage::Initial,
            reply(&script.decision[i], 0.8, "rationale", "weighed trust profiles and retrieval votes"),
        ));
    }
    fs::create_dir_all(dir.join("fixtures")).unwrap();
    write_jsonl(&dir.join("fixtures/gpt.jsonl"), &gpt);
    write_jsonl(&dir.join("fixtures/qwen.jsonl"), &qwen);
    write_jsonl(&dir.join("fixtures/arbiter.jsonl"), &arbiter);

    // one axis per class; the query for an image is its class axis, so the
    // top vote always names the true label
    let dim = 8;
    let axis = |c: usize, eps: f64| {
        let mut v = vec![0.0; dim];
        v[c] = 1.0;
        v[4 + c] = eps;
        v
    };
    let mut records = Vec::new();
    for (c, label) in labels.labels().iter().enumerate() {
        for j in 0..3 {
            records.push(EmbeddingRecord {
                id: format!("ref-{label}-{j}"),
                label: Some(label.clone()),
                vector: axis(c, 0.1 * j as f64),
                meta: BTreeMap::new(),
            });
        }
    }
    VectorIndex::build(records, dim).unwrap().index.save(&dir.join("index")).unwrap();
    let queries: Vec<EmbeddingRecord> = (0..N_IMAGES)
        .map(|i| EmbeddingRecord {
            id: image_id(i),
            label: None,
            vector: axis(i % 4, 0.05),
            meta: BTreeMap::new(),
        })
        .collect();
    write_embedding_dir(&dir.join("queries"), &queries).unwrap();
    fs::write(dir.join("profiles.json"), serde_json::to_string_pretty(&published_profiles()).unwrap()).unwrap();

    let mut config = ExperimentConfig::new(
        labels,
        vec![AgentSpec::scripted("gpt", "fixtures/gpt.jsonl"), AgentSpec::scripted("qwen", "fixtures/qwen.jsonl")],
    );
    config.policy = RunPolicy::TrustAwareRag;
    config.index = Some("index".into());
    config.query_embeddings = Some("queries".into());
    config.profiles = Some("profiles.json".into());
    if scripted_arbiter {
        config.orchestrator = Some(AgentSpec::scripted("arbiter", "fixtures/arbiter.jsonl"));
    }
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&config).unwrap()).unwrap();

    let samples = (0..N_IMAGES)
        .map(|i| Sample {
            image_id: image_id(i),
            image_ref: PathBuf::from(format!("images/{}.png", image_id(i))),
            true_label: Some(truth_of(i)),
        })
        .collect();
    Fixture { dir: dir.to_path_buf(), config, samples }
}

/// Every file under `root` with its bytes, keyed by relative path.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
