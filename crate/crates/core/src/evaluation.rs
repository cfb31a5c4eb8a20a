//! Offline analysis of finished runs: classification metrics, confusion
//! matrices, calibration curves, disagreement and re-evaluation audits,
//! latency statistics, and the report bundle written next to a run log.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AgentPrediction, ExperimentConfig, FinalDecision, LabelSet, Stage};
use crate::orchestrator::ReEvalTrace;
use crate::runlog::{read_truth, LogError, RunLog, RUN_LOG_FILE, TRUTH_FILE};
use crate::trust::{accumulate_bins, build_trust_profile, ece, profiles_csv, ScoredOutcome, TrustConfig, TrustError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty log")]
    EmptyLog,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("log has no incorrect predictions")]
    NoErrors,
    #[error("alignment error: {0}")]
    AlignmentError(String),
    #[error("missing log: {0}")]
    MissingLog(String),
    #[error(transparent)]
    Trust(#[from] TrustError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad run directory: {0}")]
    BadRun(String),
}

impl From<LogError> for EvalError {
    fn from(e: LogError) -> Self {
        match e {
            LogError::Missing(p) => EvalError::MissingLog(p),
            LogError::Io(e) => EvalError::Io(e),
            other => EvalError::BadRun(other.to_string()),
        }
    }
}

/// Rows are true labels, columns predicted labels, both in label-set order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("true_label,{}\n", self.labels.join(","));
        for (label, row) in self.labels.iter().zip(&self.counts) {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            let _ = writeln!(out, "{label},{}", cells.join(","));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub precision_weighted: f64,
    pub recall_weighted: f64,
    pub f1_weighted: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub confusion: ConfusionMatrix,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Standard multi-class metrics. Aggregates cover the labels that occur in
/// either list; a class never predicted gets precision 0 with a warning.
pub fn classification_metrics<S: AsRef<str>>(
    predicted: &[S],
    truth: &[S],
    labels: &LabelSet,
) -> Result<MetricsReport, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::LengthMismatch { left: predicted.len(), right: truth.len() });
    }
    if predicted.is_empty() {
        return Err(EvalError::EmptyLog);
    }
    let k = labels.len();
    let idx = |l: &str| labels.index_of(l).ok_or_else(|| EvalError::UnknownLabel(l.to_string()));
    let mut counts = vec![vec![0u64; k]; k];
    for (p, t) in predicted.iter().zip(truth) {
        counts[idx(t.as_ref())?][idx(p.as_ref())?] += 1;
    }
    let n = predicted.len();
    let mut warnings = Vec::new();
    let mut per_class = Vec::with_capacity(k);
    for (i, label) in labels.labels().iter().enumerate() {
        let tp = counts[i][i] as f64;
        let predicted_support: u64 = (0..k).map(|r| counts[r][i]).sum();
        let support: u64 = counts[i].iter().sum();
        let precision = if predicted_support == 0 {
            if support > 0 {
                warnings.push(format!("class `{label}` never predicted; precision set to 0"));
            }
            0.0
        } else {
            tp / predicted_support as f64
        };
        let recall = if support == 0 { 0.0 } else { tp / support as f64 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        per_class.push(ClassMetrics { label: label.clone(), precision, recall, f1, support });
    }

    let present: Vec<&ClassMetrics> = per_class
        .iter()
        .enumerate()
        .filter(|(i, c)| c.support > 0 || (0..k).any(|r| counts[r][*i] > 0))
        .map(|(_, c)| c)
        .collect();
    let m = present.len() as f64;
    let macro_avg = |f: fn(&ClassMetrics) -> f64| present.iter().map(|c| f(c)).sum::<f64>() / m;
    let weighted_avg = |f: fn(&ClassMetrics) -> f64| {
        present.iter().map(|c| f(c) * c.support as f64).sum::<f64>() / n as f64
    };

    let confusion = ConfusionMatrix { labels: labels.labels().to_vec(), counts };
    Ok(MetricsReport {
        n,
        accuracy: confusion.trace() as f64 / n as f64,
        precision_weighted: weighted_avg(|c| c.precision),
        recall_weighted: weighted_avg(|c| c.recall),
        f1_weighted: weighted_avg(|c| c.f1),
        precision_macro: macro_avg(|c| c.precision),
        recall_macro: macro_avg(|c| c.recall),
        f1_macro: macro_avg(|c| c.f1),
        per_class,
        confusion,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
    /// `None` for empty bins.
    pub mean_conf: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub n: usize,
    pub bins: Vec<CalibrationBin>,
}

impl CalibrationCurve {
    pub fn occupied(&self) -> impl Iterator<Item = &CalibrationBin> {
        self.bins.iter().filter(|b| b.count > 0)
    }

    /// Support-weighted gap over the emitted bins.
    pub fn weighted_gap(&self) -> f64 {
        let n = self.n as f64;
        self.occupied()
            .map(|b| b.count as f64 / n * (b.accuracy.unwrap_or(0.0) - b.mean_conf.unwrap_or(0.0)).abs())
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count,mean_conf,accuracy\n");
        for b in &self.bins {
            let f = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_default();
            let _ = writeln!(out, "{:.4},{:.4},{},{},{}", b.bin_lo, b.bin_hi, b.count, f(b.mean_conf), f(b.accuracy));
        }
        out
    }
}

/// Reliability-diagram points over `bins` equal-width bins of (0, 1].
pub fn calibration_curve(outcomes: &[ScoredOutcome], bins: usize) -> Result<CalibrationCurve, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::EmptyLog);
    }
    if bins == 0 {
        return Err(TrustError::InvalidBins.into());
    }
    let m = bins as f64;
    let bins = accumulate_bins(outcomes, bins)
        .into_iter()
        .enumerate()
        .map(|(i, acc)| CalibrationBin {
            bin_lo: i as f64 / m,
            bin_hi: (i + 1) as f64 / m,
            count: acc.count,
            mean_conf: (acc.count > 0).then(|| acc.conf_sum / acc.count as f64),
            accuracy: (acc.count > 0).then(|| acc.correct as f64 / acc.count as f64),
        })
        .collect();
    Ok(CalibrationCurve { n: outcomes.len(), bins })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverconfidencePoint {
    pub mean_conf_on_wrong: f64,
    pub macro_f1: f64,
}

pub fn overconfidence_point(outcomes: &[ScoredOutcome], metrics: &MetricsReport) -> Result<OverconfidencePoint, EvalError> {
    let wrong: Vec<f64> = outcomes.iter().filter(|o| !o.correct).map(|o| o.confidence).collect();
    if wrong.is_empty() {
        return Err(EvalError::NoErrors);
    }
    Ok(OverconfidencePoint {
        mean_conf_on_wrong: wrong.iter().sum::<f64>() / wrong.len() as f64,
        macro_f1: metrics.f1_macro,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentDisagreement {
    /// Images with a final decision; the denominator of every rate.
    pub evaluated: usize,
    pub disagreements: usize,
    pub disagreement_rate: f64,
    pub orchestrator_correct: usize,
    /// Share of disagreements the orchestrator got right.
    pub orchestrator_correct_rate: Option<f64>,
}

/// Latest-stage prediction per (agent, image).
pub fn latest_predictions(predictions: &[AgentPrediction]) -> BTreeMap<(String, String), &AgentPrediction> {
    let mut latest: BTreeMap<(String, String), &AgentPrediction> = BTreeMap::new();
    for p in predictions {
        let key = (p.agent_id.clone(), p.image_id.clone());
        match latest.get(&key) {
            Some(prev) if prev.stage >= p.stage => {}
            _ => {
                latest.insert(key, p);
            }
        }
    }
    latest
}

/// Compares the final decision with each agent's latest answer.
pub fn disagreement_analysis(
    predictions: &[AgentPrediction],
    decisions: &[FinalDecision],
    truth: &BTreeMap<String, String>,
) -> Result<BTreeMap<String, AgentDisagreement>, EvalError> {
    let latest = latest_predictions(predictions);
    let agents: BTreeSet<&str> = predictions.iter().map(|p| p.agent_id.as_str()).collect();
    let n = decisions.len();
    let mut out = BTreeMap::new();
    for agent in agents {
        let (mut disagreements, mut correct) = (0usize, 0usize);
        for d in decisions {
            let t = truth
                .get(&d.image_id)
                .ok_or_else(|| EvalError::AlignmentError(format!("no truth for image `{}`", d.image_id)))?;
            let Some(p) = latest.get(&(agent.to_string(), d.image_id.clone())) else {
                continue;
            };
            if p.category != d.category {
                disagreements += 1;
                if d.category == *t {
                    correct += 1;
                }
            }
        }
        out.insert(
            agent.to_string(),
            AgentDisagreement {
                evaluated: n,
                disagreements,
                disagreement_rate: if n == 0 { 0.0 } else { disagreements as f64 / n as f64 },
                orchestrator_correct: correct,
                orchestrator_correct_rate: (disagreements > 0).then(|| correct as f64 / disagreements as f64),
            },
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReevalBehavior {
    pub evaluated: usize,
    pub reevaluated: usize,
    pub reaffirmations: usize,
    pub reaffirmation_rate: f64,
    /// Reaffirmations whose (unchanged) answer is correct.
    pub reaffirmed_correct: usize,
    pub revisions: usize,
    /// Initially correct, revised to incorrect.
    pub overcorrections: usize,
    pub overcorrection_rate: f64,
    /// Initially incorrect, revised to correct.
    pub corrections: usize,
}

/// Per-agent reaffirm/revise behaviour under re-evaluation. Rates use the
/// number of traces as denominator.
pub fn reeval_behavior_analysis(
    traces: &[ReEvalTrace],
    truth: &BTreeMap<String, String>,
) -> BTreeMap<String, ReevalBehavior> {
    let n = traces.len();
    let mut out: BTreeMap<String, ReevalBehavior> = BTreeMap::new();
    for trace in traces {
        let t = truth.get(&trace.image_id);
        for a in &trace.agents {
            let entry = out.entry(a.agent_id.clone()).or_default();
            let Some(revised) = &a.revised else { continue };
            entry.reevaluated += 1;
            let was_right = t == Some(&a.initial.category);
            let now_right = t == Some(&revised.category);
            if a.changed {
                entry.revisions += 1;
                if was_right && !now_right {
                    entry.overcorrections += 1;
                }
                if !was_right && now_right {
                    entry.corrections += 1;
                }
            } else {
                entry.reaffirmations += 1;
                if now_right {
                    entry.reaffirmed_correct += 1;
                }
            }
        }
    }
    for entry in out.values_mut() {
        entry.evaluated = n;
        if n > 0 {
            entry.reaffirmation_rate = entry.reaffirmations as f64 / n as f64;
            entry.overcorrection_rate = entry.overcorrections as f64 / n as f64;
        }
    }
    out
}

pub const LATENCY_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub agent_id: String,
    pub stage: Stage,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub hist_lo: f64,
    pub hist_hi: f64,
    pub hist_counts: Vec<usize>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Quartiles and a fixed-width histogram of latency per (agent, stage).
pub fn latency_stats(predictions: &[AgentPrediction]) -> Result<Vec<LatencySummary>, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::EmptyLog);
    }
    let mut groups: BTreeMap<(String, Stage), Vec<f64>> = BTreeMap::new();
    for p in predictions {
        groups.entry((p.agent_id.clone(), p.stage)).or_default().push(p.latency_ms);
    }
    Ok(groups
        .into_iter()
        .map(|((agent_id, stage), mut xs)| {
            xs.sort_by(f64::total_cmp);
            let (min, max) = (xs[0], xs[xs.len() - 1]);
            let width = (max - min) / LATENCY_BINS as f64;
            let mut hist_counts = vec![0usize; LATENCY_BINS];
            for &x in &xs {
                let b = if width > 0.0 { (((x - min) / width) as usize).min(LATENCY_BINS - 1) } else { 0 };
                hist_counts[b] += 1;
            }
            LatencySummary {
                agent_id,
                stage,
                n: xs.len(),
                min,
                q1: quantile_sorted(&xs, 0.25),
                median: quantile_sorted(&xs, 0.5),
                q3: quantile_sorted(&xs, 0.75),
                max,
                hist_lo: min,
                hist_hi: max,
                hist_counts,
            }
        })
        .collect())
}

pub fn latency_csv(rows: &[LatencySummary]) -> String {
    let mut out = String::from("agent,stage,n,min,q1,median,q3,max,hist_lo,hist_hi,hist_counts\n");
    for r in rows {
        let counts: Vec<String> = r.hist_counts.iter().map(usize::to_string).collect();
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
            r.agent_id,
            r.stage,
            r.n,
            r.min,
            r.q1,
            r.median,
            r.q3,
            r.max,
            r.hist_lo,
            r.hist_hi,
            counts.join(";")
        );
    }
    out
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub decided: usize,
    pub undecided: usize,
    pub reeval_triggered: usize,
    pub orchestrator: Option<MetricsReport>,
    pub agents: BTreeMap<String, BTreeMap<String, MetricsReport>>,
    pub overconfidence: BTreeMap<String, OverconfidencePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementBundle {
    pub orchestrator_vs_agent: BTreeMap<String, AgentDisagreement>,
    pub reeval_behavior: BTreeMap<String, ReevalBehavior>,
}

pub const REPORT_FILES: [&str; 4] = ["metrics.json", "trust_profiles.csv", "disagreements.json", "latency.csv"];

fn outcomes_for<'a>(
    preds: impl Iterator<Item = &'a AgentPrediction>,
    truth: &BTreeMap<String, String>,
) -> (Vec<String>, Vec<String>, Vec<ScoredOutcome>) {
    let mut rows: Vec<(&str, &str, f64)> = preds
        .filter(|p| truth.contains_key(&p.image_id))
        .map(|p| (p.image_id.as_str(), p.category.as_str(), p.confidence))
        .collect();
    rows.sort_by(|a, b| a.0.cmp(b.0));
    let predicted = rows.iter().map(|r| r.1.to_string()).collect();
    let actual: Vec<String> = rows.iter().map(|r| truth[r.0].clone()).collect();
    let outcomes = rows
        .iter()
        .zip(&actual)
        .map(|(r, t)| ScoredOutcome { confidence: r.2, correct: r.1 == t })
        .collect();
    (predicted, actual, outcomes)
}

fn safe_name(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EvalError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| EvalError::BadRun(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Regenerates the report bundle of a run directory from its logs. Pure in
/// the logs: the same inputs always produce the same bytes.
pub fn emit_report(run_dir: &Path) -> Result<MetricsBundle, EvalError> {
    let log_path = run_dir.join(RUN_LOG_FILE);
    if !log_path.exists() {
        return Err(EvalError::MissingLog(log_path.display().to_string()));
    }
    let log = RunLog::read(&log_path)?;
    if log.decisions.is_empty() && log.predictions.is_empty() {
        return Err(EvalError::MissingLog(format!("{} holds no records", log_path.display())));
    }
    let truth = read_truth(&run_dir.join(TRUTH_FILE))?;
    let config_path = run_dir.join("config.json");
    let config: ExperimentConfig = serde_json::from_str(
        &fs::read_to_string(&config_path).map_err(|_| EvalError::MissingLog(config_path.display().to_string()))?,
    )
    .map_err(|e| EvalError::BadRun(format!("config.json: {e}")))?;
    let labels = &config.labels;
    let trust_cfg = TrustConfig { ece_bins: config.ece_bins, ocr_threshold: config.ocr_threshold };

    let mut bundle = MetricsBundle {
        decided: log.decisions.len(),
        undecided: log.traces.iter().filter(|t| t.undecided).count(),
        reeval_triggered: log.traces.iter().filter(|t| t.triggered).count(),
        orchestrator: None,
        agents: BTreeMap::new(),
        overconfidence: BTreeMap::new(),
    };

    let emit_series = |name: &str, predicted: &[String], actual: &[String], outcomes: &[ScoredOutcome]| -> Result<Option<MetricsReport>, EvalError> {
        if predicted.is_empty() {
            return Ok(None);
        }
        let metrics = classification_metrics(predicted, actual, labels)?;
        fs::write(run_dir.join(format!("confusion_{}.csv", safe_name(name))), metrics.confusion.to_csv())?;
        let curve = calibration_curve(outcomes, config.ece_bins)?;
        fs::write(run_dir.join(format!("calibration_{}.csv", safe_name(name))), curve.to_csv())?;
        Ok(Some(metrics))
    };

    // orchestrator decisions
    let decision_rows: Vec<AgentPrediction> = log
        .decisions
        .iter()
        .map(|d| AgentPrediction {
            image_id: d.image_id.clone(),
            agent_id: "orchestrator".into(),
            stage: Stage::Initial,
            category: d.category.clone(),
            confidence: d.confidence,
            justification: String::new(),
            latency_ms: 0.0,
            cost_usd: 0.0,
            attempts: 1,
            ts: 0,
        })
        .collect();
    let (p, a, o) = outcomes_for(decision_rows.iter(), &truth);
    bundle.orchestrator = emit_series("orchestrator", &p, &a, &o)?;
    if let Some(m) = &bundle.orchestrator {
        if let Ok(point) = overconfidence_point(&o, m) {
            bundle.overconfidence.insert("orchestrator".into(), point);
        }
    }

    let mut profiles = Vec::new();
    for agent in log.agent_ids() {
        let mut per_stage = BTreeMap::new();
        for stage in [Stage::Initial, Stage::Reeval] {
            let (p, a, o) = outcomes_for(
                log.predictions.iter().filter(|x| x.agent_id == agent && x.stage == stage),
                &truth,
            );
            let series = match stage {
                Stage::Initial => agent.clone(),
                Stage::Reeval => format!("{agent}-reeval"),
            };
            if let Some(m) = emit_series(&series, &p, &a, &o)? {
                if stage == Stage::Initial {
                    if let Ok(point) = overconfidence_point(&o, &m) {
                        bundle.overconfidence.insert(agent.clone(), point);
                    }
                    profiles.push(build_trust_profile(&agent, &o, &trust_cfg, None)?);
                }
                per_stage.insert(stage.to_string(), m);
            }
        }
        bundle.agents.insert(agent, per_stage);
    }

    fs::write(run_dir.join("trust_profiles.csv"), profiles_csv(&profiles))?;
    write_json(&run_dir.join("metrics.json"), &bundle)?;
    let disagreements = DisagreementBundle {
        orchestrator_vs_agent: disagreement_analysis(&log.predictions, &log.decisions, &truth)?,
        reeval_behavior: reeval_behavior_analysis(&log.traces, &truth),
    };
    write_json(&run_dir.join("disagreements.json"), &disagreements)?;
    if !log.predictions.is_empty() {
        fs::write(run_dir.join("latency.csv"), latency_csv(&latency_stats(&log.predictions)?))?;
    } else {
        fs::write(run_dir.join("latency.csv"), latency_csv(&[]))?;
    }
    Ok(bundle)
}

/// ECE of the orchestrator's decisions, for quick checks.
pub fn decision_ece(decisions: &[FinalDecision], truth: &BTreeMap<String, String>, bins: usize) -> Result<f64, EvalError> {
    let outcomes: Vec<ScoredOutcome> = decisions
        .iter()
        .filter_map(|d| truth.get(&d.image_id).map(|t| ScoredOutcome { confidence: d.confidence, correct: *t == d.category }))
        .collect();
    Ok(ece(&outcomes, bins)?)
}
