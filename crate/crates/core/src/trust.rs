//! Calibration and reliability statistics over labeled prediction logs, and
//! the per-agent trust profile assembled from them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AgentPrediction, Stage};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrustError {
    #[error("empty log")]
    EmptyLog,
    #[error("degenerate log: {0}")]
    DegenerateLog(&'static str),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("total confidence mass is zero")]
    ZeroMass,
    #[error("metric `{0}` is undefined")]
    MissingMetric(&'static str),
    #[error("confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("bin count must be >= 1")]
    InvalidBins,
    #[error("threshold {0} outside (0, 1)")]
    InvalidThreshold(f64),
}

/// A (confidence, correctness) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredOutcome {
    pub confidence: f64,
    pub correct: bool,
}

impl ScoredOutcome {
    pub fn new(confidence: f64, correct: bool) -> Result<Self, TrustError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(TrustError::InvalidConfidence(confidence));
        }
        Ok(Self { confidence, correct })
    }
}

/// Joins predictions of one stage against ground truth. Predictions whose
/// image has no truth entry are skipped.
pub fn score_predictions<'a, I>(
    predictions: I,
    truth: &BTreeMap<String, String>,
    stage: Stage,
) -> Vec<ScoredOutcome>
where
    I: IntoIterator<Item = &'a AgentPrediction>,
{
    predictions
        .into_iter()
        .filter(|p| p.stage == stage)
        .filter_map(|p| {
            truth.get(&p.image_id).map(|t| ScoredOutcome {
                confidence: p.confidence,
                correct: *t == p.category,
            })
        })
        .collect()
}

/// 1-based index of the equal-width bin over (0, 1] holding `confidence`.
/// Bin m covers ((m-1)/M, m/M]; zero falls into bin 1.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    let m = bins as f64;
    let mut b = (confidence * m).ceil().clamp(1.0, m) as usize;
    // c*M can land on the wrong side of an edge after rounding
    while b > 1 && confidence <= (b - 1) as f64 / m {
        b -= 1;
    }
    while b < bins && confidence > b as f64 / m {
        b += 1;
    }
    b
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct BinAccumulator {
    pub count: usize,
    pub conf_sum: f64,
    pub correct: usize,
}

pub(crate) fn accumulate_bins(outcomes: &[ScoredOutcome], bins: usize) -> Vec<BinAccumulator> {
    let mut acc = vec![BinAccumulator::default(); bins];
    for o in outcomes {
        let slot = &mut acc[bin_index(o.confidence, bins) - 1];
        slot.count += 1;
        slot.conf_sum += o.confidence;
        slot.correct += o.correct as usize;
    }
    acc
}

/// Expected calibration error over `bins` equal-width bins.
pub fn ece(outcomes: &[ScoredOutcome], bins: usize) -> Result<f64, TrustError> {
    if outcomes.is_empty() {
        return Err(TrustError::EmptyLog);
    }
    if bins == 0 {
        return Err(TrustError::InvalidBins);
    }
    let n = outcomes.len() as f64;
    let total = accumulate_bins(outcomes, bins)
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| {
            let count = b.count as f64;
            let accuracy = b.correct as f64 / count;
            let confidence = b.conf_sum / count;
            count / n * (accuracy - confidence).abs()
        })
        .sum::<f64>();
    Ok(total.clamp(0.0, 1.0))
}

/// Overconfidence statistics at a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcrStats {
    /// `hcw / thc`; `None` when no prediction exceeds the threshold.
    pub ratio: Option<f64>,
    /// High-confidence wrong predictions.
    pub hcw: usize,
    /// Total high-confidence predictions.
    pub thc: usize,
}

/// Overconfidence ratio with a strict `confidence > threshold` cut.
pub fn ocr(outcomes: &[ScoredOutcome], threshold: f64) -> Result<OcrStats, TrustError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(TrustError::InvalidThreshold(threshold));
    }
    let (hcw, thc) = outcomes
        .iter()
        .filter(|o| o.confidence > threshold)
        .fold((0usize, 0usize), |(w, t), o| (w + (!o.correct) as usize, t + 1));
    Ok(ocr_from_counts(hcw, thc))
}

pub fn ocr_from_counts(hcw: usize, thc: usize) -> OcrStats {
    OcrStats {
        ratio: (thc > 0).then(|| hcw as f64 / thc as f64),
        hcw,
        thc,
    }
}

fn mean_confidence<'a>(it: impl Iterator<Item = &'a ScoredOutcome>) -> Option<f64> {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), o| (s + o.confidence, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean confidence on correct predictions minus mean confidence on incorrect
/// ones.
pub fn confidence_gap(outcomes: &[ScoredOutcome]) -> Result<f64, TrustError> {
    let correct = mean_confidence(outcomes.iter().filter(|o| o.correct))
        .ok_or(TrustError::DegenerateLog("no correct outcomes"))?;
    let incorrect = mean_confidence(outcomes.iter().filter(|o| !o.correct))
        .ok_or(TrustError::DegenerateLog("no incorrect outcomes"))?;
    Ok(correct - incorrect)
}

/// Fraction of aligned positions where two prompt variants disagree.
pub fn consistency_gap<S: AsRef<str>>(run1: &[S], run2: &[S]) -> Result<f64, TrustError> {
    if run1.len() != run2.len() {
        return Err(TrustError::LengthMismatch { left: run1.len(), right: run2.len() });
    }
    if run1.is_empty() {
        return Err(TrustError::EmptyLog);
    }
    let differing = run1
        .iter()
        .zip(run2)
        .filter(|(a, b)| a.as_ref() != b.as_ref())
        .count();
    Ok(differing as f64 / run1.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p_value: f64,
}

/// Point-biserial correlation between confidence and correctness, with a
/// two-sided t-test p-value on n-2 degrees of freedom.
pub fn ccc(outcomes: &[ScoredOutcome]) -> Result<Correlation, TrustError> {
    let n = outcomes.len();
    if n < 3 {
        return Err(TrustError::DegenerateLog("need at least 3 outcomes"));
    }
    let nf = n as f64;
    let mean_x = outcomes.iter().map(|o| o.confidence).sum::<f64>() / nf;
    let mean_y = outcomes.iter().filter(|o| o.correct).count() as f64 / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for o in outcomes {
        let dx = o.confidence - mean_x;
        let dy = if o.correct { 1.0 } else { 0.0 } - mean_y;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 {
        return Err(TrustError::DegenerateLog("constant confidence"));
    }
    if syy <= 0.0 {
        return Err(TrustError::DegenerateLog("constant correctness"));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok(Correlation { r, p_value: pearson_p_value(r, n) })
}

/// Two-sided p-value of Pearson's r under H0: rho = 0.
pub fn pearson_p_value(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let denom = 1.0 - r * r;
    if denom <= 0.0 {
        return 0.0;
    }
    let t = r * (df / denom).sqrt();
    student_t_two_sided(t, df)
}

/// P(|T| >= |t|) for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, n = 9
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// I_x(a, b) via the Lentz continued fraction.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Confidence-mass-weighted accuracy: sum of confidence on correct outcomes
/// over total confidence.
pub fn cwa(outcomes: &[ScoredOutcome]) -> Result<f64, TrustError> {
    let (correct, total) = outcomes.iter().fold((0.0, 0.0), |(c, t), o| {
        (if o.correct { c + o.confidence } else { c }, t + o.confidence)
    });
    if total <= 0.0 {
        return Err(TrustError::ZeroMass);
    }
    Ok((correct / total).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrustConfig {
    pub ece_bins: usize,
    pub ocr_threshold: f64,
}

impl Default for TrustConfig {
    fn default() -> Self {
        Self { ece_bins: 10, ocr_threshold: 0.9 }
    }
}

/// Offline calibration summary for one agent. Undefined statistics are
/// `None` and serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustProfile {
    pub agent_id: String,
    pub n: usize,
    pub accuracy: f64,
    pub avg_conf: f64,
    pub conf_correct: Option<f64>,
    pub conf_incorrect: Option<f64>,
    pub confidence_gap: Option<f64>,
    pub consistency_gap: Option<f64>,
    pub ocr: Option<f64>,
    pub hcw: usize,
    pub thc: usize,
    pub ccc: Option<f64>,
    pub ccc_p_value: Option<f64>,
    pub ece: Option<f64>,
    pub cwa: Option<f64>,
}

pub const PROFILE_CSV_HEADER: &str = "agent,acc,avg_conf,conf_corr,conf_incorr,cg,ocr,hcw,thc,ccc,p_val,ece,cwa";

fn fmt4(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_default()
}

impl TrustProfile {
    /// One CSV row in the `PROFILE_CSV_HEADER` column order.
    pub fn csv_row(&self) -> String {
        [
            self.agent_id.clone(),
            fmt4(Some(self.accuracy)),
            fmt4(Some(self.avg_conf)),
            fmt4(self.conf_correct),
            fmt4(self.conf_incorrect),
            fmt4(self.confidence_gap),
            fmt4(self.ocr),
            self.hcw.to_string(),
            self.thc.to_string(),
            fmt4(self.ccc),
            fmt4(self.ccc_p_value),
            fmt4(self.ece),
            fmt4(self.cwa),
        ]
        .join(",")
    }
}

pub fn profiles_csv(profiles: &[TrustProfile]) -> String {
    let mut out = String::from(PROFILE_CSV_HEADER);
    out.push('\n');
    for p in profiles {
        out.push_str(&p.csv_row());
        out.push('\n');
    }
    out
}

/// Fills every profile field it can. Degenerate statistics are stored as
/// `None` and logged, never fabricated.
pub fn build_trust_profile(
    agent_id: &str,
    outcomes: &[ScoredOutcome],
    config: &TrustConfig,
    paired_runs: Option<(&[String], &[String])>,
) -> Result<TrustProfile, TrustError> {
    if outcomes.is_empty() {
        return Err(TrustError::EmptyLog);
    }
    let n = outcomes.len();
    let nf = n as f64;
    let correct = outcomes.iter().filter(|o| o.correct).count();
    let avg_conf = outcomes.iter().map(|o| o.confidence).sum::<f64>() / nf;

    let warn = |metric: &str, err: &TrustError| {
        log::warn!("agent {agent_id}: {metric} undefined ({err})");
    };
    let keep = |metric: &str, r: Result<f64, TrustError>| match r {
        Ok(v) => Some(v),
        Err(e) => {
            warn(metric, &e);
            None
        }
    };

    let conf_correct = mean_confidence(outcomes.iter().filter(|o| o.correct));
    let conf_incorrect = mean_confidence(outcomes.iter().filter(|o| !o.correct));
    let confidence_gap = keep("confidence_gap", confidence_gap(outcomes));
    let consistency_gap = paired_runs.and_then(|(a, b)| keep("consistency_gap", consistency_gap(a, b)));
    let ocr_stats = ocr(outcomes, config.ocr_threshold)?;
    if ocr_stats.ratio.is_none() {
        log::warn!("agent {agent_id}: ocr undefined (no confidence above {})", config.ocr_threshold);
    }
    let corr = match ccc(outcomes) {
        Ok(c) => Some(c),
        Err(e) => {
            warn("ccc", &e);
            None
        }
    };

    Ok(TrustProfile {
        agent_id: agent_id.to_string(),
        n,
        accuracy: correct as f64 / nf,
        avg_conf,
        conf_correct,
        conf_incorrect,
        confidence_gap,
        consistency_gap,
        ocr: ocr_stats.ratio,
        hcw: ocr_stats.hcw,
        thc: ocr_stats.thc,
        ccc: corr.map(|c| c.r),
        ccc_p_value: corr.map(|c| c.p_value),
        ece: keep("ece", ece(outcomes, config.ece_bins)),
        cwa: keep("cwa", cwa(outcomes)),
    })
}

/// Scalar trust in [0, 1]: the mean of 1-ECE, 1-OCR, max(0, CCC) and CWA.
/// An undefined CCC counts as 0.
pub fn trust_score(profile: &TrustProfile) -> Result<f64, TrustError> {
    let ece = profile.ece.ok_or(TrustError::MissingMetric("ece"))?;
    let ocr = profile.ocr.ok_or(TrustError::MissingMetric("ocr"))?;
    let cwa = profile.cwa.ok_or(TrustError::MissingMetric("cwa"))?;
    let ccc = profile.ccc.unwrap_or(0.0).max(0.0);
    Ok(((1.0 - ece) + (1.0 - ocr) + ccc + cwa) / 4.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn outs(v: &[(f64, bool)]) -> Vec<ScoredOutcome> {
        v.iter().map(|&(c, ok)| ScoredOutcome::new(c, ok).unwrap()).collect()
    }

    fn table_profile(acc: f64, ece: f64, ocr: f64, ccc: f64, cwa: f64) -> TrustProfile {
        TrustProfile {
            agent_id: "x".into(),
            n: 512,
            accuracy: acc,
            avg_conf: 0.9,
            conf_correct: None,
            conf_incorrect: None,
            confidence_gap: None,
            consistency_gap: None,
            ocr: Some(ocr),
            hcw: 0,
            thc: 0,
            ccc: Some(ccc),
            ccc_p_value: None,
            ece: Some(ece),
            cwa: Some(cwa),
        }
    }

    #[test]
    fn bin_edges_are_right_closed() {
        assert_eq!(bin_index(0.0, 10), 1);
        assert_eq!(bin_index(0.1, 10), 1);
        assert_eq!(bin_index(0.7, 10), 7);
        assert_eq!(bin_index(0.70001, 10), 8);
        assert_eq!(bin_index(1.0, 10), 10);
        assert_eq!(bin_index(0.95, 10), 10);
        assert_eq!(bin_index(0.3, 1), 1);
        for m in 1..=10 {
            for i in 0..=m {
                let edge = i as f64 / m as f64;
                assert_eq!(bin_index(edge, m), i.max(1), "edge {i}/{m}");
            }
        }
    }

    #[test]
    fn ece_hand_example() {
        let o = outs(&[(0.95, true), (0.95, false), (0.65, true), (0.55, true)]);
        assert!((ece(&o, 10).unwrap() - 0.425).abs() < 1e-12);
    }

    #[test]
    fn ece_calibrated_bin_is_zero() {
        let o = outs(&[(0.75, true), (0.75, true), (0.75, true), (0.75, false)]);
        assert_eq!(ece(&o, 10).unwrap(), 0.0);
        assert_eq!(ece(&[], 10), Err(TrustError::EmptyLog));
        assert_eq!(ece(&o, 0), Err(TrustError::InvalidBins));
    }

    #[test]
    fn ocr_examples() {
        let o = outs(&[(0.95, false), (0.92, true), (0.91, false), (0.85, false)]);
        let s = ocr(&o, 0.9).unwrap();
        assert_eq!((s.hcw, s.thc), (2, 3));
        assert!((s.ratio.unwrap() - 2.0 / 3.0).abs() < 1e-15);

        let low = outs(&[(0.9, false), (0.5, true)]);
        assert_eq!(ocr(&low, 0.9).unwrap(), OcrStats { ratio: None, hcw: 0, thc: 0 });

        let qwen = ocr_from_counts(260, 512).ratio.unwrap();
        assert!((qwen - 0.508).abs() < 5e-4, "{qwen}");
        assert!(ocr(&o, 1.0).is_err());
    }

    #[test]
    fn confidence_gap_examples() {
        let o = outs(&[(0.9, true), (0.7, true), (0.8, false)]);
        assert!(confidence_gap(&o).unwrap().abs() < 1e-15);
        let same = outs(&[(0.6, true), (0.6, false)]);
        assert_eq!(confidence_gap(&same).unwrap(), 0.0);
        let qwen: f64 = 0.950 - 0.941;
        assert!((qwen - 0.009).abs() < 1e-12);
        assert!(matches!(confidence_gap(&outs(&[(0.5, true)])), Err(TrustError::DegenerateLog(_))));
    }

    #[test]
    fn consistency_gap_examples() {
        let a = ["a", "b", "c", "d"];
        assert_eq!(consistency_gap(&a, &a).unwrap(), 0.0);
        assert_eq!(consistency_gap(&a, &["a", "b", "d", "d"]).unwrap(), 0.25);
        assert_eq!(consistency_gap(&a, &["x", "y", "z", "w"]).unwrap(), 1.0);
        assert_eq!(
            consistency_gap(&a, &["a"]),
            Err(TrustError::LengthMismatch { left: 4, right: 1 })
        );
    }

    #[test]
    fn ccc_hand_example() {
        let o = outs(&[(0.9, true), (0.8, false), (0.7, true), (0.6, false)]);
        let c = ccc(&o).unwrap();
        // cov = 0.05/4, sd_x = sqrt(0.05/4), sd_y = 0.5 -> r = 1/sqrt(5)
        assert!((c.r - 1.0 / 5f64.sqrt()).abs() < 1e-12, "{}", c.r);
        assert!(c.p_value > 0.0 && c.p_value < 1.0);
        assert!(ccc(&outs(&[(0.5, true), (0.5, false), (0.5, true)])).is_err());
        assert!(ccc(&outs(&[(0.5, true), (0.6, true), (0.7, true)])).is_err());
    }

    #[test]
    fn p_value_matches_statrs() {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        for &(r, n) in &[(0.126, 512usize), (0.361, 512), (0.4472, 4), (-0.3, 20), (0.05, 100), (0.9, 5)] {
            let df = (n - 2) as f64;
            let t: f64 = r * (df / (1.0 - r * r)).sqrt();
            let dist = StudentsT::new(0.0, 1.0, df).unwrap();
            let want = 2.0 * (1.0 - dist.cdf(t.abs()));
            let got = pearson_p_value(r, n);
            assert!((got - want).abs() < 1e-9, "r={r} n={n}: {got} vs {want}");
        }
        // reported: r = 0.126 over 512 samples, p = 0.0042
        assert!((pearson_p_value(0.126, 512) - 0.0042).abs() < 1e-4);
        assert!(pearson_p_value(0.361, 512) < 1e-4);
    }

    #[test]
    fn cwa_examples() {
        let o = outs(&[(0.9, true), (0.8, false), (0.7, true)]);
        assert!((cwa(&o).unwrap() - 1.6 / 2.4).abs() < 1e-12);
        assert_eq!(cwa(&outs(&[(0.3, true), (0.9, true)])).unwrap(), 1.0);
        assert_eq!(cwa(&outs(&[(0.0, true)])), Err(TrustError::ZeroMass));
        let qwen: f64 = 0.492 * 0.950 / 0.945;
        assert!((qwen - 0.4946).abs() < 1e-4);
        assert!((qwen - 0.495).abs() < 1e-3);
    }

    #[test]
    fn single_outcome_profile() {
        let p = build_trust_profile("a", &outs(&[(0.9, true)]), &TrustConfig::default(), None).unwrap();
        assert_eq!(p.accuracy, 1.0);
        assert_eq!(p.avg_conf, 0.9);
        assert_eq!(p.confidence_gap, None);
        assert_eq!(p.conf_incorrect, None);
        assert_eq!(p.ccc, None);
        assert_eq!(p.ocr, None);
        assert_eq!(p.consistency_gap, None);
    }

    #[test]
    fn perfect_agent_profile() {
        // confidence 1 iff correct, else 0; accuracy 0.8
        let mut v = vec![(1.0, true); 8];
        v.extend([(0.0, false); 2]);
        let p = build_trust_profile("p", &outs(&v), &TrustConfig::default(), None).unwrap();
        assert_eq!(p.ece, Some(0.0));
        assert_eq!(p.ocr, Some(0.0));
        assert_eq!(p.cwa, Some(1.0));
        assert_eq!(p.accuracy, 0.8);
        assert!((p.ccc.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn profile_with_paired_runs() {
        let a: Vec<String> = ["x", "y"].iter().map(|s| s.to_string()).collect();
        let b: Vec<String> = ["x", "z"].iter().map(|s| s.to_string()).collect();
        let o = outs(&[(0.9, true), (0.4, false)]);
        let p = build_trust_profile("a", &o, &TrustConfig::default(), Some((&a, &b))).unwrap();
        assert_eq!(p.consistency_gap, Some(0.5));
    }

    #[test]
    fn trust_score_examples() {
        let qwen = table_profile(0.492, 0.453, 0.508, 0.126, 0.495);
        let gpt = table_profile(0.584, 0.293, 0.416, 0.361, 0.592);
        assert!((trust_score(&qwen).unwrap() - 0.415).abs() < 1e-12);
        assert!((trust_score(&gpt).unwrap() - 0.561).abs() < 1e-12);
        let ideal = table_profile(1.0, 0.0, 0.0, 1.0, 1.0);
        assert_eq!(trust_score(&ideal).unwrap(), 1.0);

        let mut no_ccc = ideal.clone();
        no_ccc.ccc = None;
        assert_eq!(trust_score(&no_ccc).unwrap(), 0.75);
        let mut no_ocr = ideal;
        no_ocr.ocr = None;
        assert_eq!(trust_score(&no_ocr), Err(TrustError::MissingMetric("ocr")));
    }

    #[test]
    fn csv_row_matches_table_layout() {
        let p = TrustProfile {
            agent_id: "qwen".into(),
            n: 512,
            accuracy: 0.492,
            avg_conf: 0.945,
            conf_correct: Some(0.95),
            conf_incorrect: Some(0.941),
            confidence_gap: Some(0.009),
            consistency_gap: None,
            ocr: Some(260.0 / 512.0),
            hcw: 260,
            thc: 512,
            ccc: Some(0.126),
            ccc_p_value: Some(0.0042),
            ece: Some(0.453),
            cwa: Some(0.495),
        };
        assert_eq!(
            p.csv_row(),
            "qwen,0.4920,0.9450,0.9500,0.9410,0.0090,0.5078,260,512,0.1260,0.0042,0.4530,0.4950"
        );
        assert!(profiles_csv(&[p]).starts_with(PROFILE_CSV_HEADER));
    }

    fn outcome_strategy() -> impl Strategy<Value = Vec<ScoredOutcome>> {
        prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..200)
            .prop_map(|v| v.into_iter().map(|(c, ok)| ScoredOutcome { confidence: c, correct: ok }).collect())
    }

    proptest! {
        #[test]
        fn ece_in_unit_interval(o in outcome_strategy(), bins in 1usize..30) {
            let e = ece(&o, bins).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
        }

        #[test]
        fn ocr_integer_identity(o in outcome_strategy(), thr in 0.05f64..0.95) {
            let s = ocr(&o, thr).unwrap();
            prop_assert!(s.hcw <= s.thc && s.thc <= o.len());
            if let Some(r) = s.ratio {
                prop_assert_eq!((r * s.thc as f64).round() as usize, s.hcw);
            }
        }

        #[test]
        fn consistency_gap_symmetric(a in prop::collection::vec("[abc]", 1..30), seed in any::<u64>()) {
            let b: Vec<String> = a.iter().enumerate()
                .map(|(i, s)| if (seed >> (i % 64)) & 1 == 1 { "x".to_string() } else { s.clone() })
                .collect();
            prop_assert_eq!(consistency_gap(&a, &b).unwrap(), consistency_gap(&b, &a).unwrap());
            prop_assert_eq!(consistency_gap(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn ccc_positive_when_separated(
            correct in prop::collection::vec(0.6f64..1.0, 2..30),
            wrong in prop::collection::vec(0.0f64..0.55, 2..30),
        ) {
            let mut o: Vec<_> = correct.iter().map(|&c| ScoredOutcome { confidence: c, correct: true }).collect();
            o.extend(wrong.iter().map(|&c| ScoredOutcome { confidence: c, correct: false }));
            let c = ccc(&o).unwrap();
            prop_assert!(c.r > 0.0);
            prop_assert!((-1.0..=1.0).contains(&c.r));
        }

        #[test]
        fn trust_score_monotone(
            ece0 in 0.0f64..0.9, ocr0 in 0.0f64..0.9, ccc0 in -1.0f64..0.9, cwa0 in 0.0f64..0.9,
            d in 0.001f64..0.1,
        ) {
            let base = table_profile(0.5, ece0, ocr0, ccc0, cwa0);
            let s = trust_score(&base).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            let mut p = base.clone(); p.ece = Some(ece0 + d);
            prop_assert!(trust_score(&p).unwrap() <= s);
            let mut p = base.clone(); p.ocr = Some(ocr0 + d);
            prop_assert!(trust_score(&p).unwrap() <= s);
            let mut p = base.clone(); p.ccc = Some(ccc0 + d);
            prop_assert!(trust_score(&p).unwrap() >= s);
            let mut p = base; p.cwa = Some(cwa0 + d);
            prop_assert!(trust_score(&p).unwrap() >= s);
        }
    }
}
