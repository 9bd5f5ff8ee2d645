//! Point-based end-to-end spotting evaluation and its transcription-only
//! variant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{eval_distance, PointMode};
use crate::seqcodec::{Prediction, TextInstance};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    #[default]
    Point,
    Npts,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub point_mode: PointMode,
    /// Full-lexicon word list; `None` disables substitution.
    pub lexicon: Option<Vec<String>>,
    pub case_sensitive: bool,
    /// Predictions farther than this from every unclaimed GT claim nothing.
    pub max_distance: Option<f64>,
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if matches!(&self.lexicon, Some(l) if l.is_empty()) {
            return Err(Error::Config("lexicon is empty".into()));
        }
        if matches!(self.max_distance, Some(d) if !(d >= 0.0)) {
            return Err(Error::Config("max_distance must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Levenshtein distance over chars.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + (a[i - 1] != b[j - 1]) as usize;
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Nearest lexicon word by edit distance, lexicographically smallest on ties.
///
/// # Panics
/// If `lexicon` is empty.
pub fn apply_lexicon(transcript: &str, lexicon: &[String]) -> String {
    lexicon
        .iter()
        .min_by(|a, b| edit_distance(transcript, a).cmp(&edit_distance(transcript, b)).then_with(|| a.cmp(b)))
        .expect("nonempty lexicon")
        .clone()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Tp,
    Fp,
    /// Claimed a dont-care region; left out of all counts.
    DontCare,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchEntry {
    pub pred: usize,
    pub gt: Option<usize>,
    pub distance: Option<f64>,
    pub outcome: Outcome,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// In claim order.
    pub matches: Vec<MatchEntry>,
    /// Scored ground truths without a correct claim, whether unclaimed or
    /// claimed by a wrong transcript.
    pub missed: Vec<usize>,
    /// Claims where several unclaimed GTs were equally near; the lowest index won.
    pub ties: usize,
}

fn fold(s: &str, case_sensitive: bool) -> String {
    if case_sensitive {
        s.to_string()
    } else {
        s.to_lowercase()
    }
}

fn greedy(
    preds: &[Prediction],
    gts: &[TextInstance],
    cfg: &EvalConfig,
    distance: impl Fn(&Prediction, &TextInstance) -> Option<f64>,
) -> MatchResult {
    let lexicon: Option<Vec<String>> =
        cfg.lexicon.as_ref().map(|l| l.iter().map(|w| fold(w, cfg.case_sensitive)).collect());
    let text = |p: &Prediction| {
        let t = fold(&p.transcript, cfg.case_sensitive);
        match &lexicon {
            Some(l) => apply_lexicon(&t, l),
            None => t,
        }
    };
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut claimed = vec![false; gts.len()];
    let mut found = vec![false; gts.len()];
    let mut r = MatchResult::default();
    for pi in order {
        let p = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        let mut tied = false;
        for (gi, g) in gts.iter().enumerate() {
            if claimed[gi] {
                continue;
            }
            let Some(d) = distance(p, g) else { continue };
            if cfg.max_distance.is_some_and(|m| d > m) {
                continue;
            }
            match best {
                Some((_, bd)) if d == bd => tied = true,
                Some((_, bd)) if d > bd => {}
                _ => {
                    best = Some((gi, d));
                    tied = false;
                }
            }
        }
        let entry = match best {
            None => {
                r.fp += 1;
                MatchEntry { pred: pi, gt: None, distance: None, outcome: Outcome::Fp }
            }
            Some((gi, d)) => {
                claimed[gi] = true;
                r.ties += tied as usize;
                let outcome = if gts[gi].dont_care {
                    Outcome::DontCare
                } else if text(p) == fold(&gts[gi].transcript, cfg.case_sensitive) {
                    r.tp += 1;
                    found[gi] = true;
                    Outcome::Tp
                } else {
                    r.fp += 1;
                    Outcome::Fp
                };
                MatchEntry { pred: pi, gt: Some(gi), distance: Some(d), outcome }
            }
        };
        r.matches.push(entry);
    }
    r.missed = (0..gts.len()).filter(|&i| !found[i] && !gts[i].dont_care).collect();
    r.fn_ = r.missed.len();
    r
}

/// Confidence-ordered claiming of the nearest unclaimed ground truth under
/// the configured point mode. Predictions without a point claim nothing.
pub fn match_points(preds: &[Prediction], gts: &[TextInstance], cfg: &EvalConfig) -> MatchResult {
    greedy(preds, gts, cfg, |p, g| p.point.map(|pt| eval_distance(pt, &g.polygon, cfg.point_mode)))
}

/// Confidence-ordered claiming of the unclaimed ground truth with the
/// smallest transcript edit distance.
pub fn match_npts(preds: &[Prediction], gts: &[TextInstance], cfg: &EvalConfig) -> MatchResult {
    greedy(preds, gts, cfg, |p, g| {
        Some(edit_distance(&fold(&p.transcript, cfg.case_sensitive), &fold(&g.transcript, cfg.case_sensitive)) as f64)
    })
}

pub fn match_image(preds: &[Prediction], gts: &[TextInstance], cfg: &EvalConfig) -> MatchResult {
    match cfg.mode {
        EvalMode::Point => match_points(preds, gts, cfg),
        EvalMode::Npts => match_npts(preds, gts, cfg),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub hmean: f64,
}

impl Scores {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let hmean = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { precision, recall, hmean }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub image: String,
    #[serde(flatten)]
    pub result: MatchResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub hmean: f64,
    pub ties: usize,
    pub images: Vec<ImageReport>,
}

/// One image to score: name, predictions, ground truth.
pub type EvalItem<'a> = (&'a str, &'a [Prediction], &'a [TextInstance]);

pub fn evaluate(items: &[EvalItem<'_>], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let images: Vec<ImageReport> = items
        .iter()
        .map(|&(name, preds, gts)| ImageReport { image: name.to_string(), result: match_image(preds, gts, cfg) })
        .collect();
    let tp = images.iter().map(|i| i.result.tp).sum();
    let fp = images.iter().map(|i| i.result.fp).sum();
    let fn_ = images.iter().map(|i| i.result.fn_).sum();
    let ties = images.iter().map(|i| i.result.ties).sum();
    let s = Scores::from_counts(tp, fp, fn_);
    Ok(EvalReport { tp, fp, fn_, precision: s.precision, recall: s.recall, hmean: s.hmean, ties, images })
}
