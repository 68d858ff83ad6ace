//! Clinical report metrics: GREEN ratio, Composite score, per-error-type
//! breakdowns and paired bootstrap significance.
//!
//! External scorers (the GREEN judge, RadGraph, CheXbert, BERTScore) are not
//! run here; their per-sample outputs arrive as plain numbers.

use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bootstrap::{percentile_interval, resampled_means, Resampling};
use crate::error::{Error, Result};

/// The four steerable clinically-significant error types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorType {
    FF,
    MF,
    WL,
    WS,
}

impl ErrorType {
    /// Fixed order; also the argmax tie-break order.
    pub const ALL: [ErrorType; 4] = [ErrorType::FF, ErrorType::MF, ErrorType::WL, ErrorType::WS];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorType::FF => "FF",
            ErrorType::MF => "MF",
            ErrorType::WL => "WL",
            ErrorType::WS => "WS",
        }
    }
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "FF" => Ok(ErrorType::FF),
            "MF" => Ok(ErrorType::MF),
            "WL" => Ok(ErrorType::WL),
            "WS" => Ok(ErrorType::WS),
            other => Err(Error::InvalidConfig(format!("unknown error type {other:?}"))),
        }
    }
}

/// One value per steerable error type, serialized as `{FF, MF, WL, WS}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerType<T> {
    #[serde(rename = "FF")]
    pub ff: T,
    #[serde(rename = "MF")]
    pub mf: T,
    #[serde(rename = "WL")]
    pub wl: T,
    #[serde(rename = "WS")]
    pub ws: T,
}

impl<T> PerType<T> {
    pub fn from_fn(mut f: impl FnMut(ErrorType) -> T) -> Self {
        PerType {
            ff: f(ErrorType::FF),
            mf: f(ErrorType::MF),
            wl: f(ErrorType::WL),
            ws: f(ErrorType::WS),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ErrorType, &T)> {
        ErrorType::ALL.into_iter().map(move |t| (t, &self[t]))
    }
}

impl<T> Index<ErrorType> for PerType<T> {
    type Output = T;

    fn index(&self, t: ErrorType) -> &T {
        match t {
            ErrorType::FF => &self.ff,
            ErrorType::MF => &self.mf,
            ErrorType::WL => &self.wl,
            ErrorType::WS => &self.ws,
        }
    }
}

impl<T> IndexMut<ErrorType> for PerType<T> {
    fn index_mut(&mut self, t: ErrorType) -> &mut T {
        match t {
            ErrorType::FF => &mut self.ff,
            ErrorType::MF => &mut self.mf,
            ErrorType::WL => &mut self.wl,
            ErrorType::WS => &mut self.ws,
        }
    }
}

/// GREEN error tallies for one candidate/reference report pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ErrorCounts {
    #[serde(rename = "M")]
    pub matched: u32,
    #[serde(rename = "FF")]
    pub ff: u32,
    #[serde(rename = "MF")]
    pub mf: u32,
    #[serde(rename = "WL")]
    pub wl: u32,
    #[serde(rename = "WS")]
    pub ws: u32,
    #[serde(rename = "FC", default)]
    pub fc: u32,
    #[serde(rename = "MC", default)]
    pub mc: u32,
}

impl ErrorCounts {
    pub fn get(&self, t: ErrorType) -> u32 {
        match t {
            ErrorType::FF => self.ff,
            ErrorType::MF => self.mf,
            ErrorType::WL => self.wl,
            ErrorType::WS => self.ws,
        }
    }

    pub fn get_mut(&mut self, t: ErrorType) -> &mut u32 {
        match t {
            ErrorType::FF => &mut self.ff,
            ErrorType::MF => &mut self.mf,
            ErrorType::WL => &mut self.wl,
            ErrorType::WS => &mut self.ws,
        }
    }

    /// Sum over all six error categories.
    pub fn total_errors(&self) -> u32 {
        self.ff + self.mf + self.wl + self.ws + self.fc + self.mc
    }

    /// Sum over the four steerable categories only.
    pub fn steerable_errors(&self) -> u32 {
        self.ff + self.mf + self.wl + self.ws
    }
}

/// `M / (M + sum of errors)`, defined as 0 when `M == 0`.
pub fn green_score(c: &ErrorCounts) -> f64 {
    if c.matched == 0 {
        return 0.0;
    }
    let m = c.matched as f64;
    m / (m + c.total_errors() as f64)
}

/// Per-sample metric values on a 0-100 scale.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    #[serde(default)]
    pub green: Option<f64>,
    #[serde(default)]
    pub radgraph: Option<f64>,
    #[serde(default)]
    pub chexbert: Option<f64>,
    #[serde(default)]
    pub bertscore: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bleu4: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rougel: Option<f64>,
    /// Pass-through only; has its own learned scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radcliq: Option<f64>,
}

impl ScoreVector {
    pub fn new(green: f64, radgraph: f64, chexbert: f64, bertscore: f64) -> Self {
        ScoreVector {
            green: Some(green),
            radgraph: Some(radgraph),
            chexbert: Some(chexbert),
            bertscore: Some(bertscore),
            ..Default::default()
        }
    }

    /// Range-checks the components that carry a 0-100 scale.
    pub fn validate(&self) -> Result<()> {
        let bounded = [
            ("green", self.green),
            ("radgraph", self.radgraph),
            ("chexbert", self.chexbert),
            ("bertscore", self.bertscore),
            ("bleu4", self.bleu4),
            ("rougel", self.rougel),
        ];
        for (name, v) in bounded {
            if let Some(v) = v {
                if !(0.0..=100.0).contains(&v) {
                    return Err(Error::OutOfRange(format!("{name} = {v} outside [0, 100]")));
                }
            }
        }
        if let Some(v) = self.radcliq {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("radcliq = {v}")));
            }
        }
        Ok(())
    }
}

pub const COMPOSITE_WEIGHTS: [f64; 4] = [0.4, 0.3, 0.2, 0.1];

/// `0.4 GREEN + 0.3 RadGraph + 0.2 CheXbert + 0.1 BERTScore`.
pub fn composite(s: &ScoreVector) -> Result<f64> {
    let green = s.green.ok_or(Error::MissingComponent("green"))?;
    let radgraph = s.radgraph.ok_or(Error::MissingComponent("radgraph"))?;
    let chexbert = s.chexbert.ok_or(Error::MissingComponent("chexbert"))?;
    let bertscore = s.bertscore.ok_or(Error::MissingComponent("bertscore"))?;
    let [wg, wr, wc, wb] = COMPOSITE_WEIGHTS;
    Ok(wg * green + wr * radgraph + wc * chexbert + wb * bertscore)
}

/// Column totals per error category for two arms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryTotals {
    #[serde(rename = "M")]
    pub matched: i64,
    #[serde(rename = "FF")]
    pub ff: i64,
    #[serde(rename = "MF")]
    pub mf: i64,
    #[serde(rename = "WL")]
    pub wl: i64,
    #[serde(rename = "WS")]
    pub ws: i64,
    #[serde(rename = "FC")]
    pub fc: i64,
    #[serde(rename = "MC")]
    pub mc: i64,
    /// All six significant error categories.
    pub total: i64,
}

impl CategoryTotals {
    fn add(&mut self, c: &ErrorCounts) {
        self.matched += c.matched as i64;
        self.ff += c.ff as i64;
        self.mf += c.mf as i64;
        self.wl += c.wl as i64;
        self.ws += c.ws as i64;
        self.fc += c.fc as i64;
        self.mc += c.mc as i64;
        self.total += c.total_errors() as i64;
    }

    fn minus(&self, o: &CategoryTotals) -> CategoryTotals {
        CategoryTotals {
            matched: self.matched - o.matched,
            ff: self.ff - o.ff,
            mf: self.mf - o.mf,
            wl: self.wl - o.wl,
            ws: self.ws - o.ws,
            fc: self.fc - o.fc,
            mc: self.mc - o.mc,
            total: self.total - o.total,
        }
    }

    pub fn get(&self, t: ErrorType) -> i64 {
        match t {
            ErrorType::FF => self.ff,
            ErrorType::MF => self.mf,
            ErrorType::WL => self.wl,
            ErrorType::WS => self.ws,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeBreakdown {
    pub baseline: CategoryTotals,
    pub steered: CategoryTotals,
    /// steered minus baseline
    pub delta: CategoryTotals,
}

/// Sums each error category over aligned (baseline, steered) pairs.
pub fn per_type_breakdown(pairs: &[(ErrorCounts, ErrorCounts)]) -> TypeBreakdown {
    let mut baseline = CategoryTotals::default();
    let mut steered = CategoryTotals::default();
    for (b, s) in pairs {
        baseline.add(b);
        steered.add(s);
    }
    TypeBreakdown {
        baseline,
        steered,
        delta: steered.minus(&baseline),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// H1: treatment improves on baseline; p = P(resampled mean delta <= 0).
    #[default]
    Greater,
    /// Twice the smaller tail, capped at 1.
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub mean_delta: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub resamples: usize,
}

/// Paired bootstrap on per-sample differences `treat - base`.
///
/// The confidence interval is the percentile interval of the resampled mean
/// deltas at `level` (0.95 for the usual 95% interval).
pub fn paired_bootstrap(
    base: &[f64],
    treat: &[f64],
    scheme: Resampling,
    alternative: Alternative,
    level: f64,
) -> Result<BootstrapResult> {
    if base.len() != treat.len() {
        return Err(Error::LengthMismatch {
            left: base.len(),
            right: treat.len(),
        });
    }
    if base.len() < 2 {
        return Err(Error::TooFewStudies {
            need: 2,
            got: base.len(),
        });
    }
    if let Resampling::Random { resamples: 0, .. } = scheme {
        return Err(Error::InvalidConfig("bootstrap needs at least one resample".into()));
    }
    let deltas: Vec<f64> = treat.iter().zip(base).map(|(t, b)| t - b).collect();
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("per-sample delta".into()));
    }
    let mean_delta = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let means = resampled_means(&deltas, scheme);
    let b = means.len() as f64;
    let at_or_below = means.iter().filter(|&&m| m <= 0.0).count() as f64 / b;
    let p_value = match alternative {
        Alternative::Greater => at_or_below,
        Alternative::TwoSided => {
            let at_or_above = means.iter().filter(|&&m| m >= 0.0).count() as f64 / b;
            (2.0 * at_or_below.min(at_or_above)).min(1.0)
        }
    };
    let (ci_low, ci_high) = percentile_interval(&means, level);
    Ok(BootstrapResult {
        mean_delta,
        p_value,
        ci_low,
        ci_high,
        resamples: means.len(),
    })
}

/// Unigram F1 between two whitespace-tokenized texts, in `[0, 1]`.
/// Used as an optional screening-panel filter.
pub fn word_f1<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    use std::collections::HashMap;
    if candidate.is_empty() || reference.is_empty() {
        return if candidate.is_empty() && reference.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for w in reference {
        *counts.entry(w.as_ref()).or_default() += 1;
    }
    let mut overlap = 0i64;
    for w in candidate {
        if let Some(c) = counts.get_mut(w.as_ref()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / candidate.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}
