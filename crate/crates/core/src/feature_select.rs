//! Feature identification: Pearson-correlation ranking, the activation-gap
//! prefilter, and the single-feature causal screen that yields per-error-type
//! deltas.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation_store::{quartile_split, SortDirection};
use crate::clinical_metrics::{ErrorCounts, ErrorType, PerType};
use crate::error::{Error, Result};
use crate::steering::{residual_update, LayerEdits, LayerHook, SteerableGenerator};
use crate::topk_sae::SaeModel;

/// Default number of features kept by [`prefilter`].
pub const DEFAULT_PREFILTER_KEEP: usize = 500;

// ---------------------------------------------------------------------------
// Study-level feature magnitudes
// ---------------------------------------------------------------------------

/// Mean Top-K-masked code over a study's tokens.
pub fn study_feature_magnitudes(sae: &SaeModel, tokens: &[Vec<f64>]) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::EmptyStream);
    }
    let mut acc = vec![0.0; sae.dict_size()];
    for h in tokens {
        for (j, v) in sae.encode_sparse(h)? {
            acc[j] += v;
        }
    }
    let n = tokens.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Correlation ranking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRanking {
    /// Pearson r per feature.
    pub r: Vec<f64>,
    /// Features with r > 0, most positive first.
    pub suppress: Vec<usize>,
    /// Features with r < 0, most negative first.
    pub boost: Vec<usize>,
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

/// Ranks features by the correlation between per-study magnitude
/// (`activations[study][feature]`) and per-study error count.
pub fn correlation_rank(activations: &[Vec<f64>], errors: &[f64]) -> Result<CorrelationRanking> {
    if activations.len() != errors.len() {
        return Err(Error::LengthMismatch {
            left: activations.len(),
            right: errors.len(),
        });
    }
    if activations.len() < 3 {
        return Err(Error::TooFewStudies {
            need: 3,
            got: activations.len(),
        });
    }
    let dict = activations[0].len();
    if let Some(row) = activations.iter().find(|r| r.len() != dict) {
        return Err(Error::DimensionMismatch {
            expected: dict,
            got: row.len(),
        });
    }
    let r: Vec<f64> = (0..dict)
        .map(|j| {
            let col: Vec<f64> = activations.iter().map(|row| row[j]).collect();
            pearson(&col, errors)
        })
        .collect();
    let mut suppress: Vec<usize> = (0..dict).filter(|&j| r[j] > 0.0).collect();
    suppress.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
    let mut boost: Vec<usize> = (0..dict).filter(|&j| r[j] < 0.0).collect();
    boost.sort_by(|&a, &b| r[a].total_cmp(&r[b]).then(a.cmp(&b)));
    Ok(CorrelationRanking { r, suppress, boost })
}

// ---------------------------------------------------------------------------
// Prefilter
// ---------------------------------------------------------------------------

/// Per-feature |mean over top error quartile - mean over bottom quartile|.
pub fn activation_gaps(
    study_ids: &[String],
    activations: &[Vec<f64>],
    errors: &[f64],
) -> Result<Vec<f64>> {
    if study_ids.len() != activations.len() || study_ids.len() != errors.len() {
        return Err(Error::LengthMismatch {
            left: study_ids.len(),
            right: activations.len().min(errors.len()),
        });
    }
    let scores: BTreeMap<String, f64> = study_ids.iter().cloned().zip(errors.iter().copied()).collect();
    if scores.len() != study_ids.len() {
        return Err(Error::InvalidConfig("duplicate study ids".into()));
    }
    let quartiles = quartile_split(&scores, SortDirection::Descending)?;
    let row_of: BTreeMap<&str, &Vec<f64>> = study_ids
        .iter()
        .map(String::as_str)
        .zip(activations)
        .collect();
    let dict = activations[0].len();
    let mean_over = |ids: &[String]| -> Vec<f64> {
        let mut m = vec![0.0; dict];
        for id in ids {
            m.iter_mut().zip(row_of[id.as_str()]).for_each(|(a, b)| *a += b);
        }
        m.iter_mut().for_each(|a| *a /= ids.len() as f64);
        m
    };
    let top = mean_over(&quartiles[0]);
    let bottom = mean_over(&quartiles[3]);
    Ok(top.iter().zip(&bottom).map(|(a, b)| (a - b).abs()).collect())
}

/// Keeps the `keep` features with the largest activation gap between the
/// high-error and low-error quartiles; lower index wins ties.
pub fn prefilter(
    study_ids: &[String],
    activations: &[Vec<f64>],
    errors: &[f64],
    keep: usize,
) -> Result<Vec<usize>> {
    let dict = activations.first().map_or(0, Vec::len);
    if keep > dict {
        return Err(Error::InvalidConfig(format!(
            "prefilter keep = {keep} exceeds dictionary size {dict}"
        )));
    }
    let gaps = activation_gaps(study_ids, activations, errors)?;
    let mut idx: Vec<usize> = (0..gaps.len()).collect();
    idx.sort_by(|&a, &b| gaps[b].total_cmp(&gaps[a]).then(a.cmp(&b)));
    idx.truncate(keep);
    Ok(idx)
}

// ---------------------------------------------------------------------------
// Panel composition
// ---------------------------------------------------------------------------

/// Draws a screening panel of `n` studies with roughly equal counts from each
/// quality quartile (`quality`: higher is better). Remainder slots go to the
/// worst quartile first; a short quartile passes its deficit to the next.
pub fn compose_panel(quality: &BTreeMap<String, f64>, n: usize, seed: u64) -> Result<Vec<String>> {
    if n > quality.len() {
        return Err(Error::InfeasibleQuota(format!(
            "panel of {n} from {} studies",
            quality.len()
        )));
    }
    let mut quartiles = quartile_split(quality, SortDirection::Ascending)?;
    let mut want: Vec<usize> = (0..4).map(|q| n / 4 + usize::from(q < n % 4)).collect();
    for q in 0..4 {
        let short = want[q].saturating_sub(quartiles[q].len());
        want[q] -= short;
        // deficit flows to the next quartile with room, wrapping around
        let mut carry = short;
        for step in 1..4 {
            if carry == 0 {
                break;
            }
            let r = (q + step) % 4;
            let room = quartiles[r].len().saturating_sub(want[r]);
            let take = room.min(carry);
            want[r] += take;
            carry -= take;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for (q, members) in quartiles.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        out.extend(members.iter().take(want[q]).cloned());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Causal screen
// ---------------------------------------------------------------------------

/// Maps a decode and its study to GREEN-style error counts.
pub trait ErrorOracle<G: SteerableGenerator>: Sync {
    fn counts(&self, report: &G::Report, study: &G::Study) -> Result<ErrorCounts>;

    /// Word-level F1 of the decode against the reference, if the oracle can
    /// compute one. Used only by the optional panel filter.
    fn word_f1(&self, _report: &G::Report, _study: &G::Study) -> Option<f64> {
        None
    }

    /// Whether [`ErrorOracle::counts`] may be called from several threads.
    fn is_concurrent(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum AblationMode {
    /// Zero the feature's code.
    Zero,
    /// Multiply the feature's code by `factor`.
    Amplify { factor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenConfig {
    pub layer: usize,
    pub mode: AblationMode,
    /// Drop panel studies whose baseline word F1 is below this threshold.
    #[serde(default)]
    pub min_word_f1: Option<f64>,
}

/// Hook that applies a single-feature edit at one layer via the residual rule
/// with `alpha = 1`.
struct SingleFeatureHook<'a> {
    sae: &'a SaeModel,
    layer: usize,
    edits: LayerEdits,
    beta: f64,
}

impl LayerHook for SingleFeatureHook<'_> {
    fn on_hidden(&mut self, layer: usize, _token: usize, hidden: &mut [f64]) -> Result<()> {
        if layer == self.layer {
            let s = residual_update(self.sae, hidden, &self.edits, 1.0, self.beta)?;
            hidden.copy_from_slice(&s.output);
        }
        Ok(())
    }
}

/// Per-feature mean error deltas from single-feature ablations.
///
/// JSON: `{layer, N, rows: {"<idx>": [dFF, dMF, dWL, dWS]}}`, plus a
/// `failed` map of candidates that could not be screened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalDeltaTable {
    pub layer: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub rows: BTreeMap<usize, [f64; 4]>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub failed: BTreeMap<usize, String>,
}

impl CausalDeltaTable {
    pub fn validate(&self, dict_size: Option<usize>) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("screen size N must be positive".into()));
        }
        for (&j, row) in &self.rows {
            if let Some(d) = dict_size {
                if j >= d {
                    return Err(Error::IndexOutOfRange { index: j, bound: d });
                }
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("delta row for feature {j}")));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let t: CausalDeltaTable = serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        t.validate(None)?;
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

fn steerable_deltas(ablated: &ErrorCounts, base: &ErrorCounts) -> [f64; 4] {
    ErrorType::ALL.map(|t| ablated.get(t) as f64 - base.get(t) as f64)
}

/// Screens each candidate by decoding the whole panel with that one feature
/// edited at `config.layer`, and records the mean per-type error change
/// against the shared baseline decodes.
///
/// A candidate whose decode or scoring fails is recorded in `failed` and the
/// screen continues. Candidates run in parallel when the oracle allows it;
/// rows are keyed by feature index, so the table does not depend on
/// scheduling.
pub fn causal_screen<G, O>(
    sae: &SaeModel,
    panel: &[G::Study],
    generator: &G,
    oracle: &O,
    candidates: &[usize],
    config: &ScreenConfig,
) -> Result<CausalDeltaTable>
where
    G: SteerableGenerator,
    O: ErrorOracle<G>,
{
    if !generator.hook_layers().contains(&config.layer) {
        return Err(Error::HookLayerAbsent(config.layer));
    }
    if let Some(&j) = candidates.iter().find(|&&j| j >= sae.dict_size()) {
        return Err(Error::IndexOutOfRange {
            index: j,
            bound: sae.dict_size(),
        });
    }
    // Baselines once, reused for every candidate.
    let mut baselines = Vec::with_capacity(panel.len());
    for study in panel {
        let report = generator.generate(study, &mut crate::steering::NoHook)?;
        let counts = oracle.counts(&report, study)?;
        if let Some(th) = config.min_word_f1 {
            match oracle.word_f1(&report, study) {
                Some(f1) if f1 < th => continue,
                Some(_) => {}
                None => {
                    return Err(Error::InvalidConfig(
                        "word-F1 panel filter requested but the oracle cannot compute it".into(),
                    ))
                }
            }
        }
        baselines.push((study, counts));
    }
    if baselines.is_empty() {
        return Err(Error::EmptyStream);
    }

    let screen_one = |j: usize| -> std::result::Result<[f64; 4], String> {
        let mut sum = [0.0; 4];
        for (study, base) in &baselines {
            let (edits, beta) = single_edit(config.mode, j);
            let mut hook = SingleFeatureHook {
                sae,
                layer: config.layer,
                edits,
                beta,
            };
            let report = generator
                .generate(study, &mut hook)
                .map_err(|e| format!("decode failed: {e}"))?;
            let counts = oracle
                .counts(&report, study)
                .map_err(|e| format!("oracle failed: {e}"))?;
            let d = steerable_deltas(&counts, base);
            for (s, v) in sum.iter_mut().zip(d) {
                *s += v;
            }
        }
        let n = baselines.len() as f64;
        Ok(sum.map(|s| s / n))
    };

    let results: Vec<(usize, std::result::Result<[f64; 4], String>)> = if oracle.is_concurrent() {
        candidates.par_iter().map(|&j| (j, screen_one(j))).collect()
    } else {
        candidates.iter().map(|&j| (j, screen_one(j))).collect()
    };
    let mut rows = BTreeMap::new();
    let mut failed = BTreeMap::new();
    for (j, r) in results {
        match r {
            Ok(row) => {
                rows.insert(j, row);
            }
            Err(reason) => {
                log::warn!("candidate {j} failed: {reason}");
                failed.insert(j, reason);
            }
        }
    }
    Ok(CausalDeltaTable {
        layer: config.layer,
        n: baselines.len(),
        rows,
        failed,
    })
}

fn single_edit(mode: AblationMode, j: usize) -> (LayerEdits, f64) {
    match mode {
        AblationMode::Zero => (
            LayerEdits {
                suppress: vec![j],
                boost: vec![],
            },
            0.0,
        ),
        AblationMode::Amplify { factor } => (
            LayerEdits {
                suppress: vec![],
                boost: vec![j],
            },
            factor - 1.0,
        ),
    }
}

// ---------------------------------------------------------------------------
// Ranked lists
// ---------------------------------------------------------------------------

/// Per-type suppress (delta < 0) and boost (delta > 0) lists ordered by
/// |delta|, lower index first among ties.
///
/// JSON: `{layer, suppress: {FF, MF, WL, WS}, boost: {FF, MF, WL, WS}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedFeatureLists {
    pub layer: usize,
    pub suppress: PerType<Vec<usize>>,
    pub boost: PerType<Vec<usize>>,
}

impl RankedFeatureLists {
    /// Checks sign consistency against `table` and the absence of duplicates.
    pub fn validate_against(&self, table: &CausalDeltaTable) -> Result<()> {
        for (sign, lists) in [(-1.0, &self.suppress), (1.0, &self.boost)] {
            for (t, list) in lists.iter() {
                let mut seen = std::collections::BTreeSet::new();
                for &j in list {
                    if !seen.insert(j) {
                        return Err(Error::InvalidConfig(format!("feature {j} listed twice for {t}")));
                    }
                    let row = table.rows.get(&j).ok_or(Error::MissingRow(j))?;
                    if row[t.index()] * sign <= 0.0 {
                        return Err(Error::InvalidConfig(format!(
                            "feature {j} has the wrong sign for {t}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

pub fn build_ranked_lists(table: &CausalDeltaTable) -> RankedFeatureLists {
    let ranked = |t: ErrorType, sign: f64| -> Vec<usize> {
        let mut v: Vec<(usize, f64)> = table
            .rows
            .iter()
            .map(|(&j, row)| (j, row[t.index()]))
            .filter(|&(_, d)| d * sign > 0.0)
            .collect();
        v.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
        v.into_iter().map(|(j, _)| j).collect()
    };
    RankedFeatureLists {
        layer: table.layer,
        suppress: PerType::from_fn(|t| ranked(t, -1.0)),
        boost: PerType::from_fn(|t| ranked(t, 1.0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(usize, [f64; 4])]) -> CausalDeltaTable {
        CausalDeltaTable {
            layer: 16,
            n: 10,
            rows: rows.iter().copied().collect(),
            failed: BTreeMap::new(),
        }
    }

    #[test]
    fn pearson_cases() {
        let acts = vec![vec![1.0, 5.0, 1.0], vec![2.0, 5.0, 2.0], vec![3.0, 5.0, 3.0]];
        let up = correlation_rank(&acts, &[1.0, 2.0, 3.0]).unwrap();
        assert!((up.r[0] - 1.0).abs() < 1e-12);
        assert_eq!(up.r[1], 0.0);
        let down = correlation_rank(&acts, &[3.0, 2.0, 1.0]).unwrap();
        assert!((down.r[0] + 1.0).abs() < 1e-12);
        assert_eq!(down.boost, vec![0, 2]);
        assert!(down.suppress.is_empty());
        assert!(matches!(correlation_rank(&acts, &[1.0]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn prefilter_orders_by_gap() {
        let ids: Vec<String> = (0..8).map(|i| format!("s{i}")).collect();
        let errors = [9.0, 8.0, 7.0, 6.0, 3.0, 2.0, 1.0, 0.0];
        // feature 0: active (1.0) only in the two highest-error studies
        // feature 1: identical everywhere
        // feature 2: small gap
        let acts: Vec<Vec<f64>> = (0..8)
            .map(|i| vec![if i < 2 { 1.0 } else { 0.0 }, 0.7, if i < 2 { 0.3 } else { 0.1 }])
            .collect();
        let gaps = activation_gaps(&ids, &acts, &errors).unwrap();
        assert_eq!(gaps[0], 1.0);
        assert_eq!(gaps[1], 0.0);
        assert_eq!(prefilter(&ids, &acts, &errors, 3).unwrap(), vec![0, 2, 1]);
        assert!(prefilter(&ids, &acts, &errors, 4).is_err());
    }

    #[test]
    fn ranked_lists_by_magnitude() {
        let t = table(&[(1, [-0.3, 0.0, 0.0, 0.0]), (2, [-0.1, 0.0, 0.0, 0.0])]);
        let l = build_ranked_lists(&t);
        assert_eq!(l.suppress.ff, vec![1, 2]);
        assert!(l.boost.ff.is_empty());
        l.validate_against(&t).unwrap();
    }

    #[test]
    fn one_feature_in_two_lists() {
        let t = table(&[(1925, [0.0, 0.37, -0.08, 0.0])]);
        let l = build_ranked_lists(&t);
        assert_eq!(l.boost.mf, vec![1925]);
        assert_eq!(l.suppress.wl, vec![1925]);
    }

    #[test]
    fn zero_table_gives_empty_lists() {
        let l = build_ranked_lists(&table(&[(0, [0.0; 4]), (5, [0.0; 4])]));
        for t in ErrorType::ALL {
            assert!(l.suppress[t].is_empty() && l.boost[t].is_empty());
        }
    }

    #[test]
    fn table_json_shape() {
        let t = table(&[(12, [-0.5, 0.25, 0.0, 0.0])]);
        let v = serde_json::to_value(&t).unwrap();
        assert_eq!(v["N"], 10);
        assert_eq!(v["rows"]["12"], serde_json::json!([-0.5, 0.25, 0.0, 0.0]));
        assert!(v.get("failed").is_none());
        let back: CausalDeltaTable = serde_json::from_value(v).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn panel_mixes_quartiles() {
        let q: BTreeMap<String, f64> = (0..40).map(|i| (format!("s{i:02}"), i as f64)).collect();
        let p = compose_panel(&q, 10, 3).unwrap();
        assert_eq!(p.len(), 10);
        let worst = p.iter().filter(|s| q[*s] < 10.0).count();
        let best = p.iter().filter(|s| q[*s] >= 30.0).count();
        assert_eq!(worst, 3);
        assert_eq!(best, 2);
        assert_eq!(p, compose_panel(&q, 10, 3).unwrap());
    }
}
