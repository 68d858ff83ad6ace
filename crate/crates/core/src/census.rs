//! Cross-model functional overlap of causal features.
//!
//! Feature indices are never compared across models. Each (model, layer,
//! direction) is reduced to two basis-free 4-vectors over the error types:
//! a signature (mean causal delta over a consensus set) and a categorical
//! profile (which direction-consistent error type dominates each member).
//! Models are then compared by signature cosine and by weighted Jaccard
//! (Ruzicka) similarity of profiles, averaged over layers with percentile
//! bootstrap intervals.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::bootstrap::{mean_ci, PercentileCi, Resampling};
use crate::clinical_metrics::{paired_bootstrap, Alternative, BootstrapResult, PerType};
use crate::error::{Error, Result};
use crate::feature_select::{CausalDeltaTable, RankedFeatureLists};

pub const DEFAULT_CONSENSUS_SIZE: usize = 100;

/// Below this many layers the layer bootstrap is flagged as coarse.
pub const COARSE_LAYER_COUNT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Suppress,
    Boost,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Suppress, Direction::Boost];

    pub fn sign(self) -> f64 {
        match self {
            Direction::Suppress => -1.0,
            Direction::Boost => 1.0,
        }
    }

    pub fn lists(self, lists: &RankedFeatureLists) -> &PerType<Vec<usize>> {
        match self {
            Direction::Suppress => &lists.suppress,
            Direction::Boost => &lists.boost,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusSet {
    pub model: String,
    pub layer: usize,
    pub direction: Direction,
    pub features: Vec<usize>,
}

/// Round-robin merge FF -> MF -> WL -> WS over rank positions: round `r`
/// visits the rank-`r` entry of each list and keeps it unless an earlier
/// visit already placed it. Exhausted lists are skipped; output is truncated
/// at `n`.
pub fn consensus_merge(lists: &PerType<Vec<usize>>, n: usize) -> Vec<usize> {
    let depth = lists.iter().map(|(_, l)| l.len()).max().unwrap_or(0);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for r in 0..depth {
        for (_, list) in lists.iter() {
            if out.len() >= n {
                return out;
            }
            if let Some(&f) = list.get(r) {
                if seen.insert(f) {
                    out.push(f);
                }
            }
        }
    }
    out
}

impl ConsensusSet {
    pub fn from_lists(
        model: impl Into<String>,
        lists: &RankedFeatureLists,
        direction: Direction,
        n: usize,
    ) -> Self {
        ConsensusSet {
            model: model.into(),
            layer: lists.layer,
            direction,
            features: consensus_merge(direction.lists(lists), n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusSummary {
    pub signature: [f64; 4],
    pub profile: [f64; 4],
    /// Members with at least one direction-consistent component.
    pub valid: usize,
    pub size: usize,
}

/// Signature (mean delta over members) and categorical profile of a
/// consensus set. A member's dominant type is the largest-|delta| component
/// whose sign matches the direction, ties going to the earlier type.
pub fn summarize(
    features: &[usize],
    table: &CausalDeltaTable,
    direction: Direction,
) -> Result<CensusSummary> {
    let sign = direction.sign();
    let mut sum = [0.0; 4];
    let mut hits = [0usize; 4];
    let mut valid = 0;
    for &f in features {
        let row = table.rows.get(&f).ok_or(Error::MissingRow(f))?;
        for (s, v) in sum.iter_mut().zip(row) {
            *s += v;
        }
        let mut best: Option<usize> = None;
        for t in 0..4 {
            if row[t] * sign > 0.0 && best.is_none_or(|b| row[t].abs() > row[b].abs()) {
                best = Some(t);
            }
        }
        if let Some(b) = best {
            hits[b] += 1;
            valid += 1;
        }
    }
    let signature = if features.is_empty() {
        [0.0; 4]
    } else {
        sum.map(|s| s / features.len() as f64)
    };
    let profile = if valid == 0 {
        [0.0; 4]
    } else {
        hits.map(|h| h as f64 / valid as f64)
    };
    Ok(CensusSummary {
        signature,
        profile,
        valid,
        size: features.len(),
    })
}

pub fn signature_cosine(a: &[f64; 4], b: &[f64; 4]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Ruzicka similarity `sum min / sum max` of two non-negative profiles.
pub fn weighted_jaccard(a: &[f64; 4], b: &[f64; 4]) -> Result<f64> {
    if a.iter().chain(b).any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::OutOfRange("profiles must be finite and non-negative".into()));
    }
    let (mut lo, mut hi) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        lo += x.min(*y);
        hi += x.max(*y);
    }
    if hi == 0.0 {
        return Err(Error::BothZero);
    }
    Ok(lo / hi)
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// Per-layer summaries of one model in one direction.
pub type LayerSummaries = BTreeMap<usize, CensusSummary>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarity {
    pub layer: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub jaccard: f64,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub direction: Direction,
    pub layers: Vec<LayerSimilarity>,
    pub jaccard: PercentileCi,
    pub cosine: PercentileCi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusReport {
    pub model_a: String,
    pub model_b: String,
    pub directions: Vec<DirectionReport>,
    /// Paired bootstrap of boost minus suppress layer values, when both
    /// directions are present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub boost_minus_suppress_jaccard: Option<BootstrapResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub boost_minus_suppress_cosine: Option<BootstrapResult>,
    pub warnings: Vec<String>,
}

/// Compares one direction of two models layer by layer.
pub fn compare_direction(
    direction: Direction,
    a: &LayerSummaries,
    b: &LayerSummaries,
    scheme: Resampling,
    level: f64,
) -> Result<DirectionReport> {
    let la: Vec<usize> = a.keys().copied().collect();
    let lb: Vec<usize> = b.keys().copied().collect();
    if la != lb {
        return Err(Error::LayerMismatch(format!("{la:?} vs {lb:?}")));
    }
    if la.is_empty() {
        return Err(Error::LayerMismatch("no layers".into()));
    }
    let mut layers = Vec::with_capacity(la.len());
    for l in la {
        let (sa, sb) = (&a[&l], &b[&l]);
        layers.push(LayerSimilarity {
            layer: l,
            n_a: sa.size,
            n_b: sb.size,
            jaccard: weighted_jaccard(&sa.profile, &sb.profile)?,
            cosine: signature_cosine(&sa.signature, &sb.signature)?,
        });
    }
    let jac: Vec<f64> = layers.iter().map(|s| s.jaccard).collect();
    let cos: Vec<f64> = layers.iter().map(|s| s.cosine).collect();
    Ok(DirectionReport {
        direction,
        jaccard: mean_ci(&jac, scheme, level),
        cosine: mean_ci(&cos, scheme, level),
        layers,
    })
}

/// Full two-model census. `a` and `b` map each direction to per-layer
/// summaries; both models must cover the same layers.
pub fn census_report(
    model_a: &str,
    model_b: &str,
    a: &BTreeMap<Direction, LayerSummaries>,
    b: &BTreeMap<Direction, LayerSummaries>,
    scheme: Resampling,
    level: f64,
) -> Result<CensusReport> {
    let mut warnings = Vec::new();
    let mut directions = Vec::new();
    for dir in Direction::BOTH {
        match (a.get(&dir), b.get(&dir)) {
            (Some(sa), Some(sb)) => {
                let r = compare_direction(dir, sa, sb, scheme, level)?;
                if r.layers.len() < COARSE_LAYER_COUNT
                    && !warnings.iter().any(|w: &String| w.starts_with("layer bootstrap"))
                {
                    let msg = format!(
                        "layer bootstrap over {} values is coarse; intervals are indicative only",
                        r.layers.len()
                    );
                    log::warn!("{msg}");
                    warnings.push(msg);
                }
                directions.push(r);
            }
            (None, None) => {}
            _ => return Err(Error::LayerMismatch(format!("{dir:?} present for only one model"))),
        }
    }
    let paired = |pick: fn(&LayerSimilarity) -> f64| -> Result<Option<BootstrapResult>> {
        let sup = directions.iter().find(|d| d.direction == Direction::Suppress);
        let boo = directions.iter().find(|d| d.direction == Direction::Boost);
        match (sup, boo) {
            (Some(s), Some(b)) if s.layers.len() >= 2 => {
                let sv: Vec<f64> = s.layers.iter().map(pick).collect();
                let bv: Vec<f64> = b.layers.iter().map(pick).collect();
                Ok(Some(paired_bootstrap(&sv, &bv, scheme, Alternative::Greater, level)?))
            }
            _ => Ok(None),
        }
    };
    let boost_minus_suppress_jaccard = paired(|s| s.jaccard)?;
    let boost_minus_suppress_cosine = paired(|s| s.cosine)?;
    Ok(CensusReport {
        model_a: model_a.to_string(),
        model_b: model_b.to_string(),
        directions,
        boost_minus_suppress_jaccard,
        boost_minus_suppress_cosine,
        warnings,
    })
}

/// Builds per-direction, per-layer summaries for one model from its delta
/// tables.
pub fn summarize_model(
    model: &str,
    tables: &BTreeMap<usize, CausalDeltaTable>,
    n: usize,
) -> Result<BTreeMap<Direction, LayerSummaries>> {
    let mut out: BTreeMap<Direction, LayerSummaries> = BTreeMap::new();
    for (&layer, table) in tables {
        let lists = crate::feature_select::build_ranked_lists(table);
        for dir in Direction::BOTH {
            let set = ConsensusSet::from_lists(model, &lists, dir, n);
            out.entry(dir)
                .or_default()
                .insert(layer, summarize(&set.features, table, dir)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn per_type(ff: &[usize], mf: &[usize], wl: &[usize], ws: &[usize]) -> PerType<Vec<usize>> {
        PerType {
            ff: ff.to_vec(),
            mf: mf.to_vec(),
            wl: wl.to_vec(),
            ws: ws.to_vec(),
        }
    }

    fn table(rows: &[(usize, [f64; 4])]) -> CausalDeltaTable {
        CausalDeltaTable {
            layer: 8,
            n: 4,
            rows: rows.iter().copied().collect(),
            failed: Default::default(),
        }
    }

    #[test]
    fn round_robin_example() {
        let l = per_type(&[1, 2, 3], &[4, 2, 5], &[1, 6], &[7]);
        assert_eq!(consensus_merge(&l, 10), vec![1, 4, 7, 2, 6, 3, 5]);
        assert_eq!(consensus_merge(&l, 3), vec![1, 4, 7]);
    }

    #[test]
    fn single_list_prefix_and_empty() {
        let l = per_type(&[], &[9, 8, 7, 6], &[], &[]);
        assert_eq!(consensus_merge(&l, 2), vec![9, 8]);
        assert!(consensus_merge(&per_type(&[], &[], &[], &[]), 5).is_empty());
    }

    #[test]
    fn summary_simple() {
        let t = table(&[(0, [-0.2, 0.0, 0.0, 0.0]), (1, [-0.4, 0.0, 0.0, 0.0])]);
        let s = summarize(&[0, 1], &t, Direction::Suppress).unwrap();
        assert!((s.signature[0] + 0.3).abs() < 1e-15);
        assert_eq!(s.profile, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn inconsistent_member_counts_in_signature_only() {
        let t = table(&[(0, [-0.2, 0.0, 0.0, 0.0]), (1, [0.4, 0.0, 0.0, 0.0])]);
        let s = summarize(&[0, 1], &t, Direction::Suppress).unwrap();
        assert_eq!(s.valid, 1);
        assert!((s.signature[0] - 0.1).abs() < 1e-15);
        assert_eq!(s.profile, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn profile_picks_largest_consistent() {
        let t = table(&[(0, [-0.1, 0.3, 0.0, 0.0]), (1, [0.2, -0.05, -0.2, 0.0])]);
        let s = summarize(&[0, 1], &t, Direction::Suppress).unwrap();
        assert_eq!(s.profile, [0.5, 0.0, 0.5, 0.0]);
        assert_eq!(s.valid, 2);
    }

    #[test]
    fn missing_row_errors() {
        assert!(matches!(
            summarize(&[3], &table(&[]), Direction::Boost),
            Err(Error::MissingRow(3))
        ));
    }

    #[test]
    fn cosine_cases() {
        let a = [1.0, 2.0, 0.0, -1.0];
        assert!((signature_cosine(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((signature_cosine(&a, &a.map(|x| -x)).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(signature_cosine(&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(signature_cosine(&a, &[0.0; 4]), Err(Error::ZeroVector)));
    }

    #[test]
    fn jaccard_cases() {
        let p = [0.5, 0.5, 0.0, 0.0];
        assert_eq!(weighted_jaccard(&p, &p).unwrap(), 1.0);
        assert_eq!(weighted_jaccard(&p, &[0.0, 0.0, 0.5, 0.5]).unwrap(), 0.0);
        assert!(matches!(weighted_jaccard(&[0.0; 4], &[0.0; 4]), Err(Error::BothZero)));
    }

    #[test]
    fn layer_mismatch() {
        let s = CensusSummary {
            signature: [1.0, 0.0, 0.0, 0.0],
            profile: [1.0, 0.0, 0.0, 0.0],
            valid: 1,
            size: 1,
        };
        let a: LayerSummaries = [(8, s.clone()), (16, s.clone())].into_iter().collect();
        let b: LayerSummaries = [(8, s.clone())].into_iter().collect();
        assert!(matches!(
            compare_direction(Direction::Boost, &a, &b, Resampling::Exhaustive, 0.95),
            Err(Error::LayerMismatch(_))
        ));
    }
}
