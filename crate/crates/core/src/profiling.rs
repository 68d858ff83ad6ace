//! Where features fire inside generated reports.
//!
//! Profiles use raw encoder pre-activations (no Top-K mask), so a feature's
//! footprint is visible even on tokens where it loses the Top-K race. A token
//! counts as active when its pre-activation exceeds the threshold.
//!
//! Normalised decode position is `t / (L - 1)` for a report of `L` tokens
//! (0 for single-token reports). Positions are kept as exact integer ratios
//! so histogram bins and the late-mass fraction never suffer rounding.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation_store::ActivationShard;
use crate::error::{Error, Result};
use crate::topk_sae::SaeModel;

pub const DEFAULT_THRESHOLD: f64 = 2.0;

/// Characters kept on each side of the activating token.
pub const CONTEXT_HALF_WIDTH: usize = 50;

/// Smallest repeated word n-gram that marks a context as a repetition.
pub const REPETITION_NGRAM: usize = 3;

/// One decoded report: its tokens in emission order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub study_id: String,
    pub tokens: Vec<String>,
}

impl ReportRecord {
    /// Reads one record per line, skipping blank lines.
    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<ReportRecord>> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| Error::Schema {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })
            })
            .collect()
    }

    pub fn save_jsonl(records: &[ReportRecord], path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for r in records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Exact normalised position `t / span` (span = L - 1, or 0 for L = 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Position {
    t: u64,
    span: u64,
}

impl Position {
    fn value(self) -> f64 {
        if self.span == 0 {
            0.0
        } else {
            self.t as f64 / self.span as f64
        }
    }

    fn cmp_value(&self, o: &Position) -> Ordering {
        // t1/s1 vs t2/s2, with span 0 meaning position 0.
        let (a, b) = match (self.span, o.span) {
            (0, 0) => return Ordering::Equal,
            (0, _) => (0u128, o.t as u128),
            (_, 0) => (self.t as u128, 0u128),
            (s1, s2) => (self.t as u128 * s2 as u128, o.t as u128 * s1 as u128),
        };
        a.cmp(&b)
    }

    fn bin(self) -> usize {
        if self.span == 0 {
            0
        } else {
            ((4 * self.t) / self.span).min(3) as usize
        }
    }

    fn is_late(self) -> bool {
        self.span != 0 && 2 * self.t >= self.span
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveToken {
    pub study_id: String,
    pub token_position: u32,
    /// Normalised decode position in [0, 1].
    pub position: f64,
    pub activation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureProfile {
    pub feature: usize,
    pub active_count: usize,
    pub distinct_studies: usize,
    pub mean_activation: f64,
    pub median_position: f64,
    pub frac_late: f64,
    pub histogram: [usize; 4],
    pub inactive: bool,
    /// Active tokens ordered by (study_id, token_position).
    pub tokens: Vec<ActiveToken>,
}

/// Profiles `features` over the activation stream.
///
/// Every shard record must have a report for its study and a position inside
/// that report; otherwise the streams are misaligned.
pub fn profile_features(
    sae: &SaeModel,
    shards: &[ActivationShard],
    reports: &[ReportRecord],
    features: &[usize],
    threshold: f64,
) -> Result<Vec<FeatureProfile>> {
    if let Some(&j) = features.iter().find(|&&j| j >= sae.dict_size()) {
        return Err(Error::IndexOutOfRange {
            index: j,
            bound: sae.dict_size(),
        });
    }
    let lengths: HashMap<&str, usize> = reports
        .iter()
        .map(|r| (r.study_id.as_str(), r.tokens.len()))
        .collect();
    if lengths.len() != reports.len() {
        return Err(Error::Misaligned("duplicate study in reports".into()));
    }

    let records: Vec<_> = shards.iter().flat_map(|s| s.records()).collect();
    for r in &records {
        let len = *lengths
            .get(r.study_id.as_str())
            .ok_or_else(|| Error::Misaligned(format!("no report for study {}", r.study_id)))?;
        if r.token_position as usize >= len {
            return Err(Error::Misaligned(format!(
                "study {} position {} outside report of length {len}",
                r.study_id, r.token_position
            )));
        }
    }

    // Pre-activations of the requested features, one row per record.
    let rows: Vec<Vec<f64>> = records
        .par_iter()
        .map(|r| {
            let h: Vec<f64> = r.vector.iter().map(|&x| x as f64).collect();
            let pre = sae.pre_activations(&h)?;
            Ok(features.iter().map(|&j| pre[j]).collect())
        })
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(features.len());
    for (fi, &feature) in features.iter().enumerate() {
        let mut hits: Vec<(&str, u32, Position, f64)> = records
            .iter()
            .zip(&rows)
            .filter(|(_, row)| row[fi] > threshold)
            .map(|(r, row)| {
                let len = lengths[r.study_id.as_str()] as u64;
                let pos = Position {
                    t: r.token_position as u64,
                    span: len - 1,
                };
                (r.study_id.as_str(), r.token_position, pos, row[fi])
            })
            .collect();
        // Canonical order so sums do not depend on shard order.
        hits.sort_by(|a, b| a.0.cmp(b.0).then(a.1.cmp(&b.1)));
        out.push(summarise(feature, &hits));
    }
    Ok(out)
}

/// `(a + b) / 2` with a single rounding.
fn midpoint(a: Position, b: Position) -> f64 {
    match (a.span, b.span) {
        (0, 0) => 0.0,
        (0, _) => b.t as f64 / (2 * b.span) as f64,
        (_, 0) => a.t as f64 / (2 * a.span) as f64,
        (sa, sb) => {
            let num = a.t as u128 * sb as u128 + b.t as u128 * sa as u128;
            num as f64 / (2 * sa as u128 * sb as u128) as f64
        }
    }
}

fn summarise(feature: usize, hits: &[(&str, u32, Position, f64)]) -> FeatureProfile {
    let n = hits.len();
    let mut histogram = [0usize; 4];
    let mut late = 0usize;
    let mut sum = 0.0;
    let mut studies = BTreeSet::new();
    for &(s, _, pos, a) in hits {
        histogram[pos.bin()] += 1;
        late += pos.is_late() as usize;
        sum += a;
        studies.insert(s);
    }
    let mut positions: Vec<Position> = hits.iter().map(|h| h.2).collect();
    positions.sort_by(Position::cmp_value);
    let median_position = match n {
        0 => 0.0,
        _ if n % 2 == 1 => positions[n / 2].value(),
        _ => midpoint(positions[n / 2 - 1], positions[n / 2]),
    };
    FeatureProfile {
        feature,
        active_count: n,
        distinct_studies: studies.len(),
        mean_activation: if n == 0 { 0.0 } else { sum / n as f64 },
        median_position,
        frac_late: if n == 0 { 0.0 } else { late as f64 / n as f64 },
        histogram,
        inactive: n == 0,
        tokens: hits
            .iter()
            .map(|&(s, t, pos, a)| ActiveToken {
                study_id: s.to_string(),
                token_position: t,
                position: pos.value(),
                activation: a,
            })
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Contexts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationContext {
    pub feature: usize,
    pub study_id: String,
    pub token_position: u32,
    pub activation: f64,
    pub text: String,
    pub repetition: bool,
}

/// Character window of `CONTEXT_HALF_WIDTH` on each side of token `t`, with
/// the report detokenised by joining tokens on single spaces.
pub fn context_window(tokens: &[String], t: usize) -> String {
    let mut start = 0usize;
    for tok in &tokens[..t] {
        start += tok.chars().count() + 1;
    }
    let end = start + tokens[t].chars().count();
    let text = tokens.join(" ");
    let total = text.chars().count();
    let lo = start.saturating_sub(CONTEXT_HALF_WIDTH);
    let hi = (end + CONTEXT_HALF_WIDTH).min(total);
    text.chars().skip(lo).take(hi - lo).collect()
}

/// True when some word n-gram (n >= 3) occurs at least twice in `text`.
pub fn has_repetition(text: &str) -> bool {
    let words: Vec<&str> = text.split_whitespace().collect();
    let n = REPETITION_NGRAM;
    if words.len() < 2 * n {
        return false;
    }
    let mut seen = BTreeSet::new();
    words.windows(n).any(|w| !seen.insert(w))
}

/// Globally top-`k` active tokens per profile, largest activation first,
/// ties broken by (study_id, token_position).
pub fn top_contexts(
    profiles: &[FeatureProfile],
    reports: &[ReportRecord],
    k: usize,
) -> Result<BTreeMap<usize, Vec<ActivationContext>>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let by_study: HashMap<&str, &ReportRecord> =
        reports.iter().map(|r| (r.study_id.as_str(), r)).collect();
    let mut out = BTreeMap::new();
    for p in profiles {
        let mut ranked: Vec<&ActiveToken> = p.tokens.iter().collect();
        ranked.sort_by(|a, b| {
            b.activation
                .total_cmp(&a.activation)
                .then_with(|| a.study_id.cmp(&b.study_id))
                .then(a.token_position.cmp(&b.token_position))
        });
        let mut ctx = Vec::new();
        for tok in ranked.into_iter().take(k) {
            let report = by_study
                .get(tok.study_id.as_str())
                .ok_or_else(|| Error::Misaligned(format!("no report for study {}", tok.study_id)))?;
            let text = context_window(&report.tokens, tok.token_position as usize);
            ctx.push(ActivationContext {
                feature: p.feature,
                study_id: tok.study_id.clone(),
                token_position: tok.token_position,
                activation: tok.activation,
                repetition: has_repetition(&text),
                text,
            });
        }
        out.insert(p.feature, ctx);
    }
    Ok(out)
}

/// One row per feature: index, active count, studies, mean activation, p50,
/// late fraction, quartile bins and the number of repetition contexts.
pub fn profiles_tsv(
    profiles: &[FeatureProfile],
    contexts: &BTreeMap<usize, Vec<ActivationContext>>,
) -> String {
    let mut s = String::from("feature\tactive\tstudies\tmean_act\tp50\tfrac_late\tq1\tq2\tq3\tq4\trep\n");
    for p in profiles {
        let rep = contexts
            .get(&p.feature)
            .map_or(0, |c| c.iter().filter(|c| c.repetition).count());
        let [q1, q2, q3, q4] = p.histogram;
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{q1}\t{q2}\t{q3}\t{q4}\t{rep}",
            p.feature, p.active_count, p.distinct_studies, p.mean_activation, p.median_position, p.frac_late
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation_store::ActivationRecord;

    /// Identity-like SAE on d = 2: feature j reads coordinate j.
    fn probe_sae() -> SaeModel {
        SaeModel::from_parts(
            2,
            2,
            1,
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0],
        )
        .unwrap()
    }

    fn report(id: &str, n: usize) -> ReportRecord {
        ReportRecord {
            study_id: id.into(),
            tokens: (0..n).map(|i| format!("w{i}")).collect(),
        }
    }

    fn shard(studies: &[(&str, usize)], f: impl Fn(usize, usize) -> [f32; 2]) -> ActivationShard {
        let mut recs = Vec::new();
        for &(id, n) in studies {
            for t in 0..n {
                recs.push(ActivationRecord::new(id, t as u32, f(t, n).to_vec()));
            }
        }
        ActivationShard::new(16, recs).unwrap()
    }

    #[test]
    fn final_token_feature() {
        let studies = [("a", 5), ("b", 9), ("c", 2)];
        let s = shard(&studies, |t, n| if t + 1 == n { [3.0, 0.0] } else { [0.0, 0.0] });
        let reports: Vec<_> = studies.iter().map(|&(id, n)| report(id, n)).collect();
        let p = &profile_features(&probe_sae(), &[s], &reports, &[0, 1], 2.0).unwrap();
        assert_eq!(p[0].median_position, 1.0);
        assert_eq!(p[0].frac_late, 1.0);
        assert_eq!(p[0].distinct_studies, 3);
        assert!(p[1].inactive);
        assert_eq!(p[1].active_count, 0);
    }

    #[test]
    fn uniform_quartiles() {
        let s = shard(&[("a", 100)], |_, _| [2.5, 0.0]);
        let p = &profile_features(&probe_sae(), &[s], &[report("a", 100)], &[0], 2.0).unwrap()[0];
        assert_eq!(p.histogram, [25, 25, 25, 25]);
        assert_eq!(p.frac_late, 0.5);
        assert_eq!(p.median_position, 0.5);
    }

    #[test]
    fn single_token_report_sits_at_zero() {
        let s = shard(&[("a", 1)], |_, _| [5.0, 0.0]);
        let p = &profile_features(&probe_sae(), &[s], &[report("a", 1)], &[0], 2.0).unwrap()[0];
        assert_eq!(p.median_position, 0.0);
        assert_eq!(p.histogram, [1, 0, 0, 0]);
        assert_eq!(p.frac_late, 0.0);
    }

    #[test]
    fn misaligned_streams() {
        let s = shard(&[("a", 4)], |_, _| [0.0, 0.0]);
        let short = report("a", 3);
        assert!(matches!(
            profile_features(&probe_sae(), std::slice::from_ref(&s), &[short], &[0], 2.0),
            Err(Error::Misaligned(_))
        ));
        assert!(matches!(
            profile_features(&probe_sae(), &[s], &[report("b", 4)], &[0], 2.0),
            Err(Error::Misaligned(_))
        ));
    }

    #[test]
    fn shard_order_invariance() {
        let f = |t: usize, _| [t as f32 * 0.7, 1.0];
        let a = shard(&[("a", 6)], f);
        let b = shard(&[("b", 7)], f);
        let reports = [report("a", 6), report("b", 7)];
        let sae = probe_sae();
        let p1 = profile_features(&sae, &[a.clone(), b.clone()], &reports, &[0], 1.0).unwrap();
        let p2 = profile_features(&sae, &[b, a], &reports, &[0], 1.0).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn top_context_ties_and_window() {
        let s = shard(&[("b", 3), ("a", 3)], |t, _| if t == 1 { [4.0, 0.0] } else { [0.0, 0.0] });
        let reports = [report("a", 3), report("b", 3)];
        let p = profile_features(&probe_sae(), &[s], &reports, &[0], 2.0).unwrap();
        let c = top_contexts(&p, &reports, 1).unwrap();
        assert_eq!(c[&0][0].study_id, "a");
        assert_eq!(c[&0][0].text, "w0 w1 w2");
    }

    #[test]
    fn window_is_clipped() {
        let toks: Vec<String> = (0..40).map(|i| format!("tok{i:02}")).collect();
        let w = context_window(&toks, 20);
        assert_eq!(w.chars().count(), 2 * CONTEXT_HALF_WIDTH + 5);
        assert!(w.contains("tok20"));
        assert!(context_window(&toks, 0).starts_with("tok00"));
    }

    #[test]
    fn repetition_flag() {
        assert!(has_repetition("a b c d a b c"));
        assert!(!has_repetition("a b c d e f g"));
        assert!(!has_repetition("a b a b"));
    }
}
