//! Per-token residual-stream activation storage.
//!
//! Shards hold the hidden states of one layer for a set of studies. On disk a
//! shard is laid out so that any language can memory-map the tensor block:
//!
//! ```text
//! offset  size        field
//! 0       4           magic  b"ASHD"
//! 4       4           version (u32, currently 1)
//! 8       4           layer (u32)
//! 12      4           hidden_dim d (u32)
//! 16      8           record count n (u64)
//! 24      n*d*4       vectors, f32 little-endian, row-major
//! ...     variable    metadata: n x (u32 id_len, id bytes UTF-8, u32 token_position)
//! ```
//!
//! All integers are little-endian. The sidecar [`SampleManifest`] lists the
//! shards, the stratum of every study and the sampling seed.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::steering::{RecordingHook, SteerableGenerator};

pub const SHARD_MAGIC: [u8; 4] = *b"ASHD";
pub const SHARD_VERSION: u32 = 1;
pub const SHARD_HEADER_LEN: usize = 24;

/// Default decode cap used by the collection front end.
pub const DEFAULT_MAX_TOKENS: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub study_id: String,
    pub token_position: u32,
    pub vector: Vec<f32>,
}

impl ActivationRecord {
    pub fn new(study_id: impl Into<String>, token_position: u32, vector: Vec<f32>) -> Self {
        Self {
            study_id: study_id.into(),
            token_position,
            vector,
        }
    }
}

/// Hidden states of one layer, validated on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationShard {
    layer: u32,
    hidden_dim: usize,
    records: Vec<ActivationRecord>,
}

impl ActivationShard {
    /// Builds a shard, checking dimensions, finiteness, key uniqueness and
    /// per-study position contiguity.
    pub fn new(layer: u32, records: Vec<ActivationRecord>) -> Result<Self> {
        let first = records.first().ok_or(Error::EmptyShard)?;
        let hidden_dim = first.vector.len();
        if hidden_dim == 0 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        let mut seen = HashSet::with_capacity(records.len());
        let mut positions: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
        for (i, rec) in records.iter().enumerate() {
            if rec.vector.len() != hidden_dim {
                return Err(Error::DimensionMismatch {
                    expected: hidden_dim,
                    got: rec.vector.len(),
                });
            }
            if rec.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation {
                    record: i,
                    study_id: rec.study_id.clone(),
                    position: rec.token_position,
                });
            }
            if !seen.insert((rec.study_id.as_str(), rec.token_position)) {
                return Err(Error::DuplicateRecord {
                    study_id: rec.study_id.clone(),
                    position: rec.token_position,
                });
            }
            positions
                .entry(rec.study_id.as_str())
                .or_default()
                .push(rec.token_position);
        }
        for (study, mut pos) in positions {
            pos.sort_unstable();
            if pos.iter().enumerate().any(|(i, &p)| p as usize != i) {
                return Err(Error::NonContiguousPositions(study.to_string()));
            }
        }
        Ok(Self {
            layer,
            hidden_dim,
            records,
        })
    }

    pub fn layer(&self) -> u32 {
        self.layer
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn records(&self) -> &[ActivationRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct study ids in first-appearance order.
    pub fn study_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.study_id.as_str()))
            .map(|r| r.study_id.clone())
            .collect()
    }

    /// Records grouped by study, each group sorted by token position.
    pub fn by_study(&self) -> BTreeMap<&str, Vec<&ActivationRecord>> {
        let mut out: BTreeMap<&str, Vec<&ActivationRecord>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.study_id.as_str()).or_default().push(r);
        }
        for v in out.values_mut() {
            v.sort_by_key(|r| r.token_position);
        }
        out
    }

    /// Vectors widened to f64, in record order.
    pub fn vectors_f64(&self) -> Vec<Vec<f64>> {
        self.records
            .iter()
            .map(|r| r.vector.iter().map(|&v| v as f64).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardDescriptor {
    pub path: PathBuf,
    pub layer: u32,
    pub hidden_dim: usize,
    pub count: u64,
    /// Byte offset of the vector block.
    pub data_offset: u64,
    /// SHA-256 of the whole file, hex encoded.
    pub checksum: String,
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes a shard to bytes in the on-disk layout.
pub fn encode_shard(shard: &ActivationShard) -> Vec<u8> {
    let n = shard.records.len();
    let d = shard.hidden_dim;
    let mut buf = Vec::with_capacity(SHARD_HEADER_LEN + n * d * 4 + n * 16);
    buf.extend_from_slice(&SHARD_MAGIC);
    buf.extend_from_slice(&SHARD_VERSION.to_le_bytes());
    buf.extend_from_slice(&shard.layer.to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    for rec in &shard.records {
        for v in &rec.vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for rec in &shard.records {
        let id = rec.study_id.as_bytes();
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id);
        buf.extend_from_slice(&rec.token_position.to_le_bytes());
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::BadShard {
                path: self.path.to_path_buf(),
                reason: format!("truncated at byte {}", self.pos),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses the on-disk layout. `path` is only used in error messages.
pub fn decode_shard(bytes: &[u8], path: &Path) -> Result<ActivationShard> {
    let bad = |reason: String| Error::BadShard {
        path: path.to_path_buf(),
        reason,
    };
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path,
    };
    if cur.take(4)? != SHARD_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != SHARD_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let layer = cur.u32()?;
    let d = cur.u32()? as usize;
    let n = cur.u64()? as usize;
    let data = cur.take(n.checked_mul(d).and_then(|x| x.checked_mul(4)).ok_or_else(|| bad("size overflow".into()))?)?;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let len = cur.u32()? as usize;
        let id = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| bad(format!("study id is not UTF-8: {e}")))?
            .to_string();
        let token_position = cur.u32()?;
        let row = &data[i * d * 4..(i + 1) * d * 4];
        let vector = row
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(ActivationRecord {
            study_id: id,
            token_position,
            vector,
        });
    }
    if cur.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    ActivationShard::new(layer, records)
}

/// Validates `records` and writes them as one shard file.
pub fn write_shard(
    records: Vec<ActivationRecord>,
    layer: u32,
    path: impl AsRef<Path>,
) -> Result<ShardDescriptor> {
    let path = path.as_ref();
    let shard = ActivationShard::new(layer, records)?;
    let bytes = encode_shard(&shard);
    fs::write(path, &bytes)?;
    Ok(ShardDescriptor {
        path: path.to_path_buf(),
        layer,
        hidden_dim: shard.hidden_dim,
        count: shard.records.len() as u64,
        data_offset: SHARD_HEADER_LEN as u64,
        checksum: sha256_hex(&bytes),
    })
}

pub fn read_shard(path: impl AsRef<Path>) -> Result<ActivationShard> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_shard(&bytes, path)
}

/// Runs `generator` over `studies` and records the hidden state at `layer`
/// for the first `max_tokens` generated tokens of each study. Studies are
/// decoded in parallel; records come back in input order.
pub fn collect_activations<G: SteerableGenerator>(
    generator: &G,
    studies: &[(String, &G::Study)],
    layer: usize,
    max_tokens: usize,
) -> Result<Vec<ActivationRecord>> {
    if !generator.hook_layers().contains(&layer) {
        return Err(Error::HookLayerAbsent(layer));
    }
    let per_study: Vec<Vec<ActivationRecord>> = studies
        .par_iter()
        .map(|(id, study)| {
            let mut hook = RecordingHook::new(layer);
            generator.generate(study, &mut hook)?;
            Ok(hook
                .rows
                .into_iter()
                .take(max_tokens)
                .map(|(t, h)| ActivationRecord::new(id.clone(), t as u32, h.iter().map(|&x| x as f32).collect()))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_study.into_iter().flatten().collect())
}

// ---------------------------------------------------------------------------
// Manifest and sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardListing {
    pub path: PathBuf,
    pub layer: u32,
    pub data_offset: u64,
    pub study_ids: Vec<String>,
}

/// Sidecar manifest: which studies live in which shard, their strata, and
/// the sampling seed. One manifest describes one layer's shards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub shards: Vec<ShardListing>,
    /// Declared stratum labels.
    pub group_labels: Vec<String>,
    /// study_id -> stratum label.
    pub groups: BTreeMap<String, String>,
    pub seed: u64,
}

impl SampleManifest {
    /// Checks that every study is listed exactly once and carries a declared
    /// group label.
    pub fn validate(&self) -> Result<()> {
        let declared: BTreeSet<&str> = self.group_labels.iter().map(String::as_str).collect();
        let mut listed = HashSet::new();
        for shard in &self.shards {
            for id in &shard.study_ids {
                if !listed.insert(id.as_str()) {
                    return Err(Error::InvalidConfig(format!(
                        "study {id} appears in more than one shard listing"
                    )));
                }
            }
        }
        for (study, label) in &self.groups {
            if !declared.contains(label.as_str()) {
                return Err(Error::UnknownGroup {
                    study_id: study.clone(),
                    label: label.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Self = serde_json::from_slice(&fs::read(path)?)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StratifiedSample {
    pub study_ids: Vec<String>,
    pub per_group: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
}

/// Hamilton (largest-remainder) apportionment of `total` seats over integer
/// weights. Ties in the remainder go to the earlier entry.
fn largest_remainder(total: usize, weights: &[u128]) -> Vec<usize> {
    let sum: u128 = weights.iter().sum();
    if sum == 0 || total == 0 {
        return vec![0; weights.len()];
    }
    let t = total as u128;
    let mut seats: Vec<usize> = weights.iter().map(|w| (t * w / sum) as usize).collect();
    let mut rem: Vec<(u128, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| ((t * w) % sum, i))
        .collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let left = total - seats.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(left) {
        seats[i] += 1;
    }
    seats
}

/// Per-group allocation for [`stratified_sample`]; group order follows
/// `sizes`.
///
/// Each group first receives `min(min_per_group, size)`. The remaining slots
/// go to groups in proportion to how far their proportional quota
/// `n * size / total` exceeds that floor, apportioned by largest remainder and
/// capped by group size.
pub fn allocate_quotas(sizes: &[usize], n: usize, min_per_group: usize) -> Result<Vec<usize>> {
    let total: usize = sizes.iter().sum();
    if n > total {
        return Err(Error::InfeasibleQuota(format!(
            "requested {n} studies but only {total} available"
        )));
    }
    if min_per_group.saturating_mul(sizes.len()) > n {
        return Err(Error::InfeasibleQuota(format!(
            "{min_per_group} per group x {} groups exceeds n = {n}",
            sizes.len()
        )));
    }
    let mut alloc: Vec<usize> = sizes.iter().map(|&s| s.min(min_per_group)).collect();
    let mut remaining = n - alloc.iter().sum::<usize>();
    let mut open: Vec<bool> = sizes.iter().zip(&alloc).map(|(s, a)| a < s).collect();
    while remaining > 0 {
        // need_g = n*size_g - total*alloc_g  (quota excess scaled by total)
        let mut weights: Vec<u128> = (0..sizes.len())
            .map(|g| {
                if !open[g] {
                    return 0;
                }
                let want = n as u128 * sizes[g] as u128;
                let have = total as u128 * alloc[g] as u128;
                want.saturating_sub(have)
            })
            .collect();
        if weights.iter().all(|&w| w == 0) {
            weights = (0..sizes.len())
                .map(|g| if open[g] { (sizes[g] - alloc[g]) as u128 } else { 0 })
                .collect();
        }
        let seats = largest_remainder(remaining, &weights);
        let mut capped = false;
        for g in 0..sizes.len() {
            let room = sizes[g] - alloc[g];
            if seats[g] >= room && seats[g] > 0 {
                alloc[g] += room;
                remaining -= room;
                open[g] = false;
                capped = true;
            }
        }
        if !capped {
            for g in 0..sizes.len() {
                alloc[g] += seats[g];
            }
            remaining = 0;
        }
    }
    Ok(alloc)
}

/// Seeded stratified draw of `n` studies from the manifest's strata.
pub fn stratified_sample(
    manifest: &SampleManifest,
    n: usize,
    min_per_group: usize,
) -> Result<StratifiedSample> {
    manifest.validate()?;
    let mut members: BTreeMap<&str, Vec<&str>> = manifest
        .group_labels
        .iter()
        .map(|g| (g.as_str(), Vec::new()))
        .collect();
    for (study, label) in &manifest.groups {
        members.get_mut(label.as_str()).unwrap().push(study.as_str());
    }
    // Only groups with members take part in the quota.
    members.retain(|_, v| !v.is_empty());
    let sizes: Vec<usize> = members.values().map(Vec::len).collect();
    let alloc = allocate_quotas(&sizes, n, min_per_group)?;

    let mut warnings = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
    let mut study_ids = Vec::with_capacity(n);
    let mut per_group = BTreeMap::new();
    for ((label, ids), &take) in members.iter_mut().zip(&alloc) {
        if ids.len() < min_per_group {
            let msg = format!(
                "group {label:?} has {} studies, fewer than the minimum {min_per_group}",
                ids.len()
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        study_ids.extend(ids.iter().take(take).map(|s| s.to_string()));
        per_group.insert(label.to_string(), take);
    }
    Ok(StratifiedSample {
        study_ids,
        per_group,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SortDirection {
    Ascending,
    Descending,
}

/// Splits studies into four rank quartiles.
///
/// Studies are sorted by score (in `direction`), ties broken by study id.
/// Boundaries fall at ranks `ceil(N/4)`, `ceil(N/2)` and `ceil(3N/4)`.
pub fn quartile_split(
    scores: &BTreeMap<String, f64>,
    direction: SortDirection,
) -> Result<[Vec<String>; 4]> {
    let n = scores.len();
    if n < 4 {
        return Err(Error::TooFewStudies { need: 4, got: n });
    }
    if let Some((id, v)) = scores.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("score {v} for study {id}")));
    }
    let mut ranked: Vec<(&String, f64)> = scores.iter().map(|(k, &v)| (k, v)).collect();
    ranked.sort_by(|a, b| {
        let ord = match direction {
            SortDirection::Ascending => a.1.total_cmp(&b.1),
            SortDirection::Descending => b.1.total_cmp(&a.1),
        };
        ord.then_with(|| a.0.cmp(b.0))
    });
    let bounds = [0, n.div_ceil(4), n.div_ceil(2), (3 * n).div_ceil(4), n];
    Ok(std::array::from_fn(|q| {
        ranked[bounds[q]..bounds[q + 1]]
            .iter()
            .map(|(id, _)| (*id).clone())
            .collect()
    }))
}

/// Study ids present in both sets, sorted. The store reports overlap between
/// training and screening pools but leaves the policy to the caller.
pub fn overlapping_studies<'a>(
    a: impl IntoIterator<Item = &'a String>,
    b: impl IntoIterator<Item = &'a String>,
) -> Vec<String> {
    let a: BTreeSet<&String> = a.into_iter().collect();
    let b: BTreeSet<&String> = b.into_iter().collect();
    a.intersection(&b).map(|s| (*s).clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, pos: u32, v: &[f32]) -> ActivationRecord {
        ActivationRecord::new(id, pos, v.to_vec())
    }

    fn manifest(groups: &[(&str, usize)], seed: u64) -> SampleManifest {
        let mut map = BTreeMap::new();
        let mut ids = Vec::new();
        for (g, size) in groups {
            for i in 0..*size {
                let id = format!("{g}-{i:03}");
                ids.push(id.clone());
                map.insert(id, g.to_string());
            }
        }
        SampleManifest {
            shards: vec![ShardListing {
                path: "layer_16.shard".into(),
                layer: 16,
                data_offset: SHARD_HEADER_LEN as u64,
                study_ids: ids,
            }],
            group_labels: groups.iter().map(|(g, _)| g.to_string()).collect(),
            groups: map,
            seed,
        }
    }

    #[test]
    fn shard_round_trip_two_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.shard");
        let records = vec![
            rec("s1", 0, &[1.0, -2.5, 3.25, 0.0]),
            rec("s1", 1, &[f32::MIN_POSITIVE, 1e-30, -0.0, 7.0]),
        ];
        let desc = write_shard(records.clone(), 16, &path).unwrap();
        assert_eq!(desc.count, 2);
        assert_eq!(desc.hidden_dim, 4);
        assert_eq!(desc.checksum.len(), 64);
        let back = read_shard(&path).unwrap();
        assert_eq!(back.layer(), 16);
        for (a, b) in back.records().iter().zip(&records) {
            assert_eq!(a.study_id, b.study_id);
            let bits_a: Vec<u32> = a.vector.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.vector.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn empty_shard_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_shard(vec![], 0, dir.path().join("x")).unwrap_err();
        assert!(matches!(err, Error::EmptyShard));
        assert_eq!(err.to_string(), "empty shard");
    }

    #[test]
    fn non_finite_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_shard(
            vec![rec("s", 0, &[1.0, f32::NAN])],
            0,
            dir.path().join("x"),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteActivation { .. }));
        assert!(err.to_string().starts_with("non-finite activation"));
    }

    #[test]
    fn dimension_mismatch_and_key_checks() {
        assert!(matches!(
            ActivationShard::new(0, vec![rec("s", 0, &[1.0]), rec("s", 1, &[1.0, 2.0])]),
            Err(Error::DimensionMismatch { expected: 1, got: 2 })
        ));
        assert!(matches!(
            ActivationShard::new(0, vec![rec("s", 0, &[1.0]), rec("s", 0, &[2.0])]),
            Err(Error::DuplicateRecord { .. })
        ));
        assert!(matches!(
            ActivationShard::new(0, vec![rec("s", 0, &[1.0]), rec("s", 2, &[2.0])]),
            Err(Error::NonContiguousPositions(_))
        ));
    }

    #[test]
    fn truncated_file_is_reported() {
        let shard = ActivationShard::new(3, vec![rec("s", 0, &[1.0, 2.0])]).unwrap();
        let bytes = encode_shard(&shard);
        let err = decode_shard(&bytes[..bytes.len() - 2], Path::new("t")).unwrap_err();
        assert!(matches!(err, Error::BadShard { .. }));
    }

    #[test]
    fn symmetric_groups_split_evenly() {
        let m = manifest(&[("a", 10), ("b", 10), ("c", 10), ("d", 10)], 3);
        let s = stratified_sample(&m, 8, 2).unwrap();
        assert_eq!(s.study_ids.len(), 8);
        assert!(s.per_group.values().all(|&c| c == 2));
        assert!(s.warnings.is_empty());
    }

    #[test]
    fn skewed_groups_largest_remainder() {
        // quotas 10*90/100 = 9 and 10*10/100 = 1, floor of 1 each leaves
        // needs (8, 0) for the 8 free slots -> (9, 1).
        let m = manifest(&[("common", 90), ("rare", 10)], 1);
        let s = stratified_sample(&m, 10, 1).unwrap();
        assert_eq!(s.per_group["common"], 9);
        assert_eq!(s.per_group["rare"], 1);
    }

    #[test]
    fn undersized_group_contributes_all_and_warns() {
        let m = manifest(&[("big", 20), ("tiny", 2)], 5);
        let s = stratified_sample(&m, 9, 3).unwrap();
        assert_eq!(s.per_group["tiny"], 2);
        assert_eq!(s.per_group["big"], 7);
        assert_eq!(s.warnings.len(), 1);
        assert!(s.warnings[0].contains("tiny"));
    }

    #[test]
    fn infeasible_quota_errors() {
        let m = manifest(&[("a", 5), ("b", 5)], 0);
        assert!(matches!(stratified_sample(&m, 11, 0), Err(Error::InfeasibleQuota(_))));
        assert!(matches!(stratified_sample(&m, 4, 3), Err(Error::InfeasibleQuota(_))));
    }

    #[test]
    fn unknown_group_errors() {
        let mut m = manifest(&[("a", 3)], 0);
        m.groups.insert("zzz".into(), "nope".into());
        assert!(matches!(stratified_sample(&m, 2, 0), Err(Error::UnknownGroup { .. })));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let m = manifest(&[("a", 30), ("b", 17), ("c", 5)], 42);
        let s1 = stratified_sample(&m, 20, 2).unwrap();
        let s2 = stratified_sample(&m, 20, 2).unwrap();
        assert_eq!(s1, s2);
        let mut other = m.clone();
        other.seed = 43;
        let s3 = stratified_sample(&other, 20, 2).unwrap();
        assert_eq!(s1.per_group, s3.per_group);
        assert_ne!(s1.study_ids, s3.study_ids);
    }

    fn scores(vals: &[(&str, f64)]) -> BTreeMap<String, f64> {
        vals.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn quartiles_of_eight() {
        let s: Vec<(String, f64)> = (1..=8).map(|i| (format!("s{i}"), i as f64)).collect();
        let map: BTreeMap<String, f64> = s.into_iter().collect();
        let q = quartile_split(&map, SortDirection::Ascending).unwrap();
        assert_eq!(q[0], vec!["s1", "s2"]);
        assert_eq!(q[1], vec!["s3", "s4"]);
        assert_eq!(q[2], vec!["s5", "s6"]);
        assert_eq!(q[3], vec!["s7", "s8"]);
        let q = quartile_split(&map, SortDirection::Descending).unwrap();
        assert_eq!(q[0], vec!["s8", "s7"]);
    }

    #[test]
    fn quartiles_ties_use_study_id() {
        let map = scores(&[("d", 1.0), ("b", 1.0), ("a", 1.0), ("c", 1.0), ("f", 1.0), ("e", 1.0), ("h", 1.0), ("g", 1.0)]);
        let q = quartile_split(&map, SortDirection::Descending).unwrap();
        assert_eq!(q, [vec!["a", "b"], vec!["c", "d"], vec!["e", "f"], vec!["g", "h"]]);
    }

    #[test]
    fn quartiles_of_ten_use_ceiling_bounds() {
        // ceil(10/4)=3, ceil(10/2)=5, ceil(30/4)=8 -> sizes 3,2,3,2
        let map: BTreeMap<String, f64> = (0..10).map(|i| (format!("s{i:02}"), i as f64)).collect();
        let q = quartile_split(&map, SortDirection::Ascending).unwrap();
        let sizes: Vec<usize> = q.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 2, 3, 2]);
    }

    #[test]
    fn quartiles_need_four() {
        let map = scores(&[("a", 1.0), ("b", 2.0), ("c", 3.0)]);
        assert!(matches!(
            quartile_split(&map, SortDirection::Ascending),
            Err(Error::TooFewStudies { need: 4, got: 3 })
        ));
    }

    #[test]
    fn overlap_report() {
        let a = vec!["x".to_string(), "y".to_string()];
        let b = vec!["y".to_string(), "z".to_string()];
        assert_eq!(overlapping_studies(&a, &b), vec!["y".to_string()]);
    }
}
