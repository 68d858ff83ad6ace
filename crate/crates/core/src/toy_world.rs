//! A planted synthetic report generator.
//!
//! Each study is a reference token sequence (findings such as
//! `effusion:left:mild` mixed with filler words) plus a sparse latent code per
//! token. The hidden state for token `t` is `h_t = sum_j z_tj a_j + sigma e_t`
//! over unit-norm dictionary atoms `a_j`. It passes unchanged through the
//! hooked layers, then the emitted token is read off the projections of the
//! final state onto a few special atoms:
//!
//! * presence, laterality and severity guards must stay above
//!   `guard_threshold`, or the finding is dropped, its side flipped or its
//!   severity shifted; a presence guard above `overgen_threshold` also
//!   emits an extra fabricated finding,
//! * error drivers above `driver_threshold` inject their error type,
//! * the repetition atom marks a repeated filler phrase and has no effect on
//!   emission.
//!
//! Because injection is read after the hooks, suppressing a driver's SAE
//! feature mid-generation prevents the error it would have caused.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clinical_metrics::{green_score, word_f1, ErrorCounts, ErrorType, PerType, ScoreVector};
use crate::error::{Error, Result};
use crate::feature_select::ErrorOracle;
use crate::steering::{LayerHook, SteerableGenerator, DEFAULT_HOOK_LAYERS};
use crate::topk_sae::SaeModel;

pub const FINDING_KINDS: [&str; 8] = [
    "effusion",
    "opacity",
    "nodule",
    "pneumothorax",
    "edema",
    "consolidation",
    "atelectasis",
    "cardiomegaly",
];
pub const LOCATIONS: [&str; 2] = ["left", "right"];
pub const SEVERITIES: [&str; 3] = ["mild", "moderate", "severe"];
pub const FILLER: [&str; 16] = [
    "the", "lungs", "are", "clear", "no", "acute", "change", "heart", "size", "is", "normal", "there",
    "since", "prior", "exam", "seen",
];
/// Phrase repeated three times in repetition-loop studies.
pub const REPEAT_PHRASE: [&str; 3] = ["stable", "appearance", "unchanged"];
const REPEAT_TIMES: usize = 3;

/// Guards, repetition atom; drivers follow.
const FIXED_SPECIALS: usize = 4;

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Finding {
    pub kind: u8,
    pub location: u8,
    pub severity: u8,
}

impl Finding {
    pub fn token(&self) -> String {
        format!(
            "{}:{}:{}",
            FINDING_KINDS[self.kind as usize], LOCATIONS[self.location as usize], SEVERITIES[self.severity as usize]
        )
    }

    pub fn parse(tok: &str) -> Option<Finding> {
        let mut it = tok.split(':');
        let (k, l, s) = (it.next()?, it.next()?, it.next()?);
        if it.next().is_some() {
            return None;
        }
        Some(Finding {
            kind: FINDING_KINDS.iter().position(|x| *x == k)? as u8,
            location: LOCATIONS.iter().position(|x| *x == l)? as u8,
            severity: SEVERITIES.iter().position(|x| *x == s)? as u8,
        })
    }
}

fn is_filler(tok: &str) -> bool {
    FILLER.contains(&tok) || REPEAT_PHRASE.contains(&tok)
}

/// Splits a token sequence into findings, rejecting anything outside the
/// vocabulary.
pub fn parse_findings<S: AsRef<str>>(tokens: &[S]) -> Result<Vec<Finding>> {
    let mut out = Vec::new();
    for t in tokens {
        let t = t.as_ref();
        if let Some(f) = Finding::parse(t) {
            out.push(f);
        } else if !is_filler(t) {
            return Err(Error::UnknownToken(t.to_string()));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// World
// ---------------------------------------------------------------------------

fn default_layers() -> Vec<usize> {
    DEFAULT_HOOK_LAYERS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub hidden_dim: usize,
    pub dict_size: usize,
    /// Content atoms per token.
    pub k0: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Number of planted drivers per error type.
    pub drivers: PerType<usize>,
    /// Skips this many special slots before placing drivers, so two worlds
    /// built from one seed can have disjoint driver atoms.
    #[serde(default)]
    pub driver_slot_offset: usize,
    #[serde(default = "default_layers")]
    pub layers: Vec<usize>,
    pub driver_threshold: f64,
    pub guard_threshold: f64,
    pub overgen_threshold: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            hidden_dim: 64,
            dict_size: 96,
            k0: 4,
            sigma: 0.0,
            seed: 1,
            drivers: PerType {
                ff: 3,
                mf: 2,
                wl: 0,
                ws: 0,
            },
            driver_slot_offset: 0,
            layers: default_layers(),
            driver_threshold: 1.5,
            guard_threshold: 1.5,
            overgen_threshold: 5.0,
        }
    }
}

impl WorldConfig {
    /// Parses `FF:3,MF:2` style driver counts.
    pub fn parse_drivers(spec: &str) -> Result<PerType<usize>> {
        let mut out = PerType::<usize>::default();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (t, n) = part
                .split_once(':')
                .ok_or_else(|| Error::InvalidConfig(format!("bad driver spec {part:?}")))?;
            let t: ErrorType = t.parse()?;
            out[t] = n
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad driver count {n:?}")))?;
        }
        Ok(out)
    }

    fn specials(&self) -> usize {
        FIXED_SPECIALS + self.driver_slot_offset + self.drivers.iter().map(|(_, n)| n).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.hidden_dim == 0 || self.k0 == 0 {
            return bad("hidden_dim and k0 must be positive".into());
        }
        if self.dict_size < self.k0 {
            return bad(format!("dictionary size {} below k0 {}", self.dict_size, self.k0));
        }
        let ortho = self.dict_size.min(self.hidden_dim);
        if self.specials() > ortho {
            return bad(format!(
                "{} special atoms do not fit in {} orthonormal slots",
                self.specials(),
                ortho
            ));
        }
        if self.dict_size - self.specials() < self.k0 {
            return bad("too few content atoms for k0".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be finite and non-negative".into());
        }
        for t in [self.driver_threshold, self.guard_threshold, self.overgen_threshold] {
            if !t.is_finite() {
                return bad("thresholds must be finite".into());
            }
        }
        if self.layers.is_empty() {
            return bad("at least one hook layer".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Driver {
    pub atom: usize,
    pub error_type: ErrorType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedWorld {
    pub config: WorldConfig,
    /// `dict_size` unit-norm atoms of length `hidden_dim`.
    pub atoms: Vec<Vec<f64>>,
    pub presence: usize,
    pub laterality: usize,
    pub severity: usize,
    pub repetition: usize,
    pub drivers: Vec<Driver>,
    pub content: Vec<usize>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalise(v: &mut [f64]) -> bool {
    let n = dot(v, v).sqrt();
    if n < 1e-12 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// Deterministic world for `config`. The first `min(dict, d)` atoms are
/// orthonormal; any further atoms are independent unit vectors.
pub fn generate_world(config: &WorldConfig) -> Result<PlantedWorld> {
    config.validate()?;
    let (d, n) = (config.hidden_dim, config.dict_size);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut atoms: Vec<Vec<f64>> = Vec::with_capacity(n);
    let ortho = n.min(d);
    while atoms.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if atoms.len() < ortho {
            // Modified Gram-Schmidt, two passes.
            for _ in 0..2 {
                for a in &atoms {
                    let p = dot(&v, a);
                    v.iter_mut().zip(a).for_each(|(x, y)| *x -= p * y);
                }
            }
        }
        if normalise(&mut v) {
            atoms.push(v);
        }
    }

    let mut slot = FIXED_SPECIALS + config.driver_slot_offset;
    let mut drivers = Vec::new();
    for t in ErrorType::ALL {
        for _ in 0..config.drivers[t] {
            drivers.push(Driver { atom: slot, error_type: t });
            slot += 1;
        }
    }
    let special: BTreeSet<usize> = (0..FIXED_SPECIALS).chain(drivers.iter().map(|d| d.atom)).collect();
    let content = (0..n).filter(|j| !special.contains(j)).collect();
    Ok(PlantedWorld {
        config: config.clone(),
        atoms,
        presence: 0,
        laterality: 1,
        severity: 2,
        repetition: 3,
        drivers,
        content,
    })
}

/// Two worlds with the same guards but disjoint suppress drivers: the first
/// plants `n` FF and MF drivers, the second `n` WL and WS drivers on other
/// atoms. Seeds differ so the models are not copies of each other.
pub fn twin_worlds(base: &WorldConfig, n: usize) -> Result<(PlantedWorld, PlantedWorld)> {
    let a = WorldConfig {
        drivers: PerType { ff: n, mf: n, wl: 0, ws: 0 },
        driver_slot_offset: 0,
        ..base.clone()
    };
    let b = WorldConfig {
        drivers: PerType { ff: 0, mf: 0, wl: n, ws: n },
        driver_slot_offset: 2 * n,
        seed: base.seed.wrapping_add(1),
        ..base.clone()
    };
    Ok((generate_world(&a)?, generate_world(&b)?))
}

impl PlantedWorld {
    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn drivers_of(&self, t: ErrorType) -> Vec<usize> {
        self.drivers.iter().filter(|d| d.error_type == t).map(|d| d.atom).collect()
    }

    pub fn is_driver(&self, atom: usize) -> bool {
        self.drivers.iter().any(|d| d.atom == atom)
    }

    /// An SAE whose encoder and decoder are the planted atoms. With
    /// orthonormal atoms its pre-activations are the exact codes.
    pub fn oracle_sae(&self, k: usize) -> Result<SaeModel> {
        let (d, n) = (self.hidden_dim(), self.atoms.len());
        let mut w_enc = vec![0.0; d * n];
        for (j, a) in self.atoms.iter().enumerate() {
            for (i, &v) in a.iter().enumerate() {
                w_enc[i * n + j] = v;
            }
        }
        SaeModel::from_parts(d, n, k, w_enc, vec![0.0; n], self.atoms.concat(), vec![0.0; d])
    }

    /// Noise-free hidden state for one token code.
    pub fn mix(&self, code: &[(usize, f64)]) -> Vec<f64> {
        let mut h = vec![0.0; self.hidden_dim()];
        for &(j, c) in code {
            h.iter_mut().zip(&self.atoms[j]).for_each(|(x, a)| *x += c * a);
        }
        h
    }

    /// Draws `n` hidden states from i.i.d. codes: `k` distinct atoms chosen
    /// uniformly, coefficients U[1, 2], plus `sigma` Gaussian noise. This is
    /// the unstructured sparse-coding view of the world, free of the
    /// co-occurrence pattern that studies impose on guards.
    pub fn sample_codes(&self, n: usize, k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        if k == 0 || k > self.atoms.len() {
            return Err(Error::InvalidConfig(format!(
                "need 0 < k <= {} atoms, got {k}",
                self.atoms.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let all: Vec<usize> = (0..self.atoms.len()).collect();
        let sigma = self.config.sigma;
        Ok((0..n)
            .map(|_| {
                let code: Vec<(usize, f64)> = all
                    .choose_multiple(&mut rng, k)
                    .map(|&j| (j, rng.gen_range(1.0..2.0)))
                    .collect();
                let mut h = self.mix(&code);
                if sigma > 0.0 {
                    for x in &mut h {
                        let e: f64 = rng.sample(StandardNormal);
                        *x += sigma * e;
                    }
                }
                h
            })
            .collect())
    }

    fn noise_rng(&self, study_id: &str) -> ChaCha8Rng {
        let mut seed = self.config.seed ^ 0x70E_5EED;
        for b in study_id.bytes() {
            seed = (seed ^ b as u64).wrapping_mul(0x100_0000_01B3);
        }
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn proj(&self, h: &[f64], atom: usize) -> f64 {
        dot(h, &self.atoms[atom])
    }

    fn fabricate(&self, reference: &[Finding], start: usize) -> Option<Finding> {
        let used: BTreeSet<u8> = reference.iter().map(|f| f.kind).collect();
        (0..FINDING_KINDS.len())
            .map(|i| ((start + i) % FINDING_KINDS.len()) as u8)
            .find(|k| !used.contains(k))
            .map(|kind| Finding {
                kind,
                location: 0,
                severity: 0,
            })
    }

    fn emit(&self, study: &ToyStudy, t: usize, h: &[f64], reference: &[Finding]) -> Vec<String> {
        let cfg = &self.config;
        let active = |ty: ErrorType| -> Option<usize> {
            self.drivers
                .iter()
                .find(|d| d.error_type == ty && self.proj(h, d.atom) > cfg.driver_threshold)
                .map(|d| d.atom)
        };
        let tok = &study.reference[t];
        let mut out = Vec::new();
        match Finding::parse(tok) {
            Some(f) => {
                let presence = self.proj(h, self.presence);
                if active(ErrorType::MF).is_none() && presence >= cfg.guard_threshold {
                    let mut g = f;
                    if active(ErrorType::WL).is_some() || self.proj(h, self.laterality) < cfg.guard_threshold {
                        g.location = 1 - g.location;
                    }
                    if active(ErrorType::WS).is_some() || self.proj(h, self.severity) < cfg.guard_threshold {
                        g.severity = (g.severity + 1) % SEVERITIES.len() as u8;
                    }
                    out.push(g.token());
                }
                if presence > cfg.overgen_threshold {
                    if let Some(x) = self.fabricate(reference, f.kind as usize + t) {
                        out.push(x.token());
                    }
                }
            }
            None => {
                out.push(tok.clone());
                if let Some(atom) = active(ErrorType::FF) {
                    if let Some(x) = self.fabricate(reference, atom + t) {
                        out.push(x.token());
                    }
                }
            }
        }
        out
    }

    /// Copy of `study` with every driver removed from its code schedule.
    pub fn without_drivers(&self, study: &ToyStudy) -> ToyStudy {
        let mut s = study.clone();
        for code in &mut s.schedule {
            code.retain(|&(j, _)| !self.is_driver(j));
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let w: PlantedWorld = serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        w.config.validate()?;
        if w.atoms.len() != w.config.dict_size || w.atoms.iter().any(|a| a.len() != w.config.hidden_dim) {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                reason: "atom matrix does not match config".into(),
            });
        }
        Ok(w)
    }
}

// ---------------------------------------------------------------------------
// Studies
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyStudy {
    pub study_id: String,
    pub reference: Vec<String>,
    /// Sparse latent code per reference token.
    pub schedule: Vec<Vec<(usize, f64)>>,
    pub stratum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub count: usize,
    pub seed: u64,
    pub max_findings: usize,
    /// Probability that a given driver fires once in a study.
    pub driver_rate: f64,
    /// Fraction of findings whose presence guard sits below threshold.
    pub weak_fraction: f64,
    pub repetition_rate: f64,
    /// Probability that each guard also shows up on a filler token, where it
    /// has no effect on emission.
    pub guard_leak: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            count: 200,
            seed: 7,
            max_findings: 4,
            driver_rate: 0.3,
            weak_fraction: 0.25,
            repetition_rate: 0.1,
            guard_leak: 0.3,
        }
    }
}

enum Slot {
    Filler,
    Finding,
    Repeat,
}

/// Deterministic study set for `world`.
pub fn generate_studies(world: &PlantedWorld, config: &StudyConfig) -> Result<Vec<ToyStudy>> {
    if config.max_findings == 0 || config.max_findings >= FINDING_KINDS.len() {
        return Err(Error::InvalidConfig(format!(
            "max_findings must be in 1..{}",
            FINDING_KINDS.len()
        )));
    }
    for p in [config.driver_rate, config.weak_fraction, config.repetition_rate, config.guard_leak] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidConfig("rates must lie in [0, 1]".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ world.config.seed.rotate_left(17));
    let k0 = world.config.k0;
    let mut out = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let mut tokens: Vec<(String, Slot)> = Vec::new();
        let push_fillers = |tokens: &mut Vec<(String, Slot)>, rng: &mut ChaCha8Rng, lo: usize, hi: usize| {
            for _ in 0..rng.gen_range(lo..=hi) {
                tokens.push((FILLER.choose(rng).unwrap().to_string(), Slot::Filler));
            }
        };
        push_fillers(&mut tokens, &mut rng, 2, 4);
        let n_find = rng.gen_range(1..=config.max_findings);
        let mut kinds: Vec<u8> = (0..FINDING_KINDS.len() as u8).collect();
        kinds.shuffle(&mut rng);
        for &kind in &kinds[..n_find] {
            let f = Finding {
                kind,
                location: rng.gen_range(0..LOCATIONS.len()) as u8,
                severity: rng.gen_range(0..SEVERITIES.len()) as u8,
            };
            tokens.push((f.token(), Slot::Finding));
            push_fillers(&mut tokens, &mut rng, 1, 3);
        }
        if rng.gen_bool(config.repetition_rate) {
            for _ in 0..REPEAT_TIMES {
                for w in REPEAT_PHRASE {
                    tokens.push((w.to_string(), Slot::Repeat));
                }
            }
        }

        let mut schedule: Vec<Vec<(usize, f64)>> = Vec::with_capacity(tokens.len());
        for (_, slot) in &tokens {
            let mut code: Vec<(usize, f64)> = world
                .content
                .choose_multiple(&mut rng, k0)
                .map(|&j| (j, rng.gen_range(1.0..2.0)))
                .collect();
            match slot {
                Slot::Finding => {
                    let p = if rng.gen_bool(config.weak_fraction) {
                        rng.gen_range(0.8..1.2)
                    } else {
                        rng.gen_range(2.5..3.5)
                    };
                    code.push((world.presence, p));
                    code.push((world.laterality, rng.gen_range(2.5..3.5)));
                    code.push((world.severity, rng.gen_range(2.5..3.5)));
                }
                Slot::Repeat => code.push((world.repetition, rng.gen_range(3.5..4.5))),
                Slot::Filler => {
                    for g in [world.presence, world.laterality, world.severity] {
                        if rng.gen_bool(config.guard_leak) {
                            code.push((g, rng.gen_range(0.5..3.5)));
                        }
                    }
                }
            }
            schedule.push(code);
        }

        let mut events = 0usize;
        for d in &world.drivers {
            if !rng.gen_bool(config.driver_rate) {
                continue;
            }
            let want_finding = d.error_type != ErrorType::FF;
            let eligible: Vec<usize> = tokens
                .iter()
                .enumerate()
                .filter(|(_, (_, s))| match s {
                    Slot::Finding => want_finding,
                    Slot::Filler => !want_finding,
                    Slot::Repeat => false,
                })
                .map(|(t, _)| t)
                .collect();
            if let Some(&t) = eligible.choose(&mut rng) {
                schedule[t].push((d.atom, rng.gen_range(2.5..3.5)));
                events += 1;
            }
        }
        for code in &mut schedule {
            code.sort_by_key(|&(j, _)| j);
        }
        out.push(ToyStudy {
            study_id: format!("s{i:05}"),
            reference: tokens.into_iter().map(|(t, _)| t).collect(),
            schedule,
            stratum: format!("q{}", events.min(3)),
        });
    }
    Ok(out)
}

pub fn save_studies(studies: &[ToyStudy], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_vec(studies)?)?;
    Ok(())
}

pub fn load_studies(path: impl AsRef<Path>) -> Result<Vec<ToyStudy>> {
    let path = path.as_ref();
    let s: Vec<ToyStudy> = serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    for st in &s {
        if st.schedule.len() != st.reference.len() {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                reason: format!("study {} has a schedule of the wrong length", st.study_id),
            });
        }
        parse_findings(&st.reference)?;
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Decoded report; `steps[t]` holds the tokens emitted for reference slot `t`
/// (possibly none, possibly two).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyReport {
    pub study_id: String,
    pub steps: Vec<Vec<String>>,
}

impl ToyReport {
    pub fn tokens(&self) -> Vec<String> {
        self.steps.iter().flatten().cloned().collect()
    }

    /// One text unit per generation step, aligned with recorded activation
    /// positions. Dropped steps become an empty string.
    pub fn step_texts(&self) -> Vec<String> {
        self.steps.iter().map(|s| s.join(" ")).collect()
    }
}

impl SteerableGenerator for PlantedWorld {
    type Study = ToyStudy;
    type Report = ToyReport;

    fn hook_layers(&self) -> Vec<usize> {
        self.config.layers.clone()
    }

    fn generate(&self, study: &ToyStudy, hook: &mut dyn LayerHook) -> Result<ToyReport> {
        if study.schedule.len() != study.reference.len() {
            return Err(Error::LengthMismatch {
                left: study.reference.len(),
                right: study.schedule.len(),
            });
        }
        let reference = parse_findings(&study.reference)?;
        let mut rng = self.noise_rng(&study.study_id);
        let sigma = self.config.sigma;
        let mut steps = Vec::with_capacity(study.reference.len());
        for (t, code) in study.schedule.iter().enumerate() {
            if let Some(&(j, _)) = code.iter().find(|&&(j, _)| j >= self.atoms.len()) {
                return Err(Error::IndexOutOfRange {
                    index: j,
                    bound: self.atoms.len(),
                });
            }
            let mut h = self.mix(code);
            if sigma > 0.0 {
                for x in &mut h {
                    let e: f64 = rng.sample(StandardNormal);
                    *x += sigma * e;
                }
            }
            for &layer in &self.config.layers {
                hook.on_hidden(layer, t, &mut h)?;
            }
            steps.push(self.emit(study, t, &h, &reference));
        }
        Ok(ToyReport {
            study_id: study.study_id.clone(),
            steps,
        })
    }
}

// ---------------------------------------------------------------------------
// Oracle and scores
// ---------------------------------------------------------------------------

/// Rule-based error counts of `decode` against `reference`.
///
/// Reference findings are paired with decoded findings of the same kind,
/// exact matches first, then same location, then any. A pair counts as
/// matched; a wrong side adds WL and a wrong severity adds WS. Unpaired
/// reference findings are MF and unpaired decoded findings are FF.
pub fn toy_oracle<S: AsRef<str>, T: AsRef<str>>(decode: &[S], reference: &[T]) -> Result<ErrorCounts> {
    let dec = parse_findings(decode)?;
    let refs = parse_findings(reference)?;
    let mut used_d = vec![false; dec.len()];
    let mut used_r = vec![false; refs.len()];
    let mut c = ErrorCounts::default();
    let stages: [fn(&Finding, &Finding) -> bool; 3] = [
        |a, b| a == b,
        |a, b| a.kind == b.kind && a.location == b.location,
        |a, b| a.kind == b.kind,
    ];
    for accept in stages {
        for (ri, r) in refs.iter().enumerate() {
            if used_r[ri] {
                continue;
            }
            if let Some(di) = (0..dec.len()).find(|&di| !used_d[di] && accept(r, &dec[di])) {
                used_r[ri] = true;
                used_d[di] = true;
                c.matched += 1;
                c.wl += (r.location != dec[di].location) as u32;
                c.ws += (r.severity != dec[di].severity) as u32;
            }
        }
    }
    c.mf = used_r.iter().filter(|u| !**u).count() as u32;
    c.ff = used_d.iter().filter(|u| !**u).count() as u32;
    Ok(c)
}

fn multiset_f1<K: Ord + Clone>(a: &[K], b: &[K]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let mut pool: Vec<K> = b.to_vec();
    pool.sort();
    let mut hit = 0usize;
    for x in a {
        if let Ok(i) = pool.binary_search(x) {
            pool.remove(i);
            hit += 1;
        }
    }
    if hit == 0 {
        return 0.0;
    }
    let p = hit as f64 / a.len() as f64;
    let r = hit as f64 / b.len() as f64;
    2.0 * p * r / (p + r)
}

/// Proxy metric vector on a 0-100 scale: GREEN from the oracle counts,
/// finding+side F1 in the RadGraph slot, finding-kind F1 in the CheXbert
/// slot and unigram F1 in the BERTScore slot.
pub fn toy_scores<S: AsRef<str>, T: AsRef<str>>(decode: &[S], reference: &[T]) -> Result<ScoreVector> {
    let counts = toy_oracle(decode, reference)?;
    let dec = parse_findings(decode)?;
    let refs = parse_findings(reference)?;
    let kl = |v: &[Finding]| v.iter().map(|f| (f.kind, f.location)).collect::<Vec<_>>();
    let k = |v: &[Finding]| v.iter().map(|f| f.kind).collect::<Vec<_>>();
    let d: Vec<&str> = decode.iter().map(AsRef::as_ref).collect();
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    Ok(ScoreVector::new(
        100.0 * green_score(&counts),
        100.0 * multiset_f1(&kl(&dec), &kl(&refs)),
        100.0 * multiset_f1(&k(&dec), &k(&refs)),
        100.0 * word_f1(&d, &r),
    ))
}

/// [`ErrorOracle`] for [`PlantedWorld`] backed by [`toy_oracle`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyOracle;

impl ErrorOracle<PlantedWorld> for ToyOracle {
    fn counts(&self, report: &ToyReport, study: &ToyStudy) -> Result<ErrorCounts> {
        toy_oracle(&report.tokens(), &study.reference)
    }

    fn word_f1(&self, report: &ToyReport, study: &ToyStudy) -> Option<f64> {
        Some(word_f1(&report.tokens(), &study.reference))
    }
}

// ---------------------------------------------------------------------------
// Dictionary recovery
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomMatch {
    pub atom: usize,
    pub feature: usize,
    pub cosine: f64,
}

/// One-to-one matching of planted atoms to SAE decoder rows, taking pairs in
/// order of decreasing cosine (ties by atom, then feature).
pub fn greedy_atom_matching(atoms: &[Vec<f64>], sae: &SaeModel) -> Result<Vec<AtomMatch>> {
    let d = sae.hidden_dim();
    if let Some(a) = atoms.iter().find(|a| a.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: a.len(),
        });
    }
    let rows: Vec<(Vec<f64>, f64)> = (0..sae.dict_size())
        .map(|j| {
            let r = sae.decoder_row(j).to_vec();
            let n = dot(&r, &r).sqrt();
            (r, n)
        })
        .collect();
    let mut pairs = Vec::with_capacity(atoms.len() * rows.len());
    for (a, atom) in atoms.iter().enumerate() {
        let na = dot(atom, atom).sqrt();
        for (f, (row, nr)) in rows.iter().enumerate() {
            let c = if na == 0.0 || *nr == 0.0 { 0.0 } else { dot(atom, row) / (na * nr) };
            pairs.push((c, a, f));
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut atom_done = vec![false; atoms.len()];
    let mut feat_done = vec![false; rows.len()];
    let mut out = Vec::new();
    for (c, a, f) in pairs {
        if atom_done[a] || feat_done[f] {
            continue;
        }
        atom_done[a] = true;
        feat_done[f] = true;
        out.push(AtomMatch { atom: a, feature: f, cosine: c });
    }
    out.sort_by_key(|m| m.atom);
    Ok(out)
}

/// Fraction of atoms whose match reaches `min_cosine`.
pub fn recovery_fraction(matches: &[AtomMatch], n_atoms: usize, min_cosine: f64) -> f64 {
    if n_atoms == 0 {
        return 0.0;
    }
    matches.iter().filter(|m| m.cosine >= min_cosine).count() as f64 / n_atoms as f64
}
