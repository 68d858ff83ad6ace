//! Suppress/boost edits in the SAE basis and their injection into the
//! residual stream during generation.
//!
//! Two update rules are provided. The residual rule adds only the change the
//! edit causes in decoder space,
//!
//! ```text
//! delta = decode(z') - decode(z)        h' = h + alpha * delta
//! ```
//!
//! so SAE reconstruction error never enters the hidden state. The blend rule
//! interpolates towards the edited reconstruction,
//! `h' = (1 - alpha) h + alpha decode(z')`, and is kept for ablations.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clinical_metrics::{ErrorType, PerType};
use crate::error::{Error, Result};
use crate::feature_select::RankedFeatureLists;
use crate::topk_sae::SaeModel;

/// The hyper-parameter grid searched on validation data; values outside it
/// are accepted but flagged.
pub const ALPHA_GRID: [f64; 8] = [0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.50];
pub const K_BUDGET_GRID: [usize; 3] = [20, 50, 100];
pub const BETA_GRID: [f64; 2] = [0.5, 1.0];
pub const DEFAULT_HOOK_LAYERS: [usize; 4] = [8, 16, 20, 24];

// ---------------------------------------------------------------------------
// Generator contract
// ---------------------------------------------------------------------------

/// Called by a generator on the post-block residual stream of every hooked
/// layer, once per generated token.
pub trait LayerHook {
    fn on_hidden(&mut self, layer: usize, token: usize, hidden: &mut [f64]) -> Result<()>;
}

/// A hook that leaves the residual stream untouched.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHook;

impl LayerHook for NoHook {
    fn on_hidden(&mut self, _: usize, _: usize, _: &mut [f64]) -> Result<()> {
        Ok(())
    }
}

/// Records the hidden state seen at one layer, in token order.
#[derive(Debug, Clone, Default)]
pub struct RecordingHook {
    pub layer: usize,
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl RecordingHook {
    pub fn new(layer: usize) -> Self {
        RecordingHook {
            layer,
            rows: Vec::new(),
        }
    }
}

impl LayerHook for RecordingHook {
    fn on_hidden(&mut self, layer: usize, token: usize, hidden: &mut [f64]) -> Result<()> {
        if layer == self.layer {
            self.rows.push((token, hidden.to_vec()));
        }
        Ok(())
    }
}

/// A decoder that exposes per-token, per-layer hidden-state hooks.
///
/// Generation must be deterministic for a given study and hook behaviour.
pub trait SteerableGenerator: Sync {
    type Study: Sync;
    type Report: Send + Sync + Clone + PartialEq;

    fn hook_layers(&self) -> Vec<usize>;

    fn generate(&self, study: &Self::Study, hook: &mut dyn LayerHook) -> Result<Self::Report>;
}

// ---------------------------------------------------------------------------
// Plans
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SteerMode {
    #[default]
    Residual,
    Blend,
}

impl std::str::FromStr for SteerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(SteerMode::Residual),
            "blend" => Ok(SteerMode::Blend),
            _ => Err(Error::InvalidConfig(format!("unknown steering mode {s:?}"))),
        }
    }
}

/// Which edit directions a plan keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditDirections {
    #[default]
    Combined,
    SuppressOnly,
    BoostOnly,
}

/// Suppress and boost feature sets for one layer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEdits {
    pub suppress: Vec<usize>,
    pub boost: Vec<usize>,
}

impl LayerEdits {
    pub fn is_empty(&self) -> bool {
        self.suppress.is_empty() && self.boost.is_empty()
    }

    pub fn validate(&self, dict_size: usize) -> Result<()> {
        for &j in self.suppress.iter().chain(&self.boost) {
            if j >= dict_size {
                return Err(Error::IndexOutOfRange {
                    index: j,
                    bound: dict_size,
                });
            }
        }
        let s: BTreeSet<usize> = self.suppress.iter().copied().collect();
        if let Some(j) = self.boost.iter().find(|j| s.contains(j)) {
            return Err(Error::InvalidConfig(format!(
                "feature {j} is in both the suppress and boost sets"
            )));
        }
        Ok(())
    }

    pub fn restrict(&self, directions: EditDirections) -> LayerEdits {
        match directions {
            EditDirections::Combined => self.clone(),
            EditDirections::SuppressOnly => LayerEdits {
                suppress: self.suppress.clone(),
                boost: vec![],
            },
            EditDirections::BoostOnly => LayerEdits {
                suppress: vec![],
                boost: self.boost.clone(),
            },
        }
    }
}

/// A frozen operating point: strengths, mode and per-layer edit sets.
///
/// Serialized as `{alpha, beta, mode, layers: {"16": {suppress, boost}}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringPlan {
    pub alpha: f64,
    pub beta: f64,
    pub mode: SteerMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_budget: Option<usize>,
    pub layers: BTreeMap<usize, LayerEdits>,
}

impl SteeringPlan {
    /// The unsteered baseline (`alpha = beta = 0`, no edits).
    pub fn unsteered() -> Self {
        SteeringPlan {
            alpha: 0.0,
            beta: 0.0,
            mode: SteerMode::Residual,
            k_budget: None,
            layers: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::OutOfRange(format!("alpha = {} outside [0, 1]", self.alpha)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::OutOfRange(format!("beta = {} must be >= 0", self.beta)));
        }
        for edits in self.layers.values() {
            edits.validate(usize::MAX)?;
        }
        Ok(())
    }

    /// Human-readable notes about settings outside the searched grid.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.alpha != 0.0 && !(ALPHA_GRID[0]..=ALPHA_GRID[7]).contains(&self.alpha) {
            out.push(format!(
                "alpha = {} lies outside the searched range [{}, {}]; large values can break coherent generation",
                self.alpha, ALPHA_GRID[0], ALPHA_GRID[7]
            ));
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let plan: SteeringPlan = serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Truncates each per-type list to `k_budget`, unions across types in
/// FF, MF, WL, WS order, then drops boost members that are also suppressed.
pub fn aggregate_lists(lists: &RankedFeatureLists, k_budget: usize) -> LayerEdits {
    fn union(per_type: &PerType<Vec<usize>>, k: usize) -> Vec<usize> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for t in ErrorType::ALL {
            for &j in per_type[t].iter().take(k) {
                if seen.insert(j) {
                    out.push(j);
                }
            }
        }
        out
    }
    let suppress = union(&lists.suppress, k_budget);
    let s: BTreeSet<usize> = suppress.iter().copied().collect();
    let boost = union(&lists.boost, k_budget)
        .into_iter()
        .filter(|j| !s.contains(j))
        .collect();
    LayerEdits { suppress, boost }
}

/// Zeroes suppressed coordinates and scales boosted ones by `1 + beta`.
/// Suppression wins for a feature listed in both sets.
pub fn edit_code(z: &[f64], edits: &LayerEdits, beta: f64) -> Result<Vec<f64>> {
    edits_in_range(edits, z.len())?;
    let mut out = z.to_vec();
    for &j in &edits.boost {
        out[j] *= 1.0 + beta;
    }
    for &j in &edits.suppress {
        out[j] = 0.0;
    }
    Ok(out)
}

fn edits_in_range(edits: &LayerEdits, dict: usize) -> Result<()> {
    for &j in edits.suppress.iter().chain(&edits.boost) {
        if j >= dict {
            return Err(Error::IndexOutOfRange {
                index: j,
                bound: dict,
            });
        }
    }
    Ok(())
}

/// One application of a steering update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeredState {
    pub original: Vec<f64>,
    pub edited_code: Vec<f64>,
    pub delta: Vec<f64>,
    pub output: Vec<f64>,
}

/// Residual update `h' = h + alpha (decode(z') - decode(z))`.
///
/// The decoder bias cancels in the difference, so `delta` is accumulated
/// from the changed coordinates only: `sum_j (z'_j - z_j) W_dec[j, :]`.
/// Coordinates where `alpha * delta` is zero are copied from `h`, so empty
/// edits or `alpha = 0` return `h` bit for bit.
pub fn residual_update(
    model: &SaeModel,
    h: &[f64],
    edits: &LayerEdits,
    alpha: f64,
    beta: f64,
) -> Result<SteeredState> {
    let z = model.encode(h, true)?;
    let edited = edit_code(&z, edits, beta)?;
    let mut delta = vec![0.0; model.hidden_dim()];
    for (j, (&a, &b)) in edited.iter().zip(&z).enumerate() {
        if a != b {
            model.add_atom(&mut delta, j, a - b);
        }
    }
    let output = h
        .iter()
        .zip(&delta)
        .map(|(&x, &dl)| {
            let step = alpha * dl;
            if step == 0.0 {
                x
            } else {
                x + step
            }
        })
        .collect();
    Ok(SteeredState {
        original: h.to_vec(),
        edited_code: edited,
        delta,
        output,
    })
}

/// Blend patch `h' = (1 - alpha) h + alpha decode(z')`; `alpha = 0` returns
/// `h` unchanged.
pub fn blend_update(
    model: &SaeModel,
    h: &[f64],
    edits: &LayerEdits,
    alpha: f64,
    beta: f64,
) -> Result<SteeredState> {
    let z = model.encode(h, true)?;
    let edited = edit_code(&z, edits, beta)?;
    let recon = model.decode(&edited)?;
    let delta: Vec<f64> = recon.iter().zip(h).map(|(r, x)| r - x).collect();
    let output = if alpha == 0.0 {
        h.to_vec()
    } else {
        h.iter()
            .zip(&recon)
            .map(|(x, r)| (1.0 - alpha) * x + alpha * r)
            .collect()
    };
    Ok(SteeredState {
        original: h.to_vec(),
        edited_code: edited,
        delta,
        output,
    })
}

/// Applies the plan's update for `edits` in the plan's mode.
pub fn apply_update(
    model: &SaeModel,
    h: &[f64],
    edits: &LayerEdits,
    plan: &SteeringPlan,
) -> Result<SteeredState> {
    match plan.mode {
        SteerMode::Residual => residual_update(model, h, edits, plan.alpha, plan.beta),
        SteerMode::Blend => blend_update(model, h, edits, plan.alpha, plan.beta),
    }
}

/// Hook that applies a [`SteeringPlan`] with one SAE per steered layer.
pub struct PlanHook<'a> {
    plan: &'a SteeringPlan,
    saes: &'a BTreeMap<usize, SaeModel>,
}

impl<'a> PlanHook<'a> {
    /// Fails if a steered layer has no SAE or an edit index is out of range.
    pub fn new(plan: &'a SteeringPlan, saes: &'a BTreeMap<usize, SaeModel>) -> Result<Self> {
        for (layer, edits) in &plan.layers {
            let sae = saes.get(layer).ok_or_else(|| {
                Error::InvalidConfig(format!("no SAE supplied for steered layer {layer}"))
            })?;
            edits.validate(sae.dict_size())?;
        }
        Ok(PlanHook { plan, saes })
    }
}

impl LayerHook for PlanHook<'_> {
    fn on_hidden(&mut self, layer: usize, _token: usize, hidden: &mut [f64]) -> Result<()> {
        if self.plan.alpha == 0.0 {
            return Ok(());
        }
        let Some(edits) = self.plan.layers.get(&layer) else {
            return Ok(());
        };
        if edits.is_empty() && self.plan.mode == SteerMode::Residual {
            return Ok(());
        }
        let sae = &self.saes[&layer];
        let state = apply_update(sae, hidden, edits, self.plan)?;
        hidden.copy_from_slice(&state.output);
        Ok(())
    }
}

/// Generates one report with the plan applied at every steered layer for
/// every generated token.
pub fn steer_generation<G: SteerableGenerator>(
    generator: &G,
    plan: &SteeringPlan,
    saes: &BTreeMap<usize, SaeModel>,
    study: &G::Study,
) -> Result<G::Report> {
    let available = generator.hook_layers();
    if let Some(&missing) = plan.layers.keys().find(|l| !available.contains(l)) {
        return Err(Error::HookLayerAbsent(missing));
    }
    for w in plan.warnings() {
        log::warn!("{w}");
    }
    let mut hook = PlanHook::new(plan, saes)?;
    generator.generate(study, &mut hook)
}

// ---------------------------------------------------------------------------
// Grid search harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub alphas: Vec<f64>,
    pub k_budgets: Vec<usize>,
    pub betas: Vec<f64>,
    pub modes: Vec<SteerMode>,
    pub directions: Vec<EditDirections>,
    pub layer_subsets: Vec<Vec<usize>>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            alphas: ALPHA_GRID.to_vec(),
            k_budgets: K_BUDGET_GRID.to_vec(),
            betas: vec![1.0],
            modes: vec![SteerMode::Residual],
            directions: vec![EditDirections::Combined],
            layer_subsets: vec![DEFAULT_HOOK_LAYERS.to_vec()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha: f64,
    pub k_budget: usize,
    pub beta: f64,
    pub mode: SteerMode,
    pub directions: EditDirections,
    pub layers: Vec<usize>,
}

impl GridPoint {
    /// Builds the plan for this point from per-layer ranked lists.
    pub fn plan(&self, lists: &BTreeMap<usize, RankedFeatureLists>) -> Result<SteeringPlan> {
        let mut layers = BTreeMap::new();
        for &l in &self.layers {
            let ranked = lists
                .get(&l)
                .ok_or_else(|| Error::InvalidConfig(format!("no feature lists for layer {l}")))?;
            layers.insert(l, aggregate_lists(ranked, self.k_budget).restrict(self.directions));
        }
        Ok(SteeringPlan {
            alpha: self.alpha,
            beta: self.beta,
            mode: self.mode,
            k_budget: Some(self.k_budget),
            layers,
        })
    }
}

impl GridSpec {
    /// All grid points in a fixed nesting order: layers, directions, mode,
    /// K budget, beta, alpha.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for layers in &self.layer_subsets {
            for &directions in &self.directions {
                for &mode in &self.modes {
                    for &k_budget in &self.k_budgets {
                        for &beta in &self.betas {
                            for &alpha in &self.alphas {
                                out.push(GridPoint {
                                    alpha,
                                    k_budget,
                                    beta,
                                    mode,
                                    directions,
                                    layers: layers.clone(),
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub point: GridPoint,
    pub mean_composite: f64,
    pub mean_green: f64,
    pub studies: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    /// Index into `rows` of the highest mean Composite (first wins ties).
    pub best: usize,
    pub baseline_composite: f64,
}

/// Runs every grid point over `panel` and scores each decode with `score`,
/// which returns `(composite, green)` for one study. The full table is kept;
/// the winner is the row with the highest mean Composite.
pub fn grid_search<G, F>(
    generator: &G,
    saes: &BTreeMap<usize, SaeModel>,
    lists: &BTreeMap<usize, RankedFeatureLists>,
    spec: &GridSpec,
    panel: &[G::Study],
    score: F,
) -> Result<GridResult>
where
    G: SteerableGenerator,
    F: Fn(&G::Study, &G::Report) -> Result<(f64, f64)> + Sync,
{
    use rayon::prelude::*;
    if panel.is_empty() {
        return Err(Error::EmptyStream);
    }
    let run = |plan: &SteeringPlan| -> Result<(f64, f64)> {
        let scored: Vec<(f64, f64)> = panel
            .par_iter()
            .map(|study| {
                let report = steer_generation(generator, plan, saes, study)?;
                score(study, &report)
            })
            .collect::<Result<_>>()?;
        let n = scored.len() as f64;
        Ok((
            scored.iter().map(|s| s.0).sum::<f64>() / n,
            scored.iter().map(|s| s.1).sum::<f64>() / n,
        ))
    };
    let (baseline_composite, _) = run(&SteeringPlan::unsteered())?;
    let mut rows = Vec::new();
    for point in spec.points() {
        let plan = point.plan(lists)?;
        let (mean_composite, mean_green) = run(&plan)?;
        rows.push(GridRow {
            point,
            mean_composite,
            mean_green,
            studies: panel.len(),
        });
    }
    if rows.is_empty() {
        return Err(Error::InvalidConfig("empty grid".into()));
    }
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.mean_composite > rows[best].mean_composite {
            best = i;
        }
    }
    Ok(GridResult {
        rows,
        best,
        baseline_composite,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lists(suppress: &[(ErrorType, &[usize])], boost: &[(ErrorType, &[usize])]) -> RankedFeatureLists {
        let mut l = RankedFeatureLists {
            layer: 16,
            suppress: PerType::default(),
            boost: PerType::default(),
        };
        for (t, v) in suppress {
            l.suppress[*t] = v.to_vec();
        }
        for (t, v) in boost {
            l.boost[*t] = v.to_vec();
        }
        l
    }

    #[test]
    fn conflict_resolves_toward_suppression() {
        let l = lists(&[(ErrorType::FF, &[5])], &[(ErrorType::MF, &[5, 9])]);
        let e = aggregate_lists(&l, 10);
        assert_eq!(e.suppress, vec![5]);
        assert_eq!(e.boost, vec![9]);
    }

    #[test]
    fn empty_lists_aggregate_to_nothing() {
        let e = aggregate_lists(&lists(&[], &[]), 5);
        assert!(e.is_empty());
    }

    #[test]
    fn budget_truncates_each_type() {
        let l = lists(&[(ErrorType::FF, &[3, 7]), (ErrorType::WS, &[7, 1])], &[]);
        assert_eq!(aggregate_lists(&l, 1).suppress, vec![3, 7]);
        let l = lists(&[(ErrorType::FF, &[3, 7])], &[]);
        assert_eq!(aggregate_lists(&l, 1).suppress, vec![3]);
    }

    #[test]
    fn edit_rule() {
        let z = vec![0.5, 7.3, 1.0, 2.0];
        let e = LayerEdits {
            suppress: vec![1],
            boost: vec![0],
        };
        let out = edit_code(&z, &e, 1.0).unwrap();
        assert_eq!(out, vec![1.0, 0.0, 1.0, 2.0]);
        assert_eq!(edit_code(&z, &LayerEdits::default(), 1.0).unwrap(), z);
        let bad = LayerEdits {
            suppress: vec![4],
            boost: vec![],
        };
        assert!(matches!(edit_code(&z, &bad, 1.0), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn plan_json_shape() {
        let mut layers = BTreeMap::new();
        layers.insert(
            16,
            LayerEdits {
                suppress: vec![1, 2],
                boost: vec![3],
            },
        );
        let plan = SteeringPlan {
            alpha: 0.2,
            beta: 1.0,
            mode: SteerMode::Residual,
            k_budget: None,
            layers,
        };
        let v = serde_json::to_value(&plan).unwrap();
        assert_eq!(v["mode"], "residual");
        assert_eq!(v["layers"]["16"]["suppress"], serde_json::json!([1, 2]));
        let back: SteeringPlan = serde_json::from_value(v).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn plan_flags_large_alpha() {
        let mut p = SteeringPlan::unsteered();
        assert!(p.warnings().is_empty());
        p.alpha = 0.9;
        assert_eq!(p.warnings().len(), 1);
        p.alpha = 1.5;
        assert!(p.validate().is_err());
    }

    #[test]
    fn overlapping_plan_rejected() {
        let e = LayerEdits {
            suppress: vec![1],
            boost: vec![1],
        };
        assert!(e.validate(10).is_err());
    }

    #[test]
    fn grid_enumerates_full_product() {
        let spec = GridSpec {
            alphas: vec![0.1, 0.2],
            k_budgets: vec![20, 50, 100],
            betas: vec![0.5, 1.0],
            modes: vec![SteerMode::Residual, SteerMode::Blend],
            directions: vec![EditDirections::Combined],
            layer_subsets: vec![vec![16], vec![8, 16, 20, 24]],
        };
        assert_eq!(spec.points().len(), 2 * 3 * 2 * 2 * 2);
    }
}
