//! Causal screening against brute-force recomputation and planted drivers.

use std::collections::BTreeMap;

use sae_steer::activation_store::collect_activations;
use sae_steer::clinical_metrics::ErrorType;
use sae_steer::feature_select::{
    build_ranked_lists, causal_screen, prefilter, study_feature_magnitudes, AblationMode, ScreenConfig,
};
use sae_steer::steering::{LayerHook, NoHook, SteerableGenerator};
use sae_steer::topk_sae::SaeModel;
use sae_steer::toy_world::{generate_studies, generate_world, toy_oracle, Finding, PlantedWorld, StudyConfig, WorldConfig};
use sae_steer::Result;

fn world(d: usize, drivers: &str, seed: u64) -> PlantedWorld {
    generate_world(&WorldConfig {
        hidden_dim: d,
        dict_size: d,
        sigma: 0.0,
        drivers: WorldConfig::parse_drivers(drivers).unwrap(),
        seed,
        ..Default::default()
    })
    .unwrap()
}

/// Re-implements a single-feature ablation from scratch: full decode of the
/// edited and original codes, difference added to the hidden state.
struct BruteForceHook<'a> {
    sae: &'a SaeModel,
    layer: usize,
    feature: usize,
    factor: f64,
}

impl LayerHook for BruteForceHook<'_> {
    fn on_hidden(&mut self, layer: usize, _token: usize, hidden: &mut [f64]) -> Result<()> {
        if layer != self.layer {
            return Ok(());
        }
        let z = self.sae.encode(hidden, true)?;
        let mut edited = z.clone();
        edited[self.feature] *= self.factor;
        if edited == z {
            return Ok(());
        }
        let a = self.sae.decode(&edited)?;
        let b = self.sae.decode(&z)?;
        for ((h, x), y) in hidden.iter_mut().zip(&a).zip(&b) {
            *h += x - y;
        }
        Ok(())
    }
}

fn brute_force_row(w: &PlantedWorld, sae: &SaeModel, panel: &[sae_steer::toy_world::ToyStudy], j: usize, factor: f64) -> [f64; 4] {
    let mut sum = [0.0; 4];
    for s in panel {
        let base = toy_oracle(&w.generate(s, &mut NoHook).unwrap().tokens(), &s.reference).unwrap();
        let mut hook = BruteForceHook {
            sae,
            layer: 16,
            feature: j,
            factor,
        };
        let edited = toy_oracle(&w.generate(s, &mut hook).unwrap().tokens(), &s.reference).unwrap();
        for t in ErrorType::ALL {
            sum[t.index()] += edited.get(t) as f64 - base.get(t) as f64;
        }
    }
    sum.map(|v| v / panel.len() as f64)
}

#[test]
fn screen_matches_brute_force() {
    let w = world(24, "FF:2,MF:1,WL:1,WS:1", 3);
    let panel = generate_studies(&w, &StudyConfig { count: 30, seed: 4, ..Default::default() }).unwrap();
    let sae = w.oracle_sae(8).unwrap();
    let candidates: Vec<usize> = (0..24).collect();
    for (mode, factor) in [(AblationMode::Zero, 0.0), (AblationMode::Amplify { factor: 2.0 }, 2.0)] {
        let cfg = ScreenConfig {
            layer: 16,
            mode,
            min_word_f1: None,
        };
        let table = causal_screen(&sae, &panel, &w, &sae_steer::toy_world::ToyOracle, &candidates, &cfg).unwrap();
        assert!(table.failed.is_empty());
        for &j in &candidates {
            assert_eq!(table.rows[&j], brute_force_row(&w, &sae, &panel, j, factor), "feature {j} in {mode:?}");
        }
    }
}

#[test]
fn planted_drivers_rank_within_twice_the_driver_count() {
    for seed in [1u64, 2, 3] {
        let w = world(64, "FF:2,MF:2,WL:1,WS:1", seed);
        let panel = generate_studies(&w, &StudyConfig { count: 60, seed: seed + 10, ..Default::default() }).unwrap();
        let sae = w.oracle_sae(8).unwrap();
        let candidates: Vec<usize> = (0..64).collect();
        let cfg = ScreenConfig {
            layer: 16,
            mode: AblationMode::Zero,
            min_word_f1: None,
        };
        let table = causal_screen(&sae, &panel, &w, &sae_steer::toy_world::ToyOracle, &candidates, &cfg).unwrap();
        let lists = build_ranked_lists(&table);
        for d in &w.drivers {
            let limit = 2 * w.drivers_of(d.error_type).len();
            let rank = lists.suppress[d.error_type].iter().position(|&j| j == d.atom);
            assert!(rank.is_some_and(|r| r < limit), "seed {seed}: driver {} at {rank:?}", d.atom);
            assert!(table.rows[&d.atom][d.error_type.index()] < 0.0);
        }
    }
}

#[test]
fn prefilter_keeps_planted_ff_drivers() {
    let w = world(512, "FF:3", 9);
    let studies = generate_studies(&w, &StudyConfig { count: 200, seed: 2, ..Default::default() }).unwrap();
    let sae = w.oracle_sae(8).unwrap();
    let refs: Vec<(String, &_)> = studies.iter().map(|s| (s.study_id.clone(), s)).collect();
    let records = collect_activations(&w, &refs, 16, usize::MAX).unwrap();
    let mut tokens: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for r in &records {
        tokens
            .entry(r.study_id.as_str())
            .or_default()
            .push(r.vector.iter().map(|&x| x as f64).collect());
    }
    let ids: Vec<String> = studies.iter().map(|s| s.study_id.clone()).collect();
    let acts: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| study_feature_magnitudes(&sae, &tokens[id.as_str()]).unwrap())
        .collect();
    let errors: Vec<f64> = studies
        .iter()
        .map(|s| {
            let r = w.generate(s, &mut NoHook).unwrap();
            toy_oracle(&r.tokens(), &s.reference).unwrap().ff as f64
        })
        .collect();
    let kept = prefilter(&ids, &acts, &errors, 50).unwrap();
    for a in w.drivers_of(ErrorType::FF) {
        assert!(kept.contains(&a), "driver {a} missing from {kept:?}");
    }
}

#[test]
fn forcing_an_ff_driver_on_injects_ff() {
    let w = world(64, "FF:1", 5);
    let studies = generate_studies(&w, &StudyConfig { count: 20, driver_rate: 0.0, ..Default::default() }).unwrap();
    let ff = w.drivers_of(ErrorType::FF)[0];
    for s in &studies {
        let clean = toy_oracle(&w.generate(s, &mut NoHook).unwrap().tokens(), &s.reference).unwrap();
        assert_eq!(clean.ff + clean.wl + clean.ws, 0);
        let mut forced = s.clone();
        let filler = s.reference.iter().position(|t| Finding::parse(t).is_none()).unwrap();
        forced.schedule[filler].push((ff, 3.0));
        let dirty = toy_oracle(&w.generate(&forced, &mut NoHook).unwrap().tokens(), &s.reference).unwrap();
        assert!(dirty.ff > 0, "{}", s.study_id);
    }
}
