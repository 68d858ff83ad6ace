//! Steering plans applied to planted worlds.

use std::collections::BTreeMap;

use sae_steer::clinical_metrics::{ErrorCounts, ErrorType};
use sae_steer::steering::{steer_generation, LayerEdits, NoHook, SteerMode, SteerableGenerator, SteeringPlan};
use sae_steer::topk_sae::SaeModel;
use sae_steer::toy_world::{generate_studies, generate_world, toy_oracle, PlantedWorld, StudyConfig, ToyStudy, WorldConfig};

fn setup() -> (PlantedWorld, Vec<ToyStudy>, SaeModel) {
    let w = generate_world(&WorldConfig {
        drivers: WorldConfig::parse_drivers("FF:2,MF:2").unwrap(),
        ..Default::default()
    })
    .unwrap();
    let studies = generate_studies(&w, &StudyConfig { count: 120, seed: 3, ..Default::default() }).unwrap();
    let sae = w.oracle_sae(8).unwrap();
    (w, studies, sae)
}

fn totals(w: &PlantedWorld, studies: &[ToyStudy], plan: Option<(&SteeringPlan, &BTreeMap<usize, SaeModel>)>) -> ErrorCounts {
    let mut acc = ErrorCounts::default();
    for s in studies {
        let r = match plan {
            Some((p, saes)) => steer_generation(w, p, saes, s).unwrap(),
            None => w.generate(s, &mut NoHook).unwrap(),
        };
        let c = toy_oracle(&r.tokens(), &s.reference).unwrap();
        acc.matched += c.matched;
        for t in ErrorType::ALL {
            *acc.get_mut(t) += c.get(t);
        }
    }
    acc
}

fn plan(layers: &[usize], alpha: f64, suppress: Vec<usize>) -> SteeringPlan {
    SteeringPlan {
        alpha,
        beta: 0.0,
        mode: SteerMode::Residual,
        k_budget: None,
        layers: layers
            .iter()
            .map(|&l| (l, LayerEdits { suppress: suppress.clone(), boost: vec![] }))
            .collect(),
    }
}

#[test]
fn suppressing_the_ff_drivers_lowers_ff() {
    let (w, studies, sae) = setup();
    let saes: BTreeMap<usize, SaeModel> = [(16, sae)].into_iter().collect();
    let base = totals(&w, &studies, None);
    let p = plan(&[16], 1.0, w.drivers_of(ErrorType::FF));
    let steered = totals(&w, &studies, Some((&p, &saes)));
    assert!(base.ff > 0);
    assert!(steered.ff < base.ff, "{} -> {}", base.ff, steered.ff);
    assert_eq!(steered.mf, base.mf);
}

#[test]
fn four_layers_reduce_errors_at_least_as_much_as_one() {
    let (w, studies, sae) = setup();
    let saes: BTreeMap<usize, SaeModel> = [8, 16, 20, 24].into_iter().map(|l| (l, sae.clone())).collect();
    let drivers: Vec<usize> = w.drivers.iter().map(|d| d.atom).collect();
    let base = totals(&w, &studies, None).steerable_errors();
    for alpha in [0.2, 0.35, 0.5] {
        let single = totals(&w, &studies, Some((&plan(&[16], alpha, drivers.clone()), &saes))).steerable_errors();
        let multi = totals(&w, &studies, Some((&plan(&[8, 16, 20, 24], alpha, drivers.clone()), &saes))).steerable_errors();
        assert!(base - multi >= base - single, "alpha {alpha}: single {single}, multi {multi}, base {base}");
    }
}

#[test]
fn boosting_presence_trades_mf_for_ff() {
    // Boosting the presence guard rescues weak findings (MF down) but pushes
    // strong ones past the fabrication threshold (FF up).
    let (w, studies, sae) = setup();
    let saes: BTreeMap<usize, SaeModel> = [(16, sae)].into_iter().collect();
    let base = totals(&w, &studies, None);
    let p = SteeringPlan {
        alpha: 1.0,
        beta: 1.0,
        mode: SteerMode::Residual,
        k_budget: None,
        layers: [(16, LayerEdits { suppress: vec![], boost: vec![w.presence] })].into_iter().collect(),
    };
    let steered = totals(&w, &studies, Some((&p, &saes)));
    assert!(steered.mf < base.mf && steered.ff > base.ff, "{base:?} -> {steered:?}");
}
