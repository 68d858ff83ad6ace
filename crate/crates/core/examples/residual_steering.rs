//! Suppress the planted drivers at several layers and compare error counts
//! before and after steering.

use std::collections::BTreeMap;

use sae_steer::clinical_metrics::{ErrorCounts, ErrorType};
use sae_steer::steering::{steer_generation, LayerEdits, NoHook, SteerMode, SteerableGenerator, SteeringPlan};
use sae_steer::topk_sae::SaeModel;
use sae_steer::toy_world::{generate_studies, generate_world, toy_oracle, StudyConfig, WorldConfig};

fn main() -> sae_steer::Result<()> {
    let world = generate_world(&WorldConfig {
        drivers: WorldConfig::parse_drivers("FF:2,MF:2")?,
        ..Default::default()
    })?;
    let studies = generate_studies(&world, &StudyConfig { count: 100, seed: 3, ..Default::default() })?;
    let sae = world.oracle_sae(8)?;
    let layers = [8, 16, 20, 24];
    let saes: BTreeMap<usize, SaeModel> = layers.iter().map(|&l| (l, sae.clone())).collect();
    let suppress: Vec<usize> = world.drivers.iter().map(|d| d.atom).collect();
    let plan = SteeringPlan {
        alpha: 0.5,
        beta: 0.0,
        mode: SteerMode::Residual,
        k_budget: None,
        layers: layers
            .iter()
            .map(|&l| (l, LayerEdits { suppress: suppress.clone(), boost: vec![] }))
            .collect(),
    };

    let (mut base, mut steered) = (ErrorCounts::default(), ErrorCounts::default());
    for s in &studies {
        let b = toy_oracle(&world.generate(s, &mut NoHook)?.tokens(), &s.reference)?;
        let t = toy_oracle(&steer_generation(&world, &plan, &saes, s)?.tokens(), &s.reference)?;
        for e in ErrorType::ALL {
            *base.get_mut(e) += b.get(e);
            *steered.get_mut(e) += t.get(e);
        }
    }
    for e in ErrorType::ALL {
        println!("{:>2}: {:4} -> {:4}", e.as_str(), base.get(e), steered.get(e));
    }
    Ok(())
}
