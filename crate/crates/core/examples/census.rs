//! Compare error-feature signatures of two models built on twin worlds that
//! share boost features but not suppress features.

use std::collections::BTreeMap;

use sae_steer::bootstrap::Resampling;
use sae_steer::census::{census_report, summarize_model};
use sae_steer::feature_select::{causal_screen, AblationMode, CausalDeltaTable, ScreenConfig};
use sae_steer::steering::SteerableGenerator;
use sae_steer::toy_world::{generate_studies, twin_worlds, PlantedWorld, StudyConfig, ToyOracle, WorldConfig};

fn tables(world: &PlantedWorld, seed: u64) -> sae_steer::Result<BTreeMap<usize, CausalDeltaTable>> {
    let sae = world.oracle_sae(8)?;
    let candidates: Vec<usize> = (0..world.atoms.len()).collect();
    let mut out = BTreeMap::new();
    for layer in world.hook_layers() {
        let panel = generate_studies(world, &StudyConfig { count: 32, seed: seed * 100 + layer as u64, ..Default::default() })?;
        let cfg = ScreenConfig {
            layer,
            mode: AblationMode::Zero,
            min_word_f1: None,
        };
        out.insert(layer, causal_screen(&sae, &panel, world, &ToyOracle, &candidates, &cfg)?);
    }
    Ok(out)
}

fn main() -> sae_steer::Result<()> {
    let (a, b) = twin_worlds(&WorldConfig::default(), 2)?;
    let sa = summarize_model("a", &tables(&a, 1)?, 100)?;
    let sb = summarize_model("b", &tables(&b, 2)?, 100)?;
    let report = census_report("a", "b", &sa, &sb, Resampling::random(2_000, 3), 0.95)?;
    for d in &report.directions {
        println!(
            "{:?}: jaccard {:.2} [{:.2}, {:.2}], cosine {:.2} [{:.2}, {:.2}]",
            d.direction, d.jaccard.mean, d.jaccard.ci_low, d.jaccard.ci_high, d.cosine.mean, d.cosine.ci_low, d.cosine.ci_high
        );
    }
    Ok(())
}
