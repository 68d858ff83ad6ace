//! End-to-end run on a planted world: screen features with an oracle SAE,
//! search a small steering grid, then test the winning plan on held-out
//! studies with a paired bootstrap.

use std::collections::BTreeMap;

use sae_steer::bootstrap::Resampling;
use sae_steer::clinical_metrics::{composite, paired_bootstrap, Alternative};
use sae_steer::feature_select::{build_ranked_lists, causal_screen, AblationMode, ScreenConfig};
use sae_steer::steering::{grid_search, steer_generation, EditDirections, GridSpec, SteerMode, SteerableGenerator};
use sae_steer::topk_sae::SaeModel;
use sae_steer::toy_world::{generate_studies, generate_world, toy_scores, StudyConfig, ToyOracle, WorldConfig};

fn main() -> sae_steer::Result<()> {
    let world = generate_world(&WorldConfig {
        drivers: WorldConfig::parse_drivers("FF:2,MF:2")?,
        ..Default::default()
    })?;
    let panel = generate_studies(&world, &StudyConfig { count: 48, seed: 2, ..Default::default() })?;
    let test = generate_studies(&world, &StudyConfig { count: 150, seed: 3, ..Default::default() })?;
    let sae = world.oracle_sae(8)?;
    let candidates: Vec<usize> = (0..sae.dict_size()).collect();

    let layers = [8, 16];
    let mut saes = BTreeMap::new();
    let mut lists = BTreeMap::new();
    for &layer in &layers {
        let cfg = ScreenConfig {
            layer,
            mode: AblationMode::Zero,
            min_word_f1: None,
        };
        let table = causal_screen(&sae, &panel, &world, &ToyOracle, &candidates, &cfg)?;
        lists.insert(layer, build_ranked_lists(&table));
        saes.insert(layer, sae.clone());
    }

    let spec = GridSpec {
        alphas: vec![0.1, 0.25, 0.5],
        k_budgets: vec![6, 12],
        betas: vec![0.5],
        modes: vec![SteerMode::Residual],
        directions: vec![EditDirections::Combined, EditDirections::SuppressOnly],
        layer_subsets: vec![vec![16], layers.to_vec()],
    };
    let grid = grid_search(&world, &saes, &lists, &spec, &panel, |s, r| {
        let sv = toy_scores(&r.tokens(), &s.reference)?;
        Ok((composite(&sv)?, sv.green.unwrap_or(0.0)))
    })?;
    let best = &grid.rows[grid.best];
    println!(
        "grid: baseline composite {:.4}, best {:.4} at {:?}",
        grid.baseline_composite, best.mean_composite, best.point
    );

    let plan = best.point.plan(&lists)?;
    let score = |s: &_, saes: &BTreeMap<usize, SaeModel>, steered: bool| -> sae_steer::Result<f64> {
        let r = if steered {
            steer_generation(&world, &plan, saes, s)?
        } else {
            world.generate(s, &mut sae_steer::steering::NoHook)?
        };
        composite(&toy_scores(&r.tokens(), &s.reference)?)
    };
    let base: Vec<f64> = test.iter().map(|s| score(s, &saes, false)).collect::<sae_steer::Result<_>>()?;
    let steered: Vec<f64> = test.iter().map(|s| score(s, &saes, true)).collect::<sae_steer::Result<_>>()?;
    let r = paired_bootstrap(&base, &steered, Resampling::random(5_000, 1), Alternative::Greater, 0.95)?;
    println!(
        "held-out composite delta {:.4}, 95% CI [{:.4}, {:.4}], p = {:.4}",
        r.mean_delta, r.ci_low, r.ci_high, r.p_value
    );
    Ok(())
}
