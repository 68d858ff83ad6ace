//! Zero-ablate every dictionary feature on a small panel and rank the
//! features whose removal lowers each error type.

use sae_steer::clinical_metrics::ErrorType;
use sae_steer::feature_select::{build_ranked_lists, causal_screen, AblationMode, ScreenConfig};
use sae_steer::toy_world::{generate_studies, generate_world, StudyConfig, ToyOracle, WorldConfig};

fn main() -> sae_steer::Result<()> {
    let world = generate_world(&WorldConfig {
        hidden_dim: 64,
        dict_size: 64,
        sigma: 0.0,
        drivers: WorldConfig::parse_drivers("FF:2,MF:2,WL:1,WS:1")?,
        seed: 1,
        ..Default::default()
    })?;
    let panel = generate_studies(&world, &StudyConfig { count: 48, seed: 4, ..Default::default() })?;
    let sae = world.oracle_sae(8)?;
    let candidates: Vec<usize> = (0..64).collect();
    let cfg = ScreenConfig {
        layer: 16,
        mode: AblationMode::Zero,
        min_word_f1: None,
    };
    let table = causal_screen(&sae, &panel, &world, &ToyOracle, &candidates, &cfg)?;
    let lists = build_ranked_lists(&table);
    for t in [ErrorType::FF, ErrorType::MF, ErrorType::WL, ErrorType::WS] {
        let top: Vec<usize> = lists.suppress[t].iter().take(4).copied().collect();
        println!("{}: planted {:?}, top suppress {:?}", t.as_str(), world.drivers_of(t), top);
    }
    Ok(())
}
