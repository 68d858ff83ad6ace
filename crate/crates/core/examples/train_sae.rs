//! Train a Top-K sparse autoencoder on planted sparse codes and check how
//! many of the planted atoms it recovers.

use sae_steer::topk_sae::{train, TrainConfig};
use sae_steer::toy_world::{generate_world, greedy_atom_matching, recovery_fraction, WorldConfig};

fn main() -> sae_steer::Result<()> {
    let world = generate_world(&WorldConfig {
        hidden_dim: 32,
        dict_size: 32,
        sigma: 0.01,
        seed: 1,
        ..Default::default()
    })?;
    let data = world.sample_codes(20_000, 4, 3)?;
    let (sae, outcome) = train(
        &data,
        &TrainConfig {
            dict_size: 64,
            k: 4,
            epochs: 10,
            seed: 2,
            ..Default::default()
        },
    )?;
    println!("final loss {:.5}", outcome.final_loss);
    println!(
        "held-out cosine {:.4}, dead fraction {:.3}",
        outcome.quality.mean_cosine, outcome.quality.dead_fraction
    );
    let matches = greedy_atom_matching(&world.atoms, &sae)?;
    let frac = recovery_fraction(&matches, world.atoms.len(), 0.9);
    println!("recovered {:.1}% of planted atoms at cosine >= 0.9", 100.0 * frac);
    Ok(())
}
