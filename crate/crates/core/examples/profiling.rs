//! Profile where a few SAE features fire across generated reports and print
//! the summary table with the top activating contexts.

use sae_steer::activation_store::{collect_activations, ActivationShard};
use sae_steer::profiling::{profile_features, profiles_tsv, top_contexts, ReportRecord};
use sae_steer::steering::{NoHook, SteerableGenerator};
use sae_steer::toy_world::{generate_studies, generate_world, StudyConfig, WorldConfig};

fn main() -> sae_steer::Result<()> {
    let world = generate_world(&WorldConfig::default())?;
    let studies = generate_studies(&world, &StudyConfig { count: 60, seed: 2, ..Default::default() })?;
    let refs: Vec<_> = studies.iter().map(|s| (s.study_id.clone(), s)).collect();
    let shard = ActivationShard::new(16, collect_activations(&world, &refs, 16, usize::MAX)?)?;
    let reports = studies
        .iter()
        .map(|s| {
            Ok(ReportRecord {
                study_id: s.study_id.clone(),
                tokens: world.generate(s, &mut NoHook)?.step_texts(),
            })
        })
        .collect::<sae_steer::Result<Vec<_>>>()?;
    let sae = world.oracle_sae(8)?;
    let features = [world.presence, 3, 4, 5];
    let profiles = profile_features(&sae, &[shard], &reports, &features, 0.5)?;
    let contexts = top_contexts(&profiles, &reports, 3)?;
    print!("{}", profiles_tsv(&profiles, &contexts));
    for (j, ctx) in &contexts {
        for c in ctx {
            println!("feature {j}: {:.2} {:?}", c.activation, c.text);
        }
    }
    Ok(())
}
