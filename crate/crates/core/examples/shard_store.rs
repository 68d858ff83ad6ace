//! Record per-token activations from a planted world into a binary shard,
//! read it back, and draw a stratified sample of studies.

use std::collections::BTreeMap;

use sae_steer::activation_store::{
    collect_activations, read_shard, stratified_sample, write_shard, SampleManifest, ShardListing,
};
use sae_steer::toy_world::{generate_studies, generate_world, StudyConfig, WorldConfig};

fn main() -> sae_steer::Result<()> {
    let world = generate_world(&WorldConfig::default())?;
    let studies = generate_studies(&world, &StudyConfig::default())?;
    let refs: Vec<_> = studies.iter().map(|s| (s.study_id.clone(), s)).collect();
    let records = collect_activations(&world, &refs, 16, 512)?;

    let dir = std::env::temp_dir().join("sae_steer_shard_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("shard_l16.bin");
    let desc = write_shard(records, 16, &path)?;
    println!("wrote {} records of dim {} to {}", desc.count, desc.hidden_dim, path.display());

    let shard = read_shard(&path)?;
    println!("read back {} records from {} studies", shard.len(), shard.study_ids().len());

    let groups: BTreeMap<String, String> = studies
        .iter()
        .map(|s| (s.study_id.clone(), s.stratum.clone()))
        .collect();
    let mut group_labels: Vec<String> = groups.values().cloned().collect();
    group_labels.sort();
    group_labels.dedup();
    let manifest = SampleManifest {
        shards: vec![ShardListing {
            path: path.clone(),
            layer: 16,
            data_offset: 0,
            study_ids: shard.study_ids(),
        }],
        group_labels,
        groups,
        seed: 7,
    };
    let sample = stratified_sample(&manifest, 40, 2)?;
    println!("stratified sample: {:?}", sample.per_group);
    Ok(())
}
