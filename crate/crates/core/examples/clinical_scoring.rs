//! Score error counts with GREEN and the weighted composite, then test a
//! paired improvement with the bootstrap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sae_steer::bootstrap::Resampling;
use sae_steer::clinical_metrics::{composite, green_score, paired_bootstrap, Alternative, ErrorCounts, ScoreVector};

fn main() -> sae_steer::Result<()> {
    let c = ErrorCounts {
        matched: 6,
        ff: 1,
        mf: 2,
        ..Default::default()
    };
    let green = green_score(&c);
    let comp = composite(&ScoreVector::new(green, 0.31, 0.42, 0.55))?;
    println!("GREEN {green:.4}, composite {comp:.4}");

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base: Vec<f64> = (0..200).map(|_| rng.gen_range(0.2..0.6)).collect();
    let steered: Vec<f64> = base.iter().map(|b| b + rng.gen_range(-0.02..0.06)).collect();
    let r = paired_bootstrap(&base, &steered, Resampling::random(10_000, 7), Alternative::Greater, 0.95)?;
    println!(
        "mean delta {:.4}, 95% CI [{:.4}, {:.4}], p = {:.4}",
        r.mean_delta, r.ci_low, r.ci_high, r.p_value
    );
    Ok(())
}
