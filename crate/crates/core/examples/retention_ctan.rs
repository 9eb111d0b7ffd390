//! Retention reward and advantage normalization on a synthetic reward stream.
//!
//! Rewards have a small spread during the first "task" and a large one in the
//! second. Group-std normalization rescales every group to unit spread, while
//! CTAN keeps one slowly moving scale across the boundary.
//!
//! ```text
//! cargo run --example retention_ctan
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rapo::retention::{
    apply_gating_variant, ctan_update, group_advantages, population_std, retention_reward,
    total_reward, AdvantageMode, CtanState, GatingVariant, RetentionConfig,
};

fn main() -> rapo::Result<()> {
    let cfg = RetentionConfig::default();
    println!("retention reward exp(-{} d):", cfg.alpha);
    for d in [0.0, 0.01, 0.05, 0.1, 0.3] {
        println!("  d = {d:<5} r_ret = {:.4}", retention_reward(d, &cfg));
    }

    let rewards = [2.0, 2.0, 2.0, 0.0];
    let drifts = [0.01, 0.08, 0.02, 0.05];
    let totals: Vec<f64> = rewards
        .iter()
        .zip(&drifts)
        .map(|(&r, &d)| total_reward(r, retention_reward(d, &cfg), &cfg, 2))
        .collect();
    let fresh = CtanState::new(0.999)?;
    println!("\ngroup rewards {rewards:?}, drifts {drifts:?}");
    println!("  totals     {:.3?}", totals);
    println!(
        "  advantages {:.3?}",
        group_advantages(&totals, AdvantageMode::BatchSigma, &fresh, 1e-4)?
    );
    for v in [GatingVariant::LowDriftOnly, GatingVariant::HighDriftOnly] {
        let all_correct = [2.0; 4];
        println!(
            "  {v:?} on an all-correct group: {:?}",
            apply_gating_variant(&all_correct, &drifts, 2.0, v)
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut state = CtanState::new(0.99)?;
    println!("\nstep  sigma_batch  sigma_hat  sum|A| group-std  sum|A| ctan");
    for step in 0..60 {
        let spread = if step < 30 { 0.2 } else { 1.0 };
        let batch: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..8).map(|_| rng.gen_range(0.0..spread)).collect())
            .collect();
        let flat: Vec<f64> = batch.iter().flatten().copied().collect();
        let sigma = population_std(&flat);
        state = ctan_update(state, sigma);
        let mut mag = [0.0; 2];
        for g in &batch {
            for (k, mode) in [AdvantageMode::BatchSigma, AdvantageMode::Ctan].into_iter().enumerate() {
                mag[k] += group_advantages(g, mode, &state, 1e-4)?
                    .iter()
                    .map(|a| a.abs())
                    .sum::<f64>();
            }
        }
        if step % 5 == 0 || (28..34).contains(&step) {
            println!(
                "{step:>4}  {sigma:>11.4}  {:>9.4}  {:>16.3}  {:>11.3}",
                state.sigma_hat, mag[0], mag[1]
            );
        }
    }
    Ok(())
}
