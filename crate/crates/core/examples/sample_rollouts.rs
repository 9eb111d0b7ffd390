//! Builds the default task stream, samples a rollout group from the
//! pretrained policy for one training prompt, and scores each rollout.
//!
//! ```text
//! cargo run --example sample_rollouts -- [seed]
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rapo::env::{build_stream, describe, detokenize, OutputGrammar};
use rapo::policy::{greedy_decode, sample_rollout};
use rapo::retention::{annotate_anchor, drift};
use rapo::verifiers::classification_reward;
use rapo::ExperimentConfig;

fn main() -> rapo::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = ExperimentConfig::default();
    let stream = build_stream(&cfg.stream, seed)?;
    print!("{}", describe(&stream));

    let policy = stream.pretrained_policy(&cfg.init);
    let fmap = stream.feature_map();
    let (prompt, gold) = stream.train_prompts(1)?[0];
    let vocab = stream.candidate_names(1)?;
    let gold_name = OutputGrammar::class_name(gold);
    println!("\nprompt {prompt:#x}, gold {gold_name}, candidates {vocab:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..cfg.optim.group_size {
        let mut r = sample_rollout(&policy, &fmap, prompt, &mut rng);
        r.text = detokenize(&r.tokens, stream.grammar());
        let reward = classification_reward(&r.text, &gold_name, &vocab);
        // The anchor is the same policy here, so drift is zero.
        let d = drift(&annotate_anchor(&r, &policy, &fmap)?)?;
        println!(
            "{i}: r_task {:.1} drift {d:.3} logp {:>7.3}  {}",
            reward.r_task,
            r.actor_logprobs.iter().sum::<f64>(),
            r.text
        );
    }

    let greedy = greedy_decode(&policy, &fmap, prompt);
    println!("greedy: {}", detokenize(&greedy, stream.grammar()));
    Ok(())
}
