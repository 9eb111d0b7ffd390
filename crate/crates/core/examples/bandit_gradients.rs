//! Score-function gradients on a one-token, four-action bandit: Monte Carlo
//! error against the enumerated gradient, and exact gradient ascent.
//!
//! ```text
//! cargo run --release --example bandit_gradients
//! ```

use rapo::acceptance::{bandit_ascent, estimator_error_curve, log_log_slope};

fn main() -> rapo::Result<()> {
    let ms = [1_000, 10_000, 100_000, 1_000_000];
    let errs = estimator_error_curve(&ms, 8)?;
    println!("samples     rms relative error");
    for (m, e) in ms.iter().zip(&errs) {
        println!("{m:>9}   {e:.5}");
    }
    println!("log-log slope {:.3} (M^-1/2 gives -0.5)", log_log_slope(&ms, &errs));

    let curve = bandit_ascent(200, 5.0)?;
    println!("\nexact ascent, rewards [1.0, 0.2, 0.5, 0.0], lr 5");
    for step in [0, 1, 2, 4, 9, 49, 199] {
        println!("step {:>3}: expected reward {:.4}", step + 1, curve[step]);
    }
    Ok(())
}
