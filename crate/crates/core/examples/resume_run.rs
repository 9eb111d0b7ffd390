//! Checkpointing: stops a RaPO run halfway through the stream, resumes it
//! from disk, and compares the result with an uninterrupted run.
//!
//! ```text
//! cargo run --release --example resume_run -- [out_dir]
//! ```

use std::path::PathBuf;

use rapo::harness::{load_checkpoint, run_seed, RunOptions, RunOutcome};
use rapo::{Algorithm, ExperimentConfig};

fn main() -> rapo::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("rapo-resume-example"));
    let _ = std::fs::remove_dir_all(&out);
    let cfg = ExperimentConfig::default();
    let half = cfg.stream.num_tasks / 2;

    let straight = run_seed(&cfg, Algorithm::Rapo, 0, &RunOptions::default())?
        .into_record()
        .expect("uninterrupted run completes");

    let opts = RunOptions {
        dir: Some(out.clone()),
        resume: true,
        stop_after_task: Some(half),
    };
    match run_seed(&cfg, Algorithm::Rapo, 0, &opts)? {
        RunOutcome::Stopped { tasks_completed } => println!("stopped after task {tasks_completed}"),
        RunOutcome::Completed(_) => unreachable!("stop_after_task is before the last task"),
    }
    let (_, ctan) = load_checkpoint(&out.join(format!("checkpoint_task{half:02}.bin")))?;
    println!("saved sigma_hat {:.6} (beta {})", ctan.sigma_hat, ctan.beta);

    let resumed = run_seed(
        &cfg,
        Algorithm::Rapo,
        0,
        &RunOptions {
            stop_after_task: None,
            ..opts
        },
    )?
    .into_record()
    .expect("resumed run completes");

    for b in &resumed.boundaries {
        println!(
            "task {:>2}: sigma_hat in {:.6} out {:.6}",
            b.task, b.sigma_hat_start, b.sigma_hat_end
        );
    }
    println!(
        "A {:.4} / {:.4}, F {:.4} / {:.4} (straight / resumed); identical: {}",
        straight.last_accuracy,
        resumed.last_accuracy,
        straight.forgetting,
        resumed.forgetting,
        straight.eval == resumed.eval && straight.logs == resumed.logs
    );
    println!("run files in {}", out.display());
    Ok(())
}
