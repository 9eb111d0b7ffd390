//! Rule-based rewards: classification exact match and detection matching.
//!
//! ```text
//! cargo run --example verifiers
//! ```

use std::collections::BTreeSet;

use rapo::verifiers::{
    check_format, classification_reward, detection_reward, match_boxes, render_boxes, BoundingBox,
    TaskKind,
};

fn main() {
    let vocab: BTreeSet<String> = ["Great_Pyrenees", "tabby cat", "goldfish"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for text in [
        "<think>fluffy white dog</think> <answer>great pyrenees</answer>",
        "<answer>Great_Pyrenees</answer>",
        "<think>orange</think> <answer>goldfish</answer>",
        "<think>?</think> <answer></answer>",
    ] {
        let r = classification_reward(text, "Great_Pyrenees", &vocab);
        println!("{:<66} r_fmt {:.1} r_task {:.1}", text, r.r_fmt, r.r_task);
    }

    let gt = vec![
        BoundingBox::new("person", 100, 100, 300, 400).unwrap(),
        BoundingBox::new("dog", 350, 200, 500, 380).unwrap(),
    ];
    let pred = vec![
        BoundingBox::new("dog", 340, 210, 510, 390).unwrap(),
        BoundingBox::new("person", 110, 90, 290, 420).unwrap(),
        BoundingBox::new("cat", 0, 0, 50, 50).unwrap(),
    ];
    let m = match_boxes(&pred, &gt);
    println!("\nmatching pairs {:?} ious {:.3?} total {:.3}", m.pairs, m.ious, m.total);

    let names: BTreeSet<String> = ["person", "dog", "cat"].iter().map(|s| s.to_string()).collect();
    let text = format!("<think>two objects</think> <answer>{}</answer>", render_boxes(&pred));
    let r = detection_reward(&text, &gt, &names);
    println!("detection: {text}\n  -> {:?}", r.score);
    println!("  r_fmt {:.1} r_task {:.3}", r.r_fmt, r.r_task);

    let broken = "<think>x</think> <answer>not json</answer>";
    println!(
        "format credit for unparsable boxes: {}",
        check_format(broken, TaskKind::Detection)
    );
}
