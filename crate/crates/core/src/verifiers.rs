//! Verifiable reward functions operating on rendered model output.
//!
//! Classification responses are scored by exact match of the normalized class
//! name plus a format term. Detection responses carry a JSON list of
//! `{"category": ..., "bbox": [x1, y1, x2, y2]}` records; predictions are
//! matched one-to-one to ground truth with the Hungarian algorithm on a
//! same-class IoU score matrix.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Upper bound of the classification task reward (accuracy + format).
pub const CLASSIFICATION_R_MAX: f64 = 2.0;
/// Upper bound of the detection task reward (IoU + class + format).
pub const DETECTION_R_MAX: f64 = 3.0;
/// Format credit for valid tags around an unparsable detection answer.
pub const DETECTION_PARTIAL_FORMAT: f64 = 0.5;
/// IoU at which a matched same-class pair counts toward the class term.
pub const CLS_IOU_THRESHOLD: f64 = 0.5;

const TAGS: [&str; 4] = ["<think>", "</think>", "<answer>", "</answer>"];

static STRUCTURE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?s)^\s*<think>(.*?)</think>\s*<answer>(.*?)</answer>\s*$").unwrap()
});
static ANSWER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)<answer>(.*?)</answer>").unwrap());

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Detection,
}

/// Task-specific reward terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TaskScore {
    Classification { r_acc: f64 },
    Detection { r_iou: f64, r_cls: f64 },
}

/// All reward components of one rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub score: TaskScore,
    pub r_fmt: f64,
    pub r_task: f64,
    pub r_ret: Option<f64>,
    pub r_total: f64,
}

impl RewardBreakdown {
    fn from_task(score: TaskScore, r_fmt: f64) -> Self {
        let r_task = match score {
            TaskScore::Classification { r_acc } => r_acc + r_fmt,
            TaskScore::Detection { r_iou, r_cls } => r_iou + r_cls + r_fmt,
        };
        RewardBreakdown {
            score,
            r_fmt,
            r_task,
            r_ret: None,
            r_total: r_task,
        }
    }

    /// Attaches a retention reward and the resulting total.
    pub fn with_retention(mut self, r_ret: f64, r_total: f64) -> Self {
        self.r_ret = Some(r_ret);
        self.r_total = r_total;
        self
    }

    pub fn r_max(&self) -> f64 {
        match self.score {
            TaskScore::Classification { .. } => CLASSIFICATION_R_MAX,
            TaskScore::Detection { .. } => DETECTION_R_MAX,
        }
    }
}

fn tags_well_formed(text: &str) -> Option<(&str, &str)> {
    let caps = STRUCTURE.captures(text)?;
    let think = caps.get(1)?.as_str();
    let answer = caps.get(2)?.as_str();
    if TAGS.iter().any(|t| think.contains(t) || answer.contains(t)) {
        return None;
    }
    if answer.trim().is_empty() {
        return None;
    }
    Some((think, answer))
}

/// Content of the first `<answer>...</answer>` span, if any.
pub fn extract_answer(text: &str) -> Option<&str> {
    ANSWER.captures(text).and_then(|c| c.get(1)).map(|m| m.as_str())
}

/// Format reward. Classification: 1 iff the think and answer tag pairs are
/// present, in order, not nested, with a non-empty answer. Detection: 1 if
/// additionally the answer parses as a JSON list, 0.5 if it does not.
pub fn check_format(text: &str, kind: TaskKind) -> f64 {
    let Some((_, answer)) = tags_well_formed(text) else {
        return 0.0;
    };
    match kind {
        TaskKind::Classification => 1.0,
        TaskKind::Detection => {
            if parse_box_list(answer).is_some() {
                1.0
            } else {
                DETECTION_PARTIAL_FORMAT
            }
        }
    }
}

/// Lowercases, maps `_`, `-` and `.` to spaces, trims and collapses
/// whitespace runs.
pub fn normalize_name(name: &str) -> String {
    let mapped: String = name
        .chars()
        .map(|c| match c {
            '_' | '-' | '.' => ' ',
            c => c,
        })
        .collect::<String>()
        .to_lowercase();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Exact-match class reward plus format reward.
pub fn classification_reward(text: &str, gold: &str, vocab: &BTreeSet<String>) -> RewardBreakdown {
    let gold_norm = normalize_name(gold);
    debug_assert!(
        vocab.iter().any(|v| normalize_name(v) == gold_norm),
        "gold class {gold} not in candidate vocabulary"
    );
    let r_acc = match extract_answer(text) {
        Some(ans) if normalize_name(ans) == gold_norm => 1.0,
        _ => 0.0,
    };
    let r_fmt = check_format(text, TaskKind::Classification);
    RewardBreakdown::from_task(TaskScore::Classification { r_acc }, r_fmt)
}

/// Axis-aligned box in the `[0, 1000]` normalized frame with a normalized
/// category name. Construction rejects zero-area boxes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    category: String,
    x1: i64,
    y1: i64,
    x2: i64,
    y2: i64,
}

impl BoundingBox {
    pub fn new(category: &str, x1: i64, y1: i64, x2: i64, y2: i64) -> Option<Self> {
        let clip = |v: i64| v.clamp(0, 1000);
        let (x1, y1, x2, y2) = (clip(x1), clip(y1), clip(x2), clip(y2));
        (x2 > x1 && y2 > y1).then(|| BoundingBox {
            category: normalize_name(category),
            x1,
            y1,
            x2,
            y2,
        })
    }

    pub fn category(&self) -> &str {
        &self.category
    }

    pub fn coords(&self) -> [i64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn area(&self) -> i64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

/// Intersection over union.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0);
    let inter = w * h;
    if inter == 0 {
        return 0.0;
    }
    inter as f64 / (a.area() + b.area() - inter) as f64
}

/// Same-class IoU, zero for mismatched categories.
pub fn match_score(pred: &BoundingBox, gt: &BoundingBox) -> f64 {
    if pred.category == gt.category {
        iou(pred, gt)
    } else {
        0.0
    }
}

/// Result of [`match_boxes`].
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `(pred index, gt index)` for every assigned same-class pair, sorted by
    /// prediction index.
    pub pairs: Vec<(usize, usize)>,
    /// IoU of each pair in `pairs`.
    pub ious: Vec<f64>,
    pub total: f64,
}

/// Maximum-weight one-to-one assignment between predictions and ground truth.
pub fn match_boxes(pred: &[BoundingBox], gt: &[BoundingBox]) -> Matching {
    let scores: Vec<Vec<f64>> = pred
        .iter()
        .map(|p| gt.iter().map(|g| match_score(p, g)).collect())
        .collect();
    let assignment = max_weight_assignment(&scores, pred.len(), gt.len());
    let mut pairs = Vec::new();
    let mut ious = Vec::new();
    for (p, g) in assignment {
        if pred[p].category == gt[g].category {
            pairs.push((p, g));
            ious.push(scores[p][g]);
        }
    }
    let total = ious.iter().sum();
    Matching { pairs, ious, total }
}

/// Hungarian algorithm (shortest augmenting paths with potentials) on a
/// `rows x cols` score matrix. Returns `(row, col)` pairs of a
/// maximum-total-score assignment covering `min(rows, cols)` pairs.
pub fn max_weight_assignment(scores: &[Vec<f64>], rows: usize, cols: usize) -> Vec<(usize, usize)> {
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let transpose = rows > cols;
    let (n, m) = if transpose { (cols, rows) } else { (rows, cols) };
    let cost = |i: usize, j: usize| -> f64 {
        if transpose {
            -scores[j][i]
        } else {
            -scores[i][j]
        }
    };

    // 1-based arrays; column 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut out: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| {
            let (i, j) = (owner[j] - 1, j - 1);
            if transpose {
                (j, i)
            } else {
                (i, j)
            }
        })
        .collect();
    out.sort_unstable();
    out
}

fn parse_coord(v: &Value) -> Option<i64> {
    let x = v.as_f64()?;
    x.is_finite().then(|| x.round().clamp(-1.0e9, 1.0e9) as i64)
}

fn parse_record(v: &Value) -> Option<BoundingBox> {
    let obj = v.as_object()?;
    let category = obj.get("category")?.as_str()?;
    let bbox = obj.get("bbox")?.as_array()?;
    if bbox.len() != 4 {
        return None;
    }
    let c: Vec<i64> = bbox.iter().map(parse_coord).collect::<Option<_>>()?;
    BoundingBox::new(category, c[0], c[1], c[2], c[3])
}

/// Parses a detection answer. `None` when the text is not a JSON list;
/// otherwise the valid, non-degenerate boxes (invalid records are dropped).
pub fn parse_box_list(answer: &str) -> Option<Vec<BoundingBox>> {
    let value: Value = serde_json::from_str(answer.trim()).ok()?;
    let items = value.as_array()?;
    Some(items.iter().filter_map(parse_record).collect())
}

/// Detection reward: matched IoU, class hit rate and format.
pub fn detection_reward(text: &str, gt: &[BoundingBox], vocab: &BTreeSet<String>) -> RewardBreakdown {
    let r_fmt = check_format(text, TaskKind::Detection);
    let vocab: BTreeSet<String> = vocab.iter().map(|v| normalize_name(v)).collect();
    debug_assert!(gt.iter().all(|g| vocab.contains(g.category())));
    let preds = extract_answer(text).and_then(parse_box_list);
    let (r_iou, r_cls) = match preds {
        Some(preds) if !gt.is_empty() => {
            // Out-of-vocabulary categories can never match, but still count
            // as predictions.
            let matching = match_boxes(&preds, gt);
            let denom = gt.len().max(preds.len()) as f64;
            let hits = matching
                .ious
                .iter()
                .filter(|&&v| v >= CLS_IOU_THRESHOLD)
                .count() as f64;
            (matching.total / denom, hits / denom)
        }
        _ => (0.0, 0.0),
    };
    RewardBreakdown::from_task(TaskScore::Detection { r_iou, r_cls }, r_fmt)
}

/// Renders boxes in the detection answer wire format.
pub fn render_boxes(boxes: &[BoundingBox]) -> String {
    let items: Vec<Value> = boxes
        .iter()
        .map(|b| serde_json::json!({ "category": b.category, "bbox": b.coords() }))
        .collect();
    Value::Array(items).to_string()
}
