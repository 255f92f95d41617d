//! Geometric candidate generation for visual relational components and the
//! count-fitting policy for component lists.
//!
//! Visual entities arrive as detector boxes. Every unordered pair of boxes
//! proposes a relation candidate: the minimal box enclosing both members,
//! scored by the product of the member confidences. The top-m candidates by
//! score survive. Component lists are then truncated or padded to the
//! configured slot counts.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Axis-aligned detection rectangle with a confidence score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl DetectionBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, confidence: f64) -> Result<Self> {
        let b = DetectionBox {
            x1,
            y1,
            x2,
            y2,
            confidence,
            label: None,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(Error::config(format!(
                "box coordinates must be ordered: ({}, {}, {}, {})",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::config(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn contains(&self, other: &DetectionBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }
}

/// A candidate region for a visual relation: the union box of an object
/// pair, scored by the product of the member confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationCandidate {
    pub subject_index: usize,
    pub object_index: usize,
    pub boxed: DetectionBox,
    pub score: f64,
}

/// Minimal box enclosing both inputs; confidence is the product of the
/// member confidences.
pub fn enclosing_box(a: &DetectionBox, b: &DetectionBox) -> DetectionBox {
    DetectionBox {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
        confidence: a.confidence * b.confidence,
        label: None,
    }
}

/// All unordered box pairs, scored by confidence product, sorted by
/// (score desc, union area asc, index pair asc); the top `m` survive.
/// Fewer than two boxes yields an empty list.
pub fn relation_candidates(boxes: &[DetectionBox], m: usize) -> Vec<RelationCandidate> {
    let mut candidates = Vec::new();
    for i in 0..boxes.len() {
        for j in (i + 1)..boxes.len() {
            let boxed = enclosing_box(&boxes[i], &boxes[j]);
            let score = boxed.confidence;
            candidates.push(RelationCandidate {
                subject_index: i,
                object_index: j,
                boxed,
                score,
            });
        }
    }
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.boxed.area().partial_cmp(&b.boxed.area()).unwrap())
            .then(a.subject_index.cmp(&b.subject_index))
            .then(a.object_index.cmp(&b.object_index))
    });
    candidates.truncate(m);
    candidates
}

/// A component list fitted to a fixed slot count: real payloads first,
/// zero-padding after, with a mask marking the real slots.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedList<T> {
    pub items: Vec<T>,
    pub mask: Vec<bool>,
}

impl<T> FittedList<T> {
    pub fn real_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Fits `components` to exactly `k` slots. With a ranking (the visual path)
/// the top-k by score descending survive, ordered by rank; without one (the
/// textual path) the first k in occurrence order survive. `pad` fills the
/// remaining slots with their mask bits false.
pub fn fit_to_count<T: Clone>(
    components: &[T],
    k: usize,
    ranking: Option<&[f64]>,
    pad: T,
) -> Result<FittedList<T>> {
    if let Some(scores) = ranking {
        if scores.len() != components.len() {
            return Err(Error::shape(
                "fit_to_count ranking",
                &[components.len()],
                &[scores.len()],
            ));
        }
    }
    let kept: Vec<T> = match ranking {
        Some(scores) => {
            let mut order: Vec<usize> = (0..components.len()).collect();
            // Stable sort: equal scores keep occurrence order.
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
            order
                .into_iter()
                .take(k)
                .map(|i| components[i].clone())
                .collect()
        }
        None => components.iter().take(k).cloned().collect(),
    };
    let real = kept.len();
    let mut items = kept;
    let mut mask = vec![true; real];
    items.resize(k, pad);
    mask.resize(k, false);
    Ok(FittedList { items, mask })
}
