//! Sparse pairwise reflectance judgements.
//!
//! JSON layout: `{"points": [{"id": 0, "x": 0.1, "y": 0.2}, ...], "pairs": [{"point1": 0,
//! "point2": 1, "darker": "1", "weight": 0.8}, ...]}` with coordinates normalized to [0, 1].
//! The IIW field names `intrinsic_points`, `intrinsic_comparisons` and `darker_score` are
//! accepted as aliases. `id` defaults to the point's position in the array.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PointRecord {
    #[serde(default)]
    id: Option<i64>,
    x: f64,
    y: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PairRecord {
    point1: i64,
    point2: i64,
    darker: String,
    #[serde(alias = "darker_score", default = "one")]
    weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FileRecord {
    #[serde(alias = "intrinsic_points")]
    points: Vec<PointRecord>,
    #[serde(alias = "intrinsic_comparisons")]
    pairs: Vec<PairRecord>,
}

/// One comparison. `relation` is +1 when point `i` has the brighter reflectance,
/// -1 when it is darker and 0 when both are judged equal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Judgement {
    pub i: (f64, f64),
    pub j: (f64, f64),
    pub relation: i8,
    pub weight: f64,
}

impl Judgement {
    /// Pixel index of each point on a `width` x `height` grid (nearest pixel center).
    pub fn pixels(&self, width: usize, height: usize) -> (usize, usize) {
        let px = |(x, y): (f64, f64)| {
            let cx = ((x * width as f64).floor() as usize).min(width - 1);
            let cy = ((y * height as f64).floor() as usize).min(height - 1);
            cy * width + cx
        };
        (px(self.i), px(self.j))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct JudgementSet {
    pub judgements: Vec<Judgement>,
}

/// Maps the annotation's "darker" field to a relation. "1" means the first point is darker.
pub fn relation_from_darker(darker: &str) -> Option<i8> {
    match darker {
        "1" => Some(-1),
        "2" => Some(1),
        "E" => Some(0),
        _ => None,
    }
}

impl JudgementSet {
    pub fn from_json(text: &str) -> Result<Self> {
        let rec: FileRecord = serde_json::from_str(text)?;
        let mut by_id = HashMap::new();
        for (k, p) in rec.points.iter().enumerate() {
            if !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y) {
                return contract(format!("point {k} at ({}, {}) is outside [0,1]^2", p.x, p.y));
            }
            by_id.insert(p.id.unwrap_or(k as i64), (p.x, p.y));
        }
        let mut judgements = Vec::with_capacity(rec.pairs.len());
        for pair in &rec.pairs {
            let (Some(&i), Some(&j)) = (by_id.get(&pair.point1), by_id.get(&pair.point2)) else {
                return contract(format!("pair references unknown point {} or {}", pair.point1, pair.point2));
            };
            let Some(relation) = relation_from_darker(&pair.darker) else {
                return contract(format!("darker must be \"1\", \"2\" or \"E\", got {:?}", pair.darker));
            };
            if !(pair.weight >= 0.0) {
                return contract(format!("negative judgement weight {}", pair.weight));
            }
            judgements.push(Judgement {
                i,
                j,
                relation,
                weight: pair.weight,
            });
        }
        Ok(JudgementSet { judgements })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let mut points = Vec::new();
        let mut pairs = Vec::new();
        for j in &self.judgements {
            let id = points.len() as i64;
            points.push(PointRecord { id: Some(id), x: j.i.0, y: j.i.1 });
            points.push(PointRecord { id: Some(id + 1), x: j.j.0, y: j.j.1 });
            let darker = match j.relation {
                -1 => "1",
                1 => "2",
                _ => "E",
            };
            pairs.push(PairRecord {
                point1: id,
                point2: id + 1,
                darker: darker.into(),
                weight: j.weight,
            });
        }
        serde_json::to_string_pretty(&FileRecord { points, pairs }).expect("serializable")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    pub fn len(&self) -> usize {
        self.judgements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judgements.is_empty()
    }
}
