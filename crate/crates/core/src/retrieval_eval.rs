//! Exhaustive descriptor retrieval and Recall@K.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qaa_agg::{read_descriptor_file, write_descriptor_file, Descriptor};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Allowed deviation of an indexed row's norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Position {
    Planar { x: f64, y: f64 },
    Geodetic { lat: f64, lon: f64 },
    Frame { index: i64 },
}

impl Position {
    fn kind(&self) -> &'static str {
        match self {
            Position::Planar { .. } => "planar",
            Position::Geodetic { .. } => "geodetic",
            Position::Frame { .. } => "frame",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "threshold", rename_all = "snake_case")]
pub enum PositiveCriterion {
    DistanceM(f64),
    Frames(u64),
}

impl PositiveCriterion {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PositiveCriterion::DistanceM(t) if !(t > 0.0) => {
                Err(Error::Criterion(format!("distance threshold must be > 0, got {t}")))
            }
            PositiveCriterion::Frames(0) => Err(Error::Criterion("frame threshold must be > 0".into())),
            _ => Ok(()),
        }
    }

    /// Whether `db` counts as a positive for `query`.
    pub fn is_positive(&self, query: &Position, db: &Position) -> Result<bool> {
        match (*self, query, db) {
            (PositiveCriterion::DistanceM(t), Position::Planar { x: x1, y: y1 }, Position::Planar { x: x2, y: y2 }) => {
                Ok((x1 - x2).hypot(y1 - y2) <= t)
            }
            (
                PositiveCriterion::DistanceM(t),
                Position::Geodetic { lat: a, lon: b },
                Position::Geodetic { lat: c, lon: d },
            ) => Ok(haversine(*a, *b, *c, *d)? <= t),
            (PositiveCriterion::Frames(t), Position::Frame { index: a }, Position::Frame { index: b }) => {
                Ok(a.abs_diff(*b) <= t)
            }
            (c, q, d) => Err(Error::Criterion(format!(
                "criterion {c} cannot compare a {} query with a {} database record",
                q.kind(),
                d.kind()
            ))),
        }
    }
}

impl fmt::Display for PositiveCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PositiveCriterion::DistanceM(t) => write!(f, "distance_m:{t}"),
            PositiveCriterion::Frames(t) => write!(f, "frames:{t}"),
        }
    }
}

/// Great-circle distance in meters.
pub fn haversine(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> Result<f64> {
    for (lat, lon) in [(lat1, lon1), (lat2, lon2)] {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::Argument(format!("coordinate ({lat}, {lon}) is out of range")));
        }
    }
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaceRecord {
    pub descriptor: Descriptor,
    pub position: Position,
    pub dataset: String,
}

/// Packed `count × C_d` descriptors stored as `f32`, so an index survives a
/// save/load round trip bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    dim: usize,
    rows: Vec<f32>,
    ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub row: usize,
    pub id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopK {
    pub hits: Vec<Hit>,
    /// Set when `k` exceeded the index size.
    pub truncated: bool,
}

pub fn build_index(records: &[PlaceRecord]) -> Result<RetrievalIndex> {
    let descs: Vec<&Descriptor> = records.iter().map(|r| &r.descriptor).collect();
    RetrievalIndex::from_refs(&descs)
}

impl RetrievalIndex {
    pub fn from_descriptors(descriptors: &[Descriptor]) -> Result<Self> {
        Self::from_refs(&descriptors.iter().collect::<Vec<_>>())
    }

    fn from_refs(descriptors: &[&Descriptor]) -> Result<Self> {
        let first = descriptors
            .first()
            .ok_or_else(|| Error::Argument("cannot index an empty record set".into()))?;
        let dim = first.dim();
        let mut rows = Vec::with_capacity(descriptors.len() * dim);
        let mut ids = Vec::with_capacity(descriptors.len());
        for d in descriptors {
            if d.dim() != dim {
                return Err(Error::dim(
                    "build_index",
                    format!("C_d {dim}"),
                    format!("{} has {}", d.image_id, d.dim()),
                ));
            }
            let norm = d.norm();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::Argument(format!(
                    "descriptor {} has norm {norm}, expected 1 ± {NORM_TOLERANCE}",
                    d.image_id
                )));
            }
            rows.extend(d.values.iter().map(|&v| v as f32));
            ids.push(d.image_id.clone());
        }
        Ok(RetrievalIndex { dim, rows, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let descs: Vec<Descriptor> = (0..self.len())
            .map(|i| Descriptor::new(self.row(i).iter().map(|&v| v as f64).collect(), self.ids[i].clone()))
            .collect();
        write_descriptor_file(path, &descs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_descriptors(&read_descriptor_file(path)?)
    }

    fn scores(&self, query: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.row(i).iter().zip(query).map(|(&a, b)| a as f64 * b).sum())
            .collect()
    }

    /// Exhaustive inner-product ranking; ties go to the smaller id.
    pub fn top_k(&self, query: &Descriptor, k: usize) -> Result<TopK> {
        if k == 0 {
            return Err(Error::Argument("k must be >= 1".into()));
        }
        if query.dim() != self.dim {
            return Err(Error::dim(
                "top_k",
                format!("index C_d {}", self.dim),
                format!("query {}", query.dim()),
            ));
        }
        let scores = self.scores(&query.values);
        let mut order: Vec<usize> = (0..self.len()).collect();
        let by_rank = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then_with(|| self.ids[*a].cmp(&self.ids[*b]));
        let keep = k.min(order.len());
        if keep < order.len() {
            order.select_nth_unstable_by(keep - 1, by_rank);
            order.truncate(keep);
        }
        order.sort_by(by_rank);
        Ok(TopK {
            hits: order
                .into_iter()
                .map(|i| Hit {
                    row: i,
                    id: self.ids[i].clone(),
                    score: scores[i],
                })
                .collect(),
            truncated: k > self.len(),
        })
    }
}

/// Free-function form of [`RetrievalIndex::top_k`].
pub fn top_k(query: &Descriptor, index: &RetrievalIndex, k: usize) -> Result<TopK> {
    index.top_k(query, k)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecallReport {
    pub dataset: String,
    pub k: usize,
    pub criterion: String,
    pub recall: f64,
    pub evaluated_queries: usize,
    /// Queries with no positive in the database; left out of the denominator.
    pub excluded_queries: usize,
}

/// Recall@K for each `k` in `ks` from a single ranking pass.
pub fn recall_at_ks(
    dataset: &str,
    queries: &[PlaceRecord],
    database: &[PlaceRecord],
    ks: &[usize],
    criterion: PositiveCriterion,
) -> Result<Vec<RecallReport>> {
    criterion.validate()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Argument("k values must be >= 1".into()));
    }
    let index = build_index(database)?;
    let max_k = *ks.iter().max().unwrap();

    // Per query: None when it has no positive, else rank of the first positive.
    let first_hits = queries
        .par_iter()
        .map(|q| -> Result<Option<Option<usize>>> {
            let positives = database
                .iter()
                .map(|d| criterion.is_positive(&q.position, &d.position))
                .collect::<Result<Vec<bool>>>()?;
            if !positives.iter().any(|&p| p) {
                return Ok(None);
            }
            let ranked = index.top_k(&q.descriptor, max_k)?;
            Ok(Some(ranked.hits.iter().position(|h| positives[h.row])))
        })
        .collect::<Result<Vec<_>>>()?;

    let excluded = first_hits.iter().filter(|h| h.is_none()).count();
    let evaluated = queries.len() - excluded;
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first_hits
                .iter()
                .filter(|h| matches!(h, Some(Some(rank)) if *rank < k))
                .count();
            RecallReport {
                dataset: dataset.to_string(),
                k,
                criterion: criterion.to_string(),
                recall: if evaluated == 0 { 0.0 } else { hits as f64 / evaluated as f64 },
                evaluated_queries: evaluated,
                excluded_queries: excluded,
            }
        })
        .collect())
}

pub fn recall_at_k(
    queries: &[PlaceRecord],
    database: &[PlaceRecord],
    k: usize,
    criterion: PositiveCriterion,
) -> Result<RecallReport> {
    let dataset = queries.first().map_or("", |q| q.dataset.as_str()).to_string();
    Ok(recall_at_ks(&dataset, queries, database, &[k], criterion)?.remove(0))
}

/// `dataset,k,criterion,recall,excluded_queries` with a header.
pub fn reports_to_csv(reports: &[RecallReport]) -> String {
    let mut out = String::from("dataset,k,criterion,recall,excluded_queries\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{:.6},{}\n",
            r.dataset, r.k, r.criterion, r.recall, r.excluded_queries
        ));
    }
    out
}
