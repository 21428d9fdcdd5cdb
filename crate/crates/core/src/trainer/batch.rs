//! Batch composition: `k` places per dataset, `m` images per place.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qaa_agg::FeatureMap;
use crate::synth_data::{sample_distinct, Dataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    /// Number of datasets.
    pub n: usize,
    pub k: usize,
    pub m: usize,
}

impl BatchPlan {
    pub fn new(n: usize, k: usize, m: usize) -> Self {
        BatchPlan { n, k, m }
    }

    pub fn places(&self) -> usize {
        self.n * self.k
    }

    pub fn images(&self) -> usize {
        self.n * self.k * self.m
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 || self.m == 0 {
            return Err(Error::Config(format!("batch plan needs n, k, m >= 1, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BatchItem<'a> {
    pub features: &'a FeatureMap,
    pub dataset: usize,
    pub place_id: usize,
    /// Shared by images of the same (dataset, place); distinct otherwise.
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct LabeledBatch<'a> {
    pub items: Vec<BatchItem<'a>>,
}

impl LabeledBatch<'_> {
    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Samples places without replacement in each dataset, then `m` distinct
/// observations per place. Items are grouped by dataset, then place.
pub fn compose_batch<'a>(datasets: &'a [Dataset], plan: &BatchPlan, rng: &mut ChaCha8Rng) -> Result<LabeledBatch<'a>> {
    plan.validate()?;
    if datasets.len() != plan.n {
        return Err(Error::Config(format!(
            "batch plan expects {} datasets, got {}",
            plan.n,
            datasets.len()
        )));
    }
    for ds in datasets {
        if ds.places.len() < plan.k {
            return Err(Error::Data(format!(
                "dataset {} has {} places, batch needs {}",
                ds.name,
                ds.places.len(),
                plan.k
            )));
        }
        if let Some((i, p)) = ds.places.iter().enumerate().find(|(_, p)| p.len() < plan.m) {
            return Err(Error::Data(format!(
                "dataset {} place slot {i} has {} images, batch needs {}",
                ds.name,
                p.len(),
                plan.m
            )));
        }
    }
    let mut items = Vec::with_capacity(plan.images());
    for (di, ds) in datasets.iter().enumerate() {
        for (slot, pi) in sample_distinct(rng, ds.places.len(), plan.k).into_iter().enumerate() {
            let obs = &ds.places[pi];
            let label = di * plan.k + slot;
            for oi in sample_distinct(rng, obs.len(), plan.m) {
                items.push(BatchItem {
                    features: &obs[oi].features,
                    dataset: di,
                    place_id: obs[oi].place_id,
                    label,
                });
            }
        }
    }
    Ok(LabeledBatch { items })
}
