//! Action co-occurrence statistics and prior matrices.
//!
//! Counting is done at the image level: within one image, the label sets of
//! all instances sharing an object category are unioned, and two actions
//! co-occur for that object iff both appear in the union. Global counts union
//! over every instance regardless of object. Duplicate records with the same
//! image id are merged before counting, so statistics are independent of
//! record order and repetition.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{AcpError, Result};
use crate::space::{AnnotationRecord, HoiSpace};

/// Which label population a statistics block or prior matrix describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scope {
    /// All images, any object.
    Global,
    /// Images restricted to one object category.
    Object(usize),
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scope::Global => write!(f, "global"),
            Scope::Object(o) => write!(f, "object {o}"),
        }
    }
}

/// Image-level label counts for one scope.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopeStats {
    /// Number of images in the scope.
    pub n_images: u64,
    /// Per-action image counts, length N.
    pub n_single: Vec<u64>,
    /// Per-action-pair joint image counts, row-major N x N. Symmetric, and
    /// the diagonal equals `n_single`.
    pub n_joint: Vec<u64>,
}

impl ScopeStats {
    fn new(n_actions: usize) -> Self {
        ScopeStats {
            n_images: 0,
            n_single: vec![0; n_actions],
            n_joint: vec![0; n_actions * n_actions],
        }
    }

    pub fn joint(&self, i: usize, j: usize) -> u64 {
        self.n_joint[i * self.n_single.len() + j]
    }

    /// Add one image's unioned label set to the counts.
    fn add_image(&mut self, labels: &[usize]) {
        self.n_images += 1;
        let n = self.n_single.len();
        for &i in labels {
            self.n_single[i] += 1;
            for &j in labels {
                self.n_joint[i * n + j] += 1;
            }
        }
    }

    fn check(&self) -> Result<()> {
        let n = self.n_single.len();
        for i in 0..n {
            if self.n_single[i] > self.n_images {
                return Err(AcpError::Contract(format!(
                    "n_single[{i}] exceeds image count"
                )));
            }
            for j in 0..n {
                let nij = self.n_joint[i * n + j];
                if nij != self.n_joint[j * n + i] {
                    return Err(AcpError::Contract(format!("n_joint not symmetric at ({i},{j})")));
                }
                if nij > self.n_single[i].min(self.n_single[j]) {
                    return Err(AcpError::Contract(format!(
                        "n_joint[{i},{j}] exceeds marginals"
                    )));
                }
            }
            if self.joint(i, i) != self.n_single[i] {
                return Err(AcpError::Contract(format!("n_joint diagonal mismatch at {i}")));
            }
        }
        Ok(())
    }
}

/// Image-level co-occurrence counts, per object and aggregated globally.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CooccurrenceStats {
    pub n_actions: usize,
    pub per_object: BTreeMap<usize, ScopeStats>,
    pub global: ScopeStats,
}

impl CooccurrenceStats {
    pub fn scope(&self, scope: Scope) -> Option<&ScopeStats> {
        match scope {
            Scope::Global => Some(&self.global),
            Scope::Object(o) => self.per_object.get(&o),
        }
    }
}

/// Count image-level label statistics for every object and globally.
pub fn count_label_stats(dataset: &[AnnotationRecord], space: &HoiSpace) -> CooccurrenceStats {
    let n = space.n_actions();
    // Merge records by image id: per image, the union of actions per object
    // and the union of all actions.
    let mut per_image: BTreeMap<&str, BTreeMap<usize, Vec<bool>>> = BTreeMap::new();
    let mut global_image: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    for rec in dataset {
        let by_object = per_image.entry(rec.image_id.as_str()).or_default();
        let global = global_image
            .entry(rec.image_id.as_str())
            .or_insert_with(|| vec![false; n]);
        for inst in &rec.instances {
            let labels = by_object
                .entry(inst.object)
                .or_insert_with(|| vec![false; n]);
            for &a in &inst.actions {
                labels[a] = true;
                global[a] = true;
            }
        }
    }

    let mut per_object: BTreeMap<usize, ScopeStats> = BTreeMap::new();
    let mut global = ScopeStats::new(n);
    for (image_id, by_object) in &per_image {
        for (&object, labels) in by_object {
            let present: Vec<usize> =
                (0..n).filter(|&a| labels[a]).collect();
            per_object
                .entry(object)
                .or_insert_with(|| ScopeStats::new(n))
                .add_image(&present);
        }
        let present: Vec<usize> = (0..n).filter(|&a| global_image[image_id][a]).collect();
        global.add_image(&present);
    }

    CooccurrenceStats {
        n_actions: n,
        per_object,
        global,
    }
}

/// The co-occurrence prior matrix C and its complement C'.
///
/// `cooc[i][j]` is the conditional probability that action j occurs given
/// that action i occurs; `comp[i][j]` conditions on the absence of i. Rows
/// and columns of never-observed actions are all zero, including the
/// diagonal of C.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorMatrices {
    pub n_actions: usize,
    pub scope: Scope,
    /// Row-major N x N, entry (i, j) = p(j | i).
    pub cooc: Vec<f64>,
    /// Row-major N x N, entry (i, j) = p(j | not i). Diagonal is zero.
    pub comp: Vec<f64>,
}

impl PriorMatrices {
    pub fn cooc_at(&self, i: usize, j: usize) -> f64 {
        self.cooc[i * self.n_actions + j]
    }

    pub fn comp_at(&self, i: usize, j: usize) -> f64 {
        self.comp[i * self.n_actions + j]
    }
}

/// Build the prior matrices for one scope of the counted statistics.
///
/// `cooc[i][j] = n_joint(i,j) / n_single(i)` when `n_single(i) > 0`, else 0.
/// `comp[i][j] = (n_single(j) - n_joint(i,j)) / (n_images - n_single(i))`
/// when the denominator is positive, else 0; the diagonal is forced to 0.
pub fn build_priors(stats: &CooccurrenceStats, scope: Scope) -> Result<PriorMatrices> {
    let block = stats.scope(scope).ok_or_else(|| {
        AcpError::Contract(format!("no statistics recorded for scope {scope}"))
    })?;
    block.check()?;
    let n = stats.n_actions;
    let mut cooc = vec![0.0; n * n];
    let mut comp = vec![0.0; n * n];
    for i in 0..n {
        let ni = block.n_single[i];
        let absent = block.n_images - ni;
        for j in 0..n {
            let nij = block.joint(i, j);
            if ni > 0 {
                cooc[i * n + j] = nij as f64 / ni as f64;
            }
            if i != j && absent > 0 {
                comp[i * n + j] = (block.n_single[j] - nij) as f64 / absent as f64;
            }
        }
    }
    Ok(PriorMatrices {
        n_actions: n,
        scope,
        cooc,
        comp,
    })
}

/// Priors for every scope of a dataset: the global matrices plus one pair of
/// matrices per observed object, with the counts they were derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorBank {
    pub space: HoiSpace,
    pub stats: CooccurrenceStats,
    pub global: PriorMatrices,
    pub per_object: BTreeMap<usize, PriorMatrices>,
}

impl PriorBank {
    /// Count and derive priors for all scopes of a dataset.
    pub fn from_dataset(dataset: &[AnnotationRecord], space: &HoiSpace) -> Result<Self> {
        let stats = count_label_stats(dataset, space);
        let global = build_priors(&stats, Scope::Global)?;
        let mut per_object = BTreeMap::new();
        for &o in stats.per_object.keys() {
            per_object.insert(o, build_priors(&stats, Scope::Object(o))?);
        }
        Ok(PriorBank {
            space: space.clone(),
            stats,
            global,
            per_object,
        })
    }

    /// Matrices for an object, falling back to the global matrices (with a
    /// logged warning) when the object was never observed.
    pub fn for_object_or_global(&self, object: usize) -> &PriorMatrices {
        match self.per_object.get(&object) {
            Some(m) => m,
            None => {
                log::warn!(
                    "no per-object priors for object {object}; falling back to global matrices"
                );
                &self.global
            }
        }
    }

    /// Select matrices by flag: per-object when requested and available,
    /// global otherwise.
    pub fn select(&self, use_per_object: bool, object: usize) -> &PriorMatrices {
        if use_per_object {
            self.for_object_or_global(object)
        } else {
            &self.global
        }
    }
}
