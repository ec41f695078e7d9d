//! Label-space vocabulary and annotation ingestion.
//!
//! The label space ties together an ordered action vocabulary, an ordered
//! object vocabulary, and the list of valid (object, action) interaction
//! classes. Annotations reference the vocabularies by name; everything
//! downstream works with indices.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{AcpError, Result};

/// Default training-sample count below which an interaction class is "rare".
pub const DEFAULT_RARE_THRESHOLD: u32 = 10;

/// The label space: action names, object names, and the valid
/// (object, action) interaction classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoiSpace {
    /// Ordered action vocabulary (length N).
    pub actions: Vec<String>,
    /// Ordered object vocabulary (length |O|).
    pub objects: Vec<String>,
    /// Ordered list of valid (object_index, action_index) classes (length M).
    pub hoi_classes: Vec<(usize, usize)>,
    /// Training-sample count below which a class counts as rare.
    pub rare_threshold: u32,
}

impl HoiSpace {
    /// Build a space from explicit vocabularies, validating uniqueness and
    /// index bounds.
    pub fn new(
        actions: Vec<String>,
        objects: Vec<String>,
        hoi_classes: Vec<(usize, usize)>,
        rare_threshold: u32,
    ) -> Result<Self> {
        let space = HoiSpace {
            actions,
            objects,
            hoi_classes,
            rare_threshold,
        };
        space.validate()?;
        Ok(space)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for a in &self.actions {
            if !seen.insert(a.as_str()) {
                return Err(AcpError::Contract(format!("duplicate action name {a:?}")));
            }
        }
        let mut seen = BTreeSet::new();
        for o in &self.objects {
            if !seen.insert(o.as_str()) {
                return Err(AcpError::Contract(format!("duplicate object name {o:?}")));
            }
        }
        let mut seen = BTreeSet::new();
        for &(o, a) in &self.hoi_classes {
            if o >= self.objects.len() || a >= self.actions.len() {
                return Err(AcpError::Contract(format!(
                    "hoi class ({o}, {a}) out of vocabulary bounds"
                )));
            }
            if !seen.insert((o, a)) {
                return Err(AcpError::Contract(format!("duplicate hoi class ({o}, {a})")));
            }
        }
        Ok(())
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn n_hoi_classes(&self) -> usize {
        self.hoi_classes.len()
    }

    pub fn action_index(&self, name: &str) -> Result<usize> {
        self.actions
            .iter()
            .position(|a| a == name)
            .ok_or_else(|| AcpError::Vocab {
                kind: "action",
                name: name.to_string(),
            })
    }

    pub fn object_index(&self, name: &str) -> Result<usize> {
        self.objects
            .iter()
            .position(|o| o == name)
            .ok_or_else(|| AcpError::Vocab {
                kind: "object",
                name: name.to_string(),
            })
    }

    /// Index of the (object, action) class, if it is a valid class.
    pub fn hoi_index(&self, object: usize, action: usize) -> Option<usize> {
        self.hoi_classes.iter().position(|&c| c == (object, action))
    }

    /// Map from (object, action) to class index, for repeated lookups.
    pub fn hoi_index_map(&self) -> BTreeMap<(usize, usize), usize> {
        self.hoi_classes
            .iter()
            .enumerate()
            .map(|(m, &c)| (c, m))
            .collect()
    }

    /// Derive a space from annotations: vocabularies are the sorted unique
    /// names, classes are the observed (object, action) pairs.
    pub fn from_annotations(records: &[RawAnnotationRecord]) -> Result<Self> {
        let mut actions = BTreeSet::new();
        let mut objects = BTreeSet::new();
        for rec in records {
            for inst in &rec.instances {
                objects.insert(inst.object.clone());
                for a in &inst.actions {
                    actions.insert(a.clone());
                }
            }
        }
        let actions: Vec<String> = actions.into_iter().collect();
        let objects: Vec<String> = objects.into_iter().collect();
        let mut classes = BTreeSet::new();
        for rec in records {
            for inst in &rec.instances {
                let o = objects.iter().position(|x| x == &inst.object).unwrap();
                for a in &inst.actions {
                    let a = actions.iter().position(|x| x == a).unwrap();
                    classes.insert((o, a));
                }
            }
        }
        HoiSpace::new(
            actions,
            objects,
            classes.into_iter().collect(),
            DEFAULT_RARE_THRESHOLD,
        )
    }
}

/// Axis-aligned box as (x1, y1, x2, y2) in pixels.
pub type Box4 = [f64; 4];

pub fn box_is_well_formed(b: &Box4) -> bool {
    b.iter().all(|v| v.is_finite()) && b[0] < b[2] && b[1] < b[3]
}

/// One human-object instance as it appears on disk (names unresolved).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawInstance {
    pub human_box: Box4,
    pub object_box: Box4,
    pub object: String,
    pub actions: Vec<String>,
}

/// One annotation record as it appears on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawAnnotationRecord {
    pub image_id: String,
    pub instances: Vec<RawInstance>,
}

/// One human-object instance with vocabulary indices resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub human_box: Box4,
    pub object_box: Box4,
    pub object: usize,
    pub actions: BTreeSet<usize>,
}

/// One annotated image. Duplicate image ids are kept as separate records;
/// statistics merge them by id.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub instances: Vec<Instance>,
}

/// Parse the annotation JSON from a reader, without resolving names.
pub fn parse_annotations(source: impl Read) -> Result<Vec<RawAnnotationRecord>> {
    let mut de = serde_json::Deserializer::from_reader(source);
    let records: Vec<RawAnnotationRecord> =
        serde::Deserialize::deserialize(&mut de).map_err(|e| {
            AcpError::parse(format!("line {} column {}", e.line(), e.column()), e.to_string())
        })?;
    Ok(records)
}

/// Resolve raw records against a label space, checking box and label
/// invariants.
pub fn resolve_annotations(
    raw: &[RawAnnotationRecord],
    space: &HoiSpace,
) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::with_capacity(raw.len());
    for rec in raw {
        let mut instances = Vec::with_capacity(rec.instances.len());
        for inst in &rec.instances {
            if !box_is_well_formed(&inst.human_box) || !box_is_well_formed(&inst.object_box) {
                return Err(AcpError::Contract(format!(
                    "image {:?}: malformed box (expected x1 < x2 and y1 < y2)",
                    rec.image_id
                )));
            }
            if inst.actions.is_empty() {
                return Err(AcpError::Contract(format!(
                    "image {:?}: instance with empty action set",
                    rec.image_id
                )));
            }
            let object = space.object_index(&inst.object)?;
            let mut actions = BTreeSet::new();
            for a in &inst.actions {
                actions.insert(space.action_index(a)?);
            }
            instances.push(Instance {
                human_box: inst.human_box,
                object_box: inst.object_box,
                object,
                actions,
            });
        }
        out.push(AnnotationRecord {
            image_id: rec.image_id.clone(),
            instances,
        });
    }
    Ok(out)
}

/// Parse and resolve in one step: the usual ingestion entry point.
pub fn ingest_annotations(source: impl Read, space: &HoiSpace) -> Result<Vec<AnnotationRecord>> {
    let raw = parse_annotations(source)?;
    resolve_annotations(&raw, space)
}

/// Per-class training-sample counts: one count per hoi class, where each
/// (instance, action) pair in the annotations contributes one sample.
pub fn train_counts(dataset: &[AnnotationRecord], space: &HoiSpace) -> Vec<u32> {
    let index = space.hoi_index_map();
    let mut counts = vec![0u32; space.n_hoi_classes()];
    for rec in dataset {
        for inst in &rec.instances {
            for &a in &inst.actions {
                if let Some(&m) = index.get(&(inst.object, a)) {
                    counts[m] += 1;
                }
            }
        }
    }
    counts
}
