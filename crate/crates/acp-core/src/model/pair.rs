//! Human-object pair examples and the object embedding table.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{AcpError, Result};
use crate::model::config::ModelConfig;
use crate::space::{Box4, HoiSpace};

/// Word-embedding rows aligned with the object vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(AcpError::Shape {
                    op: "EmbeddingTable::new",
                    detail: format!("row {i} has length {}, expected {dim}", row.len()),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(AcpError::NonFinite(format!("embedding row {i}")));
            }
        }
        Ok(EmbeddingTable { dim, rows })
    }

    pub fn row(&self, object: usize) -> Result<&[f64]> {
        self.rows
            .get(object)
            .map(|r| r.as_slice())
            .ok_or_else(|| AcpError::Contract(format!("no embedding row for object {object}")))
    }
}

/// One human-object candidate pair with its per-stream features, detector
/// scores, and (possibly empty) ground-truth action set.
#[derive(Debug, Clone, PartialEq)]
pub struct PairExample {
    pub image_id: String,
    /// Human appearance features.
    pub x_human: Vec<f64>,
    /// Object appearance features.
    pub x_object: Vec<f64>,
    /// Pose proxy features.
    pub pose: Vec<f64>,
    /// Box-geometry features.
    pub geom: Vec<f64>,
    /// Word embedding of the object category.
    pub o_embed: Vec<f64>,
    pub object: usize,
    /// Detector confidence that the human box is a human.
    pub det_human: f64,
    /// Detector confidence that the object box is this object.
    pub det_object: f64,
    pub gt_actions: BTreeSet<usize>,
    pub human_box: Box4,
    pub object_box: Box4,
}

impl PairExample {
    pub fn validate(&self, config: &ModelConfig, table: Option<&EmbeddingTable>) -> Result<()> {
        let dims = [
            ("human features", self.x_human.len(), config.d_human),
            ("object features", self.x_object.len(), config.d_object),
            ("pose features", self.pose.len(), config.d_pose),
            ("geometry features", self.geom.len(), config.d_geom),
            ("object embedding", self.o_embed.len(), config.d_embed),
        ];
        for (what, got, want) in dims {
            if got != want {
                return Err(AcpError::Shape {
                    op: "PairExample::validate",
                    detail: format!("{}: {what} has dim {got}, expected {want}", self.image_id),
                });
            }
        }
        for score in [self.det_human, self.det_object] {
            if !(0.0..=1.0).contains(&score) {
                return Err(AcpError::Contract(format!(
                    "{}: detector score {score} outside [0, 1]",
                    self.image_id
                )));
            }
        }
        if self.object >= config.n_objects {
            return Err(AcpError::Contract(format!(
                "{}: object index {} out of range",
                self.image_id, self.object
            )));
        }
        if let Some(a) = self.gt_actions.iter().find(|&&a| a >= config.n_actions) {
            return Err(AcpError::Contract(format!(
                "{}: action index {a} out of range",
                self.image_id
            )));
        }
        if let Some(table) = table {
            if table.row(self.object)? != self.o_embed.as_slice() {
                return Err(AcpError::Contract(format!(
                    "{}: embedding does not match the table row for object {}",
                    self.image_id, self.object
                )));
            }
        }
        Ok(())
    }
}

/// On-disk form of a pair (JSON-lines, names unresolved). The embedding is
/// looked up from the table at load time rather than stored per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawPairExample {
    pub image_id: String,
    pub x_human: Vec<f64>,
    pub x_object: Vec<f64>,
    pub pose: Vec<f64>,
    pub geom: Vec<f64>,
    pub object: String,
    pub det_human: f64,
    pub det_object: f64,
    pub gt_actions: Vec<String>,
    pub human_box: Box4,
    pub object_box: Box4,
}

impl RawPairExample {
    pub fn resolve(&self, space: &HoiSpace, table: &EmbeddingTable) -> Result<PairExample> {
        let object = space.object_index(&self.object)?;
        let mut gt_actions = BTreeSet::new();
        for a in &self.gt_actions {
            gt_actions.insert(space.action_index(a)?);
        }
        Ok(PairExample {
            image_id: self.image_id.clone(),
            x_human: self.x_human.clone(),
            x_object: self.x_object.clone(),
            pose: self.pose.clone(),
            geom: self.geom.clone(),
            o_embed: table.row(object)?.to_vec(),
            object,
            det_human: self.det_human,
            det_object: self.det_object,
            gt_actions,
            human_box: self.human_box,
            object_box: self.object_box,
        })
    }

    pub fn from_pair(pair: &PairExample, space: &HoiSpace) -> Self {
        RawPairExample {
            image_id: pair.image_id.clone(),
            x_human: pair.x_human.clone(),
            x_object: pair.x_object.clone(),
            pose: pair.pose.clone(),
            geom: pair.geom.clone(),
            object: space.objects[pair.object].clone(),
            det_human: pair.det_human,
            det_object: pair.det_object,
            gt_actions: pair
                .gt_actions
                .iter()
                .map(|&a| space.actions[a].clone())
                .collect(),
            human_box: pair.human_box,
            object_box: pair.object_box,
        }
    }
}

/// Group consecutive pairs by image id, preserving order. Pairs of one
/// image form one attention batch.
pub fn group_by_image(pairs: &[PairExample]) -> Vec<&[PairExample]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=pairs.len() {
        if i == pairs.len() || pairs[i].image_id != pairs[start].image_id {
            out.push(&pairs[start..i]);
            start = i;
        }
    }
    out
}
