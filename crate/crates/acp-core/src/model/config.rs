//! Model architecture configuration.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorPartition;
use crate::error::{AcpError, Result};

/// Number of information streams fused by the network.
pub const N_STREAMS: usize = 4;

/// Architecture variant for the action prediction module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Streams map straight to per-action logits, summed then squashed.
    /// Object category enters as a one-hot code.
    Baseline,
    /// Streams are averaged into a hidden feature; a sub-network predicts
    /// all actions with a sigmoid. Object category enters as an embedding.
    Modified,
    /// Modified plus an auxiliary softmax anchor head used only as an extra
    /// training task.
    MultiTask,
    /// Separate softmax anchor head and sigmoid regular head, no
    /// composition between them.
    TwoStream,
    /// Softmax anchor head plus per-group sigmoid heads composed by the law
    /// of total probability.
    Hierarchical,
}

impl Variant {
    pub fn needs_partition(self) -> bool {
        matches!(
            self,
            Variant::MultiTask | Variant::TwoStream | Variant::Hierarchical
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Modified => "modified",
            Variant::MultiTask => "multitask",
            Variant::TwoStream => "twostream",
            Variant::Hierarchical => "hierarchical",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = AcpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "modified" => Ok(Variant::Modified),
            "multitask" => Ok(Variant::MultiTask),
            "twostream" => Ok(Variant::TwoStream),
            "hierarchical" => Ok(Variant::Hierarchical),
            other => Err(AcpError::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Feature dimensions and architectural switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Self-attention over the human-object pairs of one image.
    pub attention: bool,
    /// Object word-embedding regression head.
    pub emb_head: bool,
    /// Zero out group probabilities of actions outside each anchor's group
    /// before composition.
    pub mask_groups: bool,
    pub d_human: usize,
    pub d_object: usize,
    pub d_pose: usize,
    pub d_geom: usize,
    pub d_embed: usize,
    pub hidden: usize,
    pub attn_proj: usize,
    pub n_actions: usize,
    pub n_objects: usize,
}

impl ModelConfig {
    /// Desk-scale defaults; the full-scale hidden width of 512 and
    /// projection width of 128 remain selectable.
    pub fn desk(variant: Variant, n_actions: usize, n_objects: usize) -> Self {
        ModelConfig {
            variant,
            attention: false,
            emb_head: false,
            mask_groups: true,
            d_human: 16,
            d_object: 16,
            d_pose: 16,
            d_geom: 16,
            d_embed: 8,
            hidden: 64,
            attn_proj: 16,
            n_actions,
            n_objects,
        }
    }

    pub fn validate(&self, partition: Option<&AnchorPartition>) -> Result<()> {
        if self.variant.needs_partition() && partition.is_none() {
            return Err(AcpError::Config(format!(
                "variant {:?} requires an anchor partition",
                self.variant.as_str()
            )));
        }
        if let Some(p) = partition {
            let covered = p.n_anchors() + p.n_regular();
            if covered != self.n_actions {
                return Err(AcpError::Config(format!(
                    "partition covers {covered} actions but the model has {}",
                    self.n_actions
                )));
            }
        }
        if self.variant == Variant::Baseline && self.attention {
            return Err(AcpError::Config(
                "self-attention requires the fused hidden representation; \
                 the baseline variant has none"
                    .to_string(),
            ));
        }
        if self.variant == Variant::Baseline && self.emb_head {
            return Err(AcpError::Config(
                "the embedding head requires the fused hidden representation; \
                 the baseline variant has none"
                    .to_string(),
            ));
        }
        if self.hidden == 0 || self.n_actions == 0 || self.n_objects == 0 {
            return Err(AcpError::Config("zero-sized model dimension".to_string()));
        }
        Ok(())
    }

    /// Width of the object code concatenated onto the pose and geometry
    /// streams: a one-hot for the baseline, the word embedding otherwise.
    pub fn object_code_dim(&self) -> usize {
        match self.variant {
            Variant::Baseline => self.n_objects,
            _ => self.d_embed,
        }
    }
}
