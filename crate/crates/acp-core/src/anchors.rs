//! Anchor-action selection and action-space partitioning.
//!
//! Anchors are a mutually exclusive set of actions picked greedily by
//! exclusiveness (the count of actions an action never co-occurs with).
//! Each anchor owns a group of the regular actions able to co-occur with
//! it; an extra `other` group catches regular actions that occur without
//! any anchor present, plus any action no group covers.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{AcpError, Result};
use crate::priors::{CooccurrenceStats, PriorMatrices};
use crate::space::HoiSpace;

/// Name used for the `other` pseudo-anchor in the partition file format.
pub const OTHER_GROUP_NAME: &str = "__other__";

/// Per-action exclusiveness: the number of actions whose co-occurrence
/// probability with it is exactly zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExclusivenessVector {
    pub counts: Vec<usize>,
}

/// Count, for each action i, the actions j with `cooc[i][j] == 0`. The
/// comparison is exact: priors are ratios of integer counts, so a zero
/// entry is an exact zero.
pub fn exclusiveness(priors: &PriorMatrices) -> ExclusivenessVector {
    let n = priors.n_actions;
    let counts = (0..n)
        .map(|i| (0..n).filter(|&j| priors.cooc_at(i, j) == 0.0).count())
        .collect();
    ExclusivenessVector { counts }
}

/// How membership of the `other` group was determined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OtherMembershipRule {
    /// Actions occurring in at least one image with no anchor present, plus
    /// any regular action left uncovered by every group.
    OccursWithoutAnchor,
}

/// The selected anchors and the per-anchor action groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorPartition {
    /// Selected anchor actions, in selection order.
    pub anchors: Vec<usize>,
    /// The cap the selection ran under, if any.
    pub max_anchors: Option<usize>,
    /// All non-anchor actions, ascending.
    pub regular: Vec<usize>,
    /// One group per anchor (same order as `anchors`): the regular actions
    /// able to co-occur with that anchor.
    pub groups: Vec<BTreeSet<usize>>,
    /// The `other` group: regular actions occurring without any anchor.
    pub other_group: BTreeSet<usize>,
    /// Regular actions no group covered; they were forced into `other` and
    /// are surfaced here as a warning set.
    pub forced_into_other: Vec<usize>,
    pub other_membership_rule: OtherMembershipRule,
}

impl AnchorPartition {
    pub fn n_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// Number of prediction slots: one per anchor plus the `other` slot.
    pub fn n_slots(&self) -> usize {
        self.anchors.len() + 1
    }

    pub fn n_regular(&self) -> usize {
        self.regular.len()
    }

    /// Slot index of an anchor action, if it is one.
    pub fn anchor_slot(&self, action: usize) -> Option<usize> {
        self.anchors.iter().position(|&a| a == action)
    }

    /// Position of a regular action within the regular-action ordering.
    pub fn regular_slot(&self, action: usize) -> Option<usize> {
        self.regular.binary_search(&action).ok()
    }

    /// Group for a slot: anchors first (selection order), `other` last.
    pub fn group_for_slot(&self, slot: usize) -> &BTreeSet<usize> {
        if slot < self.anchors.len() {
            &self.groups[slot]
        } else {
            &self.other_group
        }
    }

    /// Check that every anchor pair is mutually exclusive under the priors
    /// the partition was built from.
    pub fn check_exclusivity(&self, priors: &PriorMatrices) -> Result<()> {
        for (ai, &a) in self.anchors.iter().enumerate() {
            for &b in &self.anchors[ai + 1..] {
                if priors.cooc_at(a, b) != 0.0 || priors.cooc_at(b, a) != 0.0 {
                    return Err(AcpError::Contract(format!(
                        "anchors {a} and {b} are not mutually exclusive"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Greedy anchor selection: repeatedly take the most exclusive remaining
/// action (ties broken by lowest index), then drop every remaining action
/// that can co-occur with it. Stops when nothing remains or `max_anchors`
/// have been selected; never-visited actions become regular.
pub fn nes(
    priors: &PriorMatrices,
    excl: &ExclusivenessVector,
    max_anchors: Option<usize>,
) -> Result<AnchorPartition> {
    if excl.counts.len() != priors.n_actions {
        return Err(AcpError::Shape {
            op: "nes",
            detail: format!(
                "exclusiveness length {} vs {} actions",
                excl.counts.len(),
                priors.n_actions
            ),
        });
    }
    if max_anchors == Some(0) {
        return Err(AcpError::Contract(
            "max_anchors must be at least 1".to_string(),
        ));
    }
    let n = priors.n_actions;
    let mut remaining: BTreeSet<usize> = (0..n).collect();
    let mut anchors = Vec::new();
    while !remaining.is_empty() {
        if let Some(cap) = max_anchors {
            if anchors.len() == cap {
                break;
            }
        }
        // argmax over remaining exclusiveness; BTreeSet iteration is
        // ascending, so `>` keeps the lowest index on ties.
        let m = remaining
            .iter()
            .copied()
            .fold(None, |best: Option<usize>, k| match best {
                Some(b) if excl.counts[k] > excl.counts[b] => Some(k),
                Some(b) => Some(b),
                None => Some(k),
            })
            .expect("remaining is non-empty");
        anchors.push(m);
        remaining.remove(&m);
        remaining.retain(|&k| priors.cooc_at(m, k) == 0.0);
    }
    let anchor_set: BTreeSet<usize> = anchors.iter().copied().collect();
    let regular: Vec<usize> = (0..n).filter(|a| !anchor_set.contains(a)).collect();
    Ok(AnchorPartition {
        anchors,
        max_anchors,
        regular,
        groups: Vec::new(),
        other_group: BTreeSet::new(),
        forced_into_other: Vec::new(),
        other_membership_rule: OtherMembershipRule::OccursWithoutAnchor,
    })
}

/// Fill the per-anchor groups of a partition.
///
/// A regular action j joins the group of anchor i iff `cooc[i][j] > 0`. It
/// joins the `other` group iff it occurs in at least one image containing no
/// anchor. Because anchors never share an image, the number of images where
/// j occurs alongside some anchor is exactly the sum of the pairwise joint
/// counts, so membership is `n(j) > sum_a n(j, a)`. Any regular action still
/// uncovered afterwards is forced into `other` so every action stays
/// reachable, and is reported in `forced_into_other`.
pub fn build_groups(
    priors: &PriorMatrices,
    partition: &AnchorPartition,
    stats: &CooccurrenceStats,
) -> Result<AnchorPartition> {
    let block = stats.scope(priors.scope).ok_or_else(|| {
        AcpError::Contract(format!("no statistics for scope {}", priors.scope))
    })?;
    let mut out = partition.clone();
    out.groups = partition
        .anchors
        .iter()
        .map(|&i| {
            partition
                .regular
                .iter()
                .copied()
                .filter(|&j| priors.cooc_at(i, j) > 0.0)
                .collect::<BTreeSet<usize>>()
        })
        .collect();

    out.other_group = partition
        .regular
        .iter()
        .copied()
        .filter(|&j| {
            let with_anchor: u64 = partition.anchors.iter().map(|&a| block.joint(j, a)).sum();
            block.n_single[j] > with_anchor
        })
        .collect();

    let mut forced = Vec::new();
    for &j in &partition.regular {
        let covered = out.groups.iter().any(|g| g.contains(&j)) || out.other_group.contains(&j);
        if !covered {
            out.other_group.insert(j);
            forced.push(j);
        }
    }
    if !forced.is_empty() {
        log::warn!(
            "regular actions {forced:?} were covered by no group; forced into `other`"
        );
    }
    out.forced_into_other = forced;
    Ok(out)
}

/// One-hot training target over the anchor slots (anchors in selection
/// order, `other` last). Errors if the label set contains two anchors.
pub fn anchor_target(labels: &BTreeSet<usize>, partition: &AnchorPartition) -> Result<Vec<f64>> {
    let present: Vec<usize> = partition
        .anchors
        .iter()
        .copied()
        .filter(|a| labels.contains(a))
        .collect();
    if present.len() > 1 {
        return Err(AcpError::Contract(format!(
            "label set contains multiple anchors {present:?}, which are mutually exclusive"
        )));
    }
    let mut target = vec![0.0; partition.n_slots()];
    match present.first() {
        Some(&a) => {
            let slot = partition.anchor_slot(a).expect("anchor came from partition");
            target[slot] = 1.0;
        }
        None => target[partition.n_slots() - 1] = 1.0,
    }
    Ok(target)
}

/// Serialized form of a partition, keyed by action names.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionFile {
    pub anchors: Vec<String>,
    pub groups: std::collections::BTreeMap<String, Vec<String>>,
    pub max_anchors: Option<usize>,
}

impl PartitionFile {
    pub fn from_partition(partition: &AnchorPartition, space: &HoiSpace) -> Self {
        let mut groups = std::collections::BTreeMap::new();
        for (slot, &a) in partition.anchors.iter().enumerate() {
            groups.insert(
                space.actions[a].clone(),
                partition.groups[slot]
                    .iter()
                    .map(|&j| space.actions[j].clone())
                    .collect(),
            );
        }
        groups.insert(
            OTHER_GROUP_NAME.to_string(),
            partition
                .other_group
                .iter()
                .map(|&j| space.actions[j].clone())
                .collect(),
        );
        PartitionFile {
            anchors: partition
                .anchors
                .iter()
                .map(|&a| space.actions[a].clone())
                .collect(),
            groups,
            max_anchors: partition.max_anchors,
        }
    }

    pub fn to_partition(&self, space: &HoiSpace) -> Result<AnchorPartition> {
        let anchors: Vec<usize> = self
            .anchors
            .iter()
            .map(|name| space.action_index(name))
            .collect::<Result<_>>()?;
        let anchor_set: BTreeSet<usize> = anchors.iter().copied().collect();
        let regular: Vec<usize> = (0..space.n_actions())
            .filter(|a| !anchor_set.contains(a))
            .collect();
        let mut groups = Vec::with_capacity(anchors.len());
        for name in &self.anchors {
            let members = self
                .groups
                .get(name)
                .ok_or_else(|| AcpError::Contract(format!("missing group for anchor {name:?}")))?;
            groups.push(
                members
                    .iter()
                    .map(|m| space.action_index(m))
                    .collect::<Result<BTreeSet<usize>>>()?,
            );
        }
        let other_group = match self.groups.get(OTHER_GROUP_NAME) {
            Some(members) => members
                .iter()
                .map(|m| space.action_index(m))
                .collect::<Result<BTreeSet<usize>>>()?,
            None => BTreeSet::new(),
        };
        Ok(AnchorPartition {
            anchors,
            max_anchors: self.max_anchors,
            regular,
            groups,
            other_group,
            forced_into_other: Vec::new(),
            other_membership_rule: OtherMembershipRule::OccursWithoutAnchor,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::{build_priors, count_label_stats, Scope};
    use crate::space::{ingest_annotations, HoiSpace};

    fn cake_space() -> HoiSpace {
        HoiSpace::new(
            vec!["hold".into(), "eat".into(), "cut".into()],
            vec!["cake".into()],
            vec![(0, 0), (0, 1), (0, 2)],
            10,
        )
        .unwrap()
    }

    fn cake_setup() -> (HoiSpace, CooccurrenceStats, PriorMatrices) {
        let space = cake_space();
        let json = r#"[
          {"image_id":"img1","instances":[{"human_box":[0,0,1,1],"object_box":[0,0,1,1],"object":"cake","actions":["hold","eat"]}]},
          {"image_id":"img2","instances":[{"human_box":[0,0,1,1],"object_box":[0,0,1,1],"object":"cake","actions":["hold"]}]},
          {"image_id":"img3","instances":[{"human_box":[0,0,1,1],"object_box":[0,0,1,1],"object":"cake","actions":["cut"]}]}
        ]"#;
        let recs = ingest_annotations(json.as_bytes(), &space).unwrap();
        let stats = count_label_stats(&recs, &space);
        let priors = build_priors(&stats, Scope::Object(0)).unwrap();
        (space, stats, priors)
    }

    fn matrix(n: usize, entries: &[f64]) -> PriorMatrices {
        PriorMatrices {
            n_actions: n,
            scope: Scope::Global,
            cooc: entries.to_vec(),
            comp: vec![0.0; n * n],
        }
    }

    #[test]
    fn cake_exclusiveness_by_hand() {
        let (_, _, priors) = cake_setup();
        let e = exclusiveness(&priors);
        // hold: only cut is zero; eat: only cut; cut: hold and eat.
        assert_eq!(e.counts, vec![1, 1, 2]);
    }

    #[test]
    fn all_ones_matrix_has_zero_exclusiveness() {
        let p = matrix(3, &[1.0; 9]);
        assert_eq!(exclusiveness(&p).counts, vec![0, 0, 0]);
    }

    #[test]
    fn all_zero_row_is_maximally_exclusive() {
        let p = matrix(
            3,
            &[
                1.0, 0.5, 0.0, //
                0.5, 1.0, 0.0, //
                0.0, 0.0, 0.0,
            ],
        );
        assert_eq!(exclusiveness(&p).counts[2], 3);
    }

    #[test]
    fn cake_nes_selects_cut_then_hold() {
        let (_, _, priors) = cake_setup();
        let e = exclusiveness(&priors);
        let partition = nes(&priors, &e, None).unwrap();
        assert_eq!(partition.anchors, vec![2, 0]); // cut, then hold
        assert_eq!(partition.regular, vec![1]); // eat
        partition.check_exclusivity(&priors).unwrap();
    }

    #[test]
    fn identity_matrix_selects_everything_in_index_order() {
        let p = matrix(
            4,
            &[
                1.0, 0.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 1.0,
            ],
        );
        let e = exclusiveness(&p);
        let partition = nes(&p, &e, None).unwrap();
        assert_eq!(partition.anchors, vec![0, 1, 2, 3]);
        assert!(partition.regular.is_empty());
    }

    #[test]
    fn zero_cap_is_an_error() {
        let (_, _, priors) = cake_setup();
        let e = exclusiveness(&priors);
        assert!(nes(&priors, &e, Some(0)).is_err());
    }

    #[test]
    fn cap_truncates_in_selection_order() {
        let (_, _, priors) = cake_setup();
        let e = exclusiveness(&priors);
        let partition = nes(&priors, &e, Some(1)).unwrap();
        assert_eq!(partition.anchors, vec![2]);
        assert_eq!(partition.regular, vec![0, 1]);
    }

    #[test]
    fn unseen_action_does_not_stall_selection() {
        // Row 2 is all zero (never observed): it suppresses nothing, not
        // even itself, and must still leave the remaining set.
        let p = matrix(
            3,
            &[
                1.0, 0.5, 0.0, //
                0.5, 1.0, 0.0, //
                0.0, 0.0, 0.0,
            ],
        );
        let e = exclusiveness(&p);
        let partition = nes(&p, &e, None).unwrap();
        assert_eq!(partition.anchors, vec![2, 0]);
    }

    #[test]
    fn cake_groups_by_hand() {
        let (_, stats, priors) = cake_setup();
        let e = exclusiveness(&priors);
        let partition = nes(&priors, &e, None).unwrap();
        let partition = build_groups(&priors, &partition, &stats).unwrap();
        // D = [cut, hold]; G_cut = {}, G_hold = {eat}, other = {}.
        assert!(partition.groups[0].is_empty());
        assert_eq!(partition.groups[1].iter().copied().collect::<Vec<_>>(), vec![1]);
        assert!(partition.other_group.is_empty());
        assert!(partition.forced_into_other.is_empty());
    }

    #[test]
    fn regular_action_in_multiple_groups() {
        // Two exclusive anchors (0, 1) and a regular action 2 co-occurring
        // with both.
        let p = matrix(
            3,
            &[
                1.0, 0.0, 0.6, //
                0.0, 1.0, 0.4, //
                0.5, 0.5, 1.0,
            ],
        );
        let e = exclusiveness(&p);
        let partition = nes(&p, &e, None).unwrap();
        assert_eq!(partition.anchors, vec![0, 1]);
        // Stats consistent with the matrix: 10 images, a0 in 5, a1 in 5,
        // a2 in 5 (3 with a0, 2 with a1).
        let mut stats = CooccurrenceStats {
            n_actions: 3,
            per_object: Default::default(),
            global: crate::priors::ScopeStats {
                n_images: 10,
                n_single: vec![5, 5, 5],
                n_joint: vec![0; 9],
            },
        };
        let set = |s: &mut Vec<u64>, i: usize, j: usize, v: u64| {
            s[i * 3 + j] = v;
            s[j * 3 + i] = v;
        };
        set(&mut stats.global.n_joint, 0, 0, 5);
        set(&mut stats.global.n_joint, 1, 1, 5);
        set(&mut stats.global.n_joint, 2, 2, 5);
        set(&mut stats.global.n_joint, 0, 2, 3);
        set(&mut stats.global.n_joint, 1, 2, 2);
        let partition = build_groups(&p, &partition, &stats).unwrap();
        assert!(partition.groups[0].contains(&2));
        assert!(partition.groups[1].contains(&2));
        // 3 + 2 = 5 = n(a2): never without an anchor.
        assert!(partition.other_group.is_empty());
    }

    #[test]
    fn action_alone_in_an_image_joins_other() {
        let space = cake_space();
        // eat appears once with anchor hold and once alone.
        let json = r#"[
          {"image_id":"a","instances":[{"human_box":[0,0,1,1],"object_box":[0,0,1,1],"object":"cake","actions":["hold","eat"]}]},
          {"image_id":"b","instances":[{"human_box":[0,0,1,1],"object_box":[0,0,1,1],"object":"cake","actions":["eat"]}]},
          {"image_id":"c","instances":[{"human_box":[0,0,1,1],"object_box":[0,0,1,1],"object":"cake","actions":["cut"]}]}
        ]"#;
        let recs = ingest_annotations(json.as_bytes(), &space).unwrap();
        let stats = count_label_stats(&recs, &space);
        let priors = build_priors(&stats, Scope::Object(0)).unwrap();
        let e = exclusiveness(&priors);
        let partition = nes(&priors, &e, None).unwrap();
        let partition = build_groups(&priors, &partition, &stats).unwrap();
        assert!(partition.regular.contains(&1));
        assert!(partition.other_group.contains(&1));
    }

    #[test]
    fn anchor_target_cases() {
        let (_, _, priors) = cake_setup();
        let e = exclusiveness(&priors);
        let partition = nes(&priors, &e, None).unwrap();
        // D = [cut, hold], slots [cut, hold, other].
        let t = anchor_target(&BTreeSet::from([2]), &partition).unwrap();
        assert_eq!(t, vec![1.0, 0.0, 0.0]);
        let t = anchor_target(&BTreeSet::from([1]), &partition).unwrap();
        assert_eq!(t, vec![0.0, 0.0, 1.0]);
        assert!(anchor_target(&BTreeSet::from([2, 0]), &partition).is_err());
    }

    #[test]
    fn partition_file_round_trip() {
        let (space, stats, priors) = cake_setup();
        let e = exclusiveness(&priors);
        let partition = nes(&priors, &e, Some(15)).unwrap();
        let partition = build_groups(&priors, &partition, &stats).unwrap();
        let file = PartitionFile::from_partition(&partition, &space);
        let back = file.to_partition(&space).unwrap();
        assert_eq!(back.anchors, partition.anchors);
        assert_eq!(back.groups, partition.groups);
        assert_eq!(back.other_group, partition.other_group);
        assert_eq!(back.max_anchors, partition.max_anchors);
    }
}
