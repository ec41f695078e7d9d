//! The multi-stream fusion network and its action prediction heads.
//!
//! Forward passes run per image (all human-object pairs of one image form
//! one batch, which is also the self-attention scope). Backward passes are
//! hand-chained through the fixed architecture and accumulate into the
//! parameter store.

use crate::anchors::AnchorPartition;
use crate::error::{AcpError, Result};
use crate::model::config::{ModelConfig, Variant, N_STREAMS};
use crate::model::pair::PairExample;
use crate::nn::{
    relu, relu_backward, sigmoid, sigmoid_backward, softmax_row, softmax_row_backward, DenseLayer,
    Matrix, ParamStore,
};
use crate::space::HoiSpace;

/// Per-pair prediction output.
#[derive(Debug, Clone)]
pub struct ActionPrediction {
    /// Softmax over anchor slots (anchors in selection order, `other`
    /// last), when the variant has an anchor head.
    pub anchor_probs: Option<Vec<f64>>,
    /// Per-slot conditional probabilities over the regular actions (after
    /// group masking), for the hierarchical variant.
    pub group_probs: Option<Vec<Vec<f64>>>,
    /// Final per-action probabilities, length N.
    pub action_probs: Vec<f64>,
    /// Regressed object embedding, when the embedding head is on.
    pub regressed_embed: Option<Vec<f64>>,
}

/// Joint interaction-class probabilities for one pair: for class (o, a),
/// `det_human * det_object * action_probs[a]` when o is the pair's object,
/// zero otherwise.
pub fn joint_hoi(
    action_probs: &[f64],
    det_human: f64,
    det_object: f64,
    object: usize,
    space: &HoiSpace,
) -> Vec<f64> {
    space
        .hoi_classes
        .iter()
        .map(|&(o, a)| {
            if o == object {
                det_human * det_object * action_probs[a]
            } else {
                0.0
            }
        })
        .collect()
}

/// Pull a joint-probability gradient back onto the action probabilities.
pub fn joint_hoi_backward(
    d_joint: &[f64],
    det_human: f64,
    det_object: f64,
    object: usize,
    space: &HoiSpace,
    d_action_probs: &mut [f64],
) {
    for (m, &(o, a)) in space.hoi_classes.iter().enumerate() {
        if o == object {
            d_action_probs[a] += det_human * det_object * d_joint[m];
        }
    }
}

/// Law-of-total-probability composition for one pair: anchors keep their
/// softmax probability, each regular action sums `p(slot) * p(action|slot)`
/// over every slot.
pub fn compose_hierarchical(
    anchor_probs: &[f64],
    group_probs: &[Vec<f64>],
    partition: &AnchorPartition,
) -> Vec<f64> {
    let n = partition.n_anchors() + partition.n_regular();
    let mut out = vec![0.0; n];
    for (slot, &a) in partition.anchors.iter().enumerate() {
        out[a] = anchor_probs[slot];
    }
    for (ri, &j) in partition.regular.iter().enumerate() {
        let mut acc = 0.0;
        for (slot, probs) in group_probs.iter().enumerate() {
            acc += anchor_probs[slot] * probs[ri];
        }
        out[j] = acc;
    }
    out
}

#[derive(Debug, Clone)]
struct StreamLayers {
    l1: DenseLayer,
    l2: DenseLayer,
}

#[derive(Debug, Clone)]
struct Head {
    l1: DenseLayer,
    l2: DenseLayer,
}

impl Head {
    fn init(store: &mut ParamStore, prefix: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Head {
            l1: DenseLayer::init(store, &format!("{prefix}.fc1"), d_in, hidden)?,
            l2: DenseLayer::init(store, &format!("{prefix}.fc2"), hidden, d_out)?,
        })
    }

    fn forward(&self, store: &ParamStore, z: &Matrix) -> Result<HeadCache> {
        let pre1 = self.l1.forward(store, z)?;
        let act1 = relu(&pre1)?;
        let logits = self.l2.forward(store, &act1)?;
        Ok(HeadCache { pre1, act1, logits })
    }

    /// Returns dZ.
    fn backward(
        &self,
        store: &mut ParamStore,
        z: &Matrix,
        cache: &HeadCache,
        d_logits: &Matrix,
    ) -> Result<Matrix> {
        let d_act1 = self.l2.backward(store, &cache.act1, d_logits)?;
        let d_pre1 = relu_backward(&cache.pre1, &d_act1)?;
        self.l1.backward(store, z, &d_pre1)
    }
}

#[derive(Debug, Clone)]
struct HeadCache {
    pre1: Matrix,
    act1: Matrix,
    logits: Matrix,
}

#[derive(Debug, Clone)]
struct AttnWeights {
    wa: String,
    wb: String,
    wx: String,
    wz: String,
}

#[derive(Debug, Clone)]
struct StreamCache {
    x: Matrix,
    pre1: Matrix,
    act1: Matrix,
    pre2: Matrix,
    out: Matrix,
}

#[derive(Debug, Clone)]
struct AttnCache {
    p_pre: Matrix,
    p: Matrix,
    q_pre: Matrix,
    q: Matrix,
    u_pre: Matrix,
    u: Matrix,
    r: Matrix,
    v: Matrix,
}

#[derive(Debug, Clone)]
enum HeadsForward {
    /// Baseline: the summed stream outputs are the logits.
    Direct,
    Sub {
        sub: HeadCache,
    },
    SubAux {
        sub: HeadCache,
        anchor: HeadCache,
    },
    TwoStream {
        anchor: HeadCache,
        anchor_probs: Matrix,
        regular: HeadCache,
        regular_probs: Matrix,
    },
    Hier {
        anchor: HeadCache,
        anchor_probs: Matrix,
        groups: Vec<HeadCache>,
        /// Raw sigmoid outputs per slot.
        group_raw: Vec<Matrix>,
        /// Masked probabilities per slot (equal to raw when masking is off).
        group_masked: Vec<Matrix>,
    },
}

/// Cached forward pass over all pairs of one image.
#[derive(Debug, Clone)]
pub struct ImageForward {
    pub n_pairs: usize,
    streams: Vec<StreamCache>,
    /// Fused feature: B x hidden (B x N for the baseline).
    z: Matrix,
    attn: Option<AttnCache>,
    z_final: Matrix,
    heads: HeadsForward,
    /// Final per-pair action probabilities, B x N.
    pub action_probs: Matrix,
    /// Anchor-slot softmax rows, when the variant has an anchor head.
    pub anchor_probs: Option<Matrix>,
    /// Anchor-head logits (for auxiliary losses).
    pub anchor_logits: Option<Matrix>,
    /// Embedding-head output, B x d_embed.
    pub emb_out: Option<Matrix>,
}

impl ImageForward {
    /// Fused stream feature for one pair, before self-attention.
    pub fn fused(&self, pair_idx: usize) -> &[f64] {
        self.z.row(pair_idx)
    }

    /// Fused feature after self-attention (equal to [`Self::fused`] when
    /// attention is off).
    pub fn fused_final(&self, pair_idx: usize) -> &[f64] {
        self.z_final.row(pair_idx)
    }

    /// The relational association matrix R, when attention ran.
    pub fn attention_matrix(&self) -> Option<&Matrix> {
        self.attn.as_ref().map(|c| &c.r)
    }
}

/// Gradients fed back into an image's backward pass. All are with respect
/// to forward outputs; absent pieces default to zero.
#[derive(Debug, Clone, Default)]
pub struct ImageGrads {
    /// d loss / d action_probs, B x N.
    pub d_action_probs: Option<Matrix>,
    /// d loss / d anchor logits (auxiliary anchor task), B x (|D|+1).
    pub d_anchor_logits: Option<Matrix>,
    /// d loss / d embedding output, B x d_embed.
    pub d_emb_out: Option<Matrix>,
}

/// The model: configuration, optional anchor partition, and parameters.
#[derive(Debug, Clone)]
pub struct HoiModel {
    pub config: ModelConfig,
    pub partition: Option<AnchorPartition>,
    pub store: ParamStore,
    streams: Vec<StreamLayers>,
    sub_head: Option<Head>,
    anchor_head: Option<Head>,
    regular_head: Option<Head>,
    group_heads: Vec<Head>,
    attn: Option<AttnWeights>,
    emb_layer: Option<DenseLayer>,
    /// Per-slot multiplicative masks over the regular actions.
    group_masks: Vec<Vec<f64>>,
}

impl HoiModel {
    pub fn new(config: ModelConfig, partition: Option<AnchorPartition>, seed: u64) -> Result<Self> {
        config.validate(partition.as_ref())?;
        if config.variant == Variant::Hierarchical {
            let p = partition.as_ref().unwrap();
            if p.groups.len() != p.n_anchors() {
                return Err(AcpError::Config(
                    "hierarchical variant needs a partition with groups built".to_string(),
                ));
            }
        }
        let mut store = ParamStore::new(seed);
        let hidden = config.hidden;
        let obj_code = config.object_code_dim();
        let stream_out = match config.variant {
            Variant::Baseline => config.n_actions,
            _ => hidden,
        };
        let stream_dims = [
            ("stream_h", config.d_human),
            ("stream_o", config.d_object),
            ("stream_k", config.d_pose + obj_code),
            ("stream_b", config.d_geom + obj_code),
        ];
        let mut streams = Vec::with_capacity(N_STREAMS);
        for (name, d_in) in stream_dims {
            streams.push(StreamLayers {
                l1: DenseLayer::init(&mut store, &format!("{name}.fc1"), d_in, hidden)?,
                l2: DenseLayer::init(&mut store, &format!("{name}.fc2"), hidden, stream_out)?,
            });
        }

        let n_slots = partition.as_ref().map(|p| p.n_slots()).unwrap_or(0);
        let n_regular = partition.as_ref().map(|p| p.n_regular()).unwrap_or(0);

        let mut sub_head = None;
        let mut anchor_head = None;
        let mut regular_head = None;
        let mut group_heads = Vec::new();
        match config.variant {
            Variant::Baseline => {}
            Variant::Modified => {
                sub_head = Some(Head::init(&mut store, "sub", hidden, hidden, config.n_actions)?);
            }
            Variant::MultiTask => {
                sub_head = Some(Head::init(&mut store, "sub", hidden, hidden, config.n_actions)?);
                anchor_head = Some(Head::init(&mut store, "anchor", hidden, hidden, n_slots)?);
            }
            Variant::TwoStream => {
                anchor_head = Some(Head::init(&mut store, "anchor", hidden, hidden, n_slots)?);
                regular_head = Some(Head::init(&mut store, "regular", hidden, hidden, n_regular)?);
            }
            Variant::Hierarchical => {
                anchor_head = Some(Head::init(&mut store, "anchor", hidden, hidden, n_slots)?);
                for slot in 0..n_slots {
                    group_heads.push(Head::init(
                        &mut store,
                        &format!("group_{slot}"),
                        hidden,
                        hidden,
                        n_regular,
                    )?);
                }
            }
        }

        let attn = if config.attention {
            for name in ["attn.wa", "attn.wb", "attn.wx", "attn.wz"] {
                store.add_uniform(name, hidden, config.attn_proj)?;
            }
            Some(AttnWeights {
                wa: "attn.wa".into(),
                wb: "attn.wb".into(),
                wx: "attn.wx".into(),
                wz: "attn.wz".into(),
            })
        } else {
            None
        };

        let emb_layer = if config.emb_head {
            Some(DenseLayer::init(&mut store, "emb", hidden, config.d_embed)?)
        } else {
            None
        };

        let group_masks = match (&partition, config.variant) {
            (Some(p), Variant::Hierarchical) => (0..p.n_slots())
                .map(|slot| {
                    p.regular
                        .iter()
                        .map(|j| {
                            if !config.mask_groups || p.group_for_slot(slot).contains(j) {
                                1.0
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect(),
            _ => Vec::new(),
        };

        Ok(HoiModel {
            config,
            partition,
            store,
            streams,
            sub_head,
            anchor_head,
            regular_head,
            group_heads,
            attn,
            emb_layer,
            group_masks,
        })
    }

    /// Stack the four stream input matrices for a batch of pairs.
    fn stream_inputs(&self, pairs: &[PairExample]) -> Result<[Matrix; 4]> {
        let b = pairs.len();
        let obj_code_dim = self.config.object_code_dim();
        let mut xh = Vec::with_capacity(b * self.config.d_human);
        let mut xo = Vec::with_capacity(b * self.config.d_object);
        let mut xk = Vec::with_capacity(b * (self.config.d_pose + obj_code_dim));
        let mut xb = Vec::with_capacity(b * (self.config.d_geom + obj_code_dim));
        for pair in pairs {
            let code: Vec<f64> = match self.config.variant {
                Variant::Baseline => {
                    let mut one_hot = vec![0.0; self.config.n_objects];
                    one_hot[pair.object] = 1.0;
                    one_hot
                }
                _ => pair.o_embed.clone(),
            };
            xh.extend_from_slice(&pair.x_human);
            xo.extend_from_slice(&pair.x_object);
            xk.extend_from_slice(&pair.pose);
            xk.extend_from_slice(&code);
            xb.extend_from_slice(&pair.geom);
            xb.extend_from_slice(&code);
        }
        Ok([
            Matrix::new(b, self.config.d_human, xh)?,
            Matrix::new(b, self.config.d_object, xo)?,
            Matrix::new(b, self.config.d_pose + obj_code_dim, xk)?,
            Matrix::new(b, self.config.d_geom + obj_code_dim, xb)?,
        ])
    }

    fn stream_forward(&self, idx: usize, x: Matrix) -> Result<StreamCache> {
        let layers = &self.streams[idx];
        let pre1 = layers.l1.forward(&self.store, &x)?;
        let act1 = relu(&pre1)?;
        let pre2 = layers.l2.forward(&self.store, &act1)?;
        let out = match self.config.variant {
            Variant::Baseline => pre2.clone(),
            _ => relu(&pre2)?,
        };
        Ok(StreamCache {
            x,
            pre1,
            act1,
            pre2,
            out,
        })
    }

    /// Fuse the streams: average for the hidden variants, sum for the
    /// baseline (whose streams emit per-action logits directly).
    fn fuse(&self, streams: &[StreamCache]) -> Result<Matrix> {
        let mut z = streams[0].out.clone();
        for s in &streams[1..] {
            z = z.add(&s.out)?;
        }
        match self.config.variant {
            Variant::Baseline => Ok(z),
            _ => z.scale(1.0 / N_STREAMS as f64),
        }
    }

    fn attention_forward(&self, z: &Matrix) -> Result<(AttnCache, Matrix)> {
        let w = self.attn.as_ref().expect("attention weights exist");
        let p_pre = z.matmul(self.store.value(&w.wa))?;
        let p = relu(&p_pre)?;
        let q_pre = z.matmul(self.store.value(&w.wb))?;
        let q = relu(&q_pre)?;
        let logits = p.matmul_nt(&q)?;
        let r = softmax_row(&logits)?;
        let u_pre = z.matmul(self.store.value(&w.wx))?;
        let u = relu(&u_pre)?;
        let v = u.matmul_nt(self.store.value(&w.wz))?;
        let a = r.matmul(&v)?;
        let z_tilde = z.add(&a)?;
        Ok((
            AttnCache {
                p_pre,
                p,
                q_pre,
                q,
                u_pre,
                u,
                r,
                v,
            },
            z_tilde,
        ))
    }

    /// Returns dZ given dZ_tilde.
    fn attention_backward(
        &mut self,
        z: &Matrix,
        cache: &AttnCache,
        d_z_tilde: &Matrix,
    ) -> Result<Matrix> {
        let w = self.attn.clone().expect("attention weights exist");
        let mut dz = d_z_tilde.clone();
        let da = d_z_tilde;

        let dr = da.matmul_nt(&cache.v)?;
        let dv = cache.r.matmul_tn(da)?;

        let du = dv.matmul(self.store.value(&w.wz))?;
        let dwz = dv.matmul_tn(&cache.u)?;
        self.store.accumulate_grad(&w.wz, &dwz)?;
        let du_pre = relu_backward(&cache.u_pre, &du)?;
        dz = dz.add(&du_pre.matmul_nt(self.store.value(&w.wx))?)?;
        self.store
            .accumulate_grad(&w.wx, &z.matmul_tn(&du_pre)?)?;

        let d_logits = softmax_row_backward(&cache.r, &dr)?;
        let dp = d_logits.matmul(&cache.q)?;
        let dq = d_logits.matmul_tn(&cache.p)?;

        let dp_pre = relu_backward(&cache.p_pre, &dp)?;
        dz = dz.add(&dp_pre.matmul_nt(self.store.value(&w.wa))?)?;
        self.store
            .accumulate_grad(&w.wa, &z.matmul_tn(&dp_pre)?)?;

        let dq_pre = relu_backward(&cache.q_pre, &dq)?;
        dz = dz.add(&dq_pre.matmul_nt(self.store.value(&w.wb))?)?;
        self.store
            .accumulate_grad(&w.wb, &z.matmul_tn(&dq_pre)?)?;

        Ok(dz)
    }

    /// Forward pass over all pairs of one image.
    pub fn forward_image(&self, pairs: &[PairExample]) -> Result<ImageForward> {
        if pairs.is_empty() {
            return Err(AcpError::Contract("forward over an empty pair batch".to_string()));
        }
        let inputs = self.stream_inputs(pairs)?;
        let mut streams = Vec::with_capacity(N_STREAMS);
        for (i, x) in inputs.into_iter().enumerate() {
            streams.push(self.stream_forward(i, x)?);
        }
        let z = self.fuse(&streams)?;
        let (attn, z_final) = match &self.attn {
            Some(_) => {
                let (cache, z_tilde) = self.attention_forward(&z)?;
                (Some(cache), z_tilde)
            }
            None => (None, z.clone()),
        };

        let (heads, action_probs, anchor_probs, anchor_logits) = match self.config.variant {
            Variant::Baseline => {
                let probs = sigmoid(&z_final)?;
                (HeadsForward::Direct, probs, None, None)
            }
            Variant::Modified => {
                let sub = self.sub_head.as_ref().unwrap().forward(&self.store, &z_final)?;
                let probs = sigmoid(&sub.logits)?;
                (HeadsForward::Sub { sub }, probs, None, None)
            }
            Variant::MultiTask => {
                let sub = self.sub_head.as_ref().unwrap().forward(&self.store, &z_final)?;
                let probs = sigmoid(&sub.logits)?;
                let anchor = self
                    .anchor_head
                    .as_ref()
                    .unwrap()
                    .forward(&self.store, &z_final)?;
                let anchor_probs = softmax_row(&anchor.logits)?;
                let logits = anchor.logits.clone();
                (
                    HeadsForward::SubAux { sub, anchor },
                    probs,
                    Some(anchor_probs),
                    Some(logits),
                )
            }
            Variant::TwoStream => {
                let partition = self.partition.as_ref().unwrap();
                let anchor = self
                    .anchor_head
                    .as_ref()
                    .unwrap()
                    .forward(&self.store, &z_final)?;
                let anchor_probs = softmax_row(&anchor.logits)?;
                let regular = self
                    .regular_head
                    .as_ref()
                    .unwrap()
                    .forward(&self.store, &z_final)?;
                let regular_probs = sigmoid(&regular.logits)?;
                let mut probs = Matrix::zeros(pairs.len(), self.config.n_actions);
                for b in 0..pairs.len() {
                    for (slot, &a) in partition.anchors.iter().enumerate() {
                        *probs.at_mut(b, a) = anchor_probs.at(b, slot);
                    }
                    for (ri, &j) in partition.regular.iter().enumerate() {
                        *probs.at_mut(b, j) = regular_probs.at(b, ri);
                    }
                }
                let logits = anchor.logits.clone();
                (
                    HeadsForward::TwoStream {
                        anchor,
                        anchor_probs: anchor_probs.clone(),
                        regular,
                        regular_probs,
                    },
                    probs,
                    Some(anchor_probs),
                    Some(logits),
                )
            }
            Variant::Hierarchical => {
                let partition = self.partition.as_ref().unwrap();
                let anchor = self
                    .anchor_head
                    .as_ref()
                    .unwrap()
                    .forward(&self.store, &z_final)?;
                let anchor_probs = softmax_row(&anchor.logits)?;
                let mut groups = Vec::with_capacity(self.group_heads.len());
                let mut group_raw = Vec::with_capacity(self.group_heads.len());
                let mut group_masked = Vec::with_capacity(self.group_heads.len());
                for (slot, head) in self.group_heads.iter().enumerate() {
                    let cache = head.forward(&self.store, &z_final)?;
                    let raw = sigmoid(&cache.logits)?;
                    let mut masked = raw.clone();
                    for b in 0..pairs.len() {
                        for (ri, m) in self.group_masks[slot].iter().enumerate() {
                            *masked.at_mut(b, ri) *= m;
                        }
                    }
                    groups.push(cache);
                    group_raw.push(raw);
                    group_masked.push(masked);
                }
                let mut probs = Matrix::zeros(pairs.len(), self.config.n_actions);
                for b in 0..pairs.len() {
                    let slot_rows: Vec<Vec<f64>> = group_masked
                        .iter()
                        .map(|m| m.row(b).to_vec())
                        .collect();
                    let composed =
                        compose_hierarchical(anchor_probs.row(b), &slot_rows, partition);
                    probs.row_mut(b).copy_from_slice(&composed);
                }
                let logits = anchor.logits.clone();
                (
                    HeadsForward::Hier {
                        anchor,
                        anchor_probs: anchor_probs.clone(),
                        groups,
                        group_raw,
                        group_masked,
                    },
                    probs,
                    Some(anchor_probs),
                    Some(logits),
                )
            }
        };

        let emb_out = match &self.emb_layer {
            Some(layer) => Some(layer.forward(&self.store, &z_final)?),
            None => None,
        };

        Ok(ImageForward {
            n_pairs: pairs.len(),
            streams,
            z,
            attn,
            z_final,
            heads,
            action_probs,
            anchor_probs,
            anchor_logits,
            emb_out,
        })
    }

    /// Backward pass matching [`HoiModel::forward_image`]; accumulates
    /// parameter gradients.
    pub fn backward_image(&mut self, fwd: &ImageForward, grads: &ImageGrads) -> Result<()> {
        let b = fwd.n_pairs;
        let d_probs = match &grads.d_action_probs {
            Some(m) => m.clone(),
            None => Matrix::zeros(b, self.config.n_actions),
        };

        // Gradient flowing into the fused (post-attention) feature.
        let hidden_dim = fwd.z_final.cols;
        let mut d_z_final = Matrix::zeros(b, hidden_dim);

        match &fwd.heads {
            HeadsForward::Direct => {
                // action_probs = sigmoid(z_final); streams handled below via
                // d_z_final, which for the baseline has width N.
                let dz = sigmoid_backward(&fwd.action_probs, &d_probs)?;
                d_z_final = d_z_final.add(&dz)?;
            }
            HeadsForward::Sub { sub } => {
                let d_logits = sigmoid_backward(&fwd.action_probs, &d_probs)?;
                let head = self.sub_head.clone().unwrap();
                let dz = head.backward(&mut self.store, &fwd.z_final, sub, &d_logits)?;
                d_z_final = d_z_final.add(&dz)?;
            }
            HeadsForward::SubAux { sub, anchor, .. } => {
                let d_logits = sigmoid_backward(&fwd.action_probs, &d_probs)?;
                let head = self.sub_head.clone().unwrap();
                let dz = head.backward(&mut self.store, &fwd.z_final, sub, &d_logits)?;
                d_z_final = d_z_final.add(&dz)?;
                if let Some(d_anchor_logits) = &grads.d_anchor_logits {
                    let head = self.anchor_head.clone().unwrap();
                    let dz =
                        head.backward(&mut self.store, &fwd.z_final, anchor, d_anchor_logits)?;
                    d_z_final = d_z_final.add(&dz)?;
                }
            }
            HeadsForward::TwoStream {
                anchor,
                anchor_probs,
                regular,
                regular_probs,
            } => {
                let partition = self.partition.clone().unwrap();
                let mut d_anchor_probs = Matrix::zeros(b, partition.n_slots());
                let mut d_regular_probs = Matrix::zeros(b, partition.n_regular());
                for bi in 0..b {
                    for (slot, &a) in partition.anchors.iter().enumerate() {
                        *d_anchor_probs.at_mut(bi, slot) = d_probs.at(bi, a);
                    }
                    for (ri, &j) in partition.regular.iter().enumerate() {
                        *d_regular_probs.at_mut(bi, ri) = d_probs.at(bi, j);
                    }
                }
                let mut d_anchor_logits = softmax_row_backward(anchor_probs, &d_anchor_probs)?;
                if let Some(aux) = &grads.d_anchor_logits {
                    d_anchor_logits = d_anchor_logits.add(aux)?;
                }
                let head = self.anchor_head.clone().unwrap();
                let dz = head.backward(&mut self.store, &fwd.z_final, anchor, &d_anchor_logits)?;
                d_z_final = d_z_final.add(&dz)?;

                let d_reg_logits = sigmoid_backward(regular_probs, &d_regular_probs)?;
                let head = self.regular_head.clone().unwrap();
                let dz = head.backward(&mut self.store, &fwd.z_final, regular, &d_reg_logits)?;
                d_z_final = d_z_final.add(&dz)?;
            }
            HeadsForward::Hier {
                anchor,
                anchor_probs,
                groups,
                group_raw,
                group_masked,
            } => {
                let partition = self.partition.clone().unwrap();
                let n_slots = partition.n_slots();
                let mut d_anchor_probs = Matrix::zeros(b, n_slots);
                for bi in 0..b {
                    for (slot, &a) in partition.anchors.iter().enumerate() {
                        *d_anchor_probs.at_mut(bi, slot) += d_probs.at(bi, a);
                    }
                    for (ri, &j) in partition.regular.iter().enumerate() {
                        let dj = d_probs.at(bi, j);
                        if dj == 0.0 {
                            continue;
                        }
                        for slot in 0..n_slots {
                            *d_anchor_probs.at_mut(bi, slot) +=
                                dj * group_masked[slot].at(bi, ri);
                        }
                    }
                }
                let mut d_anchor_logits = softmax_row_backward(anchor_probs, &d_anchor_probs)?;
                if let Some(aux) = &grads.d_anchor_logits {
                    d_anchor_logits = d_anchor_logits.add(aux)?;
                }
                let head = self.anchor_head.clone().unwrap();
                let dz = head.backward(&mut self.store, &fwd.z_final, anchor, &d_anchor_logits)?;
                d_z_final = d_z_final.add(&dz)?;

                for slot in 0..n_slots {
                    let mut d_masked = Matrix::zeros(b, partition.n_regular());
                    for bi in 0..b {
                        for (ri, &j) in partition.regular.iter().enumerate() {
                            // The mask is a constant factor on the sigmoid
                            // output, so it multiplies the gradient too.
                            *d_masked.at_mut(bi, ri) = d_probs.at(bi, j)
                                * anchor_probs.at(bi, slot)
                                * self.group_masks[slot][ri];
                        }
                    }
                    let d_logits = sigmoid_backward(&group_raw[slot], &d_masked)?;
                    let head = self.group_heads[slot].clone();
                    let dz =
                        head.backward(&mut self.store, &fwd.z_final, &groups[slot], &d_logits)?;
                    d_z_final = d_z_final.add(&dz)?;
                }
            }
        }

        if let Some(d_emb) = &grads.d_emb_out {
            let layer = self.emb_layer.clone().ok_or_else(|| {
                AcpError::Contract("embedding gradient without an embedding head".to_string())
            })?;
            let dz = layer.backward(&mut self.store, &fwd.z_final, d_emb)?;
            d_z_final = d_z_final.add(&dz)?;
        }

        let d_z = match (&self.attn, &fwd.attn) {
            (Some(_), Some(cache)) => {
                let cache = cache.clone();
                self.attention_backward(&fwd.z, &cache, &d_z_final)?
            }
            _ => d_z_final,
        };

        // Through the fusion into each stream.
        let d_stream_out = match self.config.variant {
            Variant::Baseline => d_z,
            _ => d_z.scale(1.0 / N_STREAMS as f64)?,
        };
        for (idx, cache) in fwd.streams.iter().enumerate() {
            let layers = self.streams[idx].clone();
            let d_pre2 = match self.config.variant {
                Variant::Baseline => d_stream_out.clone(),
                _ => relu_backward(&cache.pre2, &d_stream_out)?,
            };
            let d_act1 = layers.l2.backward(&mut self.store, &cache.act1, &d_pre2)?;
            let d_pre1 = relu_backward(&cache.pre1, &d_act1)?;
            // Inputs are data; their gradient is discarded.
            layers.l1.backward(&mut self.store, &cache.x, &d_pre1)?;
        }
        Ok(())
    }

    /// Inference: per-pair predictions for all pairs of one image.
    pub fn predict_image(&self, pairs: &[PairExample]) -> Result<Vec<ActionPrediction>> {
        let fwd = self.forward_image(pairs)?;
        Ok((0..pairs.len())
            .map(|b| self.extract_prediction(&fwd, b))
            .collect())
    }

    /// Pull one pair's prediction out of a cached forward pass.
    pub fn extract_prediction(&self, fwd: &ImageForward, pair_idx: usize) -> ActionPrediction {
        let group_probs = match &fwd.heads {
            HeadsForward::Hier { group_masked, .. } => Some(
                group_masked
                    .iter()
                    .map(|m| m.row(pair_idx).to_vec())
                    .collect(),
            ),
            _ => None,
        };
        ActionPrediction {
            anchor_probs: fwd.anchor_probs.as_ref().map(|m| m.row(pair_idx).to_vec()),
            group_probs,
            action_probs: fwd.action_probs.row(pair_idx).to_vec(),
            regressed_embed: fwd.emb_out.as_ref().map(|m| m.row(pair_idx).to_vec()),
        }
    }
}
