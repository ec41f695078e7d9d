//! Desk-scale trainer: batched gradient descent over per-image pair
//! batches, with teacher-target distillation, the embedding loss, an
//! optional step-zero gradient verification hook, and evaluation helpers.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::anchor_target;
use crate::error::{AcpError, Result};
use crate::eval::{evaluate, DetectionRecord, EvalReport, EvalSetting, GroundTruthInstance};
use crate::losses::{
    emb_loss, emb_loss_grad, teacher_from_groundtruth, teacher_from_prediction, LossWeights,
    ProjectionConfig,
};
use crate::model::{
    finite_diff_check_model, group_by_image, joint_hoi, joint_hoi_backward, HoiModel, ImageGrads,
    ModelConfig, PairExample, Variant,
};
use crate::nn::{bce, bce_grad, ce_softmax, sgd_step, Adam, Matrix};
use crate::priors::PriorBank;
use crate::space::{AnnotationRecord, HoiSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_images: usize,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    pub projection: ProjectionConfig,
    /// Run a finite-difference check of the first optimizer step's
    /// gradients and fail if the relative error is 1e-4 or worse.
    pub grad_check_step0: bool,
    /// Model initialization and shuffling seed.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 30,
            batch_images: 32,
            optimizer: OptimizerConfig::default(),
            weights: LossWeights::default(),
            projection: ProjectionConfig::default(),
            grad_check_step0: false,
            seed: 0,
        }
    }
}

/// Everything a training run reads.
pub struct TrainInput<'a> {
    pub space: &'a HoiSpace,
    pub bank: &'a PriorBank,
    pub model_config: ModelConfig,
    pub partition: Option<crate::anchors::AnchorPartition>,
    pub train_pairs: &'a [PairExample],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
}

pub struct TrainOutcome {
    pub model: HoiModel,
    pub epoch_logs: Vec<EpochLog>,
    /// Batch loss per optimizer step, in step order.
    pub step_losses: Vec<f64>,
    /// Maximum relative error of the step-zero gradient check, when run.
    pub grad_check_error: Option<f64>,
}

/// Per-pair constant targets, computed once per run.
struct StaticTargets {
    /// Ground-truth joint vectors, one per pair.
    y_gt: Vec<Vec<f64>>,
    /// Projected ground-truth teachers (empty when lambda3 = 0).
    y_gt_proj: Vec<Vec<f64>>,
    /// One-hot anchor targets (empty unless the variant is multi-task).
    anchor_one_hot: Vec<Vec<f64>>,
}

fn build_static_targets(
    input: &TrainInput,
    opts: &TrainOptions,
) -> Result<StaticTargets> {
    let space = input.space;
    let m = space.n_hoi_classes();
    let mut y_gt = Vec::with_capacity(input.train_pairs.len());
    let mut y_gt_proj = Vec::new();
    let mut anchor_one_hot = Vec::new();
    let needs_aux = input.model_config.variant == Variant::MultiTask;
    for pair in input.train_pairs {
        let mut gt = vec![0.0; m];
        for (mi, &(o, a)) in space.hoi_classes.iter().enumerate() {
            if o == pair.object && pair.gt_actions.contains(&a) {
                gt[mi] = 1.0;
            }
        }
        y_gt.push(gt);
        if opts.weights.lambda3 > 0.0 {
            y_gt_proj.push(teacher_from_groundtruth(
                &pair.gt_actions,
                pair.object,
                input.bank,
                &opts.projection,
            )?);
        }
        if needs_aux {
            let partition = input.partition.as_ref().ok_or_else(|| {
                AcpError::Config("multi-task variant requires a partition".to_string())
            })?;
            anchor_one_hot.push(anchor_target(&pair.gt_actions, partition)?);
        }
    }
    Ok(StaticTargets {
        y_gt,
        y_gt_proj,
        anchor_one_hot,
    })
}

/// Forward one image and assemble its loss pieces. Returns the sum of
/// per-pair losses and, when requested, the gradients to feed backward.
/// `frozen_proj_teacher` supplies a fixed projected-prediction teacher (for
/// finite-difference verification); otherwise the teacher is rebuilt from
/// the live forward pass and treated as a constant.
#[allow(clippy::too_many_arguments)]
fn image_loss(
    model: &HoiModel,
    pairs: &[PairExample],
    pair_offset: usize,
    targets: &StaticTargets,
    bank: &PriorBank,
    weights: &LossWeights,
    projection: &ProjectionConfig,
    frozen_proj_teacher: Option<&Matrix>,
    want_grads: bool,
) -> Result<(f64, Option<ImageGrads>, Option<Matrix>, crate::model::ImageForward)> {
    let space = &bank.space;
    let b = pairs.len();
    let m = space.n_hoi_classes();
    let fwd = model.forward_image(pairs)?;

    let mut y_hat = Matrix::zeros(b, m);
    for (bi, pair) in pairs.iter().enumerate() {
        let joint = joint_hoi(
            fwd.action_probs.row(bi),
            pair.det_human,
            pair.det_object,
            pair.object,
            space,
        );
        y_hat.row_mut(bi).copy_from_slice(&joint);
    }
    let mut y_gt = Matrix::zeros(b, m);
    for bi in 0..b {
        y_gt.row_mut(bi)
            .copy_from_slice(&targets.y_gt[pair_offset + bi]);
    }

    let proj_teacher: Option<Matrix> = if weights.lambda2 > 0.0 {
        match frozen_proj_teacher {
            Some(t) => Some(t.clone()),
            None => {
                let mut t = Matrix::zeros(b, m);
                for (bi, pair) in pairs.iter().enumerate() {
                    let teacher = teacher_from_prediction(
                        fwd.action_probs.row(bi),
                        pair.det_human,
                        pair.det_object,
                        pair.object,
                        bank,
                        projection,
                    )?;
                    t.row_mut(bi).copy_from_slice(&teacher);
                }
                Some(t)
            }
        }
    } else {
        None
    };
    let gt_teacher: Option<Matrix> = if weights.lambda3 > 0.0 {
        let mut t = Matrix::zeros(b, m);
        for bi in 0..b {
            t.row_mut(bi)
                .copy_from_slice(&targets.y_gt_proj[pair_offset + bi]);
        }
        Some(t)
    } else {
        None
    };

    // Sum over the image's pairs of the per-pair mean-over-classes loss.
    let mut loss_sum = weights.lambda1 * bce(&y_hat, &y_gt)? * b as f64;
    if let Some(t) = &proj_teacher {
        loss_sum += weights.lambda2 * bce(&y_hat, t)? * b as f64;
    }
    if let Some(t) = &gt_teacher {
        loss_sum += weights.lambda3 * bce(&y_hat, t)? * b as f64;
    }

    let emb_on = weights.lambda0 > 0.0;
    if emb_on {
        let v = fwd.emb_out.as_ref().ok_or_else(|| {
            AcpError::Config("lambda0 > 0 requires the embedding head".to_string())
        })?;
        for (bi, pair) in pairs.iter().enumerate() {
            loss_sum += weights.lambda0 * emb_loss(&pair.o_embed, v.row(bi))?;
        }
    }

    let mut aux_ce: Option<(f64, Matrix)> = None;
    if !targets.anchor_one_hot.is_empty() {
        let logits = fwd.anchor_logits.as_ref().expect("multi-task has anchor logits");
        let mut one_hot = Matrix::zeros(b, logits.cols);
        for bi in 0..b {
            one_hot
                .row_mut(bi)
                .copy_from_slice(&targets.anchor_one_hot[pair_offset + bi]);
        }
        let (ce, d_logits) = ce_softmax(logits, &one_hot)?;
        loss_sum += ce * b as f64;
        aux_ce = Some((ce, d_logits));
    }

    if !want_grads {
        return Ok((loss_sum, None, proj_teacher, fwd));
    }

    // d(loss_sum) / d y_hat, before the batch-level 1/n scaling.
    let mut d_y_hat = bce_grad(&y_hat, &y_gt)?.scale(weights.lambda1 * b as f64)?;
    if let Some(t) = &proj_teacher {
        d_y_hat = d_y_hat.add(&bce_grad(&y_hat, t)?.scale(weights.lambda2 * b as f64)?)?;
    }
    if let Some(t) = &gt_teacher {
        d_y_hat = d_y_hat.add(&bce_grad(&y_hat, t)?.scale(weights.lambda3 * b as f64)?)?;
    }
    let mut d_probs = Matrix::zeros(b, space.n_actions());
    for (bi, pair) in pairs.iter().enumerate() {
        joint_hoi_backward(
            d_y_hat.row(bi),
            pair.det_human,
            pair.det_object,
            pair.object,
            space,
            d_probs.row_mut(bi),
        );
    }

    let d_emb = if emb_on {
        let v = fwd.emb_out.as_ref().unwrap();
        let mut d = Matrix::zeros(b, v.cols);
        for (bi, pair) in pairs.iter().enumerate() {
            let g = emb_loss_grad(&pair.o_embed, v.row(bi))?;
            for (slot, gv) in d.row_mut(bi).iter_mut().zip(&g) {
                *slot = weights.lambda0 * gv;
            }
        }
        Some(d)
    } else {
        None
    };

    let d_anchor_logits = aux_ce.map(|(_, d)| d.scale(b as f64).expect("finite"));

    Ok((
        loss_sum,
        Some(ImageGrads {
            d_action_probs: Some(d_probs),
            d_anchor_logits,
            d_emb_out: d_emb,
        }),
        proj_teacher,
        fwd,
    ))
}

/// Train a model on pre-grouped pair data.
pub fn train(input: &TrainInput, opts: &TrainOptions) -> Result<TrainOutcome> {
    opts.weights.validate()?;
    if opts.weights.lambda0 > 0.0 && !input.model_config.emb_head {
        return Err(AcpError::Config(
            "lambda0 > 0 requires emb_head = on".to_string(),
        ));
    }
    let mut model = HoiModel::new(
        input.model_config.clone(),
        input.partition.clone(),
        opts.seed,
    )?;
    let targets = build_static_targets(input, opts)?;

    // Image groups index into the flat pair list via offsets.
    let groups = group_by_image(input.train_pairs);
    let mut offsets = Vec::with_capacity(groups.len());
    {
        let mut off = 0;
        for g in &groups {
            offsets.push(off);
            off += g.len();
        }
    }
    if groups.is_empty() {
        return Err(AcpError::Config("no training pairs".to_string()));
    }

    let mut adam = Adam::new(
        opts.optimizer.lr,
        opts.optimizer.beta1,
        opts.optimizer.beta2,
        opts.optimizer.eps,
    );
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x35b1_2e0c_44dd_8ef1);

    let mut epoch_logs = Vec::with_capacity(opts.epochs);
    let mut step_losses = Vec::new();
    let mut grad_check_error = None;
    let mut first_step = true;

    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..groups.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rand::Rng::random_range(&mut shuffle_rng, 0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut epoch_pairs = 0usize;
        for batch in order.chunks(opts.batch_images) {
            let n_batch: usize = batch.iter().map(|&gi| groups[gi].len()).sum();
            let mut batch_loss_sum = 0.0;
            // Teachers frozen at gradient time, for the verification hook.
            let mut frozen_teachers: Vec<Option<Matrix>> = Vec::with_capacity(batch.len());
            for &gi in batch {
                let (loss_sum, grads, teacher, fwd) = image_loss(
                    &model,
                    groups[gi],
                    offsets[gi],
                    &targets,
                    input.bank,
                    &opts.weights,
                    &opts.projection,
                    None,
                    true,
                )
                .map_err(|e| annotate_batch_error(e, groups[gi]))?;
                batch_loss_sum += loss_sum;
                frozen_teachers.push(teacher);
                let mut grads = grads.expect("gradients requested");
                scale_grads(&mut grads, 1.0 / n_batch as f64);
                model.backward_image(&fwd, &grads)?;
            }
            let batch_loss = batch_loss_sum / n_batch as f64;
            if !batch_loss.is_finite() {
                return Err(AcpError::NonFinite(format!(
                    "batch loss over images {:?}",
                    batch.iter().map(|&gi| &groups[gi][0].image_id).collect::<Vec<_>>()
                )));
            }

            if first_step && opts.grad_check_step0 {
                let err = verify_step_gradients(
                    &mut model,
                    batch,
                    &groups,
                    &offsets,
                    &targets,
                    input.bank,
                    opts,
                    &frozen_teachers,
                    n_batch,
                )?;
                grad_check_error = Some(err);
                if err >= 1e-4 {
                    return Err(AcpError::Contract(format!(
                        "step-0 gradient check failed: relative error {err}"
                    )));
                }
            }
            first_step = false;

            match opts.optimizer.kind {
                OptimizerKind::Adam => adam.step(&mut model.store)?,
                OptimizerKind::Sgd => sgd_step(&mut model.store, opts.optimizer.lr)?,
            }
            step_losses.push(batch_loss);
            epoch_loss += batch_loss_sum;
            epoch_pairs += n_batch;
        }
        epoch_logs.push(EpochLog {
            epoch,
            mean_loss: epoch_loss / epoch_pairs as f64,
        });
    }

    Ok(TrainOutcome {
        model,
        epoch_logs,
        step_losses,
        grad_check_error,
    })
}

fn annotate_batch_error(e: AcpError, pairs: &[PairExample]) -> AcpError {
    match e {
        AcpError::NonFinite(what) => AcpError::NonFinite(format!(
            "{what} (image {:?}, {} pairs, objects {:?})",
            pairs[0].image_id,
            pairs.len(),
            pairs.iter().map(|p| p.object).collect::<Vec<_>>()
        )),
        other => other,
    }
}

fn scale_grads(grads: &mut ImageGrads, s: f64) {
    if let Some(m) = &mut grads.d_action_probs {
        *m = m.scale(s).expect("finite");
    }
    if let Some(m) = &mut grads.d_anchor_logits {
        *m = m.scale(s).expect("finite");
    }
    if let Some(m) = &mut grads.d_emb_out {
        *m = m.scale(s).expect("finite");
    }
}

/// Finite-difference verification of the accumulated first-step gradients,
/// with the projected-prediction teachers frozen at their gradient-time
/// values.
#[allow(clippy::too_many_arguments)]
fn verify_step_gradients(
    model: &mut HoiModel,
    batch: &[usize],
    groups: &[&[PairExample]],
    offsets: &[usize],
    targets: &StaticTargets,
    bank: &PriorBank,
    opts: &TrainOptions,
    frozen_teachers: &[Option<Matrix>],
    n_batch: usize,
) -> Result<f64> {
    let batch: Vec<usize> = batch.to_vec();
    let loss_of = |m: &HoiModel| -> Result<f64> {
        let mut total = 0.0;
        for (bi, &gi) in batch.iter().enumerate() {
            let (loss_sum, _, _, _) = image_loss(
                m,
                groups[gi],
                offsets[gi],
                targets,
                bank,
                &opts.weights,
                &opts.projection,
                frozen_teachers[bi].as_ref(),
                false,
            )?;
            total += loss_sum;
        }
        Ok(total / n_batch as f64)
    };
    finite_diff_check_model(model, 1e-5, loss_of)
}

/// Run inference over pair batches and emit scored detections for every
/// valid class of each pair's object, optionally applying the projection
/// post-process first.
pub fn infer_detections(
    model: &HoiModel,
    pairs: &[PairExample],
    space: &HoiSpace,
    post: Option<(&PriorBank, &ProjectionConfig)>,
) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for group in group_by_image(pairs) {
        let preds = model.predict_image(group)?;
        for (pair, pred) in group.iter().zip(&preds) {
            let probs = match post {
                Some((bank, cfg)) => {
                    crate::losses::post_process(
                        pred,
                        pair.det_human,
                        pair.det_object,
                        pair.object,
                        bank,
                        cfg,
                    )?
                    .0
                    .action_probs
                }
                None => pred.action_probs.clone(),
            };
            for (m, &(o, a)) in space.hoi_classes.iter().enumerate() {
                if o != pair.object {
                    continue;
                }
                out.push(DetectionRecord {
                    image_id: pair.image_id.clone(),
                    hoi_class: m,
                    score: pair.det_human * pair.det_object * probs[a].clamp(0.0, 1.0),
                    human_box: pair.human_box,
                    object_box: pair.object_box,
                });
            }
        }
    }
    Ok(out)
}

/// Inference + evaluation in one step.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    model: &HoiModel,
    test_pairs: &[PairExample],
    test_gts: &[GroundTruthInstance],
    space: &HoiSpace,
    train_counts: &[u32],
    setting: EvalSetting,
    post: Option<(&PriorBank, &ProjectionConfig)>,
) -> Result<EvalReport> {
    let dets = infer_detections(model, test_pairs, space, post)?;
    evaluate(&dets, test_gts, space, setting, train_counts, 0.5)
}

/// Remove the positives of held-out classes from annotations (for the
/// zero-shot protocol). Instances whose action sets empty out are removed;
/// images are kept.
pub fn drop_class_positives_annotations(
    dataset: &mut Vec<AnnotationRecord>,
    space: &HoiSpace,
    held_out: &BTreeSet<usize>,
) {
    let held: BTreeSet<(usize, usize)> = held_out
        .iter()
        .map(|&m| space.hoi_classes[m])
        .collect();
    for rec in dataset.iter_mut() {
        for inst in rec.instances.iter_mut() {
            inst.actions.retain(|&a| !held.contains(&(inst.object, a)));
        }
        rec.instances.retain(|inst| !inst.actions.is_empty());
    }
}

/// Remove the positives of held-out classes from pair labels. Pairs stay in
/// training with their reduced (possibly empty) label sets.
pub fn drop_class_positives_pairs(
    pairs: &mut [PairExample],
    space: &HoiSpace,
    held_out: &BTreeSet<usize>,
) {
    let held: BTreeSet<(usize, usize)> = held_out
        .iter()
        .map(|&m| space.hoi_classes[m])
        .collect();
    for pair in pairs.iter_mut() {
        let object = pair.object;
        pair.gt_actions.retain(|&a| !held.contains(&(object, a)));
    }
}
