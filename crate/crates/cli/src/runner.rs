//! Training orchestration: staged objective schedule, batch assembly over
//! the labeled/unlabeled pools, periodic evaluation, and checkpointing.
//!
//! A run is strictly sequential and deterministic in its seed: batches are
//! drawn from per-epoch permutations derived from `(seed, epoch)`, so the
//! batch at iteration `i` is a pure function of the configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use semimultipose_core::engine::{sgd_step, Real, Tape, Tensor};
use semimultipose_core::eval::{average_precision, ApReport, OksParams};
use semimultipose_core::fusion::{
    decode_instances, extract_pseudo_labels, DecodeConfig, Prediction, PseudoLabels,
};
use semimultipose_core::losses::{semi_objective, LossBreakdown, LossWeights};
use semimultipose_core::model::{ModelConfig, ModelParams};
use semimultipose_core::synth::{rng_for, SplitSet};
use semimultipose_core::targets::{build_targets, grid_coordinates, pseudo_box, Instance};

use crate::checkpoint;
use crate::error::AppError;

/// Everything a single training run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub batch_size: usize,
    /// Labeled : unlabeled mix once the unlabeled stage starts.
    pub labeled_ratio: usize,
    pub unlabeled_ratio: usize,
    pub lr: Real,
    pub lr_decay_factor: Real,
    pub lr_decay_at: usize,
    /// First iteration at which the labeled fusion loss is active.
    pub fl_start_iter: usize,
    /// First iteration at which the unlabeled fusion loss is active.
    pub fu_start_iter: usize,
    pub weights: LossWeights,
    pub window_halfwidth: usize,
    pub box_margin: Real,
    pub eval_every: usize,
    pub seed: u64,
    /// Suppression radius for instance decoding, in grid cells; derived from
    /// the labeled pseudo boxes when absent.
    pub nms_radius: Option<Real>,
    /// Multiplier on the derived suppression radius. Saturated box maps give
    /// equal-score anchors, and the bare half-diagonal lets duplicates of
    /// the same instance survive; 1.5 suppresses them.
    pub nms_radius_scale: Real,
    pub top_n: usize,
    /// OKS tolerance of the periodic test evaluation.
    pub sigma2: Real,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(ModelConfig::default())
    }
}

impl TrainConfig {
    /// Desk-scale schedule: a 1/10 scaling of the published 15k-iteration
    /// schedule (fusion loss at 2k, unlabeled loss at 5k, decay at 5k).
    pub fn desk(model: ModelConfig) -> Self {
        TrainConfig {
            total_iters: 1500,
            batch_size: 3,
            labeled_ratio: 2,
            unlabeled_ratio: 1,
            lr: 0.1,
            lr_decay_factor: 10.0,
            lr_decay_at: 500,
            fl_start_iter: 200,
            fu_start_iter: 500,
            weights: LossWeights::standard(),
            window_halfwidth: 1,
            box_margin: 0.0,
            eval_every: 100,
            seed: 0,
            nms_radius: None,
            nms_radius_scale: 1.5,
            top_n: 100,
            sigma2: 1.0,
            model,
        }
    }

    /// The published schedule: 15k iterations, lr 0.01 decayed 100x after
    /// 5k, fusion loss from 2k, unlabeled loss from 5k.
    pub fn paper_schedule(model: ModelConfig) -> Self {
        TrainConfig {
            total_iters: 15_000,
            lr: 0.01,
            lr_decay_factor: 100.0,
            lr_decay_at: 5_000,
            fl_start_iter: 2_000,
            fu_start_iter: 5_000,
            eval_every: 1_000,
            ..Self::desk(model)
        }
    }

    pub fn validate(&self) -> Result<(), AppError> {
        if self.batch_size == 0 {
            return Err(AppError::validation("batch_size must be >= 1"));
        }
        if !(self.fl_start_iter <= self.fu_start_iter && self.fu_start_iter <= self.total_iters) {
            return Err(AppError::validation(
                "need fl_start_iter <= fu_start_iter <= total_iters",
            ));
        }
        if self.labeled_ratio == 0 {
            return Err(AppError::validation("labeled_ratio must be >= 1"));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(AppError::validation("lr_decay_factor must be > 0"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(AppError::validation("lr must be finite and >= 0"));
        }
        self.weights
            .validate()
            .map_err(|e| AppError::validation(e.to_string()))?;
        self.model
            .validate()
            .map_err(|e| AppError::validation(e.to_string()))?;
        Ok(())
    }

    /// Default alpha under the sparse-label rule: stronger labeled fusion
    /// when few labeled frames are available.
    pub fn default_alpha(n_labeled: usize) -> Real {
        if n_labeled <= 10 {
            5.0
        } else {
            0.01
        }
    }

    fn batch_mix(&self, iter: usize, have_unlabeled: bool) -> (usize, usize) {
        if iter < self.fu_start_iter || !have_unlabeled {
            return (self.batch_size, 0);
        }
        let denom = self.labeled_ratio + self.unlabeled_ratio;
        let n_u = (self.batch_size * self.unlabeled_ratio / denom).max(1);
        let n_u = n_u.min(self.batch_size.saturating_sub(1));
        (self.batch_size - n_u, n_u)
    }
}

/// Loss line for one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterStats {
    pub iter: usize,
    pub lr: Real,
    pub losses: LossBreakdown,
}

/// Test evaluation at one point of the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub iter: usize,
    pub ap: Real,
}

/// Full audit trail of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub per_iter: Vec<IterStats>,
    pub evals: Vec<EvalPoint>,
    pub final_ap: Real,
    pub final_checkpoint: Option<PathBuf>,
}

impl RunRecord {
    /// First evaluation iteration reaching `fraction` of the final AP.
    pub fn iters_to_fraction_of_final(&self, fraction: Real) -> Option<usize> {
        let target = fraction * self.final_ap;
        self.evals.iter().find(|e| e.ap >= target).map(|e| e.iter)
    }
}

/// Batch membership for one iteration: a pure function of
/// `(seed, stream, slot range, pool size)`, drawing without replacement
/// within each epoch-long permutation of the pool.
fn batch_indices(
    seed: u64,
    stream: u64,
    first_slot: usize,
    count: usize,
    pool: usize,
) -> Vec<usize> {
    assert!(pool > 0);
    let mut out = Vec::with_capacity(count);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for j in 0..count {
        let slot = first_slot + j;
        let epoch = slot / pool;
        let perm = match &cached {
            Some((e, p)) if *e == epoch => p,
            _ => {
                let mut p: Vec<usize> = (0..pool).collect();
                let mut rng = rng_for(seed, stream, epoch as u64);
                for i in (1..p.len()).rev() {
                    p.swap(i, rand::Rng::gen_range(&mut rng, 0..=i));
                }
                cached = Some((epoch, p));
                &cached.as_ref().unwrap().1
            }
        };
        out.push(perm[slot % pool]);
    }
    out
}

const LABELED_STREAM: u64 = 0x1ab;
const UNLABELED_STREAM: u64 = 0x01a;

/// Labeled and unlabeled scene indices for one iteration.
pub fn assemble_batch(
    config: &TrainConfig,
    iter: usize,
    n_labeled: usize,
    n_unlabeled: usize,
) -> (Vec<usize>, Vec<usize>) {
    let (n_l, n_u) = config.batch_mix(iter, n_unlabeled > 0);
    let labeled_first = if iter < config.fu_start_iter {
        iter * config.batch_size
    } else {
        let (post_l, _) = config.batch_mix(config.fu_start_iter, n_unlabeled > 0);
        config.fu_start_iter * config.batch_size + (iter - config.fu_start_iter) * post_l
    };
    let labeled = batch_indices(config.seed, LABELED_STREAM, labeled_first, n_l, n_labeled);
    let unlabeled = if n_u > 0 {
        let first = (iter - config.fu_start_iter) * n_u;
        batch_indices(config.seed, UNLABELED_STREAM, first, n_u, n_unlabeled)
    } else {
        Vec::new()
    };
    (labeled, unlabeled)
}

/// Scenes preprocessed for training: stacked image rows plus grid-space
/// annotations.
struct Prepared {
    images: Vec<Tensor>,
    /// Grid-unit instances for labeled scenes.
    grid_instances: Vec<Vec<Instance>>,
    /// Pixel-unit instances (for evaluation).
    pixel_instances: Vec<Vec<Instance>>,
}

fn to_grid(instances: &[Instance], stride: usize, h: usize, w: usize) -> Vec<Instance> {
    let s = stride as Real;
    instances
        .iter()
        .map(|inst| {
            let kps = inst
                .keypoints
                .iter()
                .map(|&[r, c]| {
                    [
                        (r / s).min(h as Real - 1.0).max(0.0),
                        (c / s).min(w as Real - 1.0).max(0.0),
                    ]
                })
                .collect();
            Instance::with_visibility(kps, inst.visibility.clone()).expect("lengths preserved")
        })
        .collect()
}

fn prepare(
    scenes: &[semimultipose_core::synth::Scene],
    stride: usize,
    require_labels: bool,
) -> Result<Prepared, AppError> {
    let mut images = Vec::with_capacity(scenes.len());
    let mut grid_instances = Vec::new();
    let mut pixel_instances = Vec::new();
    for scene in scenes {
        let shape = scene.image.shape().to_vec();
        let (h, w) = (shape[0] / stride, shape[1] / stride);
        images.push(scene.image.clone());
        match (&scene.instances, require_labels) {
            (Some(inst), _) => {
                grid_instances.push(to_grid(inst, stride, h, w));
                pixel_instances.push(inst.clone());
            }
            (None, true) => {
                return Err(AppError::validation("scene is missing annotations"));
            }
            (None, false) => {}
        }
    }
    Ok(Prepared {
        images,
        grid_instances,
        pixel_instances,
    })
}

fn stack_images(images: &[Tensor], picks: &[usize]) -> Result<Tensor, AppError> {
    let shape = images[picks[0]].shape().to_vec();
    let mut data = Vec::with_capacity(picks.len() * images[picks[0]].numel());
    for &i in picks {
        if images[i].shape() != shape {
            return Err(AppError::validation("mixed image sizes in one dataset"));
        }
        data.extend_from_slice(images[i].data());
    }
    let full = [&[picks.len()][..], &shape].concat();
    Tensor::new(&full, data).map_err(AppError::from_core)
}

/// Extracts one frame `[H,W,...]` out of a batched `[N,H,W,...]` tensor.
fn slice_frame(t: &Tensor, n: usize) -> Tensor {
    let shape = t.shape();
    let per = t.numel() / shape[0];
    let sub = &t.data()[n * per..(n + 1) * per];
    Tensor::new(&shape[1..], sub.to_vec()).expect("sub-tensor of a finite tensor")
}

/// Half the mean pseudo-box diagonal of the labeled set, in grid cells.
pub fn auto_nms_radius(grid_instances: &[Vec<Instance>]) -> Real {
    let mut total = 0.0;
    let mut count = 0usize;
    for frame in grid_instances {
        for inst in frame {
            if inst.visible_count() > 0 {
                if let Ok(b) = pseudo_box(inst, 0.0, usize::MAX, usize::MAX) {
                    total += b.diagonal();
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        2.0
    } else {
        (total / count as Real / 2.0).max(1.0)
    }
}

/// Runs the test set through the model and scores it with OKS-based AP.
/// Returns the report plus per-frame predictions in pixel coordinates.
pub fn evaluate_params(
    params: &ModelParams,
    test: &Prepared2,
    decode: &DecodeConfig,
    sigma2: Real,
) -> Result<(ApReport, Vec<Prediction>), AppError> {
    let stride = params.config.stride as Real;
    let mut frames = Vec::with_capacity(test.images.len());
    let mut kept_predictions = Vec::with_capacity(test.images.len());
    for (i, image) in test.images.iter().enumerate() {
        let tape = Tape::new();
        let batched = stack_one(image)?;
        let pass = params.forward(&tape, &batched).map_err(AppError::from_core)?;
        let b = slice_frame(&pass.outs.b.value(), 0);
        let d = slice_frame(&pass.outs.d.value(), 0);
        let pred = decode_instances(&b, &d, decode).map_err(AppError::from_core)?;
        // back to pixel coordinates for scoring against the annotations
        let pixel_pred = Prediction {
            instances: pred
                .instances
                .iter()
                .map(|inst| {
                    Instance::new(
                        inst.keypoints
                            .iter()
                            .map(|&[r, c]| [r * stride, c * stride])
                            .collect(),
                    )
                })
                .collect(),
            scores: pred.scores.clone(),
        };
        kept_predictions.push(pixel_pred.clone());
        frames.push((pixel_pred, test.pixel_instances[i].clone()));
    }
    let oks = OksParams::new(sigma2).map_err(AppError::from_core)?;
    let report = average_precision(&frames, &oks).map_err(AppError::from_core)?;
    Ok((report, kept_predictions))
}

fn stack_one(image: &Tensor) -> Result<Tensor, AppError> {
    let full = [&[1][..], image.shape()].concat();
    Tensor::new(&full, image.data().to_vec()).map_err(AppError::from_core)
}

/// Prepared data exposed to evaluation callers.
pub struct Prepared2 {
    pub images: Vec<Tensor>,
    pub pixel_instances: Vec<Vec<Instance>>,
}

/// Trains a model on the given splits. Deterministic in the configuration;
/// checkpoints are written when `out_dir` is given (at stage boundaries and
/// every `eval_every` iterations).
pub fn train(
    config: &TrainConfig,
    data: &SplitSet,
    out_dir: Option<&Path>,
    verbose: bool,
) -> Result<(ModelParams, RunRecord), AppError> {
    config.validate()?;
    if data.labeled.is_empty() {
        return Err(AppError::validation("no labeled scenes"));
    }
    let stride = config.model.stride;
    let labeled = prepare(&data.labeled, stride, true)?;
    let unlabeled = prepare(&data.unlabeled, stride, false)?;
    let test = prepare(&data.test, stride, true)?;
    let test2 = Prepared2 {
        images: test.images.clone(),
        pixel_instances: test.pixel_instances.clone(),
    };

    let shape = labeled.images[0].shape().to_vec();
    let (gh, gw) = (shape[0] / stride, shape[1] / stride);
    let k = config.model.num_parts;
    let grid = grid_coordinates(gh, gw);
    let nms_radius = config
        .nms_radius
        .unwrap_or_else(|| config.nms_radius_scale * auto_nms_radius(&labeled.grid_instances));
    let decode = DecodeConfig::new(config.weights.delta, nms_radius, config.top_n)
        .map_err(AppError::from_core)?;

    let mut params =
        ModelParams::init(&config.model, config.seed).map_err(AppError::from_core)?;
    if verbose {
        log::info!(
            "training: {} params, {} labeled / {} unlabeled / {} test frames, nms_radius {:.2}",
            params.param_count(),
            labeled.images.len(),
            unlabeled.images.len(),
            test.images.len(),
            nms_radius
        );
    }

    let mut record = RunRecord {
        per_iter: Vec::with_capacity(config.total_iters),
        evals: Vec::new(),
        final_ap: 0.0,
        final_checkpoint: None,
    };

    let extract = |b: &Tensor, d: &Tensor, n: usize| -> Result<Vec<PseudoLabels>, AppError> {
        (0..n)
            .map(|i| {
                extract_pseudo_labels(
                    &slice_frame(b, i),
                    &slice_frame(d, i),
                    &grid,
                    config.weights.delta,
                )
                .map_err(AppError::from_core)
            })
            .collect()
    };

    for iter in 0..config.total_iters {
        let lr = if iter >= config.lr_decay_at {
            config.lr / config.lr_decay_factor
        } else {
            config.lr
        };
        let (picks_l, picks_u) =
            assemble_batch(config, iter, labeled.images.len(), unlabeled.images.len());

        let tape = Tape::new();
        let frames_l = stack_images(&labeled.images, &picks_l)?;
        let pass_l = params.forward(&tape, &frames_l).map_err(AppError::from_core)?;
        let batch_instances: Vec<Vec<Instance>> = picks_l
            .iter()
            .map(|&i| labeled.grid_instances[i].clone())
            .collect();
        let targets = build_targets(
            &batch_instances,
            gh,
            gw,
            k,
            config.window_halfwidth,
            config.box_margin,
        )
        .map_err(AppError::from_core)?;

        let pseudo_l = if iter >= config.fl_start_iter {
            Some(extract(
                &pass_l.outs.b.value(),
                &pass_l.outs.d.value(),
                picks_l.len(),
            )?)
        } else {
            None
        };

        let (pass_u, pseudo_u) = if !picks_u.is_empty() {
            let frames_u = stack_images(&unlabeled.images, &picks_u)?;
            let pass = params.forward(&tape, &frames_u).map_err(AppError::from_core)?;
            let ps = extract(&pass.outs.b.value(), &pass.outs.d.value(), picks_u.len())?;
            (Some(pass), Some(ps))
        } else {
            (None, None)
        };

        let objective = semi_objective(
            &pass_l.outs,
            &targets,
            pass_u.as_ref().map(|p| &p.outs),
            pseudo_l.as_deref(),
            pseudo_u.as_deref(),
            &config.weights,
            config.window_halfwidth,
        )
        .map_err(AppError::from_core)?;
        let losses = objective.breakdown().map_err(AppError::from_core)?;
        if !losses.total.is_finite() {
            return Err(AppError::runtime(format!(
                "training diverged at iteration {iter}: {losses:?}"
            )));
        }

        tape.backward(&objective.total).map_err(|e| {
            AppError::runtime(format!(
                "training diverged at iteration {iter}: {e} (losses {losses:?})"
            ))
        })?;
        params.absorb_grads(&pass_l).map_err(AppError::from_core)?;
        if let Some(pass) = &pass_u {
            params.absorb_grads(pass).map_err(AppError::from_core)?;
        }
        sgd_step(params.params_mut(), lr).map_err(AppError::from_core)?;

        record.per_iter.push(IterStats { iter, lr, losses });

        let is_stage_boundary = iter + 1 == config.fl_start_iter
            || iter + 1 == config.fu_start_iter
            || iter + 1 == config.lr_decay_at;
        let is_eval = (iter + 1) % config.eval_every == 0 || iter + 1 == config.total_iters;
        if is_eval {
            let (report, _) = evaluate_params(&params, &test2, &decode, config.sigma2)?;
            record.evals.push(EvalPoint {
                iter: iter + 1,
                ap: report.ap,
            });
            if verbose {
                log::info!(
                    "iter={} lr={:.5} la={:.5} lb={:.5} ld={:.5} lfl={:.5} lfu={:.5} total={:.5} test_ap={:.4}",
                    iter + 1, lr, losses.la, losses.lb, losses.ld, losses.lfl, losses.lfu,
                    losses.total, report.ap
                );
            }
        }
        if let Some(dir) = out_dir {
            if is_eval || is_stage_boundary {
                let path = dir.join(format!("ckpt_{:06}.json", iter + 1));
                checkpoint::save(&params, iter + 1, &path)?;
            }
        }
    }

    record.final_ap = record.evals.last().map_or(0.0, |e| e.ap);
    if let Some(dir) = out_dir {
        let path = dir.join("final.json");
        checkpoint::save(&params, config.total_iters, &path)?;
        record.final_checkpoint = Some(path);
    }
    Ok((params, record))
}
