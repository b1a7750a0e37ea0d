//! Training orchestration: source pretraining, contrast adaptation with
//! counterfactual intervention, and target self-training.

mod checkpoint;
mod optim;

pub use checkpoint::{
    config_digest, decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint,
    save_checkpoint, TrainState, FORMAT_VERSION, MAGIC,
};
pub use optim::{lr_at, sgd_step, LrSchedule, SgdState};

use rayon::prelude::*;

use crate::autodiff::{kernels, NodeId, Tape};
use crate::data::{BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::intervention::{make_counterfactual, sample_derangement, sample_permutation};
use crate::labels::{LabelBatch, IGNORE};
use crate::losses::{self, LossBundle, SceParams, TotalParts};
use crate::metrics::{scores, ConfusionMatrix, MetricReport};
use crate::model::{
    argmax_with_confidence, upsample_logits, ArchConfig, BoundModel, InferenceMode, ModelParams,
};
use crate::proto::{
    aggregate_class, momentum, similarity, update_prototypes, AggregateInput,
    AggregationWeighting, ClassAggregate, ProtoAccumulator, PrototypeBank,
};
use crate::rng::{derive_seed, tag};
use crate::tensor::Tensor;

/// Hyperparameters of one training phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
}

/// Component toggles for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    /// Dual-encoder disentanglement (bias encoder + bias head).
    pub use_cfd: bool,
    /// Prototype contrast.
    pub use_cpc: bool,
    /// Counterfactual intervention terms.
    pub use_ci: bool,
    /// Phase-3 self-training.
    pub use_selftrain: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_cfd: true,
            use_cpc: true,
            use_ci: true,
            use_selftrain: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub pretrain: PhaseHyper,
    pub adapt: PhaseHyper,
    pub selftrain: PhaseHyper,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub lr_power: f64,
    /// Similarity temperature.
    pub tau_sim: f64,
    /// Explicit warmup iteration count; `None` derives it from the fraction.
    pub warmup_iters: Option<usize>,
    pub warmup_fraction: f64,
    /// Self-training retention percentage per class.
    pub eta: f64,
    pub m0: f64,
    pub alpha: f64,
    pub sce: SceParams,
    pub aggregation: AggregationWeighting,
    /// Confidence gate for target pixels entering prototype updates and the
    /// target contrast term; 0 keeps every pixel.
    pub pseudo_gate: f64,
    /// Detach cross-encoder channels so the causal objective cannot recruit
    /// the bias encoder and vice versa.
    pub stop_grad_cross: bool,
    /// Force fixed-point-free intervention permutations.
    pub derangement: bool,
    pub flags: AblationFlags,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Full-scale defaults following the published training table.
    fn default() -> Self {
        TrainConfig {
            pretrain: PhaseHyper {
                lr: 5e-4,
                batch_size: 8,
                iterations: 20_000,
            },
            adapt: PhaseHyper {
                lr: 1e-3,
                batch_size: 2,
                iterations: 50_000,
            },
            selftrain: PhaseHyper {
                lr: 5e-4,
                batch_size: 8,
                iterations: 20_000,
            },
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_schedule: LrSchedule::Poly,
            lr_power: 0.9,
            tau_sim: 0.1,
            warmup_iters: None,
            warmup_fraction: 0.2,
            eta: 0.5,
            m0: 0.9,
            alpha: 0.9,
            sce: SceParams::default(),
            aggregation: AggregationWeighting::Inverse,
            pseudo_gate: 0.0,
            stop_grad_cross: true,
            derangement: false,
            flags: AblationFlags::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale configuration used by the synthetic benchmark. The
    /// deviations from the full-scale defaults were calibrated on pilot
    /// runs: a hotter pretrain and cooler adaptation rate suit the small
    /// encoder and short schedules, the softer similarity temperature
    /// keeps the contrast gradients from overwhelming the counterfactual
    /// terms, the confidence gate keeps early low-quality target pixels
    /// out of the prototype updates, and fixed-point-free permutations
    /// give every counterfactual sample a real bias swap at batch size 4.
    pub fn desk() -> Self {
        TrainConfig {
            pretrain: PhaseHyper {
                lr: 2e-3,
                batch_size: 8,
                iterations: 500,
            },
            adapt: PhaseHyper {
                lr: 5e-4,
                batch_size: 4,
                iterations: 1000,
            },
            selftrain: PhaseHyper {
                lr: 5e-4,
                batch_size: 8,
                iterations: 500,
            },
            tau_sim: 1.0,
            warmup_iters: Some(100),
            pseudo_gate: 0.85,
            derangement: true,
            ..TrainConfig::default()
        }
    }

    /// Scale iteration counts and batch sizes by one factor (floored at 1).
    pub fn scaled(mut self, factor: f64) -> Self {
        let scale_iters = |n: usize| ((n as f64 * factor).round() as usize).max(1);
        let scale_batch = |n: usize| ((n as f64 * factor).round() as usize).max(1);
        for phase in [&mut self.pretrain, &mut self.adapt, &mut self.selftrain] {
            phase.iterations = scale_iters(phase.iterations);
            phase.batch_size = scale_batch(phase.batch_size);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, phase) in [
            ("pretrain", &self.pretrain),
            ("adapt", &self.adapt),
            ("selftrain", &self.selftrain),
        ] {
            if phase.iterations < 1 {
                return Err(Error::Contract(format!("{name}: iterations must be >= 1")));
            }
            if phase.lr <= 0.0 {
                return Err(Error::Contract(format!("{name}: lr must be > 0")));
            }
            if phase.batch_size < 1 {
                return Err(Error::Contract(format!("{name}: batch_size must be >= 1")));
            }
        }
        if self.flags.use_ci && !self.flags.use_cfd {
            return Err(Error::Contract(
                "flags: use_ci requires use_cfd (counterfactuals need a bias encoder)".into(),
            ));
        }
        if self.tau_sim <= 0.0 {
            return Err(Error::Contract("tau_sim must be > 0".into()));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Contract("eta must be in (0, 1]".into()));
        }
        if !(self.m0 > 0.0 && self.m0 <= 1.0 && self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Contract("m0 and alpha must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn warmup(&self) -> usize {
        self.warmup_iters
            .unwrap_or_else(|| (self.warmup_fraction * self.adapt.iterations as f64).round() as usize)
    }

    fn lr(&self, phase: &PhaseHyper, t: usize) -> f64 {
        lr_at(self.lr_schedule, t, phase.iterations, phase.lr, self.lr_power)
    }
}

/// One logged iteration. `class_update` and `bank_after` snapshot the
/// prototype pipeline so an offline replay can re-derive the EMA
/// trajectory.
#[derive(Debug, Clone)]
pub struct IterRecord {
    pub iteration: usize,
    pub lr: f64,
    pub m: f64,
    pub bundle: LossBundle,
    pub class_update: Option<ClassAggregate>,
    pub bank_after: Option<Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<IterRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "iteration,lr,m,l_seg,l_s,l_t,l_cc,l_c1,l_c2,l_b1,l_b2,l_c,l_b,total,n_seg,n_s,n_t,n_c1,n_c2,n_b1,n_b2";

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 96);
        out.push_str(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.iteration, r.lr, r.m, r.bundle.csv_row()));
        }
        out
    }
}

fn batch_plan(len: usize, batch_size: usize, seed: u64, phase: u64, domain: u64) -> BatchPlan {
    BatchPlan::new(len, batch_size, derive_seed(seed, &[tag::BATCH, phase, domain]), true)
}

/// Supervised CE step shared by phases 1 and 3: causal encoder (plus bias
/// encoder when enabled), concatenated features, causal head, upsample,
/// cross entropy at label resolution.
fn supervised_step(
    cfg: &TrainConfig,
    state: &mut TrainState,
    dataset: &Dataset,
    phase: &PhaseHyper,
    phase_tag: u64,
    with_bias_encoder: bool,
    t: usize,
) -> Result<(f64, usize, f64)> {
    let plan = batch_plan(dataset.len(), phase.batch_size, cfg.seed, phase_tag, tag::SOURCE);
    let (images, labels) = dataset.gather(&plan.batch(t as u64));
    let (h, w) = (images.shape()[2], images.shape()[3]);

    let mut tape = Tape::new();
    let x = tape.constant(images);
    let bound = BoundModel::bind(&mut tape, &state.params, true);
    let causal = bound.encode_causal(&mut tape, x)?;
    let bias = if with_bias_encoder {
        bound.encode_bias(&mut tape, x)?
    } else {
        let shape = tape.value(causal).shape().to_vec();
        tape.constant(Tensor::zeros(&shape))
    };
    let features = tape.concat_channels(causal, bias)?;
    let logits = bound.classify_causal(&mut tape, features)?;
    let up = upsample_logits(&mut tape, logits, h, w)?;
    let (l_seg, n_seg) = tape.ce_pixels(up, &labels)?;
    let loss = tape.value(l_seg).item();
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            tensor: "l_seg".into(),
            iteration: t,
        });
    }
    let lr = cfg.lr(phase, t);
    apply_gradients(cfg, state, &tape, &bound, l_seg, lr, t)?;
    Ok((loss, n_seg, lr))
}

fn apply_gradients(
    cfg: &TrainConfig,
    state: &mut TrainState,
    tape: &Tape,
    bound: &BoundModel,
    loss: NodeId,
    lr: f64,
    t: usize,
) -> Result<()> {
    let mut grads = tape.backward(loss)?;
    let mut owned: Vec<(String, Tensor)> = Vec::new();
    for (name, node) in &bound.param_nodes {
        if let Some(g) = grads.take(*node) {
            owned.push((name.clone(), g));
        }
    }
    let mut sgd = SgdState {
        velocities: std::mem::take(&mut state.velocities),
    };
    {
        let mut tensors = state.params.named_tensors_mut();
        let mut updates: Vec<(&str, &mut Tensor, &Tensor)> = Vec::new();
        for (name, grad) in &owned {
            let slot = tensors
                .iter_mut()
                .position(|(n, _)| n == name)
                .expect("gradient for unknown parameter");
            // Split-borrow: remove the entry so we can hold several at once.
            let (n, param) = tensors.swap_remove(slot);
            let _ = n;
            updates.push((name.as_str(), param, grad));
        }
        sgd.step(updates, lr, cfg.momentum, cfg.weight_decay, t)?;
    }
    state.velocities = sgd.velocities;
    Ok(())
}

/// Phase 1: supervised pretraining of the causal path on source data with
/// bias channels zeroed. Afterwards the bias encoder starts as a slightly
/// perturbed copy of the trained causal encoder.
pub fn pretrain_source(
    cfg: &TrainConfig,
    arch: &ArchConfig,
    source: &Dataset,
) -> Result<(TrainState, TrainLog)> {
    cfg.validate()?;
    source.validate(arch.output_stride)?;
    if source.is_empty() {
        return Err(Error::Empty("pretrain on empty dataset".into()));
    }
    let params = crate::model::init_params(arch)?;
    let mut state = TrainState::fresh(params);
    let mut log = TrainLog::default();
    for t in 0..cfg.pretrain.iterations {
        let (loss, n_seg, lr) = supervised_step(
            cfg,
            &mut state,
            source,
            &cfg.pretrain,
            tag::PHASE_PRETRAIN,
            false,
            t,
        )?;
        log.records.push(IterRecord {
            iteration: t,
            lr,
            m: 0.0,
            bundle: LossBundle {
                l_seg: loss,
                total: loss,
                n_seg,
                ..LossBundle::default()
            },
            class_update: None,
            bank_after: None,
        });
        state.iteration = (t + 1) as u64;
    }
    state
        .params
        .reinit_bias_encoder_from_causal(1e-2, derive_seed(cfg.seed, &[tag::PERTURB]));
    state.velocities.clear();
    state.iteration = 0;
    Ok((state, log))
}

/// Dedicated pass between phases 1 and 2: per-class mean causal features
/// over the labeled source set.
pub fn init_prototype_bank(
    cfg: &TrainConfig,
    params: &ModelParams,
    source: &Dataset,
) -> Result<PrototypeBank> {
    if source.is_empty() {
        return Err(Error::Empty("prototype init on empty dataset".into()));
    }
    let stride = params.arch.output_stride;
    let mut acc = ProtoAccumulator::new(params.arch.num_classes, params.arch.feature_dim);
    let chunk = 8;
    let indices: Vec<usize> = (0..source.len()).collect();
    for batch in indices.chunks(chunk) {
        let (images, labels) = source.gather(batch);
        let features = crate::model::encode_causal_eval(params, &images)?;
        acc.add(&features, &labels.downsample_nearest(stride))?;
    }
    Ok(acc.finish(cfg.adapt.iterations, cfg.m0, cfg.alpha))
}

/// Pseudo-labels at feature resolution from the current causal head, max
/// softmax gated by `rho`. Pure forward; nothing reaches the tape.
fn feature_pseudo_labels(
    params: &ModelParams,
    causal: &Tensor,
    bias: Option<&Tensor>,
    rho: f64,
) -> LabelBatch {
    let zero;
    let bias = match bias {
        Some(b) => b,
        None => {
            zero = Tensor::zeros(causal.shape());
            &zero
        }
    };
    let features = kernels::concat_channels(causal, bias);
    let logits = kernels::conv2d(
        &features,
        &params.head_causal.weight,
        &params.head_causal.bias,
        1,
        0,
    );
    let (mut pseudo, conf) = argmax_with_confidence(&logits);
    if rho > 0.0 {
        for (v, &c) in pseudo.data.iter_mut().zip(conf.data()) {
            if c < rho {
                *v = IGNORE;
            }
        }
    }
    pseudo
}

/// Phase 2: contrast adaptation. Runs iterations `state.iteration..end`
/// so a checkpointed run resumes mid-phase; pass `cfg.adapt.iterations`
/// to finish the phase.
pub fn adapt_cpca(
    cfg: &TrainConfig,
    state: &mut TrainState,
    source: &Dataset,
    target: &Dataset,
    end: usize,
) -> Result<TrainLog> {
    cfg.validate()?;
    let stride = state.params.arch.output_stride;
    source.validate(stride)?;
    target.validate(stride)?;
    let bank_ok = state.bank.as_ref().is_some_and(|b| b.all_valid());
    if !bank_ok {
        let missing = state
            .bank
            .as_ref()
            .map(|b| b.invalid_classes())
            .unwrap_or_else(|| (0..state.params.arch.num_classes).collect());
        return Err(Error::IncompleteBank(missing));
    }
    let warmup = cfg.warmup();
    let src_plan = batch_plan(
        source.len(),
        cfg.adapt.batch_size,
        cfg.seed,
        tag::PHASE_ADAPT,
        tag::SOURCE,
    );
    let tgt_plan = batch_plan(
        target.len(),
        cfg.adapt.batch_size,
        cfg.seed,
        tag::PHASE_ADAPT,
        tag::TARGET,
    );
    let mut log = TrainLog::default();

    let start = state.iteration as usize;
    for t in start..end {
        let (src_images, src_labels) = source.gather(&src_plan.batch(t as u64));
        let (tgt_images, _) = target.gather(&tgt_plan.batch(t as u64));
        let (h, _w) = (src_images.shape()[2], src_images.shape()[3]);
        let _ = h;
        let labels_ds = src_labels.downsample_nearest(stride);
        let batch = src_images.shape()[0];

        let mut tape = Tape::new();
        let x_s = tape.constant(src_images);
        let x_t = tape.constant(tgt_images);
        let bound = BoundModel::bind(&mut tape, &state.params, true);

        let c_s = bound.encode_causal(&mut tape, x_s)?;
        let b_s = if cfg.flags.use_cfd {
            Some(bound.encode_bias(&mut tape, x_s)?)
        } else {
            None
        };
        let c_t = bound.encode_causal(&mut tape, x_t)?;
        let b_t = if cfg.flags.use_cfd {
            Some(bound.encode_bias(&mut tape, x_t)?)
        } else {
            None
        };

        let mut bundle = LossBundle::default();
        let mut parts = TotalParts::default();

        // Target pseudo-labels at feature resolution, used by the contrast
        // term and the prototype update. Detached by construction.
        let pseudo_t = feature_pseudo_labels(
            &state.params,
            tape.value(c_t),
            b_t.map(|b| tape.value(b)),
            cfg.pseudo_gate,
        );

        let bank = state.bank.as_ref().unwrap();
        if cfg.flags.use_cpc {
            let terms = losses::contrast_loss(
                &mut tape, c_s, &labels_ds, c_t, &pseudo_t, bank, cfg.tau_sim,
            )?;
            // the bank is a buffer: its kernels must stay outside the
            // trainable graph
            debug_assert!(!tape.requires_grad(terms.kernel_nodes.0));
            debug_assert!(!tape.requires_grad(terms.kernel_nodes.1));
            bundle.l_s = tape.value(terms.l_s).item();
            bundle.l_t = tape.value(terms.l_t).item();
            bundle.l_cc = tape.value(terms.l_cc).item();
            bundle.n_s = terms.n_s;
            bundle.n_t = terms.n_t;
            parts.l_cc = Some(terms.l_cc);
        }

        // Causal head: CE on [C_S; B_S], optionally also on the
        // counterfactual concatenation. Cross-encoder channels detach when
        // stop_grad_cross is on.
        let full_ci = cfg.flags.use_ci && t >= warmup;
        let perm = if cfg.derangement {
            sample_derangement(batch, derive_seed(cfg.seed, &[tag::PERM, tag::PHASE_ADAPT, t as u64]))
        } else {
            sample_permutation(batch, derive_seed(cfg.seed, &[tag::PERM, tag::PHASE_ADAPT, t as u64]))
        };

        let bias_for_causal = match b_s {
            Some(b) => {
                if cfg.stop_grad_cross {
                    tape.detach(b)
                } else {
                    b
                }
            }
            None => {
                let shape = tape.value(c_s).shape().to_vec();
                tape.constant(Tensor::zeros(&shape))
            }
        };
        if full_ci {
            let cf = make_counterfactual(&mut tape, c_s, bias_for_causal, &labels_ds, &perm)?;
            let logits_biased = bound.classify_causal(&mut tape, cf.biased)?;
            let logits_unbiased = bound.classify_causal(&mut tape, cf.unbiased)?;
            let terms = losses::causal_cls_loss(&mut tape, logits_biased, logits_unbiased, &labels_ds)?;
            bundle.l_c1 = tape.value(terms.l_c1).item();
            bundle.l_c2 = tape.value(terms.l_c2).item();
            bundle.l_c = tape.value(terms.l_c).item();
            bundle.n_c1 = terms.n_c1;
            bundle.n_c2 = terms.n_c2;
            parts.l_c1 = Some(terms.l_c1);
            parts.l_c2 = Some(terms.l_c2);
        } else {
            let f_biased = tape.concat_channels(c_s, bias_for_causal)?;
            let logits_biased = bound.classify_causal(&mut tape, f_biased)?;
            let (l_c1, n_c1) = tape.ce_pixels(logits_biased, &labels_ds)?;
            bundle.l_c1 = tape.value(l_c1).item();
            bundle.l_c = bundle.l_c1;
            bundle.n_c1 = n_c1;
            parts.l_c1 = Some(l_c1);
        }

        // Bias head: SCE on [C_S; B_S] against true labels and, after
        // warmup, on the counterfactual against the permuted labels.
        if let Some(b_s) = b_s {
            let causal_for_bias = if cfg.stop_grad_cross {
                tape.detach(c_s)
            } else {
                c_s
            };
            if full_ci {
                let cf = make_counterfactual(&mut tape, causal_for_bias, b_s, &labels_ds, &perm)?;
                let logits_biased = bound.classify_bias(&mut tape, cf.biased)?;
                let logits_unbiased = bound.classify_bias(&mut tape, cf.unbiased)?;
                let terms = losses::bias_cls_loss(
                    &mut tape,
                    logits_biased,
                    &labels_ds,
                    logits_unbiased,
                    &cf.labels_swapped,
                    cfg.sce,
                )?;
                bundle.l_b1 = tape.value(terms.l_b1).item();
                bundle.l_b2 = tape.value(terms.l_b2).item();
                bundle.l_b = tape.value(terms.l_b).item();
                bundle.n_b1 = terms.n_b1;
                bundle.n_b2 = terms.n_b2;
                parts.l_b1 = Some(terms.l_b1);
                parts.l_b2 = Some(terms.l_b2);
            } else {
                let f_biased = tape.concat_channels(causal_for_bias, b_s)?;
                let logits_biased = bound.classify_bias(&mut tape, f_biased)?;
                let (l_b1, n_b1) =
                    tape.sce_pixels(logits_biased, &labels_ds, cfg.sce.alpha, cfg.sce.beta, cfg.sce.log_floor)?;
                bundle.l_b1 = tape.value(l_b1).item();
                bundle.l_b = bundle.l_b1;
                bundle.n_b1 = n_b1;
                parts.l_b1 = Some(l_b1);
            }
        }

        let total = losses::total_loss(&mut tape, parts, t, warmup);
        bundle.total = tape.value(total).item();
        if !bundle.total.is_finite() {
            return Err(Error::NonFinite {
                tensor: "total".into(),
                iteration: t,
            });
        }
        let lr = cfg.lr(&cfg.adapt, t);
        apply_gradients(cfg, state, &tape, &bound, total, lr, t)?;

        // Prototype EMA on detached features of both domains.
        let m = momentum(t, cfg.adapt.iterations, cfg.m0, cfg.alpha);
        let mut class_update = None;
        let mut bank_after = None;
        if cfg.flags.use_cpc {
            let c_s_val = tape.value(c_s).clone();
            let c_t_val = tape.value(c_t).clone();
            let bank = state.bank.as_ref().unwrap();
            let sim_s = similarity(&c_s_val, bank, cfg.tau_sim)?;
            let sim_t = similarity(&c_t_val, bank, cfg.tau_sim)?;
            let agg = aggregate_class(
                &[
                    AggregateInput {
                        features: &c_s_val,
                        sims: &sim_s,
                        labels: &labels_ds,
                    },
                    AggregateInput {
                        features: &c_t_val,
                        sims: &sim_t,
                        labels: &pseudo_t,
                    },
                ],
                state.params.arch.num_classes,
                state.params.arch.feature_dim,
                cfg.aggregation,
            )?;
            let bank = state.bank.as_mut().unwrap();
            update_prototypes(bank, &agg, m)?;
            bank_after = Some(bank.prototypes.clone());
            class_update = Some(agg);
        }

        log.records.push(IterRecord {
            iteration: t,
            lr,
            m,
            bundle,
            class_update,
            bank_after,
        });
        state.iteration = (t + 1) as u64;
    }
    Ok(log)
}

/// Phase 3: supervised retraining of the full inference path on pseudo-
/// labeled target data. The prototype bank stays frozen.
pub fn self_train(
    cfg: &TrainConfig,
    state: &mut TrainState,
    pseudo_target: &Dataset,
    end: usize,
) -> Result<TrainLog> {
    cfg.validate()?;
    pseudo_target.validate(state.params.arch.output_stride)?;
    let usable: usize = pseudo_target
        .samples
        .iter()
        .map(|s| s.labels.data.iter().filter(|&&v| v != IGNORE).count())
        .sum();
    if usable == 0 {
        return Err(Error::Empty(
            "nothing to train on: every pseudo-label pixel is IGNORE".into(),
        ));
    }
    let mut log = TrainLog::default();
    let start = state.iteration as usize;
    for t in start..end {
        let (loss, n_seg, lr) = supervised_step(
            cfg,
            state,
            pseudo_target,
            &cfg.selftrain,
            tag::PHASE_SELFTRAIN,
            cfg.flags.use_cfd,
            t,
        )?;
        log.records.push(IterRecord {
            iteration: t,
            lr,
            m: 0.0,
            bundle: LossBundle {
                l_seg: loss,
                total: loss,
                n_seg,
                ..LossBundle::default()
            },
            class_update: None,
            bank_after: None,
        });
        state.iteration = (t + 1) as u64;
    }
    Ok(log)
}

/// Confusion-matrix evaluation of a model over a labeled dataset.
pub fn evaluate(params: &ModelParams, dataset: &Dataset, mode: InferenceMode) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluate on empty dataset".into()));
    }
    dataset.validate(params.arch.output_stride)?;
    let k = params.arch.num_classes;
    let partials: Result<Vec<ConfusionMatrix>> = dataset
        .samples
        .par_iter()
        .map(|sample| {
            let image = Tensor::new(
                vec![1, 3, sample.height(), sample.width()],
                sample.image.clone().into_data(),
            );
            let (pred, _) = crate::model::predict(params, &image, mode)?;
            let gt = LabelBatch::from_maps(&[&sample.labels]);
            let mut conf = ConfusionMatrix::new(k);
            conf.accumulate(&pred, &gt)?;
            Ok(conf)
        })
        .collect();
    let mut conf = ConfusionMatrix::new(k);
    for p in partials? {
        conf.merge(&p);
    }
    Ok(scores(&conf, &dataset.class_names))
}

/// Fraction of pixels whose argmax prediction is unchanged when every
/// image's bias features are replaced by its batch neighbor's (a rotation,
/// so no fixed points for batches of two or more).
pub fn intervention_agreement(
    params: &ModelParams,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("agreement on empty dataset".into()));
    }
    let mut agree = 0u64;
    let mut total = 0u64;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (images, _) = dataset.gather(chunk);
        let (h, w) = (images.shape()[2], images.shape()[3]);
        let batch = chunk.len();
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let bound = BoundModel::bind(&mut tape, params, false);
        let c = bound.encode_causal(&mut tape, x)?;
        let b = bound.encode_bias(&mut tape, x)?;
        let rotation: Vec<usize> = (0..batch).map(|i| (i + 1) % batch).collect();
        let b_rot = tape.permute_batch(b, &rotation)?;
        let mut argmax_of = |bias_node| -> Result<LabelBatch> {
            let f = tape.concat_channels(c, bias_node)?;
            let logits = bound.classify_causal(&mut tape, f)?;
            let up = upsample_logits(&mut tape, logits, h, w)?;
            Ok(argmax_with_confidence(tape.value(up)).0)
        };
        let plain = argmax_of(b)?;
        let swapped = argmax_of(b_rot)?;
        for (a, s) in plain.data.iter().zip(&swapped.data) {
            total += 1;
            if a == s {
                agree += 1;
            }
        }
    }
    Ok(agree as f64 / total as f64)
}
