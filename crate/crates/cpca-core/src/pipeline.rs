//! End-to-end runs: source-only baseline and the full three-phase
//! adaptation pipeline on in-memory datasets.

use crate::data::{gen_synthetic, Dataset, SynthConfig};
use crate::error::Result;
use crate::metrics::MetricReport;
use crate::model::{ArchConfig, InferenceMode};
use crate::rng::derive_seed;
use crate::self_training::{apply_to_dataset, generate_pseudolabels};
use crate::trainer::{
    adapt_cpca, evaluate, init_prototype_bank, intervention_agreement, pretrain_source,
    self_train, TrainConfig, TrainLog, TrainState,
};

const TEST_SPLIT_TAG: u64 = 0x5445_5354;

/// Logs of every executed phase.
#[derive(Debug, Clone, Default)]
pub struct PipelineLogs {
    pub pretrain: TrainLog,
    pub adapt: TrainLog,
    pub selftrain: TrainLog,
}

/// Inference mode a configuration trains for: concatenated features when
/// the bias branch exists, causal-only otherwise.
pub fn inference_mode(cfg: &TrainConfig) -> InferenceMode {
    if cfg.flags.use_cfd {
        InferenceMode::Concat
    } else {
        InferenceMode::CausalOnly
    }
}

/// Phase 1 only.
pub fn run_pretrain(cfg: &TrainConfig, arch: &ArchConfig, source: &Dataset) -> Result<(TrainState, TrainLog)> {
    pretrain_source(cfg, arch, source)
}

/// Phases 2 and 3 on an already-pretrained state.
pub fn run_adaptation(
    cfg: &TrainConfig,
    state: &mut TrainState,
    source: &Dataset,
    target: &Dataset,
) -> Result<PipelineLogs> {
    let mut logs = PipelineLogs::default();
    state.bank = Some(init_prototype_bank(cfg, &state.params, source)?);
    state.iteration = 0;
    state.velocities.clear();
    logs.adapt = adapt_cpca(cfg, state, source, target, cfg.adapt.iterations)?;
    if cfg.flags.use_selftrain {
        let pseudo = generate_pseudolabels(&state.params, target, cfg.eta, inference_mode(cfg))?;
        let pseudo_ds = apply_to_dataset(target, &pseudo);
        state.iteration = 0;
        state.velocities.clear();
        logs.selftrain = self_train(cfg, state, &pseudo_ds, cfg.selftrain.iterations)?;
    }
    Ok(logs)
}

/// Full pipeline from scratch.
pub fn run_full(
    cfg: &TrainConfig,
    arch: &ArchConfig,
    source: &Dataset,
    target: &Dataset,
) -> Result<(TrainState, PipelineLogs)> {
    let (mut state, pretrain_log) = run_pretrain(cfg, arch, source)?;
    let mut logs = run_adaptation(cfg, &mut state, source, target)?;
    logs.pretrain = pretrain_log;
    Ok((state, logs))
}

/// Everything the synthetic benchmark measures for one seed.
#[derive(Debug, Clone)]
pub struct DeskOutcome {
    pub source_only: MetricReport,
    pub adapted: MetricReport,
    pub agreement_before: f64,
    pub agreement_after: f64,
    pub logs: PipelineLogs,
    pub final_state: TrainState,
}

impl DeskOutcome {
    pub fn miou_gain(&self) -> f64 {
        self.adapted.miou.unwrap_or(0.0) - self.source_only.miou.unwrap_or(0.0)
    }
}

/// Held-out target test split: fresh label maps (unpaired stream) under the
/// same style configuration.
pub fn gen_test_split(synth: &SynthConfig, seed: u64, n_test: usize) -> Result<Dataset> {
    let cfg = SynthConfig {
        n_source: 0,
        n_target: n_test,
        paired: false,
        ..synth.clone()
    };
    Ok(gen_synthetic(&cfg, derive_seed(seed, &[TEST_SPLIT_TAG]))?.1)
}

/// One benchmark run: pretrain a source-only baseline, evaluate it, adapt
/// the same pretrained weights through phases 2 and 3, evaluate again, and
/// measure counterfactual agreement before and after.
pub fn run_desk_benchmark(
    cfg: &TrainConfig,
    arch: &ArchConfig,
    synth: &SynthConfig,
    seed: u64,
    n_test: usize,
) -> Result<DeskOutcome> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let mut arch = arch.clone();
    arch.seed = derive_seed(seed, &[1]);
    let (source, target) = gen_synthetic(synth, seed)?;
    let test = gen_test_split(synth, seed, n_test)?;

    let (mut state, pretrain_log) = run_pretrain(&cfg, &arch, &source)?;
    // The baseline predicts through the path it was trained on.
    let source_only = evaluate(&state.params, &test, InferenceMode::CausalOnly)?;
    let agreement_before =
        intervention_agreement(&state.params, &test, cfg.adapt.batch_size.max(2))?;

    let mut logs = run_adaptation(&cfg, &mut state, &source, &target)?;
    logs.pretrain = pretrain_log;
    let adapted = evaluate(&state.params, &test, inference_mode(&cfg))?;
    let agreement_after =
        intervention_agreement(&state.params, &test, cfg.adapt.batch_size.max(2))?;

    Ok(DeskOutcome {
        source_only,
        adapted,
        agreement_before,
        agreement_after,
        logs,
        final_state: state,
    })
}

/// Build (or size) the global rayon pool. `None` keeps the library default;
/// 1 forces serial execution. Safe to call more than once — later calls
/// with a different size are ignored by rayon, so set this before any
/// parallel work.
pub fn configure_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}
