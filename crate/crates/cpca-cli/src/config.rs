//! Run configuration: flat `key = value` text with dotted sections,
//! command-line `--set key=value` overrides, strict unknown-key rejection,
//! and a canonical echo that round-trips.

use std::fmt::Write as _;
use std::path::Path;

use cpca_core::data::SynthConfig;
use cpca_core::model::{ArchConfig, InferenceMode, Nonlinearity};
use cpca_core::proto::AggregationWeighting;
use cpca_core::trainer::{config_digest, LrSchedule, TrainConfig};

/// A configuration problem; always names the offending key.
#[derive(Debug)]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config key `{}`: {}", self.key, self.reason)
    }
}

impl std::error::Error for ConfigError {}

type ConfigResult<T> = Result<T, ConfigError>;

fn err<T>(key: &str, reason: impl Into<String>) -> ConfigResult<T> {
    Err(ConfigError {
        key: key.to_string(),
        reason: reason.into(),
    })
}

/// Everything a run needs: synthetic data parameters, architecture and
/// training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub n_target_test: usize,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    /// Scale factor applied to iteration counts and batch sizes at
    /// resolution time.
    pub scale: f64,
    pub inference: InferenceMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig::default(),
            n_target_test: 100,
            arch: ArchConfig::default(),
            train: TrainConfig::desk(),
            scale: 1.0,
            inference: InferenceMode::Concat,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> ConfigResult<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => err(key, format!("expected true or false, got `{v}`")),
    }
}

fn parse_f64(key: &str, v: &str) -> ConfigResult<f64> {
    v.parse().map_err(|_| ConfigError {
        key: key.to_string(),
        reason: format!("expected a number, got `{v}`"),
    })
}

fn parse_usize(key: &str, v: &str) -> ConfigResult<usize> {
    v.parse().map_err(|_| ConfigError {
        key: key.to_string(),
        reason: format!("expected an integer, got `{v}`"),
    })
}

fn parse_u64(key: &str, v: &str) -> ConfigResult<u64> {
    v.parse().map_err(|_| ConfigError {
        key: key.to_string(),
        reason: format!("expected an integer, got `{v}`"),
    })
}

fn parse_triple(key: &str, v: &str) -> ConfigResult<[f64; 3]> {
    let parts: Vec<&str> = v.split(',').map(|s| s.trim()).collect();
    if parts.len() != 3 {
        return err(key, format!("expected three comma-separated numbers, got `{v}`"));
    }
    let mut out = [0.0; 3];
    for (slot, p) in out.iter_mut().zip(&parts) {
        *slot = parse_f64(key, p)?;
    }
    Ok(out)
}

fn parse_widths(key: &str, v: &str) -> ConfigResult<Vec<usize>> {
    let widths: Result<Vec<usize>, _> = v.split(',').map(|s| s.trim().parse()).collect();
    widths.map_err(|_| ConfigError {
        key: key.to_string(),
        reason: format!("expected comma-separated integers, got `{v}`"),
    })
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> ConfigResult<()> {
        let v = value.trim();
        match key {
            // data section
            "data.num_classes" => {
                self.synth.num_classes = parse_usize(key, v)?;
                self.arch.num_classes = self.synth.num_classes;
            }
            "data.height" => self.synth.height = parse_usize(key, v)?,
            "data.width" => self.synth.width = parse_usize(key, v)?,
            "data.n_source" => self.synth.n_source = parse_usize(key, v)?,
            "data.n_target" => self.synth.n_target = parse_usize(key, v)?,
            "data.n_target_test" => self.n_target_test = parse_usize(key, v)?,
            "data.paired" => self.synth.paired = parse_bool(key, v)?,
            "data.min_class_coverage" => self.synth.min_class_coverage = parse_f64(key, v)?,
            "data.source_gain" => self.synth.shift.source_gain = parse_triple(key, v)?,
            "data.source_bias" => self.synth.shift.source_bias = parse_triple(key, v)?,
            "data.target_gain" => self.synth.shift.target_gain = parse_triple(key, v)?,
            "data.target_bias" => self.synth.shift.target_bias = parse_triple(key, v)?,
            "data.permute_target_channels" => {
                self.synth.shift.permute_target_channels = parse_bool(key, v)?
            }
            "data.noise_sigma" => self.synth.shift.noise_sigma = parse_f64(key, v)?,

            // model section
            "model.feature_dim" => self.arch.feature_dim = parse_usize(key, v)?,
            "model.widths" => self.arch.widths = parse_widths(key, v)?,
            "model.output_stride" => self.arch.output_stride = parse_usize(key, v)?,
            "model.nonlinearity" => {
                self.arch.nonlinearity = Nonlinearity::parse(v)
                    .ok_or(())
                    .or_else(|_| err(key, format!("expected relu or tanh, got `{v}`")))?
            }
            "model.group_norm" => self.arch.group_norm = parse_bool(key, v)?,
            "model.inference" => {
                self.inference = match v {
                    "concat" => InferenceMode::Concat,
                    "causal_only" => InferenceMode::CausalOnly,
                    _ => return err(key, format!("expected concat or causal_only, got `{v}`")),
                }
            }

            // train section
            "train.seed" => self.train.seed = parse_u64(key, v)?,
            "train.scale" => self.scale = parse_f64(key, v)?,
            "train.pretrain.lr" => self.train.pretrain.lr = parse_f64(key, v)?,
            "train.pretrain.batch_size" => self.train.pretrain.batch_size = parse_usize(key, v)?,
            "train.pretrain.iterations" => self.train.pretrain.iterations = parse_usize(key, v)?,
            "train.adapt.lr" => self.train.adapt.lr = parse_f64(key, v)?,
            "train.adapt.batch_size" => self.train.adapt.batch_size = parse_usize(key, v)?,
            "train.adapt.iterations" => self.train.adapt.iterations = parse_usize(key, v)?,
            "train.selftrain.lr" => self.train.selftrain.lr = parse_f64(key, v)?,
            "train.selftrain.batch_size" => self.train.selftrain.batch_size = parse_usize(key, v)?,
            "train.selftrain.iterations" => self.train.selftrain.iterations = parse_usize(key, v)?,
            "train.momentum" => self.train.momentum = parse_f64(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse_f64(key, v)?,
            "train.lr_schedule" => {
                self.train.lr_schedule = LrSchedule::parse(v)
                    .ok_or(())
                    .or_else(|_| err(key, format!("expected poly or const, got `{v}`")))?
            }
            "train.lr_power" => self.train.lr_power = parse_f64(key, v)?,
            "train.tau_sim" => self.train.tau_sim = parse_f64(key, v)?,
            "train.warmup_iters" => {
                self.train.warmup_iters = if v == "auto" {
                    None
                } else {
                    Some(parse_usize(key, v)?)
                }
            }
            "train.warmup_fraction" => self.train.warmup_fraction = parse_f64(key, v)?,
            "train.eta" => self.train.eta = parse_f64(key, v)?,
            "train.m0" => self.train.m0 = parse_f64(key, v)?,
            "train.alpha" => self.train.alpha = parse_f64(key, v)?,
            "train.sce_alpha" => self.train.sce.alpha = parse_f64(key, v)?,
            "train.sce_beta" => self.train.sce.beta = parse_f64(key, v)?,
            "train.sce_log_floor" => self.train.sce.log_floor = parse_f64(key, v)?,
            "train.aggregation" => {
                self.train.aggregation = AggregationWeighting::parse(v)
                    .ok_or(())
                    .or_else(|_| err(key, format!("expected inverse or direct, got `{v}`")))?
            }
            "train.pseudo_gate" => self.train.pseudo_gate = parse_f64(key, v)?,
            "train.stop_grad_cross" => self.train.stop_grad_cross = parse_bool(key, v)?,
            "train.derangement" => self.train.derangement = parse_bool(key, v)?,
            "train.use_cfd" => self.train.flags.use_cfd = parse_bool(key, v)?,
            "train.use_cpc" => self.train.flags.use_cpc = parse_bool(key, v)?,
            "train.use_ci" => self.train.flags.use_ci = parse_bool(key, v)?,
            "train.use_selftrain" => self.train.flags.use_selftrain = parse_bool(key, v)?,

            other => return err(other, "unknown key"),
        }
        Ok(())
    }

    /// Parse a config file's text (later assignments win).
    pub fn apply_text(&mut self, text: &str, origin: &str) -> ConfigResult<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return err(
                    &format!("{origin}:{}", lineno + 1),
                    format!("expected `key = value`, got `{line}`"),
                );
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> ConfigResult<RunConfig> {
        let mut cfg = RunConfig::default();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            key: path.display().to_string(),
            reason: format!("cannot read config file: {e}"),
        })?;
        cfg.apply_text(&text, &path.display().to_string())?;
        cfg.apply_overrides(overrides)?;
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> ConfigResult<()> {
        for assignment in overrides {
            let Some((key, value)) = assignment.split_once('=') else {
                return err(assignment, "override must look like key=value");
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// The training configuration with the scale factor applied.
    pub fn resolved_train(&self) -> TrainConfig {
        self.train.clone().scaled(self.scale)
    }

    /// Canonical echo: every key in a fixed order. Floats print in
    /// shortest-round-trip form, so re-parsing reproduces this config.
    pub fn to_text(&self) -> String {
        let s = &self.synth;
        let a = &self.arch;
        let t = &self.train;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("data.num_classes", s.num_classes.to_string());
        kv("data.height", s.height.to_string());
        kv("data.width", s.width.to_string());
        kv("data.n_source", s.n_source.to_string());
        kv("data.n_target", s.n_target.to_string());
        kv("data.n_target_test", self.n_target_test.to_string());
        kv("data.paired", s.paired.to_string());
        kv("data.min_class_coverage", s.min_class_coverage.to_string());
        let triple = |x: &[f64; 3]| format!("{},{},{}", x[0], x[1], x[2]);
        kv("data.source_gain", triple(&s.shift.source_gain));
        kv("data.source_bias", triple(&s.shift.source_bias));
        kv("data.target_gain", triple(&s.shift.target_gain));
        kv("data.target_bias", triple(&s.shift.target_bias));
        kv(
            "data.permute_target_channels",
            s.shift.permute_target_channels.to_string(),
        );
        kv("data.noise_sigma", s.shift.noise_sigma.to_string());

        kv("model.feature_dim", a.feature_dim.to_string());
        kv(
            "model.widths",
            a.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
        );
        kv("model.output_stride", a.output_stride.to_string());
        kv("model.nonlinearity", a.nonlinearity.as_str().to_string());
        kv("model.group_norm", a.group_norm.to_string());
        kv(
            "model.inference",
            match self.inference {
                InferenceMode::Concat => "concat".to_string(),
                InferenceMode::CausalOnly => "causal_only".to_string(),
            },
        );

        kv("train.seed", t.seed.to_string());
        kv("train.scale", self.scale.to_string());
        for (name, phase) in [
            ("pretrain", &t.pretrain),
            ("adapt", &t.adapt),
            ("selftrain", &t.selftrain),
        ] {
            kv(&format!("train.{name}.lr"), phase.lr.to_string());
            kv(&format!("train.{name}.batch_size"), phase.batch_size.to_string());
            kv(&format!("train.{name}.iterations"), phase.iterations.to_string());
        }
        kv("train.momentum", t.momentum.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.lr_schedule", t.lr_schedule.as_str().to_string());
        kv("train.lr_power", t.lr_power.to_string());
        kv("train.tau_sim", t.tau_sim.to_string());
        kv(
            "train.warmup_iters",
            t.warmup_iters.map_or("auto".to_string(), |w| w.to_string()),
        );
        kv("train.warmup_fraction", t.warmup_fraction.to_string());
        kv("train.eta", t.eta.to_string());
        kv("train.m0", t.m0.to_string());
        kv("train.alpha", t.alpha.to_string());
        kv("train.sce_alpha", t.sce.alpha.to_string());
        kv("train.sce_beta", t.sce.beta.to_string());
        kv("train.sce_log_floor", t.sce.log_floor.to_string());
        kv("train.aggregation", t.aggregation.as_str().to_string());
        kv("train.pseudo_gate", t.pseudo_gate.to_string());
        kv("train.stop_grad_cross", t.stop_grad_cross.to_string());
        kv("train.derangement", t.derangement.to_string());
        kv("train.use_cfd", t.flags.use_cfd.to_string());
        kv("train.use_cpc", t.flags.use_cpc.to_string());
        kv("train.use_ci", t.flags.use_ci.to_string());
        kv("train.use_selftrain", t.flags.use_selftrain.to_string());
        out
    }

    /// Digest over the canonical echo; stored in checkpoints.
    pub fn digest(&self) -> u64 {
        config_digest(&self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("train.seed", "123").unwrap();
        cfg.set("data.target_gain", "0.5,0.6,0.7").unwrap();
        cfg.set("model.widths", "8,16,8").unwrap();
        cfg.set("train.warmup_iters", "77").unwrap();
        let text = cfg.to_text();
        let mut back = RunConfig::default();
        back.apply_text(&text, "<echo>").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let mut cfg = RunConfig::default();
        let e = cfg.set("train.bogus_knob", "1").unwrap_err();
        assert_eq!(e.key, "train.bogus_knob");
    }

    #[test]
    fn overrides_apply_in_order() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["train.seed=5".into(), "train.seed=9".into()])
            .unwrap();
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn num_classes_updates_both_data_and_model() {
        let mut cfg = RunConfig::default();
        cfg.set("data.num_classes", "6").unwrap();
        assert_eq!(cfg.synth.num_classes, 6);
        assert_eq!(cfg.arch.num_classes, 6);
    }

    #[test]
    fn scale_resolves_iterations() {
        let mut cfg = RunConfig::default();
        cfg.set("train.scale", "0.01").unwrap();
        let t = cfg.resolved_train();
        assert_eq!(t.pretrain.iterations, 5);
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut cfg = RunConfig::default();
        for (k, v) in [
            ("data.paired", "yes"),
            ("train.lr_schedule", "exp"),
            ("data.source_gain", "1,2"),
            ("model.nonlinearity", "gelu"),
        ] {
            let e = cfg.set(k, v).unwrap_err();
            assert_eq!(e.key, k);
        }
    }
}
