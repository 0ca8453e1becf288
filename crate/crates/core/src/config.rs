//! `key = value` run configuration with `[section]` headers.
//!
//! Every key lives in [`KEYS`]; unknown keys are rejected with the offending
//! line. The resolved configuration (defaults filled in) is written back in
//! the same format so a run directory can be replayed verbatim.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::codebook::InitStrategy;
use crate::error::{Error, Result};
use crate::nn::{LayerKind, NetworkSpec};
use crate::stream::{Protocol, SynthConfig};
use crate::trainer::{CodebookConfig, LossWeights, Mode, TrainConfig};

/// Environment variable that roots relative output directories.
pub const OUT_ROOT_ENV: &str = "CRUMB_OUT_ROOT";

pub struct KeySpec {
    pub key: &'static str,
    /// `None` marks a required key.
    pub default: Option<&'static str>,
    pub help: &'static str,
}

const fn k(key: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        key,
        default: Some(default),
        help,
    }
}

const fn required(key: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        key,
        default: None,
        help,
    }
}

pub const KEYS: &[KeySpec] = &[
    required("run.seed", "seed for init, class partition, stream order and sampling"),
    required(
        "run.out_dir",
        "output directory (relative paths resolve under $CRUMB_OUT_ROOT)",
    ),
    k("run.label", "", "group label used by `report` (defaults to the mode)"),
    k("run.pretrain_dir", "", "pretrain output directory consumed by `stream`"),
    k(
        "run.stop_after_task",
        "0",
        "stop after this many tasks (0 runs the whole schedule)",
    ),
    k("data.source", "synthetic", "synthetic | manifest"),
    k("data.train_manifest", "", "stream training manifest CSV"),
    k("data.test_manifest", "", "stream test manifest CSV"),
    k("data.pretrain_manifest", "", "pretraining manifest CSV"),
    k(
        "data.pretrain_test_manifest",
        "",
        "pretraining test manifest CSV (optional)",
    ),
    k(
        "data.frames_per_instance",
        "0",
        "expected frames per clip (0 skips the check)",
    ),
    k("synth.classes", "10", "stream classes"),
    k("synth.objects_per_class", "3", "objects per class"),
    k("synth.instances_per_object", "5", "clips per object"),
    k(
        "synth.test_instances_per_object",
        "2",
        "clips per object held out for testing",
    ),
    k("synth.frames", "10", "frames per clip"),
    k("synth.channels", "3", "image channels"),
    k("synth.image_side", "32", "image side in pixels"),
    k("synth.grid", "4", "coarse pattern grid side"),
    k("synth.rho", "0.9", "AR(1) coefficient of clip drift"),
    k("synth.object_scale", "0.15", "per-object pattern perturbation"),
    k("synth.drift_scale", "0.15", "clip drift scale"),
    k("synth.texture_scale", "0.2", "per-class fine texture amplitude"),
    k("synth.noise", "0.05", "per-pixel noise"),
    k("synth.seed", "7", "data generator seed (independent of run.seed)"),
    k("synth.pretrain_classes", "8", "classes in the pretraining set"),
    k(
        "synth.pretrain_class_offset",
        "1000",
        "first class id of the pretraining set",
    ),
    k("protocol.kind", "class_instance", "class_instance | class_iid"),
    k("protocol.classes_per_task", "2", "new classes per task"),
    k("protocol.first_task_epochs", "10", "epochs over the first task"),
    k(
        "net.width",
        "8",
        "channels of the first conv block (doubling per block)",
    ),
    k("net.hidden", "64", "hidden units of the classifier"),
    k(
        "net.layers",
        "",
        "explicit layer list separated by `;` (overrides width/hidden)",
    ),
    k("net.split", "0", "extractor/classifier cut for explicit layers"),
    k("codebook.blocks", "256", "memory blocks n"),
    k("codebook.block_dim", "8", "block dimension d"),
    k(
        "codebook.init",
        "matched_sparse",
        "matched_sparse | dense_matched | normal | uniform",
    ),
    k("codebook.zero_fraction", "0.64", "zeroed fraction for matched_sparse"),
    k(
        "codebook.reference_maps",
        "64",
        "feature maps sampled to seed matched inits",
    ),
    k("codebook.freeze", "false", "keep the codebook fixed"),
    k(
        "train.mode",
        "crumb",
        "crumb | no_replay | image_replay | early_feature_replay | upper_bound",
    ),
    k("train.learning_rate", "0.05", "SGD step size (pretrain and stream)"),
    k("train.batch_size", "10", "new-image batch size"),
    k("train.replay_batch_size", "10", "replay batch size"),
    k("train.pretrain_epochs", "3", "pretraining epochs"),
    k("train.offline_epochs", "10", "upper_bound retraining epochs per task"),
    k("train.buffer_capacity", "100", "exemplars kept (n_X)"),
    k("train.pretrain_alpha", "1", "direct-loss weight while pretraining"),
    k("train.pretrain_beta", "1", "codebook-loss weight while pretraining"),
    k("train.stream_alpha", "0", "direct-loss weight on new stream batches"),
    k("train.stream_beta", "1", "codebook-loss weight on new stream batches"),
    k("train.joint_replay_step", "false", "one update for new + replay batch"),
    k(
        "train.evict_at_task_boundary",
        "false",
        "stage exemplars and rebalance at task end",
    ),
    k(
        "train.record_without_replay",
        "false",
        "fill the buffer in no_replay mode",
    ),
    k(
        "train.log_direct_loss",
        "true",
        "evaluate the direct loss for logging when alpha = 0",
    ),
    k(
        "train.early_feature_layer",
        "2",
        "layer whose output early_feature_replay stores",
    ),
    k("eval.batch_size", "100", "test images per paired-test batch"),
    k("eval.partition_seed", "0", "seed of the shared test batch partition"),
    k(
        "eval.activation_images",
        "0",
        "test images whose block activation maps are exported",
    ),
    k("eval.activation_slot", "0", "chunk slot shown in activation maps"),
];

fn spec_of(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|s| s.key == key)
}

pub fn is_known_key(key: &str) -> bool {
    spec_of(key).is_some()
}

/// `run.out_dir` -> `run-out-dir`.
pub fn flag_name(key: &str) -> String {
    key.replace(['.', '_'], "-")
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        let at = |n: usize, msg: String| Error::Config(format!("{}:{}: {msg}", origin.display(), n + 1));
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| at(n, format!("malformed section header `{line}`")))?
                    .trim();
                if !KEYS.iter().any(|s| s.key.split('.').next() == Some(name)) {
                    return Err(at(n, format!("unknown section `[{name}]`")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(n, format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            let full = if key.contains('.') || section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            let spec = spec_of(&full).ok_or_else(|| at(n, format!("unknown key `{full}`")))?;
            if cfg.values.contains_key(spec.key) {
                return Err(at(n, format!("duplicate key `{full}`")));
            }
            cfg.values.insert(spec.key, value.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Overrides one key; the flag form wins over the file.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        let spec = spec_of(key).ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        self.values.insert(spec.key, value.into());
        Ok(())
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        let spec = spec_of(key).ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        match (self.values.get(key), spec.default) {
            (Some(v), _) => Ok(v),
            (None, Some(d)) => Ok(d),
            (None, None) => Err(Error::Config(format!("missing required key `{key}`"))),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key)?;
        raw.parse::<T>()
            .map_err(|e| Error::Config(format!("invalid value `{raw}` for `{key}`: {e}")))
    }

    /// Fails on the first missing required key.
    pub fn check_required(&self) -> Result<()> {
        for s in KEYS.iter().filter(|s| s.default.is_none()) {
            self.raw(s.key)?;
        }
        Ok(())
    }

    /// Every key with its effective value, grouped by section.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for s in KEYS {
            let (sec, name) = s.key.split_once('.').expect("keys are sectioned");
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                section = sec;
            }
            let value = self.values.get(s.key).map(String::as_str).or(s.default).unwrap_or("");
            let _ = writeln!(out, "{name} = {value}");
        }
        out
    }

    /// `run.out_dir`, joined under `$CRUMB_OUT_ROOT` when relative.
    pub fn out_dir(&self) -> Result<PathBuf> {
        let dir = PathBuf::from(self.raw("run.out_dir")?);
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if dir.is_relative() => Ok(PathBuf::from(root).join(dir)),
            _ => Ok(dir),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("run.seed")
    }

    pub fn mode(&self) -> Result<Mode> {
        self.get_with("train.mode")
    }

    pub fn label(&self) -> Result<String> {
        let label = self.raw("run.label")?;
        Ok(if label.is_empty() {
            self.mode()?.to_string()
        } else {
            label.to_string()
        })
    }

    pub fn protocol(&self) -> Result<Protocol> {
        self.get_with("protocol.kind")
    }

    fn get_with<T: FromStr<Err = Error>>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.parse::<T>().map_err(|e| match e {
            Error::InvalidArgument(m) => Error::Config(format!("`{key}`: {m}")),
            other => other,
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            pretrain_weights: LossWeights {
                alpha: self.get("train.pretrain_alpha")?,
                beta: self.get("train.pretrain_beta")?,
            },
            stream_weights: LossWeights {
                alpha: self.get("train.stream_alpha")?,
                beta: self.get("train.stream_beta")?,
            },
            learning_rate: self.get("train.learning_rate")?,
            batch_size: self.get("train.batch_size")?,
            replay_batch_size: self.get("train.replay_batch_size")?,
            pretrain_epochs: self.get("train.pretrain_epochs")?,
            offline_epochs: self.get("train.offline_epochs")?,
            buffer_capacity: self.get("train.buffer_capacity")?,
            freeze_codebook: self.get("codebook.freeze")?,
            mode: self.mode()?,
            joint_replay_step: self.get("train.joint_replay_step")?,
            evict_at_task_boundary: self.get("train.evict_at_task_boundary")?,
            record_without_replay: self.get("train.record_without_replay")?,
            log_direct_loss: self.get("train.log_direct_loss")?,
            early_feature_layer: self.get("train.early_feature_layer")?,
            seed: self.seed()?,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn codebook(&self) -> Result<CodebookConfig> {
        Ok(CodebookConfig {
            blocks: self.get("codebook.blocks")?,
            block_dim: self.get("codebook.block_dim")?,
            init: self.get_with::<InitStrategy>("codebook.init")?,
            zero_fraction: self.get("codebook.zero_fraction")?,
            reference_maps: self.get("codebook.reference_maps")?,
        })
    }

    /// Synthetic stream set, or the pretraining set when `pretrain` is true.
    pub fn synth(&self, pretrain: bool) -> Result<SynthConfig> {
        let (classes, class_offset) = if pretrain {
            (
                self.get("synth.pretrain_classes")?,
                self.get("synth.pretrain_class_offset")?,
            )
        } else {
            (self.get("synth.classes")?, 0)
        };
        Ok(SynthConfig {
            classes,
            class_offset,
            objects_per_class: self.get("synth.objects_per_class")?,
            instances_per_object: self.get("synth.instances_per_object")?,
            test_instances_per_object: self.get("synth.test_instances_per_object")?,
            frames_per_instance: self.get("synth.frames")?,
            channels: self.get("synth.channels")?,
            image_side: self.get("synth.image_side")?,
            grid: self.get("synth.grid")?,
            rho: self.get("synth.rho")?,
            object_scale: self.get("synth.object_scale")?,
            drift_scale: self.get("synth.drift_scale")?,
            texture_scale: self.get("synth.texture_scale")?,
            noise: self.get("synth.noise")?,
            seed: self.get("synth.seed")?,
        })
    }

    /// Network for `input_shape`; the output width is set later from the data.
    pub fn network(&self, input_shape: &[usize]) -> Result<NetworkSpec> {
        let layers = self.raw("net.layers")?;
        if layers.trim().is_empty() {
            if input_shape.len() != 3 || input_shape[1] != input_shape[2] {
                return Err(Error::Config("default network needs square images".into()));
            }
            return Ok(NetworkSpec::desk(
                input_shape[0],
                input_shape[1],
                self.get("net.width")?,
                self.get("net.hidden")?,
                2,
            ));
        }
        let layers = layers
            .split(';')
            .map(|l| l.trim().parse::<LayerKind>())
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Config(format!("`net.layers`: {e}")))?;
        Ok(NetworkSpec {
            input_shape: input_shape.to_vec(),
            layers,
            split_index: self.get("net.split")?,
        })
    }
}
