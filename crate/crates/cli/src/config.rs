//! Flat `key = value` experiment configuration with `#` comments.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use spkver::features::FeatureConfig;
use spkver::networks::{DnnConfig, FrameDnnConfig, LstmConfig, NetworkConfig};
use spkver::scoring::DEFAULT_MAX_ENROLLMENT;
use spkver::synth::SynthConfig;
use spkver::training::{LossKind, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetworkKind {
    Dnn,
    FrameDnn,
    Lstm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub features: FeatureConfig,
    pub loss: LossKind,
    pub network: NetworkKind,
    pub window_frames: usize,
    pub patch_frames: usize,
    pub patch_dims: usize,
    pub units_per_patch: usize,
    pub hidden: Vec<usize>,
    pub context: usize,
    pub lstm_hidden: usize,
    pub speaker_model_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub target_ratio: f64,
    pub pool_capacity: usize,
    pub refresh_period: usize,
    pub group_size: usize,
    /// 0 disables dropout.
    pub dropout: f64,
    /// 0 uses the full softmax.
    pub sampled_candidates: usize,
    pub e2e_init_weight: f64,
    pub e2e_init_bias: f64,
    pub max_enrollment: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let dnn = DnnConfig::default();
        let train = TrainConfig::new(LossKind::EndToEnd, NetworkConfig::Dnn(dnn.clone()));
        ExperimentConfig {
            seed: SynthConfig::default().seed,
            synth: SynthConfig::default(),
            features: FeatureConfig::default(),
            loss: LossKind::EndToEnd,
            network: NetworkKind::Dnn,
            window_frames: dnn.input_frames,
            patch_frames: dnn.patch_frames,
            patch_dims: dnn.patch_dims,
            units_per_patch: dnn.units_per_patch,
            hidden: dnn.hidden,
            context: 2,
            lstm_hidden: LstmConfig::default().hidden,
            speaker_model_size: train.speaker_model_size,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            momentum: train.momentum,
            steps: train.steps,
            target_ratio: train.target_ratio,
            pool_capacity: train.pool_capacity,
            refresh_period: train.refresh_period,
            group_size: train.group_size,
            dropout: 0.0,
            sampled_candidates: 0,
            e2e_init_weight: train.e2e_init_weight,
            e2e_init_bias: train.e2e_init_bias,
            max_enrollment: DEFAULT_MAX_ENROLLMENT,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| anyhow!("invalid value {value:?} for key {key}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("invalid value {value:?} for key {key}"),
    }
}

/// Comma-separated list of positive integers.
pub fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let list = value.split(',').map(|v| parse::<usize>(key, v.trim())).collect::<Result<Vec<_>>>()?;
    if list.is_empty() || list.contains(&0) {
        bail!("invalid value {value:?} for key {key}");
    }
    Ok(list)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key=value", n + 1))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                bail!("line {}: duplicate key {key}", n + 1);
            }
            cfg.set(key, value).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                ExperimentConfig::parse(&text).with_context(|| format!("in config {}", p.display()))
            }
            None => Ok(ExperimentConfig::default()),
        }
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.synth;
        let f = &mut self.features;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "train_speakers" => s.train_speakers = parse(key, v)?,
            "heldout_speakers" => s.heldout_speakers = parse(key, v)?,
            "utterances_per_speaker" => s.utterances_per_speaker = parse(key, v)?,
            "frames" => s.frames = parse(key, v)?,
            "dims" => s.dims = parse(key, v)?,
            "latent_dim" => s.latent_dim = parse(key, v)?,
            "noise" => s.noise = parse(key, v)?,
            "session_ratio" => s.session_ratio = parse(key, v)?,
            "session_dim" => s.session_dim = parse(key, v)?,
            "enroll_per_speaker" => s.enroll_per_speaker = parse(key, v)?,
            "cohort_speakers" => s.cohort_speakers = parse(key, v)?,
            "sample_rate" => f.sample_rate = parse(key, v)?,
            "frame_len_ms" => f.frame_len_ms = parse(key, v)?,
            "hop_ms" => f.hop_ms = parse(key, v)?,
            "n_mels" => f.n_mels = parse(key, v)?,
            "f_min" => f.f_min = parse(key, v)?,
            "f_max" => f.f_max = parse(key, v)?,
            "spectral_subtraction" => f.spectral_subtraction = parse_bool(key, v)?,
            "loss" => {
                self.loss = match v {
                    "e2e" => LossKind::EndToEnd,
                    "softmax" => LossKind::Softmax,
                    _ => bail!("invalid value {v:?} for key loss (expected e2e or softmax)"),
                }
            }
            "network" => {
                self.network = match v {
                    "dnn" => NetworkKind::Dnn,
                    "frame-dnn" => NetworkKind::FrameDnn,
                    "lstm" => NetworkKind::Lstm,
                    _ => bail!("invalid value {v:?} for key network (expected dnn, frame-dnn or lstm)"),
                }
            }
            "window_frames" => self.window_frames = parse(key, v)?,
            "patch_frames" => self.patch_frames = parse(key, v)?,
            "patch_dims" => self.patch_dims = parse(key, v)?,
            "units_per_patch" => self.units_per_patch = parse(key, v)?,
            "hidden" => self.hidden = parse_list(key, v)?,
            "context" => self.context = parse(key, v)?,
            "lstm_hidden" => self.lstm_hidden = parse(key, v)?,
            "speaker_model_size" => self.speaker_model_size = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "target_ratio" => self.target_ratio = parse(key, v)?,
            "pool_capacity" => self.pool_capacity = parse(key, v)?,
            "refresh_period" => self.refresh_period = parse(key, v)?,
            "group_size" => self.group_size = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "sampled_candidates" => self.sampled_candidates = parse(key, v)?,
            "e2e_init_weight" => self.e2e_init_weight = parse(key, v)?,
            "e2e_init_bias" => self.e2e_init_bias = parse(key, v)?,
            "max_enrollment" => self.max_enrollment = parse(key, v)?,
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig { seed: self.seed, ..self.synth.clone() }
    }

    /// Network for features of `input_dims` dimensions.
    pub fn network_config(&self, input_dims: usize) -> NetworkConfig {
        let dnn = |frames| DnnConfig {
            input_frames: frames,
            input_dims,
            patch_frames: self.patch_frames,
            patch_dims: self.patch_dims,
            units_per_patch: self.units_per_patch,
            hidden: self.hidden.clone(),
        };
        match self.network {
            NetworkKind::Dnn => NetworkConfig::Dnn(dnn(self.window_frames)),
            NetworkKind::FrameDnn => NetworkConfig::FrameDnn(FrameDnnConfig { context: self.context, dnn: dnn(2 * self.context + 1) }),
            NetworkKind::Lstm => NetworkConfig::Lstm(LstmConfig { input_dim: input_dims, hidden: self.lstm_hidden, window_frames: self.window_frames }),
        }
    }

    pub fn train_config(&self, input_dims: usize) -> TrainConfig {
        TrainConfig {
            loss: self.loss,
            network: self.network_config(input_dims),
            speaker_model_size: self.speaker_model_size,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            steps: self.steps,
            seed: self.seed,
            target_ratio: self.target_ratio,
            pool_capacity: self.pool_capacity,
            refresh_period: self.refresh_period,
            group_size: self.group_size,
            dropout: (self.dropout > 0.0).then_some(self.dropout),
            sampled_candidates: (self.sampled_candidates > 0).then_some(self.sampled_candidates),
            e2e_init_weight: self.e2e_init_weight,
            e2e_init_bias: self.e2e_init_bias,
        }
    }
}
