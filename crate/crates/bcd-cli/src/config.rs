//! Flat key=value config files for training runs.
//!
//! Lines are `key = value`; blank lines and `#` comments are skipped.
//! Unknown keys are collected and reported together so a typo'd file fails
//! loudly instead of silently training the wrong model.

use bcd_core::codec::{
    BinarizerMode, CodecConfig, GateSharing, InputMode, Normalization, SweepDirection,
};
use bcd_core::train::{AdamConfig, DistortionKind, LossWeights, TrainConfig};

/// Everything a training run needs: the model shape and the optimizer run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub codec: CodecConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let codec = CodecConfig::default();
        Self {
            train: TrainConfig {
                steps: 100,
                adam: AdamConfig::default(),
                weights: LossWeights::uniform(codec.branches),
                distortion: DistortionKind::L1,
                seed: 0,
                log_every: 1,
            },
            codec,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(format!("{}: expected true/false, got {:?}", key, v)),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse()
        .map_err(|_| format!("{}: cannot parse {:?}", key, v))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, String> {
    v.split(',')
        .map(|part| parse_num(key, part.trim()))
        .collect()
}

/// Parse a config file body. The error message lists every unknown key or
/// the first malformed value.
pub fn parse_run_config(text: &str) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::default();
    let mut weights: Option<Vec<f64>> = None;
    let mut unknown = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("line {}: expected key = value", lineno + 1));
        };
        let key = key.trim();
        let v = value.trim();
        match key {
            "branches" => cfg.codec.branches = parse_num(key, v)?,
            "channels" => {
                let list: Vec<usize> = parse_list(key, v)?;
                cfg.codec.channels = list
                    .try_into()
                    .map_err(|l: Vec<usize>| format!("channels: expected 4 values, got {}", l.len()))?;
            }
            "binary_channels" => cfg.codec.binary_channels = parse_num(key, v)?,
            "kernel_size" => cfg.codec.kernel_size = parse_num(key, v)?,
            "se_reduction" => cfg.codec.se_reduction = parse_num(key, v)?,
            "encoder_direction" => cfg.codec.encoder_direction = parse_direction(key, v)?,
            "decoder_direction" => cfg.codec.decoder_direction = parse_direction(key, v)?,
            "sharing" => {
                cfg.codec.sharing = match v {
                    "unshared" => GateSharing::Unshared,
                    "shared" => GateSharing::Shared,
                    _ => return Err(format!("{}: expected unshared|shared, got {:?}", key, v)),
                }
            }
            "input_mode" => {
                cfg.codec.input_mode = match v {
                    "bitplanes" => InputMode::BitPlanes,
                    "conv_slice" => InputMode::ConvSlice,
                    _ => {
                        return Err(format!("{}: expected bitplanes|conv_slice, got {:?}", key, v))
                    }
                }
            }
            "se_enabled" => cfg.codec.se_enabled = parse_bool(key, v)?,
            "normalization" => {
                cfg.codec.normalization = match v {
                    "gdn" => Normalization::Gdn,
                    "leaky_relu" => Normalization::LeakyRelu,
                    _ => return Err(format!("{}: expected gdn|leaky_relu, got {:?}", key, v)),
                }
            }
            "binarizer" => {
                cfg.codec.binarizer = match v {
                    "deterministic" => BinarizerMode::Deterministic,
                    "stochastic" => BinarizerMode::Stochastic,
                    _ => {
                        return Err(format!(
                            "{}: expected deterministic|stochastic, got {:?}",
                            key, v
                        ))
                    }
                }
            }
            "steps" => cfg.train.steps = parse_num(key, v)?,
            "lr" => cfg.train.adam.lr = parse_num(key, v)?,
            "beta1" => cfg.train.adam.beta1 = parse_num(key, v)?,
            "beta2" => cfg.train.adam.beta2 = parse_num(key, v)?,
            "eps" => cfg.train.adam.eps = parse_num(key, v)?,
            "weight_decay" => cfg.train.adam.weight_decay = parse_num(key, v)?,
            "distortion" => {
                cfg.train.distortion = match v {
                    "l1" => DistortionKind::L1,
                    "mse" => DistortionKind::Mse,
                    _ => return Err(format!("{}: expected l1|mse, got {:?}", key, v)),
                }
            }
            "weights" => weights = Some(parse_list(key, v)?),
            "seed" => cfg.train.seed = parse_num(key, v)?,
            "log_every" => cfg.train.log_every = parse_num(key, v)?,
            _ => unknown.push(key.to_string()),
        }
    }
    if !unknown.is_empty() {
        return Err(format!("unknown config keys: {}", unknown.join(", ")));
    }
    cfg.train.weights = match weights {
        Some(w) => LossWeights(w),
        None => LossWeights::uniform(cfg.codec.branches),
    };
    if cfg.train.log_every == 0 {
        return Err("log_every: must be at least 1".into());
    }
    cfg.codec.validate().map_err(|e| e.to_string())?;
    cfg.train
        .weights
        .validate(cfg.codec.branches)
        .map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn parse_direction(key: &str, v: &str) -> Result<SweepDirection, String> {
    Ok(match v {
        "bidirectional" => SweepDirection::Bidirectional,
        "down" => SweepDirection::Down,
        "up" => SweepDirection::Up,
        _ => {
            return Err(format!(
                "{}: expected bidirectional|down|up, got {:?}",
                key, v
            ))
        }
    })
}
