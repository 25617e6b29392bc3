//! JSON run configuration.
//!
//! A configuration is one object. Model keys sit at the top level and
//! override the chosen `variant`; training keys live under `"train"`.
//! Unknown keys are errors. Without `variant`, the keys `d`, `cnn_layers`
//! and `transformer_blocks` are required and the remaining model keys default
//! to the hyneter-1.0 values (heads follow `d`).

use std::path::Path;

use serde::Deserialize;

use crate::backbone::{default_heads, ModelConfig, Variant, NUM_STAGES};
use crate::error::{Error, Result};
use crate::harness::train::{Optimizer, TrainConfig};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    variant: Option<String>,
    d: Option<usize>,
    cnn_layers: Option<[usize; NUM_STAGES]>,
    transformer_blocks: Option<[usize; NUM_STAGES]>,
    patch: Option<usize>,
    window: Option<usize>,
    delta: Option<f64>,
    enable_hnb: Option<bool>,
    enable_ds: Option<bool>,
    heads: Option<[usize; NUM_STAGES]>,
    mlp_ratio: Option<f64>,
    num_classes: Option<usize>,
    image_size: Option<usize>,
    in_channels: Option<usize>,
    train: Option<RawTrain>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    optimizer: Option<Optimizer>,
    learning_rate: Option<f64>,
    weight_decay: Option<f64>,
    momentum: Option<f64>,
    steps: Option<usize>,
    batch: Option<usize>,
    seed: Option<u64>,
    eval_every: Option<usize>,
}

fn config_err(path: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        detail: detail.into(),
    }
}

/// Parse configuration text into model and training settings.
pub fn parse_config(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        config_err(if path == "." { "<root>".to_string() } else { path }, inner.to_string())
    })?;

    let mut model = match &raw.variant {
        Some(name) => name
            .parse::<Variant>()
            .map_err(|e| config_err("variant", e.to_string()))?
            .config(),
        None => {
            for (key, present) in [
                ("d", raw.d.is_some()),
                ("cnn_layers", raw.cnn_layers.is_some()),
                ("transformer_blocks", raw.transformer_blocks.is_some()),
            ] {
                if !present {
                    return Err(config_err(key, "missing required key (no `variant` given)"));
                }
            }
            Variant::V1.config()
        }
    };
    if let Some(d) = raw.d {
        model.d = d;
        model.heads = default_heads(d);
    }
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = raw.$field { model.$field = v; } )* };
    }
    set!(cnn_layers, transformer_blocks, patch, window, delta, enable_hnb, enable_ds, heads, mlp_ratio, num_classes, image_size, in_channels);
    model
        .validate()
        .map_err(|e| config_err("<model>", e.to_string()))?;

    let mut train = TrainConfig::default();
    if let Some(t) = raw.train {
        macro_rules! set_train {
            ($($field:ident),*) => { $( if let Some(v) = t.$field { train.$field = v; } )* };
        }
        set_train!(optimizer, learning_rate, weight_decay, momentum, steps, batch, seed, eval_every);
    }
    train.validate().map_err(|e| config_err("train", e.to_string()))?;
    Ok((model, train))
}

pub fn load_config(path: impl AsRef<Path>) -> Result<(ModelConfig, TrainConfig)> {
    parse_config(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_only() {
        let (m, t) = parse_config(r#"{"variant":"hyneter-1.0"}"#).unwrap();
        assert_eq!(m.d, 96);
        assert_eq!(m.transformer_blocks, [2, 2, 2, 2]);
        assert_eq!(t, TrainConfig::default());
    }

    #[test]
    fn override_applies() {
        let (m, _) = parse_config(r#"{"variant":"hyneter-1.0","delta":2.0}"#).unwrap();
        assert_eq!(m.delta, 2.0);
    }

    #[test]
    fn unknown_variant_lists_valid_names() {
        let err = parse_config(r#"{"variant":"nope"}"#).unwrap_err().to_string();
        assert!(err.contains("variant") && err.contains("hyneter-plus"), "{err}");
    }

    #[test]
    fn unknown_key_rejected_with_path() {
        let err = parse_config(r#"{"variant":"micro","train":{"stpes":3}}"#).unwrap_err();
        match err {
            Error::Config { path, detail } => {
                assert_eq!(path, "train.stpes");
                assert!(detail.contains("unknown field"), "{detail}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn type_mismatch_names_key() {
        let err = parse_config(r#"{"variant":"micro","delta":"big"}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "delta"), "{err}");
    }

    #[test]
    fn explicit_config_requires_core_keys() {
        let err = parse_config(r#"{"d":32,"cnn_layers":[1,1,1,1]}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "transformer_blocks"), "{err}");
        let (m, _) = parse_config(
            r#"{"d":64,"cnn_layers":[1,1,0,0],"transformer_blocks":[1,1,1,1],"image_size":64,"window":2}"#,
        )
        .unwrap();
        assert_eq!(m.heads, [2, 4, 8, 16]);
    }

    #[test]
    fn train_section() {
        let (_, t) = parse_config(r#"{"variant":"micro","train":{"optimizer":"sgd","steps":7,"learning_rate":0.1}}"#).unwrap();
        assert_eq!((t.optimizer, t.steps, t.learning_rate), (Optimizer::Sgd, 7, 0.1));
    }
}
