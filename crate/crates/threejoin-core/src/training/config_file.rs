//! Flat TOML overrides for training runs.
//!
//! A run config file is a single table of scalar keys layered on top of
//! the built-in defaults, so experiment files only state what they
//! change. Unknown keys are hard errors: a typo must not silently train
//! the wrong model.

use crate::error::{Error, Result};

use super::{Ablation, TrainConfig};

fn float(key: &str, value: &toml::Value) -> Result<f64> {
    match value {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        other => Err(Error::Validation(format!(
            "config key {key:?} wants a number, got {other}"
        ))),
    }
}

fn unsigned(key: &str, value: &toml::Value) -> Result<u64> {
    match value {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        other => Err(Error::Validation(format!(
            "config key {key:?} wants a non-negative integer, got {other}"
        ))),
    }
}

fn count(key: &str, value: &toml::Value) -> Result<usize> {
    Ok(unsigned(key, value)? as usize)
}

fn text<'a>(key: &str, value: &'a toml::Value) -> Result<&'a str> {
    value.as_str().ok_or_else(|| {
        Error::Validation(format!("config key {key:?} wants a string, got {value}"))
    })
}

fn counts(key: &str, value: &toml::Value) -> Result<Vec<usize>> {
    let items = value.as_array().ok_or_else(|| {
        Error::Validation(format!("config key {key:?} wants an array, got {value}"))
    })?;
    items.iter().map(|v| count(key, v)).collect()
}

/// Layer the keys of a TOML document onto `config`. Keys map one-to-one
/// onto the nested config fields; `ablation` takes the comma-separated
/// term list accepted by [`Ablation::parse`].
pub fn apply_overrides(config: &mut TrainConfig, source: &str) -> Result<()> {
    let table: toml::Table = source
        .parse()
        .map_err(|e| Error::Validation(format!("config file is not valid TOML: {e}")))?;
    for (key, value) in &table {
        match key.as_str() {
            "learning_rate" => config.optimizer.learning_rate = float(key, value)?,
            "beta1" => config.optimizer.beta1 = float(key, value)?,
            "beta2" => config.optimizer.beta2 = float(key, value)?,
            "epsilon" => config.optimizer.epsilon = float(key, value)?,
            "batch_size" => config.batch_size = count(key, value)?,
            "classes_per_batch" => config.classes_per_batch = count(key, value)?,
            "epochs" => config.epochs = count(key, value)?,
            "retrieval_dim" => config.retrieval_dim = count(key, value)?,
            "seed" => config.seed = unsigned(key, value)?,
            "gamma" => config.weights.gamma = float(key, value)?,
            "lambda1" => config.weights.lambda1 = float(key, value)?,
            "lambda2" => config.weights.lambda2 = float(key, value)?,
            "lambda3" => config.weights.lambda3 = float(key, value)?,
            "eta" => config.weights.eta = float(key, value)?,
            "margin" => config.weights.margin = float(key, value)?,
            "ablation" => config.ablation = Ablation::parse(text(key, value)?)?,
            "input_channels" => config.backbone.input_channels = count(key, value)?,
            "stem_channels" => config.backbone.stem_channels = count(key, value)?,
            "stage_channels" => config.backbone.stage_channels = counts(key, value)?,
            other => {
                return Err(Error::Validation(format!(
                    "unknown config key {other:?}"
                )))
            }
        }
    }
    Ok(())
}

/// Read and apply a config file; a missing path is an error, not a
/// silent fall-through to defaults.
pub fn load_overrides(config: &mut TrainConfig, path: &std::path::Path) -> Result<()> {
    let source = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    apply_overrides(config, &source)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_lands_in_its_field() {
        let mut c = TrainConfig::default();
        apply_overrides(
            &mut c,
            r#"
            learning_rate = 0.002
            beta1 = 0.8
            beta2 = 0.95
            epsilon = 1e-7
            batch_size = 12
            classes_per_batch = 3
            epochs = 4
            retrieval_dim = 32
            seed = 77
            gamma = 100
            lambda1 = 0.01
            lambda2 = 0.01
            lambda3 = 1
            eta = 100
            margin = 0.2
            ablation = "cls,kd,align"
            input_channels = 1
            stem_channels = 8
            stage_channels = [8, 16]
            "#,
        )
        .unwrap();
        assert_eq!(c.optimizer.learning_rate, 0.002);
        assert_eq!(c.optimizer.beta1, 0.8);
        assert_eq!(c.batch_size, 12);
        assert_eq!(c.classes_per_batch, 3);
        assert_eq!(c.epochs, 4);
        assert_eq!(c.retrieval_dim, 32);
        assert_eq!(c.seed, 77);
        // Integers coerce to float weights, matching how runs are written.
        assert_eq!(c.weights.gamma, 100.0);
        assert_eq!(c.weights.lambda3, 1.0);
        assert_eq!(c.weights.eta, 100.0);
        assert!(c.ablation.kd && c.ablation.align && !c.ablation.center);
        assert_eq!(c.backbone.input_channels, 1);
        assert_eq!(c.backbone.stage_channels, vec![8, 16]);
    }

    #[test]
    fn unknown_keys_and_wrong_types_are_named() {
        let mut c = TrainConfig::default();
        let err = apply_overrides(&mut c, "learnig_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("learnig_rate"));
        let err = apply_overrides(&mut c, "batch_size = \"many\"").unwrap_err();
        assert!(err.to_string().contains("batch_size"));
        let err = apply_overrides(&mut c, "batch_size = -3").unwrap_err();
        assert!(err.to_string().contains("non-negative"));
        assert!(apply_overrides(&mut c, "epochs = [1").is_err());
    }

    #[test]
    fn ablation_override_still_requires_cls() {
        let mut c = TrainConfig::default();
        let err = apply_overrides(&mut c, "ablation = \"kd,align\"").unwrap_err();
        assert!(err.to_string().contains("cls"));
    }

    #[test]
    fn empty_document_changes_nothing() {
        let mut c = TrainConfig::default();
        let before = serde_json::to_string(&c).unwrap();
        apply_overrides(&mut c, "").unwrap();
        assert_eq!(serde_json::to_string(&c).unwrap(), before);
    }
}
