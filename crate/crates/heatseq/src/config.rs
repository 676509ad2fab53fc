//! Run configuration: a flat key=value text file covering data generation,
//! model size, loss weights, and the training loop. Unknown keys are errors
//! so a typo cannot silently fall back to a default.

use crate::encodings::MaskKind;
use crate::error::{Error, Result};
use crate::fdsolver::DatasetParams;
use crate::geometry::PlateGeometry;
use crate::losses::LossWeights;
use crate::model::{Activation, ModelConfig};
use crate::scenario::{ScenarioMode, DEFAULT_BETA_RANGE};
use crate::training::{base_schedule, challenge2_schedule, LrSchedule, TrainSettings};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Base,
    Challenge2,
    Constant,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    // data
    pub mode: ScenarioMode,
    pub ny: usize,
    pub nx: usize,
    pub n_cases: usize,
    pub fractions: [f64; 3],
    pub data_seed: u64,
    pub beta_range: (f64, f64),
    pub segment_len: usize,
    pub seq_len: usize,
    pub record_stride: usize,
    // model
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_encoder_layers: usize,
    pub mlp_dim: usize,
    pub start_predicting_from: usize,
    pub mask_kind: MaskKind,
    pub activation: Activation,
    pub pe_scale: Option<f64>,
    // loss
    pub weights: LossWeights,
    // training
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule_kind: ScheduleKind,
    pub constant_lr: f64,
    pub train_seed: u64,
}

const KNOWN_KEYS: &[&str] = &[
    "mode",
    "ny",
    "nx",
    "n_cases",
    "train_frac",
    "val_frac",
    "test_frac",
    "data_seed",
    "beta_min",
    "beta_max",
    "segment_len",
    "seq_len",
    "record_stride",
    "embed_dim",
    "num_heads",
    "num_encoder_layers",
    "mlp_dim",
    "start_predicting_from",
    "mask",
    "activation",
    "pe_scale",
    "lambda_pi",
    "lambda_bc",
    "lambda_ic",
    "loss_eps",
    "batch_size",
    "epochs",
    "schedule",
    "lr",
    "train_seed",
];

fn get_parsed<T: std::str::FromStr>(
    kv: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T> {
    match kv.get(key) {
        None => Ok(default),
        Some(raw) => raw
            .parse()
            .map_err(|_| Error::Config(format!("config key `{key}`: cannot parse `{raw}`"))),
    }
}

fn require_parsed<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = kv
        .get(key)
        .ok_or_else(|| Error::Config(format!("config is missing required key `{key}`")))?;
    raw.parse()
        .map_err(|_| Error::Config(format!("config key `{key}`: cannot parse `{raw}`")))
}

impl RunConfig {
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        for key in kv.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
        }
        let mode: ScenarioMode = match kv.get("mode") {
            Some(raw) => raw.parse()?,
            None => ScenarioMode::Base,
        };
        let mask_kind: MaskKind = match kv.get("mask") {
            Some(raw) => raw.parse()?,
            None => MaskKind::Block,
        };
        let activation: Activation = match kv.get("activation") {
            Some(raw) => raw.parse()?,
            None => Activation::Gelu,
        };
        let schedule_kind = match kv.get("schedule").map(String::as_str) {
            None | Some("base") => ScheduleKind::Base,
            Some("challenge2") => ScheduleKind::Challenge2,
            Some("constant") => ScheduleKind::Constant,
            Some(other) => {
                return Err(Error::Config(format!("unknown schedule `{other}`")))
            }
        };
        let config = RunConfig {
            mode,
            ny: require_parsed(kv, "ny")?,
            nx: require_parsed(kv, "nx")?,
            n_cases: require_parsed(kv, "n_cases")?,
            fractions: [
                get_parsed(kv, "train_frac", 0.7)?,
                get_parsed(kv, "val_frac", 0.2)?,
                get_parsed(kv, "test_frac", 0.1)?,
            ],
            data_seed: get_parsed(kv, "data_seed", 0)?,
            beta_range: (
                get_parsed(kv, "beta_min", DEFAULT_BETA_RANGE.0)?,
                get_parsed(kv, "beta_max", DEFAULT_BETA_RANGE.1)?,
            ),
            segment_len: get_parsed(kv, "segment_len", 3)?,
            seq_len: require_parsed(kv, "seq_len")?,
            record_stride: get_parsed(kv, "record_stride", 1)?,
            embed_dim: require_parsed(kv, "embed_dim")?,
            num_heads: require_parsed(kv, "num_heads")?,
            num_encoder_layers: require_parsed(kv, "num_encoder_layers")?,
            mlp_dim: require_parsed(kv, "mlp_dim")?,
            start_predicting_from: require_parsed(kv, "start_predicting_from")?,
            mask_kind,
            activation,
            pe_scale: match kv.get("pe_scale") {
                Some(raw) => Some(raw.parse().map_err(|_| {
                    Error::Config(format!("config key `pe_scale`: cannot parse `{raw}`"))
                })?),
                None => None,
            },
            weights: LossWeights {
                lambda_pi: get_parsed(kv, "lambda_pi", 1.0)?,
                lambda_bc: get_parsed(kv, "lambda_bc", 1.0)?,
                lambda_ic: get_parsed(kv, "lambda_ic", 1.0)?,
                eps: get_parsed(kv, "loss_eps", 1e-8)?,
            },
            batch_size: get_parsed(kv, "batch_size", 4)?,
            epochs: require_parsed(kv, "epochs")?,
            schedule_kind,
            constant_lr: get_parsed(kv, "lr", 1e-3)?,
            train_seed: get_parsed(kv, "train_seed", 0)?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.schedule_kind == ScheduleKind::Constant && self.constant_lr < 0.0 {
            return Err(Error::Config("lr must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        put("mode", self.mode.to_string());
        put("ny", self.ny.to_string());
        put("nx", self.nx.to_string());
        put("n_cases", self.n_cases.to_string());
        put("train_frac", format!("{:e}", self.fractions[0]));
        put("val_frac", format!("{:e}", self.fractions[1]));
        put("test_frac", format!("{:e}", self.fractions[2]));
        put("data_seed", self.data_seed.to_string());
        put("beta_min", format!("{:e}", self.beta_range.0));
        put("beta_max", format!("{:e}", self.beta_range.1));
        put("segment_len", self.segment_len.to_string());
        put("seq_len", self.seq_len.to_string());
        put("record_stride", self.record_stride.to_string());
        put("embed_dim", self.embed_dim.to_string());
        put("num_heads", self.num_heads.to_string());
        put("num_encoder_layers", self.num_encoder_layers.to_string());
        put("mlp_dim", self.mlp_dim.to_string());
        put(
            "start_predicting_from",
            self.start_predicting_from.to_string(),
        );
        put("mask", self.mask_kind.to_string());
        put(
            "activation",
            match self.activation {
                Activation::Gelu => "gelu".to_string(),
                Activation::Relu => "relu".to_string(),
            },
        );
        if let Some(scale) = self.pe_scale {
            put("pe_scale", format!("{scale:e}"));
        }
        put("lambda_pi", format!("{:e}", self.weights.lambda_pi));
        put("lambda_bc", format!("{:e}", self.weights.lambda_bc));
        put("lambda_ic", format!("{:e}", self.weights.lambda_ic));
        put("loss_eps", format!("{:e}", self.weights.eps));
        put("batch_size", self.batch_size.to_string());
        put("epochs", self.epochs.to_string());
        put(
            "schedule",
            match self.schedule_kind {
                ScheduleKind::Base => "base".to_string(),
                ScheduleKind::Challenge2 => "challenge2".to_string(),
                ScheduleKind::Constant => "constant".to_string(),
            },
        );
        put("lr", format!("{:e}", self.constant_lr));
        put("train_seed", self.train_seed.to_string());
        kv
    }

    pub fn dataset_params(&self) -> Result<DatasetParams> {
        Ok(DatasetParams {
            mode: self.mode,
            n_cases: self.n_cases,
            fractions: self.fractions,
            seeds: [
                self.data_seed.wrapping_mul(3),
                self.data_seed.wrapping_mul(3).wrapping_add(1),
                self.data_seed.wrapping_mul(3).wrapping_add(2),
            ],
            geometry: PlateGeometry::new(self.nx, self.ny)?,
            beta_range: self.beta_range,
            segment_len: self.segment_len,
            seq_len: self.seq_len,
            record_stride: self.record_stride,
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            ny: self.ny,
            nx: self.nx,
            seq_len: self.seq_len,
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            num_encoder_layers: self.num_encoder_layers,
            mlp_dim: self.mlp_dim,
            start_predicting_from: self.start_predicting_from,
            mask_kind: self.mask_kind,
            activation: self.activation,
            pe_scale: self.pe_scale,
        })
    }

    /// Schedule fitted to the configured epoch count: staged schedules are
    /// compressed/stretched proportionally.
    pub fn schedule(&self) -> Result<LrSchedule> {
        match self.schedule_kind {
            ScheduleKind::Base => base_schedule().compressed(self.epochs),
            ScheduleKind::Challenge2 => challenge2_schedule().compressed(self.epochs),
            ScheduleKind::Constant => LrSchedule::constant(self.constant_lr, self.epochs),
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.train_seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_kv() -> BTreeMap<String, String> {
        let pairs = [
            ("ny", "8"),
            ("nx", "8"),
            ("n_cases", "10"),
            ("seq_len", "12"),
            ("embed_dim", "16"),
            ("num_heads", "2"),
            ("num_encoder_layers", "1"),
            ("mlp_dim", "16"),
            ("start_predicting_from", "3"),
            ("epochs", "10"),
        ];
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn defaults_fill_in_and_roundtrip() {
        let config = RunConfig::from_kv(&minimal_kv()).unwrap();
        assert_eq!(config.mode, ScenarioMode::Base);
        assert_eq!(config.batch_size, 4);
        assert_eq!(config.fractions, [0.7, 0.2, 0.1]);
        assert_eq!(config.weights.lambda_pi, 1.0);
        assert_eq!(config.mask_kind, MaskKind::Block);
        // serialize -> parse -> serialize is stable
        let kv = config.to_kv();
        let again = RunConfig::from_kv(&kv).unwrap();
        assert_eq!(again.to_kv(), kv);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut kv = minimal_kv();
        kv.insert("embed_dims".to_string(), "16".to_string());
        let err = RunConfig::from_kv(&kv).unwrap_err();
        assert!(err.to_string().contains("embed_dims"));
    }

    #[test]
    fn missing_required_key_rejected() {
        let mut kv = minimal_kv();
        kv.remove("seq_len");
        assert!(RunConfig::from_kv(&kv).is_err());
    }

    #[test]
    fn bad_values_rejected() {
        let mut kv = minimal_kv();
        kv.insert("embed_dim".to_string(), "15".to_string());
        assert!(RunConfig::from_kv(&kv).is_err());
        let mut kv = minimal_kv();
        kv.insert("mask".to_string(), "diagonal".to_string());
        assert!(RunConfig::from_kv(&kv).is_err());
        let mut kv = minimal_kv();
        kv.insert("lambda_pi".to_string(), "-1".to_string());
        assert!(RunConfig::from_kv(&kv).is_err());
    }

    #[test]
    fn schedule_selection() {
        let mut kv = minimal_kv();
        kv.insert("epochs".to_string(), "100".to_string());
        let config = RunConfig::from_kv(&kv).unwrap();
        let schedule = config.schedule().unwrap();
        assert_eq!(schedule.lr_at_epoch(50).unwrap(), 1e-4);
        kv.insert("schedule".to_string(), "constant".to_string());
        kv.insert("lr".to_string(), "5e-4".to_string());
        let config = RunConfig::from_kv(&kv).unwrap();
        assert_eq!(config.schedule().unwrap().lr_at_epoch(42).unwrap(), 5e-4);
    }
}
