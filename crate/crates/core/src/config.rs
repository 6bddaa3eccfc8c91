use serde::{Deserialize, Serialize};

use crate::error::{FaetError, Result};

/// Which attention layer sits between the encoder and the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Fine-grained bidirectional emoji/text attention with the alignment loss.
    #[default]
    Faet,
    /// Coarse sentence-conditioned attention over emojis (ablation).
    Aet,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Faet => "faet",
            Variant::Aet => "aet",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    #[default]
    TrainableTable,
    PrecomputedFile,
}

/// Model architecture and optimisation settings.
///
/// Serialized as the JSON config file read by the CLI; missing fields take
/// the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// LSTM hidden size per direction.
    pub d: usize,
    /// Text and emoji embedding size.
    pub d_w: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_len: usize,
    pub lr: f64,
    pub lambda_align: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    pub encoder: EncoderMode,
    /// JSONL file of per-document vectors, for `EncoderMode::PrecomputedFile`.
    pub precomputed_path: Option<String>,
    pub n_filters: usize,
    pub kernel_widths: Vec<usize>,
    pub variant: Variant,
    pub min_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 200,
            d_w: 200,
            dropout: 0.2,
            batch_size: 64,
            epochs: 10,
            max_len: 100,
            lr: 5e-4,
            lambda_align: 0.1,
            label_smoothing: 0.0,
            seed: 0,
            encoder: EncoderMode::TrainableTable,
            precomputed_path: None,
            n_filters: 64,
            kernel_widths: vec![2, 3, 4],
            variant: Variant::Faet,
            min_count: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(FaetError::Config(what.to_string()));
        if self.d == 0 || self.d_w == 0 {
            return bad("d and d_w must be positive");
        }
        if self.batch_size == 0 || self.max_len == 0 || self.n_filters == 0 || self.min_count == 0 {
            return bad("batch_size, max_len, n_filters and min_count must be positive");
        }
        if self.kernel_widths.is_empty() || self.kernel_widths.contains(&0) {
            return bad("kernel_widths must be a non-empty list of positive widths");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a finite non-negative number");
        }
        if !(self.lambda_align >= 0.0 && self.lambda_align.is_finite()) {
            return bad("lambda_align must be non-negative");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)");
        }
        if self.encoder == EncoderMode::PrecomputedFile && self.precomputed_path.is_none() {
            return bad("precomputed_file encoder needs precomputed_path");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| FaetError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
