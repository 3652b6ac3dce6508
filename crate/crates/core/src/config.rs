//! Architecture configuration, ablation switches and per-dataset presets.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which components of the full architecture are present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_frequency: bool,
    pub use_multihead_cma: bool,
    pub use_residual: bool,
    pub use_gating: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        use_frequency: true,
        use_multihead_cma: true,
        use_residual: true,
        use_gating: true,
    };

    /// The full model followed by the four single-component removals, with
    /// their report labels.
    pub fn variants() -> [(&'static str, Ablation); 5] {
        let full = Self::FULL;
        [
            ("Our Model", full),
            (
                "w/o Frequency Module",
                Ablation {
                    use_frequency: false,
                    ..full
                },
            ),
            (
                "w/o Multihead CMA",
                Ablation {
                    use_multihead_cma: false,
                    ..full
                },
            ),
            (
                "w/o Residual Connection",
                Ablation {
                    use_residual: false,
                    ..full
                },
            ),
            (
                "w/o Gating Mechanism",
                Ablation {
                    use_gating: false,
                    ..full
                },
            ),
        ]
    }

    /// Parses a comma list of components to remove:
    /// `frequency`, `multihead`, `residual`, `gating` (or `none`).
    pub fn parse(spec: &str) -> Result<Self> {
        let mut a = Self::FULL;
        for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match part {
                "none" => {}
                "frequency" | "freq" => a.use_frequency = false,
                "multihead" | "multihead_cma" | "cma" => a.use_multihead_cma = false,
                "residual" => a.use_residual = false,
                "gating" | "gate" => a.use_gating = false,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation '{other}' (expected frequency, multihead, residual, gating)"
                    )))
                }
            }
        }
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// lookback length L
    pub seq_len: usize,
    /// forecast horizon L_p
    pub pred_len: usize,
    /// number of variables N
    pub num_vars: usize,
    /// channel width C
    pub channel: usize,
    /// number of cross-modal alignment heads H
    pub cma_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// attention heads inside every encoder/decoder block
    pub attn_heads: usize,
    pub ffn_hidden: usize,
    /// hidden width of the frequency pooling MLP
    pub pool_hidden: usize,
    /// hidden width of the horizon gate MLP
    pub gate_hidden: usize,
    /// prompt feature width after projection (key/value width in CMA)
    pub prompt_dim: usize,
    /// width of the stored language-model embeddings
    pub llm_dim: usize,
    pub dropout: f64,
    pub horizon_norm: f64,
    /// learned positional embedding over the variable axis of the time encoder
    pub variable_positional: bool,
    pub ablation: Ablation,
    pub seed: u64,
}

impl ModelConfig {
    /// Config with widths derived from `channel` the default way.
    pub fn new(seq_len: usize, pred_len: usize, num_vars: usize, channel: usize) -> Self {
        Self {
            seq_len,
            pred_len,
            num_vars,
            channel,
            cma_heads: 4,
            encoder_layers: 1,
            decoder_layers: 1,
            attn_heads: default_attn_heads(channel),
            ffn_hidden: 4 * channel,
            pool_hidden: channel,
            gate_hidden: channel,
            prompt_dim: channel,
            llm_dim: 768,
            dropout: 0.1,
            horizon_norm: 720.0,
            variable_positional: false,
            ablation: Ablation::FULL,
            seed: 1,
        }
    }

    /// Number of real-FFT bins, `⌊L/2⌋ + 1`.
    pub fn freq_bins(&self) -> usize {
        self.seq_len / 2 + 1
    }

    /// Heads actually built: the single-head ablation forces one.
    pub fn effective_cma_heads(&self) -> usize {
        if self.ablation.use_multihead_cma {
            self.cma_heads
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seq_len", self.seq_len),
            ("pred_len", self.pred_len),
            ("num_vars", self.num_vars),
            ("channel", self.channel),
            ("cma_heads", self.cma_heads),
            ("attn_heads", self.attn_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("pool_hidden", self.pool_hidden),
            ("gate_hidden", self.gate_hidden),
            ("prompt_dim", self.prompt_dim),
            ("llm_dim", self.llm_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.ablation.use_frequency && self.seq_len < 2 {
            return Err(Error::Config("seq_len must be at least 2 for the spectral branch".into()));
        }
        if !self.channel.is_multiple_of(self.attn_heads) || !self.prompt_dim.is_multiple_of(self.attn_heads) {
            return Err(Error::Config(format!(
                "channel {} and prompt_dim {} must be divisible by attn_heads {}",
                self.channel, self.prompt_dim, self.attn_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.horizon_norm.is_nan() || self.horizon_norm <= 0.0 {
            return Err(Error::Config("horizon_norm must be positive".into()));
        }
        Ok(())
    }

    /// Flat `key=value` rendering, one pair per line, stable key order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.kv_pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    fn kv_pairs(&self) -> Vec<(&'static str, String)> {
        let a = &self.ablation;
        vec![
            ("seq_len", self.seq_len.to_string()),
            ("pred_len", self.pred_len.to_string()),
            ("num_vars", self.num_vars.to_string()),
            ("channel", self.channel.to_string()),
            ("cma_heads", self.cma_heads.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("attn_heads", self.attn_heads.to_string()),
            ("ffn_hidden", self.ffn_hidden.to_string()),
            ("pool_hidden", self.pool_hidden.to_string()),
            ("gate_hidden", self.gate_hidden.to_string()),
            ("prompt_dim", self.prompt_dim.to_string()),
            ("llm_dim", self.llm_dim.to_string()),
            ("dropout", self.dropout.to_string()),
            ("horizon_norm", self.horizon_norm.to_string()),
            ("variable_positional", self.variable_positional.to_string()),
            ("use_frequency", a.use_frequency.to_string()),
            ("use_multihead_cma", a.use_multihead_cma.to_string()),
            ("use_residual", a.use_residual.to_string()),
            ("use_gating", a.use_gating.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let get = |k: &str| -> Result<&str> {
            map.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Config(format!("missing key {k}")))
        };
        let cfg = Self {
            seq_len: parse_val(get("seq_len")?, "seq_len")?,
            pred_len: parse_val(get("pred_len")?, "pred_len")?,
            num_vars: parse_val(get("num_vars")?, "num_vars")?,
            channel: parse_val(get("channel")?, "channel")?,
            cma_heads: parse_val(get("cma_heads")?, "cma_heads")?,
            encoder_layers: parse_val(get("encoder_layers")?, "encoder_layers")?,
            decoder_layers: parse_val(get("decoder_layers")?, "decoder_layers")?,
            attn_heads: parse_val(get("attn_heads")?, "attn_heads")?,
            ffn_hidden: parse_val(get("ffn_hidden")?, "ffn_hidden")?,
            pool_hidden: parse_val(get("pool_hidden")?, "pool_hidden")?,
            gate_hidden: parse_val(get("gate_hidden")?, "gate_hidden")?,
            prompt_dim: parse_val(get("prompt_dim")?, "prompt_dim")?,
            llm_dim: parse_val(get("llm_dim")?, "llm_dim")?,
            dropout: parse_val(get("dropout")?, "dropout")?,
            horizon_norm: parse_val(get("horizon_norm")?, "horizon_norm")?,
            variable_positional: parse_val(get("variable_positional")?, "variable_positional")?,
            ablation: Ablation {
                use_frequency: parse_val(get("use_frequency")?, "use_frequency")?,
                use_multihead_cma: parse_val(get("use_multihead_cma")?, "use_multihead_cma")?,
                use_residual: parse_val(get("use_residual")?, "use_residual")?,
                use_gating: parse_val(get("use_gating")?, "use_gating")?,
            },
            seed: parse_val(get("seed")?, "seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn default_attn_heads(channel: usize) -> usize {
    [8, 4, 2, 1]
        .into_iter()
        .find(|h| channel.is_multiple_of(*h))
        .unwrap_or(1)
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", i + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn parse_val<V: std::str::FromStr>(v: &str, key: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
}

/// One row of the per-dataset hyperparameter table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preset {
    pub dataset: &'static str,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub input_len: usize,
    pub channel: usize,
    pub heads: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

const fn preset(
    dataset: &'static str,
    encoder_layers: usize,
    decoder_layers: usize,
    channel: usize,
    dropout: f64,
    batch_size: usize,
    epochs: usize,
) -> Preset {
    Preset {
        dataset,
        encoder_layers,
        decoder_layers,
        input_len: 96,
        channel,
        heads: 4,
        dropout,
        learning_rate: 1e-4,
        weight_decay: 1e-3,
        batch_size,
        epochs,
    }
}

pub const PRESETS: [Preset; 7] = [
    preset("ETTm1", 1, 2, 128, 0.5, 64, 150),
    preset("ETTm2", 1, 1, 64, 0.6, 16, 150),
    preset("ETTh1", 1, 1, 256, 0.4, 256, 150),
    preset("ETTh2", 1, 1, 64, 0.25, 256, 150),
    preset("ECL", 1, 2, 128, 0.3, 128, 50),
    preset("Weather", 6, 2, 64, 0.1, 32, 150),
    preset("ILI", 1, 1, 32, 0.1, 16, 100),
];

pub fn preset_for(dataset: &str) -> Option<&'static Preset> {
    PRESETS
        .iter()
        .find(|p| p.dataset.eq_ignore_ascii_case(dataset))
}

impl Preset {
    /// Model config for this row with the given lookback, horizon and width.
    pub fn model_config(&self, seq_len: usize, pred_len: usize, num_vars: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(seq_len, pred_len, num_vars, self.channel);
        cfg.encoder_layers = self.encoder_layers;
        cfg.decoder_layers = self.decoder_layers;
        cfg.cma_heads = self.heads;
        cfg.dropout = self.dropout;
        cfg
    }
}
