use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::AttentionMode;

/// How channels are tokenized and whether they exchange information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    /// Direct channel mixing: one token stream whose patches span all channels.
    Dcm,
    /// Independent channels sharing weights, no interaction.
    Nci,
    /// Independent channels followed by self-attention across channels.
    Sa,
    /// Independent channels tagged with learnable channel identifiers.
    Ci,
    /// Cross-attention across channels with identifiers as queries.
    Ca,
}

impl ChannelMode {
    pub const ALL: [ChannelMode; 5] = [
        ChannelMode::Dcm,
        ChannelMode::Nci,
        ChannelMode::Sa,
        ChannelMode::Ci,
        ChannelMode::Ca,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ChannelMode::Dcm => "dcm",
            ChannelMode::Nci => "nci",
            ChannelMode::Sa => "sa",
            ChannelMode::Ci => "ci",
            ChannelMode::Ca => "ca",
        }
    }

    pub fn uses_identifiers(self) -> bool {
        matches!(self, ChannelMode::Ci | ChannelMode::Ca)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    /// Placeholders in the encoder, one shared linear map per future token.
    Tokenwise,
    /// History tokens flattened into one vector and mapped to the horizon.
    Flatten,
    /// History tokens mean-pooled into one vector and mapped to the horizon.
    Feature,
}

impl HeadMode {
    pub const ALL: [HeadMode; 3] = [HeadMode::Tokenwise, HeadMode::Flatten, HeadMode::Feature];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadMode::Tokenwise => "tokenwise",
            HeadMode::Flatten => "flatten",
            HeadMode::Feature => "feature",
        }
    }
}

macro_rules! string_enum {
    ($ty:ty, $field:literal) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let lower = s.to_ascii_lowercase();
                <$ty>::ALL
                    .into_iter()
                    .find(|v| v.as_str() == lower)
                    .ok_or_else(|| {
                        let valid: Vec<&str> = <$ty>::ALL.iter().map(|v| v.as_str()).collect();
                        Error::config(
                            $field,
                            format!("unknown value `{s}`, expected one of {}", valid.join(", ")),
                        )
                    })
            }
        }
    };
}

string_enum!(ChannelMode, "channel_mode");
string_enum!(HeadMode, "head_mode");

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Look-back length in time steps.
    pub lookback: usize,
    /// Forecast horizon in time steps.
    pub horizon: usize,
    /// Number of channels (variables).
    pub channels: usize,
    /// Patch length.
    pub patch_len: usize,
    /// Patch stride; `None` means non-overlapping patches (stride = patch_len).
    pub stride: Option<usize>,
    pub d_model: usize,
    /// Number of encoder blocks.
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub ff_factor: f64,
    pub attention_mode: AttentionMode,
    pub channel_mode: ChannelMode,
    pub head_mode: HeadMode,
    pub revin: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 720,
            horizon: 96,
            channels: 7,
            patch_len: 48,
            stride: None,
            d_model: 512,
            layers: 4,
            heads: 8,
            dropout: 0.5,
            ff_factor: 2.0,
            attention_mode: AttentionMode::Fa,
            channel_mode: ChannelMode::Nci,
            head_mode: HeadMode::Tokenwise,
            revin: true,
        }
    }
}

impl ModelConfig {
    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.patch_len)
    }

    /// History token count `n = ⌊(l − w)/s⌋ + 1`.
    pub fn history_tokens(&self) -> usize {
        (self.lookback - self.patch_len) / self.stride() + 1
    }

    /// Placeholder count `m = ⌊(h − w)/s⌋ + 1`.
    pub fn placeholder_tokens(&self) -> usize {
        (self.horizon - self.patch_len) / self.stride() + 1
    }

    /// Offset of the first patch so that the last patch ends at the final
    /// look-back step.
    pub fn patch_offset(&self) -> usize {
        self.lookback - self.patch_len - (self.history_tokens() - 1) * self.stride()
    }

    /// Checks every invariant, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("channels", self.channels),
            ("patch_len", self.patch_len),
            ("d_model", self.d_model),
            ("heads", self.heads),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.stride == Some(0) {
            return Err(Error::config("stride", "must be at least 1"));
        }
        if self.patch_len > self.lookback {
            return Err(Error::config(
                "patch_len",
                format!("patch length {} exceeds look-back {}", self.patch_len, self.lookback),
            ));
        }
        if self.patch_len > self.horizon {
            return Err(Error::config(
                "patch_len",
                format!("patch length {} exceeds horizon {}", self.patch_len, self.horizon),
            ));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.heads),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", format!("{} is outside [0, 1)", self.dropout)));
        }
        let hidden = self.ff_factor * self.d_model as f64;
        if hidden < 1.0 || hidden.fract() != 0.0 {
            return Err(Error::config(
                "ff_factor",
                format!(
                    "{} × d_model {} is not a positive integer width",
                    self.ff_factor, self.d_model
                ),
            ));
        }
        if self.head_mode == HeadMode::Tokenwise {
            let covered = self.placeholder_tokens() * self.patch_len;
            if covered != self.horizon {
                return Err(Error::config(
                    "horizon",
                    format!(
                        "token-wise head emits {} placeholders × {} steps = {covered}, not the horizon {}",
                        self.placeholder_tokens(),
                        self.patch_len,
                        self.horizon
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// `(n, m)` for a validated configuration.
pub fn patch_counts(cfg: &ModelConfig) -> Result<(usize, usize)> {
    if cfg.patch_len == 0 || cfg.stride() == 0 {
        return Err(Error::config("patch_len", "patch length and stride must be positive"));
    }
    if cfg.patch_len > cfg.lookback {
        return Err(Error::config(
            "patch_len",
            format!("{} exceeds look-back {}", cfg.patch_len, cfg.lookback),
        ));
    }
    if cfg.patch_len > cfg.horizon {
        return Err(Error::config(
            "patch_len",
            format!("{} exceeds horizon {}", cfg.patch_len, cfg.horizon),
        ));
    }
    Ok((cfg.history_tokens(), cfg.placeholder_tokens()))
}
