//! Attention masks between history tokens and future placeholders.
//!
//! Token indices `0..n` are history patches and `n..n+m` are placeholders.
//! The diagonal is always allowed, so every query row has at least one key.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Logit offset applied to disallowed query/key pairs.
pub const MASKED_LOGIT: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Full bidirectional attention among all tokens.
    Fa,
    /// No inter-future attention: placeholders read history only.
    Nifa,
    /// No inter-history attention: history tokens see only themselves.
    Niha,
    /// Only future focuses on history.
    Offh,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] = [
        AttentionMode::Fa,
        AttentionMode::Nifa,
        AttentionMode::Niha,
        AttentionMode::Offh,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Fa => "fa",
            AttentionMode::Nifa => "nifa",
            AttentionMode::Niha => "niha",
            AttentionMode::Offh => "offh",
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::config(
                    "attention_mode",
                    format!("unknown value `{s}`, expected one of fa, nifa, niha, offh"),
                )
            })
    }
}

/// Square boolean matrix; `allows(q, k)` is whether query `q` may attend key `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    n: usize,
    m: usize,
    allow: Vec<bool>,
}

impl AttnMask {
    /// Every token attends every token; `m` is zero for placeholder-free
    /// sequences.
    pub fn full(n: usize, m: usize) -> Self {
        let size = n + m;
        Self {
            n,
            m,
            allow: vec![true; size * size],
        }
    }

    /// Wraps an arbitrary row-major matrix, rejecting rows with no allowed key.
    pub fn from_allow(n: usize, m: usize, allow: Vec<bool>) -> Result<Self> {
        let size = n + m;
        if size == 0 || allow.len() != size * size {
            return Err(Error::Contract(format!(
                "mask of {} entries cannot be {size}×{size}",
                allow.len()
            )));
        }
        if let Some(row) = (0..size).find(|&q| !allow[q * size..(q + 1) * size].iter().any(|&a| a)) {
            return Err(Error::Contract(format!("mask row {row} allows no key")));
        }
        Ok(Self { n, m, allow })
    }

    pub fn history(&self) -> usize {
        self.n
    }

    pub fn placeholders(&self) -> usize {
        self.m
    }

    pub fn size(&self) -> usize {
        self.n + self.m
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allow[query * self.size() + key]
    }

    pub fn is_full(&self) -> bool {
        self.allow.iter().all(|&a| a)
    }

    /// Additive logit bias: 0 where allowed, [`MASKED_LOGIT`] elsewhere.
    pub fn bias(&self) -> Tensor {
        let size = self.size();
        let data = self.allow.iter().map(|&a| if a { 0.0 } else { MASKED_LOGIT }).collect();
        Tensor::new(&[size, size], data).expect("mask is non-empty")
    }
}

pub fn build_mask(mode: AttentionMode, n: usize, m: usize) -> Result<AttnMask> {
    if n == 0 {
        return Err(Error::config("n", "history token count must be at least 1"));
    }
    if m == 0 {
        return Err(Error::config("m", "placeholder count must be at least 1"));
    }
    let size = n + m;
    let mut allow = vec![false; size * size];
    for q in 0..size {
        for k in 0..size {
            let (q_hist, k_hist) = (q < n, k < n);
            allow[q * size + k] = q == k
                || match mode {
                    AttentionMode::Fa => true,
                    AttentionMode::Nifa => k_hist,
                    AttentionMode::Niha => !q_hist,
                    AttentionMode::Offh => !q_hist && k_hist,
                };
        }
    }
    AttnMask::from_allow(n, m, allow)
}
