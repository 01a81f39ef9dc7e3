use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ChannelMode, HeadMode, ModelConfig};
use super::revin::RevIn;
use crate::error::{Error, Result};
use crate::mask::{build_mask, AttnMask};
use crate::nn::{
    normal_init, Bound, EncoderBlock, ForwardCtx, Linear, MultiHeadAttention, ParamId, ParamStore, PositionalEmbedding,
};
use crate::tensor::{Tape, Tensor, Var};

/// Trainable parameter counts per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub embedding: usize,
    pub encoder: usize,
    pub interaction: usize,
    pub head: usize,
    pub identifiers: usize,
    pub placeholder: usize,
    pub positions: usize,
    pub revin: usize,
    pub total: usize,
}

impl ParamReport {
    pub fn head_fraction(&self) -> f64 {
        self.head as f64 / self.total as f64
    }
}

/// Placeholder-enhanced transformer forecaster.
///
/// Inputs are `[B, l, d]` batches, outputs `[B, h, d]`. Owns its parameters;
/// a forward pass binds them onto a caller-supplied tape.
#[derive(Debug, Clone)]
pub struct Petformer {
    cfg: ModelConfig,
    store: ParamStore,
    revin: Option<RevIn>,
    embed: Linear,
    identifiers: Option<ParamId>,
    placeholder: Option<ParamId>,
    positions: PositionalEmbedding,
    blocks: Vec<EncoderBlock>,
    interaction: Option<MultiHeadAttention>,
    head: Linear,
    mask: AttnMask,
    n: usize,
    m: usize,
}

impl Petformer {
    /// Builds a freshly initialized model; identical seeds give identical
    /// parameters.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (n, m) = (cfg.history_tokens(), cfg.placeholder_tokens());
        let (w, d, dm) = (cfg.patch_len, cfg.channels, cfg.d_model);
        let mixed = cfg.channel_mode == ChannelMode::Dcm;
        let tokenwise = cfg.head_mode == HeadMode::Tokenwise;

        let revin = cfg.revin.then(|| RevIn::new(&mut store, "revin", d));
        let embed_in = if mixed { w * d } else { w };
        let embed = Linear::new(&mut store, "embed", embed_in, dm, &mut rng);
        let identifiers = (!mixed && cfg.channel_mode.uses_identifiers())
            .then(|| store.add("identifiers", normal_init(&mut rng, &[d, dm], 0.02), true));
        let placeholder = tokenwise.then(|| store.add("placeholder", normal_init(&mut rng, &[dm], 0.02), true));
        let rows = if tokenwise { n + m } else { n };
        let positions = PositionalEmbedding::new(&mut store, "positions", rows, dm, &mut rng);
        let blocks = (0..cfg.layers)
            .map(|i| {
                EncoderBlock::new(
                    &mut store,
                    &format!("blocks.{i}"),
                    dm,
                    cfg.heads,
                    cfg.ff_factor,
                    cfg.dropout,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let interaction = match cfg.channel_mode {
            ChannelMode::Sa | ChannelMode::Ca => Some(MultiHeadAttention::new(
                &mut store,
                "interaction",
                dm,
                cfg.heads,
                &mut rng,
            )?),
            _ => None,
        };
        let per_channel = if mixed { d } else { 1 };
        let head = match cfg.head_mode {
            HeadMode::Tokenwise => Linear::new(&mut store, "head", dm, w * per_channel, &mut rng),
            HeadMode::Flatten => Linear::new(&mut store, "head", n * dm, cfg.horizon * per_channel, &mut rng),
            HeadMode::Feature => Linear::new(&mut store, "head", dm, cfg.horizon * per_channel, &mut rng),
        };
        let mask = if tokenwise {
            build_mask(cfg.attention_mode, n, m)?
        } else {
            AttnMask::full(n, 0)
        };
        Ok(Self {
            cfg,
            store,
            revin,
            embed,
            identifiers,
            placeholder,
            positions,
            blocks,
            interaction,
            head,
            mask,
            n,
            m,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn mask(&self) -> &AttnMask {
        &self.mask
    }

    /// `(n, m)`; `m` is zero for heads that run without placeholders.
    pub fn token_counts(&self) -> (usize, usize) {
        (self.n, if self.placeholder.is_some() { self.m } else { 0 })
    }

    pub fn embed(&self) -> &Linear {
        &self.embed
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn placeholder(&self) -> Option<ParamId> {
        self.placeholder
    }

    pub fn identifiers(&self) -> Option<ParamId> {
        self.identifiers
    }

    pub fn positions(&self) -> &PositionalEmbedding {
        &self.positions
    }

    pub fn blocks(&self) -> &[EncoderBlock] {
        &self.blocks
    }

    pub fn count_parameters(&self) -> ParamReport {
        let c = |prefix: &str| self.store.count_trainable(prefix);
        let report = ParamReport {
            embedding: c("embed."),
            encoder: c("blocks."),
            interaction: c("interaction."),
            head: c("head."),
            identifiers: c("identifiers"),
            placeholder: c("placeholder"),
            positions: c("positions"),
            revin: c("revin."),
            total: c(""),
        };
        debug_assert_eq!(
            report.total,
            report.embedding
                + report.encoder
                + report.interaction
                + report.head
                + report.identifiers
                + report.placeholder
                + report.positions
                + report.revin
        );
        report
    }

    /// Splits sequences `[S, l]` (or `[S, l, d]` under channel mixing) into
    /// `n` end-aligned patches and embeds each: `[S, n, d_model]`.
    pub fn tokenize<'t>(&self, params: &Bound<'t>, series: Var<'t>) -> Result<Var<'t>> {
        let shape = series.shape();
        let mixed = self.cfg.channel_mode == ChannelMode::Dcm;
        let expected_rank = if mixed { 3 } else { 2 };
        if shape.len() != expected_rank || shape[1] != self.cfg.lookback {
            return Err(Error::config(
                "lookback",
                format!(
                    "expected sequences of length {}, got shape {:?}",
                    self.cfg.lookback, shape
                ),
            ));
        }
        let w = self.cfg.patch_len;
        let patches = series.unfold(1, self.cfg.patch_offset(), w, self.cfg.stride())?;
        let patches = if mixed {
            patches.reshape(&[shape[0], self.n, w * shape[2]])?
        } else {
            patches
        };
        self.embed.forward(params, patches)
    }

    /// Appends `m` copies of the placeholder to `tokens: [S, n, d_model]` and
    /// adds positions, giving `[S, n+m, d_model]`.
    pub fn inject_placeholders<'t>(&self, params: &Bound<'t>, tokens: Var<'t>) -> Result<Var<'t>> {
        let p = self
            .placeholder
            .ok_or_else(|| Error::config("head_mode", "placeholders exist only with the token-wise head"))?;
        let shape = tokens.shape();
        let tape = tokens.tape();
        let slots = tape
            .constant(Tensor::zeros(&[shape[0], self.m, self.cfg.d_model]))
            .add(params.get(p))?;
        let seq = tape.concat(&[tokens, slots], 1)?;
        self.positions.forward(params, seq)
    }

    /// Runs the encoder stack over `seq: [S, T, d_model]` and returns the
    /// final states of the last `mask.placeholders()` tokens (all tokens when
    /// there are none).
    pub fn encode<'t>(
        &self,
        params: &Bound<'t>,
        seq: Var<'t>,
        mask: &AttnMask,
        ctx: &mut ForwardCtx,
    ) -> Result<Var<'t>> {
        let mut x = seq;
        for block in &self.blocks {
            x = block.forward(params, x, mask, ctx)?;
        }
        let m = mask.placeholders();
        if m == 0 {
            Ok(x)
        } else {
            Ok(x.slice(1, mask.history(), m)?)
        }
    }

    /// Mixes information across channels on a `[B, d, P, d_model]` grid.
    pub fn interact_channels<'t>(&self, params: &Bound<'t>, grid: Var<'t>) -> Result<Var<'t>> {
        let mode = self.cfg.channel_mode;
        match mode {
            ChannelMode::Nci | ChannelMode::Ci => Ok(grid),
            ChannelMode::Dcm => Err(Error::Contract(
                "channel-mixed models have no channel axis to interact over".into(),
            )),
            ChannelMode::Sa | ChannelMode::Ca => {
                let attn = self
                    .interaction
                    .as_ref()
                    .ok_or_else(|| Error::config("channel_mode", "interaction layer missing"))?;
                let shape = grid.shape();
                let (b, d, p, dm) = (shape[0], shape[1], shape[2], shape[3]);
                let by_position = grid.permute(&[0, 2, 1, 3])?.reshape(&[b * p, d, dm])?;
                let mixed = if mode == ChannelMode::Sa {
                    attn.forward(params, by_position, None)?
                } else {
                    let table = self
                        .identifiers
                        .ok_or_else(|| Error::config("channel_mode", "cross-attention needs channel identifiers"))?;
                    let queries = grid
                        .tape()
                        .constant(Tensor::zeros(&[b * p, d, dm]))
                        .add(params.get(table))?;
                    attn.attend(params, queries, by_position, None)?
                };
                Ok(by_position
                    .add(mixed)?
                    .reshape(&[b, p, d, dm])?
                    .permute(&[0, 2, 1, 3])?)
            }
        }
    }

    /// `[B, d, m, d_model]` → `[B, h, d]`.
    pub fn predict_tokenwise<'t>(&self, params: &Bound<'t>, grid: Var<'t>) -> Result<Var<'t>> {
        let shape = grid.shape();
        let (b, d, m) = (shape[0], shape[1], shape[2]);
        if m * self.cfg.patch_len != self.cfg.horizon {
            return Err(Error::config(
                "horizon",
                format!(
                    "{m} tokens × {} steps do not cover {}",
                    self.cfg.patch_len, self.cfg.horizon
                ),
            ));
        }
        let patches = self.head.forward(params, grid)?;
        Ok(patches.reshape(&[b, d, self.cfg.horizon])?.permute(&[0, 2, 1])?)
    }

    /// `[B, d, n, d_model]` → `[B, h, d]` through one flattened vector per channel.
    pub fn predict_flatten<'t>(&self, params: &Bound<'t>, grid: Var<'t>) -> Result<Var<'t>> {
        let shape = grid.shape();
        let (b, d) = (shape[0], shape[1]);
        let flat = grid.reshape(&[b, d, shape[2] * shape[3]])?;
        Ok(self.head.forward(params, flat)?.permute(&[0, 2, 1])?)
    }

    /// `[B, d, n, d_model]` → `[B, h, d]` through the mean token per channel.
    pub fn predict_feature<'t>(&self, params: &Bound<'t>, grid: Var<'t>) -> Result<Var<'t>> {
        let shape = grid.shape();
        let (b, d, dm) = (shape[0], shape[1], shape[3]);
        let pooled = grid.mean(2)?.reshape(&[b, d, dm])?;
        Ok(self.head.forward(params, pooled)?.permute(&[0, 2, 1])?)
    }

    /// Full pipeline for `x: [B, l, d]`.
    pub fn forward<'t>(&self, params: &Bound<'t>, x: Var<'t>, ctx: &mut ForwardCtx) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[1] != self.cfg.lookback || shape[2] != self.cfg.channels {
            return Err(Error::config(
                "channels",
                format!(
                    "input {:?} does not match [batch, {}, {}]",
                    shape, self.cfg.lookback, self.cfg.channels
                ),
            ));
        }
        if !x.value().all_finite() {
            return Err(Error::Data("input window contains non-finite values".into()));
        }
        let (x, state) = match &self.revin {
            Some(r) => {
                let (y, s) = r.normalize(params, x)?;
                (y, Some(s))
            }
            None => (x, None),
        };
        let y = if self.cfg.channel_mode == ChannelMode::Dcm {
            self.forward_mixed(params, x, ctx)?
        } else {
            self.forward_separated(params, x, ctx)?
        };
        match (&self.revin, state) {
            (Some(r), Some(s)) => r.denormalize(params, y, &s),
            _ => Ok(y),
        }
    }

    fn forward_separated<'t>(&self, params: &Bound<'t>, x: Var<'t>, ctx: &mut ForwardCtx) -> Result<Var<'t>> {
        let shape = x.shape();
        let (b, l, d, dm) = (shape[0], shape[1], shape[2], self.cfg.d_model);
        let series = x.permute(&[0, 2, 1])?.reshape(&[b * d, l])?;
        let mut tokens = self.tokenize(params, series)?;
        if self.cfg.channel_mode == ChannelMode::Ci {
            let table = self
                .identifiers
                .ok_or_else(|| Error::config("channel_mode", "channel identifiers missing"))?;
            tokens = tokens
                .reshape(&[b, d, self.n, dm])?
                .add(params.get(table).reshape(&[d, 1, dm])?)?
                .reshape(&[b * d, self.n, dm])?;
        }
        let seq = if self.placeholder.is_some() {
            self.inject_placeholders(params, tokens)?
        } else {
            self.positions.forward(params, tokens)?
        };
        let out = self.encode(params, seq, &self.mask, ctx)?;
        let rows = out.shape()[1];
        let grid = self.interact_channels(params, out.reshape(&[b, d, rows, dm])?)?;
        match self.cfg.head_mode {
            HeadMode::Tokenwise => self.predict_tokenwise(params, grid),
            HeadMode::Flatten => self.predict_flatten(params, grid),
            HeadMode::Feature => self.predict_feature(params, grid),
        }
    }

    fn forward_mixed<'t>(&self, params: &Bound<'t>, x: Var<'t>, ctx: &mut ForwardCtx) -> Result<Var<'t>> {
        let shape = x.shape();
        let (b, d, dm, h) = (shape[0], shape[2], self.cfg.d_model, self.cfg.horizon);
        let tokens = self.tokenize(params, x)?;
        let seq = if self.placeholder.is_some() {
            self.inject_placeholders(params, tokens)?
        } else {
            self.positions.forward(params, tokens)?
        };
        let out = self.encode(params, seq, &self.mask, ctx)?;
        let y = match self.cfg.head_mode {
            // each future token becomes one w×d patch, time-major
            HeadMode::Tokenwise => self.head.forward(params, out)?,
            HeadMode::Flatten => self.head.forward(params, out.reshape(&[b, self.n * dm])?)?,
            HeadMode::Feature => self.head.forward(params, out.mean(1)?.reshape(&[b, dm])?)?,
        };
        Ok(y.reshape(&[b, h, d])?)
    }

    /// Inference on `[B, l, d]` with a private tape.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.store.bind(&tape);
        let y = self.forward(&params, tape.constant(x.clone()), &mut ForwardCtx::eval())?;
        Ok(y.value().as_ref().clone())
    }
}
