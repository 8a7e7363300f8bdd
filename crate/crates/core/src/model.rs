//! Pre-LayerNorm decoder with a gate slot in every attention layer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NdArray, Tape, Var, MASK_VALUE};
use crate::error::{Error, Result};
use crate::gates::{apply_gate, GateInit, GateLayer, GateTrace, GateVariant, ZNormMode};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::rng::{stream, Purpose};
use crate::scalar::Scalar;

pub const INIT_STD: f64 = 0.02;
pub const MLP_EXPANSION: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub gate_variant: GateVariant,
    pub znorm_mode: ZNormMode,
    pub seed: u64,
    pub gate_init: GateInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            n_heads: 8,
            d_model: 256,
            context_len: 256,
            vocab_size: 65,
            dropout: 0.1,
            gate_variant: GateVariant::Ega1,
            znorm_mode: ZNormMode::Paper,
            seed: 1337,
            gate_init: GateInit::default(),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::contract(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.context_len == 0 || self.vocab_size == 0 {
            return Err(Error::contract("n_layers, context_len and vocab_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    gate: Option<GateLayer>,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Decoder parameters and structure.
#[derive(Clone, Debug)]
pub struct TransformerModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

/// Per-call switches of [`TransformerModel::forward`].
#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Training mode: dropout masks are drawn from this stream.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
    /// Overrides the configured normalisation mode.
    pub znorm: Option<ZNormMode>,
}

pub struct ForwardOutput {
    /// `[B, T, V]`.
    pub logits: Var,
    /// Parameter leaves in store order.
    pub vars: Vec<Var>,
    /// Gate intermediates per layer (`None` for the baseline).
    pub gates: Vec<Option<GateTrace>>,
    /// Residual stream after each block, `[B, T, d]`.
    pub hidden: Vec<Var>,
}

fn normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> NdArray<T> {
    let dist = Normal::new(0.0, std).expect("positive deviation");
    let n = shape.iter().product();
    NdArray::new(shape, (0..n).map(|_| T::lit(dist.sample(rng))).collect()).expect("shape and length agree")
}

/// Additive causal mask `[T, T]`.
pub fn causal_mask<T: Scalar>(t_len: usize) -> NdArray<T> {
    let data = (0..t_len * t_len)
        .map(|i| if i % t_len > i / t_len { T::lit(MASK_VALUE) } else { T::zero() })
        .collect();
    NdArray::new(&[t_len, t_len], data).expect("square mask")
}

impl<T: Scalar> TransformerModel<T> {
    /// Builds a model from `config.seed`. Base and gate parameters come from
    /// separate streams, so every variant shares the baseline's weights.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut base_rng = stream(config.seed, Purpose::BaseInit, 0);
        let mut gate_rng = stream(config.seed, Purpose::GateInit, 0);
        let (d, l) = (config.d_model, config.n_layers);
        let resid_std = INIT_STD / ((2 * l) as f64).sqrt();
        let mut p = ParamStore::new();
        let base = ParamKind::Base;
        let tok = p.add("tok_emb", normal(&[config.vocab_size, d], INIT_STD, &mut base_rng), base, false);
        let pos = p.add("pos_emb", normal(&[config.context_len, d], INIT_STD, &mut base_rng), base, false);
        let mut blocks = Vec::with_capacity(l);
        for i in 0..l {
            let name = |s: &str| format!("layers.{i}.{s}");
            let ones = || NdArray::full(&[d], T::one());
            let ln1_g = p.add(name("ln1.g"), ones(), base, false);
            let ln1_b = p.add(name("ln1.b"), NdArray::zeros(&[d]), base, false);
            let wq = p.add(name("attn.wq"), normal(&[d, d], INIT_STD, &mut base_rng), base, true);
            let wk = p.add(name("attn.wk"), normal(&[d, d], INIT_STD, &mut base_rng), base, true);
            let wv = p.add(name("attn.wv"), normal(&[d, d], INIT_STD, &mut base_rng), base, true);
            let wo = p.add(name("attn.wo"), normal(&[d, d], resid_std, &mut base_rng), base, true);
            let bo = p.add(name("attn.bo"), NdArray::zeros(&[d]), base, false);
            let gate = GateLayer::init(
                config.gate_variant,
                config.n_heads,
                d,
                &name("gate"),
                &mut p,
                &mut gate_rng,
                config.gate_init,
            )?;
            let ln2_g = p.add(name("ln2.g"), ones(), base, false);
            let ln2_b = p.add(name("ln2.b"), NdArray::zeros(&[d]), base, false);
            let hidden = MLP_EXPANSION * d;
            let w1 = p.add(name("mlp.w1"), normal(&[d, hidden], INIT_STD, &mut base_rng), base, true);
            let b1 = p.add(name("mlp.b1"), NdArray::zeros(&[hidden]), base, false);
            let w2 = p.add(name("mlp.w2"), normal(&[hidden, d], resid_std, &mut base_rng), base, true);
            let b2 = p.add(name("mlp.b2"), NdArray::zeros(&[d]), base, false);
            blocks.push(Block {
                ln1_g,
                ln1_b,
                wq,
                wk,
                wv,
                wo,
                bo,
                gate,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let lnf_g = p.add("lnf.g", NdArray::full(&[d], T::one()), base, false);
        let lnf_b = p.add("lnf.b", NdArray::zeros(&[d]), base, false);
        Ok(Self {
            config,
            params: p,
            tok,
            pos,
            blocks,
            lnf_g,
            lnf_b,
        })
    }

    pub fn count_params(&self) -> usize {
        self.params.total()
    }

    pub fn count_gate_params(&self) -> usize {
        self.params.count(ParamKind::Gate)
    }

    /// Gate layers in depth order (empty for the baseline).
    pub fn gate_layers(&self) -> impl Iterator<Item = (usize, &GateLayer)> {
        self.blocks.iter().enumerate().filter_map(|(i, b)| b.gate.as_ref().map(|g| (i, g)))
    }

    /// Overwrites every gate sharpness `α`.
    pub fn set_gate_alpha(&mut self, alpha: f64) {
        let ids: Vec<ParamId> = self.gate_layers().map(|(_, g)| g.alpha).collect();
        for id in ids {
            self.params.value_mut(id).data_mut().iter_mut().for_each(|a| *a = T::lit(alpha));
        }
    }

    /// Projects every Morlet gate back into its admissible region; returns
    /// the number of entries moved.
    pub fn enforce_admissibility(&mut self) -> usize {
        let layers: Vec<GateLayer> = self.gate_layers().map(|(_, g)| g.clone()).collect();
        layers.iter().map(|g| g.enforce_admissibility(&mut self.params)).sum()
    }

    /// Copies base parameters from `other` by name.
    pub fn copy_base_from(&mut self, other: &TransformerModel<T>) -> Result<()> {
        for p in other.params.iter().filter(|p| p.kind == ParamKind::Base) {
            let id = self
                .params
                .find(&p.name)
                .ok_or_else(|| Error::contract(format!("parameter {} missing", p.name)))?;
            if self.params.value(id).shape() != p.value.shape() {
                return Err(Error::shape("copy_base_from", self.params.value(id).shape(), p.value.shape()));
            }
            *self.params.value_mut(id) = p.value.clone();
        }
        Ok(())
    }

    /// The same model in another precision.
    pub fn cast<U: Scalar>(&self) -> TransformerModel<U> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            params.add(p.name.clone(), p.value.cast(), p.kind, p.decay);
        }
        TransformerModel {
            config: self.config.clone(),
            params,
            tok: self.tok,
            pos: self.pos,
            blocks: self.blocks.clone(),
            lnf_g: self.lnf_g,
            lnf_b: self.lnf_b,
        }
    }

    fn check_tokens(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<()> {
        if seq > self.config.context_len {
            return Err(Error::Context {
                len: seq,
                max: self.config.context_len,
            });
        }
        if batch == 0 || seq == 0 || tokens.len() != batch * seq {
            return Err(Error::Length {
                op: "forward",
                detail: format!("{} tokens for a {batch}×{seq} batch", tokens.len()),
            });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits `[B, T, V]` for row-major `tokens` of a `batch × seq` block.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        self.check_tokens(tokens, batch, seq)?;
        let vars = self.params.register(tape);
        self.forward_with(tape, vars, tokens, batch, seq, opts)
    }

    /// As [`forward`](Self::forward) with caller-provided parameter leaves in
    /// store order.
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        vars: Vec<Var>,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        mut opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        self.check_tokens(tokens, batch, seq)?;
        let cfg = &self.config;
        let (d, heads, dk) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let mode = opts.znorm.unwrap_or(cfg.znorm_mode);
        let p = cfg.dropout;
        let v = |id: ParamId| vars[id.0];
        let mut drop = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
            match opts.dropout_rng.as_deref_mut() {
                Some(rng) => tape.dropout(x, p, rng),
                None => Ok(x),
            }
        };

        let tok = tape.embedding(v(self.tok), tokens, &[batch, seq])?;
        let positions: Vec<usize> = (0..seq).collect();
        let pos = tape.embedding(v(self.pos), &positions, &[seq])?;
        let mut x = tape.add_bias(tok, pos)?;
        x = drop(tape, x)?;
        let mask = causal_mask::<T>(seq);
        let scale = 1.0 / (dk as f64).sqrt();
        let split = |tape: &mut Tape<T>, y: Var| -> Result<Var> {
            let y = tape.reshape(y, &[batch, seq, heads, dk])?;
            tape.permute(y, &[0, 2, 1, 3])
        };

        let mut gates = Vec::with_capacity(self.blocks.len());
        let mut hidden = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let h = tape.layer_norm(x, v(blk.ln1_g), v(blk.ln1_b))?;
            let q = tape.linear(h, v(blk.wq), false)?;
            let q = split(tape, q)?;
            let k = tape.linear(h, v(blk.wk), false)?;
            let k = split(tape, k)?;
            let val = tape.linear(h, v(blk.wv), false)?;
            let val = split(tape, val)?;
            let scores = tape.bmm(q, k, true)?;
            let scores = tape.scale(scores, scale);
            let mut attn = tape.softmax_lastdim(scores, Some(&mask))?;
            let trace = match &blk.gate {
                Some(gate) => {
                    let trace = gate.forward(tape, &vars, h, mode)?;
                    attn = apply_gate(tape, attn, trace.gate)?;
                    Some(trace)
                }
                None => None,
            };
            gates.push(trace);
            attn = drop(tape, attn)?;
            let ctx = tape.bmm(attn, val, false)?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[batch, seq, d])?;
            let out = tape.linear(ctx, v(blk.wo), false)?;
            let out = tape.add_bias(out, v(blk.bo))?;
            let out = drop(tape, out)?;
            x = tape.add(x, out)?;

            let h = tape.layer_norm(x, v(blk.ln2_g), v(blk.ln2_b))?;
            let m = tape.linear(h, v(blk.w1), false)?;
            let m = tape.add_bias(m, v(blk.b1))?;
            let m = tape.gelu(m);
            let m = tape.linear(m, v(blk.w2), false)?;
            let m = tape.add_bias(m, v(blk.b2))?;
            let m = drop(tape, m)?;
            x = tape.add(x, m)?;
            hidden.push(x);
        }
        let h = tape.layer_norm(x, v(self.lnf_g), v(self.lnf_b))?;
        let logits = tape.linear(h, v(self.tok), true)?;
        Ok(ForwardOutput {
            logits,
            vars,
            gates,
            hidden,
        })
    }

    /// Mean next-token cross-entropy of `targets` (same layout as `inputs`).
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        seq: usize,
        opts: ForwardOptions<'_>,
    ) -> Result<(Var, ForwardOutput)> {
        let out = self.forward(tape, inputs, batch, seq, opts)?;
        let loss = tape.cross_entropy(out.logits, targets)?;
        Ok((loss, out))
    }

    /// Autoregressive continuation of `prompt` in evaluation mode with
    /// causal normalisation, conditioning on at most `context_len` tokens.
    /// A temperature at or below `1e-6` picks the most likely token.
    pub fn sample<R: Rng + ?Sized>(&self, prompt: &[usize], n_new: usize, temperature: f64, rng: &mut R) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::contract("sampling needs a non-empty prompt"));
        }
        if !(temperature >= 0.0) {
            return Err(Error::contract(format!("temperature {temperature} must be non-negative")));
        }
        let mut out = prompt.to_vec();
        let vocab = self.config.vocab_size;
        for _ in 0..n_new {
            let start = out.len().saturating_sub(self.config.context_len);
            let window = &out[start..];
            let mut tape = Tape::inference();
            let fw = self.forward(
                &mut tape,
                window,
                1,
                window.len(),
                ForwardOptions {
                    dropout_rng: None,
                    znorm: Some(ZNormMode::Causal),
                },
            )?;
            let logits = tape.value(fw.logits).data();
            let last: Vec<f64> = logits[(window.len() - 1) * vocab..].iter().map(|v| v.as_f64()).collect();
            let next = if temperature <= 1e-6 {
                argmax(&last)
            } else {
                let mx = last.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = last.iter().map(|l| ((l - mx) / temperature).exp()).collect();
                let total: f64 = w.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut pick = vocab - 1;
                for (i, wi) in w.iter().enumerate() {
                    if u < *wi {
                        pick = i;
                        break;
                    }
                    u -= wi;
                }
                pick
            };
            out.push(next);
        }
        Ok(out)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
