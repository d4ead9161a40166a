//! A small pre-norm encoder-decoder transformer with a tied embedding table,
//! learned positions, one adapter slot per layer and an encoder prompt slot.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnMask, FreezeMask, Gradients, Group, Mat, ParamKey, Tape, Var};
use crate::error::{Error, Result};
use crate::peft::PeftState;
use crate::rng;
use crate::tokenizer::{TokenId, Vocab, EOS, PAD};

pub const INIT_STD: f64 = 0.1;
pub const POSITION_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub vocab: Vocab,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_input_length: usize,
    pub rng_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// The desk-scale default.
    pub fn desk() -> Self {
        Self {
            vocab: Vocab::default(),
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 128,
            max_input_length: 256,
            rng_seed: 0,
        }
    }

    /// The configuration used for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            vocab: Vocab::default(),
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 32,
            max_input_length: 128,
            rng_seed: 0,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_enc_layers + self.n_dec_layers
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.max_input_length == 0 {
            return Err(Error::InvalidConfig("d_ff and max_input_length must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form backbone parameter count.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let ffn = d * self.d_ff + self.d_ff + self.d_ff * d + d;
        let enc_layer = 2 * 2 * d + 4 * d * d + ffn;
        let dec_layer = 3 * 2 * d + 8 * d * d + ffn;
        self.vocab.size() * d
            + self.n_enc_layers * enc_layer
            + self.n_dec_layers * dec_layer
            + 2 * 2 * d
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln_attn: Norm,
    attn: Attention,
    ln_ffn: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln_self: Norm,
    self_attn: Attention,
    ln_cross: Norm,
    cross_attn: Attention,
    ln_ffn: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: usize,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
}

struct Builder {
    seed: u64,
    names: Vec<String>,
    tensors: Vec<Mat>,
}

impl Builder {
    fn push(&mut self, name: String, value: Mat) -> usize {
        self.names.push(name);
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    fn normal(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let mut rng = rng::stream(self.seed, &name);
        let dist = Normal::new(0.0, INIT_STD).expect("valid std");
        let value = Mat::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng));
        self.push(name, value)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.push(format!("{prefix}.gain"), Mat::ones((1, d))),
            bias: self.push(format!("{prefix}.bias"), Mat::zeros((1, d))),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Attention {
        Attention {
            wq: self.normal(format!("{prefix}.wq"), d, d),
            wk: self.normal(format!("{prefix}.wk"), d, d),
            wv: self.normal(format!("{prefix}.wv"), d, d),
            wo: self.normal(format!("{prefix}.wo"), d, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) -> FeedForward {
        FeedForward {
            w1: self.normal(format!("{prefix}.w1"), d, d_ff),
            b1: self.push(format!("{prefix}.b1"), Mat::zeros((1, d_ff))),
            w2: self.normal(format!("{prefix}.w2"), d_ff, d),
            b2: self.push(format!("{prefix}.b2"), Mat::zeros((1, d))),
        }
    }
}

/// Logits and mean token loss for one (source, target) pair.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Mat,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TinyTransformer {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Mat>,
    layout: Layout,
    /// Fixed sinusoidal position table, `max_input_length × d_model`.
    positions: Mat,
}

impl TinyTransformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut b = Builder {
            seed: config.rng_seed,
            names: Vec::new(),
            tensors: Vec::new(),
        };
        let embed = b.normal("embed".into(), config.vocab.size(), d);
        let encoder = (0..config.n_enc_layers)
            .map(|i| {
                let p = format!("enc.{i}");
                EncoderLayer {
                    ln_attn: b.norm(&format!("{p}.ln_attn"), d),
                    attn: b.attention(&format!("{p}.attn"), d),
                    ln_ffn: b.norm(&format!("{p}.ln_ffn"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, config.d_ff),
                }
            })
            .collect();
        let enc_norm = b.norm("enc.final_norm", d);
        let decoder = (0..config.n_dec_layers)
            .map(|i| {
                let p = format!("dec.{i}");
                DecoderLayer {
                    ln_self: b.norm(&format!("{p}.ln_self"), d),
                    self_attn: b.attention(&format!("{p}.self_attn"), d),
                    ln_cross: b.norm(&format!("{p}.ln_cross"), d),
                    cross_attn: b.attention(&format!("{p}.cross_attn"), d),
                    ln_ffn: b.norm(&format!("{p}.ln_ffn"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, config.d_ff),
                }
            })
            .collect();
        let dec_norm = b.norm("dec.final_norm", d);
        let positions = sinusoidal_positions(config.max_input_length, d);
        Ok(Self {
            config,
            names: b.names,
            tensors: b.tensors,
            positions,
            layout: Layout {
                embed,
                encoder,
                enc_norm,
                decoder,
                dec_norm,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.config.vocab
    }

    pub fn embedding(&self) -> &Mat {
        &self.tensors[self.layout.embed]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    /// `(key, name, value)` for every backbone tensor, in construction order.
    pub fn tensors(&self) -> impl Iterator<Item = (ParamKey, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamKey::new(Group::Backbone, i), n.as_str(), t))
    }

    pub fn tensor_mut(&mut self, key: ParamKey) -> Option<&mut Mat> {
        (key.group == Group::Backbone)
            .then(|| self.tensors.get_mut(key.index as usize))
            .flatten()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Mat)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn tensor_by_name_mut(&mut self, name: &str) -> Option<&mut Mat> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    /// Sets every parameter to zero.
    pub fn zero_parameters(&mut self) {
        for t in &mut self.tensors {
            t.fill(0.0);
        }
    }

    pub fn check_finite(&self, peft: &PeftState) -> Result<()> {
        for (_, name, t) in self.tensors() {
            if !t.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFiniteParameter(name.to_string()));
            }
        }
        for (_, name, t) in peft.tensors() {
            if !t.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFiniteParameter(name));
            }
        }
        Ok(())
    }

    fn check_lengths(&self, source_len: usize, target_len: usize, peft: &PeftState) -> Result<()> {
        let max = self.config.max_input_length;
        let enc_len = source_len + peft.prompt_len();
        if enc_len > max {
            return Err(Error::LengthOverflow { len: enc_len, max });
        }
        if target_len > max {
            return Err(Error::LengthOverflow {
                len: target_len,
                max,
            });
        }
        if source_len == 0 {
            return Err(Error::InvalidInput("empty source sequence".into()));
        }
        Ok(())
    }

    fn param<'a>(&'a self, tape: &mut Tape<'a>, index: usize) -> Var {
        tape.param(ParamKey::new(Group::Backbone, index), &self.tensors[index])
    }

    fn norm<'a>(&'a self, tape: &mut Tape<'a>, x: Var, n: Norm) -> Var {
        let g = self.param(tape, n.gain);
        let b = self.param(tape, n.bias);
        tape.layer_norm(x, g, b)
    }

    fn attend<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        query_in: Var,
        memory: Var,
        a: Attention,
        mask: &AttnMask,
    ) -> Var {
        let wq = self.param(tape, a.wq);
        let wk = self.param(tape, a.wk);
        let wv = self.param(tape, a.wv);
        let wo = self.param(tape, a.wo);
        let q = tape.matmul(query_in, wq);
        let k = tape.matmul(memory, wk);
        let v = tape.matmul(memory, wv);
        let heads = tape.attention(q, k, v, self.config.n_heads, mask);
        tape.matmul(heads, wo)
    }

    fn feed_forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, f: FeedForward) -> Var {
        let w1 = self.param(tape, f.w1);
        let b1 = self.param(tape, f.b1);
        let w2 = self.param(tape, f.w2);
        let b2 = self.param(tape, f.b2);
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.relu(h);
        let h = tape.matmul(h, w2);
        tape.add_row(h, b2)
    }

    fn adapters<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        mut x: Var,
        layer: usize,
        peft: &'a PeftState,
    ) -> Var {
        for (group, adapter) in peft.adapters_at(layer) {
            let base = layer * 4;
            let dw = tape.param(ParamKey::new(group, base), &adapter.down_w);
            let db = tape.param(ParamKey::new(group, base + 1), &adapter.down_b);
            let uw = tape.param(ParamKey::new(group, base + 2), &adapter.up_w);
            let ub = tape.param(ParamKey::new(group, base + 3), &adapter.up_b);
            let h = tape.matmul(x, dw);
            let h = tape.add_row(h, db);
            let h = tape.relu(h);
            let h = tape.matmul(h, uw);
            let h = tape.add_row(h, ub);
            x = tape.add(x, h);
        }
        x
    }

    fn embed<'a>(&'a self, tape: &mut Tape<'a>, ids: &[TokenId]) -> Var {
        let table = self.param(tape, self.layout.embed);
        let ids: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let tok = tape.gather(table, &ids);
        let pos = tape.constant(self.positions.slice(ndarray::s![..ids.len(), ..]).to_owned());
        tape.add(tok, pos)
    }

    /// Encoder pass. Returns the final hidden states and the key mask over
    /// them (prompt rows are always visible, source `PAD` never is).
    pub fn encode<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        source: &[TokenId],
        peft: &'a PeftState,
    ) -> (Var, Vec<bool>) {
        let mut x = self.embed(tape, source);
        let mut valid: Vec<bool> = source.iter().map(|&t| t != PAD).collect();
        let prompt = match (&peft.lang_prompt, &peft.task_prompt) {
            (Some(l), Some(t)) => {
                let l = tape.param(ParamKey::new(Group::LangPrompt, 0), &l.embedding);
                let t = tape.param(ParamKey::new(Group::TaskPrompt, 0), &t.embedding);
                Some(tape.concat_rows(l, t))
            }
            (Some(l), None) => Some(tape.param(ParamKey::new(Group::LangPrompt, 0), &l.embedding)),
            (None, Some(t)) => Some(tape.param(ParamKey::new(Group::TaskPrompt, 0), &t.embedding)),
            (None, None) => None,
        };
        if let Some(p) = prompt {
            let n = tape.value(p).nrows();
            x = tape.concat_rows(p, x);
            valid.splice(0..0, std::iter::repeat_n(true, n));
        }
        let mask = AttnMask {
            causal: false,
            key_valid: Some(valid.clone()),
        };
        for (i, layer) in self.layout.encoder.iter().enumerate() {
            let h = self.norm(tape, x, layer.ln_attn);
            let h = self.attend(tape, h, h, layer.attn, &mask);
            x = tape.add(x, h);
            let h = self.norm(tape, x, layer.ln_ffn);
            let h = self.feed_forward(tape, h, layer.ffn);
            x = tape.add(x, h);
            x = self.adapters(tape, x, i, peft);
        }
        (self.norm(tape, x, self.layout.enc_norm), valid)
    }

    /// Decoder pass producing `len(decoder_input) × vocab` logits.
    pub fn decode<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        memory: Var,
        memory_valid: &[bool],
        decoder_input: &[TokenId],
        peft: &'a PeftState,
    ) -> Var {
        let mut y = self.embed(tape, decoder_input);
        let self_mask = AttnMask {
            causal: true,
            key_valid: None,
        };
        let cross_mask = AttnMask {
            causal: false,
            key_valid: Some(memory_valid.to_vec()),
        };
        let offset = self.config.n_enc_layers;
        for (i, layer) in self.layout.decoder.iter().enumerate() {
            let h = self.norm(tape, y, layer.ln_self);
            let h = self.attend(tape, h, h, layer.self_attn, &self_mask);
            y = tape.add(y, h);
            let h = self.norm(tape, y, layer.ln_cross);
            let h = self.attend(tape, h, memory, layer.cross_attn, &cross_mask);
            y = tape.add(y, h);
            let h = self.norm(tape, y, layer.ln_ffn);
            let h = self.feed_forward(tape, h, layer.ffn);
            y = tape.add(y, h);
            y = self.adapters(tape, y, offset + i, peft);
        }
        let h = self.norm(tape, y, self.layout.dec_norm);
        let table = self.param(tape, self.layout.embed);
        tape.matmul_t(h, table)
    }

    /// Records the full pass on `tape`; returns the summed target loss and
    /// the number of non-`PAD` target positions.
    pub fn loss_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        source: &[TokenId],
        target: &[TokenId],
        peft: &'a PeftState,
    ) -> Result<(Var, Var, usize)> {
        self.check_lengths(source.len(), target.len(), peft)?;
        let (memory, valid) = self.encode(tape, source, peft);
        let decoder_input = shift_right(target);
        let logits = self.decode(tape, memory, &valid, &decoder_input, peft);
        let targets: Vec<Option<usize>> = target
            .iter()
            .map(|&t| (t != PAD).then_some(t as usize))
            .collect();
        let count = targets.iter().filter(|t| t.is_some()).count();
        let loss = tape.cross_entropy_sum(logits, &targets);
        Ok((logits, loss, count))
    }

    /// Per-position logits and mean token cross-entropy over non-`PAD`
    /// targets.
    pub fn forward(&self, source: &[TokenId], target: &[TokenId], peft: &PeftState) -> Result<ForwardOutput> {
        self.check_finite(peft)?;
        let mut tape = Tape::inference();
        let (logits, loss, count) = self.loss_on_tape(&mut tape, source, target, peft)?;
        Ok(ForwardOutput {
            logits: tape.value(logits).clone(),
            loss: tape.value(loss)[[0, 0]] / count.max(1) as f64,
        })
    }

    /// Token-weighted mean loss over `batch` and its gradient with respect to
    /// every parameter in `trainable`.
    pub fn batch_loss_and_grad(
        &self,
        batch: &[(Vec<TokenId>, Vec<TokenId>)],
        peft: &PeftState,
        trainable: &FreezeMask,
    ) -> Result<(f64, Gradients)> {
        let mut total = 0.0;
        let mut count = 0usize;
        let mut grads = Gradients::new();
        for (source, target) in batch {
            let mut tape = Tape::new(trainable.clone());
            let (_, loss, n) = self.loss_on_tape(&mut tape, source, target, peft)?;
            total += tape.value(loss)[[0, 0]];
            count += n;
            for (key, g) in tape.backward(loss) {
                match grads.get_mut(&key) {
                    Some(acc) => *acc += &g,
                    None => {
                        grads.insert(key, g);
                    }
                }
            }
        }
        let norm = 1.0 / count.max(1) as f64;
        for g in grads.values_mut() {
            *g *= norm;
        }
        Ok((total * norm, grads))
    }

    /// Token-weighted mean loss over `batch` without gradients.
    pub fn batch_loss(&self, batch: &[(Vec<TokenId>, Vec<TokenId>)], peft: &PeftState) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for (source, target) in batch {
            let mut tape = Tape::inference();
            let (_, loss, n) = self.loss_on_tape(&mut tape, source, target, peft)?;
            total += tape.value(loss)[[0, 0]];
            count += n;
        }
        Ok(total / count.max(1) as f64)
    }

    /// Greedy decoding from the start token until `EOS` or `max_new_tokens`.
    /// Ties go to the lowest id. The returned ids exclude `EOS`.
    pub fn generate(&self, source: &[TokenId], peft: &PeftState, max_new_tokens: usize) -> Result<Vec<TokenId>> {
        if max_new_tokens == 0 {
            return Err(Error::InvalidInput("max_new_tokens must be at least 1".into()));
        }
        self.check_lengths(source.len(), max_new_tokens, peft)?;
        self.check_finite(peft)?;
        let mut tape = Tape::inference();
        let (memory, valid) = self.encode(&mut tape, source, peft);
        let memory = tape.value(memory).clone();
        let mut decoder_input = vec![PAD];
        let mut out = Vec::new();
        for _ in 0..max_new_tokens {
            let mut step = Tape::inference();
            let mem = step.constant(memory.clone());
            let logits = self.decode(&mut step, mem, &valid, &decoder_input, peft);
            let next = argmax(step.value(logits).row(decoder_input.len() - 1).iter().copied());
            if next == EOS {
                break;
            }
            out.push(next);
            decoder_input.push(next);
        }
        Ok(out)
    }
}

/// Sine/cosine position encodings scaled by `POSITION_SCALE`. Source and
/// decoder positions both start at 0; prompt rows carry no position.
pub fn sinusoidal_positions(len: usize, d: usize) -> Mat {
    Mat::from_shape_fn((len, d), |(pos, i)| {
        let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * rate;
        POSITION_SCALE * if i % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

/// Decoder input: the start token (`PAD`) followed by all but the last target.
pub fn shift_right(target: &[TokenId]) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(target.len());
    out.push(PAD);
    out.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    out
}

/// Index of the first maximum.
pub fn argmax(values: impl Iterator<Item = f64>) -> TokenId {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0 as TokenId
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peft::{AdapterStack, Role};

    fn sample(vocab: &Vocab, text: &str) -> Vec<TokenId> {
        vocab.encode(text)
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for cfg in [ModelConfig::desk(), ModelConfig::tiny()] {
            let m = TinyTransformer::new(cfg.clone()).unwrap();
            assert_eq!(m.parameter_count(), cfg.parameter_count());
        }
    }

    #[test]
    fn rejects_bad_head_split() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..ModelConfig::tiny()
        };
        assert!(TinyTransformer::new(cfg).is_err());
    }

    #[test]
    fn zero_parameters_give_uniform_logits() {
        let mut m = TinyTransformer::new(ModelConfig::tiny()).unwrap();
        m.zero_parameters();
        let v = *m.vocab();
        let out = m.forward(&sample(&v, "hello"), &sample(&v, "yo"), &PeftState::empty()).unwrap();
        assert!(out.logits.iter().all(|&x| x == 0.0));
        assert!((out.loss - (v.size() as f64).ln()).abs() < 1e-12);
        assert_eq!(out.logits.dim(), (3, v.size()));
    }

    #[test]
    fn identity_adapters_leave_logits_unchanged() {
        let m = TinyTransformer::new(ModelConfig::tiny()).unwrap();
        let v = *m.vocab();
        let (src, tgt) = (sample(&v, "abc def"), sample(&v, "xyz"));
        let base = m.forward(&src, &tgt, &PeftState::empty()).unwrap();
        let peft = PeftState {
            lang_adapter: Some(AdapterStack::new(m.config(), 4, Role::Language, 1).unwrap()),
            task_adapter: Some(AdapterStack::new(m.config(), 4, Role::Task, 2).unwrap()),
            ..PeftState::empty()
        };
        let with = m.forward(&src, &tgt, &peft).unwrap();
        assert_eq!(base.logits, with.logits);
    }

    #[test]
    fn length_overflow_and_non_finite_rejected() {
        let mut m = TinyTransformer::new(ModelConfig::tiny()).unwrap();
        let v = *m.vocab();
        let long = vec![b'a' as TokenId; 200];
        assert!(matches!(
            m.forward(&long, &sample(&v, "a"), &PeftState::empty()),
            Err(Error::LengthOverflow { .. })
        ));
        m.tensor_by_name_mut("enc.0.attn.wq").unwrap()[[0, 0]] = f64::NAN;
        assert!(matches!(
            m.forward(&sample(&v, "a"), &sample(&v, "a"), &PeftState::empty()),
            Err(Error::NonFiniteParameter(_))
        ));
    }

    #[test]
    fn pad_targets_are_ignored_and_pad_sources_masked() {
        let m = TinyTransformer::new(ModelConfig::tiny()).unwrap();
        let v = *m.vocab();
        let src = sample(&v, "abc");
        let tgt = sample(&v, "de");
        let base = m.forward(&src, &tgt, &PeftState::empty()).unwrap();
        let mut padded_src = src.clone();
        padded_src.extend([PAD, PAD]);
        let mut padded_tgt = tgt.clone();
        padded_tgt.extend([PAD]);
        let padded = m.forward(&padded_src, &padded_tgt, &PeftState::empty()).unwrap();
        assert!((base.loss - padded.loss).abs() < 1e-12);
        for r in 0..tgt.len() {
            for c in 0..v.size() {
                assert!((base.logits[[r, c]] - padded.logits[[r, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_capped_and_deterministic() {
        let m = TinyTransformer::new(ModelConfig::tiny()).unwrap();
        let v = *m.vocab();
        let src = sample(&v, "hello");
        let a = m.generate(&src, &PeftState::empty(), 3).unwrap();
        let b = m.generate(&src, &PeftState::empty(), 3).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 3);
        assert!(m.generate(&src, &PeftState::empty(), 0).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax([1.0, 3.0, 3.0, 2.0].into_iter()), 1);
        assert_eq!(argmax([0.0, 0.0].into_iter()), 0);
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        let mut m = TinyTransformer::new(ModelConfig::tiny()).unwrap();
        // Larger weights than the init so attention is far from uniform.
        for t in &mut m.tensors {
            t.mapv_inplace(|x| x * 20.0);
        }
        let v = *m.vocab();
        let batch = vec![(sample(&v, "ab cd"), sample(&v, "cd"))];
        let mask: FreezeMask = [Group::Backbone].into_iter().collect();
        let (_, grads) = m.batch_loss_and_grad(&batch, &PeftState::empty(), &mask).unwrap();
        let h = 1e-5;
        for idx in 0..m.tensors.len() {
            let g = &grads[&ParamKey::new(Group::Backbone, idx)];
            let n = m.tensors[idx].len();
            for flat in [0, n / 2, n - 1] {
                let (r, c) = (flat / m.tensors[idx].ncols(), flat % m.tensors[idx].ncols());
                let orig = m.tensors[idx][[r, c]];
                m.tensors[idx][[r, c]] = orig + h;
                let up = m.batch_loss(&batch, &PeftState::empty()).unwrap();
                m.tensors[idx][[r, c]] = orig - h;
                let down = m.batch_loss(&batch, &PeftState::empty()).unwrap();
                m.tensors[idx][[r, c]] = orig;
                let num = (up - down) / (2.0 * h);
                let ana = g[[r, c]];
                assert!(
                    (num - ana).abs() <= 1e-6 + 1e-4 * num.abs().max(ana.abs()),
                    "{} [{r},{c}]: numeric {num} analytic {ana}",
                    m.names[idx]
                );
            }
        }
    }
}
