//! Tiny pre-norm transformer noise predictor whose attention heads and FFN
//! hidden neurons can be scaled by per-unit gates.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{out_of_range, Error, Result};
use crate::grad::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_blocks: usize,
    /// Tokens per latent.
    pub seq_len: usize,
    pub n_conditions: usize,
    /// Diffusion steps the time embedding is used with.
    pub steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d_model: 16,
            n_heads: 4,
            d_ff: 32,
            n_blocks: 3,
            seq_len: 4,
            n_conditions: 8,
            steps: 8,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_blocks", self.n_blocks),
            ("seq_len", self.seq_len),
            ("n_conditions", self.n_conditions),
            ("steps", self.steps),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn latent_shape(&self) -> [usize; 2] {
        [self.seq_len, self.d_model]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead<S> {
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
}

/// One transformer block. Head count and FFN width are per block so a
/// compacted model can carry a different number of units in each.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<S> {
    pub heads: Vec<AttentionHead<S>>,
    /// `[heads * d_head, d_model]`; `None` once every head has been removed.
    pub wo: Option<Tensor<S>>,
    /// `None` once every hidden neuron has been removed.
    pub ffn: Option<FfnWeights<S>>,
    pub b2: Tensor<S>,
    pub ln1_gain: Tensor<S>,
    pub ln1_bias: Tensor<S>,
    pub ln2_gain: Tensor<S>,
    pub ln2_bias: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnWeights<S> {
    /// `[d_model, d_ff]`.
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    /// `[d_ff, d_model]`.
    pub w2: Tensor<S>,
}

impl<S: Scalar> Block<S> {
    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// Hidden FFN width.
    pub fn d_ff(&self) -> usize {
        self.ffn.as_ref().map_or(0, |f| f.b1.numel())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<S> {
    pub config: DenoiserConfig,
    pub blocks: Vec<Block<S>>,
    /// `[n_conditions, d_model]`.
    pub cond_table: Tensor<S>,
    /// Linear map applied to the sinusoidal time features.
    pub time_w: Tensor<S>,
    pub time_b: Tensor<S>,
}

/// Gates for one block, as tape nodes. `None` means ungated.
#[derive(Clone, Copy, Debug, Default)]
pub struct BlockGates {
    pub heads: Option<Var>,
    pub ffn: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct BoundHead {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub heads: Vec<BoundHead>,
    pub wo: Option<Var>,
    /// `None` when the block has no FFN neurons left.
    pub w1: Option<Var>,
    pub b1: Option<Var>,
    pub w2: Option<Var>,
    pub b2: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

/// Model weights registered on a particular tape.
#[derive(Clone, Debug)]
pub struct BoundDenoiser {
    pub blocks: Vec<BoundBlock>,
    pub cond_table: Var,
    pub time_w: Var,
    pub time_b: Var,
    /// Every registered weight, in [`Denoiser::named_tensors`] order.
    pub all: Vec<Var>,
}

impl<S: Scalar> Denoiser<S> {
    /// Randomly initialised model.
    pub fn init<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let dh = config.d_head();
        let dff = config.d_ff;
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let blocks = (0..config.n_blocks)
            .map(|_| Block {
                heads: (0..config.n_heads)
                    .map(|_| AttentionHead {
                        wq: Tensor::randn([d, dh], fan(d), rng),
                        wk: Tensor::randn([d, dh], fan(d), rng),
                        wv: Tensor::randn([d, dh], fan(d), rng),
                    })
                    .collect(),
                wo: Some(Tensor::randn([config.n_heads * dh, d], 0.5 * fan(d), rng)),
                ffn: Some(FfnWeights {
                    w1: Tensor::randn([d, dff], fan(d), rng),
                    b1: Tensor::zeros([dff]),
                    w2: Tensor::randn([dff, d], 0.5 * fan(dff), rng),
                }),
                b2: Tensor::zeros([d]),
                ln1_gain: Tensor::full([d], S::one()),
                ln1_bias: Tensor::zeros([d]),
                ln2_gain: Tensor::full([d], S::one()),
                ln2_bias: Tensor::zeros([d]),
            })
            .collect();
        Ok(Self {
            config,
            blocks,
            cond_table: Tensor::randn([config.n_conditions, d], 0.1, rng),
            time_w: Tensor::randn([d, d], 0.1 * fan(d), rng),
            time_b: Tensor::zeros([d]),
        })
    }

    /// All weight tensors with stable names. Blocks without FFN neurons omit
    /// `w1`, `b1` and `w2`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![
            ("cond_table".to_string(), &self.cond_table),
            ("time.w".to_string(), &self.time_w),
            ("time.b".to_string(), &self.time_b),
        ];
        for (b, block) in self.blocks.iter().enumerate() {
            for (i, head) in block.heads.iter().enumerate() {
                out.push((format!("block.{b}.head.{i}.wq"), &head.wq));
                out.push((format!("block.{b}.head.{i}.wk"), &head.wk));
                out.push((format!("block.{b}.head.{i}.wv"), &head.wv));
            }
            if let Some(wo) = &block.wo {
                out.push((format!("block.{b}.attn.wo"), wo));
            }
            if let Some(f) = &block.ffn {
                out.push((format!("block.{b}.ffn.w1"), &f.w1));
                out.push((format!("block.{b}.ffn.b1"), &f.b1));
                out.push((format!("block.{b}.ffn.w2"), &f.w2));
            }
            out.push((format!("block.{b}.ffn.b2"), &block.b2));
            out.push((format!("block.{b}.ln1.gain"), &block.ln1_gain));
            out.push((format!("block.{b}.ln1.bias"), &block.ln1_bias));
            out.push((format!("block.{b}.ln2.gain"), &block.ln2_gain));
            out.push((format!("block.{b}.ln2.bias"), &block.ln2_bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.cond_table, &mut self.time_w, &mut self.time_b];
        for block in &mut self.blocks {
            for head in &mut block.heads {
                out.push(&mut head.wq);
                out.push(&mut head.wk);
                out.push(&mut head.wv);
            }
            if let Some(wo) = &mut block.wo {
                out.push(wo);
            }
            if let Some(f) = &mut block.ffn {
                out.push(&mut f.w1);
                out.push(&mut f.b1);
                out.push(&mut f.w2);
            }
            out.push(&mut block.b2);
            out.push(&mut block.ln1_gain);
            out.push(&mut block.ln1_bias);
            out.push(&mut block.ln2_gain);
            out.push(&mut block.ln2_bias);
        }
        out
    }

    /// Rebuilds a model from [`Denoiser::named_tensors`] output. Head counts
    /// and FFN widths are read off the tensor shapes; `seq_len` and `steps`
    /// are not stored in the weights and must be supplied.
    pub fn from_named(
        mut named: BTreeMap<String, Tensor<S>>,
        seq_len: usize,
        steps: usize,
    ) -> Result<Self> {
        let mut take = |name: &str| {
            named
                .remove(name)
                .ok_or_else(|| Error::Config(format!("missing tensor {name}")))
        };
        let cond_table = take("cond_table")?;
        let time_w = take("time.w")?;
        let time_b = take("time.b")?;
        if cond_table.rank() != 2 {
            return Err(Error::Config("cond_table must be rank 2".into()));
        }
        let (n_conditions, d_model) = (cond_table.shape()[0], cond_table.shape()[1]);
        let mut blocks = Vec::new();
        let mut n_heads = 0;
        let mut d_ff = 0;
        let mut d_head = None;
        for b in 0.. {
            if !named.contains_key(&format!("block.{b}.ln1.gain")) {
                break;
            }
            let mut heads = Vec::new();
            let mut take = |name: String| {
                named
                    .remove(&name)
                    .ok_or_else(|| Error::Config(format!("missing tensor {name}")))
            };
            for i in 0.. {
                let wq = match take(format!("block.{b}.head.{i}.wq")) {
                    Ok(t) => t,
                    Err(_) => break,
                };
                d_head = Some(wq.last_dim());
                heads.push(AttentionHead {
                    wq,
                    wk: take(format!("block.{b}.head.{i}.wk"))?,
                    wv: take(format!("block.{b}.head.{i}.wv"))?,
                });
            }
            let wo = take(format!("block.{b}.attn.wo")).ok();
            let ffn = match take(format!("block.{b}.ffn.w1")) {
                Ok(w1) => Some(FfnWeights {
                    w1,
                    b1: take(format!("block.{b}.ffn.b1"))?,
                    w2: take(format!("block.{b}.ffn.w2"))?,
                }),
                Err(_) => None,
            };
            let block = Block {
                heads,
                wo,
                ffn,
                b2: take(format!("block.{b}.ffn.b2"))?,
                ln1_gain: take(format!("block.{b}.ln1.gain"))?,
                ln1_bias: take(format!("block.{b}.ln1.bias"))?,
                ln2_gain: take(format!("block.{b}.ln2.gain"))?,
                ln2_bias: take(format!("block.{b}.ln2.bias"))?,
            };
            n_heads = n_heads.max(block.n_heads());
            d_ff = d_ff.max(block.d_ff());
            blocks.push(block);
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Config(format!("unexpected tensor {extra}")));
        }
        // A compacted model keeps the original head width; the nominal head
        // count is whatever reproduces it.
        let d_head = d_head.unwrap_or(d_model);
        let config = DenoiserConfig {
            d_model,
            n_heads: (d_model / d_head).max(n_heads).max(1),
            d_ff: d_ff.max(1),
            n_blocks: blocks.len(),
            seq_len,
            n_conditions,
            steps,
        };
        let model = Self {
            config,
            blocks,
            cond_table,
            time_w,
            time_b,
        };
        model.check_shapes()?;
        Ok(model)
    }

    /// Verifies every weight against `d_model`, the head width and the block's
    /// own unit counts.
    pub fn check_shapes(&self) -> Result<()> {
        let d = self.config.d_model;
        let dh = self.config.d_head();
        let bad = |name: String, got: &[usize], want: &[usize]| -> Result<()> {
            if got != want {
                return Err(Error::Config(format!(
                    "{name} has shape {got:?}, expected {want:?}"
                )));
            }
            Ok(())
        };
        bad("cond_table".into(), self.cond_table.shape(), &[self.config.n_conditions, d])?;
        bad("time.w".into(), self.time_w.shape(), &[d, d])?;
        bad("time.b".into(), self.time_b.shape(), &[d])?;
        for (b, block) in self.blocks.iter().enumerate() {
            for head in &block.heads {
                for w in [&head.wq, &head.wk, &head.wv] {
                    bad(format!("block {b} head"), w.shape(), &[d, dh])?;
                }
            }
            match &block.wo {
                Some(wo) => bad(format!("block {b} wo"), wo.shape(), &[block.n_heads() * dh, d])?,
                None if block.n_heads() > 0 => {
                    return Err(Error::Config(format!("block {b} has heads but no wo")))
                }
                None => {}
            }
            if let Some(ffn) = &block.ffn {
                let f = ffn.b1.numel();
                bad(format!("block {b} b1"), ffn.b1.shape(), &[f])?;
                bad(format!("block {b} w1"), ffn.w1.shape(), &[d, f])?;
                bad(format!("block {b} w2"), ffn.w2.shape(), &[f, d])?;
            }
            for v in [
                &block.b2,
                &block.ln1_gain,
                &block.ln1_bias,
                &block.ln2_gain,
                &block.ln2_bias,
            ] {
                bad(format!("block {b} vector"), v.shape(), &[d])?;
            }
        }
        Ok(())
    }

    /// Registers every weight on `tape`, as differentiable params when
    /// `trainable` and as constants otherwise.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> BoundDenoiser {
        let mut all = Vec::new();
        let mut reg = |t: &Tensor<S>| {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            all.push(v);
            v
        };
        let cond_table = reg(&self.cond_table);
        let time_w = reg(&self.time_w);
        let time_b = reg(&self.time_b);
        let blocks = self
            .blocks
            .iter()
            .map(|block| {
                let heads = block
                    .heads
                    .iter()
                    .map(|h| BoundHead {
                        wq: reg(&h.wq),
                        wk: reg(&h.wk),
                        wv: reg(&h.wv),
                    })
                    .collect();
                let wo = block.wo.as_ref().map(&mut reg);
                let (w1, b1, w2) = match &block.ffn {
                    Some(f) => (Some(reg(&f.w1)), Some(reg(&f.b1)), Some(reg(&f.w2))),
                    None => (None, None, None),
                };
                BoundBlock {
                    heads,
                    wo,
                    w1,
                    b1,
                    w2,
                    b2: reg(&block.b2),
                    ln1_gain: reg(&block.ln1_gain),
                    ln1_bias: reg(&block.ln1_bias),
                    ln2_gain: reg(&block.ln2_gain),
                    ln2_bias: reg(&block.ln2_bias),
                }
            })
            .collect();
        BoundDenoiser {
            blocks,
            cond_table,
            time_w,
            time_b,
            all,
        }
    }

    /// Noise prediction for latent `z` (`[seq_len, d_model]`) at step `t` in
    /// `1..=steps` under condition `y`.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundDenoiser,
        z: Var,
        t: usize,
        y: usize,
        gates: Option<&[BlockGates]>,
    ) -> Result<Var> {
        if t == 0 || t > self.config.steps {
            return Err(out_of_range("time step", t, format!("[1, {}]", self.config.steps)));
        }
        if y >= self.config.n_conditions {
            return Err(out_of_range(
                "condition",
                y,
                format!("[0, {})", self.config.n_conditions),
            ));
        }
        if tape.shape(z) != self.config.latent_shape() {
            return Err(Error::Shape {
                op: "denoiser input",
                lhs: tape.shape(z).to_vec(),
                rhs: self.config.latent_shape().to_vec(),
            });
        }
        if let Some(g) = gates {
            if g.len() != self.blocks.len() {
                return Err(Error::Contract(format!(
                    "{} gate groups for {} blocks",
                    g.len(),
                    self.blocks.len()
                )));
            }
        }
        let d = self.config.d_model;
        let feats = tape.constant(sinusoidal_features(t, d));
        let temb = tape.matmul(feats, bound.time_w)?;
        let temb = tape.reshape(temb, &[d])?;
        let temb = tape.add(temb, bound.time_b)?;
        let cemb = tape.embedding(bound.cond_table, y)?;
        let mut x = tape.add(z, temb)?;
        x = tape.add(x, cemb)?;
        for (b, (block, bb)) in self.blocks.iter().zip(&bound.blocks).enumerate() {
            let g = gates.map(|g| g[b]).unwrap_or_default();
            let h = layer_norm_affine(tape, x, bb.ln1_gain, bb.ln1_bias)?;
            if let Some(attn) = mha_masked(tape, h, bb, self.config.d_head(), g.heads)? {
                x = tape.add(x, attn)?;
            }
            let h = layer_norm_affine(tape, x, bb.ln2_gain, bb.ln2_bias)?;
            let ffn = ffn_masked(tape, h, bb, g.ffn)?;
            x = tape.add(x, ffn)?;
            debug_assert_eq!(block.n_heads(), bb.heads.len());
        }
        Ok(x)
    }

    /// Forward pass on a throwaway tape; returns only the value.
    pub fn predict(
        &self,
        z: &Tensor<S>,
        t: usize,
        y: usize,
        gates: Option<&[(Tensor<S>, Tensor<S>)]>,
    ) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let gate_vars = gates.map(|g| constant_gates(&mut tape, g));
        let out = self.forward(&mut tape, &bound, zv, t, y, gate_vars.as_deref())?;
        Ok(tape.value(out).clone())
    }
}

/// Registers fixed per-block `(head gates, ffn gates)` tensors as constants.
pub fn constant_gates<S: Scalar>(
    tape: &mut Tape<S>,
    gates: &[(Tensor<S>, Tensor<S>)],
) -> Vec<BlockGates> {
    gates
        .iter()
        .map(|(h, f)| BlockGates {
            heads: Some(tape.constant(h.clone())),
            ffn: Some(tape.constant(f.clone())),
        })
        .collect()
}

/// Sinusoidal features of the step index, `[1, d]`.
pub fn sinusoidal_features<S: Scalar>(t: usize, d: usize) -> Tensor<S> {
    Tensor::from_fn([1, d], |i| {
        let k = (i / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * k / d as f64);
        let arg = t as f64 * freq;
        S::of(if i % 2 == 0 { arg.sin() } else { arg.cos() })
    })
}

fn layer_norm_affine<S: Scalar>(tape: &mut Tape<S>, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = tape.layer_norm(x)?;
    let n = tape.mul(n, gain)?;
    tape.add(n, bias)
}

/// `softmax(Q K^T / sqrt(d_k)) V` for one head, `[L, d_head]`.
pub fn attention_head<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    head: &BoundHead,
    d_head: usize,
) -> Result<Var> {
    let q = tape.matmul(x, head.wq)?;
    let k = tape.matmul(x, head.wk)?;
    let v = tape.matmul(x, head.wv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, S::one() / S::of(d_head as f64).sqrt())?;
    let probs = tape.softmax(scores)?;
    tape.matmul(probs, v)
}

/// `(g_1 attn_1 || ... || g_h attn_h) W_O`. Returns `None` for a block with
/// no heads, whose attention contributes nothing to the residual stream.
pub fn mha_masked<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    block: &BoundBlock,
    d_head: usize,
    gates: Option<Var>,
) -> Result<Option<Var>> {
    let h = block.heads.len();
    if let Some(g) = gates {
        if tape.value(g).numel() != h {
            return Err(Error::Shape {
                op: "mha_masked gates",
                lhs: tape.shape(g).to_vec(),
                rhs: vec![h],
            });
        }
    }
    let Some(wo) = block.wo.filter(|_| h > 0) else {
        return Ok(None);
    };
    let mut parts = Vec::with_capacity(h);
    for (i, head) in block.heads.iter().enumerate() {
        let a = attention_head(tape, x, head, d_head)?;
        let a = match gates {
            Some(g) => {
                let gi = tape.slice(g, i, 1)?;
                tape.mul(a, gi)?
            }
            None => a,
        };
        parts.push(a);
    }
    let cat = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts)?
    };
    Ok(Some(tape.matmul(cat, wo)?))
}

/// `(GELU(x W_1 + b_1) * g) W_2 + b_2`, gates broadcast over tokens.
pub fn ffn_masked<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    block: &BoundBlock,
    gates: Option<Var>,
) -> Result<Var> {
    let width = block.b1.map_or(0, |b1| tape.value(b1).numel());
    if let Some(g) = gates {
        if tape.value(g).numel() != width {
            return Err(Error::Shape {
                op: "ffn_masked gates",
                lhs: tape.shape(g).to_vec(),
                rhs: vec![width],
            });
        }
    }
    match (block.w1, block.b1, block.w2) {
        (Some(w1), Some(b1), Some(w2)) => {
            let hidden = tape.matmul(x, w1)?;
            let hidden = tape.add(hidden, b1)?;
            let hidden = tape.gelu(hidden)?;
            let hidden = match gates {
                Some(g) => tape.mul(hidden, g)?,
                None => hidden,
            };
            let out = tape.matmul(hidden, w2)?;
            tape.add(out, block.b2)
        }
        _ => {
            let zeros = tape.constant(Tensor::zeros(tape.shape(x).to_vec()));
            tape.add(zeros, block.b2)
        }
    }
}
