//! Physical removal of masked units, plus parameter and FLOP accounting.

use crate::denoiser::{Block, Denoiser, FfnWeights};
use crate::error::{Error, Result};
use crate::gates::{BinaryMask, GateLayout, UnitKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Copy of `model` without the units `mask` prunes. External input and
/// output shapes are unchanged. Returns one warning per block that lost
/// all of its heads or all of its FFN neurons.
pub fn compact_model<S: Scalar>(model: &Denoiser<S>, mask: &BinaryMask) -> Result<(Denoiser<S>, Vec<String>)> {
    if mask.layout != GateLayout::for_model(model) {
        return Err(Error::Contract("mask layout does not match the model".into()));
    }
    let dh = model.config.d_head();
    let mut warnings = Vec::new();
    let mut blocks = Vec::with_capacity(model.blocks.len());
    for (b, block) in model.blocks.iter().enumerate() {
        let keep_heads: Vec<usize> = indices(mask.group_bits(b, UnitKind::Head));
        let keep_ffn: Vec<usize> = indices(mask.group_bits(b, UnitKind::Ffn));
        let heads = keep_heads.iter().map(|&i| block.heads[i].clone()).collect();
        let wo = match (&block.wo, keep_heads.is_empty()) {
            (Some(wo), false) => {
                let rows: Vec<usize> = keep_heads.iter().flat_map(|&i| i * dh..(i + 1) * dh).collect();
                Some(select_rows(wo, &rows)?)
            }
            _ => None,
        };
        if keep_heads.is_empty() && block.n_heads() > 0 {
            warnings.push(format!("block {b}: every attention head pruned"));
        }
        let ffn = match (&block.ffn, keep_ffn.is_empty()) {
            (Some(f), false) => Some(FfnWeights {
                w1: select_cols(&f.w1, &keep_ffn)?,
                b1: Tensor::vector(keep_ffn.iter().map(|&j| f.b1.data()[j]).collect::<Vec<_>>()),
                w2: select_rows(&f.w2, &keep_ffn)?,
            }),
            _ => None,
        };
        if keep_ffn.is_empty() && block.d_ff() > 0 {
            warnings.push(format!("block {b}: every FFN neuron pruned"));
        }
        blocks.push(Block {
            heads,
            wo,
            ffn,
            b2: block.b2.clone(),
            ln1_gain: block.ln1_gain.clone(),
            ln1_bias: block.ln1_bias.clone(),
            ln2_gain: block.ln2_gain.clone(),
            ln2_bias: block.ln2_bias.clone(),
        });
    }
    for w in &warnings {
        log::warn!("{w}; the block keeps only its residual path");
    }
    let compacted = Denoiser {
        config: model.config,
        blocks,
        cond_table: model.cond_table.clone(),
        time_w: model.time_w.clone(),
        time_b: model.time_b.clone(),
    };
    Ok((compacted, warnings))
}

fn indices(bits: &[bool]) -> Vec<usize> {
    bits.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect()
}

fn select_rows<S: Scalar>(m: &Tensor<S>, rows: &[usize]) -> Result<Tensor<S>> {
    let cols = m.last_dim();
    let data: Vec<S> = rows.iter().flat_map(|&r| m.row(r).iter().copied()).collect();
    Tensor::new([rows.len(), cols], data)
}

fn select_cols<S: Scalar>(m: &Tensor<S>, cols: &[usize]) -> Result<Tensor<S>> {
    let (n, c) = (m.shape()[0], m.last_dim());
    let data: Vec<S> = (0..n)
        .flat_map(|r| cols.iter().map(move |&j| r * c + j))
        .map(|i| m.data()[i])
        .collect();
    Tensor::new([n, cols.len()], data)
}

/// Number of stored floats across `tensors`.
pub fn count_tensor_params<'a, S: Scalar>(tensors: impl IntoIterator<Item = &'a Tensor<S>>) -> usize {
    tensors.into_iter().map(Tensor::numel).sum()
}

pub fn count_params<S: Scalar>(model: &Denoiser<S>) -> usize {
    count_tensor_params(model.named_tensors().into_iter().map(|(_, t)| t))
}

/// FLOPs of `T` denoising steps, split by where they are spent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopBreakdown {
    pub embedding: u64,
    pub attention: u64,
    pub ffn: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.embedding + self.attention + self.ffn
    }
}

/// Flops charged per softmax or GELU element.
pub const NONLINEAR_FLOPS: u64 = 5;

pub fn flop_breakdown<S: Scalar>(model: &Denoiser<S>, steps: usize) -> FlopBreakdown {
    let mm = |a: usize, b: usize, c: usize| 2 * (a * b * c) as u64;
    let l = model.config.seq_len;
    let d = model.config.d_model;
    let dh = model.config.d_head();
    let mut per = FlopBreakdown {
        embedding: mm(1, d, d),
        ..FlopBreakdown::default()
    };
    for block in &model.blocks {
        let h = block.n_heads();
        if h > 0 {
            let head = 3 * mm(l, d, dh) + mm(l, dh, l) + NONLINEAR_FLOPS * (l * l) as u64 + mm(l, l, dh);
            per.attention += h as u64 * head + mm(l, h * dh, d);
        }
        let f = block.d_ff();
        if f > 0 {
            per.ffn += mm(l, d, f) + NONLINEAR_FLOPS * (l * f) as u64 + mm(l, f, d);
        }
    }
    let t = steps as u64;
    FlopBreakdown {
        embedding: per.embedding * t,
        attention: per.attention * t,
        ffn: per.ffn * t,
    }
}

pub fn estimate_flops<S: Scalar>(model: &Denoiser<S>, steps: usize) -> u64 {
    flop_breakdown(model, steps).total()
}
