//! Hard-concrete gates over continuous mask control variables, the L0
//! complexity loss with its L1 surrogate, and thresholding to binary masks.

use rand::Rng;
use rand_distr::Open01;

use crate::denoiser::{BlockGates, Denoiser, DenoiserConfig};
use crate::error::{out_of_range, Error, Result};
use crate::grad::{sigmoid, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Initial value of every mask control variable.
pub const LAMBDA_INIT: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateConfig<S> {
    /// Temperature.
    pub alpha: S,
    /// Upper stretch bound, `> 1`.
    pub zeta: S,
    /// Lower stretch bound, `< 0`.
    pub gamma: S,
    /// Steepness offset inside the logistic noise; larger is closer to a step.
    pub delta: S,
    /// Coefficient on `log(-gamma / zeta)` inside the L0 loss.
    pub beta_stretch: S,
}

impl<S: Scalar> Default for GateConfig<S> {
    fn default() -> Self {
        Self {
            alpha: S::one(),
            zeta: S::of(1.1),
            gamma: S::of(-0.1),
            delta: S::of(0.5),
            beta_stretch: S::of(0.83),
        }
    }
}

impl<S: Scalar> GateConfig<S> {
    /// Constants used for the distribution plots: near-zero `delta`.
    pub fn plot_constants() -> Self {
        Self {
            delta: S::of(1e-8),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > S::zero()) {
            return Err(Error::Config("gate temperature alpha must be > 0".into()));
        }
        if !(self.zeta > S::one()) {
            return Err(Error::Config("gate zeta must be > 1".into()));
        }
        if !(self.gamma < S::zero()) {
            return Err(Error::Config("gate gamma must be < 0".into()));
        }
        if !(self.delta > S::zero()) {
            return Err(Error::Config("gate delta must be > 0".into()));
        }
        Ok(())
    }
}

/// `log(u + delta) - log(1 - u + delta)`.
pub fn logistic_noise<S: Scalar>(u: S, delta: S) -> S {
    (u + delta).ln() - (S::one() - u + delta).ln()
}

fn stretch_clamp<S: Scalar>(s: S, cfg: &GateConfig<S>) -> S {
    let stretched = s * (cfg.zeta - cfg.gamma) + cfg.gamma;
    stretched.max(S::zero()).min(S::one())
}

/// Hard-concrete sample for one unit given a uniform draw `u` in `(0, 1)`.
pub fn sample_gate<S: Scalar>(lambda: S, u: S, cfg: &GateConfig<S>) -> S {
    let pre = (lambda + logistic_noise(u, cfg.delta)) * (S::one() / cfg.alpha);
    stretch_clamp(sigmoid(pre), cfg)
}

/// The noise-free gate, `sample_gate` at `u = 0.5`.
pub fn expected_gate<S: Scalar>(lambda: S, cfg: &GateConfig<S>) -> S {
    sample_gate(lambda, S::of(0.5), cfg)
}

/// Fresh logistic noise, one entry per gate.
pub fn sample_noise<S: Scalar, R: Rng + ?Sized>(n: usize, cfg: &GateConfig<S>, rng: &mut R) -> Tensor<S> {
    Tensor::from_fn([n], |_| {
        let u: f64 = rng.sample(Open01);
        logistic_noise(S::of(u), cfg.delta)
    })
}

/// Noise that makes every gate equal its [`expected_gate`].
pub fn expected_noise<S: Scalar>(n: usize) -> Tensor<S> {
    Tensor::zeros([n])
}

/// Gate values for fixed noise, computed with the same arithmetic as
/// [`hard_concrete_on_tape`].
pub fn gate_values<S: Scalar>(lambda: &Tensor<S>, noise: &Tensor<S>, cfg: &GateConfig<S>) -> Result<Tensor<S>> {
    let inv_alpha = S::one() / cfg.alpha;
    lambda.zip_map(noise, "gate_values", |l, n| stretch_clamp(sigmoid((l + n) * inv_alpha), cfg))
}

/// Records the hard-concrete transform of `lambda` with fixed `noise`.
pub fn hard_concrete_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    lambda: Var,
    noise: &Tensor<S>,
    cfg: &GateConfig<S>,
) -> Result<Var> {
    let n = tape.constant(noise.clone());
    let x = tape.add(lambda, n)?;
    let x = tape.scale(x, S::one() / cfg.alpha)?;
    let s = tape.sigmoid(x)?;
    let s = tape.scale(s, cfg.zeta - cfg.gamma)?;
    let s = tape.shift(s, cfg.gamma)?;
    tape.clamp01(s)
}

/// `sum_j sigmoid(log lambda_j - beta_stretch * log(-gamma / zeta))`.
pub fn l0_loss<S: Scalar>(lambda: &Tensor<S>, cfg: &GateConfig<S>) -> Result<S> {
    let shift = cfg.beta_stretch * (-cfg.gamma / cfg.zeta).ln();
    lambda
        .data()
        .iter()
        .map(|&l| {
            if l <= S::zero() {
                Err(Error::Domain(format!("l0_loss needs lambda > 0, got {l}")))
            } else {
                Ok(sigmoid(l.ln() - shift))
            }
        })
        .sum()
}

/// `sum_j |lambda_j|`.
pub fn l1_regularizer<S: Scalar>(lambda: &Tensor<S>) -> S {
    lambda.data().iter().map(|x| x.abs()).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnitKind {
    Head,
    Ffn,
}

/// A contiguous run of gates covering one kind of unit in one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateGroup {
    pub block: usize,
    pub kind: UnitKind,
    pub offset: usize,
    pub len: usize,
}

/// Placement of every prunable unit in the flat gate vector: for each block,
/// its heads followed by its FFN neurons.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateLayout {
    groups: Vec<GateGroup>,
    total: usize,
}

impl GateLayout {
    pub fn new(units_per_block: &[(usize, usize)]) -> Self {
        let mut groups = Vec::new();
        let mut offset = 0;
        for (block, &(heads, ffn)) in units_per_block.iter().enumerate() {
            for (kind, len) in [(UnitKind::Head, heads), (UnitKind::Ffn, ffn)] {
                groups.push(GateGroup {
                    block,
                    kind,
                    offset,
                    len,
                });
                offset += len;
            }
        }
        Self {
            groups,
            total: offset,
        }
    }

    pub fn for_config(cfg: &DenoiserConfig) -> Self {
        Self::new(&vec![(cfg.n_heads, cfg.d_ff); cfg.n_blocks])
    }

    pub fn for_model<S: Scalar>(model: &Denoiser<S>) -> Self {
        let units: Vec<_> = model.blocks.iter().map(|b| (b.n_heads(), b.d_ff())).collect();
        Self::new(&units)
    }

    pub fn groups(&self) -> &[GateGroup] {
        &self.groups
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn n_blocks(&self) -> usize {
        self.groups.len() / 2
    }

    pub fn group(&self, block: usize, kind: UnitKind) -> &GateGroup {
        let i = 2 * block + usize::from(kind == UnitKind::Ffn);
        &self.groups[i]
    }

    pub fn kind_of(&self, index: usize) -> UnitKind {
        self.groups
            .iter()
            .find(|g| index >= g.offset && index < g.offset + g.len)
            .map(|g| g.kind)
            .expect("index inside the layout")
    }
}

/// Continuous mask control variables with their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams<S> {
    pub layout: GateLayout,
    pub lambda: Tensor<S>,
}

impl<S: Scalar> GateParams<S> {
    pub fn init(layout: GateLayout) -> Self {
        Self::filled(layout, S::of(LAMBDA_INIT))
    }

    pub fn filled(layout: GateLayout, value: S) -> Self {
        let lambda = Tensor::full([layout.total().max(1)], value);
        Self { layout, lambda }
    }

    pub fn from_tensor(layout: GateLayout, lambda: Tensor<S>) -> Result<Self> {
        if lambda.numel() != layout.total() {
            return Err(Error::Shape {
                op: "gate params",
                lhs: lambda.shape().to_vec(),
                rhs: vec![layout.total()],
            });
        }
        Ok(Self { layout, lambda })
    }

    /// Per-block `(head gates, ffn gates)` from noise-free gates.
    pub fn expected_gates(&self, cfg: &GateConfig<S>) -> Vec<(Tensor<S>, Tensor<S>)> {
        let g = self.lambda.map(|l| expected_gate(l, cfg));
        split_values(&g, &self.layout)
    }
}

/// Splits a flat per-unit tensor into per-block `(heads, ffn)` tensors.
pub fn split_values<S: Scalar>(flat: &Tensor<S>, layout: &GateLayout) -> Vec<(Tensor<S>, Tensor<S>)> {
    let part = |g: &GateGroup| {
        Tensor::vector(flat.data()[g.offset..g.offset + g.len].to_vec())
    };
    (0..layout.n_blocks())
        .map(|b| {
            (
                part(layout.group(b, UnitKind::Head)),
                part(layout.group(b, UnitKind::Ffn)),
            )
        })
        .collect()
}

/// Slices a flat gate node into per-block [`BlockGates`].
pub fn split_gates<S: Scalar>(tape: &mut Tape<S>, gates: Var, layout: &GateLayout) -> Result<Vec<BlockGates>> {
    if tape.value(gates).numel() != layout.total() {
        return Err(Error::Shape {
            op: "split_gates",
            lhs: tape.shape(gates).to_vec(),
            rhs: vec![layout.total()],
        });
    }
    (0..layout.n_blocks())
        .map(|b| {
            let h = layout.group(b, UnitKind::Head);
            let f = layout.group(b, UnitKind::Ffn);
            Ok(BlockGates {
                heads: (h.len > 0).then(|| tape.slice(gates, h.offset, h.len)).transpose()?,
                ffn: (f.len > 0).then(|| tape.slice(gates, f.offset, f.len)).transpose()?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdMode {
    /// One threshold over every gate of every block.
    Global,
    /// A separate threshold per block and unit kind.
    Local,
}

/// Binary keep/prune decision per unit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub layout: GateLayout,
    /// `true` keeps the unit.
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn ones(layout: GateLayout) -> Self {
        let bits = vec![true; layout.total()];
        Self { layout, bits }
    }

    pub fn achieved_sparsity(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.bits.iter().filter(|&&b| !b).count() as f64 / self.bits.len() as f64
    }

    pub fn group_bits(&self, block: usize, kind: UnitKind) -> &[bool] {
        let g = self.layout.group(block, kind);
        &self.bits[g.offset..g.offset + g.len]
    }

    /// The mask as 0/1 gate tensors for a gated forward.
    pub fn to_gates<S: Scalar>(&self) -> Vec<(Tensor<S>, Tensor<S>)> {
        let flat = Tensor::from_fn([self.bits.len().max(1)], |i| {
            if self.bits.get(i).copied().unwrap_or(true) {
                S::one()
            } else {
                S::zero()
            }
        });
        split_values(&flat, &self.layout)
    }
}

/// Prunes the `floor(n * target_sparsity)` lowest-`lambda` units of each
/// pool (the whole model for [`ThresholdMode::Global`], each block/kind
/// group for [`ThresholdMode::Local`]). Ties go to the lower unit index.
pub fn threshold_mask<S: Scalar>(
    lambda: &Tensor<S>,
    layout: &GateLayout,
    target_sparsity: f64,
    mode: ThresholdMode,
) -> Result<BinaryMask> {
    if !(0.0..1.0).contains(&target_sparsity) {
        return Err(out_of_range("target sparsity", target_sparsity, "[0, 1)"));
    }
    if lambda.numel() != layout.total() {
        return Err(Error::Shape {
            op: "threshold_mask",
            lhs: lambda.shape().to_vec(),
            rhs: vec![layout.total()],
        });
    }
    let pools: Vec<Vec<usize>> = match mode {
        ThresholdMode::Global => vec![(0..layout.total()).collect()],
        ThresholdMode::Local => layout
            .groups()
            .iter()
            .map(|g| (g.offset..g.offset + g.len).collect())
            .collect(),
    };
    let l = lambda.data();
    let mut bits = vec![true; layout.total()];
    for mut pool in pools {
        let k = (pool.len() as f64 * target_sparsity).floor() as usize;
        pool.sort_by(|&a, &b| l[a].partial_cmp(&l[b]).expect("finite lambda").then(a.cmp(&b)));
        for &i in &pool[..k] {
            bits[i] = false;
        }
    }
    Ok(BinaryMask {
        layout: layout.clone(),
        bits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_zero_delta() -> GateConfig<f64> {
        GateConfig {
            delta: 0.0_f64.max(f64::MIN_POSITIVE),
            ..GateConfig::default()
        }
    }

    #[test]
    fn saturates_at_both_ends() {
        let cfg = GateConfig::<f64>::default();
        for u in [1e-6, 0.3, 0.5, 0.9, 1.0 - 1e-6] {
            assert_eq!(sample_gate(1e3, u, &cfg), 1.0);
            assert_eq!(sample_gate(-1e3, u, &cfg), 0.0);
        }
    }

    #[test]
    fn symmetry_point_gives_one_half() {
        let g = sample_gate(0.0, 0.5, &cfg_zero_delta());
        assert!((g - 0.5).abs() < 1e-15);
        assert!((expected_gate(0.0, &GateConfig::<f64>::default()) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn expected_gate_at_init_is_one() {
        // sigmoid(5) = 0.99331, stretched to 1.09197, clamped to 1.
        let cfg = GateConfig::<f64>::default();
        let s = sigmoid(5.0_f64);
        assert!((s - 0.993_307_149_075_715_2).abs() < 1e-15);
        assert!((s * 1.2 - 0.1 - 1.091_968_578_890_858).abs() < 1e-12);
        assert_eq!(expected_gate(LAMBDA_INIT, &cfg), 1.0);
    }

    #[test]
    fn l0_loss_closed_form() {
        // sigmoid(0.83 * ln 11) = sigmoid(1.99025...) = 0.87977...
        let cfg = GateConfig::<f64>::default();
        let per = 1.0 / (1.0 + (-(0.83 * 11f64.ln())).exp());
        assert!((per - 0.879_770).abs() < 1e-6);
        let v = l0_loss(&Tensor::vector(vec![1.0; 4]), &cfg).unwrap();
        assert!((v - 4.0 * per).abs() < 1e-12);
        let tiny = l0_loss(&Tensor::vector(vec![1e-300]), &cfg).unwrap();
        assert!(tiny < 1e-290);
        assert!(matches!(
            l0_loss(&Tensor::vector(vec![1.0, 0.0]), &cfg),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn l1_values() {
        assert_eq!(l1_regularizer(&Tensor::vector(vec![1.0, -2.0, 3.0])), 6.0);
        assert_eq!(l1_regularizer(&Tensor::<f64>::zeros([3])), 0.0);
    }

    #[test]
    fn threshold_examples() {
        let layout = GateLayout::new(&[(2, 2)]);
        let lambda = Tensor::vector(vec![0.1, 0.9, 0.5, 0.7]);
        let g = threshold_mask(&lambda, &layout, 0.5, ThresholdMode::Global).unwrap();
        assert_eq!(g.bits, vec![false, true, false, true]);
        let l = threshold_mask(&lambda, &layout, 0.5, ThresholdMode::Local).unwrap();
        assert_eq!(l.group_bits(0, UnitKind::Head), &[false, true]);
        assert_eq!(l.group_bits(0, UnitKind::Ffn), &[false, true]);
        let none = threshold_mask(&lambda, &layout, 0.0, ThresholdMode::Global).unwrap();
        assert!(none.bits.iter().all(|&b| b));
        assert!(threshold_mask(&lambda, &layout, 1.0, ThresholdMode::Global).is_err());
        assert!(threshold_mask(&lambda, &layout, -0.1, ThresholdMode::Global).is_err());
    }

    #[test]
    fn threshold_ties_prune_lower_index_first() {
        let layout = GateLayout::new(&[(0, 4)]);
        let lambda = Tensor::vector(vec![1.0, 1.0, 1.0, 1.0]);
        let m = threshold_mask(&lambda, &layout, 0.5, ThresholdMode::Global).unwrap();
        assert_eq!(m.bits, vec![false, false, true, true]);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = GateConfig::<f64>::default();
        c.zeta = 1.0;
        assert!(c.validate().is_err());
        let mut c = GateConfig::<f64>::default();
        c.gamma = 0.0;
        assert!(c.validate().is_err());
        assert!(GateConfig::<f64>::default().validate().is_ok());
    }
}
