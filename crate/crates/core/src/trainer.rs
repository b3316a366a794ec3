//! End-to-end mask learning: the trajectory reconstruction loss, its
//! gradient by full-graph backprop or by time-step checkpointing, and the
//! Adam loop over the mask control variables.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::Denoiser;
use crate::diffusion::{denoise_step_on_tape, full_sample, NoiseSchedule, SamplerMode};
use crate::error::{Error, Result};
use crate::gates::{
    expected_gate, gate_values, hard_concrete_on_tape, l1_regularizer, sample_noise, split_gates,
    split_values, GateConfig, GateLayout, GateParams, UnitKind,
};
use crate::grad::{vjp_step, MemoryMeter, Tape};
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Engine {
    /// Whole trajectory on one tape.
    Naive,
    /// Latent snapshots forward, per-step recomputation backward.
    Checkpointed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneConfig<S> {
    /// Weight of `||lambda||_1` in the total loss.
    pub beta_reg: S,
    pub lr_attn: S,
    pub lr_ffn: S,
    pub steps: usize,
    pub batch_size: usize,
    pub weight_decay: S,
    pub engine: Engine,
    pub sampler: SamplerMode,
}

impl<S: Scalar> Default for PruneConfig<S> {
    fn default() -> Self {
        Self {
            beta_reg: S::of(0.5),
            lr_attn: S::of(0.15),
            lr_ffn: S::of(0.15),
            steps: 400,
            batch_size: 4,
            weight_decay: S::of(1e-2),
            engine: Engine::Checkpointed,
            sampler: SamplerMode::Deterministic,
        }
    }
}

impl<S: Scalar> PruneConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if self.lr_attn < S::zero() || self.lr_ffn < S::zero() {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One `(z_T, y)` pair and the noise policy of its trajectory.
#[derive(Clone, Debug)]
pub struct Trajectory<S> {
    pub z_t: Tensor<S>,
    pub y: usize,
    pub sampler: SamplerMode,
}

/// Loss value and `dL/dlambda` from one gradient evaluation.
#[derive(Clone, Debug)]
pub struct LossGradient<S> {
    /// Sum over the batch of `||F_base - F_masked||_2`.
    pub recon: S,
    /// `beta_reg * ||lambda||_1`.
    pub reg: S,
    pub total: S,
    pub grad: Tensor<S>,
    /// High-water mark of floats retained for the reverse pass.
    pub peak_floats: usize,
    /// Floats held in latent snapshots (zero for the naive engine).
    pub checkpoint_floats: usize,
}

/// Latent snapshots `z_{T-1}, ..., z_0` kept between the two checkpointed
/// phases. Values only; nothing here carries a graph.
#[derive(Clone, Debug, Default)]
pub struct CheckpointStore<S> {
    latents: Vec<Tensor<S>>,
}

impl<S: Scalar> CheckpointStore<S> {
    pub fn push(&mut self, z: Tensor<S>) {
        self.latents.push(z);
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    /// Snapshot of `z_t` for `t` in `0..T`.
    pub fn latent(&self, t: usize) -> Result<&Tensor<S>> {
        let n = self.latents.len();
        if t >= n {
            return Err(Error::Internal(format!("no checkpoint for z_{t} ({n} stored)")));
        }
        Ok(&self.latents[n - 1 - t])
    }

    pub fn bytes_per_snapshot(&self) -> Vec<usize> {
        self.latents
            .iter()
            .map(|z| z.numel() * std::mem::size_of::<S>())
            .collect()
    }

    pub fn floats(&self) -> usize {
        self.latents.iter().map(Tensor::numel).sum()
    }
}

/// Frozen base/gated model pair plus everything fixed while learning a mask.
#[derive(Clone, Debug)]
pub struct PruneProblem<'a, S> {
    pub base: &'a Denoiser<S>,
    pub gated: &'a Denoiser<S>,
    pub schedule: &'a NoiseSchedule<S>,
    pub gate_cfg: GateConfig<S>,
    pub layout: GateLayout,
    pub beta_reg: S,
}

impl<'a, S: Scalar> PruneProblem<'a, S> {
    pub fn new(
        base: &'a Denoiser<S>,
        gated: &'a Denoiser<S>,
        schedule: &'a NoiseSchedule<S>,
        gate_cfg: GateConfig<S>,
        beta_reg: S,
    ) -> Result<Self> {
        let layout = GateLayout::for_model(gated);
        if GateLayout::for_model(base) != layout || base.config.latent_shape() != gated.config.latent_shape() {
            return Err(Error::Config("base and gated models differ in architecture".into()));
        }
        if schedule.steps() > gated.config.steps {
            return Err(Error::Config(format!(
                "schedule has {} steps but the model embeds at most {}",
                schedule.steps(),
                gated.config.steps
            )));
        }
        gate_cfg.validate()?;
        Ok(Self {
            base,
            gated,
            schedule,
            gate_cfg,
            layout,
            beta_reg,
        })
    }

    fn check(&self, lambda: &Tensor<S>, noise: &Tensor<S>) -> Result<()> {
        if lambda.numel() != self.layout.total() || noise.shape() != lambda.shape() {
            return Err(Error::Shape {
                op: "mask control variables",
                lhs: lambda.shape().to_vec(),
                rhs: vec![self.layout.total()],
            });
        }
        Ok(())
    }

    /// `F_base(z_T, y)`: the unmasked trajectory's final latent.
    pub fn target(&self, item: &Trajectory<S>) -> Result<Tensor<S>> {
        full_sample(self.schedule, self.base, &item.z_t, item.y, None, item.sampler)
    }

    /// Value of the loss without any gradient bookkeeping.
    pub fn end_to_end_loss(
        &self,
        items: &[Trajectory<S>],
        lambda: &Tensor<S>,
        noise: &Tensor<S>,
    ) -> Result<(S, S, S)> {
        self.check(lambda, noise)?;
        let gates = split_values(&gate_values(lambda, noise, &self.gate_cfg)?, &self.layout);
        let mut recon = S::zero();
        for item in items {
            let target = self.target(item)?;
            let masked = full_sample(
                self.schedule,
                self.gated,
                &item.z_t,
                item.y,
                Some(&gates),
                item.sampler,
            )?;
            recon = recon + target.sub(&masked)?.norm_l2();
        }
        let reg = self.beta_reg * l1_regularizer(lambda);
        Ok((recon, reg, recon + reg))
    }

    pub fn gradient(
        &self,
        engine: Engine,
        items: &[Trajectory<S>],
        lambda: &Tensor<S>,
        noise: &Tensor<S>,
    ) -> Result<LossGradient<S>> {
        match engine {
            Engine::Naive => self.naive_backprop(items, lambda, noise),
            Engine::Checkpointed => self.checkpointed_backprop(items, lambda, noise),
        }
    }

    /// Records every step of every trajectory on one tape and runs a single
    /// reverse pass. Retained floats grow linearly with the step count.
    pub fn naive_backprop(
        &self,
        items: &[Trajectory<S>],
        lambda: &Tensor<S>,
        noise: &Tensor<S>,
    ) -> Result<LossGradient<S>> {
        self.check(lambda, noise)?;
        if items.is_empty() {
            return Err(Error::Contract("empty trajectory batch".into()));
        }
        let targets: Vec<Tensor<S>> = items.iter().map(|i| self.target(i)).collect::<Result<_>>()?;
        let meter = MemoryMeter::new();
        let mut tape = Tape::with_meter(meter.clone());
        let bound = self.gated.bind(&mut tape, false);
        let lam = tape.param(lambda.clone());
        let g = hard_concrete_on_tape(&mut tape, lam, noise, &self.gate_cfg)?;
        let gates = split_gates(&mut tape, g, &self.layout)?;
        let mut norms = Vec::with_capacity(items.len());
        for (item, target) in items.iter().zip(&targets) {
            let mut z = tape.constant(item.z_t.clone());
            for t in (1..=self.schedule.steps()).rev() {
                let eta = item.sampler.eta::<S>(t, item.z_t.shape());
                z = denoise_step_on_tape(
                    &mut tape,
                    self.schedule,
                    self.gated,
                    &bound,
                    z,
                    t,
                    item.y,
                    Some(&gates),
                    eta.as_ref(),
                )?;
            }
            let target = tape.constant(target.clone());
            let diff = tape.sub(target, z)?;
            norms.push(tape.l2_norm(diff)?);
        }
        let recon = if norms.len() == 1 {
            norms[0]
        } else {
            let stacked = tape.concat(&norms)?;
            tape.sum(stacked)?
        };
        let l1 = tape.l1_norm(lam)?;
        let reg = tape.scale(l1, self.beta_reg)?;
        let total = tape.add(recon, reg)?;
        let (recon_v, reg_v, total_v) = (
            tape.value(recon).item()?,
            tape.value(reg).item()?,
            tape.value(total).item()?,
        );
        let peak = tape.peak_float_count();
        let mut grads = tape.backward(total)?;
        Ok(LossGradient {
            recon: recon_v,
            reg: reg_v,
            total: total_v,
            grad: grads.take(lam)?,
            peak_floats: peak.max(meter.peak()),
            checkpoint_floats: 0,
        })
    }

    /// Time-step gradient checkpointing: a graph-free forward that keeps
    /// only the latent after each step, then a backward sweep that rebuilds
    /// one step at a time on a local tape and chains vector-Jacobian
    /// products from `z_0` back to `z_T`.
    pub fn checkpointed_backprop(
        &self,
        items: &[Trajectory<S>],
        lambda: &Tensor<S>,
        noise: &Tensor<S>,
    ) -> Result<LossGradient<S>> {
        self.check(lambda, noise)?;
        if items.is_empty() {
            return Err(Error::Contract("empty trajectory batch".into()));
        }
        let meter = MemoryMeter::new();
        let steps = self.schedule.steps();
        let gate_vals = split_values(&gate_values(lambda, noise, &self.gate_cfg)?, &self.layout);
        let mut grad = vec![S::zero(); lambda.numel()];
        let mut recon = S::zero();
        let mut checkpoint_floats = 0;
        for item in items {
            let target = self.target(item)?;
            let shape = item.z_t.shape().to_vec();

            let mut store = CheckpointStore::default();
            let mut z = item.z_t.clone();
            for t in (1..=steps).rev() {
                let eta = item.sampler.eta::<S>(t, &shape);
                z = {
                    let mut tape = Tape::with_meter(meter.clone());
                    let bound = self.gated.bind(&mut tape, false);
                    let gates = crate::denoiser::constant_gates(&mut tape, &gate_vals);
                    let zv = tape.constant(z);
                    let out = denoise_step_on_tape(
                        &mut tape,
                        self.schedule,
                        self.gated,
                        &bound,
                        zv,
                        t,
                        item.y,
                        Some(&gates),
                        eta.as_ref(),
                    )?;
                    tape.value(out).clone()
                };
                store.push(z.clone());
            }
            checkpoint_floats = checkpoint_floats.max(store.floats());

            let head = vjp_step(
                Some(&meter),
                &[store.latent(0)?.clone()],
                &[],
                &Tensor::scalar(S::one()),
                |tape, ins, _| {
                    let t = tape.constant(target.clone());
                    let d = tape.sub(t, ins[0])?;
                    tape.l2_norm(d)
                },
            )?;
            recon = recon + head.output.item()?;
            let mut cot = head.inputs.into_iter().next().expect("one input");

            // Step t maps z_t to z_{t-1}; its input z_t is a snapshot for
            // t < T and the initial noise for t = T.
            for t in 1..=steps {
                let z_in = if t == steps {
                    item.z_t.clone()
                } else {
                    store.latent(t)?.clone()
                };
                let eta = item.sampler.eta::<S>(t, &shape);
                let out = vjp_step(
                    Some(&meter),
                    &[z_in],
                    std::slice::from_ref(lambda),
                    &cot,
                    |tape, ins, ps| {
                        let bound = self.gated.bind(tape, false);
                        let g = hard_concrete_on_tape(tape, ps[0], noise, &self.gate_cfg)?;
                        let gates = split_gates(tape, g, &self.layout)?;
                        denoise_step_on_tape(
                            tape,
                            self.schedule,
                            self.gated,
                            &bound,
                            ins[0],
                            t,
                            item.y,
                            Some(&gates),
                            eta.as_ref(),
                        )
                    },
                )?;
                let mut ins = out.inputs.into_iter();
                cot = ins.next().expect("one input");
                for (acc, &d) in grad.iter_mut().zip(out.params[0].data()) {
                    *acc = *acc + d;
                }
            }
        }
        for (acc, &l) in grad.iter_mut().zip(lambda.data()) {
            *acc = *acc + self.beta_reg * sign(l);
        }
        let reg = self.beta_reg * l1_regularizer(lambda);
        Ok(LossGradient {
            recon,
            reg,
            total: recon + reg,
            grad: Tensor::new(lambda.shape(), grad)?,
            peak_floats: meter.peak(),
            checkpoint_floats,
        })
    }
}

fn sign<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        S::one()
    } else if x < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

/// Per-step record of a mask-learning run.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneStepRecord {
    pub step: usize,
    pub recon: f64,
    pub reg: f64,
    pub total: f64,
    /// Mean noise-free gate after the update.
    pub gate_mean: f64,
    /// Fraction of noise-free gates exactly 0 or 1 after the update.
    pub frac_saturated: f64,
    pub peak_floats: usize,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PruneRunReport {
    pub rows: Vec<PruneStepRecord>,
}

/// Learns mask control variables for `base` with its weights frozen.
///
/// Each step draws a batch of conditions from `conditions` and fresh
/// `z_T`, samples one gate realisation shared by the whole batch, and
/// applies Adam with `lr_attn` on head gates and `lr_ffn` on FFN gates.
pub fn learn_mask<S: Scalar>(
    base: &Denoiser<S>,
    schedule: &NoiseSchedule<S>,
    conditions: &[usize],
    cfg: &PruneConfig<S>,
    gate_cfg: &GateConfig<S>,
    seed: u64,
) -> Result<(GateParams<S>, PruneRunReport)> {
    cfg.validate()?;
    if conditions.is_empty() {
        return Err(Error::Contract("mask learning needs at least one condition".into()));
    }
    let problem = PruneProblem::new(base, base, schedule, *gate_cfg, cfg.beta_reg)?;
    let mut params = GateParams::init(problem.layout.clone());
    let lrs: Vec<S> = (0..problem.layout.total())
        .map(|i| match problem.layout.kind_of(i) {
            UnitKind::Head => cfg.lr_attn,
            UnitKind::Ffn => cfg.lr_ffn,
        })
        .collect();
    let mut adam = Adam::new(cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = PruneRunReport::default();
    let mut initial = None;
    let mut over = 0usize;
    for step in 0..cfg.steps {
        let started = Instant::now();
        let items: Vec<Trajectory<S>> = (0..cfg.batch_size)
            .map(|i| Trajectory {
                y: conditions[rng.random_range(0..conditions.len())],
                z_t: Tensor::randn(base.config.latent_shape().to_vec(), 1.0, &mut rng),
                sampler: cfg.sampler.for_trajectory((step * cfg.batch_size + i) as u64),
            })
            .collect();
        let noise = sample_noise(problem.layout.total(), gate_cfg, &mut rng);
        let lg = problem.gradient(cfg.engine, &items, &params.lambda, &noise)?;
        adam.update_with(vec![&mut params.lambda], &[lg.grad], |_, i| lrs[i])?;

        let total = lg.total.as_f64();
        // A zero starting loss (saturated gates, no regulariser) gives no scale.
        if initial.is_none() && total > 0.0 {
            initial = Some(total);
        }
        let init = initial.unwrap_or(0.0);
        over = if initial.is_some() && total > 10.0 * init { over + 1 } else { 0 };
        if over >= 20 || !total.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: total,
                initial: init,
            });
        }
        let expected: Vec<f64> = params
            .lambda
            .data()
            .iter()
            .map(|&l| expected_gate(l, gate_cfg).as_f64())
            .collect();
        let n = expected.len() as f64;
        report.rows.push(PruneStepRecord {
            step,
            recon: lg.recon.as_f64(),
            reg: lg.reg.as_f64(),
            total,
            gate_mean: expected.iter().sum::<f64>() / n,
            frac_saturated: expected.iter().filter(|&&g| g == 0.0 || g == 1.0).count() as f64 / n,
            peak_floats: lg.peak_floats,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((params, report))
}
