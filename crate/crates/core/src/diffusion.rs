//! Noise schedule, forward diffusion, the ancestral denoising step, full
//! sampling trajectories and the noise-prediction training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::denoiser::{constant_gates, BlockGates, BoundDenoiser, Denoiser};
use crate::error::{out_of_range, Error, Result};
use crate::grad::{Tape, Var};
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

/// Per-step constants, stored 0-based: entry `t - 1` belongs to step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<S> {
    pub betas: Vec<S>,
    pub alphas: Vec<S>,
    pub alpha_bars: Vec<S>,
    pub sigmas: Vec<S>,
}

impl<S: Scalar> NoiseSchedule<S> {
    /// Linear betas from 1e-4 to 0.02, `sigma_t = sqrt(beta_t)` and
    /// `sigma_1 = 0`.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(out_of_range("diffusion steps", 0, "[1, inf)"));
        }
        let betas: Vec<S> = (0..steps)
            .map(|i| {
                let frac = if steps == 1 {
                    0.0
                } else {
                    i as f64 / (steps - 1) as f64
                };
                S::of(BETA_START + frac * (BETA_END - BETA_START))
            })
            .collect();
        let alphas: Vec<S> = betas.iter().map(|&b| S::one() - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(S::one(), |acc, &a| {
                *acc = *acc * a;
                Some(*acc)
            })
            .collect();
        let sigmas = betas
            .iter()
            .enumerate()
            .map(|(i, &b)| if i == 0 { S::zero() } else { b.sqrt() })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(out_of_range("time step", t, format!("[1, {}]", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn alpha_bar(&self, t: usize) -> Result<S> {
        Ok(self.alpha_bars[self.idx(t)?])
    }

    /// `(1 / sqrt(alpha_t), (1 - alpha_t) / sqrt(1 - alpha_bar_t), sigma_t)`.
    pub fn step_coefficients(&self, t: usize) -> Result<(S, S, S)> {
        let i = self.idx(t)?;
        let a = self.alphas[i];
        let ab = self.alpha_bars[i];
        Ok((
            S::one() / a.sqrt(),
            (S::one() - a) / (S::one() - ab).sqrt(),
            self.sigmas[i],
        ))
    }

    /// `sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps`.
    pub fn forward_diffuse(&self, z0: &Tensor<S>, t: usize, eps: &Tensor<S>) -> Result<Tensor<S>> {
        let ab = self.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (S::one() - ab).sqrt());
        z0.zip_map(eps, "forward_diffuse", |z, e| a * z + b * e)
    }

    /// One ancestral step given the noise prediction `eps_hat`. `eta` is
    /// ignored when the effective sigma is zero.
    pub fn step_from_prediction(
        &self,
        z: &Tensor<S>,
        eps_hat: &Tensor<S>,
        t: usize,
        eta: Option<&Tensor<S>>,
    ) -> Result<Tensor<S>> {
        let (inv_sqrt_a, coef, sigma) = self.step_coefficients(t)?;
        let mean = z.zip_map(eps_hat, "denoise_step", |zi, ei| (zi - ei * coef) * inv_sqrt_a)?;
        match eta {
            Some(n) if sigma > S::zero() => mean.zip_map(n, "denoise_step noise", |m, e| m + e * sigma),
            _ => Ok(mean),
        }
    }
}

/// How the per-step noise of the sampler is produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SamplerMode {
    /// Every `sigma_t` is forced to zero.
    #[default]
    Deterministic,
    /// `eta_t` is a pure function of `(seed, t)`, so any two trajectories
    /// using the same seed see the same noise.
    StochasticShared { seed: u64 },
}

impl SamplerMode {
    pub fn eta<S: Scalar>(&self, t: usize, shape: &[usize]) -> Option<Tensor<S>> {
        match *self {
            Self::Deterministic => None,
            Self::StochasticShared { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64);
                Some(Tensor::randn(shape.to_vec(), 1.0, &mut rng))
            }
        }
    }

    /// The same policy with a seed specialised to one trajectory.
    pub fn for_trajectory(&self, id: u64) -> Self {
        match *self {
            Self::Deterministic => Self::Deterministic,
            Self::StochasticShared { seed } => Self::StochasticShared {
                seed: seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            },
        }
    }
}

/// Records one denoising step on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn denoise_step_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    schedule: &NoiseSchedule<S>,
    model: &Denoiser<S>,
    bound: &BoundDenoiser,
    z: Var,
    t: usize,
    y: usize,
    gates: Option<&[BlockGates]>,
    eta: Option<&Tensor<S>>,
) -> Result<Var> {
    let (inv_sqrt_a, coef, sigma) = schedule.step_coefficients(t)?;
    let eps_hat = model.forward(tape, bound, z, t, y, gates)?;
    let e = tape.scale(eps_hat, coef)?;
    let d = tape.sub(z, e)?;
    let mean = tape.scale(d, inv_sqrt_a)?;
    match eta {
        Some(n) if sigma > S::zero() => {
            let noise = tape.constant(n.scale(sigma));
            tape.add(mean, noise)
        }
        _ => Ok(mean),
    }
}

/// Value-level denoising step `z_t -> z_{t-1}`.
pub fn denoise_step<S: Scalar>(
    schedule: &NoiseSchedule<S>,
    model: &Denoiser<S>,
    z: &Tensor<S>,
    t: usize,
    y: usize,
    gates: Option<&[(Tensor<S>, Tensor<S>)]>,
    eta: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let zv = tape.constant(z.clone());
    let g = gates.map(|g| constant_gates(&mut tape, g));
    let out = denoise_step_on_tape(&mut tape, schedule, model, &bound, zv, t, y, g.as_deref(), eta)?;
    Ok(tape.value(out).clone())
}

/// Final latent of a sampling trajectory plus a checksum of the noise it used.
#[derive(Clone, Debug)]
pub struct SampleTrace<S> {
    pub z0: Tensor<S>,
    /// FNV-1a over the bit patterns of every `eta_t` actually added.
    pub eta_checksum: u64,
}

/// Runs `z_T -> z_0` from `t = T` down to `t = 1`.
pub fn full_sample<S: Scalar>(
    schedule: &NoiseSchedule<S>,
    model: &Denoiser<S>,
    z_t: &Tensor<S>,
    y: usize,
    gates: Option<&[(Tensor<S>, Tensor<S>)]>,
    mode: SamplerMode,
) -> Result<Tensor<S>> {
    full_sample_traced(schedule, model, z_t, y, gates, mode).map(|t| t.z0)
}

pub fn full_sample_traced<S: Scalar>(
    schedule: &NoiseSchedule<S>,
    model: &Denoiser<S>,
    z_t: &Tensor<S>,
    y: usize,
    gates: Option<&[(Tensor<S>, Tensor<S>)]>,
    mode: SamplerMode,
) -> Result<SampleTrace<S>> {
    let mut z = z_t.clone();
    let mut checksum = FNV_OFFSET;
    for t in (1..=schedule.steps()).rev() {
        let eta = mode.eta::<S>(t, z.shape());
        if let (Some(n), true) = (&eta, schedule.sigmas[t - 1] > S::zero()) {
            for x in n.data() {
                checksum = fnv1a(checksum, x.as_f64().to_bits());
            }
        }
        z = denoise_step(schedule, model, &z, t, y, gates, eta.as_ref())?;
    }
    Ok(SampleTrace {
        z0: z,
        eta_checksum: checksum,
    })
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

fn fnv1a(mut h: u64, word: u64) -> u64 {
    for b in word.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Class-conditional Gaussian token sequences: class `k` has a fixed mean
/// `m_k ~ N(0, mean_scale^2 I)` and samples `m_k + noise_std * N(0, I)`.
#[derive(Clone, Debug)]
pub struct SyntheticData<S> {
    pub means: Vec<Tensor<S>>,
    pub noise_std: f64,
}

impl<S: Scalar> SyntheticData<S> {
    pub fn new(n_conditions: usize, shape: [usize; 2], mean_scale: f64, noise_std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            means: (0..n_conditions)
                .map(|_| Tensor::randn(shape.to_vec(), mean_scale, &mut rng))
                .collect(),
            noise_std,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, y: usize, rng: &mut R) -> Tensor<S> {
        let m = &self.means[y];
        let std = self.noise_std;
        Tensor::from_fn(m.shape().to_vec(), |i| {
            let z: f64 = rng.sample(StandardNormal);
            m.data()[i] + S::of(std * z)
        })
    }

    /// `n` samples with uniformly drawn classes.
    pub fn batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<(Tensor<S>, usize)> {
        (0..n)
            .map(|_| {
                let y = rng.random_range(0..self.means.len());
                (self.sample(y, rng), y)
            })
            .collect()
    }
}

/// One optimisation step on the noise-prediction loss
/// `mean_b || eps - eps_theta(z_t, t, y) ||^2` with ungated forwards.
pub fn base_train_step<S: Scalar, R: Rng + ?Sized>(
    batch: &[(Tensor<S>, usize)],
    model: &mut Denoiser<S>,
    schedule: &NoiseSchedule<S>,
    optimizer: &mut Adam<S>,
    lr: S,
    rng: &mut R,
) -> Result<S> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let mut terms = Vec::with_capacity(batch.len());
    for (z0, y) in batch {
        let t = rng.random_range(1..=schedule.steps());
        let eps = Tensor::randn(z0.shape().to_vec(), 1.0, rng);
        let zt = tape.constant(schedule.forward_diffuse(z0, t, &eps)?);
        let pred = model.forward(&mut tape, &bound, zt, t, *y, None)?;
        let target = tape.constant(eps);
        let diff = tape.sub(target, pred)?;
        let sq = tape.mul(diff, diff)?;
        terms.push(tape.sum(sq)?);
    }
    let total = if terms.len() == 1 {
        terms[0]
    } else {
        let stacked = tape.concat(&terms)?;
        tape.sum(stacked)?
    };
    let loss = tape.scale(total, S::one() / S::of(batch.len() as f64))?;
    let value = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?;
    let g: Vec<Tensor<S>> = bound
        .all
        .iter()
        .map(|&v| grads.take(v))
        .collect::<Result<_>>()?;
    optimizer.update(model.tensors_mut(), &g, lr)?;
    Ok(value)
}

/// Noise-prediction loss on a fixed set of `(z_0, y, t, eps)` draws, without
/// any update.
pub fn noise_prediction_loss<S: Scalar>(
    model: &Denoiser<S>,
    schedule: &NoiseSchedule<S>,
    draws: &[(Tensor<S>, usize, usize, Tensor<S>)],
) -> Result<S> {
    if draws.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    let mut total = S::zero();
    for (z0, y, t, eps) in draws {
        let zt = schedule.forward_diffuse(z0, *t, eps)?;
        let pred = model.predict(&zt, *t, *y, None)?;
        total = total + eps.sub(&pred)?.sum_sq();
    }
    Ok(total / S::of(draws.len() as f64))
}

/// `n` held-out `(z_0, y, t, eps)` draws for [`noise_prediction_loss`].
pub fn evaluation_draws<S: Scalar, R: Rng + ?Sized>(
    data: &SyntheticData<S>,
    schedule: &NoiseSchedule<S>,
    n: usize,
    rng: &mut R,
) -> Vec<(Tensor<S>, usize, usize, Tensor<S>)> {
    data.batch(n, rng)
        .into_iter()
        .map(|(z0, y)| {
            let t = rng.random_range(1..=schedule.steps());
            let eps = Tensor::randn(z0.shape().to_vec(), 1.0, rng);
            (z0, y, t, eps)
        })
        .collect()
}

/// Pretraining loop; returns the per-step losses.
pub fn train_base<S: Scalar>(
    model: &mut Denoiser<S>,
    data: &SyntheticData<S>,
    schedule: &NoiseSchedule<S>,
    steps: usize,
    batch_size: usize,
    lr: S,
    seed: u64,
) -> Result<Vec<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(S::zero());
    (0..steps)
        .map(|_| {
            let batch = data.batch(batch_size, &mut rng);
            base_train_step(&batch, model, schedule, &mut opt, lr, &mut rng)
        })
        .collect()
}
