//! The runs behind each CLI command, as library functions returning rows.

use std::time::Instant;

use anyhow::{bail, Context, Result};
use ecoprune_core::compactor::{compact_model, count_params, estimate_flops};
use ecoprune_core::denoiser::Denoiser;
use ecoprune_core::diffusion::{self, full_sample, NoiseSchedule, SamplerMode, SyntheticData};
use ecoprune_core::gates::{
    expected_noise, sample_gate, threshold_mask, BinaryMask, GateConfig, GateLayout, GateParams, ThresholdMode,
};
use ecoprune_core::trainer::{self, Engine, PruneProblem, PruneRunReport, Trajectory};
use ecoprune_core::Tensor;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::report::{num, Table};

/// Independent seeds for each random consumer of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
    pub train: u64,
    pub mask: u64,
    pub eval: u64,
    pub gates: u64,
}

impl Seeds {
    pub fn from_run(seed: u64) -> Self {
        let next = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stream);
            r.next_u64()
        };
        Self {
            model: next(1),
            data: next(2),
            train: next(3),
            mask: next(4),
            eval: next(5),
            gates: next(6),
        }
    }
}

pub fn schedule(steps: usize) -> Result<NoiseSchedule<f64>> {
    Ok(NoiseSchedule::linear(steps)?)
}

pub fn dataset(cfg: &RunConfig) -> SyntheticData<f64> {
    SyntheticData::new(
        cfg.model.n_conditions,
        cfg.model.latent_shape(),
        cfg.run.data_mean_scale,
        cfg.run.data_noise_std,
        Seeds::from_run(cfg.run.seed).data,
    )
}

/// Fresh model trained on the synthetic data; returns it with per-step losses.
pub fn train_base(cfg: &RunConfig) -> Result<(Denoiser<f64>, Vec<f64>)> {
    let seeds = Seeds::from_run(cfg.run.seed);
    let mut model = Denoiser::init(cfg.model, &mut ChaCha8Rng::seed_from_u64(seeds.model))?;
    let losses = diffusion::train_base(
        &mut model,
        &dataset(cfg),
        &schedule(cfg.model.steps)?,
        cfg.run.base_steps,
        cfg.run.base_batch_size,
        cfg.run.base_lr,
        seeds.train,
    )?;
    Ok((model, losses))
}

pub fn train_loss_table(losses: &[f64]) -> Table {
    let mut t = Table::new(["step", "loss"]);
    for (i, l) in losses.iter().enumerate() {
        t.push(vec![i.to_string(), num(*l)]);
    }
    t
}

pub fn learn_mask(cfg: &RunConfig, base: &Denoiser<f64>) -> Result<(GateParams<f64>, PruneRunReport)> {
    Ok(trainer::learn_mask(
        base,
        &schedule(cfg.mask_steps())?,
        &cfg.mask_conditions(),
        &cfg.prune,
        &cfg.gates,
        Seeds::from_run(cfg.run.seed).mask,
    )?)
}

pub fn prune_report_table(report: &PruneRunReport, timing: bool) -> Table {
    let mut header = vec!["step", "recon", "reg", "total", "gate_mean", "frac_saturated", "peak_floats"];
    if timing {
        header.push("wall_ms");
    }
    let mut t = Table::new(header);
    for r in &report.rows {
        let mut row = vec![
            r.step.to_string(),
            num(r.recon),
            num(r.reg),
            num(r.total),
            num(r.gate_mean),
            num(r.frac_saturated),
            r.peak_floats.to_string(),
        ];
        if timing {
            row.push(num(r.wall_ms));
        }
        t.push(row);
    }
    t
}

/// Thresholds `lambda` and excises the pruned units.
pub fn prune(
    base: &Denoiser<f64>,
    lambda: &Tensor<f64>,
    sparsity: f64,
    mode: ThresholdMode,
) -> Result<(Denoiser<f64>, BinaryMask)> {
    let mask = threshold_mask(lambda, &GateLayout::for_model(base), sparsity, mode)?;
    let (pruned, _) = compact_model(base, &mask)?;
    Ok((pruned, mask))
}

/// Mask pruning the same number of units per pool as [`threshold_mask`],
/// with the units chosen uniformly at random.
pub fn random_mask(layout: &GateLayout, sparsity: f64, mode: ThresholdMode, seed: u64) -> Result<BinaryMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = Tensor::from_fn([layout.total()], |_| rng.random::<f64>());
    Ok(threshold_mask(&scores, layout, sparsity, mode)?)
}

/// Paired `z_T` for condition `y`: the same draws for every model compared.
fn paired_noise(seed: u64, y: usize, n: usize, shape: [usize; 2]) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(y as u64);
    (0..n).map(|_| Tensor::randn(shape.to_vec(), 1.0, &mut rng)).collect()
}

/// Final latents of `n` deterministic trajectories per condition.
pub fn final_latents(
    model: &Denoiser<f64>,
    sched: &NoiseSchedule<f64>,
    y: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<Tensor<f64>>> {
    paired_noise(seed, y, n, model.config.latent_shape())
        .iter()
        .map(|z| Ok(full_sample(sched, model, z, y, None, SamplerMode::Deterministic)?))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub condition: usize,
    pub mse: f64,
    pub moment_distance: f64,
    pub params_base: usize,
    pub params_pruned: usize,
    pub flops_base: u64,
    pub flops_pruned: u64,
}

/// Paired comparison of `pruned` against `base`, one row per condition.
pub fn evaluate(
    base: &Denoiser<f64>,
    pruned: &Denoiser<f64>,
    steps: usize,
    conditions: &[usize],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    if let Some(&y) = conditions.iter().find(|&&y| y >= base.config.n_conditions) {
        bail!("condition {y} out of range [0, {})", base.config.n_conditions);
    }
    if base.config.latent_shape() != pruned.config.latent_shape() {
        bail!("models disagree on the latent shape");
    }
    let sched = schedule(steps)?;
    let (params_base, params_pruned) = (count_params(base), count_params(pruned));
    let (flops_base, flops_pruned) = (estimate_flops(base, steps), estimate_flops(pruned, steps));
    conditions
        .par_iter()
        .map(|&y| {
            let a = final_latents(base, &sched, y, n_samples, seed)?;
            let b = final_latents(pruned, &sched, y, n_samples, seed)?;
            let mse = a
                .iter()
                .zip(&b)
                .map(|(x, z)| Ok(x.sub(z)?.sum_sq() / x.numel() as f64))
                .sum::<Result<f64>>()?
                / n_samples as f64;
            Ok(EvalRow {
                condition: y,
                mse,
                moment_distance: moment_distance(&a, &b),
                params_base,
                params_pruned,
                flops_base,
                flops_pruned,
            })
        })
        .collect()
}

/// `||mu_a - mu_b||_2 + ||Sigma_a - Sigma_b||_F` over flattened samples,
/// with population (`1/n`) covariances.
pub fn moment_distance(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> f64 {
    let (mu_a, cov_a) = moments(a);
    let (mu_b, cov_b) = moments(b);
    let dm = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let dc = cov_a.iter().zip(&cov_b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    dm + dc
}

fn moments(xs: &[Tensor<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = xs.first().map_or(0, Tensor::numel);
    let n = xs.len() as f64;
    let mut mu = vec![0.0; d];
    for x in xs {
        for (m, v) in mu.iter_mut().zip(x.data()) {
            *m += v / n;
        }
    }
    let mut cov = vec![0.0; d * d];
    for x in xs {
        let c: Vec<f64> = x.data().iter().zip(&mu).map(|(v, m)| v - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += c[i] * c[j] / n;
            }
        }
    }
    (mu, cov)
}

pub fn eval_table(rows: &[EvalRow]) -> Table {
    let mut t = Table::new([
        "condition",
        "mse",
        "moment_distance",
        "params_base",
        "params_pruned",
        "flops_base",
        "flops_pruned",
    ]);
    for r in rows {
        t.push(vec![
            r.condition.to_string(),
            num(r.mse),
            num(r.moment_distance),
            r.params_base.to_string(),
            r.params_pruned.to_string(),
            r.flops_base.to_string(),
            r.flops_pruned.to_string(),
        ]);
    }
    t
}

/// Final latents under the configured sampler, `n` per condition.
pub fn sample_table(cfg: &RunConfig, model: &Denoiser<f64>, conditions: &[usize], n: usize, seed: u64) -> Result<Table> {
    let sched = schedule(cfg.model.steps)?;
    let dim = model.config.seq_len * model.config.d_model;
    let mut header = vec!["condition".to_string(), "sample".to_string()];
    header.extend((0..dim).map(|i| format!("z{i}")));
    let mut t = Table::new(header);
    for &y in conditions {
        if y >= model.config.n_conditions {
            bail!("condition {y} out of range [0, {})", model.config.n_conditions);
        }
        for (i, z) in paired_noise(seed, y, n, model.config.latent_shape()).iter().enumerate() {
            let mode = cfg.sampler.for_trajectory((y * n + i) as u64);
            let z0 = full_sample(&sched, model, z, y, None, mode)?;
            let mut row = vec![y.to_string(), i.to_string()];
            row.extend(z0.data().iter().map(|v| num(*v)));
            t.push(row);
        }
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileRow {
    pub steps: usize,
    pub engine: Engine,
    pub peak_floats: usize,
    pub checkpoint_floats: usize,
    /// Median wall time of one gradient evaluation.
    pub wall_ms: f64,
}

/// One gradient evaluation per engine and step count, repeated `repeats`
/// times for the timing median. Memory figures do not vary across repeats.
pub fn profile(cfg: &RunConfig, steps: &[usize], repeats: usize) -> Result<Vec<ProfileRow>> {
    let seeds = Seeds::from_run(cfg.run.seed);
    let max_t = steps.iter().copied().max().context("no step counts to profile")?;
    let mut model_cfg = cfg.model;
    model_cfg.steps = model_cfg.steps.max(max_t);
    let model = Denoiser::init(model_cfg, &mut ChaCha8Rng::seed_from_u64(seeds.model))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.eval);
    let items: Vec<Trajectory<f64>> = (0..cfg.prune.batch_size)
        .map(|i| Trajectory {
            y: i % model_cfg.n_conditions,
            z_t: Tensor::randn(model_cfg.latent_shape().to_vec(), 1.0, &mut rng),
            sampler: cfg.sampler.for_trajectory(i as u64),
        })
        .collect();
    let layout = GateLayout::for_model(&model);
    let lambda = Tensor::from_fn([layout.total()], |_| rng.random_range(-1.5..1.5));
    let noise = expected_noise(layout.total());
    let mut rows = Vec::new();
    for &t in steps {
        let sched = schedule(t)?;
        let problem = PruneProblem::new(&model, &model, &sched, cfg.gates, cfg.prune.beta_reg)?;
        for engine in [Engine::Naive, Engine::Checkpointed] {
            let mut times = Vec::with_capacity(repeats);
            let mut last = None;
            for _ in 0..repeats.max(1) {
                let start = Instant::now();
                let lg = problem.gradient(engine, &items, &lambda, &noise)?;
                times.push(start.elapsed().as_secs_f64() * 1e3);
                last = Some(lg);
            }
            let lg = last.expect("at least one repeat");
            rows.push(ProfileRow {
                steps: t,
                engine,
                peak_floats: lg.peak_floats,
                checkpoint_floats: lg.checkpoint_floats,
                wall_ms: median(&mut times),
            });
        }
    }
    Ok(rows)
}

pub fn profile_table(rows: &[ProfileRow], timing: bool) -> Table {
    let mut header = vec!["steps", "engine", "peak_floats", "checkpoint_floats"];
    if timing {
        header.push("wall_ms");
    }
    let mut t = Table::new(header);
    for r in rows {
        let mut row = vec![
            r.steps.to_string(),
            engine_name(r.engine).to_string(),
            r.peak_floats.to_string(),
            r.checkpoint_floats.to_string(),
        ];
        if timing {
            row.push(num(r.wall_ms));
        }
        t.push(row);
    }
    t
}

pub fn engine_name(e: Engine) -> &'static str {
    match e {
        Engine::Naive => "naive",
        Engine::Checkpointed => "checkpointed",
    }
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateCurveRow {
    pub delta: f64,
    pub lambda: f64,
    pub mean_gate: f64,
    pub frac_zero: f64,
    pub frac_one: f64,
}

/// Grid of `lambda` values the gate curve is sampled on.
pub fn gate_curve_lambdas() -> Vec<f64> {
    (0..=80).map(|i| -4.0 + 0.1 * i as f64).collect()
}

/// Monte-Carlo `E[gate]` against `lambda` for each `delta`; the remaining
/// gate constants come from `base`.
pub fn gate_curve(base: &GateConfig<f64>, deltas: &[f64], draws: usize, seed: u64) -> Vec<GateCurveRow> {
    let mut rows = Vec::new();
    for (k, &delta) in deltas.iter().enumerate() {
        let cfg = GateConfig { delta, ..*base };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let us: Vec<f64> = (0..draws).map(|_| rng.sample(rand_distr::Open01)).collect();
        for lambda in gate_curve_lambdas() {
            let (mut sum, mut zeros, mut ones) = (0.0, 0usize, 0usize);
            for &u in &us {
                let g = sample_gate(lambda, u, &cfg);
                sum += g;
                zeros += (g == 0.0) as usize;
                ones += (g == 1.0) as usize;
            }
            let n = draws.max(1) as f64;
            rows.push(GateCurveRow {
                delta,
                lambda,
                mean_gate: sum / n,
                frac_zero: zeros as f64 / n,
                frac_one: ones as f64 / n,
            });
        }
    }
    rows
}

/// Largest finite-difference slope of the mean-gate curve for `delta`.
pub fn max_slope(rows: &[GateCurveRow], delta: f64) -> f64 {
    let curve: Vec<&GateCurveRow> = rows.iter().filter(|r| r.delta == delta).collect();
    curve
        .windows(2)
        .map(|w| (w[1].mean_gate - w[0].mean_gate) / (w[1].lambda - w[0].lambda))
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn gate_curve_table(rows: &[GateCurveRow]) -> Table {
    let mut t = Table::new(["delta", "lambda", "mean_gate", "frac_zero", "frac_one"]);
    for r in rows {
        t.push(vec![num(r.delta), num(r.lambda), num(r.mean_gate), num(r.frac_zero), num(r.frac_one)]);
    }
    t
}
