use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with L2 weight decay folded into the gradient (`g + wd * p`).
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    pub weight_decay: S,
    step: i32,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(weight_decay: S) -> Self {
        Self {
            beta1: S::of(0.9),
            beta2: S::of(0.999),
            eps: S::of(1e-8),
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn update(&mut self, params: Vec<&mut Tensor<S>>, grads: &[Tensor<S>], lr: S) -> Result<()> {
        self.update_with(params, grads, |_, _| lr)
    }

    /// One step where `lr(param_index, element_index)` picks the rate.
    pub fn update_with(
        &mut self,
        params: Vec<&mut Tensor<S>>,
        grads: &[Tensor<S>],
        lr: impl Fn(usize, usize) -> S,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} params but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![S::zero(); g.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = S::one() - self.beta1.powi(self.step);
        let bc2 = S::one() - self.beta2.powi(self.step);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            p.check_same(g, "adam")?;
            if self.m[k].len() != g.numel() {
                return Err(Error::Contract("parameter set changed between steps".into()));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let updated: Vec<S> = p
                .data()
                .iter()
                .zip(g.data())
                .enumerate()
                .map(|(i, (&pi, &gi))| {
                    let gi = gi + self.weight_decay * pi;
                    m[i] = self.beta1 * m[i] + (S::one() - self.beta1) * gi;
                    v[i] = self.beta2 * v[i] + (S::one() - self.beta2) * gi * gi;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    pi - lr(k, i) * mhat / (vhat.sqrt() + self.eps)
                })
                .collect();
            *p = Tensor::new(p.shape(), updated)?;
        }
        Ok(())
    }
}
