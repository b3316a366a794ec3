use super::meter::MemoryMeter;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Result of one vector-Jacobian product.
#[derive(Clone, Debug)]
pub struct VjpOutput<S> {
    /// Forward value of the function.
    pub output: Tensor<S>,
    /// Cotangents for the data inputs, in argument order.
    pub inputs: Vec<Tensor<S>>,
    /// Cotangents for the parameters, in argument order.
    pub params: Vec<Tensor<S>>,
}

/// Records `f` on a fresh local tape, pulls `cotangent` back through it and
/// drops the tape before returning.
///
/// When `meter` is given the local tape reports its retained floats there,
/// so a caller can observe the peak across many successive steps.
pub fn vjp_step<S, F>(
    meter: Option<&MemoryMeter>,
    inputs: &[Tensor<S>],
    params: &[Tensor<S>],
    cotangent: &Tensor<S>,
    f: F,
) -> Result<VjpOutput<S>>
where
    S: Scalar,
    F: FnOnce(&mut Tape<S>, &[Var], &[Var]) -> Result<Var>,
{
    let mut tape = match meter {
        Some(m) => Tape::with_meter(m.clone()),
        None => Tape::new(),
    };
    let in_vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let param_vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &in_vars, &param_vars)?;
    let output = tape.value(out).clone();
    if output.shape() != cotangent.shape() {
        return Err(Error::Shape {
            op: "vjp_step",
            lhs: output.shape().to_vec(),
            rhs: cotangent.shape().to_vec(),
        });
    }
    let mut grads = tape.backward_from(&[(out, cotangent.clone())])?;
    let inputs = in_vars
        .iter()
        .map(|&v| grads.take(v))
        .collect::<Result<_>>()?;
    let params = param_vars
        .iter()
        .map(|&v| grads.take(v))
        .collect::<Result<_>>()?;
    Ok(VjpOutput {
        output,
        inputs,
        params,
    })
}
