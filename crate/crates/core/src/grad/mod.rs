//! Reverse-mode differentiation over dense tensors.

mod fd;
mod meter;
mod tape;
mod vjp;

pub use fd::{finite_difference_gradient, DEFAULT_FD_STEP};
pub use meter::MemoryMeter;
pub use tape::{Gradients, Tape, Var};
pub use vjp::{vjp_step, VjpOutput};

pub(crate) use tape::sigmoid;


/// Names of the differentiable primitives a [`Tape`] records.
pub fn primitive_set() -> &'static [&'static str] {
    &[
        "matmul",
        "transpose",
        "add",
        "sub",
        "mul",
        "scale",
        "shift",
        "concat",
        "slice",
        "split",
        "reshape",
        "softmax",
        "sigmoid",
        "ln",
        "exp",
        "gelu",
        "layer_norm",
        "sum",
        "mean",
        "l1_norm",
        "l2_norm",
        "clamp01",
        "embedding",
    ]
}
