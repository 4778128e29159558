//! Minimal differentiable-network substrate: dense and convolutional layers,
//! ReLU, max-pooling, squared-error losses, SGD and finite-difference
//! gradient verification. Everything is 64-bit floats so the gradient checks
//! are decisive.

mod tape;
mod tensor;

pub use tape::{backward_and_step, descriptor_entries, Tape, Var};
pub use tensor::{ParamEntry, ParamStore, TensorF};

use rand::Rng;

use crate::error::{Error, Result};

/// One layer of a small feed-forward stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    /// 2x2 max-pool, stride 2.
    MaxPool2,
    Relu,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Dense { input, output } => {
                if *input == 0 || *output == 0 {
                    return Err(Error::Config("dense dims must be positive".into()));
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                if *in_channels == 0 || *out_channels == 0 || *kernel == 0 || *stride == 0 {
                    return Err(Error::Config("conv dims must be positive".into()));
                }
            }
            LayerSpec::MaxPool2 | LayerSpec::Relu => {}
        }
        Ok(())
    }

    /// Parameter names and shapes this layer contributes under `prefix.idx`.
    fn param_shapes(&self, prefix: &str, idx: usize) -> Vec<(String, Vec<usize>)> {
        match self {
            LayerSpec::Dense { input, output } => vec![
                (format!("{prefix}.{idx}.W"), vec![*output, *input]),
                (format!("{prefix}.{idx}.b"), vec![*output]),
            ],
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                (
                    format!("{prefix}.{idx}.W"),
                    vec![*out_channels, *in_channels, *kernel, *kernel],
                ),
                (format!("{prefix}.{idx}.b"), vec![*out_channels]),
            ],
            LayerSpec::MaxPool2 | LayerSpec::Relu => vec![],
        }
    }
}

/// Parameter names and shapes for a whole stack under `prefix`.
pub fn stack_param_shapes(specs: &[LayerSpec], prefix: &str) -> Vec<(String, Vec<usize>)> {
    specs
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.param_shapes(prefix, i))
        .collect()
}

/// Insert freshly initialized parameters for a stack: Glorot-uniform weights
/// and zero biases. When `zero_last_dense` is set, the final dense layer is
/// zero-initialized so the stack starts as the constant-zero map.
pub fn init_stack_params(
    store: &mut ParamStore,
    specs: &[LayerSpec],
    prefix: &str,
    zero_last_dense: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    let last_dense = specs
        .iter()
        .rposition(|s| matches!(s, LayerSpec::Dense { .. }));
    for (i, spec) in specs.iter().enumerate() {
        spec.validate()?;
        match spec {
            LayerSpec::Dense { input, output } => {
                let zero = zero_last_dense && Some(i) == last_dense;
                let w = if zero {
                    TensorF::zeros(vec![*output, *input])
                } else {
                    TensorF::glorot_uniform(vec![*output, *input], *input, *output, rng)
                };
                store.insert(format!("{prefix}.{i}.W"), w)?;
                store.insert(format!("{prefix}.{i}.b"), TensorF::zeros(vec![*output]))?;
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                let fan_out = out_channels * kernel * kernel;
                let w = TensorF::glorot_uniform(
                    vec![*out_channels, *in_channels, *kernel, *kernel],
                    fan_in,
                    fan_out,
                    rng,
                );
                store.insert(format!("{prefix}.{i}.W"), w)?;
                store.insert(format!("{prefix}.{i}.b"), TensorF::zeros(vec![*out_channels]))?;
            }
            LayerSpec::MaxPool2 | LayerSpec::Relu => {}
        }
    }
    Ok(())
}

/// Run a layer stack on the tape. A conv layer fed a rank-1 tensor zero-pads
/// it into a square single-channel map first; a dense layer fed a rank-3
/// tensor flattens it.
pub fn run_stack(
    tape: &mut Tape,
    store: &ParamStore,
    specs: &[LayerSpec],
    prefix: &str,
    input: Var,
) -> Result<Var> {
    let mut x = input;
    for (i, spec) in specs.iter().enumerate() {
        match spec {
            LayerSpec::Dense { .. } => {
                if tape.value(x).shape().len() > 1 {
                    x = tape.flatten(x);
                }
                let w = tape.param(store, &format!("{prefix}.{i}.W"))?;
                let b = tape.param(store, &format!("{prefix}.{i}.b"))?;
                x = tape.dense(x, w, b)?;
            }
            LayerSpec::Conv2d {
                in_channels,
                stride,
                ..
            } => {
                if tape.value(x).shape().len() == 1 {
                    let n = tape.value(x).len();
                    let per_channel = n.div_ceil(*in_channels);
                    let side = (per_channel as f64).sqrt().ceil() as usize;
                    x = tape.pad_reshape(x, vec![*in_channels, side, side])?;
                }
                let w = tape.param(store, &format!("{prefix}.{i}.W"))?;
                let b = tape.param(store, &format!("{prefix}.{i}.b"))?;
                x = tape.conv2d(x, w, b, *stride)?;
            }
            LayerSpec::MaxPool2 => {
                x = tape.maxpool2(x)?;
            }
            LayerSpec::Relu => {
                x = tape.relu(x);
            }
        }
    }
    Ok(x)
}

/// Convolution followed by an optional 2x2 max-pool in one call.
pub fn conv2d_maxpool_forward(
    tape: &mut Tape,
    img: Var,
    kernel: Var,
    bias: Var,
    stride: usize,
    pool: bool,
) -> Result<Var> {
    let conv = tape.conv2d(img, kernel, bias, stride)?;
    if pool {
        tape.maxpool2(conv)
    } else {
        Ok(conv)
    }
}

/// Central finite-difference check of the analytic gradients.
///
/// `build` must construct the forward pass on the given tape from the given
/// store and return the scalar loss node. The check sweeps every element of
/// every parameter named in `names`, perturbs it by `±eps`, and compares the
/// central difference against the analytic gradient:
/// `|analytic - fd| / max(1, |analytic|)`. Returns the maximum relative
/// error observed.
pub fn grad_check<F>(
    store: &mut ParamStore,
    names: &[&str],
    eps: f64,
    mut build: F,
) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut analytic: Vec<(String, TensorF)> = Vec::new();
    {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store)?;
        tape.backward_into(loss, store)?;
        for name in names {
            analytic.push(((*name).to_string(), store.grad(name)?.clone()));
        }
        store.zero_grads();
    }

    let mut max_rel = 0.0f64;
    for (name, grads) in &analytic {
        for i in 0..grads.len() {
            let original = store.value(name)?.values()[i];
            store.value_mut(name)?.values_mut()[i] = original + eps;
            let plus = {
                let mut tape = Tape::new();
                let loss = build(&mut tape, store)?;
                tape.value(loss).item()?
            };
            store.value_mut(name)?.values_mut()[i] = original - eps;
            let minus = {
                let mut tape = Tape::new();
                let loss = build(&mut tape, store)?;
                tape.value(loss).item()?
            };
            store.value_mut(name)?.values_mut()[i] = original;
            let fd = (plus - minus) / (2.0 * eps);
            let a = grads.values()[i];
            let rel = (a - fd).abs() / a.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
