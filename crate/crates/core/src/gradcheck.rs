//! Finite-difference gradient checking in 64-bit mode.
//!
//! Every check builds a small graph twice: once with its inputs as variables
//! to get reverse-mode gradients, and once per perturbed element with its
//! inputs as constants to get central differences. Non-scalar outputs are
//! reduced to a scalar through a fixed random weighting so that every output
//! element contributes a distinct amount.

use crate::autodiff::{Graph, NodeId};
use crate::conv::Conv2dSpec;
use crate::convlstm::{CellShape, CellState, ConvLstmCell, ConvLstmParams};
use crate::data::{generate_dataset, GenConfig, SegMap};
use crate::error::{Error, Result};
use crate::segnet::{forward_one_step, LstmMode, ModelConfig, ModelParams};
use crate::tensor::{derive_seed, Dims, Init, Tensor};

/// Central-difference step used throughout the suite.
pub const EPS: f64 = 1e-5;
/// Pass threshold for single operations and the ConvLSTM cell.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Pass threshold for the end-to-end model.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Denominator floor of [`relative_error`], so that two near-zero values compare as equal.
pub const RELATIVE_FLOOR: f64 = 1e-6;

const WEIGHTING_SEED: u64 = 0x5eed_0f5c_a1a7;

/// `(f(x + eps·e_i) − f(x − eps·e_i)) / 2eps` for every element `i` of `x`.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    eps: f64,
) -> Result<Tensor<f64>> {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * eps));
    }
    Tensor::from_vec(x.dims(), grad)
}

/// `|a − b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Largest elementwise [`relative_error`] between two tensors of equal dims.
pub fn max_relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(crate::error::shape_err(
            "max_relative_error",
            format!("{:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max))
}

/// Outcome of checking one operation or model.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Number of scalar partial derivatives compared.
    pub checked: usize,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Reduces `out` to a scalar: unchanged when it already is one, otherwise
/// `Σ out ∘ R` for a weighting `R` that depends only on `out`'s dims.
fn scalarize(g: &mut Graph<f64>, out: NodeId) -> Result<NodeId> {
    let dims = g.value(out).dims();
    if dims == [1, 1, 1, 1] {
        return Ok(out);
    }
    let r = Tensor::new(
        dims,
        Init::Uniform {
            bound: 1.0,
            seed: WEIGHTING_SEED,
        },
    )?;
    let r = g.constant(r)?;
    let weighted = g.hadamard(out, r)?;
    g.sum(weighted)
}

/// Compares reverse-mode and central-difference gradients of
/// `scalarize(build(inputs))` with respect to every input tensor.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], tolerance: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids = inputs
        .iter()
        .map(|t| g.variable(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &ids)?;
    let loss = scalarize(&mut g, out)?;
    let mut grads = g.backward(loss)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids = values
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &ids)?;
        let loss = scalarize(&mut g, out)?;
        Ok(g.value(loss).data()[0])
    };

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut values = inputs.to_vec();
    for (i, id) in ids.iter().enumerate() {
        let analytic = grads
            .take(*id)
            .ok_or_else(|| Error::Invalid(format!("{name}: no gradient for input {i}")))?;
        let x = values[i].clone();
        let numeric = finite_diff_grad(
            |probe| {
                values[i] = probe.clone();
                eval(&values)
            },
            &x,
            EPS,
        )?;
        values[i] = x;
        worst = worst.max(max_relative_error(&analytic, &numeric)?);
        checked += analytic.len();
    }
    Ok(GradReport {
        name: name.to_string(),
        max_rel_error: worst,
        checked,
        tolerance,
    })
}

fn random(dims: Dims, seed: u64) -> Tensor<f64> {
    Tensor::new(dims, Init::Uniform { bound: 1.0, seed }).expect("small dims")
}

/// Like [`random`] but bounded away from zero, so that rectification kinks
/// stay far outside the difference stencil.
fn away_from_zero(dims: Dims, seed: u64) -> Tensor<f64> {
    random(dims, seed).map(|v| if v.abs() < 0.05 { v + 0.1_f64.copysign(v) } else { v })
}

/// Every differentiable graph operation on randomised small tensors.
pub fn op_suite(seed: u64) -> Result<Vec<GradReport>> {
    let s = |k: u64| derive_seed(seed, k);
    let tol = OP_TOLERANCE;
    let x = random([2, 3, 6, 6], s(1));
    let w3 = random([4, 3, 3, 3], s(2));
    let w1 = random([4, 3, 1, 1], s(3));
    let b = random([4, 1, 1, 1], s(4));
    let a = random([2, 4, 6, 6], s(5));
    let c = random([2, 4, 6, 6], s(6));
    let peep = random([1, 4, 6, 6], s(7));

    let conv = |spec: Conv2dSpec| {
        move |g: &mut Graph<f64>, v: &[NodeId]| g.conv2d(v[0], v[1], Some(v[2]), spec)
    };
    let strided = Conv2dSpec {
        stride: 2,
        padding: 1,
        dilation: 1,
    };
    let dilated = Conv2dSpec {
        stride: 2,
        padding: 2,
        dilation: 2,
    };
    let targets: Vec<usize> = (0..2 * 3 * 3).map(|i| (i * 7 + seed as usize) % 4).collect();

    let mut out = vec![
        check("conv2d 3x3 same", &[x.clone(), w3.clone(), b.clone()], tol, conv(Conv2dSpec::same(3)))?,
        check("conv2d 3x3 stride 2", &[x.clone(), w3.clone(), b.clone()], tol, conv(strided))?,
        check("conv2d 3x3 stride 2 dilation 2", &[x.clone(), w3.clone(), b.clone()], tol, conv(dilated))?,
        check("conv2d 1x1", &[x.clone(), w1, b.clone()], tol, conv(Conv2dSpec::default()))?,
        check("conv2d without bias", &[x.clone(), w3.clone()], tol, |g, v| {
            g.conv2d(v[0], v[1], None, Conv2dSpec::same(3))
        })?,
        check("add", &[a.clone(), c.clone()], tol, |g, v| g.add(v[0], v[1]))?,
        check("hadamard", &[a.clone(), c.clone()], tol, |g, v| g.hadamard(v[0], v[1]))?,
        check("hadamard_broadcast", &[a.clone(), peep], tol, |g, v| g.hadamard_broadcast(v[0], v[1]))?,
        check("sigmoid", &[a.scale(3.0)], tol, |g, v| g.sigmoid(v[0]))?,
        check("tanh", &[a.scale(2.0)], tol, |g, v| g.tanh(v[0]))?,
        check("relu", &[away_from_zero([2, 4, 6, 6], s(8))], tol, |g, v| g.relu(v[0]))?,
        check("upsample_nearest", &[random([2, 3, 3, 3], s(9))], tol, |g, v| g.upsample_nearest(v[0], 2))?,
        check("concat channels", &[a.clone(), x.clone()], tol, |g, v| g.concat(1, v))?,
        check("concat batch", &[a.clone(), c.clone()], tol, |g, v| g.concat(0, v))?,
        check("slice_channels", std::slice::from_ref(&a), tol, |g, v| g.slice_channels(v[0], 1, 2))?,
        check("sum", std::slice::from_ref(&a), tol, |g, v| g.sum(v[0]))?,
        check("softmax_cross_entropy", &[random([2, 4, 3, 3], s(10)).scale(3.0)], tol, |g, v| {
            g.softmax_cross_entropy(v[0], &targets)
        })?,
        check("conv2d then sigmoid", &[x, w3, b], tol, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::same(3))?;
            g.sigmoid(y)
        })?,
    ];
    out.push(cell_check(seed)?);
    Ok(out)
}

/// One ConvLSTM step with respect to all 15 parameter tensors, the input and the previous state.
pub fn cell_check(seed: u64) -> Result<GradReport> {
    let shape = CellShape {
        in_channels: 2,
        out_channels: 2,
        kernel: 3,
        height: 4,
        width: 4,
    };
    let params = ConvLstmParams::<Tensor<f64>>::random(shape, 0.5, derive_seed(seed, 100))?;
    let mut inputs: Vec<Tensor<f64>> = params.fields().into_iter().cloned().collect();
    inputs.push(random([1, 2, 4, 4], derive_seed(seed, 101)));
    inputs.push(random([1, 2, 4, 4], derive_seed(seed, 102)));
    inputs.push(random([1, 2, 4, 4], derive_seed(seed, 103)));
    check("convlstm cell_step", &inputs, OP_TOLERANCE, |g, v| {
        let mut it = v.iter().copied();
        let p = ConvLstmParams::<()>::default_unit().try_map(|_, _| Ok::<_, Error>(it.next().expect("15 params")))?;
        let input = it.next().expect("input");
        let prev = CellState {
            hidden: it.next().expect("hidden"),
            cell: it.next().expect("cell"),
        };
        let cell = ConvLstmCell::new(g, &p)?;
        let next = cell.step(g, input, &prev)?;
        g.concat_channels(next.hidden, next.cell)
    })
}

/// Configuration of the end-to-end check: K=3, 16×16 input, widths (4,4,4,4).
pub fn tiny_model_config(mode: LstmMode) -> ModelConfig {
    ModelConfig {
        num_classes: 3,
        height: 16,
        width: 16,
        widths: [4, 4, 4, 4],
        mode,
        share_directions: false,
    }
}

/// Mean cross-entropy of the one-step prediction with respect to every model parameter.
///
/// Parameters are the default initialisation plus uniform noise on every
/// tensor, so that no pre-activation sits exactly on a rectification kink.
pub fn model_check(mode: LstmMode, seed: u64) -> Result<GradReport> {
    let cfg = tiny_model_config(mode);
    let base = ModelParams::<Tensor<f64>>::init(&cfg, derive_seed(seed, 200))?;
    let mut k = 0;
    let params = base.try_map(|_, t| {
        k += 1;
        let noise = random(t.dims(), derive_seed(seed, 300 + k)).scale(0.1);
        t.add(&noise)
    })?;
    let gen = GenConfig {
        height: cfg.height,
        width: cfg.width,
        num_classes: cfg.num_classes,
        min_size: 3,
        max_size: 7,
        sequences: 1,
        frames: 5,
        seed: derive_seed(seed, 201),
        ..GenConfig::default()
    };
    let seq = generate_dataset(&gen)?.sequences.remove(0).frames;
    let inputs: Vec<&SegMap> = seq[..4].iter().collect();
    let targets: Vec<usize> = seq[4].data().iter().map(|&c| c as usize).collect();
    let tensors: Vec<Tensor<f64>> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    let name = format!("end-to-end model ({mode})");
    check(&name, &tensors, MODEL_TOLERANCE, |g, v| {
        let mut it = v.iter().copied();
        let p = params.try_map(|_, _| Ok::<_, Error>(it.next().expect("one node per tensor")))?;
        let logits = forward_one_step(g, &p, &cfg, &inputs)?;
        g.softmax_cross_entropy(logits, &targets)
    })
}

/// The operation suite followed by the end-to-end unidirectional model.
pub fn full_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut out = op_suite(seed)?;
    out.push(model_check(LstmMode::Uni, seed)?);
    Ok(out)
}
