//! Peephole convolutional LSTM: single cell step, the fixed four-step runner
//! and the bidirectional variant.
//!
//! For every step `s`, with `*` a same-padded convolution and `∘` the
//! Hadamard product:
//!
//! ```text
//! i_s = σ(W_fi * f_s + W_hi * H_{s−1} + W_ci ∘ C_{s−1} + b_i)
//! F_s = σ(W_fF * f_s + W_hF * H_{s−1} + W_cF ∘ C_{s−1} + b_F)
//! C_s = F_s ∘ C_{s−1} + i_s ∘ tanh(W_fc * f_s + W_hc * H_{s−1} + b_c)
//! o_s = σ(W_fo * f_s + W_ho * H_{s−1} + W_co ∘ C_s + b_o)
//! H_s = o_s ∘ tanh(C_s)
//! ```
//!
//! The eight gate kernels are fused into one `4·Cout × (Cin+Cout)` convolution
//! over `concat(f_s, H_{s−1})`; the result is identical to evaluating them
//! separately.

use crate::autodiff::{Graph, NodeId};
use crate::conv::Conv2dSpec;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{derive_seed, Element, Init, Tensor};
use crate::INPUT_FRAMES;

/// Extents a [`ConvLstmParams`] set is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellShape {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Square kernel size, 1 or 3.
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
}

/// Parameters of one ConvLSTM. `P` is a [`Tensor`] for stored weights or a
/// [`NodeId`] once bound to a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmParams<P = Tensor<f32>> {
    /// Input-to-state kernels, `Cout×Cin×k×k`.
    pub w_fi: P,
    pub w_ff: P,
    pub w_fc: P,
    pub w_fo: P,
    /// State-to-state kernels, `Cout×Cout×k×k`.
    pub w_hi: P,
    pub w_hf: P,
    pub w_hc: P,
    pub w_ho: P,
    /// Peephole weights, `1×Cout×Hs×Ws`, applied elementwise to the cell state.
    pub w_ci: P,
    pub w_cf: P,
    pub w_co: P,
    /// Per-channel biases, `Cout×1×1×1`.
    pub b_i: P,
    pub b_f: P,
    pub b_c: P,
    pub b_o: P,
}

pub const PARAM_NAMES: [&str; 15] = [
    "w_fi", "w_ff", "w_fc", "w_fo", "w_hi", "w_hf", "w_hc", "w_ho", "w_ci", "w_cf", "w_co", "b_i", "b_f",
    "b_c", "b_o",
];

impl<P> ConvLstmParams<P> {
    /// Fields in [`PARAM_NAMES`] order.
    pub fn fields(&self) -> [&P; 15] {
        [
            &self.w_fi, &self.w_ff, &self.w_fc, &self.w_fo, &self.w_hi, &self.w_hf, &self.w_hc, &self.w_ho,
            &self.w_ci, &self.w_cf, &self.w_co, &self.b_i, &self.b_f, &self.b_c, &self.b_o,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut P; 15] {
        [
            &mut self.w_fi,
            &mut self.w_ff,
            &mut self.w_fc,
            &mut self.w_fo,
            &mut self.w_hi,
            &mut self.w_hf,
            &mut self.w_hc,
            &mut self.w_ho,
            &mut self.w_ci,
            &mut self.w_cf,
            &mut self.w_co,
            &mut self.b_i,
            &mut self.b_f,
            &mut self.b_c,
            &mut self.b_o,
        ]
    }

    pub fn try_map<Q, E>(&self, mut f: impl FnMut(&'static str, &P) -> Result<Q, E>) -> Result<ConvLstmParams<Q>, E> {
        let mut it = PARAM_NAMES.iter().zip(self.fields());
        let mut next = || {
            let (name, p) = it.next().expect("fifteen fields");
            f(name, p)
        };
        Ok(ConvLstmParams {
            w_fi: next()?,
            w_ff: next()?,
            w_fc: next()?,
            w_fo: next()?,
            w_hi: next()?,
            w_hf: next()?,
            w_hc: next()?,
            w_ho: next()?,
            w_ci: next()?,
            w_cf: next()?,
            w_co: next()?,
            b_i: next()?,
            b_f: next()?,
            b_c: next()?,
            b_o: next()?,
        })
    }
}

impl<T: Element> ConvLstmParams<Tensor<T>> {
    /// Expected dims of every field, in [`PARAM_NAMES`] order.
    pub fn expected_dims(shape: CellShape) -> [[usize; 4]; 15] {
        let CellShape {
            in_channels: ci,
            out_channels: co,
            kernel: k,
            height: h,
            width: w,
        } = shape;
        let fi = [co, ci, k, k];
        let hh = [co, co, k, k];
        let peep = [1, co, h, w];
        let bias = [co, 1, 1, 1];
        [fi, fi, fi, fi, hh, hh, hh, hh, peep, peep, peep, bias, bias, bias, bias]
    }

    /// All-zero parameters.
    pub fn zeros(shape: CellShape) -> Result<Self> {
        validate_shape(shape)?;
        let dims = Self::expected_dims(shape);
        let mut i = 0;
        ConvLstmParams::<()>::unit().try_map(|_, _| {
            let t = Tensor::zeros(dims[i]);
            i += 1;
            Ok(t)
        })
    }

    /// Uniform `±1/√fan_in` kernels, zero peepholes, zero biases except a
    /// forget-gate bias of one.
    pub fn init(shape: CellShape, seed: u64) -> Result<Self> {
        validate_shape(shape)?;
        let dims = Self::expected_dims(shape);
        let fan_in = (shape.in_channels + shape.out_channels) * shape.kernel * shape.kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut i = 0;
        ConvLstmParams::<()>::unit().try_map(|name, _| {
            let init = match name {
                "b_f" => Init::Constant(1.0),
                n if n.starts_with("w_c") || n.starts_with("b_") => Init::Zeros,
                _ => Init::Uniform {
                    bound,
                    seed: derive_seed(seed, i as u64),
                },
            };
            let t = Tensor::new(dims[i], init);
            i += 1;
            t
        })
    }

    /// Random parameters (every field uniform in `±bound`), useful for tests and gradient checks.
    pub fn random(shape: CellShape, bound: f64, seed: u64) -> Result<Self> {
        validate_shape(shape)?;
        let dims = Self::expected_dims(shape);
        let mut i = 0;
        ConvLstmParams::<()>::unit().try_map(|_, _| {
            let t = Tensor::new(
                dims[i],
                Init::Uniform {
                    bound,
                    seed: derive_seed(seed, i as u64),
                },
            );
            i += 1;
            t
        })
    }

    /// Recovers and validates the shape from the stored tensors.
    pub fn shape(&self) -> Result<CellShape> {
        let [co, ci, k, _] = self.w_fi.dims();
        let [_, _, h, w] = self.w_ci.dims();
        let shape = CellShape {
            in_channels: ci,
            out_channels: co,
            kernel: k,
            height: h,
            width: w,
        };
        validate_shape(shape)?;
        for ((name, t), want) in PARAM_NAMES.iter().zip(self.fields()).zip(Self::expected_dims(shape)) {
            if t.dims() != want {
                return Err(shape_err(
                    "convlstm params",
                    format!("{name} has dims {:?}, expected {want:?}", t.dims()),
                ));
            }
        }
        Ok(shape)
    }

    /// Records every field as a trainable variable of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<ConvLstmParams<NodeId>> {
        self.shape()?;
        self.try_map(|_, t| g.variable(t.clone()))
    }

    /// Records every field as a constant of `g`.
    pub fn bind_constant(&self, g: &mut Graph<T>) -> Result<ConvLstmParams<NodeId>> {
        self.shape()?;
        self.try_map(|_, t| g.constant(t.clone()))
    }
}

impl ConvLstmParams<()> {
    pub(crate) fn default_unit() -> Self {
        Self::unit()
    }

    fn unit() -> Self {
        ConvLstmParams {
            w_fi: (),
            w_ff: (),
            w_fc: (),
            w_fo: (),
            w_hi: (),
            w_hf: (),
            w_hc: (),
            w_ho: (),
            w_ci: (),
            w_cf: (),
            w_co: (),
            b_i: (),
            b_f: (),
            b_c: (),
            b_o: (),
        }
    }
}

fn validate_shape(s: CellShape) -> Result<()> {
    if s.in_channels == 0 || s.out_channels == 0 || s.height == 0 || s.width == 0 {
        return Err(Error::Invalid(format!("convlstm extents must be positive: {s:?}")));
    }
    if s.kernel != 1 && s.kernel != 3 {
        return Err(Error::Invalid(format!("convlstm kernel must be 1 or 3, got {}", s.kernel)));
    }
    Ok(())
}

/// Recurrent `(H, C)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState<P = Tensor<f32>> {
    pub hidden: P,
    pub cell: P,
}

/// All-zero state of dims `n×cout×hs×ws`.
pub fn zero_state<T: Element>(n: usize, cout: usize, hs: usize, ws: usize) -> Result<CellState<Tensor<T>>> {
    if n == 0 || cout == 0 || hs == 0 || ws == 0 {
        return Err(Error::Invalid(format!(
            "zero_state extents must be positive: {n}x{cout}x{hs}x{ws}"
        )));
    }
    Ok(CellState {
        hidden: Tensor::zeros([n, cout, hs, ws]),
        cell: Tensor::zeros([n, cout, hs, ws]),
    })
}

/// A ConvLSTM bound to a graph, with its gate kernels fused.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmCell {
    weight: NodeId,
    bias: NodeId,
    w_ci: NodeId,
    w_cf: NodeId,
    w_co: NodeId,
    shape: CellShape,
}

impl ConvLstmCell {
    pub fn new<T: Element>(g: &mut Graph<T>, p: &ConvLstmParams<NodeId>) -> Result<Self> {
        let [co, ci, k, _] = g.value(p.w_fi).dims();
        let [_, _, h, w] = g.value(p.w_ci).dims();
        let shape = CellShape {
            in_channels: ci,
            out_channels: co,
            kernel: k,
            height: h,
            width: w,
        };
        validate_shape(shape)?;
        let expected = ConvLstmParams::<Tensor<T>>::expected_dims(shape);
        for ((name, &id), want) in PARAM_NAMES.iter().zip(p.fields()).zip(expected) {
            if g.value(id).dims() != want {
                return Err(shape_err(
                    "convlstm params",
                    format!("{name} has dims {:?}, expected {want:?}", g.value(id).dims()),
                ));
            }
        }
        let mut gates = Vec::with_capacity(4);
        for (wf, wh) in [(p.w_fi, p.w_hi), (p.w_ff, p.w_hf), (p.w_fc, p.w_hc), (p.w_fo, p.w_ho)] {
            gates.push(g.concat_channels(wf, wh)?);
        }
        let weight = g.concat(0, &gates)?;
        let bias = g.concat(0, &[p.b_i, p.b_f, p.b_c, p.b_o])?;
        Ok(Self {
            weight,
            bias,
            w_ci: p.w_ci,
            w_cf: p.w_cf,
            w_co: p.w_co,
            shape,
        })
    }

    pub fn shape(&self) -> CellShape {
        self.shape
    }

    /// A zero state recorded as constants.
    pub fn zero_state<T: Element>(&self, g: &mut Graph<T>, batch: usize) -> Result<CellState<NodeId>> {
        let s = zero_state::<T>(batch, self.shape.out_channels, self.shape.height, self.shape.width)?;
        Ok(CellState {
            hidden: g.constant(s.hidden)?,
            cell: g.constant(s.cell)?,
        })
    }

    /// One recurrence step.
    pub fn step<T: Element>(&self, g: &mut Graph<T>, input: NodeId, prev: &CellState<NodeId>) -> Result<CellState<NodeId>> {
        let s = self.shape;
        let [n, c, h, w] = g.value(input).dims();
        if c != s.in_channels || h != s.height || w != s.width {
            return Err(shape_err(
                "cell_step",
                format!("input {:?} for a cell of shape {s:?}", g.value(input).dims()),
            ));
        }
        let state_dims = [n, s.out_channels, s.height, s.width];
        for id in [prev.hidden, prev.cell] {
            if g.value(id).dims() != state_dims {
                return Err(shape_err(
                    "cell_step",
                    format!("state {:?}, expected {state_dims:?}", g.value(id).dims()),
                ));
            }
        }
        let co = s.out_channels;
        let stacked = g.concat_channels(input, prev.hidden)?;
        let z = g.conv2d(stacked, self.weight, Some(self.bias), Conv2dSpec::same(s.kernel))?;
        let zi = g.slice_channels(z, 0, co)?;
        let zf = g.slice_channels(z, co, co)?;
        let zc = g.slice_channels(z, 2 * co, co)?;
        let zo = g.slice_channels(z, 3 * co, co)?;

        let peep_i = g.hadamard_broadcast(prev.cell, self.w_ci)?;
        let pre_i = g.add(zi, peep_i)?;
        let i = g.sigmoid(pre_i)?;

        let peep_f = g.hadamard_broadcast(prev.cell, self.w_cf)?;
        let pre_f = g.add(zf, peep_f)?;
        let f = g.sigmoid(pre_f)?;

        let cand = g.tanh(zc)?;
        let keep = g.hadamard(f, prev.cell)?;
        let write = g.hadamard(i, cand)?;
        let cell = g.add(keep, write)?;

        let peep_o = g.hadamard_broadcast(cell, self.w_co)?;
        let pre_o = g.add(zo, peep_o)?;
        let o = g.sigmoid(pre_o)?;

        let squashed = g.tanh(cell)?;
        let hidden = g.hadamard(o, squashed)?;
        Ok(CellState { hidden, cell })
    }

    /// Runs the four input steps in order from a zero state and returns the last hidden state.
    pub fn run<T: Element>(&self, g: &mut Graph<T>, seq: &[NodeId]) -> Result<NodeId> {
        if seq.len() != INPUT_FRAMES {
            return Err(Error::FrameCount {
                expected: INPUT_FRAMES,
                got: seq.len(),
            });
        }
        let batch = g.value(seq[0]).dims()[0];
        let first = g.value(seq[0]).dims();
        if let Some(&bad) = seq.iter().find(|&&f| g.value(f).dims() != first) {
            return Err(shape_err(
                "run_sequence",
                format!("frame dims {:?} vs {first:?}", g.value(bad).dims()),
            ));
        }
        let mut state = self.zero_state(g, batch)?;
        for &f in seq {
            state = self.step(g, f, &state)?;
        }
        Ok(state.hidden)
    }
}

/// Forward pass over `seq`, backward pass over the reversed sequence, final
/// hidden states concatenated along channels (forward first).
pub fn bidirectional<T: Element>(
    g: &mut Graph<T>,
    forward: &ConvLstmCell,
    backward: &ConvLstmCell,
    seq: &[NodeId],
) -> Result<NodeId> {
    let (f, b) = (forward.shape(), backward.shape());
    if f.in_channels != b.in_channels || f.height != b.height || f.width != b.width {
        return Err(shape_err(
            "run_bidirectional",
            format!("forward {f:?} vs backward {b:?}"),
        ));
    }
    let h_fwd = forward.run(g, seq)?;
    let reversed: Vec<NodeId> = seq.iter().rev().copied().collect();
    let h_bwd = backward.run(g, &reversed)?;
    g.concat_channels(h_fwd, h_bwd)
}

/// One step on plain tensors.
pub fn cell_step<T: Element>(
    p: &ConvLstmParams<Tensor<T>>,
    input: &Tensor<T>,
    prev: &CellState<Tensor<T>>,
) -> Result<CellState<Tensor<T>>> {
    let mut g = Graph::new();
    let bound = p.bind_constant(&mut g)?;
    let cell = ConvLstmCell::new(&mut g, &bound)?;
    let x = g.constant(input.clone())?;
    let state = CellState {
        hidden: g.constant(prev.hidden.clone())?,
        cell: g.constant(prev.cell.clone())?,
    };
    let next = cell.step(&mut g, x, &state)?;
    Ok(CellState {
        hidden: g.value(next.hidden).clone(),
        cell: g.value(next.cell).clone(),
    })
}

/// The four-step runner on plain tensors; returns the final hidden state.
pub fn run_sequence<T: Element>(p: &ConvLstmParams<Tensor<T>>, seq: &[Tensor<T>]) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = p.bind_constant(&mut g)?;
    let cell = ConvLstmCell::new(&mut g, &bound)?;
    let ids = seq
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let h = cell.run(&mut g, &ids)?;
    Ok(g.value(h).clone())
}

/// The bidirectional runner on plain tensors.
pub fn run_bidirectional<T: Element>(
    p_fwd: &ConvLstmParams<Tensor<T>>,
    p_bwd: &ConvLstmParams<Tensor<T>>,
    seq: &[Tensor<T>],
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bf = p_fwd.bind_constant(&mut g)?;
    let bb = p_bwd.bind_constant(&mut g)?;
    let fwd = ConvLstmCell::new(&mut g, &bf)?;
    let bwd = ConvLstmCell::new(&mut g, &bb)?;
    let ids = seq
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = bidirectional(&mut g, &fwd, &bwd, &ids)?;
    Ok(g.value(out).clone())
}
