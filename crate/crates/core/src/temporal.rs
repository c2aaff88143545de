//! Convolutional LSTM, its bidirectional wrapper, and the 1×1 output head.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv2d, join, l2_normalize, sigmoid, tanh, Conv2d, Initializer, NamedVar, Parameterized};

/// Hidden and cell tensors, each (B, k, H, W).
#[derive(Debug, Clone)]
pub struct ConvLstmState {
    pub hidden: Tensor,
    pub cell: Tensor,
}

impl ConvLstmState {
    pub fn zeros(like: &Tensor, hidden_channels: usize) -> Result<Self> {
        let (b, _, h, w) = like.dims4()?;
        let z = Tensor::zeros((b, hidden_channels, h, w), like.dtype(), like.device())?;
        Ok(Self {
            hidden: z.clone(),
            cell: z,
        })
    }
}

/// Gate activations of one step, kept for inspection.
#[derive(Debug, Clone)]
pub struct GateValues {
    pub input: Tensor,
    pub forget: Tensor,
    pub candidate: Tensor,
    pub output: Tensor,
}

/// One ConvLSTM cell.
///
/// The input-to-state and state-to-state kernels of all four gates live in a
/// single 3×3 convolution over `[x, h]`, output channels ordered
/// (input, forget, cell, output). Peepholes are per-channel Hadamard weights.
#[derive(Debug, Clone)]
pub struct ConvLstmCell {
    pub gates: Conv2d,
    pub peephole_input: candle_core::Var,
    pub peephole_forget: candle_core::Var,
    pub peephole_output: candle_core::Var,
    pub hidden_channels: usize,
}

impl ConvLstmCell {
    pub fn new(init: &mut Initializer, in_channels: usize, hidden_channels: usize) -> Result<Self> {
        let k = hidden_channels;
        let mut gates = Conv2d::new(init, in_channels + k, 4 * k, 3, 1, true)?;
        let mut bias = vec![0f64; 4 * k];
        bias[k..2 * k].iter_mut().for_each(|b| *b = 1.0);
        let bias = Tensor::from_vec(bias, 4 * k, &init.device)?.to_dtype(init.dtype)?;
        gates.bias = Some(candle_core::Var::from_tensor(&bias)?);
        Ok(Self {
            gates,
            peephole_input: init.constant(&[k], 0.0)?,
            peephole_forget: init.constant(&[k], 0.0)?,
            peephole_output: init.constant(&[k], 0.0)?,
            hidden_channels: k,
        })
    }

    fn peephole(v: &candle_core::Var) -> Result<Tensor> {
        let k = v.dims()[0];
        Ok(v.as_tensor().reshape((1, k, 1, 1))?)
    }

    /// Input half of the gate convolution, with bias, for a whole (T, C, H, W)
    /// stack at once; the recurrent half runs per step in `step_projected`.
    pub fn project_inputs(&self, xs: &Tensor) -> Result<Tensor> {
        let cin = xs.dim(1)?;
        let w = self.gates.weight.as_tensor();
        if w.dim(1)? != cin + self.hidden_channels {
            return Err(Error::ShapeMismatch(format!(
                "cell expects {} input channels, got {cin}",
                w.dim(1)? - self.hidden_channels
            )));
        }
        conv2d(xs, &w.narrow(1, 0, cin)?, self.gates.bias.as_ref().map(|b| b.as_tensor()), 1)
    }

    pub fn step_with_gates(&self, x: &Tensor, state: &ConvLstmState) -> Result<(ConvLstmState, GateValues)> {
        let (bx, _, hx, wx) = x.dims4()?;
        let (bs, _, hs, ws) = state.hidden.dims4()?;
        if (bx, hx, wx) != (bs, hs, ws) {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} vs state {:?}",
                x.dims(),
                state.hidden.dims()
            )));
        }
        self.step_projected(&self.project_inputs(x)?, state)
    }

    /// One step given the projected input `zx` of shape (B, 4k, H, W).
    pub fn step_projected(&self, zx: &Tensor, state: &ConvLstmState) -> Result<(ConvLstmState, GateValues)> {
        let k = self.hidden_channels;
        if state.hidden.dims() != state.cell.dims() {
            return Err(Error::ShapeMismatch("hidden and cell shapes differ".into()));
        }
        let (bx, zc, hx, wx) = zx.dims4()?;
        let (bs, ks, hs, ws) = state.hidden.dims4()?;
        if (bx, hx, wx) != (bs, hs, ws) || ks != k || zc != 4 * k {
            return Err(Error::ShapeMismatch(format!(
                "projected input {:?} vs state {:?}",
                zx.dims(),
                state.hidden.dims()
            )));
        }
        let w = self.gates.weight.as_tensor();
        let cin = w.dim(1)? - k;
        let z = (zx + conv2d(&state.hidden, &w.narrow(1, cin, k)?, None, 1)?)?;
        let c_prev = &state.cell;
        let zi = z.narrow(1, 0, k)?;
        let zf = z.narrow(1, k, k)?;
        let zc = z.narrow(1, 2 * k, k)?;
        let zo = z.narrow(1, 3 * k, k)?;
        let input = sigmoid(&(zi + c_prev.broadcast_mul(&Self::peephole(&self.peephole_input)?)?)?)?;
        let forget = sigmoid(&(zf + c_prev.broadcast_mul(&Self::peephole(&self.peephole_forget)?)?)?)?;
        let candidate = tanh(&zc)?;
        let cell = ((&forget * c_prev)? + (&input * &candidate)?)?;
        let output = sigmoid(&(zo + cell.broadcast_mul(&Self::peephole(&self.peephole_output)?)?)?)?;
        let hidden = (&output * tanh(&cell)?)?;
        Ok((
            ConvLstmState { hidden, cell },
            GateValues {
                input,
                forget,
                candidate,
                output,
            },
        ))
    }

    pub fn step(&self, x: &Tensor, state: &ConvLstmState) -> Result<ConvLstmState> {
        Ok(self.step_with_gates(x, state)?.0)
    }
}

impl Parameterized for ConvLstmCell {
    fn collect_vars(&self, prefix: &str, out: &mut Vec<NamedVar>) {
        self.gates.collect_vars(&join(prefix, "gates"), out);
        for (name, var) in [
            ("peephole_input", &self.peephole_input),
            ("peephole_forget", &self.peephole_forget),
            ("peephole_output", &self.peephole_output),
        ] {
            out.push(NamedVar {
                name: join(prefix, name),
                var: var.clone(),
                trainable: true,
            });
        }
    }
}

/// `convlstm_step` as a free function.
pub fn convlstm_step(x: &Tensor, state: &ConvLstmState, cell: &ConvLstmCell) -> Result<ConvLstmState> {
    cell.step(x, state)
}

/// Forward and backward ConvLSTMs with independent parameters, merged by
/// `Y_t = tanh(W_f * H→_t + W_b * H←_t + b)` as a 1×1 convolution.
#[derive(Debug, Clone)]
pub struct BiConvLstm {
    pub forward: ConvLstmCell,
    pub backward: ConvLstmCell,
    pub merge: Conv2d,
}

impl BiConvLstm {
    pub fn new(init: &mut Initializer, in_channels: usize, hidden_channels: usize) -> Result<Self> {
        Ok(Self {
            forward: ConvLstmCell::new(init, in_channels, hidden_channels)?,
            backward: ConvLstmCell::new(init, in_channels, hidden_channels)?,
            merge: Conv2d::new(init, 2 * hidden_channels, hidden_channels, 1, 1, true)?,
        })
    }

    pub fn hidden_channels(&self) -> usize {
        self.forward.hidden_channels
    }

    /// Runs both directions from zero states; output length equals input length.
    pub fn forward_sequence(&self, sequence: &[Tensor]) -> Result<Vec<Tensor>> {
        if sequence.is_empty() {
            return Err(Error::EmptyInput("empty sequence".into()));
        }
        let b = sequence[0].dim(0)?;
        let n = sequence.len();
        let k = self.hidden_channels();
        let stacked = Tensor::cat(sequence, 0)?;
        let frame = |z: &Tensor, t: usize| z.narrow(0, t * b, b);
        let zf = self.forward.project_inputs(&stacked)?;
        let mut state = ConvLstmState::zeros(&sequence[0], k)?;
        let mut fwd = Vec::with_capacity(n);
        for t in 0..n {
            state = self.forward.step_projected(&frame(&zf, t)?, &state)?.0;
            fwd.push(state.hidden.clone());
        }
        let zb = self.backward.project_inputs(&stacked)?;
        let mut state = ConvLstmState::zeros(&sequence[0], k)?;
        let mut bwd = vec![None; n];
        for t in (0..n).rev() {
            state = self.backward.step_projected(&frame(&zb, t)?, &state)?.0;
            bwd[t] = Some(state.hidden.clone());
        }
        let bwd: Vec<Tensor> = bwd.into_iter().map(|h| h.expect("filled above")).collect();
        let both = Tensor::cat(&[Tensor::cat(&fwd, 0)?, Tensor::cat(&bwd, 0)?], 1)?;
        let merged = tanh(&self.merge.forward(&both)?)?;
        (0..n).map(|t| Ok(frame(&merged, t)?)).collect()
    }

    /// The same layer with forward and backward roles exchanged.
    pub fn swapped(&self) -> Result<Self> {
        let k = self.hidden_channels();
        let w = self.merge.weight.as_tensor();
        let swapped_w = Tensor::cat(&[&w.narrow(1, k, k)?, &w.narrow(1, 0, k)?], 1)?;
        let merge = Conv2d {
            weight: candle_core::Var::from_tensor(&swapped_w)?,
            bias: self.merge.bias.clone(),
            stride: 1,
        };
        Ok(Self {
            forward: self.backward.clone(),
            backward: self.forward.clone(),
            merge,
        })
    }
}

impl Parameterized for BiConvLstm {
    fn collect_vars(&self, prefix: &str, out: &mut Vec<NamedVar>) {
        self.forward.collect_vars(&join(prefix, "forward"), out);
        self.backward.collect_vars(&join(prefix, "backward"), out);
        self.merge.collect_vars(&join(prefix, "merge"), out);
    }
}

pub fn bi_convlstm_forward(sequence: &[Tensor], layer: &BiConvLstm) -> Result<Vec<Tensor>> {
    layer.forward_sequence(sequence)
}

/// Stacked Bi-ConvLSTM layers; layer l+1 consumes layer l's outputs.
#[derive(Debug, Clone)]
pub struct TemporalEncoder {
    pub layers: Vec<BiConvLstm>,
}

/// Outputs of every layer, each (T', k, H, W).
pub struct TemporalOutputs {
    pub per_layer: Vec<Tensor>,
}

impl TemporalOutputs {
    pub fn last(&self) -> &Tensor {
        self.per_layer.last().expect("at least one layer")
    }
}

impl TemporalEncoder {
    pub fn new(init: &mut Initializer, in_channels: usize, hidden_channels: usize, layers: usize) -> Result<Self> {
        if layers == 0 {
            return Err(Error::InvalidArgument("at least one Bi-ConvLSTM layer".into()));
        }
        let mut out = Vec::with_capacity(layers);
        let mut cin = in_channels;
        for _ in 0..layers {
            out.push(BiConvLstm::new(init, cin, hidden_channels)?);
            cin = hidden_channels;
        }
        Ok(Self { layers: out })
    }

    /// `pair_features` is (T', D, H, W) for one scene, ordered by pair index.
    pub fn forward(&self, pair_features: &Tensor) -> Result<TemporalOutputs> {
        let n = pair_features.dim(0)?;
        let mut seq: Vec<Tensor> = (0..n)
            .map(|t| pair_features.narrow(0, t, 1))
            .collect::<candle_core::Result<_>>()?;
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            seq = layer.forward_sequence(&seq)?;
            per_layer.push(Tensor::cat(&seq, 0)?);
        }
        Ok(TemporalOutputs { per_layer })
    }
}

impl Parameterized for TemporalEncoder {
    fn collect_vars(&self, prefix: &str, out: &mut Vec<NamedVar>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect_vars(&join(prefix, &format!("layer{i}")), out);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Unit-norm embeddings for the contrastive objectives.
    Projection,
    /// Two-class change scores.
    Logits,
}

/// 1×1 convolution head.
#[derive(Debug, Clone)]
pub struct Head {
    pub conv: Conv2d,
    pub mode: HeadMode,
}

impl Head {
    pub fn new(init: &mut Initializer, in_channels: usize, out_channels: usize, mode: HeadMode) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(init, in_channels, out_channels, 1, 1, true)?,
            mode,
        })
    }
}

impl Parameterized for Head {
    fn collect_vars(&self, prefix: &str, out: &mut Vec<NamedVar>) {
        self.conv.collect_vars(prefix, out);
    }
}

/// Applies the head; projection outputs are L2-normalized per pixel.
pub fn head_forward(features: &Tensor, head: &Head, mode: HeadMode) -> Result<Tensor> {
    if head.mode != mode {
        return Err(Error::InvalidArgument(format!(
            "head built for {:?} called in {:?} mode",
            head.mode, mode
        )));
    }
    let y = head.conv.forward(features)?;
    match mode {
        HeadMode::Projection => l2_normalize(&y, 1),
        HeadMode::Logits => Ok(y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax_last;
    use candle_core::{DType, Device};

    fn zero_all(p: &impl Parameterized) {
        for v in p.named_vars() {
            v.var.set(&v.var.zeros_like().unwrap()).unwrap();
        }
    }

    fn randn(seed: u64, shape: &[usize]) -> Tensor {
        Initializer::new(seed, DType::F64)
            .uniform(shape, 1.0)
            .unwrap()
            .as_tensor()
            .clone()
    }

    fn scalar_max_abs(t: &Tensor) -> f64 {
        t.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn zero_parameters_force_half_open_gates() {
        let cell = ConvLstmCell::new(&mut Initializer::new(0, DType::F64), 2, 3).unwrap();
        zero_all(&cell);
        let x = randn(1, &[1, 2, 4, 4]);
        let c = randn(2, &[1, 3, 4, 4]);
        let state = ConvLstmState {
            hidden: randn(3, &[1, 3, 4, 4]),
            cell: c.clone(),
        };
        let (next, gates) = cell.step_with_gates(&x, &state).unwrap();
        for g in [&gates.input, &gates.forget, &gates.output] {
            assert!(scalar_max_abs(&(g - 0.5).unwrap()) < 1e-15);
        }
        assert!(scalar_max_abs(&(&next.cell - (&c * 0.5).unwrap()).unwrap()) < 1e-15);
        let expect_h = ((&c * 0.5).unwrap().tanh().unwrap() * 0.5).unwrap();
        assert!(scalar_max_abs(&(&next.hidden - expect_h).unwrap()) < 1e-15);
    }

    #[test]
    fn zero_everything_gives_zero_hidden() {
        let cell = ConvLstmCell::new(&mut Initializer::new(0, DType::F64), 2, 3).unwrap();
        zero_all(&cell);
        let x = Tensor::zeros((1, 2, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let state = ConvLstmState::zeros(&x, 3).unwrap();
        let next = convlstm_step(&x, &state, &cell).unwrap();
        assert_eq!(scalar_max_abs(&next.hidden), 0.0);
    }

    #[test]
    fn cell_update_reconstructs_from_gates() {
        let cell = ConvLstmCell::new(&mut Initializer::new(4, DType::F64), 2, 3).unwrap();
        for p in [&cell.peephole_input, &cell.peephole_forget, &cell.peephole_output] {
            p.set(&randn(9, &[3])).unwrap();
        }
        let x = randn(5, &[2, 2, 4, 4]);
        let state = ConvLstmState {
            hidden: randn(6, &[2, 3, 4, 4]).tanh().unwrap(),
            cell: randn(7, &[2, 3, 4, 4]),
        };
        let (next, g) = cell.step_with_gates(&x, &state).unwrap();
        let rebuilt = ((&g.forget * &state.cell).unwrap() + (&g.input * &g.candidate).unwrap()).unwrap();
        assert!(scalar_max_abs(&(rebuilt - &next.cell).unwrap()) <= 1e-6);
        let h = next.hidden.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(h.iter().all(|v| v.abs() < 1.0));
        for gate in [&g.input, &g.forget, &g.output] {
            let v = gate.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn step_rejects_mismatched_state() {
        let cell = ConvLstmCell::new(&mut Initializer::new(0, DType::F64), 2, 3).unwrap();
        let x = randn(1, &[1, 2, 4, 4]);
        let state = ConvLstmState::zeros(&randn(1, &[1, 2, 4, 6]), 3).unwrap();
        assert!(matches!(cell.step(&x, &state), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let cell = ConvLstmCell::new(&mut Initializer::new(0, DType::F64), 2, 3).unwrap();
        let b = cell.gates.bias.as_ref().unwrap().as_tensor().to_vec1::<f64>().unwrap();
        assert_eq!(b, vec![0., 0., 0., 1., 1., 1., 0., 0., 0., 0., 0., 0.]);
    }

    #[test]
    fn bidirectional_zero_parameters_output_zero() {
        let layer = BiConvLstm::new(&mut Initializer::new(0, DType::F64), 2, 3).unwrap();
        zero_all(&layer);
        let seq: Vec<Tensor> = (0..3).map(|s| randn(s, &[1, 2, 4, 4])).collect();
        for y in bi_convlstm_forward(&seq, &layer).unwrap() {
            assert_eq!(scalar_max_abs(&y), 0.0);
        }
    }

    #[test]
    fn bidirectional_handles_length_one_and_rejects_empty() {
        let layer = BiConvLstm::new(&mut Initializer::new(0, DType::F64), 2, 3).unwrap();
        let out = layer.forward_sequence(&[randn(1, &[1, 2, 4, 4])]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].dims(), &[1, 3, 4, 4]);
        assert!(matches!(layer.forward_sequence(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn reversal_with_swapped_directions_reverses_output() {
        let layer = BiConvLstm::new(&mut Initializer::new(11, DType::F64), 2, 3).unwrap();
        let seq: Vec<Tensor> = (0..4).map(|s| randn(20 + s, &[1, 2, 4, 4])).collect();
        let out = layer.forward_sequence(&seq).unwrap();
        let rev: Vec<Tensor> = seq.iter().rev().cloned().collect();
        let out_rev = layer.swapped().unwrap().forward_sequence(&rev).unwrap();
        for (a, b) in out.iter().zip(out_rev.iter().rev()) {
            assert!(scalar_max_abs(&(a - b).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn stacked_layers_preserve_length() {
        let enc = TemporalEncoder::new(&mut Initializer::new(0, DType::F64), 5, 3, 2).unwrap();
        let out = enc.forward(&randn(1, &[4, 5, 8, 8])).unwrap();
        assert_eq!(out.per_layer.len(), 2);
        for t in &out.per_layer {
            assert_eq!(t.dims(), &[4, 3, 8, 8]);
        }
    }

    #[test]
    fn projection_head_outputs_unit_vectors() {
        let head = Head::new(&mut Initializer::new(0, DType::F64), 6, 8, HeadMode::Projection).unwrap();
        let y = head_forward(&randn(3, &[2, 6, 5, 5]), &head, HeadMode::Projection).unwrap();
        let norms = y.sqr().unwrap().sum(1).unwrap().sqrt().unwrap();
        assert!(scalar_max_abs(&(norms - 1.0).unwrap()) <= 1e-6);
        assert!(matches!(
            head_forward(&randn(3, &[2, 6, 5, 5]), &head, HeadMode::Logits),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn zero_logit_head_gives_uniform_softmax() {
        let head = Head::new(&mut Initializer::new(0, DType::F64), 6, 2, HeadMode::Logits).unwrap();
        zero_all(&head);
        let y = head_forward(&randn(3, &[1, 6, 3, 3]), &head, HeadMode::Logits).unwrap();
        let p = softmax_last(&y.permute((0, 2, 3, 1)).unwrap()).unwrap();
        assert!(scalar_max_abs(&(p - 0.5).unwrap()) < 1e-15);
    }

    #[test]
    fn identity_kernel_projection_rescales_rows() {
        let head = Head::new(&mut Initializer::new(0, DType::F64), 8, 8, HeadMode::Projection).unwrap();
        let eye = Tensor::eye(8, DType::F64, &Device::Cpu).unwrap().reshape((8, 8, 1, 1)).unwrap();
        head.conv.weight.set(&eye).unwrap();
        let b = head.conv.bias.as_ref().unwrap();
        b.set(&b.zeros_like().unwrap()).unwrap();
        let x = randn(8, &[1, 8, 2, 3]);
        let y = head_forward(&x, &head, HeadMode::Projection).unwrap();
        let xv: Vec<Vec<Vec<f64>>> = x.squeeze(0).unwrap().to_vec3().unwrap();
        let yv: Vec<Vec<Vec<f64>>> = y.squeeze(0).unwrap().to_vec3().unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let norm: f64 = (0..8).map(|c| xv[c][i][j].powi(2)).sum::<f64>().sqrt();
                for c in 0..8 {
                    assert!((yv[c][i][j] - xv[c][i][j] / norm).abs() < 1e-12);
                }
            }
        }
    }
}
