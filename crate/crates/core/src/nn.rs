//! Parameterized layers: fully connected maps, convolution blocks, the LSTM
//! cell and the two sequence runners (zero-initialised and circular).
//!
//! Parameter structs are generic over their leaf type so the same layout is
//! used for stored values (`Tensor`), recorded handles (`Var`) and gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Whether a parameter is a weight (decayed) or a bias (not decayed).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// A structured set of named parameters.
pub trait ParamTree<T> {
    type Out<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &T) -> U) -> Self::Out<U>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &'a T));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut T));
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine map `weight · x + bias`; `weight` is `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct FcParams<T = Tensor> {
    pub weight: T,
    pub bias: T,
}

impl<T> ParamTree<T> for FcParams<T> {
    type Out<U> = FcParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &T) -> U) -> FcParams<U> {
        FcParams {
            weight: f(&join(prefix, "weight"), ParamKind::Weight, &self.weight),
            bias: f(&join(prefix, "bias"), ParamKind::Bias, &self.bias),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &'a T)) {
        f(&join(prefix, "weight"), ParamKind::Weight, &self.weight);
        f(&join(prefix, "bias"), ParamKind::Bias, &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut T)) {
        f(&join(prefix, "weight"), ParamKind::Weight, &mut self.weight);
        f(&join(prefix, "bias"), ParamKind::Bias, &mut self.bias);
    }
}

impl FcParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            ([out, _], [b]) if out == b => Ok(FcParams { weight, bias }),
            (w, b) => Err(Error::shape(
                "fc",
                format!("weight {w:?} and bias {b:?} are inconsistent"),
            )),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Convolution kernels (`K × C × kh × kw`) with per-kernel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlockParams<T = Tensor> {
    pub kernels: T,
    pub bias: T,
    pub stride: usize,
    pub pad: usize,
}

impl<T> ParamTree<T> for ConvBlockParams<T> {
    type Out<U> = ConvBlockParams<U>;

    fn map_named<U>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ParamKind, &T) -> U,
    ) -> ConvBlockParams<U> {
        ConvBlockParams {
            kernels: f(&join(prefix, "kernels"), ParamKind::Weight, &self.kernels),
            bias: f(&join(prefix, "bias"), ParamKind::Bias, &self.bias),
            stride: self.stride,
            pad: self.pad,
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &'a T)) {
        f(&join(prefix, "kernels"), ParamKind::Weight, &self.kernels);
        f(&join(prefix, "bias"), ParamKind::Bias, &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut T)) {
        f(&join(prefix, "kernels"), ParamKind::Weight, &mut self.kernels);
        f(&join(prefix, "bias"), ParamKind::Bias, &mut self.bias);
    }
}

/// Gate order used throughout: input, forget, output, candidate.
pub const GATES: [&str; 4] = ["i", "f", "o", "c"];

/// The eight gate matrices and four biases of an LSTM cell.
///
/// Input matrices are `hidden × input`, recurrent ones `hidden × hidden`,
/// indexed in [`GATES`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellParams<T = Tensor> {
    pub w_x: [T; 4],
    pub w_h: [T; 4],
    pub b: [T; 4],
}

impl<T> ParamTree<T> for LstmCellParams<T> {
    type Out<U> = LstmCellParams<U>;

    fn map_named<U>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ParamKind, &T) -> U,
    ) -> LstmCellParams<U> {
        let mut gate = |kind, stem: &str, g: usize, t: &T| f(&join(prefix, &format!("{stem}{}", GATES[g])), kind, t);
        let w_x = std::array::from_fn(|g| gate(ParamKind::Weight, "w_x", g, &self.w_x[g]));
        let w_h = std::array::from_fn(|g| gate(ParamKind::Weight, "w_h", g, &self.w_h[g]));
        let b = std::array::from_fn(|g| gate(ParamKind::Bias, "b_", g, &self.b[g]));
        LstmCellParams { w_x, w_h, b }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &'a T)) {
        for (g, name) in GATES.iter().enumerate() {
            f(&join(prefix, &format!("w_x{name}")), ParamKind::Weight, &self.w_x[g]);
        }
        for (g, name) in GATES.iter().enumerate() {
            f(&join(prefix, &format!("w_h{name}")), ParamKind::Weight, &self.w_h[g]);
        }
        for (g, name) in GATES.iter().enumerate() {
            f(&join(prefix, &format!("b_{name}")), ParamKind::Bias, &self.b[g]);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut T)) {
        for (g, name) in GATES.iter().enumerate() {
            f(&join(prefix, &format!("w_x{name}")), ParamKind::Weight, &mut self.w_x[g]);
        }
        for (g, name) in GATES.iter().enumerate() {
            f(&join(prefix, &format!("w_h{name}")), ParamKind::Weight, &mut self.w_h[g]);
        }
        for (g, name) in GATES.iter().enumerate() {
            f(&join(prefix, &format!("b_{name}")), ParamKind::Bias, &mut self.b[g]);
        }
    }
}

impl LstmCellParams {
    /// All-zero cell.
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        LstmCellParams {
            w_x: std::array::from_fn(|_| Tensor::zeros(&[hidden_dim, input_dim])),
            w_h: std::array::from_fn(|_| Tensor::zeros(&[hidden_dim, hidden_dim])),
            b: std::array::from_fn(|_| Tensor::zeros(&[hidden_dim])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_x[0].shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_x[0].shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let (h, i) = (self.hidden_dim(), self.input_dim());
        for g in 0..4 {
            if self.w_x[g].shape() != [h, i]
                || self.w_h[g].shape() != [h, h]
                || self.b[g].shape() != [h]
            {
                return Err(Error::shape(
                    "lstm",
                    format!("gate `{}` disagrees with hidden {h} / input {i}", GATES[g]),
                ));
            }
        }
        Ok(())
    }

    /// One eager step on plain vectors; returns `(h_t, c_t)`.
    pub fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let cell = bind_lstm(&mut tape, self, false)?;
        let x = tape.constant(Tensor::row(x.to_vec())?);
        let h = tape.constant(Tensor::row(h_prev.to_vec())?);
        let c = tape.constant(Tensor::row(c_prev.to_vec())?);
        let (h, c) = lstm_step(&mut tape, &cell, x, h, c)?;
        Ok((tape.value(h).data().to_vec(), tape.value(c).data().to_vec()))
    }
}

/// Records every tensor of `params` on `tape`, tracked or constant.
pub fn record<P: ParamTree<Tensor>>(tape: &mut Tape, params: &P, tracked: bool) -> P::Out<Var> {
    params.map_named("", &mut |_, _, t| {
        if tracked {
            tape.leaf(t.clone())
        } else {
            tape.constant(t.clone())
        }
    })
}

/// Number of complete passes a circular runner makes over its sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct CircleConfig {
    depth: usize,
}

impl CircleConfig {
    pub fn new(depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidArgument("circle depth must be at least 1".into()));
        }
        Ok(CircleConfig { depth })
    }

    pub fn depth(self) -> usize {
        self.depth
    }
}

impl TryFrom<usize> for CircleConfig {
    type Error = Error;

    fn try_from(depth: usize) -> Result<Self> {
        CircleConfig::new(depth)
    }
}

impl From<CircleConfig> for usize {
    fn from(c: CircleConfig) -> usize {
        c.depth
    }
}

/// LSTM parameters on a tape with weights pre-transposed for row-vector inputs.
#[derive(Clone, Debug)]
pub struct BoundLstm {
    w_x_t: [Var; 4],
    w_h_t: [Var; 4],
    b: [Var; 4],
    input_dim: usize,
    hidden_dim: usize,
}

impl BoundLstm {
    pub fn from_vars(tape: &mut Tape, vars: &LstmCellParams<Var>) -> Result<Self> {
        let hidden_dim = tape.value(vars.w_x[0]).shape()[0];
        let input_dim = tape.value(vars.w_x[0]).shape()[1];
        let mut w_x_t = [vars.w_x[0]; 4];
        let mut w_h_t = [vars.w_h[0]; 4];
        for g in 0..4 {
            if tape.value(vars.w_x[g]).shape() != [hidden_dim, input_dim]
                || tape.value(vars.w_h[g]).shape() != [hidden_dim, hidden_dim]
                || tape.value(vars.b[g]).shape() != [hidden_dim]
            {
                return Err(Error::shape(
                    "lstm",
                    format!("gate `{}` disagrees with hidden {hidden_dim} / input {input_dim}", GATES[g]),
                ));
            }
            w_x_t[g] = tape.transpose2d(vars.w_x[g])?;
            w_h_t[g] = tape.transpose2d(vars.w_h[g])?;
        }
        Ok(BoundLstm {
            w_x_t,
            w_h_t,
            b: vars.b,
            input_dim,
            hidden_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }
}

/// Records `params` and prepares them for stepping.
pub fn bind_lstm(tape: &mut Tape, params: &LstmCellParams, tracked: bool) -> Result<BoundLstm> {
    params.validate()?;
    let vars = record(tape, params, tracked);
    BoundLstm::from_vars(tape, &vars)
}

/// One LSTM step on `1 × n` row vectors; returns `(h_t, c_t)`.
///
/// ```text
/// i = σ(W_xi x + W_hi h + b_i)    f = σ(W_xf x + W_hf h + b_f)
/// o = σ(W_xo x + W_ho h + b_o)    g = tanh(W_xc x + W_hc h + b_c)
/// c' = f ⊙ c + i ⊙ g              h' = o ⊙ tanh(c')
/// ```
pub fn lstm_step(tape: &mut Tape, cell: &BoundLstm, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
    let check = |tape: &Tape, v: Var, n: usize, what: &str| {
        if tape.value(v).shape() != [1, n] {
            Err(Error::shape(
                "lstm_step",
                format!("{what} must be 1×{n}, got {:?}", tape.value(v).shape()),
            ))
        } else {
            Ok(())
        }
    };
    check(tape, x, cell.input_dim, "input")?;
    check(tape, h_prev, cell.hidden_dim, "hidden state")?;
    check(tape, c_prev, cell.hidden_dim, "cell state")?;

    let mut pre = [x; 4];
    for g in 0..4 {
        let from_x = tape.matmul(x, cell.w_x_t[g])?;
        let from_h = tape.matmul(h_prev, cell.w_h_t[g])?;
        let sum = tape.add(from_x, from_h)?;
        pre[g] = tape.add_bias(sum, cell.b[g])?;
    }
    let i = tape.sigmoid(pre[0]);
    let f = tape.sigmoid(pre[1]);
    let o = tape.sigmoid(pre[2]);
    let g = tape.tanh(pre[3]);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let squashed = tape.tanh(c);
    let h = tape.mul(o, squashed)?;
    Ok((h, c))
}

fn zero_state(tape: &mut Tape, cell: &BoundLstm) -> Result<(Var, Var)> {
    let z = Tensor::row(vec![0.0; cell.hidden_dim])?;
    Ok((tape.constant(z.clone()), tape.constant(z)))
}

/// Left-to-right recurrence from zero hidden and cell state.
pub fn rnn_run_plain(tape: &mut Tape, cell: &BoundLstm, inputs: &[Var]) -> Result<Vec<Var>> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("recurrence over an empty sequence".into()));
    }
    let (mut h, mut c) = zero_state(tape, cell)?;
    let mut out = Vec::with_capacity(inputs.len());
    for &x in inputs {
        (h, c) = lstm_step(tape, cell, x, h, c)?;
        out.push(h);
    }
    Ok(out)
}

/// Circular recurrence: the state after the last step feeds the first step
/// of the next pass. The sequence is traversed `depth` times starting from
/// zero state, and the hidden states of the final pass are returned.
pub fn rnn_run_circle(tape: &mut Tape, cell: &BoundLstm, inputs: &[Var], cfg: CircleConfig) -> Result<Vec<Var>> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("recurrence over an empty sequence".into()));
    }
    let (mut h, mut c) = zero_state(tape, cell)?;
    let mut out = Vec::with_capacity(inputs.len());
    for pass in 0..cfg.depth() {
        let last = pass + 1 == cfg.depth();
        for &x in inputs {
            (h, c) = lstm_step(tape, cell, x, h, c)?;
            if last {
                out.push(h);
            }
        }
    }
    Ok(out)
}

/// `x · weightᵀ + bias` for a batch of row vectors `x` (`m × in`).
pub fn fc_forward(tape: &mut Tape, p: &FcParams<Var>, x: Var) -> Result<Var> {
    let wt = tape.transpose2d(p.weight)?;
    let y = tape.matmul(x, wt)?;
    tape.add_bias(y, p.bias)
}

/// Convolution, ReLU, then 2×2 max-pool.
pub fn conv_block(tape: &mut Tape, p: &ConvBlockParams<Var>, x: Var) -> Result<Var> {
    let y = tape.conv2d(x, p.kernels, Some(p.bias), p.stride, p.pad)?;
    let y = tape.relu(y);
    tape.maxpool2(y)
}

/// Parameter initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// `U(−√(3/fan_in), √(3/fan_in))` weights, zero biases except the
    /// LSTM forget gate, which starts at 1.
    #[default]
    UniformFanIn,
    /// Everything zero.
    Zeros,
}

/// Largest weight magnitude drawn by [`InitScheme::UniformFanIn`].
pub fn fan_in_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

fn uniform_tensor(shape: &[usize], fan_in: usize, scheme: InitScheme, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if scheme == InitScheme::UniformFanIn {
        let bound = fan_in_bound(fan_in);
        for v in t.data_mut() {
            *v = rng.random_range(-bound..=bound);
        }
    }
    t
}

pub fn init_fc(in_dim: usize, out_dim: usize, scheme: InitScheme, rng: &mut ChaCha8Rng) -> FcParams {
    FcParams {
        weight: uniform_tensor(&[out_dim, in_dim], in_dim, scheme, rng),
        bias: Tensor::zeros(&[out_dim]),
    }
}

pub fn init_conv(
    in_channels: usize,
    kernels: usize,
    size: usize,
    stride: usize,
    pad: usize,
    scheme: InitScheme,
    rng: &mut ChaCha8Rng,
) -> ConvBlockParams {
    ConvBlockParams {
        kernels: uniform_tensor(
            &[kernels, in_channels, size, size],
            in_channels * size * size,
            scheme,
            rng,
        ),
        bias: Tensor::zeros(&[kernels]),
        stride,
        pad,
    }
}

pub fn init_lstm(input_dim: usize, hidden_dim: usize, scheme: InitScheme, rng: &mut ChaCha8Rng) -> LstmCellParams {
    let w_x = std::array::from_fn(|_| uniform_tensor(&[hidden_dim, input_dim], input_dim, scheme, rng));
    let w_h = std::array::from_fn(|_| uniform_tensor(&[hidden_dim, hidden_dim], hidden_dim, scheme, rng));
    let mut b: [Tensor; 4] = std::array::from_fn(|_| Tensor::zeros(&[hidden_dim]));
    if scheme == InitScheme::UniformFanIn {
        b[1] = Tensor::full(&[hidden_dim], 1.0);
    }
    LstmCellParams { w_x, w_h, b }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Gate-by-gate scalar LSTM, independent of the tape.
    fn scalar_step(w: &[f64; 12], x: f64, h: f64, c: f64) -> (f64, f64) {
        let i = sig(w[0] * x + w[4] * h + w[8]);
        let f = sig(w[1] * x + w[5] * h + w[9]);
        let o = sig(w[2] * x + w[6] * h + w[10]);
        let g = (w[3] * x + w[7] * h + w[11]).tanh();
        let c = f * c + i * g;
        (o * c.tanh(), c)
    }

    fn scalar_cell(w: &[f64; 12]) -> LstmCellParams {
        let t = |v: f64| Tensor::new(vec![1, 1], vec![v]).unwrap();
        LstmCellParams {
            w_x: std::array::from_fn(|g| t(w[g])),
            w_h: std::array::from_fn(|g| t(w[4 + g])),
            b: std::array::from_fn(|g| Tensor::new(vec![1], vec![w[8 + g]]).unwrap()),
        }
    }

    const W: [f64; 12] = [0.5, -0.3, 0.8, 1.2, 0.7, 0.2, -0.6, 0.9, 0.1, 0.4, -0.2, 0.05];

    fn run_scalar(plain_inputs: &[f64], depth: Option<usize>) -> Vec<f64> {
        let cell = scalar_cell(&W);
        let mut tape = Tape::new();
        let bound = bind_lstm(&mut tape, &cell, false).unwrap();
        let xs: Vec<Var> = plain_inputs
            .iter()
            .map(|&v| tape.constant(Tensor::row(vec![v]).unwrap()))
            .collect();
        let hs = match depth {
            None => rnn_run_plain(&mut tape, &bound, &xs).unwrap(),
            Some(d) => rnn_run_circle(&mut tape, &bound, &xs, CircleConfig::new(d).unwrap()).unwrap(),
        };
        hs.iter().map(|&h| tape.value(h).data()[0]).collect()
    }

    #[test]
    fn zero_cell_gives_half_gates_and_zero_state() {
        let cell = LstmCellParams::zeros(3, 2);
        let (h, c) = cell.step(&[1.0, -2.0, 5.0], &[0.0; 2], &[0.0; 2]).unwrap();
        assert_eq!(h, vec![0.0; 2]);
        assert_eq!(c, vec![0.0; 2]);
    }

    #[test]
    fn scalar_step_matches_hand_arithmetic() {
        let (h, c) = scalar_cell(&W).step(&[0.3], &[-0.2], &[0.4]).unwrap();
        let (eh, ec) = scalar_step(&W, 0.3, -0.2, 0.4);
        assert!((h[0] - eh).abs() < 1e-15);
        assert!((c[0] - ec).abs() < 1e-15);
    }

    #[test]
    fn plain_run_matches_scalar_oracle() {
        let xs = [0.3, -1.1, 0.7];
        let got = run_scalar(&xs, None);
        let (mut h, mut c) = (0.0, 0.0);
        for (k, &x) in xs.iter().enumerate() {
            (h, c) = scalar_step(&W, x, h, c);
            assert!((got[k] - h).abs() < 1e-15);
        }
    }

    #[test]
    fn circle_depth_two_reads_second_pass_of_tiled_stream() {
        let xs = [0.3, -1.1, 0.7];
        let got = run_scalar(&xs, Some(2));
        let (mut h, mut c) = (0.0, 0.0);
        let mut stream = Vec::new();
        for &x in xs.iter().chain(xs.iter()) {
            (h, c) = scalar_step(&W, x, h, c);
            stream.push(h);
        }
        for k in 0..3 {
            assert!((got[k] - stream[3 + k]).abs() < 1e-15);
        }
        assert_eq!(run_scalar(&xs, Some(1)), run_scalar(&xs, None));
    }

    #[test]
    fn empty_sequence_rejected() {
        let mut tape = Tape::new();
        let bound = bind_lstm(&mut tape, &LstmCellParams::zeros(1, 1), false).unwrap();
        assert!(rnn_run_plain(&mut tape, &bound, &[]).is_err());
        assert!(rnn_run_circle(&mut tape, &bound, &[], CircleConfig::new(2).unwrap()).is_err());
        assert!(CircleConfig::new(0).is_err());
    }

    #[test]
    fn lstm_dimension_mismatch_rejected() {
        let cell = LstmCellParams::zeros(3, 2);
        assert!(cell.step(&[1.0, 2.0], &[0.0; 2], &[0.0; 2]).is_err());
        assert!(cell.step(&[1.0, 2.0, 3.0], &[0.0; 3], &[0.0; 2]).is_err());
    }

    #[test]
    fn fc_identity_and_bias_only() {
        let mut tape = Tape::new();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let p = FcParams::new(eye, Tensor::zeros(&[3])).unwrap();
        let vars = record(&mut tape, &p, false);
        let x = tape.constant(Tensor::row(vec![1.0, -2.0, 3.5]).unwrap());
        let y = fc_forward(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 3.5]);

        let p = FcParams::new(Tensor::zeros(&[2, 3]), Tensor::new(vec![2], vec![0.25, -4.0]).unwrap()).unwrap();
        let vars = record(&mut tape, &p, false);
        let y = fc_forward(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, -4.0]);
    }

    #[test]
    fn fc_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = init_fc(10, 6, InitScheme::UniformFanIn, &mut rng);
        let p = FcParams {
            bias: Tensor::new(vec![6], (0..6).map(|i| i as f64 * 0.1).collect()).unwrap(),
            ..p
        };
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let vars = record(&mut tape, &p, false);
        let xv = tape.constant(Tensor::row(x.clone()).unwrap());
        let y = fc_forward(&mut tape, &vars, xv).unwrap();
        for o in 0..6 {
            let mut acc = p.bias.data()[o];
            for i in 0..10 {
                acc += p.weight.at2(o, i) * x[i];
            }
            assert!((tape.value(y).data()[o] - acc).abs() < 1e-14);
        }
        let bad = tape.constant(Tensor::row(vec![0.0; 9]).unwrap());
        assert!(fc_forward(&mut tape, &vars, bad).is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_fc(100, 20, InitScheme::UniformFanIn, &mut ChaCha8Rng::seed_from_u64(9));
        let b = init_fc(100, 20, InitScheme::UniformFanIn, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let bound = (1.0f64 / 100.0).sqrt() * 3f64.sqrt();
        assert!(a.weight.data().iter().all(|w| w.abs() <= bound));
        assert!(a.bias.data().iter().all(|&b| b == 0.0));

        let cell = init_lstm(4, 3, InitScheme::UniformFanIn, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(cell.b[1].data().iter().all(|&b| b == 1.0));
        for g in [0, 2, 3] {
            assert!(cell.b[g].data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn init_mean_within_three_standard_errors() {
        let p = init_fc(100, 100, InitScheme::UniformFanIn, &mut ChaCha8Rng::seed_from_u64(17));
        let w = p.weight.data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        // Var of U(−b, b) is b²/3.
        let sd = fan_in_bound(100) / 3f64.sqrt();
        assert!(mean.abs() < 3.0 * sd / n.sqrt(), "mean {mean}");
    }
}

#[cfg(test)]
mod gradient_and_property_tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_cell(input: usize, hidden: usize, seed: u64, recurrent_scale: f64) -> LstmCellParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cell = init_lstm(input, hidden, InitScheme::UniformFanIn, &mut rng);
        for g in 0..4 {
            cell.w_h[g].data_mut().iter_mut().for_each(|v| *v *= recurrent_scale);
            cell.b[g].data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
        cell
    }

    fn random_inputs(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect()).collect()
    }

    /// Hidden states from the runner selected by `depth`.
    fn run(cell: &LstmCellParams, xs: &[Vec<f64>], depth: Option<usize>) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = bind_lstm(&mut tape, cell, false).unwrap();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(Tensor::row(x.clone()).unwrap())).collect();
        let hs = match depth {
            None => rnn_run_plain(&mut tape, &bound, &vars).unwrap(),
            Some(d) => rnn_run_circle(&mut tape, &bound, &vars, CircleConfig::new(d).unwrap()).unwrap(),
        };
        hs.iter().map(|&h| tape.value(h).data().to_vec()).collect()
    }

    /// `Σ h` over the sequence as a function of gate block `block` of `cell`.
    fn block_check(cell: &LstmCellParams, xs: &[Vec<f64>], depth: Option<usize>, block: usize) -> f64 {
        let point = {
            let mut all = Vec::new();
            cell.visit("", &mut |_, _, t| all.push(t.clone()));
            all[block].clone()
        };
        grad_check(
            |tape, v| {
                let mut k = 0;
                let vars = cell.map_named("", &mut |_, _, t| {
                    k += 1;
                    if k - 1 == block { v } else { tape.constant(t.clone()) }
                });
                let bound = BoundLstm::from_vars(tape, &vars)?;
                let inputs = xs
                    .iter()
                    .map(|x| Ok(tape.constant(Tensor::row(x.clone())?)))
                    .collect::<Result<Vec<_>>>()?;
                let hs = match depth {
                    None => rnn_run_plain(tape, &bound, &inputs)?,
                    Some(d) => rnn_run_circle(tape, &bound, &inputs, CircleConfig::new(d)?)?,
                };
                let stacked = tape.concat_rows(&hs)?;
                Ok(tape.sum(stacked))
            },
            &point,
            1e-6,
        )
        .unwrap()
    }

    #[test]
    fn lstm_step_gradients_for_all_twelve_blocks() {
        let cell = random_cell(3, 2, 21, 1.0);
        let xs = random_inputs(1, 3, 22);
        for block in 0..12 {
            let e = block_check(&cell, &xs, None, block);
            assert!(e < 1e-5, "block {block}: {e}");
        }
    }

    #[test]
    fn lstm_step_input_and_state_gradients() {
        let cell = random_cell(3, 2, 23, 1.0);
        let x = Tensor::row(vec![0.4, -0.9, 1.3]).unwrap();
        let e = grad_check(
            |tape, xv| {
                let bound = bind_lstm(tape, &cell, false)?;
                let h = tape.constant(Tensor::row(vec![0.3, -0.2])?);
                let c = tape.constant(Tensor::row(vec![-0.5, 0.8])?);
                let (h, c) = lstm_step(tape, &bound, xv, h, c)?;
                let both = tape.concat_rows(&[h, c])?;
                Ok(tape.sum(both))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(e < 1e-5, "{e}");
    }

    #[test]
    fn circle_bptt_scalar_cell() {
        let cell = random_cell(1, 1, 24, 1.0);
        let xs = random_inputs(4, 1, 25);
        for block in 0..12 {
            let e = block_check(&cell, &xs, Some(2), block);
            assert!(e < 1e-4, "block {block}: {e}");
        }
    }

    #[test]
    fn outputs_bounded_for_extreme_inputs() {
        let cell = random_cell(2, 3, 26, 5.0);
        let xs: Vec<Vec<f64>> = [[1e3, -1e3], [-50.0, 80.0], [0.0, 1e-300]].iter().map(|r| r.to_vec()).collect();
        for h in run(&cell, &xs, Some(3)) {
            assert!(h.iter().all(|v| v.is_finite() && v.abs() < 1.0));
        }
    }

    #[test]
    fn single_step_run_is_one_lstm_step() {
        let cell = random_cell(2, 3, 27, 1.0);
        let x = vec![0.2, -0.7];
        let (h, _) = cell.step(&x, &[0.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(run(&cell, &[x], None), vec![h]);
    }

    #[test]
    fn zero_cell_circle_stays_zero() {
        let cell = LstmCellParams::zeros(2, 3);
        let xs = random_inputs(5, 2, 28);
        for d in [1, 2, 5] {
            for h in run(&cell, &xs, Some(d)) {
                assert!(h.iter().all(|&v| v == 0.0));
            }
        }
    }

    fn max_abs(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn circle_equals_tiled_plain_run(
            seed in any::<u64>(),
            t in prop::sample::select(vec![1usize, 2, 3, 6, 20]),
            d in 1usize..=3,
            input in 1usize..4,
            hidden in 1usize..4,
        ) {
            let cell = random_cell(input, hidden, seed, 1.0);
            let xs = random_inputs(t, input, seed ^ 0xABCD);
            let circle = run(&cell, &xs, Some(d));
            let tiled: Vec<Vec<f64>> = xs.iter().cycle().take(d * t).cloned().collect();
            let plain = run(&cell, &tiled, None);
            prop_assert!(max_abs(&circle, &plain[(d - 1) * t..]) <= 1e-12);
            if d == 1 {
                prop_assert!(max_abs(&circle, &run(&cell, &xs, None)) <= 1e-12);
            }
        }

        #[test]
        fn circular_shift_discrepancy_shrinks_with_depth(seed in any::<u64>(), shift in 1usize..5) {
            // Recurrent weights scaled so every ‖W_h‖₂ ≤ ‖W_h‖_F ≤ 0.3.
            let mut cell = random_cell(2, 3, seed, 1.0);
            for g in 0..4 {
                let norm = cell.w_h[g].sum_squares().sqrt();
                if norm > 0.3 {
                    let s = 0.3 / norm;
                    cell.w_h[g].data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
            let t = 6;
            let xs = random_inputs(t, 2, seed.wrapping_add(1));
            let shifted: Vec<Vec<f64>> = (0..t).map(|i| xs[(i + shift) % t].clone()).collect();
            let mut prev = f64::INFINITY;
            for d in [1, 2, 4, 8] {
                let base = run(&cell, &xs, Some(d));
                let moved = run(&cell, &shifted, Some(d));
                let realigned: Vec<Vec<f64>> = (0..t).map(|i| base[(i + shift) % t].clone()).collect();
                let diff = max_abs(&moved, &realigned);
                prop_assert!(diff <= prev + 1e-15, "depth {}: {} > {}", d, diff, prev);
                prev = diff;
            }
        }
    }
}
