//! Recurrent and structural layers: LSTM, bidirectional LSTM, frame-pair
//! subsampling, frame-splitting upsampling, affine maps and gradient
//! reversal.
//!
//! Sequences are `[B×T×D]` tensors with per-utterance lengths; frames at or
//! past an utterance's length are padding. Recurrent outputs at padding are
//! exactly zero.
//!
//! Parameters live in a [`ParamStore`] under the layer's prefix. Matrices
//! are stored `[out × in]` and drawn from `U(-1/sqrt(in), 1/sqrt(in))`;
//! biases start at zero except the LSTM forget gate, which starts at 1.

use rand::Rng;

use crate::params::{Graph, ParamStore};
use crate::tape::Var;
use crate::tensor::{Result, Tensor, TensorError};

/// Affine map over the last axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub prefix: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, input: usize, output: usize) -> Self {
        Linear {
            prefix: prefix.into(),
            input,
            output,
        }
    }

    fn w(&self) -> String {
        format!("{}.w", self.prefix)
    }

    fn b(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.init_uniform(&self.w(), &[self.output, self.input], self.input, rng);
        store.init_const(&self.b(), &[self.output], 0.0);
    }

    /// `x[..×I]` to `[..×O]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.input) {
            return Err(TensorError::Shape {
                op: "linear",
                lhs: shape,
                rhs: vec![self.output, self.input],
            });
        }
        let rows = shape[..shape.len() - 1].iter().product();
        let (w, b) = (g.param(&self.w())?, g.param(&self.b())?);
        let flat = g.reshape(x, &[rows, self.input])?;
        let y = g.matmul_t(flat, w)?;
        let y = g.add_row(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.output;
        g.reshape(y, &out_shape)
    }
}

/// Single LSTM layer. Gate blocks are ordered input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize) -> Self {
        Lstm {
            prefix: prefix.into(),
            input,
            hidden,
        }
    }

    fn names(&self) -> [String; 3] {
        let p = &self.prefix;
        [format!("{p}.w_ih"), format!("{p}.w_hh"), format!("{p}.b")]
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let h = self.hidden;
        let [w_ih, w_hh, b] = self.names();
        store.init_uniform(&w_ih, &[4 * h, self.input], self.input, rng);
        store.init_uniform(&w_hh, &[4 * h, h], h, rng);
        let mut bias = vec![0.0; 4 * h];
        bias[h..2 * h].fill(1.0);
        store.insert(b, Tensor::vector(bias));
    }

    /// One recurrence step on `x[B×I]`, `h[B×H]`, `c[B×H]`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let [w_ih, _, b] = self.names();
        let xs = g.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != self.input {
            return Err(TensorError::Shape {
                op: "lstm_cell_step",
                lhs: xs,
                rhs: vec![4 * self.hidden, self.input],
            });
        }
        let (w, bias) = (g.param(&w_ih)?, g.param(&b)?);
        let proj = g.matmul_t(x, w)?;
        let proj = g.add_row(proj, bias)?;
        self.step_projected(g, proj, h, c)
    }

    /// Step given the input contribution `W_ih·x + b` already computed.
    fn step_projected(&self, g: &mut Graph, proj: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hd = self.hidden;
        for v in [h, c] {
            let s = g.shape(v);
            if s.len() != 2 || s[1] != hd {
                return Err(TensorError::Shape {
                    op: "lstm_cell_step",
                    lhs: s.to_vec(),
                    rhs: vec![4 * hd, hd],
                });
            }
        }
        let [_, w_hh, _] = self.names();
        let w = g.param(&w_hh)?;
        let rec = g.matmul_t(h, w)?;
        let gates = g.add(proj, rec)?;
        let parts = g.split(gates, &[hd; 4], 1)?;
        let i = g.sigmoid(parts[0])?;
        let f = g.sigmoid(parts[1])?;
        let cand = g.tanh(parts[2])?;
        let o = g.sigmoid(parts[3])?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_new = g.add(keep, write)?;
        let squashed = g.tanh(c_new)?;
        let h_new = g.mul(o, squashed)?;
        Ok((h_new, c_new))
    }

    /// Runs over `seq[B×T×I]` in one direction, returning `[B×T×H]`.
    fn run(&self, g: &mut Graph, seq: Var, lengths: &[usize], reverse: bool) -> Result<Var> {
        let s = g.shape(seq).to_vec();
        let (bsz, t_len) = (s[0], s[1]);
        let hd = self.hidden;
        let [w_ih, _, b] = self.names();
        let (w, bias) = (g.param(&w_ih)?, g.param(&b)?);
        let flat = g.reshape(seq, &[bsz * t_len, self.input])?;
        let proj = g.matmul_t(flat, w)?;
        let proj = g.add_row(proj, bias)?;
        let proj = g.reshape(proj, &[bsz, t_len, 4 * hd])?;

        let mut h = g.constant(Tensor::zeros(&[bsz, hd]));
        let mut c = g.constant(Tensor::zeros(&[bsz, hd]));
        let mut outputs = vec![None; t_len];
        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for t in order {
            let xp = g.slice(proj, 1, t, 1)?;
            let xp = g.reshape(xp, &[bsz, 4 * hd])?;
            let (mut h_new, mut c_new) = self.step_projected(g, xp, h, c)?;
            if lengths.iter().any(|&l| t >= l) {
                let m: Vec<f64> = lengths.iter().map(|&l| f64::from(u8::from(t < l))).collect();
                let m = g.constant(Tensor::new(vec![bsz, 1], m));
                h_new = g.mul(h_new, m)?;
                c_new = g.mul(c_new, m)?;
            }
            h = h_new;
            c = c_new;
            outputs[t] = Some(g.reshape(h, &[bsz, 1, hd])?);
        }
        let outputs: Vec<Var> = outputs.into_iter().map(Option::unwrap).collect();
        g.concat(&outputs, 1)
    }
}

/// Bidirectional LSTM; output frames are `[forward, backward]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Blstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl Blstm {
    pub fn new(prefix: &str, input: usize, hidden: usize) -> Self {
        Blstm {
            fwd: Lstm::new(format!("{prefix}.fwd"), input, hidden),
            bwd: Lstm::new(format!("{prefix}.bwd"), input, hidden),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.fwd.init(store, rng);
        self.bwd.init(store, rng);
    }

    /// `seq[B×T×I]` to `[B×T×2H]`; zero initial states.
    pub fn forward(&self, g: &mut Graph, seq: Var, lengths: &[usize]) -> Result<Var> {
        let s = g.shape(seq).to_vec();
        if s.len() != 3 || s[2] != self.fwd.input || s[0] != lengths.len() {
            return Err(TensorError::invalid(
                "blstm_forward",
                format!(
                    "input {s:?} with {} lengths for input dim {}",
                    lengths.len(),
                    self.fwd.input
                ),
            ));
        }
        if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > s[1]) {
            return Err(TensorError::invalid(
                "blstm_forward",
                format!("length {bad} outside 1..={}", s[1]),
            ));
        }
        let f = self.fwd.run(g, seq, lengths, false)?;
        let b = self.bwd.run(g, seq, lengths, true)?;
        g.concat(&[f, b], 2)
    }
}

/// Merges each pair of consecutive frames `(u_{2i-1}, u_{2i})` into one
/// projected frame. Odd-length inputs get one zero frame appended.
#[derive(Debug, Clone, PartialEq)]
pub struct Subsample {
    pub proj: Linear,
}

impl Subsample {
    pub fn new(prefix: &str, frame_dim: usize, out_dim: usize) -> Self {
        Subsample {
            proj: Linear::new(format!("{prefix}.proj"), 2 * frame_dim, out_dim),
        }
    }

    pub fn frame_dim(&self) -> usize {
        self.proj.input / 2
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.proj.init(store, rng);
    }

    pub fn output_lengths(lengths: &[usize]) -> Vec<usize> {
        lengths.iter().map(|l| l.div_ceil(2)).collect()
    }

    /// `seq[B×T×D]` to `[B×⌈T/2⌉×D′]`.
    pub fn forward(&self, g: &mut Graph, seq: Var) -> Result<Var> {
        let s = g.shape(seq).to_vec();
        let d = self.frame_dim();
        if s.len() != 3 || s[2] != d {
            return Err(TensorError::Shape {
                op: "subsample",
                lhs: s,
                rhs: vec![self.proj.output, self.proj.input],
            });
        }
        if s[1] == 0 {
            return Err(TensorError::invalid("subsample", "empty sequence"));
        }
        let mut x = seq;
        if s[1] % 2 == 1 {
            let pad = g.constant(Tensor::zeros(&[s[0], 1, d]));
            x = g.concat(&[seq, pad], 1)?;
        }
        let pairs = s[1].div_ceil(2);
        let merged = g.reshape(x, &[s[0], pairs, 2 * d])?;
        self.proj.forward(g, merged)
    }
}

/// Splits every frame in two: a BLSTM output frame `[u_{2i-1}, u_{2i}]` is
/// cut into its halves, each projected by the same matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Upsample {
    pub blstm: Blstm,
    pub proj: Linear,
}

impl Upsample {
    pub fn new(prefix: &str, input: usize, hidden: usize, out_dim: usize) -> Self {
        Upsample {
            blstm: Blstm::new(&format!("{prefix}.blstm"), input, hidden),
            proj: Linear::new(format!("{prefix}.proj"), hidden, out_dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.blstm.init(store, rng);
        self.proj.init(store, rng);
    }

    pub fn output_lengths(lengths: &[usize]) -> Vec<usize> {
        lengths.iter().map(|l| 2 * l).collect()
    }

    /// `fused[B×L×F]` to `[B×2L×D]`.
    pub fn forward(&self, g: &mut Graph, fused: Var, lengths: &[usize]) -> Result<Var> {
        let out_dim = self.blstm.output_dim();
        if out_dim % 2 != 0 {
            return Err(TensorError::invalid("upsample", "BLSTM output dim is odd"));
        }
        let y = self.blstm.forward(g, fused, lengths)?;
        let s = g.shape(y).to_vec();
        let halves = g.reshape(y, &[s[0], 2 * s[1], out_dim / 2])?;
        self.proj.forward(g, halves)
    }
}

/// Identity forward, gradient multiplied by `-scale` on the way back.
pub fn gradient_reversal(g: &mut Graph, x: Var, scale: f64) -> Result<Var> {
    if scale <= 0.0 || !scale.is_finite() {
        return Err(TensorError::invalid(
            "gradient_reversal",
            format!("scale must be positive, got {scale}"),
        ));
    }
    g.gradient_reversal(x, scale)
}

/// `[B×T×1]` tensor holding 1 at valid frames and 0 at padding.
pub fn frame_mask(lengths: &[usize], t_len: usize) -> Tensor {
    let data = lengths
        .iter()
        .flat_map(|&l| (0..t_len).map(move |t| if t < l { 1.0 } else { 0.0 }))
        .collect();
    Tensor::new(vec![lengths.len(), t_len, 1], data)
}
