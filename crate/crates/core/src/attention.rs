//! Hybrid location-aware content-based attention and the attention decoder.
//!
//! Energies combine the decoder state, each encoder frame and a convolution
//! of the previous alignment:
//!
//! `e[i,j] = wᵀ tanh(W s_i + V h_j + U (F * α_{i-1})_j + b)`
//!
//! The alignment is a masked softmax of the energies and the context is the
//! alignment-weighted sum of encoder frames. Padded encoder frames receive an
//! additive `-1e9` energy and exactly zero weight.

use rand::Rng;

use crate::layers::{Linear, Lstm};
use crate::params::{Graph, ParamStore};
use crate::tape::Var;
use crate::tensor::{Result, Tensor, TensorError};

pub const MASKED_ENERGY: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub prefix: String,
    pub state_dim: usize,
    pub enc_dim: usize,
    pub att_dim: usize,
    pub channels: usize,
    pub kernel: usize,
}

impl Attention {
    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let a = self.att_dim;
        store.init_uniform(&self.name("score"), &[1, a], a, rng);
        store.init_const(&self.name("bias"), &[a], 0.0);
        store.init_uniform(&self.name("query"), &[a, self.state_dim], self.state_dim, rng);
        store.init_uniform(&self.name("key"), &[a, self.enc_dim], self.enc_dim, rng);
        store.init_uniform(&self.name("loc"), &[a, self.channels], self.channels, rng);
        store.init_uniform(&self.name("conv"), &[self.kernel, self.channels], self.kernel, rng);
    }

    /// `V h_j` for every frame: `h[B×L×H]` to `[B×L×A]`. Computed once per
    /// utterance batch and reused at every decoder step.
    pub fn keys(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let s = g.shape(h).to_vec();
        if s.len() != 3 || s[2] != self.enc_dim {
            return Err(TensorError::invalid(
                "attention_energies",
                format!("encoder output {s:?}, expected [B, L, {}]", self.enc_dim),
            ));
        }
        if s[1] == 0 {
            return Err(TensorError::invalid("attention_energies", "no encoder frames"));
        }
        let v = g.param(&self.name("key"))?;
        let flat = g.reshape(h, &[s[0] * s[1], s[2]])?;
        let k = g.matmul_t(flat, v)?;
        g.reshape(k, &[s[0], s[1], self.att_dim])
    }

    /// Energies `[B×L]` for decoder state `s[B×S]` given precomputed keys.
    pub fn energies(
        &self,
        g: &mut Graph,
        state: Var,
        keys: Var,
        alpha_prev: Var,
        mask: &[bool],
    ) -> Result<Var> {
        let ks = g.shape(keys).to_vec();
        let (b, l, a) = (ks[0], ks[1], ks[2]);
        if g.shape(alpha_prev) != [b, l] || mask.len() != b * l {
            return Err(TensorError::invalid(
                "attention_energies",
                format!("alignment {:?} for keys {ks:?}", g.shape(alpha_prev)),
            ));
        }
        let query = g.param(&self.name("query"))?;
        let q = g.matmul_t(state, query)?;
        let q = g.repeat_rows(q, l)?;

        let conv = g.param(&self.name("conv"))?;
        let loc = g.param(&self.name("loc"))?;
        let feats = g.conv1d(alpha_prev, conv)?;
        let feats = g.reshape(feats, &[b * l, self.channels])?;
        let feats = g.matmul_t(feats, loc)?;
        let feats = g.reshape(feats, &[b, l, a])?;

        let sum = g.add(q, keys)?;
        let sum = g.add(sum, feats)?;
        let bias = g.param(&self.name("bias"))?;
        let sum = g.add_row(sum, bias)?;
        let act = g.tanh(sum)?;
        let act = g.reshape(act, &[b * l, a])?;
        let score = g.param(&self.name("score"))?;
        let e = g.matmul_t(act, score)?;
        let e = g.reshape(e, &[b, l])?;
        if mask.iter().all(|&m| m) {
            return Ok(e);
        }
        let offset: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { MASKED_ENERGY }).collect();
        let offset = g.constant(Tensor::new(vec![b, l], offset));
        g.add(e, offset)
    }

    /// Convenience form computing the keys from `h` directly.
    pub fn attention_energies(
        &self,
        g: &mut Graph,
        state: Var,
        h: Var,
        alpha_prev: Var,
        mask: &[bool],
    ) -> Result<Var> {
        let keys = self.keys(g, h)?;
        self.energies(g, state, keys, alpha_prev, mask)
    }
}

/// Alignment `α = softmax(e)` over valid frames and context `c = Σ_j α_j h_j`.
pub fn attention_context(g: &mut Graph, energies: Var, h: Var, mask: &[bool]) -> Result<(Var, Var)> {
    let hs = g.shape(h).to_vec();
    let alpha = g.softmax(energies, Some(mask))?;
    let row = g.reshape(alpha, &[hs[0], 1, hs[1]])?;
    let c = g.bmm(row, h)?;
    let c = g.reshape(c, &[hs[0], hs[2]])?;
    Ok((alpha, c))
}

/// Flattened `[B×L]` validity mask.
pub fn encoder_mask(lengths: &[usize], l: usize) -> Vec<bool> {
    lengths
        .iter()
        .flat_map(|&len| (0..l).map(move |j| j < len))
        .collect()
}

/// Decoder recurrent state between steps.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
    pub alpha: Var,
    pub context: Var,
}

/// Attention LSTM transducer with a single-layer softmax output over
/// `[s_i, c_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub embed_name: String,
    pub vocab: usize,
    pub embed_dim: usize,
    pub lstm: Lstm,
    pub attention: Attention,
    pub output: Linear,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        prefix: &str,
        vocab: usize,
        hidden: usize,
        enc_dim: usize,
        att_dim: usize,
        channels: usize,
        kernel: usize,
    ) -> Self {
        Decoder {
            embed_name: format!("{prefix}.embed"),
            vocab,
            embed_dim: hidden,
            lstm: Lstm::new(format!("{prefix}.lstm"), hidden + enc_dim, hidden),
            attention: Attention {
                prefix: format!("{prefix}.att"),
                state_dim: hidden,
                enc_dim,
                att_dim,
                channels,
                kernel,
            },
            output: Linear::new(format!("{prefix}.out"), hidden + enc_dim, vocab),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.init_uniform(&self.embed_name, &[self.vocab, self.embed_dim], self.embed_dim, rng);
        self.lstm.init(store, rng);
        self.attention.init(store, rng);
        self.output.init(store, rng);
    }

    /// Zero LSTM state and context, alignment uniform over valid frames.
    pub fn initial_state(&self, g: &mut Graph, lengths: &[usize], l: usize) -> DecoderState {
        let b = lengths.len();
        let hd = self.lstm.hidden;
        let alpha = lengths
            .iter()
            .flat_map(|&len| (0..l).map(move |j| if j < len { 1.0 / len as f64 } else { 0.0 }))
            .collect();
        DecoderState {
            h: g.constant(Tensor::zeros(&[b, hd])),
            c: g.constant(Tensor::zeros(&[b, hd])),
            alpha: g.constant(Tensor::new(vec![b, l], alpha)),
            context: g.constant(Tensor::zeros(&[b, self.attention.enc_dim])),
        }
    }

    /// One step: returns output logits `[B×V]` and the updated state.
    pub fn step(
        &self,
        g: &mut Graph,
        prev_tokens: &[usize],
        state: DecoderState,
        h: Var,
        keys: Var,
        mask: &[bool],
    ) -> Result<(Var, DecoderState)> {
        if self.vocab == 0 {
            return Err(TensorError::invalid("decoder_step", "empty vocabulary"));
        }
        let table = g.param(&self.embed_name)?;
        let y = g.gather_rows(table, prev_tokens)?;
        let input = g.concat(&[y, state.context], 1)?;
        let (s, cell) = self.lstm.step(g, input, state.h, state.c)?;
        let e = self.attention.energies(g, s, keys, state.alpha, mask)?;
        let (alpha, context) = attention_context(g, e, h, mask)?;
        let joint = g.concat(&[s, context], 1)?;
        let logits = self.output.forward(g, joint)?;
        Ok((
            logits,
            DecoderState {
                h: s,
                c: cell,
                alpha,
                context,
            },
        ))
    }

    /// Character distribution `softmax(logits)` for one step.
    pub fn char_dist(
        &self,
        g: &mut Graph,
        prev_tokens: &[usize],
        state: DecoderState,
        h: Var,
        keys: Var,
        mask: &[bool],
    ) -> Result<(Var, DecoderState)> {
        let (logits, next) = self.step(g, prev_tokens, state, h, keys, mask)?;
        Ok((g.softmax(logits, None)?, next))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    fn att(kernel: usize) -> Attention {
        Attention {
            prefix: "att".into(),
            state_dim: 3,
            enc_dim: 4,
            att_dim: 5,
            channels: 2,
            kernel,
        }
    }

    fn setup(seed: u64) -> (Attention, ParamStore) {
        let a = att(3);
        let mut store = ParamStore::new();
        a.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        (a, store)
    }

    fn uniform_alpha(b: usize, l: usize) -> Tensor {
        Tensor::full(&[b, l], 1.0 / l as f64)
    }

    #[test]
    fn zero_params_give_constant_energies() {
        let (a, mut store) = setup(0);
        for (name, t) in store.iter_mut() {
            let fill = if name == "att.bias" { 0.3 } else { 0.0 };
            t.data_mut().fill(fill);
        }
        // with w = 0 every energy is exactly zero
        let mut g = Graph::new(&store);
        let s = g.constant(rand_tensor(&[1, 3], 1));
        let h = g.constant(rand_tensor(&[1, 4, 4], 2));
        let al = g.constant(uniform_alpha(1, 4));
        let e = a.attention_energies(&mut g, s, h, al, &[true; 4]).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
        drop(g);

        store.get_mut("att.score").unwrap().data_mut().fill(0.7);
        let mut g = Graph::new(&store);
        let s = g.constant(rand_tensor(&[1, 3], 1));
        let h = g.constant(rand_tensor(&[1, 4, 4], 2));
        let al = g.constant(uniform_alpha(1, 4));
        let e = a.attention_energies(&mut g, s, h, al, &[true; 4]).unwrap();
        let expect = 5.0 * 0.7 * 0.3f64.tanh();
        for v in g.value(e).data() {
            assert!((v - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn two_frame_single_unit_hand_computation() {
        let a = Attention {
            prefix: "att".into(),
            state_dim: 1,
            enc_dim: 1,
            att_dim: 1,
            channels: 1,
            kernel: 3,
        };
        let mut store = ParamStore::new();
        store.insert("att.score", Tensor::new(vec![1, 1], vec![2.0]));
        store.insert("att.bias", Tensor::vector(vec![0.1]));
        store.insert("att.query", Tensor::new(vec![1, 1], vec![0.5]));
        store.insert("att.key", Tensor::new(vec![1, 1], vec![-1.5]));
        store.insert("att.loc", Tensor::new(vec![1, 1], vec![0.8]));
        store.insert("att.conv", Tensor::new(vec![3, 1], vec![0.2, 1.0, -0.4]));
        let (s, h0, h1, a0, a1): (f64, f64, f64, f64, f64) = (0.6, 0.3, -0.9, 0.25, 0.75);
        // (F * α)_0 = 1.0·a0 − 0.4·a1 ; (F * α)_1 = 0.2·a0 + 1.0·a1
        let f0 = a0 - 0.4 * a1;
        let f1 = 0.2 * a0 + a1;
        let e0 = 2.0 * (0.5 * s - 1.5 * h0 + 0.8 * f0 + 0.1).tanh();
        let e1 = 2.0 * (0.5 * s - 1.5 * h1 + 0.8 * f1 + 0.1).tanh();

        let mut g = Graph::new(&store);
        let sv = g.constant(Tensor::new(vec![1, 1], vec![s]));
        let hv = g.constant(Tensor::new(vec![1, 2, 1], vec![h0, h1]));
        let al = g.constant(Tensor::new(vec![1, 2], vec![a0, a1]));
        let e = a.attention_energies(&mut g, sv, hv, al, &[true, true]).unwrap();
        let got = g.value(e).data();
        assert!((got[0] - e0).abs() < 1e-14 && (got[1] - e1).abs() < 1e-14);
    }

    #[test]
    fn masked_frames_get_sentinel_and_zero_weight() {
        let (a, store) = setup(3);
        let mut g = Graph::new(&store);
        let s = g.constant(rand_tensor(&[2, 3], 1));
        let h = g.constant(rand_tensor(&[2, 3, 4], 2));
        let mask = encoder_mask(&[3, 1], 3);
        let al = g.constant(Tensor::new(vec![2, 3], vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 1.0, 0.0, 0.0]));
        let e = a.attention_energies(&mut g, s, h, al, &mask).unwrap();
        assert!(g.value(e).data()[4] < -1e8);
        let (alpha, c) = attention_context(&mut g, e, h, &mask).unwrap();
        let av = g.value(alpha).data();
        assert_eq!(&av[3..], &[1.0, 0.0, 0.0]);
        // single valid frame: context equals that frame
        assert_eq!(&g.value(c).data()[4..], &g.value(h).data()[12..16]);
        assert!(a.attention_energies(&mut g, s, h, al, &[false; 5]).is_err());
        let empty = g.constant(Tensor::zeros(&[2, 0, 4]));
        assert!(a.keys(&mut g, empty).is_err());
    }

    #[test]
    fn equal_energies_average_two_frames() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let e = g.constant(Tensor::new(vec![1, 2], vec![0.4, 0.4]));
        let h = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]));
        let (alpha, c) = attention_context(&mut g, e, h, &[true, true]).unwrap();
        assert_eq!(g.value(alpha).data(), &[0.5, 0.5]);
        assert_eq!(g.value(c).data(), &[2.0, 4.0]);
        assert!(attention_context(&mut g, e, h, &[false, false]).is_err());
    }

    #[test]
    fn alignment_sums_to_one() {
        let (a, store) = setup(4);
        for seed in 0..10 {
            let mut g = Graph::new(&store);
            let s = g.constant(rand_tensor(&[3, 3], seed));
            let h = g.constant(rand_tensor(&[3, 5, 4], seed + 100));
            let mask = encoder_mask(&[5, 2, 4], 5);
            let al = g.constant(uniform_alpha(3, 5));
            let e = a.attention_energies(&mut g, s, h, al, &mask).unwrap();
            let (alpha, _) = attention_context(&mut g, e, h, &mask).unwrap();
            for (row, m) in g.value(alpha).data().chunks(5).zip(mask.chunks(5)) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (v, ok) in row.iter().zip(m) {
                    if !ok {
                        assert_eq!(*v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_conv_removes_location_dependence() {
        let (a, mut store) = setup(5);
        store.get_mut("att.conv").unwrap().data_mut().fill(0.0);
        let mut g = Graph::new(&store);
        let s = g.constant(rand_tensor(&[1, 3], 1));
        let h = g.constant(rand_tensor(&[1, 4, 4], 2));
        let a1 = g.constant(uniform_alpha(1, 4));
        let a2 = g.constant(Tensor::new(vec![1, 4], vec![0.7, 0.1, 0.1, 0.1]));
        let e1 = a.attention_energies(&mut g, s, h, a1, &[true; 4]).unwrap();
        let e2 = a.attention_energies(&mut g, s, h, a2, &[true; 4]).unwrap();
        assert_eq!(g.value(e1), g.value(e2));
    }

    fn decoder() -> (Decoder, ParamStore) {
        let d = Decoder::new("dec", 6, 3, 4, 5, 2, 4);
        let mut store = ParamStore::new();
        d.init(&mut store, &mut ChaCha8Rng::seed_from_u64(8));
        (d, store)
    }

    #[test]
    fn char_dist_is_normalised_and_uniform_at_zero() {
        let (d, mut store) = decoder();
        let mut g = Graph::new(&store);
        let h = g.constant(rand_tensor(&[2, 3, 4], 1));
        let mask = encoder_mask(&[3, 2], 3);
        let keys = d.attention.keys(&mut g, h).unwrap();
        let st = d.initial_state(&mut g, &[3, 2], 3);
        let (p, _) = d.char_dist(&mut g, &[1, 1], st, h, keys, &mask).unwrap();
        for row in g.value(p).data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        drop(g);

        for (_, t) in store.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let mut g = Graph::new(&store);
        let h = g.constant(rand_tensor(&[2, 3, 4], 1));
        let keys = d.attention.keys(&mut g, h).unwrap();
        let st = d.initial_state(&mut g, &[3, 2], 3);
        let (p, _) = d.char_dist(&mut g, &[1, 4], st, h, keys, &mask).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn empty_vocabulary_is_rejected() {
        let d = Decoder::new("dec", 0, 3, 4, 5, 2, 4);
        let mut store = ParamStore::new();
        d.init(&mut store, &mut ChaCha8Rng::seed_from_u64(8));
        let mut g = Graph::new(&store);
        let h = g.constant(rand_tensor(&[1, 3, 4], 1));
        let keys = d.attention.keys(&mut g, h).unwrap();
        let st = d.initial_state(&mut g, &[3], 3);
        assert!(d.step(&mut g, &[0], st, h, keys, &[true; 3]).is_err());
    }

    #[test]
    fn masked_encoder_frame_changes_nothing() {
        let (d, store) = decoder();
        let run = |h: Tensor| {
            let mut g = Graph::new(&store);
            let hv = g.constant(h);
            let mask = encoder_mask(&[3, 2], 3);
            let keys = d.attention.keys(&mut g, hv).unwrap();
            let mut st = d.initial_state(&mut g, &[3, 2], 3);
            let mut outs = Vec::new();
            for tok in [[1, 1], [3, 4], [5, 2]] {
                let (p, next) = d.char_dist(&mut g, &tok, st, hv, keys, &mask).unwrap();
                outs.extend_from_slice(g.value(p).data());
                st = next;
            }
            outs
        };
        let h = rand_tensor(&[2, 3, 4], 3);
        let mut h2 = h.clone();
        for v in &mut h2.data_mut()[20..24] {
            *v += 5.0;
        }
        assert_eq!(run(h), run(h2));
    }

    #[test]
    fn teacher_forced_three_step_gradcheck() {
        let (d, store) = decoder();
        let h = rand_tensor(&[2, 3, 4], 11);
        let targets = [[3usize, 4], [5, 2], [2, 2]];
        let loss = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let hv = g.constant(h.clone());
            let mask = encoder_mask(&[3, 2], 3);
            let keys = d.attention.keys(&mut g, hv)?;
            let mut st = d.initial_state(&mut g, &[3, 2], 3);
            let mut prev = [1usize, 1];
            let mut total = None;
            for tgt in targets {
                let (logits, next) = d.step(&mut g, &prev, st, hv, keys, &mask)?;
                let lp = g.log_softmax(logits)?;
                let picked = g.pick(lp, &tgt)?;
                let s = g.sum(picked)?;
                total = Some(match total {
                    None => s,
                    Some(t) => g.add(t, s)?,
                });
                st = next;
                prev = tgt;
            }
            let l = g.neg(total.unwrap())?;
            g.backward(l)?;
            Ok((g.value(l).item(), g.param_grads()))
        };
        let coords: Vec<(String, usize)> = store
            .iter()
            .flat_map(|(n, t)| (0..t.len()).map(move |i| (n.clone(), i)))
            .collect();
        let err = check_param_gradient(&store, &coords, 1e-5, &loss).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
