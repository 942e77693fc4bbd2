//! Model assembly: the attention encoder-decoder, the split-representation
//! model with its reconstructor and disentanglers, and the gradient-reversal
//! baseline. Parameters are named by module prefix (`enc1.`, `enc2.`, `dec.`,
//! `recon.`, `dis1.`, `dis2.`, `nuis.`), which also fixes the two players.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{encoder_mask, Decoder};
use crate::data::{SequenceBatch, TranscriptBatch, EOS, PAD, SOS};
use crate::layers::{gradient_reversal, Blstm, Linear, Subsample, Upsample};
use crate::params::{Graph, ParamStore};
use crate::tape::Var;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Base,
    Niesr,
    Grl,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Base => "base",
            ModelKind::Niesr => "niesr",
            ModelKind::Grl => "grl",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "base" => Ok(ModelKind::Base),
            "niesr" => Ok(ModelKind::Niesr),
            "grl" => Ok(ModelKind::Grl),
            other => Err(format!("unknown model kind `{other}`")),
        }
    }
}

/// Layer sizes. Feature dim, vocabulary and nuisance classes come from data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_hidden: usize,
    pub subsample_dim: usize,
    pub dec_hidden: usize,
    pub att_dim: usize,
    pub att_channels: usize,
    pub att_kernel: usize,
    pub recon_hidden: usize,
    pub upsample_dim: usize,
    pub dis_hidden: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_hidden: 200,
            subsample_dim: 200,
            dec_hidden: 200,
            att_dim: 200,
            att_channels: 10,
            att_kernel: 100,
            recon_hidden: 300,
            upsample_dim: 300,
            dis_hidden: 200,
            dropout: 0.4,
        }
    }
}

impl ModelConfig {
    /// Small dims for CPU runs.
    pub fn desk() -> Self {
        ModelConfig {
            enc_hidden: 32,
            subsample_dim: 32,
            dec_hidden: 32,
            att_dim: 32,
            att_channels: 4,
            att_kernel: 15,
            recon_hidden: 32,
            upsample_dim: 32,
            dis_hidden: 32,
            dropout: 0.4,
        }
    }

    /// Width of each encoder output frame.
    pub fn embed_dim(&self) -> usize {
        2 * self.enc_hidden
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            self.enc_hidden,
            self.subsample_dim,
            self.dec_hidden,
            self.att_dim,
            self.att_channels,
            self.att_kernel,
            self.recon_hidden,
            self.upsample_dim,
            self.dis_hidden,
        ];
        if dims.contains(&0) {
            return Err(TensorError::invalid("model", "layer sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TensorError::invalid("model", format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// BLSTM, pair-merging subsample, BLSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub lower: Blstm,
    pub subsample: Subsample,
    pub upper: Blstm,
}

impl Encoder {
    pub fn new(prefix: &str, feat_dim: usize, cfg: &ModelConfig) -> Self {
        let h = cfg.enc_hidden;
        Encoder {
            lower: Blstm::new(&format!("{prefix}.blstm0"), feat_dim, h),
            subsample: Subsample::new(&format!("{prefix}.sub"), 2 * h, cfg.subsample_dim),
            upper: Blstm::new(&format!("{prefix}.blstm1"), cfg.subsample_dim, h),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.lower.init(store, rng);
        self.subsample.init(store, rng);
        self.upper.init(store, rng);
    }

    /// `x[B×T×D]` to `h[B×⌈T/2⌉×2H]` and the per-utterance encoder lengths.
    pub fn forward(&self, g: &mut Graph, x: Var, lengths: &[usize]) -> Result<(Var, Vec<usize>)> {
        let low = self.lower.forward(g, x, lengths)?;
        let sub = self.subsample.forward(g, low)?;
        let enc_lengths = Subsample::output_lengths(lengths);
        let h = self.upper.forward(g, sub, &enc_lengths)?;
        Ok((h, enc_lengths))
    }
}

/// BLSTM with upsampling, BLSTM, then a per-frame linear map to features.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstructor {
    pub upsample: Upsample,
    pub blstm: Blstm,
    pub out: Linear,
}

impl Reconstructor {
    fn new(embed: usize, feat_dim: usize, cfg: &ModelConfig) -> Self {
        Reconstructor {
            upsample: Upsample::new("recon.up", 2 * embed, cfg.recon_hidden, cfg.upsample_dim),
            blstm: Blstm::new("recon.blstm", cfg.upsample_dim, cfg.recon_hidden),
            out: Linear::new("recon.out", 2 * cfg.recon_hidden, feat_dim),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.upsample.init(store, rng);
        self.blstm.init(store, rng);
        self.out.init(store, rng);
    }

    /// `fused[B×L×2E]` to `[B×t_len×D]`.
    pub fn forward(&self, g: &mut Graph, fused: Var, enc_lengths: &[usize], t_len: usize) -> Result<Var> {
        let up = self.upsample.forward(g, fused, enc_lengths)?;
        let up_lengths = Upsample::output_lengths(enc_lengths);
        let y = self.blstm.forward(g, up, &up_lengths)?;
        let x = self.out.forward(g, y)?;
        let have = g.shape(x)[1];
        if have == t_len {
            return Ok(x);
        }
        if have > t_len {
            return g.slice(x, 1, 0, t_len);
        }
        let s = g.shape(x).to_vec();
        let pad = g.constant(Tensor::zeros(&[s[0], t_len - have, s[2]]));
        g.concat(&[x, pad], 1)
    }
}

/// Per-frame predictor of one embedding from the other.
#[derive(Debug, Clone, PartialEq)]
pub struct Disentangler {
    pub blstm: Blstm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Disentangler {
    fn new(prefix: &str, embed: usize, hidden: usize) -> Self {
        Disentangler {
            blstm: Blstm::new(&format!("{prefix}.blstm"), embed, hidden),
            fc1: Linear::new(format!("{prefix}.fc1"), 2 * hidden, hidden),
            fc2: Linear::new(format!("{prefix}.fc2"), hidden, embed),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.blstm.init(store, rng);
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, h: Var, lengths: &[usize]) -> Result<Var> {
        let y = self.blstm.forward(g, h, lengths)?;
        let y = self.fc1.forward(g, y)?;
        let y = g.tanh(y)?;
        self.fc2.forward(g, y)
    }
}

/// Utterance-level classifier over mean-pooled frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledClassifier {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl PooledClassifier {
    pub fn new(prefix: &str, input: usize, hidden: usize, classes: usize) -> Self {
        PooledClassifier {
            fc1: Linear::new(format!("{prefix}.fc1"), input, hidden),
            fc2: Linear::new(format!("{prefix}.fc2"), hidden, classes),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    /// Logits `[B×K]` for frames `h[B×L×E]`.
    pub fn forward(&self, g: &mut Graph, h: Var, lengths: &[usize]) -> Result<Var> {
        let pooled = mean_pool(g, h, lengths)?;
        let y = self.fc1.forward(g, pooled)?;
        let y = g.tanh(y)?;
        self.fc2.forward(g, y)
    }
}

/// Gradient-reversal adversary: a BLSTM over the frames, then a pooled
/// classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceHead {
    pub blstm: Blstm,
    pub classifier: PooledClassifier,
}

impl NuisanceHead {
    pub fn new(prefix: &str, input: usize, hidden: usize, classes: usize) -> Self {
        NuisanceHead {
            blstm: Blstm::new(&format!("{prefix}.blstm"), input, hidden),
            classifier: PooledClassifier::new(prefix, 2 * hidden, hidden, classes),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.blstm.init(store, rng);
        self.classifier.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, h: Var, lengths: &[usize]) -> Result<Var> {
        let y = self.blstm.forward(g, h, lengths)?;
        self.classifier.forward(g, y, lengths)
    }
}

/// Mean over the valid frames of each utterance: `[B×L×E]` to `[B×E]`.
pub fn mean_pool(g: &mut Graph, h: Var, lengths: &[usize]) -> Result<Var> {
    let s = g.shape(h).to_vec();
    let w: Vec<f64> = lengths
        .iter()
        .flat_map(|&n| (0..s[1]).map(move |j| if j < n { 1.0 / n as f64 } else { 0.0 }))
        .collect();
    let w = g.constant(Tensor::new(vec![s[0], 1, s[1]], w));
    let pooled = g.bmm(w, h)?;
    g.reshape(pooled, &[s[0], s[2]])
}

/// Mean cross-entropy of `logits[B×K]` against `labels`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = g.log_softmax(logits)?;
    let picked = g.pick(lp, labels)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / labels.len() as f64)
}

/// Teacher-forced decoder loss.
#[derive(Debug, Clone)]
pub struct TeacherForced {
    /// `L_y`: summed over steps, averaged over utterances.
    pub loss: Var,
    /// Per-step log-probabilities `[B×V]`.
    pub log_probs: Vec<Var>,
    /// Per-utterance negative log-likelihood.
    pub per_utterance: Vec<f64>,
}

/// Everything the split-representation losses need from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardBundle {
    pub l_y: Var,
    pub x_recon: Var,
    pub h1: Var,
    pub h2: Var,
    pub dis1_out: Var,
    pub dis2_out: Var,
    pub enc_lengths: Vec<usize>,
}

/// One greedy hypothesis, end-of-sequence excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hypothesis {
    pub ids: Vec<usize>,
    /// Hit `max_len` before emitting end-of-sequence.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub feat_dim: usize,
    pub vocab_size: usize,
    /// Output classes of the gradient-reversal head; 0 unless `kind == Grl`.
    pub nuisance_classes: usize,
    pub params: ParamStore,
}

/// Parameters updated by the disentanglers' player.
pub fn is_p2(name: &str) -> bool {
    name.starts_with("dis1.") || name.starts_with("dis2.")
}

impl Model {
    pub fn new(
        kind: ModelKind,
        config: ModelConfig,
        feat_dim: usize,
        vocab_size: usize,
        nuisance_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if feat_dim == 0 {
            return Err(TensorError::invalid("model", "feature dim must be positive"));
        }
        if kind == ModelKind::Grl && nuisance_classes < 2 {
            return Err(TensorError::invalid("model", "gradient-reversal head needs at least 2 classes"));
        }
        let mut model = Model {
            kind,
            config,
            feat_dim,
            vocab_size,
            nuisance_classes: if kind == ModelKind::Grl { nuisance_classes } else { 0 },
            params: ParamStore::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        model.encoder("enc1").init(&mut store, &mut rng);
        model.decoder().init(&mut store, &mut rng);
        match kind {
            ModelKind::Base => {}
            ModelKind::Niesr => {
                model.encoder("enc2").init(&mut store, &mut rng);
                model.reconstructor().init(&mut store, &mut rng);
                model.disentangler("dis1").init(&mut store, &mut rng);
                model.disentangler("dis2").init(&mut store, &mut rng);
            }
            ModelKind::Grl => model.nuisance_head().init(&mut store, &mut rng),
        }
        model.params = store;
        Ok(model)
    }

    pub fn encoder(&self, prefix: &str) -> Encoder {
        Encoder::new(prefix, self.feat_dim, &self.config)
    }

    pub fn decoder(&self) -> Decoder {
        let c = &self.config;
        Decoder::new("dec", self.vocab_size, c.dec_hidden, c.embed_dim(), c.att_dim, c.att_channels, c.att_kernel)
    }

    pub fn reconstructor(&self) -> Reconstructor {
        Reconstructor::new(self.config.embed_dim(), self.feat_dim, &self.config)
    }

    pub fn disentangler(&self, prefix: &str) -> Disentangler {
        Disentangler::new(prefix, self.config.embed_dim(), self.config.dis_hidden)
    }

    pub fn nuisance_head(&self) -> NuisanceHead {
        NuisanceHead::new("nuis", self.config.embed_dim(), self.config.dis_hidden, self.nuisance_classes)
    }

    fn require(&self, kind: ModelKind, op: &'static str) -> Result<()> {
        if self.kind != kind {
            return Err(TensorError::invalid(op, format!("needs a {} model, got {}", kind.name(), self.kind.name())));
        }
        Ok(())
    }

    /// Encodes `x` with the named encoder.
    pub fn encode(&self, g: &mut Graph, prefix: &str, x: &SequenceBatch) -> Result<(Var, Vec<usize>)> {
        if x.feat_dim() != self.feat_dim {
            return Err(TensorError::invalid(
                "encode",
                format!("features have dim {}, model expects {}", x.feat_dim(), self.feat_dim),
            ));
        }
        let xv = g.constant(x.features.clone());
        self.encoder(prefix).forward(g, xv, &x.lengths)
    }

    /// Cross-entropy of `y` given encoder output `h`, feeding the ground-truth
    /// previous character at each step.
    pub fn teacher_forced(&self, g: &mut Graph, h: Var, enc_lengths: &[usize], y: &TranscriptBatch) -> Result<TeacherForced> {
        let b = enc_lengths.len();
        if y.lengths.len() != b {
            return Err(TensorError::invalid("base_forward", "feature and transcript batch sizes differ"));
        }
        // every encoded target ends in end-of-sequence, so a length of 1 is
        // an empty transcript
        if y.lengths.iter().any(|&l| l < 2) {
            return Err(TensorError::invalid("base_forward", "empty transcript"));
        }
        if let Some(&bad) = y.ids.iter().flatten().find(|&&id| id >= self.vocab_size) {
            return Err(TensorError::invalid("base_forward", format!("target id {bad} out of vocabulary")));
        }
        let dec = self.decoder();
        let l = g.shape(h)[1];
        let mask = encoder_mask(enc_lengths, l);
        let keys = dec.attention.keys(g, h)?;
        let mut state = dec.initial_state(g, enc_lengths, l);
        let mut prev = vec![SOS; b];
        let mut total: Option<Var> = None;
        let mut log_probs = Vec::new();
        let mut per_utterance = vec![0.0; b];
        for step in 0..y.max_len() {
            let (logits, next) = dec.step(g, &prev, state, h, keys, &mask)?;
            state = next;
            let lp = g.log_softmax(logits)?;
            let targets: Vec<usize> = y.ids.iter().map(|row| row[step]).collect();
            let weights: Vec<f64> = y.lengths.iter().map(|&n| if step < n { 1.0 } else { 0.0 }).collect();
            let picked = g.pick(lp, &targets)?;
            for (u, (v, w)) in per_utterance.iter_mut().zip(g.value(picked).data().iter().zip(&weights)) {
                *u -= v * w;
            }
            let w = g.constant(Tensor::vector(weights));
            let masked = g.mul(picked, w)?;
            let s = g.sum(masked)?;
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
            log_probs.push(lp);
            prev = targets.iter().map(|&t| if t == PAD { EOS } else { t }).collect();
        }
        let total = total.ok_or_else(|| TensorError::invalid("base_forward", "empty transcript batch"))?;
        let loss = g.scale(total, -1.0 / b as f64)?;
        Ok(TeacherForced {
            loss,
            log_probs,
            per_utterance,
        })
    }

    /// `L_y` through `enc1` and the decoder.
    pub fn base_forward(&self, g: &mut Graph, x: &SequenceBatch, y: &TranscriptBatch) -> Result<TeacherForced> {
        let (h, enc_lengths) = self.encode(g, "enc1", x)?;
        self.teacher_forced(g, h, &enc_lengths, y)
    }

    /// Both disentangler outputs: `Dis1(h1)` predicts h2, `Dis2(h2)` predicts h1.
    pub fn disentangle(&self, g: &mut Graph, h1: Var, h2: Var, enc_lengths: &[usize]) -> Result<(Var, Var)> {
        self.require(ModelKind::Niesr, "niesr_forward")?;
        let d1 = self.disentangler("dis1").forward(g, h1, enc_lengths)?;
        let d2 = self.disentangler("dis2").forward(g, h2, enc_lengths)?;
        Ok((d1, d2))
    }

    pub fn niesr_forward(
        &self,
        g: &mut Graph,
        x: &SequenceBatch,
        y: &TranscriptBatch,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<ForwardBundle> {
        self.require(ModelKind::Niesr, "niesr_forward")?;
        let (h1, enc_lengths) = self.encode(g, "enc1", x)?;
        let (h2, _) = self.encode(g, "enc2", x)?;
        let l_y = self.teacher_forced(g, h1, &enc_lengths, y)?.loss;
        let noisy = g.dropout(h1, self.config.dropout, training, || rng.random::<f64>())?;
        let fused = g.concat(&[noisy, h2], 2)?;
        let x_recon = self.reconstructor().forward(g, fused, &enc_lengths, x.max_len())?;
        let (dis1_out, dis2_out) = self.disentangle(g, h1, h2, &enc_lengths)?;
        Ok(ForwardBundle {
            l_y,
            x_recon,
            h1,
            h2,
            dis1_out,
            dis2_out,
            enc_lengths,
        })
    }

    /// `L_y` and the nuisance cross-entropy seen through gradient reversal.
    pub fn grl_forward(
        &self,
        g: &mut Graph,
        x: &SequenceBatch,
        y: &TranscriptBatch,
        labels: &[usize],
        scale: f64,
    ) -> Result<(Var, Var)> {
        self.require(ModelKind::Grl, "grl_forward")?;
        if let Some(&bad) = labels.iter().find(|&&z| z >= self.nuisance_classes) {
            return Err(TensorError::invalid("grl_forward", format!("nuisance label {bad} out of range")));
        }
        let (h, enc_lengths) = self.encode(g, "enc1", x)?;
        let l_y = self.teacher_forced(g, h, &enc_lengths, y)?.loss;
        let reversed = gradient_reversal(g, h, scale)?;
        let logits = self.nuisance_head().forward(g, reversed, &enc_lengths)?;
        let l_z = cross_entropy(g, logits, labels)?;
        Ok((l_y, l_z))
    }

    /// Argmax decoding from `enc1`; only end-of-sequence and characters can be
    /// emitted.
    pub fn greedy_decode(&self, x: &SequenceBatch, max_len: usize) -> Result<Vec<Hypothesis>> {
        let mut g = Graph::frozen(&self.params);
        self.greedy_decode_in(&mut g, x, max_len)
    }

    /// As [`greedy_decode`](Self::greedy_decode), inside a caller-owned graph
    /// so parameter access can be inspected.
    pub fn greedy_decode_in(&self, g: &mut Graph, x: &SequenceBatch, max_len: usize) -> Result<Vec<Hypothesis>> {
        if max_len == 0 {
            return Err(TensorError::invalid("greedy_decode", "max_len must be positive"));
        }
        let (h, enc_lengths) = self.encode(g, "enc1", x)?;
        let dec = self.decoder();
        let b = enc_lengths.len();
        let l = g.shape(h)[1];
        let mask = encoder_mask(&enc_lengths, l);
        let keys = dec.attention.keys(g, h)?;
        let mut state = dec.initial_state(g, &enc_lengths, l);
        let mut prev = vec![SOS; b];
        let mut hyps = vec![
            Hypothesis {
                ids: Vec::new(),
                truncated: true
            };
            b
        ];
        let mut done = vec![false; b];
        for _ in 0..max_len {
            let (logits, next) = dec.step(g, &prev, state, h, keys, &mask)?;
            state = next;
            let v = g.value(logits);
            for (i, row) in v.data().chunks(self.vocab_size).enumerate() {
                let best = (EOS..self.vocab_size)
                    .max_by(|&a, &c| row[a].total_cmp(&row[c]).then(c.cmp(&a)))
                    .expect("vocabulary includes end-of-sequence");
                prev[i] = best;
                if done[i] {
                    continue;
                }
                if best == EOS {
                    done[i] = true;
                    hyps[i].truncated = false;
                } else {
                    hyps[i].ids.push(best);
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(hyps)
    }

    /// Rebuilds a model from checkpointed parameters, inferring its kind and
    /// sizes from parameter names and shapes. Dropout is not stored and takes
    /// its default.
    pub fn from_params(params: ParamStore) -> Result<Self> {
        let shape = |name: &str| -> Result<Vec<usize>> {
            params
                .get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
        };
        let kind = if params.contains("dis1.fc2.w") {
            ModelKind::Niesr
        } else if params.contains("nuis.fc2.w") {
            ModelKind::Grl
        } else {
            ModelKind::Base
        };
        let lower = shape("enc1.blstm0.fwd.w_ih")?;
        let sub = shape("enc1.sub.proj.w")?;
        let embed = shape("dec.embed")?;
        let query = shape("dec.att.query")?;
        let conv = shape("dec.att.conv")?;
        let mut config = ModelConfig {
            enc_hidden: lower[0] / 4,
            subsample_dim: sub[0],
            dec_hidden: embed[1],
            att_dim: query[0],
            att_channels: conv[1],
            att_kernel: conv[0],
            ..ModelConfig::default()
        };
        let mut nuisance_classes = 0;
        match kind {
            ModelKind::Base => {}
            ModelKind::Niesr => {
                config.recon_hidden = shape("recon.blstm.fwd.w_hh")?[1];
                config.upsample_dim = shape("recon.up.proj.w")?[0];
                config.dis_hidden = shape("dis1.fc1.w")?[0];
            }
            ModelKind::Grl => {
                let fc2 = shape("nuis.fc2.w")?;
                nuisance_classes = fc2[0];
                config.dis_hidden = fc2[1];
            }
        }
        let mut model = Model::new(kind, config, lower[1], embed[0], nuisance_classes.max(2), 0)?;
        model.nuisance_classes = nuisance_classes;
        for (name, t) in model.params.iter() {
            let got = params.get(name).ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            if got.shape() != t.shape() {
                return Err(TensorError::Shape {
                    op: "checkpoint",
                    lhs: got.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = params.names().find(|n| !model.params.contains(n)) {
            return Err(TensorError::invalid("checkpoint", format!("unexpected parameter `{extra}`")));
        }
        model.params = params;
        Ok(model)
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

const CKPT_MAGIC: &[u8; 6] = b"NIESR1";

pub fn encode_checkpoint(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<usize> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> std::result::Result<ParamStore, CheckpointError> {
    let fail = |msg: &str| CheckpointError::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(6) != Some(CKPT_MAGIC.as_slice()) {
        return Err(fail("not a NIESR1 checkpoint"));
    }
    let count = c.u32().ok_or_else(|| fail("truncated header"))?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = c.u32().ok_or_else(|| fail("truncated parameter name"))?;
        let name = c.take(n).ok_or_else(|| fail("truncated parameter name"))?;
        let name = std::str::from_utf8(name).map_err(|_| fail("parameter name is not UTF-8"))?;
        let rank = c.u32().ok_or_else(|| fail("truncated shape"))?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32().ok_or_else(|| fail("truncated shape"))?);
        }
        let len: usize = shape.iter().product();
        let raw = c
            .take(len.checked_mul(8).ok_or_else(|| fail("shape overflows"))?)
            .ok_or_else(|| fail("truncated parameter data"))?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        store.insert(name, Tensor::new(shape, data));
    }
    if c.pos != bytes.len() {
        return Err(fail("trailing bytes after the last parameter"));
    }
    Ok(store)
}

pub fn save_checkpoint(path: &Path, params: &ParamStore) -> std::result::Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(params)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> std::result::Result<ParamStore, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes, path)
}
