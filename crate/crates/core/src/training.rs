//! Losses, the scheduled two-player game, baselines and the epoch loop.
//!
//! Player 1 owns every parameter outside the disentanglers and minimises
//! `alpha*L_y + beta*L_x + gamma*L_d` against random disentangler targets.
//! Player 2 owns `dis1.*`/`dis2.*` and minimises `L_d` against the detached
//! embeddings. Each round runs `ratio_p1_to_p2[0]` player-1 updates followed
//! by `ratio_p1_to_p2[1]` player-2 updates on the same batch.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{batch_pad, bucket_batches, DataError, SequenceBatch, TranscriptBatch, Utterance, Vocabulary};
use crate::eval::{evaluate, EvalError, Target};
use crate::layers::frame_mask;
use crate::models::{is_p2, Model, ModelConfig, ModelKind};
use crate::optim::{clip_global_norm, Adam, OptimError};
use crate::params::Graph;
use crate::tape::Var;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Config(String),
}

impl TrainError {
    fn is_divergence(&self) -> bool {
        matches!(
            self,
            TrainError::Tensor(TensorError::NonFinite { .. }) | TrainError::Optim(OptimError::NonFinite { .. })
        )
    }
}

/// Loss weights as used for the three corpora of the original experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corpus {
    Wsj0,
    Chime3,
    Timit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lr_p1: f64,
    pub lr_p2: f64,
    pub ratio_p1_to_p2: [usize; 2],
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub grl_scale: f64,
    /// Nuisance label predicted by the gradient-reversal head.
    pub grl_target: Target,
    pub clip_norm: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::paper(Corpus::Wsj0)
    }
}

impl TrainConfig {
    pub fn paper(corpus: Corpus) -> Self {
        let (alpha, beta, gamma) = match corpus {
            Corpus::Wsj0 => (100.0, 10.0, 1.0),
            Corpus::Chime3 => (100.0, 1.0, 0.5),
            Corpus::Timit => (100.0, 50.0, 1.0),
        };
        TrainConfig {
            alpha,
            beta,
            gamma,
            lr_p1: 5e-4,
            lr_p2: 1e-3,
            ratio_p1_to_p2: [1, 5],
            patience: 30,
            batch_size: 8,
            max_epochs: 300,
            seed: 0,
            grl_scale: 1.0,
            grl_target: Target::Speaker,
            clip_norm: 5.0,
            model: ModelConfig::default(),
        }
    }

    /// Small dims and short patience for CPU runs.
    pub fn desk() -> Self {
        TrainConfig {
            lr_p1: 2e-3,
            lr_p2: 2e-3,
            patience: 10,
            model: ModelConfig::desk(),
            ..TrainConfig::paper(Corpus::Wsj0)
        }
    }

    pub fn validate(&self) -> std::result::Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w.is_finite() && w >= 0.0) {
                return bad(&format!("loss weight {name} must be a non-negative number"));
            }
        }
        if !(self.lr_p1 >= 0.0 && self.lr_p2 >= 0.0 && self.lr_p1.is_finite() && self.lr_p2.is_finite()) {
            return bad("learning rates must be non-negative");
        }
        if self.ratio_p1_to_p2.contains(&0) {
            return bad("ratio_p1_to_p2 entries must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be at least 1");
        }
        if !(self.grl_scale > 0.0) {
            return bad("grl_scale must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

/// Mean of `(a-b)²` over valid frames and all feature dims; frames at or
/// beyond `lengths[b]` are ignored.
pub fn masked_mse(g: &mut Graph, a: Var, b: Var, lengths: &[usize]) -> Result<Var> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa != sb || sa.len() != 3 || sa[0] != lengths.len() {
        return Err(TensorError::Shape {
            op: "masked_mse",
            lhs: sa,
            rhs: sb,
        });
    }
    let count: usize = lengths.iter().map(|&l| l.min(sa[1])).sum::<usize>() * sa[2];
    if count == 0 {
        return Err(TensorError::invalid("masked_mse", "no valid frames"));
    }
    let diff = g.sub(a, b)?;
    let sq = g.mul(diff, diff)?;
    let mask = g.constant(frame_mask(lengths, sa[1]));
    let kept = g.mul(sq, mask)?;
    let total = g.sum(kept)?;
    g.scale(total, 1.0 / count as f64)
}

/// `L_x`: reconstruction error over the original frames of each utterance.
pub fn loss_recon(g: &mut Graph, x: Var, x_recon: Var, lengths: &[usize]) -> Result<Var> {
    masked_mse(g, x, x_recon, lengths)
}

/// `L_d = MSE(dis1_out, t1) + MSE(dis2_out, t2)` over valid encoder frames.
pub fn loss_disentangle(g: &mut Graph, dis1_out: Var, dis2_out: Var, t1: Var, t2: Var, lengths: &[usize]) -> Result<Var> {
    let a = masked_mse(g, dis1_out, t1, lengths)?;
    let b = masked_mse(g, dis2_out, t2, lengths)?;
    g.add(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Player {
    P1,
    P2,
}

/// Disentangler targets `(t1, t2)`, both constants on the tape: standard
/// normal noise for player 1, the embeddings `(h2, h1)` for player 2.
pub fn make_targets(g: &mut Graph, h1: Var, h2: Var, player: Player, rng: &mut impl Rng) -> (Var, Var) {
    match player {
        Player::P1 => {
            let mut noise = |shape: &[usize]| {
                let n = shape.iter().product();
                Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect())
            };
            let t1 = noise(&g.shape(h2).to_vec());
            let t2 = noise(&g.shape(h1).to_vec());
            (g.constant(t1), g.constant(t2))
        }
        Player::P2 => (g.detach(h2), g.detach(h1)),
    }
}

/// `alpha*L_y + beta*L_x + gamma*L_d`.
pub fn loss_total(g: &mut Graph, l_y: Var, l_x: Var, l_d: Var, cfg: &TrainConfig) -> Result<Var> {
    let a = g.scale(l_y, cfg.alpha)?;
    let b = g.scale(l_x, cfg.beta)?;
    let c = g.scale(l_d, cfg.gamma)?;
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundMetrics {
    pub l_y: f64,
    pub l_x: f64,
    pub l_d_p1: f64,
    /// Mean over the player-2 updates.
    pub l_d_p2: f64,
    /// `L_d` before each player-2 update.
    pub l_d_p2_trace: Vec<f64>,
    /// Parameters that received gradients in each phase.
    pub p1_updated: BTreeSet<String>,
    pub p2_updated: BTreeSet<String>,
}

fn apply(
    model: &mut Model,
    opt: &mut Adam,
    mut grads: BTreeMap<String, Vec<f64>>,
    clip: f64,
) -> std::result::Result<BTreeSet<String>, TrainError> {
    clip_global_norm(&mut grads, clip);
    opt.step(&mut model.params, &grads)?;
    Ok(grads.into_keys().collect())
}

/// One player-1 update with random targets; returns `(L_y, L_x, L_d)` and
/// the parameters it updated.
pub fn p1_update(
    model: &mut Model,
    x: &SequenceBatch,
    y: &TranscriptBatch,
    cfg: &TrainConfig,
    opt: &mut Adam,
    rng: &mut impl Rng,
) -> std::result::Result<([f64; 3], BTreeSet<String>), TrainError> {
    let (losses, grads) = {
        let mut g = Graph::with_filter(&model.params, |n| !is_p2(n));
        let b = model.niesr_forward(&mut g, x, y, true, rng)?;
        let xv = g.constant(x.features.clone());
        let l_x = loss_recon(&mut g, xv, b.x_recon, &x.lengths)?;
        let (t1, t2) = make_targets(&mut g, b.h1, b.h2, Player::P1, rng);
        let l_d = loss_disentangle(&mut g, b.dis1_out, b.dis2_out, t1, t2, &b.enc_lengths)?;
        let total = loss_total(&mut g, b.l_y, l_x, l_d, cfg)?;
        g.backward(total)?;
        let losses = [g.value(b.l_y).item(), g.value(l_x).item(), g.value(l_d).item()];
        (losses, g.param_grads())
    };
    let updated = apply(model, opt, grads, cfg.clip_norm)?;
    Ok((losses, updated))
}

/// `count` player-2 updates against the current, frozen embeddings of `x`.
pub fn p2_updates(
    model: &mut Model,
    x: &SequenceBatch,
    count: usize,
    cfg: &TrainConfig,
    opt: &mut Adam,
) -> std::result::Result<(Vec<f64>, BTreeSet<String>), TrainError> {
    let (h1, h2, lengths) = {
        let mut g = Graph::frozen(&model.params);
        let (h1, lengths) = model.encode(&mut g, "enc1", x)?;
        let (h2, _) = model.encode(&mut g, "enc2", x)?;
        (g.value(h1).clone(), g.value(h2).clone(), lengths)
    };
    let mut trace = Vec::with_capacity(count);
    let mut updated = BTreeSet::new();
    for _ in 0..count {
        let (l_d, grads) = {
            let mut g = Graph::with_filter(&model.params, is_p2);
            let h1v = g.constant(h1.clone());
            let h2v = g.constant(h2.clone());
            let (d1, d2) = model.disentangle(&mut g, h1v, h2v, &lengths)?;
            let (t1, t2) = make_targets(&mut g, h1v, h2v, Player::P2, &mut rand::rng());
            let l_d = loss_disentangle(&mut g, d1, d2, t1, t2, &lengths)?;
            g.backward(l_d)?;
            (g.value(l_d).item(), g.param_grads())
        };
        trace.push(l_d);
        updated.extend(apply(model, opt, grads, cfg.clip_norm)?);
    }
    Ok((trace, updated))
}

/// Player-1 updates then player-2 updates on one batch, each player frozen
/// while the other moves.
pub fn scheduled_round(
    model: &mut Model,
    x: &SequenceBatch,
    y: &TranscriptBatch,
    cfg: &TrainConfig,
    opt_p1: &mut Adam,
    opt_p2: &mut Adam,
    rng: &mut impl Rng,
) -> std::result::Result<RoundMetrics, TrainError> {
    let [n1, n2] = cfg.ratio_p1_to_p2;
    let mut m = RoundMetrics::default();
    for _ in 0..n1 {
        let ([l_y, l_x, l_d], upd) = p1_update(model, x, y, cfg, opt_p1, rng)?;
        m.l_y += l_y / n1 as f64;
        m.l_x += l_x / n1 as f64;
        m.l_d_p1 += l_d / n1 as f64;
        m.p1_updated.extend(upd);
    }
    let (trace, upd) = p2_updates(model, x, n2, cfg, opt_p2)?;
    m.l_d_p2 = trace.iter().sum::<f64>() / trace.len() as f64;
    m.l_d_p2_trace = trace;
    m.p2_updated = upd;
    Ok(m)
}

/// Plain cross-entropy update of a base model; returns `L_y`.
pub fn base_update(
    model: &mut Model,
    x: &SequenceBatch,
    y: &TranscriptBatch,
    cfg: &TrainConfig,
    opt: &mut Adam,
) -> std::result::Result<f64, TrainError> {
    let (l_y, grads) = {
        let mut g = Graph::new(&model.params);
        let tf = model.base_forward(&mut g, x, y)?;
        g.backward(tf.loss)?;
        (g.value(tf.loss).item(), g.param_grads())
    };
    apply(model, opt, grads, cfg.clip_norm)?;
    Ok(l_y)
}

/// Update of the gradient-reversal baseline on `L_y + L_z`, where the
/// nuisance loss `L_z` reaches the encoder with reversed sign. Returns both
/// terms.
pub fn grl_update(
    model: &mut Model,
    x: &SequenceBatch,
    y: &TranscriptBatch,
    labels: &[usize],
    cfg: &TrainConfig,
    opt: &mut Adam,
) -> std::result::Result<(f64, f64), TrainError> {
    let (vals, grads) = {
        let mut g = Graph::new(&model.params);
        let (l_y, l_z) = model.grl_forward(&mut g, x, y, labels, cfg.grl_scale)?;
        let total = g.add(l_y, l_z)?;
        g.backward(total)?;
        ((g.value(l_y).item(), g.value(l_z).item()), g.param_grads())
    };
    apply(model, opt, grads, cfg.clip_norm)?;
    Ok(vals)
}

/// Stop after `patience` consecutive epochs without a strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    since: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Records an epoch's dev metric (lower is better); returns
    /// `(improved, stop)`.
    pub fn observe(&mut self, metric: f64) -> (bool, bool) {
        let improved = self.best.is_none_or(|b| metric < b);
        if improved {
            self.best = Some(metric);
            self.since = 0;
        } else {
            self.since += 1;
        }
        (improved, self.since >= self.patience)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(rename = "L_y")]
    pub l_y: f64,
    #[serde(rename = "L_x")]
    pub l_x: Option<f64>,
    #[serde(rename = "L_d_p1")]
    pub l_d_p1: Option<f64>,
    #[serde(rename = "L_d_p2")]
    pub l_d_p2: Option<f64>,
    pub dev_cer: f64,
    pub wall_ms: u64,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest dev CER (or the initial
    /// model if training diverged before the first epoch ended).
    pub model: Model,
    pub best_epoch: Option<usize>,
    pub best_dev_cer: Option<f64>,
    pub log: Vec<EpochLog>,
    /// Set when a non-finite loss or gradient ended training.
    pub diverged: Option<String>,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Record real wall-clock times; otherwise `wall_ms` is 0 so logs are
    /// byte-reproducible.
    pub timing: bool,
    pub on_epoch: Option<Box<dyn FnMut(&EpochLog) + 'a>>,
}

/// Nuisance classes in `utts` for `target`, erroring on unlabelled utterances.
pub fn nuisance_labels(utts: &[Utterance], target: Target) -> std::result::Result<Vec<usize>, TrainError> {
    Ok(crate::eval::labels(utts, target)?)
}

#[derive(Default)]
struct EpochSums {
    l_y: f64,
    l_x: f64,
    l_d_p1: f64,
    l_d_p2: f64,
    batches: usize,
}

pub fn train(
    kind: ModelKind,
    train_set: &[Utterance],
    dev_set: &[Utterance],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    mut opts: TrainOptions<'_>,
) -> std::result::Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(TrainError::Config("training and dev sets must be non-empty".into()));
    }
    let feat_dim = train_set[0].features.shape()[1];
    let labels = if kind == ModelKind::Grl {
        nuisance_labels(train_set, cfg.grl_target)?
    } else {
        Vec::new()
    };
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut model = Model::new(kind, cfg.model.clone(), feat_dim, vocab.size(), classes, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7261_696e));
    let mut opt1 = Adam::new(cfg.lr_p1);
    let mut opt2 = Adam::new(cfg.lr_p2);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut outcome = TrainOutcome {
        model: model.clone(),
        best_epoch: None,
        best_dev_cer: None,
        log: Vec::new(),
        diverged: None,
    };

    'epochs: for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut sums = EpochSums::default();
        for batch in bucket_batches(train_set, cfg.batch_size, &mut rng) {
            let utts: Vec<&Utterance> = batch.iter().map(|&i| &train_set[i]).collect();
            let (x, y) = batch_pad(&utts, vocab)?;
            let step = match kind {
                ModelKind::Base => base_update(&mut model, &x, &y, cfg, &mut opt1).map(|l_y| {
                    sums.l_y += l_y;
                }),
                ModelKind::Grl => {
                    let z: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                    grl_update(&mut model, &x, &y, &z, cfg, &mut opt1).map(|(l_y, l_z)| {
                        sums.l_y += l_y;
                        sums.l_d_p1 += l_z;
                    })
                }
                ModelKind::Niesr => scheduled_round(&mut model, &x, &y, cfg, &mut opt1, &mut opt2, &mut rng).map(|m| {
                    sums.l_y += m.l_y;
                    sums.l_x += m.l_x;
                    sums.l_d_p1 += m.l_d_p1;
                    sums.l_d_p2 += m.l_d_p2;
                }),
            };
            match step {
                Ok(()) => sums.batches += 1,
                Err(e) if e.is_divergence() => {
                    outcome.diverged = Some(format!("epoch {epoch}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let dev_cer = evaluate(&model, dev_set, vocab)?.cer;
        let n = sums.batches.max(1) as f64;
        let niesr = kind == ModelKind::Niesr;
        let record = EpochLog {
            epoch,
            l_y: sums.l_y / n,
            l_x: niesr.then_some(sums.l_x / n),
            l_d_p1: (kind != ModelKind::Base).then_some(sums.l_d_p1 / n),
            l_d_p2: niesr.then_some(sums.l_d_p2 / n),
            dev_cer,
            wall_ms: if opts.timing { started.elapsed().as_millis() as u64 } else { 0 },
        };
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&record);
        }
        outcome.log.push(record);
        let (improved, stop) = stopper.observe(dev_cer);
        if improved {
            outcome.model = model.clone();
            outcome.best_epoch = Some(epoch);
            outcome.best_dev_cer = Some(dev_cer);
        }
        if stop {
            break;
        }
    }
    Ok(outcome)
}
