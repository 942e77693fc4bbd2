//! Character error rate and nuisance probes.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{pad_features, DataError, Utterance, Vocabulary};
use crate::layers::Blstm;
use crate::models::{cross_entropy, Model, ModelKind, PooledClassifier};
use crate::optim::Adam;
use crate::params::{Graph, ParamStore};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty reference transcript")]
    EmptyReference,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Edit distance with unit insert, delete and substitute costs.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = diag + usize::from(x != y);
            diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(diag + 1);
        }
    }
    row[b.len()]
}

pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<char> = reference.chars().collect();
    if r.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let h: Vec<char> = hypothesis.chars().collect();
    Ok(levenshtein(&r, &h) as f64 / r.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CerSummary {
    pub edits: usize,
    pub ref_chars: usize,
    pub cer: f64,
}

/// Micro-averaged CER: total edits over total reference characters.
pub fn corpus_cer<R: AsRef<str>, H: AsRef<str>>(pairs: &[(R, H)]) -> Result<CerSummary> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let (mut edits, mut chars) = (0, 0);
    for (r, h) in pairs {
        let r: Vec<char> = r.as_ref().chars().collect();
        if r.is_empty() {
            return Err(EvalError::EmptyReference);
        }
        let h: Vec<char> = h.as_ref().chars().collect();
        edits += levenshtein(&r, &h);
        chars += r.len();
    }
    Ok(CerSummary {
        edits,
        ref_chars: chars,
        cer: edits as f64 / chars as f64,
    })
}

/// Mean of per-utterance CERs.
pub fn macro_cer<R: AsRef<str>, H: AsRef<str>>(pairs: &[(R, H)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut total = 0.0;
    for (r, h) in pairs {
        total += cer(r.as_ref(), h.as_ref())?;
    }
    Ok(total / pairs.len() as f64)
}

/// `(base - ours) / base`.
pub fn relative_improvement(base: f64, ours: f64) -> f64 {
    (base - ours) / base
}

/// Worker count from `NIESR_THREADS`; unset or 0 means all available cores.
pub fn worker_count() -> usize {
    let auto = || std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("NIESR_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(0) | None => auto(),
        Some(n) => n,
    }
}

const DECODE_BATCH: usize = 16;

/// Greedy transcripts for every utterance, in corpus order. Batches are
/// spread over `threads` workers; the output does not depend on the count.
pub fn decode_corpus(model: &Model, utts: &[Utterance], vocab: &Vocabulary, threads: usize) -> Result<Vec<String>> {
    if utts.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let max_len = utts.iter().map(|u| u.transcript.chars().count()).max().unwrap_or(0) * 2 + 5;
    let chunks: Vec<&[Utterance]> = utts.chunks(DECODE_BATCH).collect();
    let decode = |chunk: &[Utterance]| -> Result<Vec<String>> {
        let refs: Vec<&Utterance> = chunk.iter().collect();
        let x = pad_features(&refs)?;
        model
            .greedy_decode(&x, max_len)?
            .into_iter()
            .map(|h| vocab.decode(&h.ids).map_err(EvalError::from))
            .collect()
    };
    let threads = threads.clamp(1, chunks.len());
    let per_worker = chunks.len().div_ceil(threads);
    let results: Vec<Result<Vec<String>>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .chunks(per_worker)
            .map(|group| {
                s.spawn(move || -> Result<Vec<String>> {
                    let mut out = Vec::new();
                    for chunk in group {
                        out.extend(decode(chunk)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("decode worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(utts.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Decodes `utts` and scores them against their transcripts.
pub fn evaluate(model: &Model, utts: &[Utterance], vocab: &Vocabulary) -> Result<CerSummary> {
    let hyps = decode_corpus(model, utts, vocab, worker_count())?;
    let pairs: Vec<(String, String)> = utts
        .iter()
        .zip(hyps)
        .map(|(u, h)| (u.transcript.to_uppercase(), h))
        .collect();
    corpus_cer(&pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Embedding {
    H,
    H1,
    H2,
}

impl Embedding {
    pub fn name(self) -> &'static str {
        match self {
            Embedding::H => "h",
            Embedding::H1 => "h1",
            Embedding::H2 => "h2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Speaker,
    Env,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Speaker => "speaker",
            Target::Env => "env",
        }
    }

    pub fn label(self, u: &Utterance) -> Option<usize> {
        match self {
            Target::Speaker => u.speaker,
            Target::Env => u.env,
        }
    }
}

/// Labels for every utterance, or an error naming the first one without.
pub fn labels(utts: &[Utterance], target: Target) -> Result<Vec<usize>> {
    utts.iter()
        .map(|u| {
            target
                .label(u)
                .ok_or_else(|| EvalError::Contract(format!("utterance {} has no {} label", u.id, target.name())))
        })
        .collect()
}

/// Per-utterance encoder outputs `[L×E]` from a frozen model. `h` is the
/// single encoder of a base or gradient-reversal model; `h1`/`h2` exist only
/// in the split model.
pub fn extract_embeddings(model: &Model, utts: &[Utterance], which: Embedding) -> Result<Vec<Tensor>> {
    let prefix = match (model.kind, which) {
        (ModelKind::Niesr, Embedding::H1) => "enc1",
        (ModelKind::Niesr, Embedding::H2) => "enc2",
        (ModelKind::Base | ModelKind::Grl, Embedding::H) => "enc1",
        (kind, e) => {
            return Err(EvalError::Contract(format!(
                "a {} checkpoint has no `{}` embedding (use {})",
                kind.name(),
                e.name(),
                if kind == ModelKind::Niesr { "h1 or h2" } else { "h" }
            )))
        }
    };
    let mut out = Vec::with_capacity(utts.len());
    for chunk in utts.chunks(DECODE_BATCH) {
        let refs: Vec<&Utterance> = chunk.iter().collect();
        let x = pad_features(&refs)?;
        let mut g = Graph::frozen(&model.params);
        let (h, lens) = model.encode(&mut g, prefix, &x)?;
        let v = g.value(h);
        let (l, e) = (v.shape()[1], v.shape()[2]);
        for (b, &n) in lens.iter().enumerate() {
            let start = b * l * e;
            out.push(Tensor::new(vec![n, e], v.data()[start..start + n * e].to_vec()));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 16,
            epochs: 100,
            lr: 1e-2,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Utterance-level split holding out `test_fraction` of every class.
pub fn stratified_split(labels: &[usize], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &z) in labels.iter().enumerate() {
        by_class.entry(z).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn pad_embeddings(embs: &[&Tensor]) -> (Tensor, Vec<usize>) {
    let e = embs[0].shape()[1];
    let l = embs.iter().map(|t| t.shape()[0]).max().unwrap_or(0);
    let mut data = vec![0.0; embs.len() * l * e];
    for (b, t) in embs.iter().enumerate() {
        data[b * l * e..b * l * e + t.len()].copy_from_slice(t.data());
    }
    (Tensor::new(vec![embs.len(), l, e], data), embs.iter().map(|t| t.shape()[0]).collect())
}

/// BLSTM, mean pool over valid frames, two fully connected layers.
struct Probe {
    blstm: Blstm,
    head: PooledClassifier,
}

impl Probe {
    fn logits(&self, g: &mut Graph, x: Tensor, lens: &[usize]) -> crate::tensor::Result<crate::Var> {
        let xv = g.constant(x);
        let y = self.blstm.forward(g, xv, lens)?;
        self.head.forward(g, y, lens)
    }
}

/// Trains a fresh probe on `(train, train_labels)` and returns its accuracy
/// on `(test, test_labels)`. The embeddings are plain tensors, so nothing
/// flows back into whatever produced them.
pub fn probe_train_eval(
    train: &[Tensor],
    train_labels: &[usize],
    test: &[Tensor],
    test_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64> {
    if train.is_empty() || test.is_empty() || train.len() != train_labels.len() || test.len() != test_labels.len() {
        return Err(EvalError::Contract("probe needs labelled train and test embeddings".into()));
    }
    let mut classes: Vec<usize> = train_labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(EvalError::Contract("probe training split has a single class".into()));
    }
    let k = test_labels.iter().chain(train_labels).max().copied().unwrap_or(0) + 1;
    let e = train[0].shape()[1];
    let probe = Probe {
        blstm: Blstm::new("probe.blstm", e, cfg.hidden),
        head: PooledClassifier::new("probe", 2 * cfg.hidden, cfg.hidden, k),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamStore::new();
    probe.blstm.init(&mut params, &mut rng);
    probe.head.init(&mut params, &mut rng);
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let embs: Vec<&Tensor> = batch.iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
            let (x, lens) = pad_embeddings(&embs);
            let grads = {
                let mut g = Graph::new(&params);
                let logits = probe.logits(&mut g, x, &lens)?;
                let loss = cross_entropy(&mut g, logits, &labels)?;
                g.backward(loss)?;
                g.param_grads()
            };
            opt.step(&mut params, &grads)
                .map_err(|e| EvalError::Contract(format!("probe training failed: {e}")))?;
        }
    }
    let mut correct = 0;
    for (chunk, labels) in test.chunks(DECODE_BATCH).zip(test_labels.chunks(DECODE_BATCH)) {
        let embs: Vec<&Tensor> = chunk.iter().collect();
        let (x, lens) = pad_embeddings(&embs);
        let mut g = Graph::frozen(&params);
        let logits = probe.logits(&mut g, x, &lens)?;
        for (row, &z) in g.value(logits).data().chunks(k).zip(labels) {
            let pred = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap();
            correct += usize::from(pred == z);
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub cer: Option<f64>,
    pub rel_improvement: Option<f64>,
    /// target -> embedding -> accuracy
    #[serde(default)]
    pub probes: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub runs: Vec<RunReport>,
}

const PROBE_COLUMNS: [(&str, &str); 6] = [
    ("speaker", "h"),
    ("speaker", "h1"),
    ("speaker", "h2"),
    ("env", "h"),
    ("env", "h1"),
    ("env", "h2"),
];

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    /// Fixed-width table: CER columns, then probe accuracies (%) per target
    /// and embedding. Missing values print as `-`.
    pub fn render(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut out = format!("{:<16} {:>8} {:>8}", "run", "CER%", "rel%");
        for (t, e) in PROBE_COLUMNS {
            let short = if t == "speaker" { "spk" } else { "env" };
            out.push_str(&format!(" {:>8}", format!("{short}:{e}")));
        }
        out.push('\n');
        for r in &self.runs {
            out.push_str(&format!("{:<16} {:>8} {:>8}", r.name, pct(r.cer), pct(r.rel_improvement)));
            for (t, e) in PROBE_COLUMNS {
                let v = r.probes.get(t).and_then(|m| m.get(e)).copied();
                out.push_str(&format!(" {:>8}", pct(v)));
            }
            out.push('\n');
        }
        out
    }
}
