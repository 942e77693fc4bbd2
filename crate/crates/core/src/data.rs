//! Corpora: synthetic nuisance-controlled utterances, log-Mel features from
//! 16-bit WAV, vocabulary handling, batching and the on-disk formats.
//!
//! Feature files (`FEAT1`) are `b"FEAT1\0"`, `u32` rows, `u32` cols, then
//! row-major `f32` little-endian values. Manifests are JSON lines with
//! `id`, `feat_path` (relative to the manifest), `transcript`, `speaker`, `env`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: usize = 3;

/// Ordered uppercase character set behind three reserved ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    chars: Vec<char>,
}

impl Vocabulary {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let mut out: Vec<char> = Vec::new();
        for c in chars {
            let up = uppercase(c)?;
            if !out.contains(&up) {
                out.push(up);
            }
        }
        Ok(Vocabulary { chars: out })
    }

    /// First `n` letters of the Latin alphabet.
    pub fn alphabet(n: usize) -> Result<Self> {
        if n == 0 || n > 26 {
            return Err(DataError::Invalid(format!("alphabet size {n} outside 1..=26")));
        }
        Ok(Vocabulary {
            chars: (b'A'..b'A' + n as u8).map(char::from).collect(),
        })
    }

    /// Number of ids including pad, sos and eos.
    pub fn size(&self) -> usize {
        self.chars.len() + SPECIALS
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Uppercases `text` and appends the end-of-sequence id.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(text.len() + 1);
        for c in text.chars() {
            let up = uppercase(c)?;
            let pos = self
                .chars
                .iter()
                .position(|&v| v == up)
                .ok_or_else(|| DataError::Invalid(format!("character {c:?} is not in the vocabulary")))?;
            ids.push(pos + SPECIALS);
        }
        ids.push(EOS);
        Ok(ids)
    }

    /// Inverse of [`encode`](Self::encode); stops at the first end-of-sequence id.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD | SOS => return Err(DataError::Invalid(format!("reserved id {id} inside a transcript"))),
                _ => out.push(
                    *self
                        .chars
                        .get(id - SPECIALS)
                        .ok_or_else(|| DataError::Invalid(format!("id {id} out of vocabulary")))?,
                ),
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text: String = self.chars.iter().collect();
        let json = serde_json::json!({ "chars": text });
        fs::write(path, format!("{json}\n")).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(io_err(path))?;
        let v: serde_json::Value = serde_json::from_str(&raw).map_err(|e| format_err(path, e.to_string()))?;
        let chars = v["chars"]
            .as_str()
            .ok_or_else(|| format_err(path, "missing \"chars\" string"))?;
        Vocabulary::new(chars.chars())
    }
}

fn uppercase(c: char) -> Result<char> {
    let mut up = c.to_uppercase();
    match (up.next(), up.next()) {
        (Some(u), None) => Ok(u),
        _ => Err(DataError::Invalid(format!("character {c:?} has no single uppercase form"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T×D]`
    pub features: Tensor,
    pub transcript: String,
    pub speaker: Option<usize>,
    pub env: Option<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub alphabet_size: usize,
    pub feat_dim: usize,
    pub frames_per_char: usize,
    pub speakers: usize,
    pub offset_scale: f64,
    pub envs: usize,
    pub noise_scale: f64,
    pub min_chars: usize,
    pub max_chars: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            alphabet_size: 6,
            feat_dim: 12,
            frames_per_char: 3,
            speakers: 4,
            offset_scale: 1.0,
            envs: 2,
            noise_scale: 0.1,
            min_chars: 3,
            max_chars: 6,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("alphabet_size", self.alphabet_size),
            ("feat_dim", self.feat_dim),
            ("frames_per_char", self.frames_per_char),
            ("speakers", self.speakers),
            ("envs", self.envs),
            ("min_chars", self.min_chars),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(DataError::Invalid(format!("synth spec: {name} must be at least 1")));
            }
        }
        if self.max_chars < self.min_chars {
            return Err(DataError::Invalid("synth spec: max_chars < min_chars".into()));
        }
        if self.alphabet_size > 26 {
            return Err(DataError::Invalid("synth spec: alphabet_size above 26".into()));
        }
        if !(self.offset_scale >= 0.0 && self.noise_scale >= 0.0) {
            return Err(DataError::Invalid("synth spec: scales must be non-negative".into()));
        }
        Ok(())
    }
}

const NOISE_TAPS: usize = 3;

/// Fixed random world behind a [`SynthSpec`]: per-character templates,
/// per-speaker offsets and per-environment noise colouring. Speaker ids run
/// over `0..total_speakers` so that splits can use disjoint ranges.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    spec: SynthSpec,
    vocab: Vocabulary,
    templates: Vec<Vec<f64>>,
    offsets: Vec<Vec<f64>>,
    env_gains: Vec<Vec<f64>>,
    env_taps: Vec<[f64; NOISE_TAPS]>,
}

impl Synthesizer {
    pub fn new(spec: &SynthSpec, total_speakers: usize) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let d = spec.feat_dim;
        let normal = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
        let templates = (0..spec.alphabet_size)
            .map(|_| normal(spec.frames_per_char * d, &mut rng))
            .collect();
        let offsets = (0..total_speakers.max(spec.speakers))
            .map(|_| normal(d, &mut rng).into_iter().map(|v| v * spec.offset_scale).collect())
            .collect();
        let mut env_gains = Vec::new();
        let mut env_taps = Vec::new();
        for _ in 0..spec.envs {
            env_gains.push((0..d).map(|_| rng.random_range(0.2..1.0)).collect());
            let mut taps = [0.0; NOISE_TAPS];
            for t in &mut taps {
                *t = rng.sample(StandardNormal);
            }
            let norm = taps.iter().map(|t| t * t).sum::<f64>().sqrt().max(1e-12);
            env_taps.push(taps.map(|t| t / norm));
        }
        Ok(Synthesizer {
            spec: spec.clone(),
            vocab: Vocabulary::alphabet(spec.alphabet_size)?,
            templates,
            offsets,
            env_gains,
            env_taps,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn speaker_offset(&self, speaker: usize) -> &[f64] {
        &self.offsets[speaker]
    }

    /// Builds one utterance; noise is drawn from `rng`.
    pub fn render(&self, id: String, transcript: &str, speaker: usize, env: usize, rng: &mut impl Rng) -> Result<Utterance> {
        if speaker >= self.offsets.len() || env >= self.spec.envs {
            return Err(DataError::Invalid(format!("nuisance ids ({speaker}, {env}) out of range")));
        }
        let ids = self.vocab.encode(transcript)?;
        let (d, fpc) = (self.spec.feat_dim, self.spec.frames_per_char);
        let chars = &ids[..ids.len() - 1];
        if chars.is_empty() {
            return Err(DataError::Invalid("empty transcript".into()));
        }
        let t = chars.len() * fpc;
        let mut data = Vec::with_capacity(t * d);
        for &c in chars {
            data.extend_from_slice(&self.templates[c - SPECIALS]);
        }
        let offset = &self.offsets[speaker];
        for frame in data.chunks_mut(d) {
            for (v, o) in frame.iter_mut().zip(offset) {
                *v += o;
            }
        }
        if self.spec.noise_scale > 0.0 {
            let white: Vec<f64> = (0..(t + NOISE_TAPS - 1) * d).map(|_| rng.sample(StandardNormal)).collect();
            let (gains, taps) = (&self.env_gains[env], &self.env_taps[env]);
            for (i, frame) in data.chunks_mut(d).enumerate() {
                for (j, v) in frame.iter_mut().enumerate() {
                    let coloured: f64 = taps.iter().enumerate().map(|(k, w)| w * white[(i + k) * d + j]).sum();
                    *v += self.spec.noise_scale * gains[j] * coloured;
                }
            }
        }
        Ok(Utterance {
            id,
            features: Tensor::new(vec![t, d], data),
            transcript: transcript.to_string(),
            speaker: Some(speaker),
            env: Some(env),
        })
    }

    /// `n` utterances with speakers drawn from `speakers` and random
    /// transcripts, environments cycling so every split sees all of them.
    pub fn generate(&self, prefix: &str, n: usize, speakers: std::ops::Range<usize>, rng: &mut impl Rng) -> Result<Vec<Utterance>> {
        if n == 0 {
            return Err(DataError::Invalid("requested zero utterances".into()));
        }
        if speakers.is_empty() || speakers.end > self.offsets.len() {
            return Err(DataError::Invalid(format!("speaker range {speakers:?} out of bounds")));
        }
        let n_spk = speakers.len();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let len = rng.random_range(self.spec.min_chars..=self.spec.max_chars);
            let text: String = (0..len)
                .map(|_| self.vocab.chars()[rng.random_range(0..self.spec.alphabet_size)])
                .collect();
            let speaker = speakers.start + i % n_spk;
            let env = (i / n_spk) % self.spec.envs;
            out.push(self.render(format!("{prefix}{i:05}"), &text, speaker, env, rng)?);
        }
        Ok(out)
    }
}

/// `n` utterances over `spec.speakers` speakers; a pure function of `(spec, n)`.
pub fn synth_generate(spec: &SynthSpec, n: usize) -> Result<Vec<Utterance>> {
    let synth = Synthesizer::new(spec, spec.speakers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0001);
    synth.generate("utt", n, 0..spec.speakers, &mut rng)
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub vocab: Vocabulary,
}

/// Train/dev/test corpora whose speaker sets are disjoint; each split gets
/// `spec.speakers` speakers of its own.
pub fn synth_splits(spec: &SynthSpec, n_train: usize, n_dev: usize, n_test: usize) -> Result<Splits> {
    let s = spec.speakers;
    let synth = Synthesizer::new(spec, 3 * s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0002);
    Ok(Splits {
        train: synth.generate("train", n_train, 0..s, &mut rng)?,
        dev: synth.generate("dev", n_dev, s..2 * s, &mut rng)?,
        test: synth.generate("test", n_test, 2 * s..3 * s, &mut rng)?,
        vocab: synth.vocab().clone(),
    })
}

/// Zero-padded features `[B×T×D]` with per-utterance frame counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub features: Tensor,
    pub lengths: Vec<usize>,
}

impl SequenceBatch {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn feat_dim(&self) -> usize {
        self.features.shape()[2]
    }
}

/// Target ids `[B×S]` (end-of-sequence included, pad-filled) and lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptBatch {
    pub ids: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
}

impl TranscriptBatch {
    pub fn max_len(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }
}

pub fn pad_features(utts: &[&Utterance]) -> Result<SequenceBatch> {
    let first = utts.first().ok_or_else(|| DataError::Invalid("empty batch".into()))?;
    let d = first.features.shape()[1];
    let t = utts.iter().map(|u| u.frames()).max().unwrap_or(0);
    let mut data = vec![0.0; utts.len() * t * d];
    let mut lengths = Vec::with_capacity(utts.len());
    for (b, u) in utts.iter().enumerate() {
        if u.features.shape()[1] != d {
            return Err(DataError::Invalid(format!("utterance {} has feature dim {}, expected {d}", u.id, u.features.shape()[1])));
        }
        if u.frames() == 0 {
            return Err(DataError::Invalid(format!("utterance {} has no frames", u.id)));
        }
        data[b * t * d..b * t * d + u.features.len()].copy_from_slice(u.features.data());
        lengths.push(u.frames());
    }
    Ok(SequenceBatch {
        features: Tensor::new(vec![utts.len(), t, d], data),
        lengths,
    })
}

pub fn batch_pad(utts: &[&Utterance], vocab: &Vocabulary) -> Result<(SequenceBatch, TranscriptBatch)> {
    let x = pad_features(utts)?;
    let encoded = utts.iter().map(|u| vocab.encode(&u.transcript)).collect::<Result<Vec<_>>>()?;
    let s = encoded.iter().map(Vec::len).max().unwrap_or(0);
    let lengths = encoded.iter().map(Vec::len).collect();
    let ids = encoded
        .into_iter()
        .map(|mut v| {
            v.resize(s, PAD);
            v
        })
        .collect();
    Ok((x, TranscriptBatch { ids, lengths }))
}

/// Index batches of at most `batch_size`, grouped by similar frame count.
/// Batch order is shuffled with `rng`.
pub fn bucket_batches(utts: &[Utterance], batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| utts[i].frames());
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

const FEAT_MAGIC: &[u8; 6] = b"FEAT1\0";

pub fn encode_features(t: &Tensor) -> Vec<u8> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let mut out = Vec::with_capacity(14 + 4 * t.len());
    out.extend_from_slice(FEAT_MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 14 || &bytes[..6] != FEAT_MAGIC {
        return Err(format_err(path, "not a FEAT1 file"));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let payload = &bytes[14..];
    if payload.len() != rows * cols * 4 {
        return Err(format_err(
            path,
            format!("payload is {} bytes, expected {} for {rows}x{cols}", payload.len(), rows * cols * 4),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Tensor::new(vec![rows, cols], data))
}

pub fn write_features(path: &Path, t: &Tensor) -> Result<()> {
    if t.rank() != 2 {
        return Err(DataError::Invalid(format!("features must be 2-d, got {:?}", t.shape())));
    }
    fs::write(path, encode_features(t)).map_err(io_err(path))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_features(&bytes, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub feat_path: String,
    pub transcript: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env: Option<usize>,
}

/// Writes `{dir}/{split}.jsonl` and one feature file per utterance under
/// `{dir}/feats/{split}/`.
pub fn write_corpus(dir: &Path, split: &str, utts: &[Utterance]) -> Result<()> {
    let feat_dir = dir.join("feats").join(split);
    fs::create_dir_all(&feat_dir).map_err(io_err(&feat_dir))?;
    let manifest = dir.join(format!("{split}.jsonl"));
    let mut out = String::new();
    for u in utts {
        let rel = format!("feats/{split}/{}.feat", u.id);
        write_features(&dir.join(&rel), &u.features)?;
        let entry = ManifestEntry {
            id: u.id.clone(),
            feat_path: rel,
            transcript: u.transcript.clone(),
            speaker: u.speaker,
            env: u.env,
        };
        out.push_str(&serde_json::to_string(&entry).expect("manifest entry serializes"));
        out.push('\n');
    }
    let mut f = fs::File::create(&manifest).map_err(io_err(&manifest))?;
    f.write_all(out.as_bytes()).map_err(io_err(&manifest))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?;
        entries.push(e);
    }
    Ok(entries)
}

/// Reads `{dir}/{split}.jsonl` and its feature files.
pub fn read_corpus(dir: &Path, split: &str) -> Result<Vec<Utterance>> {
    let manifest = dir.join(format!("{split}.jsonl"));
    read_manifest(&manifest)?
        .into_iter()
        .map(|e| {
            Ok(Utterance {
                features: read_features(&dir.join(&e.feat_path))?,
                id: e.id,
                transcript: e.transcript,
                speaker: e.speaker,
                env: e.env,
            })
        })
        .collect()
}

/// 16-bit mono PCM samples and the sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<i16>, u32)> {
    let reader = hound::WavReader::open(path).map_err(|e| format_err(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(format_err(
            path,
            format!(
                "expected 16-bit mono PCM, got {} channel(s) of {}-bit {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| format_err(path, e.to_string()))?;
    Ok((samples, spec.sample_rate))
}

pub const LOG_FLOOR: f64 = 1e-10;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the `n_mels` triangular filters spanning
/// 0 to Nyquist.
pub fn mel_centers(sample_rate: u32, n_mels: usize) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Log-Mel filterbank features, 25 ms frames every 10 ms.
pub fn logmel_extract(pcm: &[i16], sample_rate: u32, n_mels: usize) -> Result<Tensor> {
    if sample_rate < 8000 {
        return Err(DataError::Invalid(format!("sample rate {sample_rate} below 8000")));
    }
    if n_mels == 0 {
        return Err(DataError::Invalid("n_mels must be positive".into()));
    }
    let frame = sample_rate as usize * 25 / 1000;
    let hop = sample_rate as usize * 10 / 1000;
    if pcm.len() < frame {
        return Err(DataError::Invalid(format!(
            "{} samples is shorter than one {frame}-sample frame",
            pcm.len()
        )));
    }
    let t = 1 + (pcm.len() - frame) / hop;
    let nfft = frame.next_power_of_two();
    let bins = nfft / 2 + 1;

    let signal: Vec<f64> = pcm.iter().map(|&s| s as f64 / 32768.0).collect();
    let mut emph = Vec::with_capacity(signal.len());
    emph.push(signal[0]);
    for i in 1..signal.len() {
        emph.push(signal[i] - 0.97 * signal[i - 1]);
    }
    let window: Vec<f64> = (0..frame)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (frame - 1) as f64).cos())
        .collect();

    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fbank = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / nfft as f64;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fbank[m * bins + k] = w;
        }
    }

    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    let mut mag = vec![0.0; bins];
    let mut out = Vec::with_capacity(t * n_mels);
    for i in 0..t {
        let start = i * hop;
        for (n, slot) in buf.iter_mut().enumerate() {
            *slot = if n < frame {
                Complex::new(emph[start + n] * window[n], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (m, c) in mag.iter_mut().zip(&buf) {
            *m = c.norm();
        }
        for m in 0..n_mels {
            let e: f64 = fbank[m * bins..(m + 1) * bins].iter().zip(&mag).map(|(w, v)| w * v).sum();
            out.push(e.max(LOG_FLOOR).ln());
        }
    }
    Ok(Tensor::new(vec![t, n_mels], out))
}
