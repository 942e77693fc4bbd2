//! End-to-end acceptance checks. Each test prints one line,
//! `acceptance <n> PASS|FAIL <name>: <detail>`, then asserts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use niesr::attention::{encoder_mask, Decoder};
use niesr::data::{
    batch_pad, decode_features, encode_features, read_corpus, synth_generate, write_corpus, SynthSpec, Utterance,
    Vocabulary,
};
use niesr::eval::{evaluate, extract_embeddings, labels, probe_train_eval, Embedding, ProbeConfig, Target};
use niesr::gradcheck::{check_gradient, check_param_gradient, relative_error, tape_gradient};
use niesr::layers::Lstm;
use niesr::models::{decode_checkpoint, encode_checkpoint, is_p2, Model, ModelConfig, ModelKind};
use niesr::optim::Adam;
use niesr::tape::{Tape, Var};
use niesr::training::{
    loss_disentangle, loss_recon, loss_total, p1_update, p2_updates, train, Corpus, TrainConfig, TrainOptions,
};
use niesr::{Graph, ParamStore, Tensor};

fn verdict(n: usize, name: &str, ok: bool, detail: &str) {
    println!("acceptance {n} {} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "acceptance {n} ({name}) failed: {detail}");
}

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn micro_config() -> ModelConfig {
    ModelConfig {
        enc_hidden: 3,
        subsample_dim: 3,
        dec_hidden: 3,
        att_dim: 3,
        att_channels: 2,
        att_kernel: 3,
        recon_hidden: 3,
        upsample_dim: 3,
        dis_hidden: 3,
        dropout: 0.4,
    }
}

fn micro_corpus(n: usize, seed: u64) -> (Vec<Utterance>, Vocabulary) {
    let spec = SynthSpec {
        alphabet_size: 4,
        feat_dim: 3,
        frames_per_char: 2,
        min_chars: 2,
        max_chars: 3,
        seed,
        ..SynthSpec::default()
    };
    (synth_generate(&spec, n).unwrap(), Vocabulary::alphabet(4).unwrap())
}

fn bits(store: &ParamStore, keep: impl Fn(&str) -> bool) -> Vec<(String, Vec<u64>)> {
    store
        .iter()
        .filter(|(n, _)| keep(n))
        .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

type Primitive = Box<dyn Fn(&mut Tape, Var) -> niesr::tensor::Result<Var>>;

fn primitive_checks() -> Vec<(&'static str, Tensor, Primitive)> {
    let w = rand_tensor(&[4, 3], 1, -1.0, 1.0);
    let w2 = w.clone();
    let batch = rand_tensor(&[2, 4, 3], 2, -1.0, 1.0);
    let other = rand_tensor(&[3, 4], 3, -1.0, 1.0);
    let (o1, o2, o3) = (other.clone(), other.clone(), other.clone());
    let col = rand_tensor(&[3, 1], 4, -1.0, 1.0);
    let (c1, c2) = (col.clone(), col.clone());
    let kernels = rand_tensor(&[3, 2], 5, -1.0, 1.0);
    let signal = rand_tensor(&[2, 6], 6, -1.0, 1.0);
    let weights = rand_tensor(&[3, 4], 7, -1.0, 1.0);
    let (wt1, wt2, wt3, wt4, wt5, wt6, wt7, wt8, wt9) = (
        weights.clone(),
        weights.clone(),
        weights.clone(),
        weights.clone(),
        weights.clone(),
        weights.clone(),
        weights.clone(),
        weights.clone(),
        weights.clone(),
    );
    // weighted sums keep every output coordinate's gradient distinct
    fn weighted(t: &mut Tape, y: Var, w: &Tensor) -> niesr::tensor::Result<Var> {
        let n = t.value(y).len();
        let wv: Vec<f64> = (0..n).map(|i| w.data()[i % w.len()] + 0.1 * i as f64).collect();
        let wv = t.constant(Tensor::new(t.shape(y).to_vec(), wv));
        let p = t.mul(y, wv)?;
        t.sum(p)
    }
    let point = rand_tensor(&[3, 4], 8, 0.2, 1.5);
    #[rustfmt::skip]
    let checks: Vec<(&'static str, Tensor, Primitive)> = vec![
        ("matmul", point.clone(), Box::new(move |t: &mut Tape, x| {
            let b = t.constant(w.clone());
            let y = t.matmul(x, b)?;
            weighted(t, y, &wt1)
        })),
        ("matmul_t", rand_tensor(&[2, 3], 9, -1.0, 1.0), Box::new(move |t: &mut Tape, x| {
            let b = t.constant(w2.clone());
            let y = t.matmul_t(x, b)?;
            weighted(t, y, &wt2)
        })),
        ("bmm", rand_tensor(&[2, 2, 4], 10, -1.0, 1.0), Box::new(move |t: &mut Tape, x| {
            let b = t.constant(batch.clone());
            let y = t.bmm(x, b)?;
            weighted(t, y, &wt3)
        })),
        ("add", point.clone(), Box::new(move |t: &mut Tape, x| {
            let o = t.constant(o1.clone());
            let y = t.add(x, o)?;
            let y = t.tanh(y)?;
            t.sum(y)
        })),
        ("sub", point.clone(), Box::new(move |t: &mut Tape, x| {
            let o = t.constant(o2.clone());
            let y = t.sub(o, x)?;
            let y = t.tanh(y)?;
            t.sum(y)
        })),
        ("mul", point.clone(), Box::new(move |t: &mut Tape, x| {
            let o = t.constant(o3.clone());
            let y = t.mul(x, o)?;
            weighted(t, y, &wt4)
        })),
        ("mul broadcast", col.clone(), Box::new(move |t: &mut Tape, x| {
            let o = t.constant(other.clone());
            let y = t.mul(o, x)?;
            let y = t.tanh(y)?;
            t.sum(y)
        })),
        ("add_row", rand_tensor(&[4], 11, -1.0, 1.0), Box::new(move |t: &mut Tape, x| {
            let o = t.constant(c1.clone().reshaped(&[3, 1]).unwrap());
            let o = t.repeat_rows(o, 1)?;
            let o = t.reshape(o, &[3, 1])?;
            let m = t.constant(Tensor::ones(&[3, 4]));
            let o = t.mul(m, o)?;
            let y = t.add_row(o, x)?;
            let y = t.tanh(y)?;
            t.sum(y)
        })),
        ("tanh", point.clone(), Box::new(move |t: &mut Tape, x| {
            let y = t.tanh(x)?;
            weighted(t, y, &wt5)
        })),
        ("sigmoid", point.clone(), Box::new(move |t: &mut Tape, x| {
            let y = t.sigmoid(x)?;
            weighted(t, y, &wt6)
        })),
        ("exp", point.clone(), Box::new(move |t: &mut Tape, x| {
            let y = t.exp(x)?;
            weighted(t, y, &wt7)
        })),
        ("log", point.clone(), Box::new(move |t: &mut Tape, x| {
            let y = t.log(x)?;
            weighted(t, y, &wt8)
        })),
        ("neg+scale", point.clone(), Box::new(|t: &mut Tape, x| {
            let y = t.neg(x)?;
            let y = t.scale(y, 2.5)?;
            let y = t.tanh(y)?;
            t.sum(y)
        })),
        ("softmax masked", point.clone(), Box::new(move |t: &mut Tape, x| {
            let y = t.softmax(x, Some(&[true, true, false, true, true, true, true, true, true, false, true, true]))?;
            weighted(t, y, &wt9)
        })),
        ("log_softmax+pick", point.clone(), Box::new(|t: &mut Tape, x| {
            let y = t.log_softmax(x)?;
            let y = t.pick(y, &[1, 3, 0])?;
            t.sum(y)
        })),
        ("gather_rows", point.clone(), Box::new(|t: &mut Tape, x| {
            let y = t.gather_rows(x, &[2, 0, 2])?;
            let y = t.tanh(y)?;
            t.sum(y)
        })),
        ("concat+slice+split", point.clone(), Box::new(move |t: &mut Tape, x| {
            let o = t.constant(c2.clone());
            let y = t.concat(&[x, o], 1)?;
            let parts = t.split(y, &[2, 3], 1)?;
            let s = t.slice(parts[1], 1, 1, 2)?;
            let a = t.tanh(parts[0])?;
            let b = t.exp(s)?;
            let (a, b) = (t.sum(a)?, t.sum(b)?);
            t.add(a, b)
        })),
        ("reshape+mean", point.clone(), Box::new(|t: &mut Tape, x| {
            let y = t.reshape(x, &[2, 6])?;
            let y = t.sigmoid(y)?;
            let y = t.mul(y, y)?;
            t.mean(y)
        })),
        ("conv1d signal", signal.clone(), Box::new(move |t: &mut Tape, x| {
            let k = t.constant(kernels.clone());
            let y = t.conv1d(x, k)?;
            let y = t.tanh(y)?;
            t.sum(y)
        })),
        ("conv1d kernels", rand_tensor(&[3, 2], 12, -1.0, 1.0), Box::new(move |t: &mut Tape, x| {
            let s = t.constant(signal.clone());
            let y = t.conv1d(s, x)?;
            let y = t.tanh(y)?;
            t.sum(y)
        })),
        ("dropout", point, Box::new(|t: &mut Tape, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let y = t.dropout(x, 0.4, true, || rng.random())?;
            let y = t.tanh(y)?;
            t.sum(y)
        })),
    ];
    checks
}

fn lstm_three_step(store: &ParamStore) -> niesr::tensor::Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let cell = Lstm::new("lstm", 3, 4);
    let mut g = Graph::new(store);
    let (mut h, mut c) = (g.constant(Tensor::zeros(&[2, 4])), g.constant(Tensor::zeros(&[2, 4])));
    let mut total = None;
    for step in 0..3 {
        let x = g.constant(rand_tensor(&[2, 3], 20 + step, -1.0, 1.0));
        (h, c) = cell.step(&mut g, x, h, c)?;
        let w = g.constant(rand_tensor(&[2, 4], 30 + step, -1.0, 1.0));
        let p = g.mul(h, w)?;
        let s = g.sum(p)?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let total = total.unwrap();
    g.backward(total)?;
    Ok((g.value(total).item(), g.param_grads()))
}

fn decoder_three_step(store: &ParamStore, dec: &Decoder) -> niesr::tensor::Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let lengths = [4, 3];
    let mut g = Graph::new(store);
    let h = g.constant(rand_tensor(&[2, 4, 4], 40, -1.0, 1.0));
    let keys = dec.attention.keys(&mut g, h)?;
    let mask = encoder_mask(&lengths, 4);
    let mut state = dec.initial_state(&mut g, &lengths, 4);
    let tokens = [[1, 1], [3, 4], [4, 2]];
    let targets = [[3, 4], [4, 2], [2, 2]];
    let mut total = None;
    for (prev, tgt) in tokens.iter().zip(&targets) {
        let (logits, next) = dec.step(&mut g, prev, state, h, keys, &mask)?;
        state = next;
        let lp = g.log_softmax(logits)?;
        let p = g.pick(lp, tgt)?;
        let s = g.sum(p)?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let total = g.neg(total.unwrap())?;
    g.backward(total)?;
    Ok((g.value(total).item(), g.param_grads()))
}

fn all_coords(store: &ParamStore) -> Vec<(String, usize)> {
    store.iter().flat_map(|(n, t)| (0..t.len()).map(move |i| (n.clone(), i))).collect()
}

#[test]
fn criterion_1_gradcheck_suite() {
    let started = Instant::now();
    let mut worst_primitive: (f64, &str) = (0.0, "");
    for (name, point, f) in primitive_checks() {
        let err = check_gradient(|t, x| f(t, x), &point, 1e-5).unwrap();
        if err > worst_primitive.0 {
            worst_primitive = (err, name);
        }
    }

    // reversal has no finite-difference oracle of its own: its gradient must
    // be -scale times the central difference of the graph without it
    let point = rand_tensor(&[3, 4], 13, -1.0, 1.0);
    let reversed = tape_gradient(
        &|t: &mut Tape, x| {
            let y = t.gradient_reversal(x, 0.7)?;
            let y = t.tanh(y)?;
            t.sum(y)
        },
        &point,
    )
    .unwrap();
    let mut grl_err: f64 = 0.0;
    for i in 0..point.len() {
        let f = |d: f64| {
            let mut p = point.clone();
            p.data_mut()[i] += d;
            p.data().iter().map(|v| v.tanh()).sum::<f64>()
        };
        let numeric = (f(1e-5) - f(-1e-5)) / 2e-5;
        grl_err = grl_err.max(relative_error(reversed[i], -0.7 * numeric));
    }
    if grl_err > worst_primitive.0 {
        worst_primitive = (grl_err, "gradient_reversal");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut lstm_store = ParamStore::new();
    Lstm::new("lstm", 3, 4).init(&mut lstm_store, &mut rng);
    let lstm_err = check_param_gradient(&lstm_store, &all_coords(&lstm_store), 1e-5, &lstm_three_step).unwrap();

    let dec = Decoder::new("dec", 5, 4, 4, 3, 2, 3);
    let mut dec_store = ParamStore::new();
    dec.init(&mut dec_store, &mut rng);
    let dec_err =
        check_param_gradient(&dec_store, &all_coords(&dec_store), 1e-5, &|s| decoder_three_step(s, &dec)).unwrap();

    let (utts, vocab) = micro_corpus(2, 4);
    let model = Model::new(ModelKind::Niesr, micro_config(), 3, vocab.size(), 0, 7).unwrap();
    let (x, y) = batch_pad(&[&utts[0], &utts[1]], &vocab).unwrap();
    let cfg = TrainConfig::paper(Corpus::Wsj0);
    let targets = {
        let mut g = Graph::frozen(&model.params);
        let b = model.niesr_forward(&mut g, &x, &y, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (g.value(b.h2).clone(), g.value(b.h1).clone())
    };
    let niesr_loss = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let b = model.niesr_forward(&mut g, &x, &y, true, &mut ChaCha8Rng::seed_from_u64(1))?;
        let xv = g.constant(x.features.clone());
        let lx = loss_recon(&mut g, xv, b.x_recon, &x.lengths)?;
        let t1 = g.constant(targets.0.clone());
        let t2 = g.constant(targets.1.clone());
        let ld = loss_disentangle(&mut g, b.dis1_out, b.dis2_out, t1, t2, &b.enc_lengths)?;
        let total = loss_total(&mut g, b.l_y, lx, ld, &cfg)?;
        g.backward(total)?;
        Ok((g.value(total).item(), g.param_grads()))
    };
    let coords = all_coords(&model.params);
    let mut sample: Vec<(String, usize)> = model.params.iter().map(|(n, _)| (n.clone(), 0)).collect();
    sample.extend(coords.choose_multiple(&mut rng, 400).cloned());
    let niesr_err = check_param_gradient(&model.params, &sample, 1e-5, &niesr_loss).unwrap();

    let secs = started.elapsed().as_secs_f64();
    let ok = worst_primitive.0 < 1e-6 && lstm_err < 1e-3 && dec_err < 1e-3 && niesr_err < 1e-3 && secs < 120.0;
    verdict(
        1,
        "gradcheck suite",
        ok,
        &format!(
            "primitives max {:.1e} ({}), lstm 3-step {lstm_err:.1e}, decoder 3-step {dec_err:.1e}, niesr micro-batch {niesr_err:.1e} over {} coords, {secs:.1}s",
            worst_primitive.0,
            worst_primitive.1,
            sample.len()
        ),
    );
}

#[test]
fn criterion_2_loss_contracts() {
    let (utts, vocab) = micro_corpus(4, 5);
    let mut model = Model::new(ModelKind::Base, micro_config(), 3, vocab.size(), 0, 1).unwrap();
    for name in ["dec.out.w", "dec.out.b"] {
        model.params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let refs: Vec<&Utterance> = utts.iter().collect();
    let (x, y) = batch_pad(&refs, &vocab).unwrap();
    let mut g = Graph::frozen(&model.params);
    let tf = model.base_forward(&mut g, &x, &y).unwrap();
    let ln_v = (vocab.size() as f64).ln();
    let uniform_err = tf
        .per_utterance
        .iter()
        .zip(&y.lengths)
        .map(|(l, &s)| (l - s as f64 * ln_v).abs())
        .fold(0.0, f64::max);
    drop(g);

    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let xs = rand_tensor(&[2, 5, 3], 6, -2.0, 2.0);
    let xv = g.constant(xs.clone());
    let same = g.constant(xs.clone());
    let zero = loss_recon(&mut g, xv, same, &[5, 3]).unwrap();
    let zero = g.value(zero).item();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut nonzero_ok = true;
    for _ in 0..50 {
        let mut moved = xs.clone();
        // perturb one valid frame
        let (b, t, d) = (rng.random_range(0..2), rng.random_range(0..3), rng.random_range(0..3));
        moved.data_mut()[(b * 5 + t) * 3 + d] += rng.random_range(0.01..1.0);
        let mv = g.constant(moved);
        let l = loss_recon(&mut g, xv, mv, &[5, 3]).unwrap();
        nonzero_ok &= g.value(l).item() > 0.0;
    }

    let mut weights_ok = true;
    for corpus in [Corpus::Wsj0, Corpus::Chime3, Corpus::Timit] {
        let cfg = TrainConfig::paper(corpus);
        for _ in 0..20 {
            let l: [f64; 3] = [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)];
            let [a, b, c] = l.map(|v| g.constant(Tensor::scalar(v)));
            let t = loss_total(&mut g, a, b, c, &cfg).unwrap();
            let want = cfg.alpha * l[0] + cfg.beta * l[1] + cfg.gamma * l[2];
            weights_ok &= g.value(t).item() == want;
        }
    }
    let ok = uniform_err < 1e-9 && zero == 0.0 && nonzero_ok && weights_ok;
    verdict(
        2,
        "loss contracts",
        ok,
        &format!(
            "uniform CE max |L - S ln|V|| {uniform_err:.1e}; L_x(x,x) = {zero}; L_x > 0 under 50 perturbations: {nonzero_ok}; weighted sum exact for 3 weight triples: {weights_ok}"
        ),
    );
}

#[test]
fn criterion_3_player_freeze() {
    let (utts, vocab) = micro_corpus(4, 6);
    let cfg = TrainConfig {
        model: micro_config(),
        ..TrainConfig::desk()
    };
    let mut model = Model::new(ModelKind::Niesr, cfg.model.clone(), 3, vocab.size(), 0, 2).unwrap();
    let refs: Vec<&Utterance> = utts.iter().collect();
    let (x, y) = batch_pad(&refs, &vocab).unwrap();
    let (mut o1, mut o2) = (Adam::new(cfg.lr_p1), Adam::new(cfg.lr_p2));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let [n1, n2] = cfg.ratio_p1_to_p2;
    let mut violations = 0;
    let mut touched_p1 = BTreeSet::new();
    let mut touched_p2 = BTreeSet::new();
    for _ in 0..20 {
        let p2_before = bits(&model.params, is_p2);
        for _ in 0..n1 {
            let (_, upd) = p1_update(&mut model, &x, &y, &cfg, &mut o1, &mut rng).unwrap();
            touched_p1.extend(upd);
        }
        violations += usize::from(bits(&model.params, is_p2) != p2_before);
        let p1_before = bits(&model.params, |n| !is_p2(n));
        let (_, upd) = p2_updates(&mut model, &x, n2, &cfg, &mut o2).unwrap();
        touched_p2.extend(upd);
        violations += usize::from(bits(&model.params, |n| !is_p2(n)) != p1_before);
    }
    let all: BTreeSet<String> = model.params.names().map(String::from).collect();
    let partition_ok =
        touched_p1.is_disjoint(&touched_p2) && touched_p1.union(&touched_p2).cloned().collect::<BTreeSet<_>>() == all;

    let mut g = Graph::frozen(&model.params);
    model.greedy_decode_in(&mut g, &x, 8).unwrap();
    let accessed = g.accessed();
    let foreign: Vec<&String> =
        accessed.iter().filter(|n| !(n.starts_with("enc1.") || n.starts_with("dec."))).collect();
    let decode_ok = foreign.is_empty() && accessed.iter().any(|n| n.starts_with("enc1.")) && accessed.iter().any(|n| n.starts_with("dec."));
    let ok = violations == 0 && partition_ok && decode_ok;
    verdict(
        3,
        "player freeze",
        ok,
        &format!(
            "20 rounds, {violations} frozen-player changes; phases partition all {} params: {partition_ok}; greedy decode reads {} params, outside enc1/dec: {foreign:?}",
            all.len(),
            accessed.len()
        ),
    );
}

#[test]
fn criterion_7_reconstruction_sanity() {
    let (utts, vocab) = micro_corpus(4, 8);
    let cfg = TrainConfig {
        alpha: 0.0,
        gamma: 0.0,
        // dropout would make the objective differ from step to step
        model: ModelConfig {
            dropout: 0.0,
            ..ModelConfig::desk()
        },
        ..TrainConfig::desk()
    };
    let mut model = Model::new(ModelKind::Niesr, cfg.model.clone(), 3, vocab.size(), 0, 3).unwrap();
    let refs: Vec<&Utterance> = utts.iter().collect();
    let (x, y) = batch_pad(&refs, &vocab).unwrap();
    let lr = cfg.lr_p1;
    let mut opt = Adam::new(lr);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut trace = Vec::new();
    for _ in 0..=50 {
        let ([_, l_x, _], _) = p1_update(&mut model, &x, &y, &cfg, &mut opt, &mut rng).unwrap();
        trace.push(l_x);
    }
    let monotone = trace.windows(2).all(|w| w[1] <= w[0]);
    let ratio = trace[50] / trace[0];
    verdict(
        7,
        "reconstruction sanity",
        monotone && ratio < 0.5,
        &format!("L_x {:.4} -> {:.4} over 50 P1 steps at lr {lr} (ratio {ratio:.3}), monotone: {monotone}", trace[0], trace[50]),
    );
}

#[test]
fn criterion_8_format_round_trips() {
    let mut ckpt_ok = true;
    for (i, kind) in [ModelKind::Base, ModelKind::Niesr, ModelKind::Grl].into_iter().enumerate() {
        let m = Model::new(kind, micro_config(), 3, 7, 4, i as u64).unwrap();
        let bytes = encode_checkpoint(&m.params);
        let back = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        ckpt_ok &= bits(&back, |_| true) == bits(&m.params, |_| true) && encode_checkpoint(&back) == bytes;
        let rebuilt = Model::from_params(back).unwrap();
        ckpt_ok &= rebuilt.kind == kind && rebuilt.config.enc_hidden == 3;
    }

    let (utts, vocab) = micro_corpus(6, 9);
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), "train", &utts).unwrap();
    let back = read_corpus(dir.path(), "train").unwrap();
    let corpus_ok = back.len() == utts.len()
        && back.iter().zip(&utts).all(|(a, b)| {
            a.id == b.id
                && a.transcript == b.transcript
                && a.speaker == b.speaker
                && a.env == b.env
                && encode_features(&a.features) == encode_features(&b.features)
        });
    // FEAT1 stores f32, so a second pass is bit-exact
    let once = decode_features(&encode_features(&utts[0].features), Path::new("mem")).unwrap();
    let twice = decode_features(&encode_features(&once), Path::new("mem")).unwrap();
    let feat_ok = bits_of(&once) == bits_of(&twice);

    let model = Model::new(ModelKind::Base, micro_config(), 3, vocab.size(), 0, 5).unwrap();
    let refs: Vec<&Utterance> = utts.iter().collect();
    let (x, y) = batch_pad(&refs, &vocab).unwrap();
    let mut g = Graph::frozen(&model.params);
    let batched = model.base_forward(&mut g, &x, &y).unwrap().per_utterance;
    let mut batch_err: f64 = 0.0;
    for (u, b) in utts.iter().zip(&batched) {
        let (x1, y1) = batch_pad(&[u], &vocab).unwrap();
        let single = model.base_forward(&mut g, &x1, &y1).unwrap().per_utterance[0];
        batch_err = batch_err.max((single - b).abs());
    }
    let ok = ckpt_ok && corpus_ok && feat_ok && batch_err < 1e-9;
    verdict(
        8,
        "format round-trips",
        ok,
        &format!(
            "checkpoint bitwise: {ckpt_ok}; manifest+FEAT1 corpus: {corpus_ok}; FEAT1 re-encode: {feat_ok}; batched vs single L_y max diff {batch_err:.1e}"
        ),
    );
}

fn bits_of(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn niesr_bin(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_niesr")).args(args).output().unwrap()
}

#[test]
fn criterion_9_training_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_string_lossy().into_owned();
    let out = niesr_bin(&["datagen", "--out", &d("data"), "--n-train", "12", "--n-dev", "4", "--n-test", "4", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::write(d("cfg.json"), r#"{"max_epochs": 3, "model": {"enc_hidden": 8, "subsample_dim": 8, "dec_hidden": 8, "att_dim": 8, "recon_hidden": 8, "upsample_dim": 8, "dis_hidden": 8}}"#).unwrap();
    let mut logs = Vec::new();
    for (run, model) in [("a", "niesr"), ("b", "niesr"), ("c", "grl"), ("d", "grl")] {
        let out = niesr_bin(&[
            "train", "--model", model, "--data", &d("data"), "--preset", "desk", "--config", &d("cfg.json"), "--run", &d(run),
            "--seed", "11",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        logs.push(std::fs::read(dir.path().join(run).join("log.jsonl")).unwrap());
    }
    let ok = logs[0] == logs[1] && logs[2] == logs[3] && !logs[0].is_empty() && logs[0].iter().filter(|&&b| b == b'\n').count() == 3;
    verdict(
        9,
        "determinism",
        ok,
        &format!(
            "niesr logs identical: {} ({} bytes); grl logs identical: {}",
            logs[0] == logs[1],
            logs[0].len(),
            logs[2] == logs[3]
        ),
    );
}

fn overfit_run(kind: ModelKind, cfg: &TrainConfig, utts: &[Utterance], vocab: &Vocabulary) -> (f64, f64, usize) {
    let started = Instant::now();
    let out = train(kind, utts, utts, vocab, cfg, TrainOptions::default()).unwrap();
    let cer = evaluate(&out.model, utts, vocab).unwrap().cer;
    (cer, started.elapsed().as_secs_f64(), out.best_epoch.unwrap_or(0))
}

#[test]
fn criterion_4_overfit_convergence() {
    let spec = SynthSpec {
        seed: 3,
        ..SynthSpec::default()
    };
    let utts = synth_generate(&spec, 10).unwrap();
    let vocab = Vocabulary::alphabet(spec.alphabet_size).unwrap();
    // the dev set is the training set; stopping early would only cut the budget
    let cfg = TrainConfig {
        max_epochs: 300,
        patience: 300,
        ..TrainConfig::desk()
    };
    let (base_cer, base_secs, base_epoch) = overfit_run(ModelKind::Base, &cfg, &utts, &vocab);
    let (niesr_cer, niesr_secs, niesr_epoch) = overfit_run(ModelKind::Niesr, &cfg, &utts, &vocab);
    let ok = base_cer < 0.05 && niesr_cer < 0.10 && base_secs < 600.0 && niesr_secs < 600.0;
    verdict(
        4,
        "overfit convergence",
        ok,
        &format!(
            "base train CER {base_cer:.3} (best epoch {base_epoch}, {base_secs:.0}s); niesr ({}/{}/{}) train CER {niesr_cer:.3} (best epoch {niesr_epoch}, {niesr_secs:.0}s)",
            cfg.alpha, cfg.beta, cfg.gamma
        ),
    );
}

const PROBE_SEEDS: u64 = 5;

/// 250 utterances from 4 speakers x 2 environments: the first 200 train
/// both the recogniser and the probe, the last 50 score the probe.
fn probe_corpus(seed: u64) -> (Vec<Utterance>, Vec<Utterance>, Vocabulary) {
    let spec = SynthSpec {
        speakers: 4,
        envs: 2,
        seed,
        ..SynthSpec::default()
    };
    let mut utts = synth_generate(&spec, 250).unwrap();
    let test = utts.split_off(200);
    (utts, test, Vocabulary::alphabet(spec.alphabet_size).unwrap())
}

fn probe_budget(seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: 20,
        patience: 20,
        seed,
        ..TrainConfig::desk()
    }
}

fn speaker_probe(model: &Model, train_set: &[Utterance], test: &[Utterance], which: Embedding, seed: u64) -> f64 {
    let a = extract_embeddings(model, train_set, which).unwrap();
    let b = extract_embeddings(model, test, which).unwrap();
    let ya = labels(train_set, Target::Speaker).unwrap();
    let yb = labels(test, Target::Speaker).unwrap();
    let cfg = ProbeConfig {
        seed,
        ..ProbeConfig::default()
    };
    probe_train_eval(&a, &ya, &b, &yb, &cfg).unwrap()
}

fn trained(kind: ModelKind, cfg: &TrainConfig, train_set: &[Utterance], vocab: &Vocabulary) -> Model {
    // dev CER on a slice of the training data picks the checkpoint
    train(kind, train_set, &train_set[..20], vocab, cfg, TrainOptions::default()).unwrap().model
}

/// Speaker-probe accuracy on the base model's `h`, per seed.
fn base_speaker_acc() -> &'static [f64] {
    static BASE: std::sync::OnceLock<Vec<f64>> = std::sync::OnceLock::new();
    BASE.get_or_init(|| {
        (0..PROBE_SEEDS)
            .map(|seed| {
                let (train_set, test, vocab) = probe_corpus(seed);
                let model = trained(ModelKind::Base, &probe_budget(seed), &train_set, &vocab);
                speaker_probe(&model, &train_set, &test, Embedding::H, seed)
            })
            .collect()
    })
}

#[test]
fn criterion_5_disentanglement_direction() {
    let started = Instant::now();
    let base = base_speaker_acc();
    let mut rows = Vec::new();
    let mut held = 0;
    for seed in 0..PROBE_SEEDS {
        let (train_set, test, vocab) = probe_corpus(seed);
        let model = trained(ModelKind::Niesr, &probe_budget(seed), &train_set, &vocab);
        let h1 = speaker_probe(&model, &train_set, &test, Embedding::H1, seed);
        let h2 = speaker_probe(&model, &train_set, &test, Embedding::H2, seed);
        let b = base[seed as usize];
        let ok = h2 - h1 >= 0.15 && h1 <= b + 0.05;
        held += usize::from(ok);
        rows.push(format!("seed {seed}: h1 {h1:.2} h2 {h2:.2} base {b:.2}{}", if ok { "" } else { " (miss)" }));
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        5,
        "disentanglement direction",
        held >= 4 && secs < 1800.0,
        &format!("{held}/{PROBE_SEEDS} seeds hold; {}; {secs:.0}s", rows.join("; ")),
    );
}

#[test]
fn criterion_6_grl_baseline() {
    let base = base_speaker_acc();
    let mut rows = Vec::new();
    let mut held = 0;
    for seed in 0..PROBE_SEEDS {
        let (train_set, test, vocab) = probe_corpus(seed);
        // at the default scale of 1.0 the reversed gradient outruns the
        // classifier and the encoder keeps more speaker information
        let cfg = TrainConfig {
            grl_scale: 0.1,
            grl_target: Target::Speaker,
            ..probe_budget(seed)
        };
        let model = trained(ModelKind::Grl, &cfg, &train_set, &vocab);
        let h = speaker_probe(&model, &train_set, &test, Embedding::H, seed);
        let b = base[seed as usize];
        let ok = b - h >= 0.05;
        held += usize::from(ok);
        rows.push(format!("seed {seed}: grl {h:.2} base {b:.2}{}", if ok { "" } else { " (miss)" }));
    }
    verdict(
        6,
        "grl baseline",
        held >= 3,
        &format!("{held}/{PROBE_SEEDS} seeds lower by >= 0.05 (grl_scale 0.1); {}", rows.join("; ")),
    );
}
