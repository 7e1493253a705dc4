//! Independent straight-line oracles shared by the integration tests.
#![allow(dead_code)]

use infocascade::autodiff::{ParamSet, Tensor};
use infocascade::model::{Architecture, EncoderConfig, LstmConfig};
use infocascade::tokenizer::TokenSequence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Sequence of `ids` padded with `fill` up to `max_len`.
pub fn padded(ids: &[usize], max_len: usize, fill: usize) -> TokenSequence {
    let mut all = ids.to_vec();
    all.resize(max_len, fill);
    TokenSequence {
        ids: all,
        mask: (0..max_len).map(|i| u8::from(i < ids.len())).collect(),
        true_length: ids.len(),
    }
}

pub fn small_arch(vocab: usize, max_len: usize, classes: usize, lstm_layers: usize) -> Architecture {
    Architecture {
        encoder: EncoderConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 8,
            max_len,
            vocab_size: vocab,
            dropout_rate: 0.1,
        },
        lstm: LstmConfig {
            input_size: 8,
            hidden_size: 8,
            n_layers: lstm_layers,
        },
        classes,
    }
}

// ---------------------------------------------------------------------------
// Chi-squared test of independence.

/// `(expected, statistic)` computed cell by cell from the marginals.
pub fn chi_square_oracle(observed: &[Vec<u64>]) -> (Vec<Vec<f64>>, f64) {
    let rows = observed.len();
    let cols = observed[0].len();
    let mut row_tot = vec![0.0; rows];
    let mut col_tot = vec![0.0; cols];
    let mut grand = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let v = observed[i][j] as f64;
            row_tot[i] += v;
            col_tot[j] += v;
            grand += v;
        }
    }
    let mut expected = vec![vec![0.0; cols]; rows];
    let mut stat = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let e = row_tot[i] * col_tot[j] / grand;
            expected[i][j] = e;
            let d = observed[i][j] as f64 - e;
            stat += d * d / e;
        }
    }
    (expected, stat)
}

// ---------------------------------------------------------------------------
// Classification metrics.

pub struct BruteMetrics {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One-vs-rest counts taken by scanning the label lists for each class.
pub fn brute_metrics(gold: &[usize], pred: &[usize], k: usize) -> BruteMetrics {
    let mut m = BruteMetrics {
        precision: vec![],
        recall: vec![],
        f1: vec![],
        macro_precision: 0.0,
        macro_recall: 0.0,
        macro_f1: 0.0,
        accuracy: 0.0,
    };
    for c in 0..k {
        let tp = gold.iter().zip(pred).filter(|(g, p)| **g == c && **p == c).count();
        let fp = gold.iter().zip(pred).filter(|(g, p)| **g != c && **p == c).count();
        let fn_ = gold.iter().zip(pred).filter(|(g, p)| **g == c && **p != c).count();
        let p = ratio(tp, tp + fp);
        let r = ratio(tp, tp + fn_);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        m.precision.push(p);
        m.recall.push(r);
        m.f1.push(f);
    }
    m.macro_precision = m.precision.iter().sum::<f64>() / k as f64;
    m.macro_recall = m.recall.iter().sum::<f64>() / k as f64;
    m.macro_f1 = m.f1.iter().sum::<f64>() / k as f64;
    let correct = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    m.accuracy = ratio(correct, gold.len());
    m
}

// ---------------------------------------------------------------------------
// Hybrid classifier, one sequence at a time, padding never touched.

fn mat<'a>(p: &'a ParamSet, name: &str) -> &'a Tensor {
    p.get(name).unwrap_or_else(|| panic!("missing {name}"))
}

/// `x · W + b` for `W` of shape `[in, out]`.
fn affine(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), rows);
    (0..cols)
        .map(|j| {
            let mut s = b.map_or(0.0, |b| b.data()[j]);
            for (i, xi) in x.iter().enumerate() {
                s += xi * w.data()[i * cols + j];
            }
            s
        })
        .collect()
}

fn layer_norm(x: &[f64], gain: &Tensor, bias: &Tensor, eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(j, v)| gain.data()[j] * (v - mean) / (var + eps).sqrt() + bias.data()[j])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Encoder states for the unpadded prefix `ids`, one vector per position.
pub fn encoder_oracle(p: &ParamSet, arch: &Architecture, ids: &[usize]) -> Vec<Vec<f64>> {
    let e = &arch.encoder;
    let d = e.d_model;
    let dh = d / e.n_heads;
    let emb = mat(p, "embed.token");
    let pos = mat(p, "embed.position");
    let mut x: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(t, &id)| (0..d).map(|j| emb.data()[id * d + j] + pos.data()[t * d + j]).collect())
        .collect();
    let n = ids.len();
    for l in 0..e.n_layers {
        let q_ = |s: &str| mat(p, &format!("enc.{l}.{s}"));
        let h: Vec<Vec<f64>> = x.iter().map(|v| layer_norm(v, q_("ln1.gain"), q_("ln1.bias"), 1e-5)).collect();
        let q: Vec<Vec<f64>> = h.iter().map(|v| affine(v, q_("attn.wq"), Some(q_("attn.bq")))).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|v| affine(v, q_("attn.wk"), Some(q_("attn.bk")))).collect();
        let vv: Vec<Vec<f64>> = h.iter().map(|v| affine(v, q_("attn.wv"), Some(q_("attn.bv")))).collect();
        for t in 0..n {
            let mut ctx = vec![0.0; d];
            for head in 0..e.n_heads {
                let r = head * dh..(head + 1) * dh;
                let scores: Vec<f64> = (0..n)
                    .map(|s| {
                        let dot: f64 = r.clone().map(|j| q[t][j] * k[s][j]).sum();
                        dot / (dh as f64).sqrt()
                    })
                    .collect();
                let w = softmax(&scores);
                for s in 0..n {
                    for j in r.clone() {
                        ctx[j] += w[s] * vv[s][j];
                    }
                }
            }
            let out = affine(&ctx, q_("attn.wo"), Some(q_("attn.bo")));
            for j in 0..d {
                x[t][j] += out[j];
            }
        }
        for xt in x.iter_mut() {
            let h2 = layer_norm(xt, q_("ln2.gain"), q_("ln2.bias"), 1e-5);
            let f: Vec<f64> = affine(&h2, q_("ff.w1"), Some(q_("ff.b1"))).into_iter().map(gelu).collect();
            let f = affine(&f, q_("ff.w2"), Some(q_("ff.b2")));
            for j in 0..d {
                xt[j] += f[j];
            }
        }
    }
    x
}

/// Final hidden state of the stacked LSTM run over `inputs`.
pub fn lstm_oracle(p: &ParamSet, arch: &Architecture, inputs: &[Vec<f64>]) -> Vec<f64> {
    let hs = arch.lstm.hidden_size;
    let mut seq = inputs.to_vec();
    let mut h = vec![0.0; hs];
    for l in 0..arch.lstm.n_layers {
        let w = |s: &str| mat(p, &format!("lstm.{l}.{s}"));
        h = vec![0.0; hs];
        let mut c = vec![0.0; hs];
        let mut outputs = Vec::new();
        for x in &seq {
            let gate = |name: &str, h: &[f64]| -> Vec<f64> {
                let a = affine(x, w(&format!("w_{name}")), Some(w(&format!("b_{name}"))));
                let b = affine(h, w(&format!("u_{name}")), None);
                a.iter().zip(&b).map(|(u, v)| u + v).collect()
            };
            let i: Vec<f64> = gate("i", &h).into_iter().map(sigmoid).collect();
            let f: Vec<f64> = gate("f", &h).into_iter().map(sigmoid).collect();
            let g: Vec<f64> = gate("g", &h).into_iter().map(f64::tanh).collect();
            let o: Vec<f64> = gate("o", &h).into_iter().map(sigmoid).collect();
            for j in 0..hs {
                c[j] = f[j] * c[j] + i[j] * g[j];
                h[j] = o[j] * c[j].tanh();
            }
            outputs.push(h.clone());
        }
        seq = outputs;
    }
    h
}

/// Eval-mode class probabilities for one unpadded sequence.
pub fn classifier_oracle(p: &ParamSet, arch: &Architecture, ids: &[usize]) -> Vec<f64> {
    let states = encoder_oracle(p, arch, ids);
    let h = lstm_oracle(p, arch, &states);
    softmax(&affine(&h, mat(p, "head.weight"), Some(mat(p, "head.bias"))))
}
