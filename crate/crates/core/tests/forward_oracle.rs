//! Second, loop-based implementation of the encoder-decoder forward pass,
//! used as an oracle for the tape-based model.

use std::collections::HashMap;

use peftweave::model::{ModelConfig, TinyTransformer, POSITION_SCALE};
use peftweave::peft::PeftState;
use peftweave::tokenizer::PAD;

type M = Vec<Vec<f64>>;

struct Weights(HashMap<String, M>);

impl Weights {
    fn of(model: &TinyTransformer) -> Self {
        Weights(
            model
                .tensors()
                .map(|(_, name, m)| (name.to_string(), m.rows().into_iter().map(|r| r.to_vec()).collect()))
                .collect(),
        )
    }

    fn get(&self, name: &str) -> &M {
        self.0.get(name).unwrap_or_else(|| panic!("no tensor {name}"))
    }
}

fn matmul(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn add(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn add_bias(a: &M, b: &M) -> M {
    a.iter().map(|r| r.iter().zip(&b[0]).map(|(x, y)| x + y).collect()).collect()
}

fn layer_norm(x: &M, w: &Weights, prefix: &str) -> M {
    let g = &w.get(&format!("{prefix}.gain"))[0];
    let b = &w.get(&format!("{prefix}.bias"))[0];
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + 1e-6).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn attention(q_in: &M, kv_in: &M, w: &Weights, prefix: &str, heads: usize, causal: bool, valid: &[bool]) -> M {
    let q = matmul(q_in, w.get(&format!("{prefix}.wq")));
    let k = matmul(kv_in, w.get(&format!("{prefix}.wk")));
    let v = matmul(kv_in, w.get(&format!("{prefix}.wv")));
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for i in 0..q.len() {
            let mut scores = Vec::new();
            for j in 0..k.len() {
                if (causal && j > i) || !valid[j] {
                    scores.push(None);
                    continue;
                }
                let s: f64 = (0..dh).map(|t| q[i][h * dh + t] * k[j][h * dh + t]).sum();
                scores.push(Some(s / (dh as f64).sqrt()));
            }
            let max = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - max).exp())).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..k.len() {
                for t in 0..dh {
                    out[i][h * dh + t] += exps[j] / total * v[j][h * dh + t];
                }
            }
        }
    }
    matmul(&out, w.get(&format!("{prefix}.wo")))
}

fn ffn(x: &M, w: &Weights, prefix: &str) -> M {
    let h = add_bias(&matmul(x, w.get(&format!("{prefix}.w1"))), w.get(&format!("{prefix}.b1")));
    let h: M = h.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
    add_bias(&matmul(&h, w.get(&format!("{prefix}.w2"))), w.get(&format!("{prefix}.b2")))
}

fn embed(ids: &[u32], w: &Weights) -> M {
    let table = w.get("embed");
    let d = table[0].len();
    ids.iter()
        .enumerate()
        .map(|(pos, &id)| {
            (0..d)
                .map(|i| {
                    let pair = (i - i % 2) as f64;
                    let angle = pos as f64 / 10_000f64.powf(pair / d as f64);
                    let p = if i % 2 == 0 { angle.sin() } else { angle.cos() };
                    table[id as usize][i] + POSITION_SCALE * p
                })
                .collect()
        })
        .collect()
}

/// Mean target cross-entropy computed without the tape.
fn oracle_loss(model: &TinyTransformer, source: &[u32], target: &[u32]) -> f64 {
    let cfg = model.config();
    let w = Weights::of(model);
    let valid: Vec<bool> = source.iter().map(|&t| t != PAD).collect();
    let mut x = embed(source, &w);
    for l in 0..cfg.n_enc_layers {
        let p = format!("enc.{l}");
        let h = layer_norm(&x, &w, &format!("{p}.ln_attn"));
        x = add(&x, &attention(&h, &h, &w, &format!("{p}.attn"), cfg.n_heads, false, &valid));
        let h = layer_norm(&x, &w, &format!("{p}.ln_ffn"));
        x = add(&x, &ffn(&h, &w, &format!("{p}.ffn")));
    }
    let memory = layer_norm(&x, &w, "enc.final_norm");
    let mut dec_in = vec![PAD];
    dec_in.extend_from_slice(&target[..target.len() - 1]);
    let mut y = embed(&dec_in, &w);
    let all = vec![true; dec_in.len()];
    for l in 0..cfg.n_dec_layers {
        let p = format!("dec.{l}");
        let h = layer_norm(&y, &w, &format!("{p}.ln_self"));
        y = add(&y, &attention(&h, &h, &w, &format!("{p}.self_attn"), cfg.n_heads, true, &all));
        let h = layer_norm(&y, &w, &format!("{p}.ln_cross"));
        y = add(&y, &attention(&h, &memory, &w, &format!("{p}.cross_attn"), cfg.n_heads, false, &valid));
        let h = layer_norm(&y, &w, &format!("{p}.ln_ffn"));
        y = add(&y, &ffn(&h, &w, &format!("{p}.ffn")));
    }
    let h = layer_norm(&y, &w, "dec.final_norm");
    let table = w.get("embed");
    let mut total = 0.0;
    for (i, &t) in target.iter().enumerate() {
        let logits: Vec<f64> = table.iter().map(|e| e.iter().zip(&h[i]).map(|(a, b)| a * b).sum()).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[t as usize];
    }
    total / target.len() as f64
}

#[test]
fn tape_forward_matches_loop_oracle() {
    for seed in [0, 7] {
        let model = TinyTransformer::new(ModelConfig {
            rng_seed: seed,
            ..ModelConfig::tiny()
        })
        .unwrap();
        let v = *model.vocab();
        for (src, tgt) in [("hello world", "hi"), ("a", "longer target text"), ("x y z", "z")] {
            let (s, t) = (v.encode(src), v.encode(tgt));
            let tape = model.forward(&s, &t, &PeftState::empty()).unwrap().loss;
            let oracle = oracle_loss(&model, &s, &t);
            assert!((tape - oracle).abs() < 1e-10, "{src:?}: tape {tape} oracle {oracle}");
        }
    }
}

#[test]
fn masked_source_padding_matches_oracle() {
    let model = TinyTransformer::new(ModelConfig::tiny()).unwrap();
    let v = *model.vocab();
    let mut s = v.encode("abc");
    s.push(PAD);
    s.push(PAD);
    let t = v.encode("ab");
    let tape = model.forward(&s, &t, &PeftState::empty()).unwrap().loss;
    assert!((tape - oracle_loss(&model, &s, &t)).abs() < 1e-10);
}
