//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

pub mod afs_oracle;
pub mod fixtures;
pub mod grad_suite;
pub mod search;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vidcap::encoder::WindowAttention;
use vidcap::tensor::{ParamStore, Tensor};

/// Token labels `(window id in the rolled grid, per-axis "wrapped" flags)`;
/// two tokens may attend iff their labels match.
pub fn oracle_labels(
    dims: [usize; 3],
    window: [usize; 3],
    shift: [usize; 3],
) -> Vec<(usize, [bool; 3])> {
    let mut labels = Vec::new();
    for t in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let o = [t, h, w];
                let p: [usize; 3] = std::array::from_fn(|a| (o[a] + dims[a] - shift[a]) % dims[a]);
                let wid = ((p[0] / window[0]) * (dims[1] / window[1]) + p[1] / window[1])
                    * (dims[2] / window[2])
                    + p[2] / window[2];
                let wrapped: [bool; 3] = std::array::from_fn(|a| o[a] < shift[a]);
                labels.push((wid, wrapped));
            }
        }
    }
    labels
}

pub fn oracle_allowed(dims: [usize; 3], window: [usize; 3], shift: [usize; 3]) -> Vec<bool> {
    let labels = oracle_labels(dims, window, shift);
    let n = labels.len();
    let mut out = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = labels[i] == labels[j];
        }
    }
    out
}

fn affine(x: &[f64], w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<f64> {
    let (fin, fout) = (w.shape()[0], w.shape()[1]);
    (0..fout)
        .map(|j| {
            (0..fin).map(|i| x[i] * w.data()[i * fout + j]).sum::<f64>()
                + b.map_or(0.0, |b| b.data()[j])
        })
        .collect()
}

/// Global attention over every grid token with a pairwise mask, evaluated with
/// plain loops. Relative offsets are measured in the rolled grid.
pub fn brute_window_attention(
    store: &ParamStore<f64>,
    attn: &WindowAttention,
    x: &Tensor<f64>,
    dims: [usize; 3],
    shift: [usize; 3],
) -> Tensor<f64> {
    let n = x.shape()[0];
    let c = attn.width;
    let dh = c / attn.heads;
    let allowed = oracle_allowed(dims, attn.window, shift);
    let qkv: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            affine(
                x.row(i),
                store.get(attn.qkv.weight),
                attn.qkv.bias.map(|b| store.get(b)),
            )
        })
        .collect();
    let rolled = |i: usize| {
        let o = [
            i / (dims[1] * dims[2]),
            (i / dims[2]) % dims[1],
            i % dims[2],
        ];
        std::array::from_fn::<usize, 3, _>(|a| (o[a] + dims[a] - shift[a]) % dims[a])
    };
    let w = attn.window;
    let span: [usize; 3] = std::array::from_fn(|a| 2 * w[a] - 1);
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        let mut row = vec![0.0; c];
        for h in 0..attn.heads {
            let q = &qkv[i][h * dh..(h + 1) * dh];
            let mut scores = Vec::new();
            for j in 0..n {
                if !allowed[i * n + j] {
                    continue;
                }
                let k = &qkv[j][c + h * dh..c + (h + 1) * dh];
                let mut s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt();
                if let Some(table) = attn.rel_table {
                    let (pi, pj) = (rolled(i), rolled(j));
                    let off: [usize; 3] =
                        std::array::from_fn(|a| (pi[a] % w[a]) + w[a] - 1 - (pj[a] % w[a]));
                    let idx = (off[0] * span[1] + off[1]) * span[2] + off[2];
                    s += store.get(table).data()[idx * attn.heads + h];
                }
                scores.push((j, s));
            }
            let m = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s.1 - m).exp()).sum();
            for (j, s) in &scores {
                let p = (s - m).exp() / z;
                for d in 0..dh {
                    row[h * dh + d] += p * qkv[*j][2 * c + h * dh + d];
                }
            }
        }
        out.extend(affine(
            &row,
            store.get(attn.proj.weight),
            attn.proj.bias.map(|b| store.get(b)),
        ));
    }
    Tensor::new(vec![n, c], out)
}

fn as_refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn ngrams(tokens: &[&str], n: usize) -> HashMap<Vec<String>, f64> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(|s| s.to_string()).collect())
                .or_insert(0.0) += 1.0;
        }
    }
    m
}

/// CIDEr-D from dense vectors over an explicit n-gram index.
pub fn brute_cider_d(
    preds: &[Vec<String>],
    refs: &[Vec<Vec<String>>],
    sigma: f64,
) -> (f64, Vec<f64>) {
    let m = preds.len() as f64;
    let mut per_item = vec![0.0; preds.len()];
    for n in 1..=4 {
        // global index of every n-gram seen anywhere
        let mut index: Vec<Vec<String>> = Vec::new();
        let mut all = Vec::new();
        for p in preds {
            all.push(ngrams(&as_refs(p), n));
        }
        for rs in refs {
            for r in rs {
                all.push(ngrams(&as_refs(r), n));
            }
        }
        for g in &all {
            for k in g.keys() {
                if !index.contains(k) {
                    index.push(k.clone());
                }
            }
        }
        let idf: Vec<f64> = index
            .iter()
            .map(|g| {
                let df = refs
                    .iter()
                    .filter(|rs| rs.iter().any(|r| ngrams(&as_refs(r), n).contains_key(g)))
                    .count();
                m.ln() - (df.max(1) as f64).ln()
            })
            .collect();
        let dense = |tokens: &Vec<String>| -> Vec<f64> {
            let c = ngrams(&as_refs(tokens), n);
            index
                .iter()
                .zip(&idf)
                .map(|(g, w)| c.get(g).copied().unwrap_or(0.0) * w)
                .collect()
        };
        for (i, p) in preds.iter().enumerate() {
            let vp = dense(p);
            let np = vp.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut acc = 0.0;
            for r in &refs[i] {
                let vr = dense(r);
                let nr = vr.iter().map(|x| x * x).sum::<f64>().sqrt();
                let dot: f64 = vp.iter().zip(&vr).map(|(a, b)| a.min(*b) * b).sum();
                let cos = if np == 0.0 || nr == 0.0 {
                    0.0
                } else {
                    dot / (np * nr)
                };
                let delta = p.len() as f64 - r.len() as f64;
                acc += cos * (-(delta * delta) / (2.0 * sigma * sigma)).exp();
            }
            per_item[i] += acc / refs[i].len() as f64 / 4.0 * 10.0;
        }
    }
    (per_item.iter().sum::<f64>() / m, per_item)
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

pub const POOL: &[&str] = &["a", "b", "c", "d", "e", "f", "g"];

pub fn random_caption(rng: &mut ChaCha8Rng, max: usize) -> Vec<String> {
    let n = rng.random_range(0..=max);
    (0..n)
        .map(|_| POOL[rng.random_range(0..POOL.len())].to_string())
        .collect()
}

pub fn random_corpus(seed: u64) -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(1..=5);
    let p = (0..m).map(|_| random_caption(&mut rng, 8)).collect();
    let r = (0..m)
        .map(|_| {
            let k = rng.random_range(1..=3);
            (0..k).map(|_| random_caption(&mut rng, 8)).collect()
        })
        .collect();
    (p, r)
}
