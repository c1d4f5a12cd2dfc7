//! Independent scalar re-implementations checked against the graph-based
//! code paths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retlab::encoder::{Encoder, EncoderConfig, TokenSequence};
use retlab::numeric::{Graph, Tensor};

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    t.to_rows()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let r = 1.0 / (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mu) * r * g[i] + b[i]).collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Plain-loop forward pass over the parameters in checkpoint order.
fn oracle_forward(enc: &Encoder, ids: &[u32], upto: usize) -> Mat {
    let c = enc.config();
    let p: Vec<Mat> = enc.params().iter().map(|t| {
        if t.shape().len() == 1 { vec![t.to_vec()] } else { to_mat(t) }
    }).collect();
    let (d, heads) = (c.d_model, c.n_heads);
    let dh = d / heads;
    let mut h: Mat = ids
        .iter()
        .enumerate()
        .map(|(i, &t)| (0..d).map(|j| p[0][t as usize][j] + p[1][i][j]).collect())
        .collect();
    let s = ids.len();
    for l in 0..upto {
        let w = &p[2 + 12 * l..2 + 12 * (l + 1)];
        let x: Mat = h.iter().map(|r| layer_norm(r, &w[0][0], &w[1][0])).collect();
        let (q, k, v) = (mm(&x, &w[2]), mm(&x, &w[3]), mm(&x, &w[4]));
        let mut merged = vec![vec![0.0; d]; s];
        for hd in 0..heads {
            for i in 0..s {
                let scores: Vec<f64> = (0..s)
                    .map(|j| (0..dh).map(|e| q[i][hd * dh + e] * k[j][hd * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = ex.iter().sum();
                for e in 0..dh {
                    merged[i][hd * dh + e] = (0..s).map(|j| ex[j] / z * v[j][hd * dh + e]).sum();
                }
            }
        }
        let o = mm(&merged, &w[5]);
        for i in 0..s {
            for j in 0..d {
                h[i][j] += o[i][j];
            }
        }
        let x: Mat = h.iter().map(|r| layer_norm(r, &w[6][0], &w[7][0])).collect();
        let f1 = mm(&x, &w[8]);
        let f1: Mat = f1.iter().map(|r| r.iter().enumerate().map(|(j, v)| gelu(v + w[9][0][j])).collect()).collect();
        let f2 = mm(&f1, &w[10]);
        for i in 0..s {
            for j in 0..d {
                h[i][j] += f2[i][j] + w[11][0][j];
            }
        }
    }
    h
}

fn max_diff(a: &Mat, b: &Tensor) -> f64 {
    a.iter()
        .flatten()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn single_head_two_dim_forward_matches_scalar_oracle() {
    let config = EncoderConfig { vocab_size: 6, d_model: 2, n_heads: 1, n_layers: 1, max_seq: 4, k: 1 };
    for seed in 0..5 {
        let enc = Encoder::init(config, seed).unwrap();
        let tokens = TokenSequence::new(vec![4, 5, 2, 1]).unwrap();
        let got = enc.forward(&tokens, 1).unwrap();
        assert!(max_diff(&oracle_forward(&enc, tokens.ids(), 1), &got) < 1e-12);
    }
}

#[test]
fn multi_head_stack_matches_scalar_oracle() {
    let config = EncoderConfig { vocab_size: 20, d_model: 8, n_heads: 2, n_layers: 3, max_seq: 9, k: 3 };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..3 {
        let enc = Encoder::init(config, seed).unwrap();
        let mut ids: Vec<u32> = (0..6).map(|_| rng.random_range(2..20)).collect();
        ids.push(1);
        let tokens = TokenSequence::new(ids).unwrap();
        for upto in 1..=3 {
            let got = enc.forward(&tokens, upto).unwrap();
            assert!(max_diff(&oracle_forward(&enc, tokens.ids(), upto), &got) < 1e-11);
        }
    }
}

#[test]
fn matmul_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (n, k, m) in [(1, 1, 1), (3, 5, 2), (7, 4, 9)] {
        let a: Mat = (0..n).map(|_| (0..k).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let b: Mat = (0..k).map(|_| (0..m).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let ra: Vec<&[f64]> = a.iter().map(Vec::as_slice).collect();
        let rb: Vec<&[f64]> = b.iter().map(Vec::as_slice).collect();
        let mut g = Graph::new();
        let va = g.constant(Tensor::from_rows(&ra).unwrap());
        let vb = g.constant(Tensor::from_rows(&rb).unwrap());
        let c = g.matmul(va, vb).unwrap();
        assert!(max_diff(&mm(&a, &b), g.value(c)) < 1e-12);
    }
}
