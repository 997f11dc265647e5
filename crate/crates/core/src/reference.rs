//! Naive loop implementations used as ground truth in tests.
//!
//! Nothing here calls into the tensor kernels, the mask builders or the
//! rotary tables; every quantity is recomputed scalar by scalar.

use crate::sda::{AttnWeights, GateWeights};
use crate::tensor::Tensor;

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).expect("oracle shape")
}

fn coords(i: usize, w: usize) -> (i64, i64) {
    ((i / w) as i64, (i % w) as i64)
}

fn manhattan(i: usize, j: usize, w: usize) -> f64 {
    let (a, b) = (coords(i, w), coords(j, w));
    ((a.0 - b.0).abs() + (a.1 - b.1).abs()) as f64
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `[B, L, N]` gates, read as `gates[b][i][n]`.
fn gate(gates: &Tensor<f64>, b: usize, i: usize, n: usize) -> f64 {
    let s = gates.shape();
    gates.data()[(b * s[1] + i) * s[2] + n]
}

pub fn oracle_fused_mask(gates: &Tensor<f64>, h: usize, w: usize, alpha: f64) -> Tensor<f64> {
    let (nb, l, nh) = (gates.shape()[0], gates.shape()[1], gates.shape()[2]);
    assert_eq!(l, h * w);
    let mut out = Vec::with_capacity(nb * nh * l * l);
    for b in 0..nb {
        for n in 0..nh {
            for i in 0..l {
                for j in 0..l {
                    let strength = 0.5 * (gate(gates, b, i, n) + gate(gates, b, j, n));
                    let combined = strength * manhattan(i, j, w) * alpha;
                    out.push(-combined.abs());
                }
            }
        }
    }
    tensor(vec![nb, nh, l, l], out)
}

pub fn oracle_fixed_mask(h: usize, w: usize, lambdas: &[f64]) -> Tensor<f64> {
    let l = h * w;
    let mut out = Vec::new();
    for &lam in lambdas {
        for i in 0..l {
            for j in 0..l {
                out.push(-(lam * manhattan(i, j, w)));
            }
        }
    }
    tensor(vec![1, lambdas.len(), l, l], out)
}

/// Flattened-sequence masks; `bidirectional` averages the forward and
/// reversed cumulative sums.
pub fn oracle_mask_1d(gates: &Tensor<f64>, bidirectional: bool) -> Tensor<f64> {
    let (nb, l, nh) = (gates.shape()[0], gates.shape()[1], gates.shape()[2]);
    let mut out = Vec::with_capacity(nb * nh * l * l);
    for b in 0..nb {
        for n in 0..nh {
            for i in 0..l {
                for j in 0..l {
                    let (lo, hi) = (i.min(j), i.max(j));
                    let mut fwd = 0.0;
                    for k in lo..hi {
                        fwd += gate(gates, b, k, n);
                    }
                    if bidirectional {
                        let mut rev = 0.0;
                        for k in lo + 1..=hi {
                            rev += gate(gates, b, k, n);
                        }
                        out.push(0.5 * (fwd + rev));
                    } else {
                        out.push(fwd);
                    }
                }
            }
        }
    }
    tensor(vec![nb, nh, l, l], out)
}

/// Row masks `[B, N, H, W, W]` from `gates_w` and column masks
/// `[B, N, W, H, H]` from `gates_h`.
pub fn oracle_axis_masks(gates_h: &Tensor<f64>, gates_w: &Tensor<f64>, h: usize, w: usize) -> (Tensor<f64>, Tensor<f64>) {
    let (nb, nh) = (gates_w.shape()[0], gates_w.shape()[2]);
    let mut width = Vec::new();
    for b in 0..nb {
        for n in 0..nh {
            for row in 0..h {
                for i in 0..w {
                    for j in 0..w {
                        let mut acc = 0.0;
                        for k in i.min(j)..i.max(j) {
                            acc += gate(gates_w, b, row * w + k, n).abs();
                        }
                        width.push(-acc);
                    }
                }
            }
        }
    }
    let mut height = Vec::new();
    for b in 0..nb {
        for n in 0..nh {
            for col in 0..w {
                for i in 0..h {
                    for j in 0..h {
                        let mut acc = 0.0;
                        for k in i.min(j)..i.max(j) {
                            acc += gate(gates_h, b, k * w + col, n).abs();
                        }
                        height.push(-acc);
                    }
                }
            }
        }
    }
    (tensor(vec![nb, nh, w, h, h], height), tensor(vec![nb, nh, h, w, w], width))
}

/// `log σ(x W_g)` with `x: [B, H, W, D]`, giving `[B, L, N]`.
pub fn oracle_gates(x: &Tensor<f64>, w_g: &Tensor<f64>) -> Tensor<f64> {
    let f = rows_matmul(x, w_g);
    let shape = vec![x.shape()[0], x.shape()[1] * x.shape()[2], w_g.shape()[1]];
    tensor(shape, f.into_iter().map(log_sigmoid).collect())
}

/// Softmax attention `[B, N, L, d_k]` with optional mask `[B|1, N, L, L]`.
pub fn oracle_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, mask: Option<&Tensor<f64>>) -> Tensor<f64> {
    let s = q.shape();
    let (nb, nh, l, dk) = (s[0], s[1], s[2], s[3]);
    let at = |t: &Tensor<f64>, b: usize, n: usize, i: usize, c: usize| t.data()[((b * nh + n) * l + i) * dk + c];
    let mut out = vec![0.0; nb * nh * l * dk];
    for b in 0..nb {
        for n in 0..nh {
            for i in 0..l {
                let mut scores = vec![0.0; l];
                for (j, sc) in scores.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for c in 0..dk {
                        dot += at(q, b, n, i, c) * at(k, b, n, j, c);
                    }
                    *sc = dot / (dk as f64).sqrt();
                    if let Some(m) = mask {
                        let mb = if m.shape()[0] == 1 { 0 } else { b };
                        *sc += m.data()[((mb * nh + n) * l + i) * l + j];
                    }
                }
                let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                let total: f64 = weights.iter().sum();
                for c in 0..dk {
                    let mut acc = 0.0;
                    for j in 0..l {
                        acc += weights[j] / total * at(v, b, n, j, c);
                    }
                    out[((b * nh + n) * l + i) * dk + c] = acc;
                }
            }
        }
    }
    tensor(vec![nb, nh, l, dk], out)
}

/// Axial rotation of `[B, N, L, d_k]`; the row (column) coordinate is
/// dropped when `use_h` (`use_w`) is false.
pub fn oracle_rope(x: &Tensor<f64>, h: usize, w: usize, use_h: bool, use_w: bool) -> Tensor<f64> {
    let s = x.shape();
    let (rows, l, dk) = (s[0] * s[1], s[2], s[3]);
    assert_eq!(l, h * w);
    let half = dk / 2;
    let mut out = x.data().to_vec();
    for r in 0..rows {
        for p in 0..l {
            let (ph, pw) = coords(p, w);
            for c in 0..dk / 2 {
                let (pos, i) = if 2 * c < half {
                    (if use_h { ph } else { 0 }, c)
                } else {
                    (if use_w { pw } else { 0 }, c - half / 2)
                };
                let theta = pos as f64 / 10_000f64.powf(2.0 * i as f64 / half as f64);
                let base = (r * l + p) * dk + 2 * c;
                let (a, b) = (x.data()[base], x.data()[base + 1]);
                out[base] = a * theta.cos() - b * theta.sin();
                out[base + 1] = a * theta.sin() + b * theta.cos();
            }
        }
    }
    tensor(s.to_vec(), out)
}

/// `x: [.., K] · w: [K, M]`, flattened over leading axes.
fn rows_matmul(x: &Tensor<f64>, w: &Tensor<f64>) -> Vec<f64> {
    let (kk, m) = (w.shape()[0], w.shape()[1]);
    let rows = x.numel() / kk;
    let mut out = vec![0.0; rows * m];
    for r in 0..rows {
        for j in 0..m {
            let mut acc = 0.0;
            for c in 0..kk {
                acc += x.data()[r * kk + c] * w.data()[c * m + j];
            }
            out[r * m + j] = acc;
        }
    }
    out
}

/// `[B, L, N·d_k]` rows to `[B, N, L, d_k]`.
fn heads(flat: &[f64], nb: usize, l: usize, nh: usize, dk: usize) -> Tensor<f64> {
    let mut out = vec![0.0; flat.len()];
    for b in 0..nb {
        for i in 0..l {
            for n in 0..nh {
                for c in 0..dk {
                    out[((b * nh + n) * l + i) * dk + c] = flat[(b * l + i) * nh * dk + n * dk + c];
                }
            }
        }
    }
    tensor(vec![nb, nh, l, dk], out)
}

fn lpe(v: &[f64], kernels: &Tensor<f64>, nb: usize, h: usize, w: usize, d: usize) -> Vec<f64> {
    let k = kernels.shape()[0] as i64;
    let pad = k / 2;
    let mut out = vec![0.0; v.len()];
    for b in 0..nb {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                for c in 0..d {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let (sy, sx) = (y + dy - pad, x + dx - pad);
                            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                                continue;
                            }
                            let src = ((b * h + sy as usize) * w + sx as usize) * d + c;
                            acc += kernels.data()[((dy * k + dx) as usize) * d + c] * v[src];
                        }
                    }
                    out[((b * h + y as usize) * w + x as usize) * d + c] = acc;
                }
            }
        }
    }
    out
}

/// `U ⊙ (attn + LPE(V))` with `attn: [B, N, L, d_k]`.
fn gate_output(x: &Tensor<f64>, w: &AttnWeights<Tensor<f64>>, attn: &Tensor<f64>, v_flat: &[f64]) -> Tensor<f64> {
    let (nb, h, wd, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (nh, l) = (attn.shape()[1], h * wd);
    let dk = d / nh;
    let local = lpe(v_flat, &w.lpe, nb, h, wd, d);
    let hidden: Vec<f64> = rows_matmul(x, &w.w_u1).into_iter().map(sigmoid).collect();
    let hidden = tensor(vec![nb * l, w.w_u1.shape()[1]], hidden);
    let u = rows_matmul(&hidden, &w.w_u2);
    let mut out = vec![0.0; nb * l * d];
    for b in 0..nb {
        for i in 0..l {
            for c in 0..d {
                let (n, e) = (c / dk, c % dk);
                let a = attn.data()[((b * nh + n) * l + i) * dk + e];
                let idx = (b * l + i) * d + c;
                out[idx] = u[idx] * (a + local[idx]);
            }
        }
    }
    tensor(x.shape().to_vec(), out)
}

/// Full-path layer output for `x: [B, H, W, D]` with `heads` heads.
pub fn oracle_sda_full(x: &Tensor<f64>, w: &AttnWeights<Tensor<f64>>, heads_n: usize, mask: Option<&Tensor<f64>>, rope: bool) -> Tensor<f64> {
    let (nb, h, wd, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (l, dk) = (h * wd, d / heads_n);
    let mut q = heads(&rows_matmul(x, &w.w_q), nb, l, heads_n, dk);
    let mut k = heads(&rows_matmul(x, &w.w_k), nb, l, heads_n, dk);
    let v_flat = rows_matmul(x, &w.w_v);
    let v = heads(&v_flat, nb, l, heads_n, dk);
    if rope {
        q = oracle_rope(&q, h, wd, true, true);
        k = oracle_rope(&k, h, wd, true, true);
    }
    let attn = oracle_attention(&q, &k, &v, mask);
    gate_output(x, w, &attn, &v_flat)
}

/// Decomposed layer: per-row attention over width, then per-column
/// attention over height on the intermediate.
pub fn oracle_sda_decomposed(x: &Tensor<f64>, w: &AttnWeights<Tensor<f64>>, heads_n: usize, rope: bool) -> Tensor<f64> {
    let GateWeights::Decomposed { w_gh, w_gw } = &w.gate else {
        panic!("oracle_sda_decomposed needs decomposed gate weights");
    };
    let (nb, h, wd, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (l, dk) = (h * wd, d / heads_n);
    let q = heads(&rows_matmul(x, &w.w_q), nb, l, heads_n, dk);
    let k = heads(&rows_matmul(x, &w.w_k), nb, l, heads_n, dk);
    let v_flat = rows_matmul(x, &w.w_v);
    let v = heads(&v_flat, nb, l, heads_n, dk);
    let (qw, kw, qh, kh) = if rope {
        (
            oracle_rope(&q, h, wd, false, true),
            oracle_rope(&k, h, wd, false, true),
            oracle_rope(&q, h, wd, true, false),
            oracle_rope(&k, h, wd, true, false),
        )
    } else {
        (q.clone(), k.clone(), q, k)
    };
    let (mask_h, mask_w) = oracle_axis_masks(&oracle_gates(x, w_gh), &oracle_gates(x, w_gw), h, wd);
    let at = |t: &Tensor<f64>, b: usize, n: usize, i: usize, c: usize| t.data()[((b * heads_n + n) * l + i) * dk + c];
    let scale = (dk as f64).sqrt();

    // one softmax-weighted line: positions `line[..]`, mask row lookup `m(i, j)`
    let attend = |qq: &Tensor<f64>, kk: &Tensor<f64>, vals: &[f64], b: usize, n: usize, line: &[usize], m: &dyn Fn(usize, usize) -> f64, out: &mut [f64]| {
        let len = line.len();
        for i in 0..len {
            let mut scores = vec![0.0; len];
            for j in 0..len {
                let mut dot = 0.0;
                for c in 0..dk {
                    dot += at(qq, b, n, line[i], c) * at(kk, b, n, line[j], c);
                }
                scores[j] = dot / scale + m(i, j);
            }
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let total: f64 = e.iter().sum();
            for c in 0..dk {
                let mut acc = 0.0;
                for j in 0..len {
                    acc += e[j] / total * vals[((b * heads_n + n) * l + line[j]) * dk + c];
                }
                out[((b * heads_n + n) * l + line[i]) * dk + c] = acc;
            }
        }
    };

    let mut mid = vec![0.0; nb * heads_n * l * dk];
    for b in 0..nb {
        for n in 0..heads_n {
            for row in 0..h {
                let line: Vec<usize> = (0..wd).map(|c| row * wd + c).collect();
                let m = |i: usize, j: usize| mask_w.data()[(((b * heads_n + n) * h + row) * wd + i) * wd + j];
                attend(&qw, &kw, v.data(), b, n, &line, &m, &mut mid);
            }
        }
    }
    let mut out = vec![0.0; nb * heads_n * l * dk];
    for b in 0..nb {
        for n in 0..heads_n {
            for col in 0..wd {
                let line: Vec<usize> = (0..h).map(|r| r * wd + col).collect();
                let m = |i: usize, j: usize| mask_h.data()[(((b * heads_n + n) * wd + col) * h + i) * h + j];
                attend(&qh, &kh, &mid, b, n, &line, &m, &mut out);
            }
        }
    }
    let attn = tensor(vec![nb, heads_n, l, dk], out);
    gate_output(x, w, &attn, &v_flat)
}
