//! Multi-head cross-attention followed by a Linear-GeLU-Linear feed-forward
//! block, with explicit forward caches and hand-derived backward passes.

use super::matrix::Matrix;
use super::ops::{gelu, gelu_grad, softmax_raw};
use crate::error::{shape_err, Result};

/// Borrowed feed-forward weights: `w1` is `hidden x d`, `w2` is `d x hidden`.
#[derive(Clone, Copy)]
pub struct FfnWeights<'a> {
    pub w1: &'a Matrix,
    pub b1: &'a Matrix,
    pub w2: &'a Matrix,
    pub b2: &'a Matrix,
}

/// Borrowed attention weights. Projections are stored `d_model x d_in`.
#[derive(Clone, Copy)]
pub struct MhcaWeights<'a> {
    pub w_q: &'a Matrix,
    pub w_k: &'a Matrix,
    pub w_v: &'a Matrix,
    pub ffn: FfnWeights<'a>,
}

#[derive(Debug, Clone)]
pub struct FfnGrads {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Debug, Clone)]
pub struct MhcaGrads {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub ffn: FfnGrads,
}

#[derive(Debug, Clone)]
pub struct FfnCache {
    input: Matrix,
    pre: Matrix,
    hidden: Matrix,
}

pub fn ffn_forward(x: &Matrix, w: FfnWeights<'_>) -> Result<(Matrix, FfnCache)> {
    let pre = x.linear(w.w1, Some(w.b1))?;
    let mut hidden = pre.clone();
    hidden.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    let out = hidden.linear(w.w2, Some(w.b2))?;
    Ok((
        out,
        FfnCache {
            input: x.clone(),
            pre,
            hidden,
        },
    ))
}

/// Returns `dL/dx` and the weight gradients.
pub fn ffn_backward(cache: &FfnCache, w: FfnWeights<'_>, dout: &Matrix) -> Result<(Matrix, FfnGrads)> {
    let dw2 = dout.t_matmul(&cache.hidden)?;
    let db2 = Matrix::row_vector(&dout.column_sums());
    let mut dpre = dout.matmul(w.w2)?;
    for (g, &z) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
        *g *= gelu_grad(z);
    }
    let dw1 = dpre.t_matmul(&cache.input)?;
    let db1 = Matrix::row_vector(&dpre.column_sums());
    let dx = dpre.matmul(w.w1)?;
    Ok((
        dx,
        FfnGrads {
            w1: dw1,
            b1: db1,
            w2: dw2,
            b2: db2,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct MhcaCache {
    query_in: Matrix,
    keys_in: Matrix,
    values_in: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Per-head attention weights, each `query_tokens x kv_tokens`.
    pub attn: Vec<Matrix>,
    heads: usize,
    ffn: FfnCache,
}

pub struct MhcaBackward {
    pub d_query: Matrix,
    pub d_keys: Matrix,
    pub d_values: Matrix,
    pub grads: MhcaGrads,
}

fn check_shapes(query: &Matrix, keys: &Matrix, values: &Matrix, heads: usize, w: &MhcaWeights<'_>) -> Result<()> {
    let d = w.w_q.rows();
    if heads == 0 || d % heads != 0 {
        return Err(shape_err!("model dimension {d} not divisible by {heads} heads"));
    }
    if keys.rows() != values.rows() || keys.rows() == 0 {
        return Err(shape_err!("{} key tokens vs {} value tokens", keys.rows(), values.rows()));
    }
    if w.w_k.rows() != d || w.w_v.rows() != d {
        return Err(shape_err!("key/value projections must map to {d} dims"));
    }
    if query.cols() != w.w_q.cols() || keys.cols() != w.w_k.cols() || values.cols() != w.w_v.cols() {
        return Err(shape_err!(
            "token dims q={} k={} v={} vs projections {} {} {}",
            query.cols(),
            keys.cols(),
            values.cols(),
            w.w_q.cols(),
            w.w_k.cols(),
            w.w_v.cols()
        ));
    }
    if w.ffn.w1.cols() != d || w.ffn.w2.rows() != d {
        return Err(shape_err!("feed-forward block does not match model dimension {d}"));
    }
    Ok(())
}

/// Scaled dot-product cross-attention over `heads` heads, then the FFN.
pub fn mhca(query: &Matrix, keys: &Matrix, values: &Matrix, heads: usize, weights: &MhcaWeights<'_>) -> Result<Matrix> {
    mhca_forward(query, keys, values, heads, weights).map(|(out, _)| out)
}

pub fn mhca_forward(
    query: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    heads: usize,
    w: &MhcaWeights<'_>,
) -> Result<(Matrix, MhcaCache)> {
    check_shapes(query, keys, values, heads, w)?;
    let q = query.matmul_t(w.w_q)?;
    let k = keys.matmul_t(w.w_k)?;
    let v = values.matmul_t(w.w_v)?;
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (lq, n) = (q.rows(), k.rows());

    let mut attn = Vec::with_capacity(heads);
    let mut o = Matrix::zeros(lq, d);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut a = Matrix::zeros(lq, n);
        for i in 0..lq {
            let qi = &q.row(i)[cols.clone()];
            let scores: Vec<f64> = (0..n)
                .map(|j| scale * qi.iter().zip(&k.row(j)[cols.clone()]).map(|(x, y)| x * y).sum::<f64>())
                .collect();
            a.row_mut(i).copy_from_slice(&softmax_raw(&scores, 1.0));
            let orow = &mut o.row_mut(i)[cols.clone()];
            for j in 0..n {
                let aij = a[(i, j)];
                for (dst, src) in orow.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *dst += aij * src;
                }
            }
        }
        attn.push(a);
    }

    let (out, ffn) = ffn_forward(&o, w.ffn)?;
    Ok((
        out,
        MhcaCache {
            query_in: query.clone(),
            keys_in: keys.clone(),
            values_in: values.clone(),
            q,
            k,
            v,
            attn,
            heads,
            ffn,
        },
    ))
}

pub fn mhca_backward(cache: &MhcaCache, w: &MhcaWeights<'_>, dout: &Matrix) -> Result<MhcaBackward> {
    let (d_o, ffn_grads) = ffn_backward(&cache.ffn, w.ffn, dout)?;
    let (lq, d) = cache.q.shape();
    let n = cache.k.rows();
    let dh = d / cache.heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut dq = Matrix::zeros(lq, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    for (h, a) in cache.attn.iter().enumerate() {
        let off = h * dh;
        for i in 0..lq {
            let doi = &d_o.row(i)[off..off + dh];
            // dA_ij = dO_i · V_j ; dV_j += A_ij dO_i
            let da: Vec<f64> = (0..n)
                .map(|j| doi.iter().zip(&cache.v.row(j)[off..off + dh]).map(|(x, y)| x * y).sum())
                .collect();
            for j in 0..n {
                let aij = a[(i, j)];
                for (dst, g) in dv.row_mut(j)[off..off + dh].iter_mut().zip(doi) {
                    *dst += aij * g;
                }
            }
            let inner: f64 = (0..n).map(|j| a[(i, j)] * da[j]).sum();
            for j in 0..n {
                let ds = a[(i, j)] * (da[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in off..off + dh {
                    dq[(i, c)] += ds * cache.k[(j, c)];
                    dk[(j, c)] += ds * cache.q[(i, c)];
                }
            }
        }
    }

    let grads = MhcaGrads {
        w_q: dq.t_matmul(&cache.query_in)?,
        w_k: dk.t_matmul(&cache.keys_in)?,
        w_v: dv.t_matmul(&cache.values_in)?,
        ffn: ffn_grads,
    };
    Ok(MhcaBackward {
        d_query: dq.matmul(w.w_q)?,
        d_keys: dk.matmul(w.w_k)?,
        d_values: dv.matmul(w.w_v)?,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn rand_matrix(rng: &mut SplitMix64, r: usize, c: usize) -> Matrix {
        let s = 1.0 / (c as f64).sqrt();
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.uniform(-s, s)).collect()).unwrap()
    }

    struct Owned {
        w_q: Matrix,
        w_k: Matrix,
        w_v: Matrix,
        w1: Matrix,
        b1: Matrix,
        w2: Matrix,
        b2: Matrix,
    }

    impl Owned {
        fn new(rng: &mut SplitMix64, d_in: usize, d: usize) -> Self {
            Self {
                w_q: rand_matrix(rng, d, d_in),
                w_k: rand_matrix(rng, d, d_in),
                w_v: rand_matrix(rng, d, d_in),
                w1: rand_matrix(rng, d / 2, d),
                b1: rand_matrix(rng, 1, d / 2),
                w2: rand_matrix(rng, d, d / 2),
                b2: rand_matrix(rng, 1, d),
            }
        }
        fn weights(&self) -> MhcaWeights<'_> {
            MhcaWeights {
                w_q: &self.w_q,
                w_k: &self.w_k,
                w_v: &self.w_v,
                ffn: FfnWeights {
                    w1: &self.w1,
                    b1: &self.b1,
                    w2: &self.w2,
                    b2: &self.b2,
                },
            }
        }
    }

    #[test]
    fn output_shape_trace() {
        let mut rng = SplitMix64::new(1);
        let w = Owned::new(&mut rng, 512, 512);
        let q = rand_matrix(&mut rng, 4, 512);
        let kv = rand_matrix(&mut rng, 8, 512);
        let out = mhca(&q, &kv, &kv, 4, &w.weights()).unwrap();
        assert_eq!(out.shape(), (4, 512));
    }

    #[test]
    fn single_token_ignores_query() {
        let mut rng = SplitMix64::new(2);
        let w = Owned::new(&mut rng, 8, 8);
        let kv = rand_matrix(&mut rng, 1, 8);
        let q1 = rand_matrix(&mut rng, 3, 8);
        let q2 = rand_matrix(&mut rng, 3, 8);
        let o1 = mhca(&q1, &kv, &kv, 2, &w.weights()).unwrap();
        let o2 = mhca(&q2, &kv, &kv, 2, &w.weights()).unwrap();
        let v = kv.matmul_t(&w.w_v).unwrap();
        let (expected, _) = ffn_forward(&v, w.weights().ffn).unwrap();
        for r in 0..3 {
            for c in 0..8 {
                assert!((o1[(r, c)] - expected[(0, c)]).abs() < 1e-12);
                assert!((o2[(r, c)] - expected[(0, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicate_tokens_match_single() {
        let mut rng = SplitMix64::new(3);
        let w = Owned::new(&mut rng, 8, 8);
        let kv = rand_matrix(&mut rng, 1, 8);
        let kv2 = Matrix::from_vec(2, 8, [kv.data(), kv.data()].concat()).unwrap();
        let q = rand_matrix(&mut rng, 2, 8);
        let a = mhca(&q, &kv, &kv, 4, &w.weights()).unwrap();
        let b = mhca(&q, &kv2, &kv2, 4, &w.weights()).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = SplitMix64::new(4);
        let w = Owned::new(&mut rng, 6, 8);
        let q = rand_matrix(&mut rng, 3, 6);
        let kv = rand_matrix(&mut rng, 5, 6);
        let (_, cache) = mhca_forward(&q, &kv, &kv, 4, &w.weights()).unwrap();
        assert_eq!(cache.attn.len(), 4);
        for a in &cache.attn {
            for s in a.row_sums() {
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut rng = SplitMix64::new(5);
        let w = Owned::new(&mut rng, 6, 6);
        let q = rand_matrix(&mut rng, 1, 6);
        assert!(mhca(&q, &q, &q, 4, &w.weights()).is_err());
        let kv = rand_matrix(&mut rng, 2, 6);
        let vv = rand_matrix(&mut rng, 3, 6);
        assert!(mhca(&q, &kv, &vv, 2, &w.weights()).is_err());
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = SplitMix64::new(6);
        let w = Owned::new(&mut rng, 6, 8);
        let q = rand_matrix(&mut rng, 3, 6);
        let kv = rand_matrix(&mut rng, 4, 6);
        let probe = rand_matrix(&mut rng, 3, 8);
        let loss = |q: &Matrix, kv: &Matrix, w: &Owned| -> f64 {
            let out = mhca(q, kv, kv, 2, &w.weights()).unwrap();
            out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = mhca_forward(&q, &kv, &kv, 2, &w.weights()).unwrap();
        let back = mhca_backward(&cache, &w.weights(), &probe).unwrap();
        let h = 1e-6;
        for idx in 0..q.data().len() {
            let mut qp = q.clone();
            qp.data_mut()[idx] += h;
            let mut qm = q.clone();
            qm.data_mut()[idx] -= h;
            let fd = (loss(&qp, &kv, &w) - loss(&qm, &kv, &w)) / (2.0 * h);
            assert!((fd - back.d_query.data()[idx]).abs() < 1e-7);
        }
        for idx in 0..kv.data().len() {
            let mut kp = kv.clone();
            kp.data_mut()[idx] += h;
            let mut km = kv.clone();
            km.data_mut()[idx] -= h;
            let fd = (loss(&q, &kp, &w) - loss(&q, &km, &w)) / (2.0 * h);
            let an = back.d_keys.data()[idx] + back.d_values.data()[idx];
            assert!((fd - an).abs() < 1e-7);
        }
        for idx in 0..w.w_k.data().len() {
            let mut wp = clone_owned(&w);
            wp.w_k.data_mut()[idx] += h;
            let mut wm = clone_owned(&w);
            wm.w_k.data_mut()[idx] -= h;
            let fd = (loss(&q, &kv, &wp) - loss(&q, &kv, &wm)) / (2.0 * h);
            assert!((fd - back.grads.w_k.data()[idx]).abs() < 1e-7);
        }
        for idx in 0..w.w1.data().len() {
            let mut wp = clone_owned(&w);
            wp.w1.data_mut()[idx] += h;
            let mut wm = clone_owned(&w);
            wm.w1.data_mut()[idx] -= h;
            let fd = (loss(&q, &kv, &wp) - loss(&q, &kv, &wm)) / (2.0 * h);
            assert!((fd - back.grads.ffn.w1.data()[idx]).abs() < 1e-7);
        }
    }

    fn clone_owned(w: &Owned) -> Owned {
        Owned {
            w_q: w.w_q.clone(),
            w_k: w.w_k.clone(),
            w_v: w.w_v.clone(),
            w1: w.w1.clone(),
            b1: w.b1.clone(),
            w2: w.w2.clone(),
            b2: w.b2.clone(),
        }
    }
}
