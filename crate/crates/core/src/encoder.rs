//! Pre-norm transformer blocks with hand-written backward passes.
//!
//! A block maps `n` input rows to its first `nq` output rows. Passing
//! `nq < n` computes queries, the residual path and the feed-forward only for
//! the leading rows while keys and values still span the whole sequence; the
//! text encoder uses `nq = 1` in its last block because only the class token
//! is read out.

use crate::error::{Error, Result};
use crate::params::{ArrayId, BlockIds, Gradients, ModelParams};
use crate::tensor::{
    add_into, all_finite, gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, linear, linear_backward,
    softmax_row, LnCache, Real, View, ViewMut,
};

#[derive(Debug, Clone, Copy)]
pub struct Dims {
    pub d: usize,
    pub heads: usize,
    pub ff: usize,
}

impl Dims {
    fn dh(&self) -> usize {
        self.d / self.heads
    }
}

#[derive(Debug, Clone)]
pub struct BlockCache<F> {
    n: usize,
    nq: usize,
    ln1: LnCache<F>,
    a: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    probs: Vec<F>,
    ctx: Vec<F>,
    ln2: LnCache<F>,
    b: Vec<F>,
    pre: Vec<F>,
    act: Vec<F>,
}

pub fn block_forward<F: Real>(
    p: &ModelParams<F>,
    ids: &BlockIds,
    dims: Dims,
    x: &[F],
    n: usize,
    nq: usize,
) -> (Vec<F>, BlockCache<F>) {
    let Dims { d, heads, ff } = dims;
    let dh = dims.dh();
    debug_assert!(nq >= 1 && nq <= n);
    debug_assert_eq!(x.len(), n * d);

    let (a, ln1) = layer_norm(x, n, d, p.get(ids.ln1_g), p.get(ids.ln1_b));
    let q = linear(&a[..nq * d], nq, d, p.get(ids.w_q), Some(p.get(ids.b_q)), d);
    let k = linear(&a, n, d, p.get(ids.w_k), Some(p.get(ids.b_k)), d);
    let v = linear(&a, n, d, p.get(ids.w_v), Some(p.get(ids.b_v)), d);

    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let mut probs = vec![F::ZERO; heads * nq * n];
    let mut ctx = vec![F::ZERO; nq * d];
    for h in 0..heads {
        let s = &mut probs[h * nq * n..(h + 1) * nq * n];
        gemm(
            scale,
            View::cols(&q, nq, d, h * dh, dh),
            View::cols(&k, n, d, h * dh, dh).t(),
            F::ZERO,
            ViewMut::rm(s, nq, n),
        );
        for row in s.chunks_exact_mut(n) {
            softmax_row(row);
        }
        gemm(
            F::ONE,
            View::rm(s, nq, n),
            View::cols(&v, n, d, h * dh, dh),
            F::ZERO,
            ViewMut::cols(&mut ctx, nq, d, h * dh, dh),
        );
    }

    let attn = linear(&ctx, nq, d, p.get(ids.w_o), Some(p.get(ids.b_o)), d);
    let mut x1 = x[..nq * d].to_vec();
    add_into(&mut x1, &attn);

    let (b, ln2) = layer_norm(&x1, nq, d, p.get(ids.ln2_g), p.get(ids.ln2_b));
    let pre = linear(&b, nq, d, p.get(ids.w_ff1), Some(p.get(ids.b_ff1)), ff);
    let act: Vec<F> = pre.iter().map(|&v| gelu(v)).collect();
    let f = linear(&act, nq, ff, p.get(ids.w_ff2), Some(p.get(ids.b_ff2)), d);
    let mut y = x1;
    add_into(&mut y, &f);

    (y, BlockCache { n, nq, ln1, a, q, k, v, probs, ctx, ln2, b, pre, act })
}

fn linear_bwd<F: Real>(
    p: &ModelParams<F>,
    grads: &mut Gradients<F>,
    w: ArrayId,
    bias: ArrayId,
    x: &[F],
    rows: usize,
    k: usize,
    n: usize,
    dy: &[F],
) -> Vec<F> {
    let (dw, db) = grads.pair_mut(w, bias);
    linear_backward(x, rows, k, p.get(w), n, dy, dw, db, true).expect("dx requested")
}

/// Returns the gradient with respect to the block's `n` input rows.
pub fn block_backward<F: Real>(
    p: &ModelParams<F>,
    ids: &BlockIds,
    dims: Dims,
    c: &BlockCache<F>,
    dy: &[F],
    grads: &mut Gradients<F>,
) -> Vec<F> {
    let Dims { d, heads, ff } = dims;
    let dh = dims.dh();
    let (n, nq) = (c.n, c.nq);

    // feed-forward branch
    let dact = linear_bwd(p, grads, ids.w_ff2, ids.b_ff2, &c.act, nq, ff, d, dy);
    let dpre: Vec<F> = dact.iter().zip(&c.pre).map(|(&g, &x)| g * gelu_grad(x)).collect();
    let db = linear_bwd(p, grads, ids.w_ff1, ids.b_ff1, &c.b, nq, d, ff, &dpre);
    let (dg2, db2) = grads.pair_mut(ids.ln2_g, ids.ln2_b);
    let mut dx1 = layer_norm_backward(&c.ln2, d, p.get(ids.ln2_g), &db, dg2, db2);
    add_into(&mut dx1, dy);

    // attention branch
    let dctx = linear_bwd(p, grads, ids.w_o, ids.b_o, &c.ctx, nq, d, d, &dx1);
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let mut dq = vec![F::ZERO; nq * d];
    let mut dk = vec![F::ZERO; n * d];
    let mut dv = vec![F::ZERO; n * d];
    let mut dp = vec![F::ZERO; nq * n];
    for h in 0..heads {
        let pr = &c.probs[h * nq * n..(h + 1) * nq * n];
        let dctx_h = View::cols(&dctx, nq, d, h * dh, dh);
        gemm(F::ONE, dctx_h, View::cols(&c.v, n, d, h * dh, dh).t(), F::ZERO, ViewMut::rm(&mut dp, nq, n));
        gemm(F::ONE, View::rm(pr, nq, n).t(), dctx_h, F::ONE, ViewMut::cols(&mut dv, n, d, h * dh, dh));
        for (prow, grow) in pr.chunks_exact(n).zip(dp.chunks_exact_mut(n)) {
            let s: f64 = prow.iter().zip(grow.iter()).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
            let s = F::from_f64(s);
            for (g, &pv) in grow.iter_mut().zip(prow) {
                *g = pv * (*g - s) * scale;
            }
        }
        gemm(
            F::ONE,
            View::rm(&dp, nq, n),
            View::cols(&c.k, n, d, h * dh, dh),
            F::ZERO,
            ViewMut::cols(&mut dq, nq, d, h * dh, dh),
        );
        gemm(
            F::ONE,
            View::rm(&dp, nq, n).t(),
            View::cols(&c.q, nq, d, h * dh, dh),
            F::ONE,
            ViewMut::cols(&mut dk, n, d, h * dh, dh),
        );
    }

    let mut da = linear_bwd(p, grads, ids.w_k, ids.b_k, &c.a, n, d, d, &dk);
    add_into(&mut da, &linear_bwd(p, grads, ids.w_v, ids.b_v, &c.a, n, d, d, &dv));
    let daq = linear_bwd(p, grads, ids.w_q, ids.b_q, &c.a[..nq * d], nq, d, d, &dq);
    add_into(&mut da[..nq * d], &daq);

    let (dg1, db1) = grads.pair_mut(ids.ln1_g, ids.ln1_b);
    let mut dx = layer_norm_backward(&c.ln1, d, p.get(ids.ln1_g), &da, dg1, db1);
    add_into(&mut dx[..nq * d], &dx1);
    dx
}

#[derive(Debug, Clone)]
pub struct StackCache<F> {
    blocks: Vec<BlockCache<F>>,
    lnf: LnCache<F>,
    out_rows: usize,
}

/// Runs a block stack plus the final layer norm. The last block keeps
/// `out_rows` rows.
#[allow(clippy::too_many_arguments)]
pub fn stack_forward<F: Real>(
    p: &ModelParams<F>,
    blocks: &[BlockIds],
    lnf: (ArrayId, ArrayId),
    dims: Dims,
    x: Vec<F>,
    n: usize,
    out_rows: usize,
    label: &str,
) -> Result<(Vec<F>, StackCache<F>)> {
    let mut h = x;
    let mut rows = n;
    let mut caches = Vec::with_capacity(blocks.len());
    for (i, ids) in blocks.iter().enumerate() {
        let nq = if i + 1 == blocks.len() { out_rows } else { rows };
        let (y, c) = block_forward(p, ids, dims, &h, rows, nq);
        if !all_finite(&y) {
            return Err(Error::NonFinite(format!("{label}.layers.{i}")));
        }
        caches.push(c);
        h = y;
        rows = nq;
    }
    let (out, lnf_cache) = layer_norm(&h, rows, dims.d, p.get(lnf.0), p.get(lnf.1));
    if !all_finite(&out) {
        return Err(Error::NonFinite(format!("{label}.ln_f")));
    }
    Ok((out, StackCache { blocks: caches, lnf: lnf_cache, out_rows: rows }))
}

pub fn stack_backward<F: Real>(
    p: &ModelParams<F>,
    blocks: &[BlockIds],
    lnf: (ArrayId, ArrayId),
    dims: Dims,
    cache: &StackCache<F>,
    dout: &[F],
    grads: &mut Gradients<F>,
) -> Vec<F> {
    debug_assert_eq!(dout.len(), cache.out_rows * dims.d);
    let (dg, db) = grads.pair_mut(lnf.0, lnf.1);
    let mut g = layer_norm_backward(&cache.lnf, dims.d, p.get(lnf.0), dout, dg, db);
    for (ids, c) in blocks.iter().zip(&cache.blocks).rev() {
        g = block_backward(p, ids, dims, c, &g, grads);
    }
    g
}
