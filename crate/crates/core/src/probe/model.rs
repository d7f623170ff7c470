use super::{BlockIdx, LogitTriple, PoolIdx, ProbeGradients, ProbeParameters};
use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Matrix};

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn linear(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut y = x.matmul(w);
    y.add_row_broadcast(b.as_slice());
    y
}

/// Accumulates `dW += x^T dy`, `db += colsum(dy)` and returns `dx = dy W^T`.
fn linear_backward(x: &Matrix, w: &Matrix, dy: &Matrix, dw: &mut Matrix, db: &mut Matrix) -> Matrix {
    dw.add_assign(&x.t_matmul(dy));
    for (b, s) in db.as_mut_slice().iter_mut().zip(dy.column_sums()) {
        *b += s;
    }
    dy.matmul_t(w)
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, NormCache) {
    let (n, d) = x.shape();
    let mut xhat = Matrix::zeros(n, d);
    let mut y = Matrix::zeros(n, d);
    let mut rstd = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(s);
        for c in 0..d {
            let h = (row[c] - mean) * s;
            xhat.set(r, c, h);
            y.set(r, c, h * gain.as_slice()[c] + bias.as_slice()[c]);
        }
    }
    (y, NormCache { xhat, rstd })
}

fn layer_norm_backward(
    cache: &NormCache,
    gain: &Matrix,
    dy: &Matrix,
    dgain: &mut Matrix,
    dbias: &mut Matrix,
) -> Matrix {
    let (n, d) = dy.shape();
    let mut dx = Matrix::zeros(n, d);
    let g = gain.as_slice();
    for r in 0..n {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for c in 0..d {
            dgain.as_mut_slice()[c] += dyr[c] * xh[c];
            dbias.as_mut_slice()[c] += dyr[c];
            let dxh = dyr[c] * g[c];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[c];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        let s = cache.rstd[r];
        let out = dx.row_mut(r);
        for c in 0..d {
            out[c] = s * (dyr[c] * g[c] - mean_dxh - xh[c] * mean_dxh_xh);
        }
    }
    dx
}

/// Multi-head attention of `q` rows over `k`/`v` rows. Returns the
/// concatenated head outputs and the per-head attention matrices.
fn attention(q: &Matrix, k: &Matrix, v: &Matrix, n_heads: usize) -> (Matrix, Vec<Matrix>) {
    let d = q.cols();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = q.column_block(h * hd, hd);
        let kh = k.column_block(h * hd, hd);
        let vh = v.column_block(h * hd, hd);
        let mut s = qh.matmul_t(&kh);
        s.scale(scale);
        for r in 0..s.rows() {
            softmax_in_place(s.row_mut(r));
        }
        out.set_column_block(h * hd, &s.matmul(&vh));
        probs.push(s);
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)` for upstream `dout` on the concatenated head outputs.
fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    probs: &[Matrix],
    dout: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let n_heads = probs.len();
    let d = q.cols();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Matrix::zeros(q.rows(), d);
    let mut dk = Matrix::zeros(k.rows(), d);
    let mut dv = Matrix::zeros(v.rows(), d);
    for (h, a) in probs.iter().enumerate() {
        let qh = q.column_block(h * hd, hd);
        let kh = k.column_block(h * hd, hd);
        let vh = v.column_block(h * hd, hd);
        let doh = dout.column_block(h * hd, hd);
        let da = doh.matmul_t(&vh);
        dv.set_column_block(h * hd, &a.t_matmul(&doh));
        // softmax backward, row-wise
        let mut ds = Matrix::zeros(a.rows(), a.cols());
        for r in 0..a.rows() {
            let ar = a.row(r);
            let dar = da.row(r);
            let inner: f64 = ar.iter().zip(dar).map(|(p, g)| p * g).sum();
            for (c, o) in ds.row_mut(r).iter_mut().enumerate() {
                *o = ar[c] * (dar[c] - inner) * scale;
            }
        }
        dq.set_column_block(h * hd, &ds.matmul(&kh));
        dk.set_column_block(h * hd, &ds.t_matmul(&qh));
    }
    (dq, dk, dv)
}

#[derive(Debug, Clone)]
struct BlockTape {
    x_in: Matrix,
    norm1: NormCache,
    h: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    attn_out: Matrix,
    norm2: NormCache,
    h2: Matrix,
    pre_act: Matrix,
    act: Matrix,
}

#[derive(Debug, Clone)]
struct PoolTape {
    norm: NormCache,
    z: Matrix,
    queries: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    attn_out: Matrix,
    pooled: Matrix,
}

/// Intermediates of one forward pass, consumed by [`probe_backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    stamp: (u64, u64),
    segment_ids: Vec<u8>,
    blocks: Vec<BlockTape>,
    pool: PoolTape,
}

impl Tape {
    /// Pooled task vectors, one row per field.
    pub fn pooled(&self) -> &Matrix {
        &self.pool.pooled
    }

    /// Pooling attention weights per head, `[3 x n_tokens]` each.
    pub fn pool_attention(&self) -> &[Matrix] {
        &self.pool.probs
    }
}

fn check_inputs(tokens: &Matrix, segment_ids: &[u8], params: &ProbeParameters) -> Result<()> {
    let d = params.config().d_model;
    if tokens.rows() == 0 {
        return Err(Error::Shape("at least one token is required".into()));
    }
    if tokens.cols() != d {
        return Err(Error::Shape(format!("token width {} but d_model is {d}", tokens.cols())));
    }
    if segment_ids.len() != tokens.rows() {
        return Err(Error::Shape(format!(
            "{} segment ids for {} tokens",
            segment_ids.len(),
            tokens.rows()
        )));
    }
    if let Some(bad) = segment_ids.iter().find(|&&s| s > 1) {
        return Err(Error::Shape(format!("segment id {bad} not in {{0, 1}}")));
    }
    if !tokens.all_finite() {
        return Err(Error::NonFinite("probe input tokens".into()));
    }
    Ok(())
}

fn block_forward(x: Matrix, b: &BlockIdx, p: &[Matrix], n_heads: usize) -> (Matrix, BlockTape) {
    let (h, norm1) = layer_norm(&x, &p[b.norm1_gain], &p[b.norm1_bias]);
    let q = linear(&h, &p[b.wq], &p[b.bq]);
    let k = linear(&h, &p[b.wk], &p[b.bk]);
    let v = linear(&h, &p[b.wv], &p[b.bv]);
    let (attn_out, probs) = attention(&q, &k, &v, n_heads);
    let mut x_mid = linear(&attn_out, &p[b.wo], &p[b.bo]);
    x_mid.add_assign(&x);

    let (h2, norm2) = layer_norm(&x_mid, &p[b.norm2_gain], &p[b.norm2_bias]);
    let pre_act = linear(&h2, &p[b.w1], &p[b.b1]);
    let mut act = pre_act.clone();
    act.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
    let mut x_out = linear(&act, &p[b.w2], &p[b.b2]);
    x_out.add_assign(&x_mid);
    let tape = BlockTape { x_in: x, norm1, h, q, k, v, probs, attn_out, norm2, h2, pre_act, act };
    (x_out, tape)
}

fn pool_forward(z: &Matrix, pool: &PoolIdx, p: &[Matrix], n_heads: usize) -> (Matrix, Matrix, Matrix, Matrix, Matrix, Vec<Matrix>, Matrix) {
    let d = z.cols();
    let mut queries = Matrix::zeros(3, d);
    for (f, &qi) in pool.queries.iter().enumerate() {
        queries.row_mut(f).copy_from_slice(p[qi].as_slice());
    }
    let q = linear(&queries, &p[pool.wq], &p[pool.bq]);
    let k = linear(z, &p[pool.wk], &p[pool.bk]);
    let v = linear(z, &p[pool.wv], &p[pool.bv]);
    let (attn_out, probs) = attention(&q, &k, &v, n_heads);
    let pooled = linear(&attn_out, &p[pool.wo], &p[pool.bo]);
    (pooled, queries, q, k, v, probs, attn_out)
}

/// Three-query attentive pooling applied directly to `tokens` (no
/// normalization), using the pooling weights and task queries in `params`.
/// Returns one pooled row per field.
pub fn attentive_pool(tokens: &Matrix, params: &ProbeParameters) -> Result<Matrix> {
    let d = params.config().d_model;
    if tokens.rows() == 0 || tokens.cols() != d {
        return Err(Error::Shape(format!(
            "pooling expects n x {d} tokens, got {:?}",
            tokens.shape()
        )));
    }
    let (pooled, ..) = pool_forward(tokens, &params.layout.pool, &params.tensors, params.config().n_heads);
    Ok(pooled)
}

pub fn probe_forward(
    tokens: &Matrix,
    segment_ids: &[u8],
    params: &ProbeParameters,
) -> Result<(LogitTriple, Tape)> {
    check_inputs(tokens, segment_ids, params)?;
    let cfg = params.config();
    let lay = &params.layout;
    let p = &params.tensors;

    let mut x = tokens.clone();
    let seg = &p[lay.segment];
    for (r, &s) in segment_ids.iter().enumerate() {
        for (v, &e) in x.row_mut(r).iter_mut().zip(seg.row(usize::from(s))) {
            *v += e;
        }
    }

    let mut blocks = Vec::with_capacity(lay.blocks.len());
    for b in &lay.blocks {
        let (next, tape) = block_forward(x, b, p, cfg.n_heads);
        blocks.push(tape);
        x = next;
    }

    let (z, norm) = layer_norm(&x, &p[lay.pool.norm_gain], &p[lay.pool.norm_bias]);
    let (pooled, queries, q, k, v, probs, attn_out) = pool_forward(&z, &lay.pool, p, cfg.n_heads);

    let mut logits = LogitTriple::zeros(cfg);
    for f in 0..3 {
        let row = Matrix::row_vector(pooled.row(f).to_vec());
        let out = linear(&row, &p[lay.cls_w[f]], &p[lay.cls_b[f]]);
        *logits.field_mut(f) = out.into_vec();
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("probe logits".into()));
    }
    let tape = Tape {
        stamp: params.stamp(),
        segment_ids: segment_ids.to_vec(),
        blocks,
        pool: PoolTape { norm, z, queries, q, k, v, probs, attn_out, pooled },
    };
    Ok((logits, tape))
}

pub fn probe_backward(
    tape: &Tape,
    dlogits: &LogitTriple,
    params: &ProbeParameters,
) -> Result<ProbeGradients> {
    if tape.stamp != params.stamp() {
        return Err(Error::StaleTape(
            "tape was recorded against different or since-modified parameters".into(),
        ));
    }
    let cfg = params.config();
    for f in 0..3 {
        if dlogits.field(f).len() != cfg.n_classes(f) {
            return Err(Error::Shape(format!(
                "{} gradient has length {}, expected {}",
                super::FIELD_NAMES[f],
                dlogits.field(f).len(),
                cfg.n_classes(f)
            )));
        }
    }
    if !dlogits.all_finite() {
        return Err(Error::NonFinite("logit gradients".into()));
    }
    let lay = &params.layout;
    let p = &params.tensors;
    let mut g = ProbeGradients::zeros_like(params);
    let d = cfg.d_model;
    let pt = &tape.pool;

    // classifiers
    let mut dpooled = Matrix::zeros(3, d);
    for f in 0..3 {
        let row = Matrix::row_vector(pt.pooled.row(f).to_vec());
        let dy = Matrix::row_vector(dlogits.field(f).to_vec());
        let (gw, gb) = two_mut(&mut g.tensors, lay.cls_w[f], lay.cls_b[f]);
        let dx = linear_backward(&row, &p[lay.cls_w[f]], &dy, gw, gb);
        dpooled.row_mut(f).copy_from_slice(dx.as_slice());
    }

    // pooling cross-attention
    let pool = &lay.pool;
    let (gw, gb) = two_mut(&mut g.tensors, pool.wo, pool.bo);
    let dattn = linear_backward(&pt.attn_out, &p[pool.wo], &dpooled, gw, gb);
    let (dq, dk, dv) = attention_backward(&pt.q, &pt.k, &pt.v, &pt.probs, &dattn);
    let (gw, gb) = two_mut(&mut g.tensors, pool.wq, pool.bq);
    let dqueries = linear_backward(&pt.queries, &p[pool.wq], &dq, gw, gb);
    for (f, &qi) in pool.queries.iter().enumerate() {
        g.tensors[qi].as_mut_slice().copy_from_slice(dqueries.row(f));
    }
    let (gw, gb) = two_mut(&mut g.tensors, pool.wk, pool.bk);
    let mut dz = linear_backward(&pt.z, &p[pool.wk], &dk, gw, gb);
    let (gw, gb) = two_mut(&mut g.tensors, pool.wv, pool.bv);
    dz.add_assign(&linear_backward(&pt.z, &p[pool.wv], &dv, gw, gb));
    let (gg, gb) = two_mut(&mut g.tensors, pool.norm_gain, pool.norm_bias);
    let mut dx = layer_norm_backward(&pt.norm, &p[pool.norm_gain], &dz, gg, gb);

    for (b, bt) in lay.blocks.iter().zip(&tape.blocks).rev() {
        // MLP branch: x_out = x_mid + W2 gelu(W1 norm2(x_mid))
        let (gw, gb) = two_mut(&mut g.tensors, b.w2, b.b2);
        let mut dact = linear_backward(&bt.act, &p[b.w2], &dx, gw, gb);
        for (da, &u) in dact.as_mut_slice().iter_mut().zip(bt.pre_act.as_slice()) {
            *da *= gelu_grad(u);
        }
        let (gw, gb) = two_mut(&mut g.tensors, b.w1, b.b1);
        let dh2 = linear_backward(&bt.h2, &p[b.w1], &dact, gw, gb);
        let (gg, gb) = two_mut(&mut g.tensors, b.norm2_gain, b.norm2_bias);
        dx.add_assign(&layer_norm_backward(&bt.norm2, &p[b.norm2_gain], &dh2, gg, gb));

        // attention branch: x_mid = x_in + Wo attn(norm1(x_in))
        let (gw, gb) = two_mut(&mut g.tensors, b.wo, b.bo);
        let dattn = linear_backward(&bt.attn_out, &p[b.wo], &dx, gw, gb);
        let (dq, dk, dv) = attention_backward(&bt.q, &bt.k, &bt.v, &bt.probs, &dattn);
        let (gw, gb) = two_mut(&mut g.tensors, b.wq, b.bq);
        let mut dh = linear_backward(&bt.h, &p[b.wq], &dq, gw, gb);
        let (gw, gb) = two_mut(&mut g.tensors, b.wk, b.bk);
        dh.add_assign(&linear_backward(&bt.h, &p[b.wk], &dk, gw, gb));
        let (gw, gb) = two_mut(&mut g.tensors, b.wv, b.bv);
        dh.add_assign(&linear_backward(&bt.h, &p[b.wv], &dv, gw, gb));
        let (gg, gb) = two_mut(&mut g.tensors, b.norm1_gain, b.norm1_bias);
        dx.add_assign(&layer_norm_backward(&bt.norm1, &p[b.norm1_gain], &dh, gg, gb));
        debug_assert_eq!(bt.x_in.shape(), dx.shape());
    }

    let seg = &mut g.tensors[lay.segment];
    for (r, &s) in tape.segment_ids.iter().enumerate() {
        for (o, &v) in seg.row_mut(usize::from(s)).iter_mut().zip(dx.row(r)) {
            *o += v;
        }
    }
    if !g.all_finite() {
        return Err(Error::NonFinite("parameter gradients".into()));
    }
    Ok(g)
}

fn two_mut(v: &mut [Matrix], a: usize, b: usize) -> (&mut Matrix, &mut Matrix) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

#[cfg(test)]
mod tests {
    use super::super::{init_params, ProbeConfig};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ProbeConfig {
        ProbeConfig {
            d_model: 8,
            n_blocks: 2,
            n_heads: 2,
            mlp_ratio: 2.0,
            n_verb: 5,
            n_noun: 6,
            n_action: 4,
            seed: 0,
        }
    }

    fn random_tokens(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_classifier_yields_bias() {
        let mut p = init_params(&cfg()).unwrap();
        for f in 0..3 {
            let (w, b) = (p.layout.cls_w[f], p.layout.cls_b[f]);
            p.tensor_mut(w).fill(0.0);
            let n = p.tensor(b).len();
            let bias: Vec<f64> = (0..n).map(|i| i as f64 * 0.5 - 1.0).collect();
            p.tensor_mut(b).as_mut_slice().copy_from_slice(&bias);
        }
        let tokens = Matrix::zeros(3, 8);
        let (logits, _) = probe_forward(&tokens, &[0, 0, 1], &p).unwrap();
        for f in 0..3 {
            assert_eq!(logits.field(f), p.tensor(p.layout.cls_b[f]).as_slice());
        }
    }

    #[test]
    fn single_token_pools_with_weight_one() {
        let p = init_params(&cfg()).unwrap();
        let tokens = random_tokens(1, 8, 3);
        let (_, tape) = probe_forward(&tokens, &[0], &p).unwrap();
        for a in tape.pool_attention() {
            assert!(a.as_slice().iter().all(|&w| w == 1.0));
        }
    }

    #[test]
    fn identical_tokens_pool_to_value_projection() {
        let p = init_params(&cfg()).unwrap();
        let t: Vec<f64> = (0..8).map(|i| (i as f64 - 3.0) * 0.3).collect();
        let tokens = Matrix::from_rows(&vec![t.clone(); 5]).unwrap();
        let pooled = attentive_pool(&tokens, &p).unwrap();
        let pool = &p.layout.pool;
        let row = Matrix::row_vector(t);
        let v = linear(&row, p.tensor(pool.wv), p.tensor(pool.bv));
        let expected = linear(&v, p.tensor(pool.wo), p.tensor(pool.bo));
        for f in 0..3 {
            for (a, b) in pooled.row(f).iter().zip(expected.as_slice()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn query_swap_swaps_pooled_rows() {
        let p = init_params(&cfg()).unwrap();
        let tokens = random_tokens(6, 8, 4);
        let pooled = attentive_pool(&tokens, &p).unwrap();
        let mut swapped = p.clone();
        let [qv, qn, _] = p.layout.pool.queries;
        let a = swapped.tensor(qv).clone();
        let b = swapped.tensor(qn).clone();
        *swapped.tensor_mut(qv) = b;
        *swapped.tensor_mut(qn) = a;
        let pooled2 = attentive_pool(&tokens, &swapped).unwrap();
        assert_eq!(pooled.row(0), pooled2.row(1));
        assert_eq!(pooled.row(1), pooled2.row(0));
        assert_eq!(pooled.row(2), pooled2.row(2));
    }

    #[test]
    fn pooling_matches_hand_softmax() {
        // 3 tokens of width 4, one head, identity projections
        let c = ProbeConfig { d_model: 4, n_heads: 1, n_blocks: 1, mlp_ratio: 1.0, n_verb: 2, n_noun: 2, n_action: 2, seed: 0 };
        let mut p = init_params(&c).unwrap();
        let pool = p.layout.pool.clone();
        for idx in [pool.wq, pool.wk, pool.wv, pool.wo] {
            let m = p.tensor_mut(idx);
            m.fill(0.0);
            for i in 0..4 {
                m.set(i, i, 1.0);
            }
        }
        let queries = [[1.0, 0.0, 0.0, 0.0], [0.0, 2.0, 0.0, 0.0], [0.5, 0.5, 0.5, 0.5]];
        for (f, q) in queries.iter().enumerate() {
            p.tensor_mut(pool.queries[f]).as_mut_slice().copy_from_slice(q);
        }
        let rows = vec![
            vec![1.0, 0.0, 2.0, -1.0],
            vec![0.0, 1.0, 0.0, 3.0],
            vec![-1.0, 1.0, 1.0, 0.0],
        ];
        let tokens = Matrix::from_rows(&rows).unwrap();
        let pooled = attentive_pool(&tokens, &p).unwrap();
        for (f, q) in queries.iter().enumerate() {
            let scores: Vec<f64> = rows.iter().map(|r| r.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / 2.0).collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..4 {
                let expect: f64 = rows.iter().zip(&e).map(|(r, w)| r[c] * w / z).sum();
                assert!((pooled.get(f, c) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = init_params(&cfg()).unwrap();
        let tokens = random_tokens(4, 8, 5);
        let (_, tape) = probe_forward(&tokens, &[0, 0, 1, 1], &p).unwrap();
        let g = probe_backward(&tape, &LogitTriple::zeros(p.config()), &p).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn stale_tape_refused() {
        let mut p = init_params(&cfg()).unwrap();
        let tokens = random_tokens(4, 8, 6);
        let (_, tape) = probe_forward(&tokens, &[0, 0, 1, 1], &p).unwrap();
        let clone = p.clone();
        assert!(matches!(probe_backward(&tape, &LogitTriple::zeros(p.config()), &clone), Err(Error::StaleTape(_))));
        p.tensor_mut(0).set(0, 0, 1.0);
        assert!(matches!(probe_backward(&tape, &LogitTriple::zeros(p.config()), &p), Err(Error::StaleTape(_))));
    }

    #[test]
    fn input_validation() {
        let p = init_params(&cfg()).unwrap();
        assert!(probe_forward(&random_tokens(3, 7, 0), &[0, 0, 0], &p).is_err());
        assert!(probe_forward(&random_tokens(3, 8, 0), &[0, 0], &p).is_err());
        assert!(probe_forward(&random_tokens(3, 8, 0), &[0, 2, 0], &p).is_err());
        let mut t = random_tokens(3, 8, 0);
        t.set(1, 1, f64::NAN);
        assert!(matches!(probe_forward(&t, &[0, 0, 0], &p), Err(Error::NonFinite(_))));
        assert!(probe_forward(&Matrix::zeros(0, 8), &[], &p).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let p = init_params(&cfg()).unwrap();
        let tokens = random_tokens(5, 8, 7);
        let (a, _) = probe_forward(&tokens, &[0, 0, 0, 1, 1], &p).unwrap();
        let (b, _) = probe_forward(&tokens, &[0, 0, 0, 1, 1], &p).unwrap();
        for f in 0..3 {
            assert!(a.field(f).iter().zip(b.field(f)).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
