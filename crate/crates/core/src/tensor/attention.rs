use super::{shape_err, Tape, TensorError, Var};

/// Projection weights for one attention layer. Weight matrices are
/// `[D×D]`, biases `[D]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub output: Var,
    /// Per-head `[Lq×Lk]` attention weights.
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention. Self-attention passes the same
/// input three times; cross-attention takes queries from one sequence and
/// keys/values from another.
pub fn multi_head_attention(
    tape: &mut Tape,
    query: Var,
    key: Var,
    value: Var,
    heads: usize,
    p: &AttentionParams,
) -> Result<Attention, TensorError> {
    let d = tape.value(query).last_dim();
    if heads == 0 || d % heads != 0 {
        return Err(shape_err("attention", format!("width {d} not divisible into {heads} heads")));
    }
    if tape.shape(key) != tape.shape(value) {
        return Err(shape_err(
            "attention",
            format!("keys {:?} vs values {:?}", tape.shape(key), tape.shape(value)),
        ));
    }
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let q = tape.matmul(query, p.wq)?;
    let q = tape.add_row(q, p.bq)?;
    let k = tape.matmul(key, p.wk)?;
    let k = tape.add_row(k, p.bk)?;
    let v = tape.matmul(value, p.wv)?;
    let v = tape.add_row(v, p.bv)?;

    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let a = tape.softmax(scores);
        outs.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let o = tape.matmul(merged, p.wo)?;
    let output = tape.add_row(o, p.bo)?;
    Ok(Attention { output, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn params(tape: &mut Tape, rng: &mut ChaCha8Rng, d: usize) -> AttentionParams {
        let mut w = || tape.param(random(rng, &[d, d]));
        let (wq, wk, wv, wo) = (w(), w(), w(), w());
        let mut b = || tape.param(random(rng, &[d]));
        let (bq, bk, bv, bo) = (b(), b(), b(), b());
        AttentionParams { wq, bq, wk, bk, wv, bv, wo, bo }
    }

    #[test]
    fn single_key_returns_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let p = params(&mut t, &mut rng, 8);
        let q = t.constant(random(&mut rng, &[5, 8]));
        let kv = t.constant(random(&mut rng, &[1, 8]));
        let out = multi_head_attention(&mut t, q, kv, kv, 2, &p).unwrap();

        let v = t.matmul(kv, p.wv).unwrap();
        let v = t.add_row(v, p.bv).unwrap();
        let o = t.matmul(v, p.wo).unwrap();
        let expected = t.add_row(o, p.bo).unwrap();
        for r in 0..5 {
            for (a, b) in t.value(out.output).row(r).iter().zip(t.value(expected).row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weights_are_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::new();
        let p = params(&mut t, &mut rng, 8);
        let q = t.constant(random(&mut rng, &[3, 8]));
        let kv = t.constant(random(&mut rng, &[6, 8]));
        let out = multi_head_attention(&mut t, q, kv, kv, 4, &p).unwrap();
        assert_eq!(out.weights.len(), 4);
        for w in &out.weights {
            let w = t.value(*w);
            for r in 0..w.rows() {
                assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(w.row(r).iter().all(|&x| x >= 0.0));
            }
        }
        assert_eq!(t.shape(out.output), &[3, 8]);
    }

    #[test]
    fn indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::new();
        let p = params(&mut t, &mut rng, 8);
        let q = t.constant(random(&mut rng, &[2, 8]));
        assert!(multi_head_attention(&mut t, q, q, q, 3, &p).is_err());
    }
}
