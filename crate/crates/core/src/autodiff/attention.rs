use crate::autodiff::AttnSpec;
use crate::tensor::{gemm, softmax_rows, MatMut, MatRef, Scalar};

/// Forward pass; returns the attention probabilities laid out as
/// `(group, head, lq, lk)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    out: &mut [T],
    lq: usize,
    lk: usize,
    d: usize,
    spec: AttnSpec,
) -> Vec<T> {
    let dh = d / spec.heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let block = lq * lk;
    let mut probs = vec![T::zero(); spec.groups * spec.heads * block];
    let offset = lk - lq.min(lk);
    for g in 0..spec.groups {
        let kg = if spec.kv_shared { 0 } else { g };
        for h in 0..spec.heads {
            let p = &mut probs[(g * spec.heads + h) * block..(g * spec.heads + h + 1) * block];
            let qb = MatRef::block(q, g * lq * d + h * dh, lq, dh, d);
            let kb = MatRef::block(k, kg * lk * d + h * dh, lk, dh, d);
            gemm(scale, qb, kb.t(), T::zero(), MatMut::dense(p, lq, lk));
            if spec.causal {
                for i in 0..lq {
                    for j in (i + offset + 1)..lk {
                        p[i * lk + j] = T::neg_infinity();
                    }
                }
            }
            softmax_rows(p, lk);
            let vb = MatRef::block(v, kg * lk * d + h * dh, lk, dh, d);
            gemm(
                T::one(),
                MatRef::dense(p, lq, lk),
                vb,
                T::zero(),
                MatMut::block(out, g * lq * d + h * dh, lq, dh, d),
            );
        }
    }
    probs
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
    lq: usize,
    lk: usize,
    d: usize,
    spec: AttnSpec,
) {
    let dh = d / spec.heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let block = lq * lk;
    let mut ds = vec![T::zero(); block];
    for g in 0..spec.groups {
        let kg = if spec.kv_shared { 0 } else { g };
        for h in 0..spec.heads {
            let p = &probs[(g * spec.heads + h) * block..(g * spec.heads + h + 1) * block];
            let pm = MatRef::dense(p, lq, lk);
            let dob = MatRef::block(dout, g * lq * d + h * dh, lq, dh, d);
            let vb = MatRef::block(v, kg * lk * d + h * dh, lk, dh, d);
            let kb = MatRef::block(k, kg * lk * d + h * dh, lk, dh, d);
            let qb = MatRef::block(q, g * lq * d + h * dh, lq, dh, d);
            // dV += P^T dO
            gemm(T::one(), pm.t(), dob, T::one(), MatMut::block(dv, kg * lk * d + h * dh, lk, dh, d));
            // dP = dO V^T, then the softmax Jacobian
            gemm(T::one(), dob, vb.t(), T::zero(), MatMut::dense(&mut ds, lq, lk));
            for i in 0..lq {
                let row = &mut ds[i * lk..(i + 1) * lk];
                let pr = &p[i * lk..(i + 1) * lk];
                let dot: T = row.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                for j in 0..lk {
                    row[j] = pr[j] * (row[j] - dot);
                }
            }
            let dsm = MatRef::dense(&ds, lq, lk);
            gemm(scale, dsm, kb, T::one(), MatMut::block(dq, g * lq * d + h * dh, lq, dh, d));
            gemm(scale, dsm.t(), qb, T::one(), MatMut::block(dk, kg * lk * d + h * dh, lk, dh, d));
        }
    }
}
