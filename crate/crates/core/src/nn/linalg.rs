//! Matrix multiplication: 2-D and batched 3-D, with reverse-mode gradients.
//!
//! The gemm kernel parallelizes over output rows, so each element is written
//! by exactly one thread with a fixed summation order: results are
//! bit-identical across thread counts.

use rayon::prelude::*;

use super::tensor::{Elem, NnError, NnResult, Tensor};

const PAR_THRESHOLD: usize = 1 << 15;

/// `out (m×n) += a (m×k) · b (k×n)`; `out` must be zeroed by the caller.
pub(crate) fn gemm<E: Elem>(m: usize, k: usize, n: usize, a: &[E], b: &[E], out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |out_row: &mut [E], a_row: &[E]| {
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == E::zero() {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(out_row, a_row)| row(out_row, a_row));
    } else {
        for (out_row, a_row) in out.chunks_mut(n).zip(a.chunks(k)) {
            row(out_row, a_row);
        }
    }
}

pub(crate) fn transpose<E: Elem>(a: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::default(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

impl<E: Elem> Tensor<E> {
    /// 2-D matrix product `(m,k) · (k,n) -> (m,n)`.
    pub fn matmul(&self, other: &Tensor<E>) -> NnResult<Tensor<E>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NnError::ShapeMismatch(format!(
                "matmul {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::zero(); m * n];
        gemm(m, k, n, &self.value(), &other.value(), &mut out);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |node| {
                let g = node.out_grad();
                let a = node.parent(0);
                let b = node.parent(1);
                // dA = dC · Bᵀ
                let bt = transpose(&b.value(), k, n);
                let mut da = vec![E::zero(); m * k];
                gemm(m, n, k, &g, &bt, &mut da);
                a.accumulate_grad(&da);
                // dB = Aᵀ · dC
                let at = transpose(&a.value(), m, k);
                let mut db = vec![E::zero(); k * n];
                gemm(k, m, n, &at, &g, &mut db);
                b.accumulate_grad(&db);
            }),
        ))
    }

    /// Batched matrix product `(B,m,k) · (B,k,n) -> (B,m,n)`.
    pub fn bmm(&self, other: &Tensor<E>) -> NnResult<Tensor<E>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(NnError::ShapeMismatch(format!("bmm {sa:?} x {sb:?}")));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let av_guard = self.value();
        let av: &[E] = &av_guard;
        let bv_guard = other.value();
        let bv: &[E] = &bv_guard;
        let mut out = vec![E::zero(); bsz * m * n];
        out.par_chunks_mut(m * n)
            .enumerate()
            .for_each(|(i, chunk)| {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    chunk,
                );
            });
        drop(av_guard);
        drop(bv_guard);
        Ok(Tensor::from_op(
            vec![bsz, m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |node| {
                let g = node.out_grad();
                let g_ref: &[E] = &g;
                let a = node.parent(0);
                let b = node.parent(1);
                let av_guard = a.value();
                let av: &[E] = &av_guard;
                let bv_guard = b.value();
                let bv: &[E] = &bv_guard;
                let mut da = vec![E::zero(); bsz * m * k];
                let mut db = vec![E::zero(); bsz * k * n];
                da.par_chunks_mut(m * k)
                    .zip(db.par_chunks_mut(k * n))
                    .enumerate()
                    .for_each(|(i, (da_i, db_i))| {
                        let g_i = &g_ref[i * m * n..(i + 1) * m * n];
                        let bt = transpose(&bv[i * k * n..(i + 1) * k * n], k, n);
                        gemm(m, n, k, g_i, &bt, da_i);
                        let at = transpose(&av[i * m * k..(i + 1) * m * k], m, k);
                        gemm(k, m, n, &at, g_i, db_i);
                    });
                drop(av_guard);
                drop(bv_guard);
                a.accumulate_grad(&da);
                b.accumulate_grad(&db);
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_by_identity_is_input() {
        let x = Tensor::<f64>::constant(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let eye = Tensor::<f64>::constant(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let y = x.matmul(&eye).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn matmul_gradients_match_hand_derivation() {
        // y = sum(A·B); dA = 1 · Bᵀ, dB = Aᵀ · 1
        let a = Tensor::<f64>::parameter(&[2, 2], vec![1., 2., 3., 4.]);
        let b = Tensor::<f64>::parameter(&[2, 2], vec![5., 6., 7., 8.]);
        a.matmul(&b).unwrap().sum_all().backward();
        assert_eq!(a.grad().unwrap(), vec![11., 15., 11., 15.]);
        assert_eq!(b.grad().unwrap(), vec![4., 4., 6., 6.]);
    }

    #[test]
    fn bmm_matches_per_batch_matmul() {
        let a = Tensor::<f64>::constant(&[2, 2, 3], (0..12).map(|i| i as f64).collect());
        let b = Tensor::<f64>::constant(&[2, 3, 2], (0..12).map(|i| (i as f64) * 0.5).collect());
        let y = a.bmm(&b).unwrap();
        for batch in 0..2 {
            let a2 = a.narrow(0, batch, 1).unwrap().reshape(&[2, 3]).unwrap();
            let b2 = b.narrow(0, batch, 1).unwrap().reshape(&[3, 2]).unwrap();
            let y2 = a2.matmul(&b2).unwrap();
            let got = y.narrow(0, batch, 1).unwrap().reshape(&[2, 2]).unwrap();
            assert_eq!(got.to_vec(), y2.to_vec());
        }
    }
}
