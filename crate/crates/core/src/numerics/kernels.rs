//! Row-major dense kernels. Loop orders are fixed so accumulation is
//! deterministic.

use super::Float;

/// `out[m,n] += a[m,k] · b[k,n]`
///
/// Rows are processed four at a time so each row of `b` is loaded once per
/// block; every output element still accumulates over `k` in order.
pub fn gemm_nn_acc<F: Float>(out: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    let blocks = m / 4;
    for blk in 0..blocks {
        let i = blk * 4;
        let (r0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (r1, rest) = rest.split_at_mut(n);
        let (r2, r3) = rest.split_at_mut(n);
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let b_row = &b[p * n..(p + 1) * n];
            let (r0, r1, r2, r3) = (&mut r0[..n], &mut r1[..n], &mut r2[..n], &mut r3[..n]);
            for j in 0..n {
                let bv = b_row[j];
                r0[j] += a0 * bv;
                r1[j] += a1 * bv;
                r2[j] += a2 * bv;
                r3[j] += a3 * bv;
            }
        }
    }
    for i in blocks * 4..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
///
/// `b` is transposed into a scratch buffer first so the inner loop runs
/// over contiguous rows.
pub fn gemm_nt_acc<F: Float>(out: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    let mut bt = vec![F::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm_nn_acc(out, a, &bt, m, k, n);
}

/// `out[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn gemm_tn_acc<F: Float>(out: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Weighted sum over the leading axis: `out = Σ_k alpha[k] · bank[k]`.
///
/// The first slice initializes the accumulator, so a one-hot `alpha`
/// reproduces the selected slice bit for bit.
pub fn mix_into<F: Float>(out: &mut [F], bank: &[F], alpha: &[F]) {
    let inner = out.len();
    debug_assert_eq!(bank.len(), inner * alpha.len());
    for (k, &a) in alpha.iter().enumerate() {
        let slice = &bank[k * inner..(k + 1) * inner];
        if k == 0 {
            for (o, &w) in out.iter_mut().zip(slice) {
                *o = a * w;
            }
        } else {
            for (o, &w) in out.iter_mut().zip(slice) {
                *o += a * w;
            }
        }
    }
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Permute axes: output axis `j` is input axis `axes[j]`.
pub fn permute<F: Float>(data: &[F], shape: &[usize], axes: &[usize]) -> (Vec<F>, Vec<usize>) {
    let in_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// For each flat index of `out_shape`, the flat index into a tensor of
/// `in_shape` broadcast against it (numpy rules, left padding).
pub fn broadcast_index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let pad = out_shape.len() - in_shape.len();
    let in_strides = row_major_strides(in_shape);
    let src_strides: Vec<usize> = (0..out_shape.len())
        .map(|d| {
            if d < pad || in_shape[d - pad] == 1 {
                0
            } else {
                in_strides[d - pad]
            }
        })
        .collect();
    let n: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        map.push(src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 1.0).collect(); // 3x4
        let mut nn = vec![0.0; 8];
        gemm_nn_acc(&mut nn, &a, &b, 2, 3, 4);
        // bᵀ as 4x3
        let (bt, _) = permute(&b, &[3, 4], &[1, 0]);
        let mut nt = vec![0.0; 8];
        gemm_nt_acc(&mut nt, &a, &bt, 2, 3, 4);
        let (at, _) = permute(&a, &[2, 3], &[1, 0]);
        let mut tn = vec![0.0; 8];
        gemm_tn_acc(&mut tn, &at, &b, 2, 3, 4);
        assert_eq!(nn, nt);
        assert_eq!(nn, tn);
        // row 0 = [0,1,2]·b
        let expect0: f64 = (0..3).map(|p| a[p] * b[p * 4]).sum();
        assert_eq!(nn[0], expect0);
    }

    #[test]
    fn permute_inverse_roundtrip() {
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let (p, s) = permute(&data, &[2, 3, 4], &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        let (back, s2) = permute(&p, &s, &[1, 2, 0]);
        assert_eq!(s2, vec![2, 3, 4]);
        assert_eq!(back, data);
    }

    #[test]
    fn broadcast_map_bias_rows() {
        assert_eq!(broadcast_index_map(&[3], &[2, 3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_index_map(&[2, 1], &[2, 3]), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn one_hot_mix_is_exact_copy() {
        let bank = [1.1f32, -2.3, 0.7, 5.5, 9.25, -0.125];
        let mut out = [0.0f32; 2];
        mix_into(&mut out, &bank, &[0.0, 1.0, 0.0]);
        assert_eq!(out, [0.7, 5.5]);
    }
}
