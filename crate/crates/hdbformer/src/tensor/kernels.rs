//! Raw slice kernels shared by forward and backward passes. Matrix kernels
//! keep the k-accumulation order fixed (ascending) so results are
//! reproducible and comparable against the naive oracles bit for bit.

use crate::flopcount;

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// C[m,n] += A[m,k] * B[k,n]. `out` must be pre-initialized.
pub fn matmul_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    flopcount::add_macs((m * k * n) as u64);
}

/// C[m,n] += A[m,k] * B[n,k]^T (B stored row-major as n×k).
pub fn matmul_nt_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
    flopcount::add_macs((m * k * n) as u64);
}

/// C[m,n] += A[t,m]^T * B[t,n] (A stored row-major as t×m).
pub fn matmul_tn_acc(a: &[f32], b: &[f32], t: usize, m: usize, n: usize, out: &mut [f32]) {
    for r in 0..t {
        let arow = &a[r * m..(r + 1) * m];
        let brow = &b[r * n..(r + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    flopcount::add_macs((t * m * n) as u64);
}

/// Softmax with max-subtraction over lanes of length `lane`, where the data
/// decomposes as outer × lane × inner.
pub fn softmax_lanes(x: &[f32], outer: usize, lane: usize, inner: usize, out: &mut [f32]) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut mx = f32::NEG_INFINITY;
            for l in 0..lane {
                mx = mx.max(x[base + l * inner]);
            }
            let mut sum = 0.0f64;
            for l in 0..lane {
                let e = (x[base + l * inner] - mx).exp();
                out[base + l * inner] = e;
                sum += e as f64;
            }
            let inv = (1.0 / sum) as f32;
            for l in 0..lane {
                out[base + l * inner] *= inv;
            }
        }
    }
    flopcount::add_misc((outer * lane * inner * 5) as u64);
}

/// dX for softmax: dx = y * (dy - sum(dy * y)) per lane.
pub fn softmax_backward_lanes(
    y: &[f32],
    dy: &[f32],
    outer: usize,
    lane: usize,
    inner: usize,
    dx: &mut [f32],
) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut dot = 0.0f64;
            for l in 0..lane {
                let idx = base + l * inner;
                dot += (dy[idx] * y[idx]) as f64;
            }
            let dot = dot as f32;
            for l in 0..lane {
                let idx = base + l * inner;
                dx[idx] = y[idx] * (dy[idx] - dot);
            }
        }
    }
}

/// out[i] = in[remap(i)] for a permutation of axes: output axis d reads input
/// axis `perm[d]`.
pub fn permute_copy(x: &[f32], shape: &[usize], perm: &[usize], out: &mut [f32]) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let numel: usize = out_shape.iter().product();
    // Strides of the OUTPUT index expressed in input-element offsets.
    let map_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for (dst, o) in out.iter_mut().enumerate().take(numel) {
        *o = x[src];
        if dst + 1 == numel {
            break;
        }
        // Increment output coordinates right-to-left, updating src offset.
        for d in (0..rank).rev() {
            coords[d] += 1;
            src += map_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            src -= map_strides[d] * out_shape[d];
            coords[d] = 0;
        }
    }
}
