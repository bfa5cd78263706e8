//! Graph-recording tensor operations: elementwise arithmetic, matrix
//! products, softmax, shape movement, and reductions. Layer-level ops
//! (convolutions, pooling, normalization) live in `nn::functional` and build
//! on the same recording helper.

use super::{kern, BackwardFn, Tensor};
use crate::error::{Error, Result};
use crate::flopcount;

fn any_requires(inputs: &[&Tensor]) -> bool {
    inputs.iter().any(|t| t.requires_grad())
}

/// Build an op result, recording parents and a backward rule only when some
/// input participates in a gradient graph.
pub(crate) fn nary_op(
    inputs: &[&Tensor],
    shape: Vec<usize>,
    data: Vec<f32>,
    label: &str,
    bwd: impl Fn(&[f32], &[Tensor]) -> Vec<Vec<f32>> + 'static,
) -> Tensor {
    if any_requires(inputs) {
        let parents: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();
        Tensor::make(shape, data, true, label, parents, Some(Box::new(bwd) as BackwardFn))
    } else {
        Tensor::make(shape, data, false, label, vec![], None)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: operand shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tensor {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let (a, b) = (self.data(), other.data());
        let data: Vec<f32> = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
        flopcount::add_misc(data.len() as u64);
        drop((a, b));
        Ok(nary_op(&[self, other], self.shape(), data, "add", |dy, _| {
            vec![dy.to_vec(), dy.to_vec()]
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let (a, b) = (self.data(), other.data());
        let data: Vec<f32> = a.iter().zip(b.iter()).map(|(x, y)| x - y).collect();
        flopcount::add_misc(data.len() as u64);
        drop((a, b));
        Ok(nary_op(&[self, other], self.shape(), data, "sub", |dy, _| {
            vec![dy.to_vec(), dy.iter().map(|g| -g).collect()]
        }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let (a, b) = (self.data(), other.data());
        let data: Vec<f32> = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
        flopcount::add_misc(data.len() as u64);
        drop((a, b));
        Ok(nary_op(&[self, other], self.shape(), data, "mul", |dy, ps| {
            let a = ps[0].data();
            let b = ps[1].data();
            let da = dy.iter().zip(b.iter()).map(|(g, v)| g * v).collect();
            let db = dy.iter().zip(a.iter()).map(|(g, v)| g * v).collect();
            vec![da, db]
        }))
    }

    pub fn scale(&self, c: f32) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|x| x * c).collect();
        nary_op(&[self], self.shape(), data, "scale", move |dy, _| {
            vec![dy.iter().map(|g| g * c).collect()]
        })
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&self) -> Tensor {
        const A: f32 = 0.797_884_56; // sqrt(2/pi)
        const C: f32 = 0.044715;
        let data: Vec<f32> = self
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (A * (x + C * x * x * x)).tanh()))
            .collect();
        nary_op(&[self], self.shape(), data, "gelu", |dy, ps| {
            let x = ps[0].data();
            let dx = dy
                .iter()
                .zip(x.iter())
                .map(|(&g, &x)| {
                    let u = A * (x + C * x * x * x);
                    let t = u.tanh();
                    let du = A * (1.0 + 3.0 * C * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                })
                .collect();
            vec![dx]
        })
    }

    /// 2-D matrix product [M×K]·[K×P] → [M×P].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!(
                "matmul: incompatible shapes {sa:?} x {sb:?}"
            )));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0f32; m * p];
        kern::matmul_acc(&self.data(), &other.data(), m, k, p, &mut data);
        Ok(nary_op(
            &[self, other],
            vec![m, p],
            data,
            "matmul",
            move |dy, ps| {
                let a = ps[0].data();
                let b = ps[1].data();
                let mut da = vec![0.0f32; m * k];
                let mut db = vec![0.0f32; k * p];
                kern::matmul_nt_acc(dy, &b, m, p, k, &mut da); // dA = dY·Bᵀ
                kern::matmul_tn_acc(&a, dy, m, k, p, &mut db); // dB = Aᵀ·dY
                vec![da, db]
            },
        ))
    }

    /// Batched matrix product [B×M×K]·[B×K×P] → [B×M×P].
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape(format!(
                "bmm: incompatible shapes {sa:?} x {sb:?}"
            )));
        }
        let (bs, m, k, p) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![0.0f32; bs * m * p];
        {
            let a = self.data();
            let b = other.data();
            for i in 0..bs {
                kern::matmul_acc(
                    &a[i * m * k..(i + 1) * m * k],
                    &b[i * k * p..(i + 1) * k * p],
                    m,
                    k,
                    p,
                    &mut data[i * m * p..(i + 1) * m * p],
                );
            }
        }
        Ok(nary_op(
            &[self, other],
            vec![bs, m, p],
            data,
            "bmm",
            move |dy, ps| {
                let a = ps[0].data();
                let b = ps[1].data();
                let mut da = vec![0.0f32; bs * m * k];
                let mut db = vec![0.0f32; bs * k * p];
                for i in 0..bs {
                    kern::matmul_nt_acc(
                        &dy[i * m * p..(i + 1) * m * p],
                        &b[i * k * p..(i + 1) * k * p],
                        m,
                        p,
                        k,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                    kern::matmul_tn_acc(
                        &a[i * m * k..(i + 1) * m * k],
                        &dy[i * m * p..(i + 1) * m * p],
                        m,
                        k,
                        p,
                        &mut db[i * k * p..(i + 1) * k * p],
                    );
                }
                vec![da, db]
            },
        ))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "softmax: axis {axis} out of bounds for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0f32; self.numel()];
        kern::softmax_lanes(&self.data(), outer, lane, inner, &mut data);
        Ok(nary_op(
            &[self],
            shape,
            data.clone(),
            "softmax",
            move |dy, _| {
                let mut dx = vec![0.0f32; dy.len()];
                kern::softmax_backward_lanes(&data, dy, outer, lane, inner, &mut dx);
                vec![dx]
            },
        ))
    }

    /// Sum of all elements as a rank-0 scalar (f64 accumulator).
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().map(|&x| x as f64).sum();
        let n = self.numel();
        nary_op(&[self], vec![], vec![total as f32], "sum", move |dy, _| {
            vec![vec![dy[0]; n]]
        })
    }

    /// Mean of all elements as a rank-0 scalar (f64 accumulator).
    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let total: f64 = self.data().iter().map(|&x| x as f64).sum();
        nary_op(
            &[self],
            vec![],
            vec![(total / n as f64) as f32],
            "mean",
            move |dy, _| vec![vec![dy[0] / n as f32; n]],
        )
    }

    /// Same data, new shape with identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if super::numel_of(shape) != self.numel() {
            return Err(Error::Shape(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        Ok(nary_op(
            &[self],
            shape.to_vec(),
            self.to_vec(),
            "reshape",
            |dy, _| vec![dy.to_vec()],
        ))
    }

    /// Axis permutation: output axis d takes input axis perm[d].
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!(
                "permute: {perm:?} is not a permutation of 0..{rank}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut data = vec![0.0f32; self.numel()];
        kern::permute_copy(&self.data(), &shape, perm, &mut data);
        let perm_owned = perm.to_vec();
        Ok(nary_op(
            &[self],
            out_shape.clone(),
            data,
            "permute",
            move |dy, _| {
                // Gradient flows through the inverse permutation.
                let mut inv = vec![0usize; perm_owned.len()];
                for (d, &p) in perm_owned.iter().enumerate() {
                    inv[p] = d;
                }
                let mut dx = vec![0.0f32; dy.len()];
                kern::permute_copy(dy, &out_shape, &inv, &mut dx);
                vec![dx]
            },
        ))
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::Shape("concat: empty input list".into()));
        }
        let base = xs[0].shape();
        if axis >= base.len() {
            return Err(Error::Shape(format!(
                "concat: axis {axis} out of bounds for shape {base:?}"
            )));
        }
        let mut axis_total = 0usize;
        for x in xs {
            let s = x.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(base.iter())
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::Shape(format!(
                    "concat: shape {s:?} incompatible with {base:?} along axis {axis}"
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;

        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = vec![0.0f32; super::numel_of(&out_shape)];
        let mut offset = 0usize;
        let axis_sizes: Vec<usize> = xs.iter().map(|x| x.dim(axis)).collect();
        for (x, &ax) in xs.iter().zip(&axis_sizes) {
            let xd = x.data();
            for o in 0..outer {
                let src = &xd[o * ax * inner..(o + 1) * ax * inner];
                let dst_base = o * axis_total * inner + offset * inner;
                data[dst_base..dst_base + ax * inner].copy_from_slice(src);
            }
            offset += ax;
        }
        let refs: Vec<&Tensor> = xs.to_vec();
        Ok(nary_op(
            &refs,
            out_shape,
            data,
            "concat",
            move |dy, ps| {
                let mut grads = Vec::with_capacity(ps.len());
                let mut offset = 0usize;
                for &ax in &axis_sizes {
                    let mut g = vec![0.0f32; outer * ax * inner];
                    for o in 0..outer {
                        let src_base = o * axis_total * inner + offset * inner;
                        g[o * ax * inner..(o + 1) * ax * inner]
                            .copy_from_slice(&dy[src_base..src_base + ax * inner]);
                    }
                    grads.push(g);
                    offset += ax;
                }
                grads
            },
        ))
    }

    /// Contiguous slice of length `len` starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "narrow: [{start}, {}) out of bounds on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ax = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = vec![0.0f32; outer * len * inner];
        {
            let xd = self.data();
            for o in 0..outer {
                let src = o * ax * inner + start * inner;
                data[o * len * inner..(o + 1) * len * inner]
                    .copy_from_slice(&xd[src..src + len * inner]);
            }
        }
        Ok(nary_op(
            &[self],
            out_shape,
            data,
            "narrow",
            move |dy, ps| {
                let mut dx = vec![0.0f32; ps[0].numel()];
                for o in 0..outer {
                    let dst = o * ax * inner + start * inner;
                    dx[dst..dst + len * inner]
                        .copy_from_slice(&dy[o * len * inner..(o + 1) * len * inner]);
                }
                vec![dx]
            },
        ))
    }

    /// Reverse the last axis (horizontal flip for N×C×H×W maps).
    pub fn flip_w(&self) -> Tensor {
        let shape = self.shape();
        let w = *shape.last().expect("flip_w on rank-0 tensor");
        let rows = self.numel() / w;
        let mut data = self.to_vec();
        for r in 0..rows {
            data[r * w..(r + 1) * w].reverse();
        }
        nary_op(&[self], shape, data, "flip_w", move |dy, _| {
            let mut dx = dy.to_vec();
            for r in 0..rows {
                dx[r * w..(r + 1) * w].reverse();
            }
            vec![dx]
        })
    }
}
