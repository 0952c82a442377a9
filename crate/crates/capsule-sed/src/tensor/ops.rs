//! Elementwise, matrix, reduction, and shape operations.
//!
//! Every operation validates shapes up front, computes eagerly, and records
//! its backward rule when an input is attached to a graph. No implicit
//! broadcasting: the few shaped combinations the model needs are explicit
//! ops (`scale_rows`, `scale_cols`, `add_channel_bias`).

use crate::error::{Error, Result};

use super::Tensor;

/// Epsilon under the square root in [`Tensor::vector_norm`], keeping the
/// squashing gradient finite at the zero vector.
pub const NORM_EPS: f64 = 1e-12;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Tensor::from_op(&[self, other], self.shape().to_vec(), data, |g, sinks| {
            sinks.add(0, |buf| {
                for (d, &gi) in buf.iter_mut().zip(g) {
                    *d += gi;
                }
            });
            sinks.add(1, |buf| {
                for (d, &gi) in buf.iter_mut().zip(g) {
                    *d += gi;
                }
            });
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Tensor::from_op(&[self, other], self.shape().to_vec(), data, |g, sinks| {
            sinks.add(0, |buf| {
                for (d, &gi) in buf.iter_mut().zip(g) {
                    *d += gi;
                }
            });
            sinks.add(1, |buf| {
                for (d, &gi) in buf.iter_mut().zip(g) {
                    *d -= gi;
                }
            });
        })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        let a = self.data.clone();
        let b = other.data.clone();
        Tensor::from_op(&[self, other], self.shape().to_vec(), data, move |g, sinks| {
            sinks.add(0, |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * b[i];
                }
            });
            sinks.add(1, |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * a[i];
                }
            });
        })
    }

    /// Elementwise division.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("div", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a / b)
            .collect();
        let a = self.data.clone();
        let b = other.data.clone();
        Tensor::from_op(&[self, other], self.shape().to_vec(), data, move |g, sinks| {
            sinks.add(0, |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] / b[i];
                }
            });
            sinks.add(1, |buf| {
                for i in 0..g.len() {
                    buf[i] -= g[i] * a[i] / (b[i] * b[i]);
                }
            });
        })
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|a| a + c).collect();
        Tensor::from_op(&[self], self.shape().to_vec(), data, |g, sinks| {
            sinks.add(0, |buf| {
                for (d, &gi) in buf.iter_mut().zip(g) {
                    *d += gi;
                }
            });
        })
        .expect("unary op cannot fail")
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|a| a * c).collect();
        Tensor::from_op(&[self], self.shape().to_vec(), data, move |g, sinks| {
            sinks.add(0, |buf| {
                for (d, &gi) in buf.iter_mut().zip(g) {
                    *d += gi * c;
                }
            });
        })
        .expect("unary op cannot fail")
    }

    /// `c - x`, elementwise.
    pub fn sub_from_scalar(&self, c: f64) -> Tensor {
        self.mul_scalar(-1.0).add_scalar(c)
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|&a| a.max(0.0)).collect();
        let x = self.data.clone();
        Tensor::from_op(&[self], self.shape().to_vec(), data, move |g, sinks| {
            sinks.add(0, |buf| {
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        buf[i] += g[i];
                    }
                }
            });
        })
        .expect("unary op cannot fail")
    }

    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&a| 1.0 / (1.0 + (-a).exp()))
            .collect();
        let y = data.clone();
        Tensor::from_op(&[self], self.shape().to_vec(), data, move |g, sinks| {
            sinks.add(0, |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        })
        .expect("unary op cannot fail")
    }

    pub fn tanh(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&a| a.tanh()).collect();
        let y = data.clone();
        Tensor::from_op(&[self], self.shape().to_vec(), data, move |g, sinks| {
            sinks.add(0, |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            });
        })
        .expect("unary op cannot fail")
    }

    /// Natural logarithm. The caller keeps inputs positive (the model clamps
    /// probabilities before taking logs).
    pub fn ln(&self) -> Tensor {
        let data = self.data().iter().map(|&a| a.ln()).collect();
        let x = self.data.clone();
        Tensor::from_op(&[self], self.shape().to_vec(), data, move |g, sinks| {
            sinks.add(0, |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] / x[i];
                }
            });
        })
        .expect("unary op cannot fail")
    }

    /// Clamp into `[lo, hi]`; gradient passes only through unclamped values.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let data = self.data().iter().map(|&a| a.clamp(lo, hi)).collect();
        let x = self.data.clone();
        Tensor::from_op(&[self], self.shape().to_vec(), data, move |g, sinks| {
            sinks.add(0, |buf| {
                for i in 0..g.len() {
                    if x[i] > lo && x[i] < hi {
                        buf[i] += g[i];
                    }
                }
            });
        })
        .expect("unary op cannot fail")
    }

    /// Sum of all entries, as a scalar tensor.
    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(&[self], vec![1], vec![s], |g, sinks| {
            sinks.add(0, |buf| {
                for d in buf.iter_mut() {
                    *d += g[0];
                }
            });
        })
        .expect("unary op cannot fail")
    }

    /// 2-D matrix product `[m x k] . [k x n] -> [m x n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a_shape, b_shape) = (self.shape(), other.shape());
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} . {:?}", a_shape, b_shape),
            ));
        }
        let (m, k, n) = (a_shape[0], a_shape[1], b_shape[1]);
        let a = self.data.clone();
        let b = other.data.clone();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        Tensor::from_op(&[self, other], vec![m, n], out, move |g, sinks| {
            sinks.add(0, |buf| {
                // dA = g . B^T
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let drow = &mut buf[i * k..(i + 1) * k];
                    for p in 0..k {
                        let brow = &b[p * n..(p + 1) * n];
                        let mut s = 0.0;
                        for j in 0..n {
                            s += grow[j] * brow[j];
                        }
                        drow[p] += s;
                    }
                }
            });
            sinks.add(1, |buf| {
                // dB = A^T . g
                for i in 0..m {
                    let arow = &a[i * k..(i + 1) * k];
                    let grow = &g[i * n..(i + 1) * n];
                    for (p, &av) in arow.iter().enumerate() {
                        let drow = &mut buf[p * n..(p + 1) * n];
                        for j in 0..n {
                            drow[j] += av * grow[j];
                        }
                    }
                }
            });
        })
    }

    /// Matrix-vector product `[m x n] . [n] -> [m]`.
    pub fn matvec(&self, v: &Tensor) -> Result<Tensor> {
        let w_shape = self.shape();
        if w_shape.len() != 2 || v.shape().len() != 1 || w_shape[1] != v.len() {
            return Err(Error::shape(
                "matvec",
                format!("{:?} . {:?}", w_shape, v.shape()),
            ));
        }
        let (m, n) = (w_shape[0], w_shape[1]);
        let w = self.data.clone();
        let x = v.data.clone();
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &w[i * n..(i + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += row[j] * x[j];
            }
            out[i] = s;
        }
        Tensor::from_op(&[self, v], vec![m], out, move |g, sinks| {
            sinks.add(0, |buf| {
                for i in 0..m {
                    let drow = &mut buf[i * n..(i + 1) * n];
                    for j in 0..n {
                        drow[j] += g[i] * x[j];
                    }
                }
            });
            sinks.add(1, |buf| {
                for i in 0..m {
                    let row = &w[i * n..(i + 1) * n];
                    for j in 0..n {
                        buf[j] += g[i] * row[j];
                    }
                }
            });
        })
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", shape)));
        }
        let (r, c) = (shape[0], shape[1]);
        let x = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        Tensor::from_op(&[self], vec![c, r], out, move |g, sinks| {
            sinks.add(0, |buf| {
                for i in 0..r {
                    for j in 0..c {
                        buf[i * c + j] += g[j * r + i];
                    }
                }
            });
        })
    }

    /// Reinterpret the same row-major data under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        Tensor::from_op(&[self], shape.to_vec(), self.data().to_vec(), |g, sinks| {
            sinks.add(0, |buf| {
                for (d, &gi) in buf.iter_mut().zip(g) {
                    *d += gi;
                }
            });
        })
    }

    /// Concatenate along axis 0. All parts must agree on the trailing axes.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs".to_string()))?;
        let tail = &first.shape()[1..];
        let mut rows = 0;
        for p in parts {
            if &p.shape()[1..] != tail {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", p.shape(), first.shape()),
                ));
            }
            rows += p.shape()[0];
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        let mut data = Vec::with_capacity(shape.iter().product());
        let mut offsets = Vec::with_capacity(parts.len());
        for p in parts {
            offsets.push(data.len());
            data.extend_from_slice(p.data());
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        Tensor::from_op(parts, shape, data, move |g, sinks| {
            for (i, (&off, &len)) in offsets.iter().zip(&lens).enumerate() {
                sinks.add(i, |buf| {
                    for (d, &gi) in buf.iter_mut().zip(&g[off..off + len]) {
                        *d += gi;
                    }
                });
            }
        })
    }

    /// Stack `T` equal-length vectors as the columns of a `[d x T]` matrix.
    pub fn stack_columns(cols: &[&Tensor]) -> Result<Tensor> {
        let first = cols
            .first()
            .ok_or_else(|| Error::shape("stack_columns", "no inputs".to_string()))?;
        if first.shape().len() != 1 {
            return Err(Error::shape(
                "stack_columns",
                format!("expected vectors, got {:?}", first.shape()),
            ));
        }
        let d = first.len();
        let t_total = cols.len();
        for c in cols {
            if c.len() != d || c.shape().len() != 1 {
                return Err(Error::shape(
                    "stack_columns",
                    format!("{:?} vs {:?}", c.shape(), first.shape()),
                ));
            }
        }
        let mut data = vec![0.0; d * t_total];
        for (t, col) in cols.iter().enumerate() {
            for (i, &v) in col.data().iter().enumerate() {
                data[i * t_total + t] = v;
            }
        }
        Tensor::from_op(cols, vec![d, t_total], data, move |g, sinks| {
            for t in 0..t_total {
                sinks.add(t, |buf| {
                    for (i, d_i) in buf.iter_mut().enumerate() {
                        *d_i += g[i * t_total + t];
                    }
                });
            }
        })
    }

    /// Row-wise softmax of a 2-D tensor (normalizes across each row).
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::shape("softmax_rows", format!("{:?}", shape)));
        }
        let (r, c) = (shape[0], shape[1]);
        let x = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * c..(i + 1) * c];
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                orow[j] = e;
                z += e;
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        let y = out.clone();
        Tensor::from_op(&[self], vec![r, c], out, move |g, sinks| {
            sinks.add(0, |buf| {
                for i in 0..r {
                    let yrow = &y[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    let drow = &mut buf[i * c..(i + 1) * c];
                    for j in 0..c {
                        drow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            });
        })
    }

    /// Euclidean norm along the last axis, safeguarded as
    /// `sqrt(sum(x^2) + NORM_EPS)` so the gradient stays finite at zero.
    /// A 1-D input reduces to a scalar.
    pub fn vector_norm(&self) -> Tensor {
        let shape = self.shape();
        let c = *shape.last().expect("vector_norm on empty shape");
        let rows = self.len() / c;
        let x = self.data.clone();
        let mut out = vec![0.0; rows];
        for i in 0..rows {
            let row = &x[i * c..(i + 1) * c];
            let s: f64 = row.iter().map(|v| v * v).sum();
            out[i] = (s + NORM_EPS).sqrt();
        }
        let out_shape = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        let y = out.clone();
        Tensor::from_op(&[self], out_shape, out, move |g, sinks| {
            sinks.add(0, |buf| {
                for i in 0..rows {
                    let scale = g[i] / y[i];
                    let xrow = &x[i * c..(i + 1) * c];
                    let drow = &mut buf[i * c..(i + 1) * c];
                    for j in 0..c {
                        drow[j] += scale * xrow[j];
                    }
                }
            });
        })
        .expect("unary op cannot fail")
    }

    /// Scale each row of a `[r x c]` matrix by the matching entry of an
    /// `[r]` vector.
    pub fn scale_rows(&self, v: &Tensor) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 || v.shape().len() != 1 || v.len() != shape[0] {
            return Err(Error::shape(
                "scale_rows",
                format!("{:?} by {:?}", shape, v.shape()),
            ));
        }
        let (r, c) = (shape[0], shape[1]);
        let x = self.data.clone();
        let s = v.data.clone();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = x[i * c + j] * s[i];
            }
        }
        Tensor::from_op(&[self, v], vec![r, c], out, move |g, sinks| {
            sinks.add(0, |buf| {
                for i in 0..r {
                    for j in 0..c {
                        buf[i * c + j] += g[i * c + j] * s[i];
                    }
                }
            });
            sinks.add(1, |buf| {
                for i in 0..r {
                    let mut acc = 0.0;
                    for j in 0..c {
                        acc += g[i * c + j] * x[i * c + j];
                    }
                    buf[i] += acc;
                }
            });
        })
    }

    /// Scale each column of a `[r x c]` matrix by the matching entry of a
    /// `[c]` vector.
    pub fn scale_cols(&self, v: &Tensor) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 || v.shape().len() != 1 || v.len() != shape[1] {
            return Err(Error::shape(
                "scale_cols",
                format!("{:?} by {:?}", shape, v.shape()),
            ));
        }
        let (r, c) = (shape[0], shape[1]);
        let x = self.data.clone();
        let s = v.data.clone();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = x[i * c + j] * s[j];
            }
        }
        Tensor::from_op(&[self, v], vec![r, c], out, move |g, sinks| {
            sinks.add(0, |buf| {
                for i in 0..r {
                    for j in 0..c {
                        buf[i * c + j] += g[i * c + j] * s[j];
                    }
                }
            });
            sinks.add(1, |buf| {
                for i in 0..r {
                    for j in 0..c {
                        buf[j] += g[i * c + j] * x[i * c + j];
                    }
                }
            });
        })
    }
}
