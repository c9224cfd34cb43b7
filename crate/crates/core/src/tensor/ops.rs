//! Forward and adjoint rules for every primitive the model needs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{lanes_of, numel_of, Mode, Tape, Tensor, TensorError};
use crate::scalar::{cast, Scalar};

/// How the operand shapes of an elementwise binary op line up.
enum Broadcast {
    /// Identical shapes.
    Same,
    /// Rhs shape is a suffix of lhs shape; rhs tiles over leading axes.
    RhsSuffix,
    /// Lhs shape is a suffix of rhs shape.
    LhsSuffix,
}

fn broadcast_kind(
    op: &'static str,
    lhs: &[usize],
    rhs: &[usize],
) -> Result<Broadcast, TensorError> {
    if lhs == rhs {
        return Ok(Broadcast::Same);
    }
    if rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        return Ok(Broadcast::RhsSuffix);
    }
    if lhs.len() <= rhs.len() && rhs[rhs.len() - lhs.len()..] == *lhs {
        return Ok(Broadcast::LhsSuffix);
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

/// Reduces a full-shape gradient onto a suffix-broadcast operand.
fn reduce_to_suffix<T: Scalar>(grad: &[T], small_len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); small_len];
    for chunk in grad.chunks(small_len) {
        for (o, g) in out.iter_mut().zip(chunk) {
            *o += *g;
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    fn require_rank(
        &self,
        op: &'static str,
        t: &Tensor<T>,
        rank: usize,
    ) -> Result<Vec<usize>, TensorError> {
        let shape = t.shape();
        if shape.len() != rank {
            return Err(TensorError::InvalidShape {
                op,
                shape,
                reason: format!("expected rank {rank}"),
            });
        }
        Ok(shape)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let sa = self.require_rank("matmul", a, 2)?;
        let sb = self.require_rank("matmul", b, 2)?;
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        if sb[0] != k {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut out = vec![T::zero(); m * n];
        a.with_data(|ad| {
            b.with_data(|bd| {
                for i in 0..m {
                    for kk in 0..k {
                        let aik = ad[i * k + kk];
                        if aik == T::zero() {
                            continue;
                        }
                        let brow = &bd[kk * n..(kk + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for (o, bv) in orow.iter_mut().zip(brow) {
                            *o += aik * *bv;
                        }
                    }
                }
            })
        });
        let out = Tensor::from_parts(vec![m, n], out, self.wants_grad(&[a, b]));
        if out.requires_grad() {
            let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
            self.push(
                out.clone(),
                Box::new(move || {
                    let go = o2.grad_snapshot().expect("matmul output grad");
                    if a2.requires_grad() {
                        // dA = G . B^T
                        let mut da = vec![T::zero(); m * k];
                        b2.with_data(|bd| {
                            for i in 0..m {
                                for kk in 0..k {
                                    let mut acc = T::zero();
                                    for j in 0..n {
                                        acc += go[i * n + j] * bd[kk * n + j];
                                    }
                                    da[i * k + kk] = acc;
                                }
                            }
                        });
                        a2.accum_grad(&da);
                    }
                    if b2.requires_grad() {
                        // dB = A^T . G
                        let mut db = vec![T::zero(); k * n];
                        a2.with_data(|ad| {
                            for i in 0..m {
                                for kk in 0..k {
                                    let aik = ad[i * k + kk];
                                    if aik == T::zero() {
                                        continue;
                                    }
                                    let grow = &go[i * n..(i + 1) * n];
                                    let drow = &mut db[kk * n..(kk + 1) * n];
                                    for (d, g) in drow.iter_mut().zip(grow) {
                                        *d += aik * *g;
                                    }
                                }
                            }
                        });
                        b2.accum_grad(&db);
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Rank-2 transpose.
    pub fn transpose(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let s = self.require_rank("transpose", x, 2)?;
        let (m, n) = (s[0], s[1]);
        let mut out = vec![T::zero(); m * n];
        x.with_data(|xd| {
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = xd[i * n + j];
                }
            }
        });
        let out = Tensor::from_parts(vec![n, m], out, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.push(
                out.clone(),
                Box::new(move || {
                    let go = o2.grad_snapshot().expect("transpose output grad");
                    let mut dx = vec![T::zero(); m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = go[j * m + i];
                        }
                    }
                    x2.accum_grad(&dx);
                }),
            );
        }
        Ok(out)
    }

    fn binary_elementwise(
        &self,
        op: &'static str,
        a: &Tensor<T>,
        b: &Tensor<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, bool), TensorError> {
        // Normalized so that the possibly-broadcast operand is `b`.
        let (sa, sb) = (a.shape(), b.shape());
        let kind = broadcast_kind(op, &sa, &sb)?;
        let (big, small, swapped) = match kind {
            Broadcast::Same | Broadcast::RhsSuffix => (a, b, false),
            Broadcast::LhsSuffix => (b, a, true),
        };
        let small_len = small.numel().max(1);
        let out_shape = big.shape();
        let mut out = vec![T::zero(); big.numel()];
        big.with_data(|bd| {
            small.with_data(|sd| {
                for (i, o) in out.iter_mut().enumerate() {
                    let (x, y) = (bd[i], sd[i % small_len]);
                    *o = if swapped { f(y, x) } else { f(x, y) };
                }
            })
        });
        Ok((
            Tensor::from_parts(out_shape, out, self.wants_grad(&[a, b])),
            swapped,
        ))
    }

    /// Elementwise sum; the smaller operand may broadcast over leading axes.
    pub fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (out, swapped) = self.binary_elementwise("add", a, b, |x, y| x + y)?;
        if out.requires_grad() {
            let (big, small) = if swapped {
                (b.clone(), a.clone())
            } else {
                (a.clone(), b.clone())
            };
            let o2 = out.clone();
            self.push(
                out.clone(),
                Box::new(move || {
                    let go = o2.grad_snapshot().expect("add output grad");
                    if big.requires_grad() {
                        big.accum_grad(&go);
                    }
                    if small.requires_grad() {
                        small.accum_grad(&reduce_to_suffix(&go, small.numel()));
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (out, swapped) = self.binary_elementwise("mul", a, b, |x, y| x * y)?;
        if out.requires_grad() {
            let (big, small) = if swapped {
                (b.clone(), a.clone())
            } else {
                (a.clone(), b.clone())
            };
            let o2 = out.clone();
            self.push(
                out.clone(),
                Box::new(move || {
                    let go = o2.grad_snapshot().expect("mul output grad");
                    let small_len = small.numel().max(1);
                    if big.requires_grad() {
                        let mut dbig = vec![T::zero(); go.len()];
                        small.with_data(|sd| {
                            for (i, d) in dbig.iter_mut().enumerate() {
                                *d = go[i] * sd[i % small_len];
                            }
                        });
                        big.accum_grad(&dbig);
                    }
                    if small.requires_grad() {
                        let mut dsmall = vec![T::zero(); small_len];
                        big.with_data(|bd| {
                            for (i, g) in go.iter().enumerate() {
                                dsmall[i % small_len] += *g * bd[i];
                            }
                        });
                        small.accum_grad(&dsmall);
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Multiplication by a compile-time constant (not a tape value).
    pub fn scalar_mul(&self, x: &Tensor<T>, c: T) -> Result<Tensor<T>, TensorError> {
        let out: Vec<T> = x.with_data(|xd| xd.iter().map(|&v| v * c).collect());
        let out = Tensor::from_parts(x.shape(), out, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.push(
                out.clone(),
                Box::new(move || {
                    let go = o2.grad_snapshot().expect("scalar_mul output grad");
                    let dx: Vec<T> = go.iter().map(|&g| g * c).collect();
                    x2.accum_grad(&dx);
                }),
            );
        }
        Ok(out)
    }

    pub fn neg(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.scalar_mul(x, cast::<T>(-1.0))
    }

    pub fn sub(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let nb = self.neg(b)?;
        self.add(a, &nb)
    }

    fn unary(
        &self,
        x: &Tensor<T>,
        forward: impl Fn(T) -> T,
        // adjoint given (input value, output value, upstream grad)
        adjoint: impl Fn(T, T, T) -> T + 'static,
    ) -> Tensor<T> {
        let out: Vec<T> = x.with_data(|xd| xd.iter().map(|&v| forward(v)).collect());
        let out = Tensor::from_parts(x.shape(), out, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.push(
                out.clone(),
                Box::new(move || {
                    let go = o2.grad_snapshot().expect("unary output grad");
                    let dx: Vec<T> = x2.with_data(|xd| {
                        o2.with_data(|od| {
                            go.iter()
                                .enumerate()
                                .map(|(i, &g)| adjoint(xd[i], od[i], g))
                                .collect()
                        })
                    });
                    x2.accum_grad(&dx);
                }),
            );
        }
        out
    }

    pub fn tanh(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        Ok(self.unary(x, |v| v.tanh(), |_, y, g| (T::one() - y * y) * g))
    }

    pub fn relu(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        Ok(self.unary(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            |v, _, g| if v > T::zero() { g } else { T::zero() },
        ))
    }

    pub fn exp(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        Ok(self.unary(x, |v| v.exp(), |_, y, g| y * g))
    }

    pub fn log(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let bad = x.with_data(|xd| xd.iter().any(|v| *v <= T::zero()));
        if bad {
            return Err(TensorError::Domain {
                op: "log",
                reason: "input must be strictly positive".into(),
            });
        }
        Ok(self.unary(x, |v| v.ln(), |v, _, g| g / v))
    }

    pub fn sqrt(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let bad = x.with_data(|xd| xd.iter().any(|v| *v < T::zero()));
        if bad {
            return Err(TensorError::Domain {
                op: "sqrt",
                reason: "input must be non-negative".into(),
            });
        }
        let two = cast::<T>(2.0);
        Ok(self.unary(x, |v| v.sqrt(), move |_, y, g| g / (two * y)))
    }

    /// `1 / (x + eps)`; `eps > 0` keeps the op defined at `x == 0`.
    pub fn recip_eps(&self, x: &Tensor<T>, eps: f64) -> Result<Tensor<T>, TensorError> {
        let e = cast::<T>(eps);
        Ok(self.unary(
            x,
            move |v| T::one() / (v + e),
            |_, y, g| -(y * y) * g,
        ))
    }

    /// Replaces entries where `mask != 0` with `value`; mask is a constant.
    pub fn masked_fill(
        &self,
        x: &Tensor<T>,
        mask: &Tensor<T>,
        value: T,
    ) -> Result<Tensor<T>, TensorError> {
        if x.shape() != mask.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                lhs: x.shape(),
                rhs: mask.shape(),
            });
        }
        let out: Vec<T> = x.with_data(|xd| {
            mask.with_data(|md| {
                xd.iter()
                    .zip(md)
                    .map(|(&v, &m)| if m != T::zero() { value } else { v })
                    .collect()
            })
        });
        let out = Tensor::from_parts(x.shape(), out, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, m2, o2) = (x.clone(), mask.clone(), out.clone());
            self.push(
                out.clone(),
                Box::new(move || {
                    let go = o2.grad_snapshot().expect("masked_fill output grad");
                    let dx: Vec<T> = m2.with_data(|md| {
                        go.iter()
                            .zip(md)
                            .map(|(&g, &m)| if m != T::zero() { T::zero() } else { g })
                            .collect()
                    });
                    x2.accum_grad(&dx);
                }),
            );
        }
        Ok(out)
    }

    /// Row gather (embedding lookup). Rank-2 input gathers rows; rank-1 input
    /// gathers elements.
    pub fn gather_rows(&self, x: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>, TensorError> {
        let shape = x.shape();
        let (rows, cols) = match shape.len() {
            1 => (shape[0], 1usize),
            2 => (shape[0], shape[1]),
            _ => {
                return Err(TensorError::InvalidShape {
                    op: "gather_rows",
                    shape,
                    reason: "expected rank 1 or 2".into(),
                })
            }
        };
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: id,
                    bound: rows,
                });
            }
        }
        let mut out = vec![T::zero(); ids.len() * cols];
        x.with_data(|xd| {
            for (r, &id) in ids.iter().enumerate() {
                out[r * cols..(r + 1) * cols].copy_from_slice(&xd[id * cols..(id + 1) * cols]);
            }
        });
        let out_shape = if shape.len() == 1 {
            vec![ids.len()]
        } else {
            vec![ids.len(), cols]
        };
        let out = Tensor::from_parts(out_shape, out, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            let ids = ids.to_vec();
            let total = rows * cols;
            self.push(
                out.clone(),
                Box::new(move || {
                    let go = o2.grad_snapshot().expect("gather_rows output grad");
                    let mut dx = vec![T::zero(); total];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            dx[id * cols + c] += go[r * cols + c];
                        }
                    }
                    x2.accum_grad(&dx);
                }),
            );
        }
        Ok(out)
    }

    /// Extracts one element (row-major flat index) as a scalar tensor.
    pub fn select(&self, x: &Tensor<T>, flat_index: usize) -> Result<Tensor<T>, TensorError> {
        let n = x.numel();
        if flat_index >= n {
            return Err(TensorError::IndexOutOfBounds {
                op: "select",
                index: flat_index,
                bound: n,
            });
        }
        let v = x.with_data(|xd| xd[flat_index]);
        let out = Tensor::from_parts(vec![], vec![v], self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.push(
                out.clone(),
                Box::new(move || {
                    let g = o2.grad_snapshot().expect("select output grad")[0];
                    let mut dx = vec![T::zero(); n];
                    dx[flat_index] = g;
                    x2.accum_grad(&dx);
                }),
            );
        }
        Ok(out)
    }

    /// Concatenation along `axis`; every other dimension must agree.
    pub fn concat(&self, xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "no inputs".into(),
            });
        }
        let first = xs[0].shape();
        if axis >= first.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut axis_lens = Vec::with_capacity(xs.len());
        for x in xs {
            let s = x.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s,
                });
            }
            axis_lens.push(s[axis]);
        }
        let total_axis: usize = axis_lens.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![T::zero(); numel_of(&out_shape)];
        let mut axis_offset = 0usize;
        for (x, &alen) in xs.iter().zip(&axis_lens) {
            x.with_data(|xd| {
                for o in 0..outer {
                    let src = &xd[o * alen * inner..(o + 1) * alen * inner];
                    let dst_start = (o * total_axis + axis_offset) * inner;
                    out[dst_start..dst_start + alen * inner].copy_from_slice(src);
                }
            });
            axis_offset += alen;
        }
        let inputs: Vec<&Tensor<T>> = xs.to_vec();
        let out = Tensor::from_parts(out_shape, out, self.wants_grad(&inputs));
        if out.requires_grad() {
            let xs2: Vec<Tensor<T>> = xs.iter().map(|x| (*x).clone()).collect();
            let o2 = out.clone();
            self.push(
                out.clone(),
                Box::new(move || {
                    let go = o2.grad_snapshot().expect("concat output grad");
                    let mut axis_offset = 0usize;
                    for (x, &alen) in xs2.iter().zip(&axis_lens) {
                        if x.requires_grad() {
                            let mut dx = vec![T::zero(); outer * alen * inner];
                            for o in 0..outer {
                                let src_start = (o * total_axis + axis_offset) * inner;
                                dx[o * alen * inner..(o + 1) * alen * inner]
                                    .copy_from_slice(&go[src_start..src_start + alen * inner]);
                            }
                            x.accum_grad(&dx);
                        }
                        axis_offset += alen;
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Same data, new shape (element counts must match).
    pub fn reshape(&self, x: &Tensor<T>, shape: Vec<usize>) -> Result<Tensor<T>, TensorError> {
        if numel_of(&shape) != x.numel() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("element count != {}", x.numel()),
            });
        }
        let out = Tensor::from_parts(shape, x.value(), self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.push(
                out.clone(),
                Box::new(move || {
                    let go = o2.grad_snapshot().expect("reshape output grad");
                    x2.accum_grad(&go);
                }),
            );
        }
        Ok(out)
    }

    fn reduce_axis(
        &self,
        op: &'static str,
        x: &Tensor<T>,
        axis: usize,
        mean: bool,
    ) -> Result<Tensor<T>, TensorError> {
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidShape {
                op,
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let (bases, stride, len) = lanes_of(&shape, axis);
        let scale = if mean {
            T::one() / cast::<T>(len as f64)
        } else {
            T::one()
        };
        let mut out = vec![T::zero(); bases.len()];
        x.with_data(|xd| {
            for (lane, &base) in bases.iter().enumerate() {
                let mut acc = T::zero();
                for t in 0..len {
                    acc += xd[base + t * stride];
                }
                out[lane] = acc * scale;
            }
        });
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out = Tensor::from_parts(out_shape, out, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            let n = x.numel();
            self.push(
                out.clone(),
                Box::new(move || {
                    let go = o2.grad_snapshot().expect("reduce output grad");
                    let mut dx = vec![T::zero(); n];
                    for (lane, &base) in bases.iter().enumerate() {
                        let g = go[lane] * scale;
                        for t in 0..len {
                            dx[base + t * stride] = g;
                        }
                    }
                    x2.accum_grad(&dx);
                }),
            );
        }
        Ok(out)
    }

    pub fn sum_axis(&self, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, TensorError> {
        self.reduce_axis("sum_axis", x, axis, false)
    }

    pub fn mean_axis(&self, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, TensorError> {
        self.reduce_axis("mean_axis", x, axis, true)
    }

    fn reduce_all(&self, x: &Tensor<T>, mean: bool) -> Tensor<T> {
        let n = x.numel();
        let scale = if mean {
            T::one() / cast::<T>(n as f64)
        } else {
            T::one()
        };
        let total = x.with_data(|xd| xd.iter().fold(T::zero(), |acc, &v| acc + v)) * scale;
        let out = Tensor::from_parts(vec![], vec![total], self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.push(
                out.clone(),
                Box::new(move || {
                    let g = o2.grad_snapshot().expect("reduce_all output grad")[0] * scale;
                    x2.accum_grad(&vec![g; n]);
                }),
            );
        }
        out
    }

    pub fn sum_all(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        Ok(self.reduce_all(x, false))
    }

    pub fn mean_all(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        Ok(self.reduce_all(x, true))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, TensorError> {
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidShape {
                op: "softmax",
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let (bases, stride, len) = lanes_of(&shape, axis);
        let mut out = vec![T::zero(); x.numel()];
        x.with_data(|xd| {
            for &base in &bases {
                let mut maxv = xd[base];
                for t in 1..len {
                    let v = xd[base + t * stride];
                    if v > maxv {
                        maxv = v;
                    }
                }
                let mut denom = T::zero();
                for t in 0..len {
                    let e = (xd[base + t * stride] - maxv).exp();
                    out[base + t * stride] = e;
                    denom += e;
                }
                for t in 0..len {
                    out[base + t * stride] /= denom;
                }
            }
        });
        let out = Tensor::from_parts(shape, out, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            let n = x.numel();
            self.push(
                out.clone(),
                Box::new(move || {
                    let go = o2.grad_snapshot().expect("softmax output grad");
                    let mut dx = vec![T::zero(); n];
                    o2.with_data(|yd| {
                        for &base in &bases {
                            let mut dot = T::zero();
                            for t in 0..len {
                                let i = base + t * stride;
                                dot += go[i] * yd[i];
                            }
                            for t in 0..len {
                                let i = base + t * stride;
                                dx[i] = yd[i] * (go[i] - dot);
                            }
                        }
                    });
                    x2.accum_grad(&dx);
                }),
            );
        }
        Ok(out)
    }

    /// Mean/variance normalization over the last axis, without gain.
    pub fn ln_norm(&self, x: &Tensor<T>, eps: f64) -> Result<Tensor<T>, TensorError> {
        let shape = x.shape();
        if shape.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "ln_norm",
                shape,
                reason: "expected rank >= 1".into(),
            });
        }
        let d = shape[shape.len() - 1];
        let rows = x.numel() / d;
        let e = cast::<T>(eps);
        let dd = cast::<T>(d as f64);
        let mut out = vec![T::zero(); x.numel()];
        let mut inv_stds = vec![T::zero(); rows];
        x.with_data(|xd| {
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dd;
                let var = row
                    .iter()
                    .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                    / dd;
                let inv = T::one() / (var + e).sqrt();
                inv_stds[r] = inv;
                for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                    *o = (v - mean) * inv;
                }
            }
        });
        let out = Tensor::from_parts(shape, out, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.push(
                out.clone(),
                Box::new(move || {
                    let go = o2.grad_snapshot().expect("ln_norm output grad");
                    let mut dx = vec![T::zero(); rows * d];
                    o2.with_data(|yd| {
                        for r in 0..rows {
                            let g = &go[r * d..(r + 1) * d];
                            let y = &yd[r * d..(r + 1) * d];
                            let mean_g = g.iter().fold(T::zero(), |a, &v| a + v) / dd;
                            let mean_gy = g
                                .iter()
                                .zip(y)
                                .fold(T::zero(), |a, (&gv, &yv)| a + gv * yv)
                                / dd;
                            for i in 0..d {
                                dx[r * d + i] =
                                    inv_stds[r] * (g[i] - mean_g - y[i] * mean_gy);
                            }
                        }
                    });
                    x2.accum_grad(&dx);
                }),
            );
        }
        Ok(out)
    }

    /// Classic layer norm with learnable gain and no bias; `gain` must match
    /// the last axis of `x`.
    pub fn layer_norm(
        &self,
        x: &Tensor<T>,
        gain: &Tensor<T>,
        eps: f64,
    ) -> Result<Tensor<T>, TensorError> {
        let xs = x.shape();
        let gs = gain.shape();
        if gs.len() != 1 || xs.is_empty() || gs[0] != xs[xs.len() - 1] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: xs,
                rhs: gs,
            });
        }
        let normed = self.ln_norm(x, eps)?;
        self.mul(&normed, gain)
    }

    /// Inverted dropout: train mode zeroes entries with probability `rate`
    /// and rescales survivors by `1/(1-rate)`; eval mode is the identity.
    pub fn dropout(
        &self,
        x: &Tensor<T>,
        rate: f64,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<T>, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidDropoutRate { rate });
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x.clone());
        }
        let keep_scale = cast::<T>(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..x.numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let out: Vec<T> =
            x.with_data(|xd| xd.iter().zip(&mask).map(|(&v, &m)| v * m).collect());
        let out = Tensor::from_parts(x.shape(), out, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.push(
                out.clone(),
                Box::new(move || {
                    let go = o2.grad_snapshot().expect("dropout output grad");
                    let dx: Vec<T> = go.iter().zip(&mask).map(|(&g, &m)| g * m).collect();
                    x2.accum_grad(&dx);
                }),
            );
        }
        Ok(out)
    }

    /// Cosine similarity of two equal-length vectors, rejecting zero norms.
    pub fn cosine_similarity(
        &self,
        u: &Tensor<T>,
        v: &Tensor<T>,
    ) -> Result<Tensor<T>, TensorError> {
        let su = self.require_rank("cosine_similarity", u, 1)?;
        let sv = self.require_rank("cosine_similarity", v, 1)?;
        if su != sv {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_similarity",
                lhs: su,
                rhs: sv,
            });
        }
        let zero_norm = |t: &Tensor<T>| t.with_data(|d| d.iter().all(|&x| x == T::zero()));
        if zero_norm(u) || zero_norm(v) {
            return Err(TensorError::ZeroNorm);
        }
        let uv = self.sum_all(&self.mul(u, v)?)?;
        let nu = self.sqrt(&self.sum_all(&self.mul(u, u)?)?)?;
        let nv = self.sqrt(&self.sum_all(&self.mul(v, v)?)?)?;
        let denom = self.mul(&nu, &nv)?;
        let inv = self.recip_eps(&denom, 0.0)?;
        self.mul(&uv, &inv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t(data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(data)
    }

    #[test]
    fn matmul_identity_fixed_point() {
        let tape = Tape::inference();
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let a = Tensor::new(vec![3, 3], vec![2., -1., 0.5, 3., 4., -2., 0., 7., 1.]).unwrap();
        let out = tape.matmul(&eye, &a).unwrap();
        assert_eq!(out.value(), a.value());
    }

    #[test]
    fn matmul_hand_case() {
        let tape = Tape::inference();
        let a = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![5., 6.]).unwrap();
        let out = tape.matmul(&a, &b).unwrap();
        assert_eq!(out.value(), vec![17., 39.]);
        assert_eq!(out.shape(), vec![2, 1]);
    }

    #[test]
    fn matmul_inner_dim_mismatch_named() {
        let tape: Tape<f64> = Tape::inference();
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 2]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 2]"));
    }

    #[test]
    fn tanh_odd_at_zero() {
        let tape: Tape<f64> = Tape::inference();
        let out = tape.tanh(&Tensor::zeros(vec![4])).unwrap();
        assert!(out.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_uniform_and_frozen_oracle() {
        let tape = Tape::inference();
        let z = tape.softmax(&t(vec![0.0; 5]), 0).unwrap();
        for v in z.value() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        // frozen high-precision oracle for softmax([1,2,3])
        let s = tape.softmax(&t(vec![1.0, 2.0, 3.0]), 0).unwrap().value();
        let expect = [0.09003057317038046, 0.24472847105479764, 0.6652409557748218];
        for (a, b) in s.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_shift_invariance_and_sum() {
        let tape = Tape::inference();
        let z = t(vec![0.3, -2.0, 1.7, 0.0]);
        let shifted = tape.scalar_mul(&z, 1.0).unwrap();
        shifted
            .copy_from_slice(&z.value().iter().map(|v| v + 123.456).collect::<Vec<_>>())
            .unwrap();
        let a = tape.softmax(&z, 0).unwrap().value();
        let b = tape.softmax(&shifted, 0).unwrap().value();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        let sum: f64 = a.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_frozen_oracle() {
        let tape = Tape::inference();
        let gain = Tensor::from_vec(vec![1.0, 1.0, 1.0]);
        let out = tape
            .layer_norm(&t(vec![2.0, 4.0, 6.0]), &gain, 1e-6)
            .unwrap()
            .value();
        let expect = [-1.2247446417519903, 0.0, 1.2247446417519903];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let tape = Tape::inference();
        let gain = Tensor::from_vec(vec![1.0, 1.0]);
        let out = tape
            .layer_norm(&t(vec![3.0, 3.0]), &gain, 1e-6)
            .unwrap()
            .value();
        assert!(out.iter().all(|&v| v == 0.0));
        let already = tape
            .layer_norm(&t(vec![1.0, -1.0]), &gain, 1e-6)
            .unwrap()
            .value();
        assert!((already[0] - 1.0).abs() < 1e-6 && (already[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn dropout_identities_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape = Tape::inference();
        let x = t(vec![1.0, 2.0, 3.0]);
        let eval = tape.dropout(&x, 0.1, Mode::Eval, &mut rng).unwrap();
        assert_eq!(eval.value(), x.value());
        let zero = tape.dropout(&x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(zero.value(), x.value());
        assert!(tape.dropout(&x, 1.0, Mode::Train, &mut rng).is_err());

        let ones = Tensor::from_parts(vec![100_000], vec![1.0f64; 100_000], false);
        let dropped = tape.dropout(&ones, 0.5, Mode::Train, &mut rng).unwrap();
        let mean: f64 = dropped.value().iter().sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn dropout_reproducible_given_seed() {
        let tape = Tape::inference();
        let x = Tensor::from_parts(vec![64], vec![1.0f64; 64], false);
        let a = tape
            .dropout(&x, 0.3, Mode::Train, &mut ChaCha8Rng::seed_from_u64(11))
            .unwrap();
        let b = tape
            .dropout(&x, 0.3, Mode::Train, &mut ChaCha8Rng::seed_from_u64(11))
            .unwrap();
        assert_eq!(a.value(), b.value());
    }

    #[test]
    fn cosine_cases() {
        let tape = Tape::inference();
        let p = t(vec![0.2, 0.5, 0.3]);
        let c = tape.cosine_similarity(&p, &p).unwrap().item();
        assert!((c - 1.0).abs() < 1e-12);
        let a = t(vec![1.0, 0.0, 0.0]);
        let b = t(vec![0.0, 1.0, 0.0]);
        assert_eq!(tape.cosine_similarity(&a, &b).unwrap().item(), 0.0);
        let u = t(vec![0.5, 0.5]);
        let v = t(vec![1.0, 0.0]);
        let c = tape.cosine_similarity(&u, &v).unwrap().item();
        assert!((c - 0.7071067811865475).abs() < 1e-12);
        let z = t(vec![0.0, 0.0]);
        assert!(matches!(
            tape.cosine_similarity(&z, &v),
            Err(TensorError::ZeroNorm)
        ));
    }

    #[test]
    fn log_domain_guard() {
        let tape = Tape::inference();
        assert!(tape.log(&t(vec![1.0, 0.0])).is_err());
        assert!(tape.log(&t(vec![1.0, 2.0])).is_ok());
        assert!(tape.sqrt(&t(vec![-1.0])).is_err());
    }

    #[test]
    fn broadcast_add_bias() {
        let tape = Tape::new();
        let x = Tensor::param(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::param(vec![3], vec![10., 20., 30.]).unwrap();
        let y = tape.add(&x, &b).unwrap();
        assert_eq!(y.value(), vec![11., 22., 33., 14., 25., 36.]);
        let loss = tape.sum_all(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(b.grad().unwrap(), vec![2., 2., 2.]);
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn scalar_broadcast_mul() {
        let tape = Tape::new();
        let x = Tensor::param(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let w = Tensor::param(vec![], vec![0.5]).unwrap();
        let y = tape.mul(&x, &w).unwrap();
        assert_eq!(y.value(), vec![0.5, 1.0, 1.5, 2.0]);
        let loss = tape.sum_all(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![10.0]);
    }

    #[test]
    fn concat_and_gather_roundtrip() {
        let tape = Tape::inference();
        let a = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![9., 8.]).unwrap();
        let c = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 3]);
        assert_eq!(c.value(), vec![1., 2., 9., 3., 4., 8.]);
        let rows = tape.gather_rows(&c, &[1, 0]).unwrap();
        assert_eq!(rows.value(), vec![3., 4., 8., 1., 2., 9.]);
        assert!(tape.gather_rows(&c, &[5]).is_err());
    }

    #[test]
    fn softmax_cross_entropy_grad_at_uniform_logits() {
        // Closed form: d/dz of -log softmax(z)_j at z = 0 is 1/V - e_j.
        let v = 8usize;
        let j = 3usize;
        let tape = Tape::new();
        let z = Tensor::param(vec![v], vec![0.0; v]).unwrap();
        let p = tape.softmax(&z, 0).unwrap();
        let pj = tape.select(&p, j).unwrap();
        let loss = tape.neg(&tape.log(&pj).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        let g = z.grad().unwrap();
        for (i, gi) in g.iter().enumerate() {
            let expect = if i == j { 1.0 / v as f64 - 1.0 } else { 1.0 / v as f64 };
            assert!((gi - expect).abs() < 1e-12, "i={i} {gi} vs {expect}");
        }
    }

    #[test]
    fn works_at_f32() {
        let tape: Tape<f32> = Tape::new();
        let x = Tensor::param(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let y = tape.softmax(&x, 0).unwrap();
        let s: f32 = y.value().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        let l = tape.sum_all(&tape.mul(&y, &y).unwrap()).unwrap();
        tape.backward(&l).unwrap();
        assert!(x.grad().is_some());
    }

    #[test]
    fn masked_fill_blocks_grad() {
        let tape = Tape::new();
        let x = Tensor::param(vec![3], vec![1., 2., 3.]).unwrap();
        let mask = Tensor::from_vec(vec![0.0, 1.0, 0.0]);
        let y = tape.masked_fill(&x, &mask, -5.0).unwrap();
        assert_eq!(y.value(), vec![1., -5., 3.]);
        let loss = tape.sum_all(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1., 0., 1.]);
    }
}
