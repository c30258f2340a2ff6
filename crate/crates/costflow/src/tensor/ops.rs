//! Differentiable primitives. Each op computes its forward result eagerly,
//! then (only when an operand is on a tape) records a closure implementing
//! the exact vector-Jacobian product. Kernels are plain loops over flat
//! buffers with fixed iteration order, so replaying a tape is bitwise
//! deterministic.

use std::rc::Rc;

use super::tape::{BackwardFn, NodeRef, Tape};
use super::{shape_err, DType, Result, Tensor, TensorError};

// ---- recording helper ----

fn common_dtype(inputs: &[&Tensor]) -> Result<DType> {
    let d = inputs[0].dtype();
    for t in &inputs[1..] {
        if t.dtype() != d {
            return Err(TensorError::DTypeMismatch(d, t.dtype()));
        }
    }
    Ok(d)
}

fn common_tape(inputs: &[&Tensor]) -> Result<Option<Tape>> {
    let mut tape: Option<Tape> = None;
    for t in inputs {
        if let Some(node) = t.node() {
            match &tape {
                None => tape = Some(node.tape.clone()),
                Some(existing) => {
                    if !existing.same_tape(&node.tape) {
                        return Err(TensorError::TapeMismatch);
                    }
                }
            }
        }
    }
    Ok(tape)
}

#[cfg(debug_assertions)]
fn debug_assert_finite(data: &[f64], op: &str) {
    for (i, v) in data.iter().enumerate() {
        assert!(
            v.is_finite(),
            "non-finite value {v} at index {i} produced by {op}"
        );
    }
}

#[cfg(not(debug_assertions))]
fn debug_assert_finite(_data: &[f64], _op: &str) {}

/// Builds the result tensor and, when gradients are required, records the
/// backward closure produced by `make_backward` (which receives the node ids
/// of the inputs, `None` for constants).
fn record(
    inputs: &[&Tensor],
    mut data: Vec<f64>,
    shape: &[usize],
    op: &str,
    make_backward: impl FnOnce(Vec<Option<usize>>) -> BackwardFn,
) -> Result<Tensor> {
    let dtype = common_dtype(inputs)?;
    let tape = common_tape(inputs)?;
    dtype.quantize_slice(&mut data);
    debug_assert_finite(&data, op);
    let out = Tensor::new(data, shape, dtype)?;
    match tape {
        None => Ok(out),
        Some(tape) => {
            let ids: Vec<Option<usize>> = inputs.iter().map(|t| t.node().map(|n| n.id)).collect();
            let f = make_backward(ids);
            let id = tape.push(Some(f));
            Ok(out.with_node(NodeRef { tape, id }))
        }
    }
}

// ---- broadcasting utilities ----

pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return shape_err(format!("cannot broadcast {:?} with {:?}", a, b));
        };
    }
    Ok(out)
}

pub(crate) fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Read strides for `shape` right-aligned against `out_shape`, with stride 0
/// on broadcast axes.
fn bcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides_for(shape);
    let off = out_shape.len() - shape.len();
    let mut s = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        s[off + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}

/// Flat offsets of every element of the broadcast view of `shape` laid out in
/// `out_shape` order.
fn bcast_offsets(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let strides = bcast_strides(shape, out_shape);
    let numel: usize = out_shape.iter().product();
    let mut offs = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..numel {
        offs.push(off);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    offs
}

// ---- elementwise binary ----

macro_rules! binary_op {
    ($name:ident, $fwd:expr, $grad_a:expr, $grad_b:expr) => {
        pub fn $name(&self, other: &Tensor) -> Result<Tensor> {
            let fwd = $fwd;
            let out_shape = broadcast_shapes(self.shape(), other.shape())?;
            let numel: usize = out_shape.iter().product();
            let same = self.shape() == other.shape();
            let (a, b) = (self.data_rc(), other.data_rc());
            let mut data = Vec::with_capacity(numel);
            let (offs_a, offs_b);
            if same {
                for i in 0..numel {
                    data.push(fwd(a[i], b[i]));
                }
                offs_a = Vec::new();
                offs_b = Vec::new();
            } else {
                offs_a = bcast_offsets(self.shape(), &out_shape);
                offs_b = bcast_offsets(other.shape(), &out_shape);
                for i in 0..numel {
                    data.push(fwd(a[offs_a[i]], b[offs_b[i]]));
                }
            }
            let (na, nb) = (a.len(), b.len());
            record(&[self, other], data, &out_shape, stringify!($name), move |ids| {
                Box::new(move |g, table| {
                    let ga = $grad_a;
                    let gb = $grad_b;
                    if let Some(id) = ids[0] {
                        table.accumulate(id, na, |buf| {
                            for i in 0..g.len() {
                                let o = if same { i } else { offs_a[i] };
                                buf[o] += ga(a[o], b[if same { i } else { offs_b[i] }], g[i]);
                            }
                        });
                    }
                    if let Some(id) = ids[1] {
                        table.accumulate(id, nb, |buf| {
                            for i in 0..g.len() {
                                let o = if same { i } else { offs_b[i] };
                                buf[o] += gb(a[if same { i } else { offs_a[i] }], b[o], g[i]);
                            }
                        });
                    }
                })
            })
        }
    };
}

impl Tensor {
    binary_op!(add, |x: f64, y: f64| x + y, |_a, _b, g: f64| g, |_a, _b, g: f64| g);
    binary_op!(sub, |x: f64, y: f64| x - y, |_a, _b, g: f64| g, |_a, _b, g: f64| -g);
    binary_op!(mul, |x: f64, y: f64| x * y, |_a, b: f64, g: f64| g * b, |a: f64, _b, g: f64| g * a);
    binary_op!(
        div,
        |x: f64, y: f64| x / y,
        |_a, b: f64, g: f64| g / b,
        |a: f64, b: f64, g: f64| -g * a / (b * b)
    );
}

// ---- elementwise unary ----

impl Tensor {
    /// Generic unary op; `df(x, y)` is dy/dx given input and output values.
    fn unary(
        &self,
        op: &str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let x = self.data_rc();
        let data: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let shape = self.shape_vec();
        let out = record(&[self], data, &shape, op, |ids| {
            let id = ids[0];
            let x = Rc::clone(&x);
            Box::new(move |g, table| {
                let Some(id) = id else { return };
                // output values are not captured; recompute df from x where
                // possible (callers that need y fold it into df via capture)
                table.accumulate(id, x.len(), |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * df(x[i], 0.0);
                    }
                });
            })
        })?;
        Ok(out)
    }

    /// Unary op whose derivative is cheapest in terms of the output value.
    fn unary_from_output(
        &self,
        op: &str,
        f: impl Fn(f64) -> f64,
        df_from_y: impl Fn(f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let dtype = self.dtype();
        let mut data: Vec<f64> = self.data().iter().map(|&v| f(v)).collect();
        dtype.quantize_slice(&mut data);
        let y = Rc::new(data.clone());
        let shape = self.shape_vec();
        record(&[self], data, &shape, op, |ids| {
            let id = ids[0];
            Box::new(move |g, table| {
                let Some(id) = id else { return };
                table.accumulate(id, y.len(), |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * df_from_y(y[i]);
                    }
                });
            })
        })
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary_from_output("sigmoid", |x| 1.0 / (1.0 + (-x).exp()), |y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary_from_output("tanh", |x| x.tanh(), |y| 1.0 - y * y)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary_from_output("sqrt", |x| x.sqrt(), |y| 0.5 / y)
    }

    pub fn abs(&self) -> Result<Tensor> {
        self.unary("abs", |x| x.abs(), |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.unary("scale", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }
}

// ---- matmul ----

/// c += a @ b with a:[m,k], b:[k,n].
pub(crate) fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += av * b_row[j];
            }
        }
    }
}

/// c += a @ bt^T with a:[m,k], bt:[n,k].
pub(crate) fn mm_nt(a: &[f64], bt: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &bt[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += a_row[p] * b_row[p];
            }
            c_row[j] += acc;
        }
    }
}

/// c += at^T @ b with at:[k,m], b:[k,n].
pub(crate) fn mm_tn(at: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = at[p * m + i];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                c_row[j] += av * b_row[j];
            }
        }
    }
}

struct BatchPlan {
    batches: usize,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
    lead_shape: Vec<usize>,
}

fn batch_plan(a_lead: &[usize], b_lead: &[usize], a_step: usize, b_step: usize) -> Result<BatchPlan> {
    let lead = broadcast_shapes(a_lead, b_lead)?;
    let batches: usize = lead.iter().product();
    let sa = bcast_strides(a_lead, &lead);
    let sb = bcast_strides(b_lead, &lead);
    let mut a_offsets = Vec::with_capacity(batches);
    let mut b_offsets = Vec::with_capacity(batches);
    let mut idx = vec![0usize; lead.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..batches {
        a_offsets.push(oa * a_step);
        b_offsets.push(ob * b_step);
        for d in (0..lead.len()).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < lead[d] {
                break;
            }
            oa -= sa[d] * lead[d];
            ob -= sb[d] * lead[d];
            idx[d] = 0;
        }
    }
    Ok(BatchPlan {
        batches,
        a_offsets,
        b_offsets,
        lead_shape: lead,
    })
}

impl Tensor {
    /// Batched matrix product `[.., m, k] @ [.., k, n] -> [.., m, n]` with
    /// broadcasting over leading axes.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() < 2 || other.rank() < 2 {
            return shape_err(format!(
                "matmul needs rank >= 2, got {:?} and {:?}",
                self.shape(),
                other.shape()
            ));
        }
        let (m, k) = (self.shape()[self.rank() - 2], self.shape()[self.rank() - 1]);
        let (kb, n) = (
            other.shape()[other.rank() - 2],
            other.shape()[other.rank() - 1],
        );
        if k != kb {
            return shape_err(format!(
                "matmul inner dims differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            ));
        }
        let plan = batch_plan(
            &self.shape()[..self.rank() - 2],
            &other.shape()[..other.rank() - 2],
            m * k,
            k * n,
        )?;
        let (a, b) = (self.data_rc(), other.data_rc());
        let mut data = vec![0.0; plan.batches * m * n];
        for bi in 0..plan.batches {
            mm_nn(
                &a[plan.a_offsets[bi]..plan.a_offsets[bi] + m * k],
                &b[plan.b_offsets[bi]..plan.b_offsets[bi] + k * n],
                &mut data[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut out_shape = plan.lead_shape.clone();
        out_shape.push(m);
        out_shape.push(n);
        let (na, nb) = (a.len(), b.len());
        record(&[self, other], data, &out_shape, "matmul", move |ids| {
            Box::new(move |g, table| {
                if let Some(id) = ids[0] {
                    table.accumulate(id, na, |buf| {
                        for bi in 0..plan.batches {
                            mm_nt(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &b[plan.b_offsets[bi]..plan.b_offsets[bi] + k * n],
                                &mut buf[plan.a_offsets[bi]..plan.a_offsets[bi] + m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    });
                }
                if let Some(id) = ids[1] {
                    table.accumulate(id, nb, |buf| {
                        for bi in 0..plan.batches {
                            mm_tn(
                                &a[plan.a_offsets[bi]..plan.a_offsets[bi] + m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut buf[plan.b_offsets[bi]..plan.b_offsets[bi] + k * n],
                                k,
                                m,
                                n,
                            );
                        }
                    });
                }
            })
        })
    }
}

impl Tensor {
    /// Batched product against a transposed right factor:
    /// `[.., m, k] @ [.., n, k]^T -> [.., m, n]` with broadcasting over
    /// leading axes. Equivalent to `matmul` after transposing `other`'s last
    /// two axes, without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() < 2 || other.rank() < 2 {
            return shape_err(format!(
                "matmul_nt needs rank >= 2, got {:?} and {:?}",
                self.shape(),
                other.shape()
            ));
        }
        let (m, k) = (self.shape()[self.rank() - 2], self.shape()[self.rank() - 1]);
        let (n, kb) = (
            other.shape()[other.rank() - 2],
            other.shape()[other.rank() - 1],
        );
        if k != kb {
            return shape_err(format!(
                "matmul_nt inner dims differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            ));
        }
        let plan = batch_plan(
            &self.shape()[..self.rank() - 2],
            &other.shape()[..other.rank() - 2],
            m * k,
            n * k,
        )?;
        let (a, b) = (self.data_rc(), other.data_rc());
        let mut data = vec![0.0; plan.batches * m * n];
        for bi in 0..plan.batches {
            mm_nt(
                &a[plan.a_offsets[bi]..plan.a_offsets[bi] + m * k],
                &b[plan.b_offsets[bi]..plan.b_offsets[bi] + n * k],
                &mut data[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut out_shape = plan.lead_shape.clone();
        out_shape.push(m);
        out_shape.push(n);
        let (na, nb) = (a.len(), b.len());
        record(&[self, other], data, &out_shape, "matmul_nt", move |ids| {
            Box::new(move |g, table| {
                if let Some(id) = ids[0] {
                    // dA = dC @ B
                    table.accumulate(id, na, |buf| {
                        for bi in 0..plan.batches {
                            mm_nn(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &b[plan.b_offsets[bi]..plan.b_offsets[bi] + n * k],
                                &mut buf[plan.a_offsets[bi]..plan.a_offsets[bi] + m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    });
                }
                if let Some(id) = ids[1] {
                    // dB = dC^T @ A
                    table.accumulate(id, nb, |buf| {
                        for bi in 0..plan.batches {
                            mm_tn(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &a[plan.a_offsets[bi]..plan.a_offsets[bi] + m * k],
                                &mut buf[plan.b_offsets[bi]..plan.b_offsets[bi] + n * k],
                                n,
                                m,
                                k,
                            );
                        }
                    });
                }
            })
        })
    }
}

// ---- softmax / layer norm ----

impl Tensor {
    /// Max-subtracted softmax over the last axis.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        if self.rank() == 0 {
            return shape_err("softmax needs rank >= 1");
        }
        let cols = self.shape()[self.rank() - 1];
        if cols == 0 {
            return shape_err("softmax over empty axis");
        }
        let rows = self.numel() / cols;
        let x = self.data_rc();
        let dtype = self.dtype();
        let mut data = vec![0.0; self.numel()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let out = &mut data[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..cols {
                let e = (row[j] - max).exp();
                out[j] = e;
                sum += e;
            }
            for v in out.iter_mut() {
                *v /= sum;
            }
        }
        dtype.quantize_slice(&mut data);
        let y = Rc::new(data.clone());
        let shape = self.shape_vec();
        record(&[self], data, &shape, "softmax_lastdim", |ids| {
            let id = ids[0];
            Box::new(move |g, table| {
                let Some(id) = id else { return };
                table.accumulate(id, y.len(), |buf| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = (0..cols).map(|j| yr[j] * gr[j]).sum();
                        let br = &mut buf[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            br[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            })
        })
    }

    /// Normalizes the last axis to zero mean, unit variance (population
    /// variance, `eps` inside the square root). No affine parameters.
    pub fn layer_norm_lastdim(&self, eps: f64) -> Result<Tensor> {
        if self.rank() == 0 {
            return shape_err("layer_norm needs rank >= 1");
        }
        let cols = self.shape()[self.rank() - 1];
        let rows = self.numel() / cols;
        let x = self.data_rc();
        let dtype = self.dtype();
        let mut data = vec![0.0; self.numel()];
        let mut invs = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            invs[r] = inv;
            for j in 0..cols {
                data[r * cols + j] = (row[j] - mean) * inv;
            }
        }
        dtype.quantize_slice(&mut data);
        let y = Rc::new(data.clone());
        let invs = Rc::new(invs);
        let shape = self.shape_vec();
        record(&[self], data, &shape, "layer_norm_lastdim", |ids| {
            let id = ids[0];
            Box::new(move |g, table| {
                let Some(id) = id else { return };
                table.accumulate(id, y.len(), |buf| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gm = gr.iter().sum::<f64>() / cols as f64;
                        let gym = (0..cols).map(|j| gr[j] * yr[j]).sum::<f64>() / cols as f64;
                        let br = &mut buf[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            br[j] += invs[r] * (gr[j] - gm - yr[j] * gym);
                        }
                    }
                });
            })
        })
    }
}

// ---- reductions ----

impl Tensor {
    pub fn sum_all(&self) -> Result<Tensor> {
        let total: f64 = self.data().iter().sum();
        let n = self.numel();
        record(&[self], vec![total], &[], "sum_all", |ids| {
            let id = ids[0];
            Box::new(move |g, table| {
                let Some(id) = id else { return };
                table.accumulate(id, n, |buf| {
                    for v in buf.iter_mut() {
                        *v += g[0];
                    }
                });
            })
        })
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return shape_err("mean of empty tensor");
        }
        self.sum_all()?.scale(1.0 / self.numel() as f64)
    }

    /// Sum over `axes`; reduced axes become size 1 when `keepdim`.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        self.reduce_axes(axes, keepdim, 1.0, "sum_axes")
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        let mut count = 1usize;
        for &a in axes {
            if a >= self.rank() {
                return shape_err(format!("axis {a} out of range for {:?}", self.shape()));
            }
            count *= self.shape()[a];
        }
        if count == 0 {
            return shape_err("mean over empty axes");
        }
        self.reduce_axes(axes, keepdim, 1.0 / count as f64, "mean_axes")
    }

    fn reduce_axes(&self, axes: &[usize], keepdim: bool, factor: f64, op: &str) -> Result<Tensor> {
        let rank = self.rank();
        let mut reduce = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return shape_err(format!("axis {a} out of range for {:?}", self.shape()));
            }
            reduce[a] = true;
        }
        let mut out_shape = Vec::new();
        let mut kept_shape = Vec::new(); // same rank, reduced axes = 1
        for d in 0..rank {
            kept_shape.push(if reduce[d] { 1 } else { self.shape()[d] });
            if reduce[d] {
                if keepdim {
                    out_shape.push(1);
                }
            } else {
                out_shape.push(self.shape()[d]);
            }
        }
        // map every input element to its output slot
        let offs = bcast_offsets(&kept_shape, self.shape());
        let out_numel: usize = kept_shape.iter().product();
        let x = self.data_rc();
        let mut data = vec![0.0; out_numel];
        for i in 0..x.len() {
            data[offs[i]] += x[i] * factor;
        }
        let n = x.len();
        record(&[self], data, &out_shape, op, move |ids| {
            let id = ids[0];
            Box::new(move |g, table| {
                let Some(id) = id else { return };
                table.accumulate(id, n, |buf| {
                    for i in 0..n {
                        buf[i] += g[offs[i]] * factor;
                    }
                });
            })
        })
    }
}

// ---- shape ops ----

impl Tensor {
    /// Reinterprets the flat buffer under a new shape (no copy).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return shape_err(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            ));
        }
        let mut out = Tensor {
            shape: Rc::new(shape.to_vec()),
            data: self.data_rc(),
            dtype: self.dtype(),
            node: None,
        };
        if let Some(node) = self.node() {
            let pid = node.id;
            let n = self.numel();
            let f: BackwardFn = Box::new(move |g, table| {
                table.accumulate(pid, n, |buf| {
                    for i in 0..n {
                        buf[i] += g[i];
                    }
                });
            });
            let id = node.tape.push(Some(f));
            out = out.with_node(NodeRef {
                tape: node.tape.clone(),
                id,
            });
        }
        Ok(out)
    }

    /// Reorders axes; `axes` is a permutation of `0..rank`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        if axes.len() != rank {
            return shape_err(format!("permute {:?} on rank {rank}", axes));
        }
        let mut seen = vec![false; rank];
        for &a in axes {
            if a >= rank || seen[a] {
                return shape_err(format!("invalid permutation {:?}", axes));
            }
            seen[a] = true;
        }
        let in_strides = strides_for(self.shape());
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        // stride in the input for each output axis
        let map_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let x = self.data_rc();
        let numel = self.numel();
        let mut src = Vec::with_capacity(numel);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..numel {
            src.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += map_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= map_strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        let data: Vec<f64> = src.iter().map(|&o| x[o]).collect();
        record(&[self], data, &out_shape, "permute", move |ids| {
            let id = ids[0];
            Box::new(move |g, table| {
                let Some(id) = id else { return };
                table.accumulate(id, numel, |buf| {
                    for i in 0..numel {
                        buf[src[i]] += g[i];
                    }
                });
            })
        })
    }

    /// Contiguous sub-range along one axis.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || start + len > self.shape()[axis] {
            return shape_err(format!(
                "slice axis {axis} [{start}..{}) of {:?}",
                start + len,
                self.shape()
            ));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let dim = self.shape()[axis];
        let x = self.data_rc();
        let mut out_shape = self.shape_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let n = x.len();
        record(&[self], data, &out_shape, "slice", move |ids| {
            let id = ids[0];
            Box::new(move |g, table| {
                let Some(id) = id else { return };
                table.accumulate(id, n, |buf| {
                    for o in 0..outer {
                        let base = (o * dim + start) * inner;
                        let gbase = o * len * inner;
                        for i in 0..len * inner {
                            buf[base + i] += g[gbase + i];
                        }
                    }
                });
            })
        })
    }

    /// Zero padding, `(before, after)` per axis.
    pub fn pad(&self, pads: &[(usize, usize)]) -> Result<Tensor> {
        if pads.len() != self.rank() {
            return shape_err(format!("pad spec {:?} on rank {}", pads, self.rank()));
        }
        let out_shape: Vec<usize> = self
            .shape()
            .iter()
            .zip(pads)
            .map(|(&d, &(b, a))| d + b + a)
            .collect();
        let out_strides = strides_for(&out_shape);
        let in_shape = self.shape_vec();
        let x = self.data_rc();
        let numel = self.numel();
        // flat output offset of each input element
        let mut dst = Vec::with_capacity(numel);
        let mut idx = vec![0usize; in_shape.len()];
        for _ in 0..numel {
            let mut off = 0usize;
            for d in 0..in_shape.len() {
                off += (idx[d] + pads[d].0) * out_strides[d];
            }
            dst.push(off);
            for d in (0..in_shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < in_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let mut data = vec![0.0; out_shape.iter().product()];
        for i in 0..numel {
            data[dst[i]] = x[i];
        }
        record(&[self], data, &out_shape, "pad", move |ids| {
            let id = ids[0];
            Box::new(move |g, table| {
                let Some(id) = id else { return };
                table.accumulate(id, numel, |buf| {
                    for i in 0..numel {
                        buf[i] += g[dst[i]];
                    }
                });
            })
        })
    }

    /// Materialized broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let out = broadcast_shapes(self.shape(), shape)?;
        if out != shape {
            return shape_err(format!(
                "cannot broadcast {:?} to {:?}",
                self.shape(),
                shape
            ));
        }
        let offs = bcast_offsets(self.shape(), shape);
        let x = self.data_rc();
        let data: Vec<f64> = offs.iter().map(|&o| x[o]).collect();
        let n = x.len();
        record(&[self], data, shape, "broadcast_to", move |ids| {
            let id = ids[0];
            Box::new(move |g, table| {
                let Some(id) = id else { return };
                table.accumulate(id, n, |buf| {
                    for i in 0..g.len() {
                        buf[offs[i]] += g[i];
                    }
                });
            })
        })
    }

    /// Concatenation along `axis`.
    pub fn concat(axis: usize, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return shape_err("concat of zero tensors");
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return shape_err(format!("concat axis {axis} on rank {rank}"));
        }
        for p in parts {
            if p.rank() != rank {
                return shape_err("concat rank mismatch");
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != parts[0].shape()[d] {
                    return shape_err(format!(
                        "concat shape mismatch: {:?} vs {:?}",
                        p.shape(),
                        parts[0].shape()
                    ));
                }
            }
        }
        let outer: usize = parts[0].shape()[..axis].iter().product();
        let inner: usize = parts[0].shape()[axis + 1..].iter().product();
        let dims: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = dims.iter().sum();
        let mut out_shape = parts[0].shape_vec();
        out_shape[axis] = total;
        let bufs: Vec<Rc<Vec<f64>>> = parts.iter().map(|p| p.data_rc()).collect();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (pi, buf) in bufs.iter().enumerate() {
                let chunk = dims[pi] * inner;
                data.extend_from_slice(&buf[o * chunk..(o + 1) * chunk]);
            }
        }
        let sizes: Vec<usize> = bufs.iter().map(|b| b.len()).collect();
        record(parts, data, &out_shape, "concat", move |ids| {
            Box::new(move |g, table| {
                let mut starts = vec![0usize; dims.len()];
                let mut acc = 0usize;
                for (pi, d) in dims.iter().enumerate() {
                    starts[pi] = acc;
                    acc += d;
                }
                for (pi, id) in ids.iter().enumerate() {
                    let Some(id) = *id else { continue };
                    let chunk = dims[pi] * inner;
                    table.accumulate(id, sizes[pi], |buf| {
                        for o in 0..outer {
                            let gbase = (o * total + starts[pi]) * inner;
                            let bbase = o * chunk;
                            for i in 0..chunk {
                                buf[bbase + i] += g[gbase + i];
                            }
                        }
                    });
                }
            })
        })
    }
}

// ---- structured ops: im2col, bilinear sampling, gathers, encodings ----

impl Tensor {
    /// Unfolds `[B, C, H, W]` into convolution columns
    /// `[B, C*kh*kw, Hout*Wout]` with zero padding.
    pub fn im2col(&self, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Tensor> {
        if self.rank() != 4 {
            return shape_err(format!("im2col expects [B,C,H,W], got {:?}", self.shape()));
        }
        if stride == 0 {
            return shape_err("im2col stride must be positive");
        }
        let (bs, c, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return shape_err(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        let hout = (h + 2 * pad - kh) / stride + 1;
        let wout = (w + 2 * pad - kw) / stride + 1;
        let l = hout * wout;
        let rows = c * kh * kw;
        let x = self.data_rc();
        let mut data = vec![0.0; bs * rows * l];
        // per output position, flat input offset or usize::MAX for pad
        let mut src = vec![usize::MAX; rows * l];
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    for oy in 0..hout {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        for ox in 0..wout {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                src[row * l + oy * wout + ox] =
                                    (ci * h + iy as usize) * w + ix as usize;
                            }
                        }
                    }
                }
            }
        }
        for b in 0..bs {
            let xb = &x[b * c * h * w..(b + 1) * c * h * w];
            let ob = &mut data[b * rows * l..(b + 1) * rows * l];
            for (i, &s) in src.iter().enumerate() {
                if s != usize::MAX {
                    ob[i] = xb[s];
                }
            }
        }
        let src = Rc::new(src);
        let n = x.len();
        let plane = c * h * w;
        record(
            &[self],
            data,
            &[bs, rows, l],
            "im2col",
            move |ids| {
                let id = ids[0];
                Box::new(move |g, table| {
                    let Some(id) = id else { return };
                    table.accumulate(id, n, |buf| {
                        for b in 0..bs {
                            let gb = &g[b * rows * l..(b + 1) * rows * l];
                            let ib = &mut buf[b * plane..(b + 1) * plane];
                            for (i, &s) in src.iter().enumerate() {
                                if s != usize::MAX {
                                    ib[s] += gb[i];
                                }
                            }
                        }
                    });
                })
            },
        )
    }

    /// Bilinear sampling of `self: [B, C, H, W]` at `points: [B, N, 2]`
    /// (`x` column, `y` row), zero outside the map. Returns `[B, N, C]` and
    /// is differentiable w.r.t. both the map and the points.
    pub fn bilinear_sample(&self, points: &Tensor) -> Result<Tensor> {
        if self.rank() != 4 {
            return shape_err(format!(
                "bilinear_sample map expects [B,C,H,W], got {:?}",
                self.shape()
            ));
        }
        if points.rank() != 3 || points.shape()[2] != 2 || points.shape()[0] != self.shape()[0] {
            return shape_err(format!(
                "bilinear_sample points expect [B,N,2] matching batch, got {:?}",
                points.shape()
            ));
        }
        let (bs, c, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        let n = points.shape()[1];
        let map = self.data_rc();
        let pts = points.data_rc();
        let fetch = |b: usize, ci: usize, y: isize, x: isize| -> f64 {
            if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                0.0
            } else {
                map[((b * c + ci) * h + y as usize) * w + x as usize]
            }
        };
        let mut data = vec![0.0; bs * n * c];
        for b in 0..bs {
            for i in 0..n {
                let px = pts[(b * n + i) * 2];
                let py = pts[(b * n + i) * 2 + 1];
                let x0 = px.floor();
                let y0 = py.floor();
                let fx = px - x0;
                let fy = py - y0;
                let (xi, yi) = (x0 as isize, y0 as isize);
                for ci in 0..c {
                    let v00 = fetch(b, ci, yi, xi);
                    let v01 = fetch(b, ci, yi, xi + 1);
                    let v10 = fetch(b, ci, yi + 1, xi);
                    let v11 = fetch(b, ci, yi + 1, xi + 1);
                    data[(b * n + i) * c + ci] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                        + fy * ((1.0 - fx) * v10 + fx * v11);
                }
            }
        }
        let nmap = map.len();
        let npts = pts.len();
        record(
            &[self, points],
            data,
            &[bs, n, c],
            "bilinear_sample",
            move |ids| {
                let map_id = ids[0];
                let pts_id = ids[1];
                Box::new(move |g, table| {
                    let fetch = |b: usize, ci: usize, y: isize, x: isize| -> f64 {
                        if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                            0.0
                        } else {
                            map[((b * c + ci) * h + y as usize) * w + x as usize]
                        }
                    };
                    if let Some(id) = map_id {
                        table.accumulate(id, nmap, |buf| {
                            let mut put = |b: usize, ci: usize, y: isize, x: isize, v: f64| {
                                if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
                                    buf[((b * c + ci) * h + y as usize) * w + x as usize] += v;
                                }
                            };
                            for b in 0..bs {
                                for i in 0..n {
                                    let px = pts[(b * n + i) * 2];
                                    let py = pts[(b * n + i) * 2 + 1];
                                    let x0 = px.floor();
                                    let y0 = py.floor();
                                    let fx = px - x0;
                                    let fy = py - y0;
                                    let (xi, yi) = (x0 as isize, y0 as isize);
                                    for ci in 0..c {
                                        let go = g[(b * n + i) * c + ci];
                                        put(b, ci, yi, xi, go * (1.0 - fy) * (1.0 - fx));
                                        put(b, ci, yi, xi + 1, go * (1.0 - fy) * fx);
                                        put(b, ci, yi + 1, xi, go * fy * (1.0 - fx));
                                        put(b, ci, yi + 1, xi + 1, go * fy * fx);
                                    }
                                }
                            }
                        });
                    }
                    if let Some(id) = pts_id {
                        table.accumulate(id, npts, |buf| {
                            for b in 0..bs {
                                for i in 0..n {
                                    let px = pts[(b * n + i) * 2];
                                    let py = pts[(b * n + i) * 2 + 1];
                                    let x0 = px.floor();
                                    let y0 = py.floor();
                                    let fx = px - x0;
                                    let fy = py - y0;
                                    let (xi, yi) = (x0 as isize, y0 as isize);
                                    let (mut gx, mut gy) = (0.0, 0.0);
                                    for ci in 0..c {
                                        let go = g[(b * n + i) * c + ci];
                                        let v00 = fetch(b, ci, yi, xi);
                                        let v01 = fetch(b, ci, yi, xi + 1);
                                        let v10 = fetch(b, ci, yi + 1, xi);
                                        let v11 = fetch(b, ci, yi + 1, xi + 1);
                                        gx += go * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                                        gy += go * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                                    }
                                    buf[(b * n + i) * 2] += gx;
                                    buf[(b * n + i) * 2 + 1] += gy;
                                }
                            }
                        });
                    }
                })
            },
        )
    }

    /// Row gather: `self: [B, n, C]`, `idx: [B][m]` -> `[B, m, C]`.
    pub fn gather_rows(&self, idx: &[usize], m: usize) -> Result<Tensor> {
        if self.rank() != 3 {
            return shape_err(format!("gather_rows expects [B,n,C], got {:?}", self.shape()));
        }
        let (bs, nrows, c) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if idx.len() != bs * m {
            return shape_err(format!(
                "gather_rows index count {} != B*m = {}",
                idx.len(),
                bs * m
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= nrows) {
            return shape_err(format!("gather_rows index {bad} out of range {nrows}"));
        }
        let x = self.data_rc();
        let mut data = Vec::with_capacity(bs * m * c);
        for b in 0..bs {
            for &r in &idx[b * m..(b + 1) * m] {
                let base = (b * nrows + r) * c;
                data.extend_from_slice(&x[base..base + c]);
            }
        }
        let idx = Rc::new(idx.to_vec());
        let n = x.len();
        record(&[self], data, &[bs, m, c], "gather_rows", move |ids| {
            let id = ids[0];
            Box::new(move |g, table| {
                let Some(id) = id else { return };
                table.accumulate(id, n, |buf| {
                    for b in 0..bs {
                        for (j, &r) in idx[b * m..(b + 1) * m].iter().enumerate() {
                            let src = (b * m + j) * c;
                            let dst = (b * nrows + r) * c;
                            for k in 0..c {
                                buf[dst + k] += g[src + k];
                            }
                        }
                    }
                });
            })
        })
    }

    /// 3x3 neighborhood with replicate clamping at borders:
    /// `[C, H, W]` -> `[C, 9, H, W]`, neighbor order row-major over
    /// `(dy, dx)` in `{-1,0,1}^2`.
    pub fn neighbors_3x3_clamped(&self) -> Result<Tensor> {
        if self.rank() != 3 {
            return shape_err(format!(
                "neighbors_3x3_clamped expects [C,H,W], got {:?}",
                self.shape()
            ));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let x = self.data_rc();
        let mut data = vec![0.0; c * 9 * h * w];
        let mut src = vec![0usize; 9 * h * w];
        for (ni, (dy, dx)) in (-1..=1)
            .flat_map(|dy| (-1..=1).map(move |dx| (dy, dx)))
            .enumerate()
        {
            for y in 0..h as isize {
                let sy = (y + dy).clamp(0, h as isize - 1) as usize;
                for xpos in 0..w as isize {
                    let sx = (xpos + dx).clamp(0, w as isize - 1) as usize;
                    src[(ni * h + y as usize) * w + xpos as usize] = sy * w + sx;
                }
            }
        }
        for ci in 0..c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            let out = &mut data[ci * 9 * h * w..(ci + 1) * 9 * h * w];
            for (i, &s) in src.iter().enumerate() {
                out[i] = plane[s];
            }
        }
        let src = Rc::new(src);
        let n = x.len();
        record(
            &[self],
            data,
            &[c, 9, h, w],
            "neighbors_3x3_clamped",
            move |ids| {
                let id = ids[0];
                Box::new(move |g, table| {
                    let Some(id) = id else { return };
                    table.accumulate(id, n, |buf| {
                        for ci in 0..c {
                            let gp = &g[ci * 9 * h * w..(ci + 1) * 9 * h * w];
                            let bp = &mut buf[ci * h * w..(ci + 1) * h * w];
                            for (i, &s) in src.iter().enumerate() {
                                bp[s] += gp[i];
                            }
                        }
                    });
                })
            },
        )
    }

    /// 2D sinusoidal positional encoding of points `[.., 2]` into `[.., dim]`.
    /// Per frequency `k`: `[sin(w_k x), cos(w_k x), sin(w_k y), cos(w_k y)]`
    /// with `w_k = 10000^(-4k/dim)`; `dim` must be divisible by 4.
    /// Differentiable w.r.t. the points.
    pub fn sincos_pe(&self, dim: usize) -> Result<Tensor> {
        if dim == 0 || dim % 4 != 0 {
            return shape_err(format!("positional encoding dim {dim} not divisible by 4"));
        }
        if self.rank() == 0 || self.shape()[self.rank() - 1] != 2 {
            return shape_err(format!("sincos_pe expects [.., 2], got {:?}", self.shape()));
        }
        let npts = self.numel() / 2;
        let pts = self.data_rc();
        let freqs: Vec<f64> = (0..dim / 4)
            .map(|k| 10000f64.powf(-4.0 * k as f64 / dim as f64))
            .collect();
        let mut data = vec![0.0; npts * dim];
        for i in 0..npts {
            let (x, y) = (pts[i * 2], pts[i * 2 + 1]);
            let out = &mut data[i * dim..(i + 1) * dim];
            for (k, &wk) in freqs.iter().enumerate() {
                let (sx, cx) = (wk * x).sin_cos();
                let (sy, cy) = (wk * y).sin_cos();
                out[4 * k] = sx;
                out[4 * k + 1] = cx;
                out[4 * k + 2] = sy;
                out[4 * k + 3] = cy;
            }
        }
        let mut out_shape = self.shape_vec();
        *out_shape.last_mut().unwrap() = dim;
        let freqs = Rc::new(freqs);
        let n = pts.len();
        record(&[self], data, &out_shape, "sincos_pe", move |ids| {
            let id = ids[0];
            Box::new(move |g, table| {
                let Some(id) = id else { return };
                table.accumulate(id, n, |buf| {
                    for i in 0..npts {
                        let (x, y) = (pts[i * 2], pts[i * 2 + 1]);
                        let gr = &g[i * dim..(i + 1) * dim];
                        let (mut gx, mut gy) = (0.0, 0.0);
                        for (k, &wk) in freqs.iter().enumerate() {
                            let (sx, cx) = (wk * x).sin_cos();
                            let (sy, cy) = (wk * y).sin_cos();
                            gx += wk * (gr[4 * k] * cx - gr[4 * k + 1] * sx);
                            gy += wk * (gr[4 * k + 2] * cy - gr[4 * k + 3] * sy);
                        }
                        buf[i * 2] += gx;
                        buf[i * 2 + 1] += gy;
                    }
                });
            })
        })
    }
}
