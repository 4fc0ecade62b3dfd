//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! The tape records a fixed set of tensor operations (1-D convolution,
//! ReLU, temporal mean pooling, linear layers, matrix products,
//! elementwise arithmetic, exp/log/sqrt and row-broadcast helpers used for
//! normalization). Every operation appends a node; [`Tape::backward`] walks
//! the nodes in reverse and accumulates gradients into every input.
//!
//! ```
//! use trav_core::tape::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, -2.0, 3.0]));
//! let y = tape.square(x);
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss);
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    fn dims2(&self) -> (usize, usize) {
        assert_eq!(
            self.shape.len(),
            2,
            "expected rank-2 tensor, got {:?}",
            self.shape
        );
        (self.shape[0], self.shape[1])
    }

    fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(
            self.shape.len(),
            3,
            "expected rank-3 tensor, got {:?}",
            self.shape
        );
        (self.shape[0], self.shape[1], self.shape[2])
    }

    fn accumulate(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Recip(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    MeanLast(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMul(Var, Var),
    Transpose(Var),
    ColMean(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulConst(Var, Tensor),
    RowCosine {
        a: Var,
        reference: Vec<f64>,
        norms: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Norms below this are treated as zero by [`Tape::row_cosine`].
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[a.0].value;
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| f(x)).collect(),
        };
        self.push(value, op)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "elementwise shape mismatch");
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| x + k, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 / x, Op::Recip(a))
    }

    /// Elementwise clamp; the gradient is zero where the input lies outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.data.iter().sum::<f64>() / t.data.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let src = &self.nodes[a.0].value;
        assert_eq!(
            shape.iter().product::<usize>(),
            src.len(),
            "reshape size mismatch"
        );
        let value = Tensor {
            shape: shape.to_vec(),
            data: src.data.clone(),
        };
        self.push(value, Op::Reshape(a))
    }

    /// Same-padded 1-D convolution. `x: [B, Cin, T]`, `w: [Cout, Cin, K]` with
    /// odd `K`, `b: [Cout]`; output `[B, Cout, T]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let (batch, cin, len) = tx.dims3();
        let (cout, wcin, k) = tw.dims3();
        assert_eq!(cin, wcin, "conv1d channel mismatch");
        assert_eq!(tb.shape, vec![cout], "conv1d bias shape");
        assert!(k % 2 == 1, "conv1d kernel must be odd");
        let pad = k / 2;
        let mut out = vec![0.0; batch * cout * len];
        for bi in 0..batch {
            for o in 0..cout {
                let row = &mut out[(bi * cout + o) * len..(bi * cout + o + 1) * len];
                row.fill(tb.data[o]);
                for i in 0..cin {
                    let xrow = &tx.data[(bi * cin + i) * len..(bi * cin + i + 1) * len];
                    let wrow = &tw.data[(o * cin + i) * k..(o * cin + i + 1) * k];
                    for (kk, &wv) in wrow.iter().enumerate() {
                        let (dst, src) = shifted(row, xrow, kk as isize - pad as isize);
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(vec![batch, cout, len], out);
        self.push(value, Op::Conv1d { x, w, b, pad })
    }

    /// Mean over the last axis.
    pub fn mean_last(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let last = *t.shape.last().expect("mean_last on scalar");
        let data = t
            .data
            .chunks(last)
            .map(|c| c.iter().sum::<f64>() / last as f64)
            .collect();
        let shape = t.shape[..t.shape.len() - 1].to_vec();
        self.push(Tensor { shape, data }, Op::MeanLast(a))
    }

    /// `x: [N, In]`, `w: [Out, In]`, `b: [Out]` → `[N, Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let (n, inp) = tx.dims2();
        let (out_dim, winp) = tw.dims2();
        assert_eq!(inp, winp, "linear input mismatch");
        assert_eq!(tb.shape, vec![out_dim], "linear bias shape");
        let mut out = vec![0.0; n * out_dim];
        for r in 0..n {
            let xr = &tx.data[r * inp..(r + 1) * inp];
            for o in 0..out_dim {
                let wr = &tw.data[o * inp..(o + 1) * inp];
                out[r * out_dim + o] = tb.data[o] + dot(xr, wr);
            }
        }
        self.push(
            Tensor::from_vec(vec![n, out_dim], out),
            Op::Linear { x, w, b },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = matmul_raw(ta, tb);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = transpose_raw(&self.nodes[a.0].value);
        self.push(out, Op::Transpose(a))
    }

    /// Column means of `[N, D]` → `[D]`.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (n, d) = t.dims2();
        let mut out = vec![0.0; d];
        for row in t.data.chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        self.push(Tensor::from_vec(vec![d], out), Op::ColMean(a))
    }

    /// `[N, D] + [D]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, v: Var) -> Var {
        let (ta, tv) = (&self.nodes[a.0].value, &self.nodes[v.0].value);
        let (_, d) = ta.dims2();
        assert_eq!(tv.shape, vec![d], "add_row shape");
        let mut data = ta.data.clone();
        for row in data.chunks_mut(d) {
            for (x, y) in row.iter_mut().zip(&tv.data) {
                *x += y;
            }
        }
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        self.push(value, Op::AddRow(a, v))
    }

    /// `[N, D] * [D]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, v: Var) -> Var {
        let (ta, tv) = (&self.nodes[a.0].value, &self.nodes[v.0].value);
        let (_, d) = ta.dims2();
        assert_eq!(tv.shape, vec![d], "mul_row shape");
        let mut data = ta.data.clone();
        for row in data.chunks_mut(d) {
            for (x, y) in row.iter_mut().zip(&tv.data) {
                *x *= y;
            }
        }
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        self.push(value, Op::MulRow(a, v))
    }

    /// Elementwise product with a constant (no gradient flows into `c`).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let ta = &self.nodes[a.0].value;
        assert_eq!(ta.shape, c.shape, "mul_const shape");
        let data = ta.data.iter().zip(&c.data).map(|(x, y)| x * y).collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        self.push(value, Op::MulConst(a, c))
    }

    /// Cosine similarity of every row of `[N, D]` against a constant `[D]`
    /// vector. Rows (or a reference) with norm below [`COSINE_EPS`] yield 0
    /// and pass no gradient.
    pub fn row_cosine(&mut self, a: Var, reference: &[f64]) -> Var {
        let ta = &self.nodes[a.0].value;
        let (n, d) = ta.dims2();
        assert_eq!(reference.len(), d, "row_cosine reference length");
        let ref_norm = norm(reference);
        let mut out = vec![0.0; n];
        let mut norms = vec![0.0; n];
        for (r, row) in ta.data.chunks(d).enumerate() {
            let rn = norm(row);
            norms[r] = rn;
            if rn >= COSINE_EPS && ref_norm >= COSINE_EPS {
                out[r] = dot(row, reference) / (rn * ref_norm);
            }
        }
        let value = Tensor::from_vec(vec![n], out);
        self.push(
            value,
            Op::RowCosine {
                a,
                reference: reference.to_vec(),
                norms,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward needs a scalar loss"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&self.nodes[loss.0].value.shape, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let elementwise = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            // f(input, output, upstream)
            let ta = val(a);
            let data = ta
                .data
                .iter()
                .zip(&node.value.data)
                .zip(&g.data)
                .map(|((&x, &y), &gy)| f(x, y, gy))
                .collect();
            Tensor {
                shape: ta.shape.clone(),
                data,
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_grad(grads, *a, g.clone());
                add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_grad(grads, *a, g.clone());
                add_grad(grads, *b, map_tensor(g, |x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                add_grad(grads, *a, zip_tensor(g, tb, |x, y| x * y));
                add_grad(grads, *b, zip_tensor(g, ta, |x, y| x * y));
            }
            Op::Scale(a, k) => add_grad(grads, *a, map_tensor(g, |x| k * x)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = val(*a).shape.clone();
                add_grad(
                    grads,
                    *a,
                    Tensor {
                        shape,
                        data: g.data.clone(),
                    },
                );
            }
            Op::Relu(a) => add_grad(
                grads,
                *a,
                elementwise(*a, &|x, _, gy| if x > 0.0 { gy } else { 0.0 }),
            ),
            Op::Exp(a) => add_grad(grads, *a, elementwise(*a, &|_, y, gy| y * gy)),
            Op::Log(a) => add_grad(grads, *a, elementwise(*a, &|x, _, gy| gy / x)),
            Op::Sqrt(a) => add_grad(grads, *a, elementwise(*a, &|_, y, gy| gy * 0.5 / y)),
            Op::Square(a) => add_grad(grads, *a, elementwise(*a, &|x, _, gy| 2.0 * x * gy)),
            Op::Recip(a) => add_grad(grads, *a, elementwise(*a, &|_, y, gy| -gy * y * y)),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                add_grad(
                    grads,
                    *a,
                    elementwise(*a, &|x, _, gy| if x >= lo && x <= hi { gy } else { 0.0 }),
                )
            }
            Op::Sum(a) => {
                let ta = val(*a);
                add_grad(grads, *a, Tensor::full(&ta.shape, g.item()));
            }
            Op::Mean(a) => {
                let ta = val(*a);
                add_grad(
                    grads,
                    *a,
                    Tensor::full(&ta.shape, g.item() / ta.len() as f64),
                );
            }
            Op::Conv1d { x, w, b, pad } => {
                let (tx, tw) = (val(*x), val(*w));
                let (batch, cin, len) = tx.dims3();
                let (cout, _, k) = tw.dims3();
                let mut dx = Tensor::zeros(&tx.shape);
                let mut dw = Tensor::zeros(&tw.shape);
                let mut db = Tensor::zeros(&[cout]);
                for bi in 0..batch {
                    for o in 0..cout {
                        let grow = &g.data[(bi * cout + o) * len..(bi * cout + o + 1) * len];
                        db.data[o] += grow.iter().sum::<f64>();
                        for i in 0..cin {
                            let xoff = (bi * cin + i) * len;
                            let xrow = &tx.data[xoff..xoff + len];
                            let woff = (o * cin + i) * k;
                            for kk in 0..k {
                                let shift = kk as isize - *pad as isize;
                                let (gsrc, xsrc) = shifted_ro(grow, xrow, shift);
                                dw.data[woff + kk] += dot(gsrc, xsrc);
                                let wv = tw.data[woff + kk];
                                let dxrow = &mut dx.data[xoff..xoff + len];
                                let (gsrc, dxdst) = shifted_mut(grow, dxrow, shift);
                                for (d, gv) in dxdst.iter_mut().zip(gsrc) {
                                    *d += wv * gv;
                                }
                            }
                        }
                    }
                }
                add_grad(grads, *x, dx);
                add_grad(grads, *w, dw);
                add_grad(grads, *b, db);
            }
            Op::MeanLast(a) => {
                let ta = val(*a);
                let last = *ta.shape.last().unwrap();
                let mut data = Vec::with_capacity(ta.len());
                for &gv in &g.data {
                    data.extend(std::iter::repeat_n(gv / last as f64, last));
                }
                add_grad(
                    grads,
                    *a,
                    Tensor {
                        shape: ta.shape.clone(),
                        data,
                    },
                );
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (n, inp) = tx.dims2();
                let (out_dim, _) = tw.dims2();
                let mut dx = Tensor::zeros(&tx.shape);
                let mut dw = Tensor::zeros(&tw.shape);
                let mut db = Tensor::zeros(&[out_dim]);
                for r in 0..n {
                    let xr = &tx.data[r * inp..(r + 1) * inp];
                    let gr = &g.data[r * out_dim..(r + 1) * out_dim];
                    let dxr = &mut dx.data[r * inp..(r + 1) * inp];
                    for (o, &gv) in gr.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        db.data[o] += gv;
                        let wr = &tw.data[o * inp..(o + 1) * inp];
                        let dwr = &mut dw.data[o * inp..(o + 1) * inp];
                        for j in 0..inp {
                            dxr[j] += gv * wr[j];
                            dwr[j] += gv * xr[j];
                        }
                    }
                }
                add_grad(grads, *x, dx);
                add_grad(grads, *w, dw);
                add_grad(grads, *b, db);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                add_grad(grads, *a, matmul_raw(g, &transpose_raw(tb)));
                add_grad(grads, *b, matmul_raw(&transpose_raw(ta), g));
            }
            Op::Transpose(a) => add_grad(grads, *a, transpose_raw(g)),
            Op::ColMean(a) => {
                let ta = val(*a);
                let (n, d) = ta.dims2();
                let mut data = Vec::with_capacity(n * d);
                for _ in 0..n {
                    data.extend(g.data.iter().map(|x| x / n as f64));
                }
                add_grad(grads, *a, Tensor::from_vec(vec![n, d], data));
            }
            Op::AddRow(a, v) => {
                let d = val(*v).len();
                add_grad(grads, *a, g.clone());
                add_grad(grads, *v, col_sum(&g.data, d));
            }
            Op::MulRow(a, v) => {
                let (ta, tv) = (val(*a), val(*v));
                let d = tv.len();
                let mut ga = g.clone();
                for row in ga.data.chunks_mut(d) {
                    for (x, y) in row.iter_mut().zip(&tv.data) {
                        *x *= y;
                    }
                }
                let prod: Vec<f64> = g.data.iter().zip(&ta.data).map(|(x, y)| x * y).collect();
                add_grad(grads, *a, ga);
                add_grad(grads, *v, col_sum(&prod, d));
            }
            Op::MulConst(a, c) => add_grad(grads, *a, zip_tensor(g, c, |x, y| x * y)),
            Op::RowCosine {
                a,
                reference,
                norms,
            } => {
                let ta = val(*a);
                let (_, d) = ta.dims2();
                let ref_norm = norm(reference);
                let mut da = Tensor::zeros(&ta.shape);
                if ref_norm >= COSINE_EPS {
                    for (r, row) in ta.data.chunks(d).enumerate() {
                        let rn = norms[r];
                        if rn < COSINE_EPS {
                            continue;
                        }
                        let cos = node.value.data[r];
                        let gv = g.data[r];
                        let dst = &mut da.data[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] =
                                gv * (reference[j] / (rn * ref_norm) - cos * row[j] / (rn * rn));
                        }
                    }
                }
                add_grad(grads, *a, da);
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn add_grad(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.accumulate(&g),
        slot @ None => *slot = Some(g),
    }
}

fn map_tensor(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&x| f(x)).collect(),
    }
}

fn zip_tensor(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn col_sum(data: &[f64], d: usize) -> Tensor {
    let mut out = vec![0.0; d];
    for row in data.chunks(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::from_vec(vec![d], out)
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = a.dims2();
    let (k2, m) = b.dims2();
    assert_eq!(k, k2, "matmul inner dimension");
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b.data[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(vec![n, m], out)
}

pub(crate) fn transpose_raw(a: &Tensor) -> Tensor {
    let (n, m) = a.dims2();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a.data[i * m + j];
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

// dst[t] pairs with src[t + shift] for every t where both are in range.
fn shifted<'a, 'b>(dst: &'a mut [f64], src: &'b [f64], shift: isize) -> (&'a mut [f64], &'b [f64]) {
    let len = dst.len() as isize;
    let lo = (-shift).max(0);
    let hi = (len - shift).min(len);
    if lo >= hi {
        return (&mut dst[0..0], &src[0..0]);
    }
    (
        &mut dst[lo as usize..hi as usize],
        &src[(lo + shift) as usize..(hi + shift) as usize],
    )
}

fn shifted_ro<'a, 'b>(g: &'a [f64], src: &'b [f64], shift: isize) -> (&'a [f64], &'b [f64]) {
    let len = g.len() as isize;
    let lo = (-shift).max(0);
    let hi = (len - shift).min(len);
    if lo >= hi {
        return (&g[0..0], &src[0..0]);
    }
    (
        &g[lo as usize..hi as usize],
        &src[(lo + shift) as usize..(hi + shift) as usize],
    )
}

fn shifted_mut<'a, 'b>(
    g: &'a [f64],
    dst: &'b mut [f64],
    shift: isize,
) -> (&'a [f64], &'b mut [f64]) {
    let len = g.len() as isize;
    let lo = (-shift).max(0);
    let hi = (len - shift).min(len);
    if lo >= hi {
        return (&g[0..0], &mut dst[0..0]);
    }
    (
        &g[lo as usize..hi as usize],
        &mut dst[(lo + shift) as usize..(hi + shift) as usize],
    )
}
