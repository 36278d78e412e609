//! Reverse-mode autodiff on a Wengert tape of 2-D matrices.
//!
//! Forward ops append nodes to an arena; `backward` consumes the tape, walks
//! the arena in reverse applying vector-Jacobian products, and returns the
//! gradients. Matrices are row-major (rows, cols); a scalar is (1, 1).

/// Handle into the tape arena. Copyable, valid only for the tape it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

enum Op {
    /// Input or parameter; no inputs to propagate into.
    Leaf,
    Matmul(usize, usize),
    /// Broadcast-add a (1, m) row onto every row of an (n, m) matrix.
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    Silu(usize),
    /// (n, m) -> (1, m) column means.
    MeanRows(usize),
    ConcatCols(usize, usize),
    /// (n, m) -> (1, 1) sum of all entries.
    Sum(usize),
    /// Mean squared error against a constant target; scalar output.
    Mse(usize, Vec<f32>),
}

struct Node {
    op: Op,
    value: Vec<f32>,
    rows: usize,
    cols: usize,
    needs_grad: bool,
}

/// Gradients extracted by a backward pass, indexed by the original `Var`s.
pub struct Grads {
    grads: Vec<Option<Vec<f32>>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `v`. Panics if `v` did not require grad.
    pub fn get(&self, v: Var) -> &[f32] {
        self.grads[v.id].as_deref().expect("no gradient recorded for this var")
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, op: Op, value: Vec<f32>, rows: usize, cols: usize, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { op, value, rows, cols, needs_grad });
        Var { id: self.nodes.len() - 1, rows, cols }
    }

    fn leaf(&mut self, rows: usize, cols: usize, data: &[f32], needs_grad: bool) -> Var {
        assert_eq!(data.len(), rows * cols, "leaf data length mismatch");
        self.push(Op::Leaf, data.to_vec(), rows, cols, needs_grad)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, rows: usize, cols: usize, data: &[f32]) -> Var {
        self.leaf(rows, cols, data, false)
    }

    /// Trainable leaf; its gradient is available from the backward pass.
    pub fn param(&mut self, rows: usize, cols: usize, data: &[f32]) -> Var {
        self.leaf(rows, cols, data, true)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.id].value
    }

    fn needs(&self, a: usize) -> bool {
        self.nodes[a].needs_grad
    }

    /// (n, k) @ (k, m) -> (n, m).
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(a.cols, b.rows, "matmul inner dims {} vs {}", a.cols, b.rows);
        let (n, k, m) = (a.rows, a.cols, b.cols);
        let out = matmul_raw(&self.nodes[a.id].value, &self.nodes[b.id].value, n, k, m);
        let ng = self.needs(a.id) || self.needs(b.id);
        self.push(Op::Matmul(a.id, b.id), out, n, m, ng)
    }

    /// x + row, broadcasting the (1, m) row over each of x's n rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(row.rows, 1, "add_row expects a single-row rhs");
        assert_eq!(x.cols, row.cols, "add_row width mismatch");
        let r = &self.nodes[row.id].value;
        let out: Vec<f32> = self.nodes[x.id]
            .value
            .chunks_exact(x.cols)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&v, &b)| v + b))
            .collect();
        let ng = self.needs(x.id) || self.needs(row.id);
        self.push(Op::AddRow(x.id, row.id), out, x.rows, x.cols, ng)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Var {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "elementwise shape mismatch");
        let out = self.nodes[a.id]
            .value
            .iter()
            .zip(&self.nodes[b.id].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(a.id) || self.needs(b.id);
        self.push(op, out, a.rows, a.cols, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a.id, b.id))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a.id, b.id))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out = self.nodes[a.id].value.iter().map(|&x| x * c).collect();
        let ng = self.needs(a.id);
        self.push(Op::Scale(a.id, c), out, a.rows, a.cols, ng)
    }

    /// SiLU activation x * sigmoid(x).
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.id].value.iter().map(|&x| x * sigmoid(x)).collect();
        let ng = self.needs(a.id);
        self.push(Op::Silu(a.id), out, a.rows, a.cols, ng)
    }

    /// Column means over rows: (n, m) -> (1, m).
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (n, m) = (a.rows, a.cols);
        let mut out = vec![0.0f32; m];
        for row in self.nodes[a.id].value.chunks_exact(m) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f32;
        }
        let ng = self.needs(a.id);
        self.push(Op::MeanRows(a.id), out, 1, m, ng)
    }

    /// Horizontal concat: (n, p) | (n, q) -> (n, p+q).
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(a.rows, b.rows, "concat_cols row mismatch");
        let (n, p, q) = (a.rows, a.cols, b.cols);
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&self.nodes[a.id].value[i * p..(i + 1) * p]);
            out.extend_from_slice(&self.nodes[b.id].value[i * q..(i + 1) * q]);
        }
        let ng = self.needs(a.id) || self.needs(b.id);
        self.push(Op::ConcatCols(a.id, b.id), out, n, p + q, ng)
    }

    /// Sum of all entries; scalar output.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f32 = self.nodes[a.id].value.iter().sum();
        let ng = self.needs(a.id);
        self.push(Op::Sum(a.id), vec![s], 1, 1, ng)
    }

    /// Mean squared error of `a` against a constant target; scalar output.
    pub fn mse_loss(&mut self, a: Var, target: &[f32]) -> Var {
        assert_eq!(target.len(), a.rows * a.cols, "mse target length mismatch");
        let s: f64 = self.nodes[a.id]
            .value
            .iter()
            .zip(target)
            .map(|(&p, &t)| {
                let d = (p - t) as f64;
                d * d
            })
            .sum();
        let loss = (s / target.len() as f64) as f32;
        let ng = self.needs(a.id);
        self.push(Op::Mse(a.id, target.to_vec()), vec![loss], 1, 1, ng)
    }

    /// Affine layer x @ w + b with b broadcast per row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Reverse sweep from a scalar loss. Consumes the tape; gradients for
    /// grad-requiring leaves come back in `Grads`.
    pub fn backward(mut self, loss: Var) -> Grads {
        assert_eq!((loss.rows, loss.cols), (1, 1), "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);

        let add_into = |slot: &mut Option<Vec<f32>>, len: usize, f: &mut dyn FnMut(&mut [f32])| {
            let g = slot.get_or_insert_with(|| vec![0.0; len]);
            f(g);
        };

        for id in (0..n).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                // Leaf grads stay in their slots for Grads::get.
                continue;
            }
            let Some(dout) = grads[id].take() else { continue };
            let (rows, cols) = (self.nodes[id].rows, self.nodes[id].cols);
            // Replace the op to appease the borrow checker; values stay put.
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            match &op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (n_, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                    let m = cols;
                    if self.needs(*a) {
                        // dA = dOut @ B^T, as row dots so B is read contiguously.
                        let bv = &self.nodes[*b].value;
                        add_into(&mut grads[*a], n_ * k, &mut |g| {
                            for i in 0..n_ {
                                let drow = &dout[i * m..(i + 1) * m];
                                let grow = &mut g[i * k..(i + 1) * k];
                                for (p, gp) in grow.iter_mut().enumerate() {
                                    let brow = &bv[p * m..(p + 1) * m];
                                    let mut s = 0.0f32;
                                    for (d, b2) in drow.iter().zip(brow) {
                                        s += d * b2;
                                    }
                                    *gp += s;
                                }
                            }
                        });
                    }
                    if self.needs(*b) {
                        // dB = A^T @ dOut, as row axpys so neither side is transposed.
                        let av = &self.nodes[*a].value;
                        add_into(&mut grads[*b], k * m, &mut |g| {
                            for i in 0..n_ {
                                let drow = &dout[i * m..(i + 1) * m];
                                for p in 0..k {
                                    let aip = av[i * k + p];
                                    if aip == 0.0 {
                                        continue;
                                    }
                                    let grow = &mut g[p * m..(p + 1) * m];
                                    for (gp, d) in grow.iter_mut().zip(drow) {
                                        *gp += aip * d;
                                    }
                                }
                            }
                        });
                    }
                }
                Op::AddRow(x, r) => {
                    if self.needs(*x) {
                        add_into(&mut grads[*x], rows * cols, &mut |g| axpy(g, &dout));
                    }
                    if self.needs(*r) {
                        add_into(&mut grads[*r], cols, &mut |g| {
                            for chunk in dout.chunks_exact(cols) {
                                axpy(g, chunk);
                            }
                        });
                    }
                }
                Op::Add(a, b) => {
                    for &src in [a, b] {
                        if self.needs(src) {
                            add_into(&mut grads[src], rows * cols, &mut |g| axpy(g, &dout));
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        add_into(&mut grads[*a], rows * cols, &mut |g| axpy(g, &dout));
                    }
                    if self.needs(*b) {
                        add_into(&mut grads[*b], rows * cols, &mut |g| {
                            for (gi, &d) in g.iter_mut().zip(&dout) {
                                *gi -= d;
                            }
                        });
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let bv = &self.nodes[*b].value;
                        add_into(&mut grads[*a], rows * cols, &mut |g| {
                            for ((gi, &d), &y) in g.iter_mut().zip(&dout).zip(bv) {
                                *gi += d * y;
                            }
                        });
                    }
                    if self.needs(*b) {
                        let av = &self.nodes[*a].value;
                        add_into(&mut grads[*b], rows * cols, &mut |g| {
                            for ((gi, &d), &x) in g.iter_mut().zip(&dout).zip(av) {
                                *gi += d * x;
                            }
                        });
                    }
                }
                Op::Scale(a, c) => {
                    if self.needs(*a) {
                        add_into(&mut grads[*a], rows * cols, &mut |g| {
                            for (gi, &d) in g.iter_mut().zip(&dout) {
                                *gi += d * c;
                            }
                        });
                    }
                }
                Op::Silu(a) => {
                    if self.needs(*a) {
                        let av = &self.nodes[*a].value;
                        add_into(&mut grads[*a], rows * cols, &mut |g| {
                            for ((gi, &d), &x) in g.iter_mut().zip(&dout).zip(av) {
                                let s = sigmoid(x);
                                *gi += d * s * (1.0 + x * (1.0 - s));
                            }
                        });
                    }
                }
                Op::MeanRows(a) => {
                    if self.needs(*a) {
                        let src_rows = self.nodes[*a].rows;
                        let inv = 1.0 / src_rows as f32;
                        add_into(&mut grads[*a], src_rows * cols, &mut |g| {
                            for row in g.chunks_exact_mut(cols) {
                                for (gi, &d) in row.iter_mut().zip(&dout) {
                                    *gi += d * inv;
                                }
                            }
                        });
                    }
                }
                Op::ConcatCols(a, b) => {
                    let p = self.nodes[*a].cols;
                    let q = self.nodes[*b].cols;
                    if self.needs(*a) {
                        add_into(&mut grads[*a], rows * p, &mut |g| {
                            for (i, row) in g.chunks_exact_mut(p).enumerate() {
                                axpy(row, &dout[i * (p + q)..i * (p + q) + p]);
                            }
                        });
                    }
                    if self.needs(*b) {
                        add_into(&mut grads[*b], rows * q, &mut |g| {
                            for (i, row) in g.chunks_exact_mut(q).enumerate() {
                                axpy(row, &dout[i * (p + q) + p..(i + 1) * (p + q)]);
                            }
                        });
                    }
                }
                Op::Sum(a) => {
                    if self.needs(*a) {
                        let len = self.nodes[*a].value.len();
                        add_into(&mut grads[*a], len, &mut |g| {
                            for gi in g.iter_mut() {
                                *gi += dout[0];
                            }
                        });
                    }
                }
                Op::Mse(a, target) => {
                    if self.needs(*a) {
                        let av = &self.nodes[*a].value;
                        let coef = 2.0 * dout[0] / target.len() as f32;
                        add_into(&mut grads[*a], target.len(), &mut |g| {
                            for ((gi, &p), &t) in g.iter_mut().zip(av).zip(target) {
                                *gi += coef * (p - t);
                            }
                        });
                    }
                }
            }
        }

        Grads { grads }
    }
}

fn matmul_raw(a: &[f32], b: &[f32], n: usize, k: usize, m: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn axpy(dst: &mut [f32], src: &[f32]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
