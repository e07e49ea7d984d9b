//! Minimal reverse-mode automatic differentiation over row-major `f64` matrices.
//!
//! A [`Tape`] records every operation as a node holding its value. Calling
//! [`Tape::backward`] walks the nodes in reverse and accumulates adjoints.
//! Everything is double precision; the unrolled sampler and the spectral
//! losses are both built from these primitives so a single backward pass
//! reaches the predictor parameters through the whole reverse chain.

use std::sync::Arc;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Adds a constant tensor of the same shape.
    AddConst(Var),
    /// Elementwise product with a constant tensor of the same shape.
    MulConst(Var, Arc<Vec<f64>>),
    Silu(Var),
    /// `ln(a + offset)`
    LnOffset(Var, f64),
    Abs(Var),
    Square(Var),
    /// `sqrt(a^2 + b^2 + delta)`
    Hypot(Var, Var),
    /// `atan2(im, re)`
    Atan2 { im: Var, re: Var },
    /// Principal value in (-pi, pi]; gradient passes through unchanged.
    WrapPi(Var),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        cin: usize,
        kernel: usize,
    },
    /// `out[i] = a[idx[i]]`
    Gather(Var, Arc<Vec<usize>>),
    AvgPool(Var, usize),
    /// `a [r, k] x m [k, c]`, `m` constant.
    MatMulConst(Var, Arc<Vec<f64>>),
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`, `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_pi(x: f64) -> f64 {
    use std::f64::consts::PI;
    let mut d = x - 2.0 * PI * (x / (2.0 * PI)).round();
    if d > PI {
        d -= 2.0 * PI;
    }
    if d <= -PI {
        d += 2.0 * PI;
    }
    d
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
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

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input (parameter or constant) of shape `rows x cols`.
    pub fn leaf(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        assert_eq!(value.len(), rows * cols, "leaf shape mismatch");
        self.push(value, rows, cols, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "not a scalar node");
        n.value[0]
    }

    fn same_shape(&self, a: Var, b: Var) -> (usize, usize) {
        let sa = self.shape(a);
        assert_eq!(sa, self.shape(b), "elementwise shape mismatch");
        sa
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.same_shape(a, b);
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(v, r, c, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.same_shape(a, b);
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.push(v, r, c, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.same_shape(a, b);
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push(v, r, c, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| x * k).collect();
        self.push(v, r, c, Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: Var, k: &[f64]) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(k.len(), r * c, "constant shape mismatch");
        let v = self.value(a).iter().zip(k).map(|(x, y)| x + y).collect();
        self.push(v, r, c, Op::AddConst(a))
    }

    pub fn mul_const(&mut self, a: Var, k: Arc<Vec<f64>>) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(k.len(), r * c, "constant shape mismatch");
        let v = self.value(a).iter().zip(k.iter()).map(|(x, y)| x * y).collect();
        self.push(v, r, c, Op::MulConst(a, k))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|&x| silu(x)).collect();
        self.push(v, r, c, Op::Silu(a))
    }

    pub fn ln_offset(&mut self, a: Var, offset: f64) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|&x| (x + offset).ln()).collect();
        self.push(v, r, c, Op::LnOffset(a, offset))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| x.abs()).collect();
        self.push(v, r, c, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| x * x).collect();
        self.push(v, r, c, Op::Square(a))
    }

    pub fn hypot(&mut self, a: Var, b: Var, delta: f64) -> Var {
        let (r, c) = self.same_shape(a, b);
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x * x + y * y + delta).sqrt())
            .collect();
        self.push(v, r, c, Op::Hypot(a, b))
    }

    pub fn atan2(&mut self, im: Var, re: Var) -> Var {
        let (r, c) = self.same_shape(im, re);
        let v = self
            .value(im)
            .iter()
            .zip(self.value(re))
            .map(|(y, x)| y.atan2(*x))
            .collect();
        self.push(v, r, c, Op::Atan2 { im, re })
    }

    pub fn wrap_pi(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|&x| wrap_pi(x)).collect();
        self.push(v, r, c, Op::WrapPi(a))
    }

    /// Same-padded 1-D convolution.
    ///
    /// `input` is `[cin, len]`, `weight` is `[cout, cin * kernel]`, `bias` is
    /// `[cout, 1]`. The kernel must be odd.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let (cin, len) = self.shape(input);
        let (cout, wc) = self.shape(weight);
        assert_eq!(wc, cin * kernel, "conv weight shape mismatch");
        assert_eq!(self.shape(bias), (cout, 1), "conv bias shape mismatch");
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let pad = (kernel - 1) / 2;
        let mut out = vec![0.0; cout * len];
        for o in 0..cout {
            let orow = &mut out[o * len..(o + 1) * len];
            orow.iter_mut().for_each(|v| *v = b[o]);
            for i in 0..cin {
                let xrow = &x[i * len..(i + 1) * len];
                for j in 0..kernel {
                    let wv = w[o * cin * kernel + i * kernel + j];
                    // out[t] += wv * x[t + j - pad] for valid t
                    let (t0, t1) = valid_range(len, j, pad);
                    let src = t0 + j - pad;
                    for (ov, xv) in orow[t0..t1].iter_mut().zip(&xrow[src..src + (t1 - t0)]) {
                        *ov += wv * xv;
                    }
                }
            }
        }
        self.push(
            out,
            cout,
            len,
            Op::Conv1d {
                input,
                weight,
                bias,
                cin,
                kernel,
            },
        )
    }

    /// `out[i] = a[index[i]]`, reshaped to `rows x cols`.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<usize>>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather shape mismatch");
        let src = self.value(a);
        let v = index.iter().map(|&i| src[i]).collect();
        self.push(v, rows, cols, Op::Gather(a, index))
    }

    /// Nearest-neighbour upsampling along columns.
    pub fn upsample(&mut self, a: Var, factor: usize) -> Var {
        let (r, c) = self.shape(a);
        let idx: Vec<usize> = (0..r)
            .flat_map(|i| (0..c * factor).map(move |t| i * c + t / factor))
            .collect();
        self.gather(a, Arc::new(idx), r, c * factor)
    }

    /// Repeats a `[rows, 1]` column across `cols` columns.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(c, 1, "broadcast_cols expects a column");
        let idx: Vec<usize> = (0..r).flat_map(|i| std::iter::repeat_n(i, cols)).collect();
        self.gather(a, Arc::new(idx), r, cols)
    }

    /// Rows `start..start + count`.
    pub fn rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + count <= r, "row slice out of range");
        let idx: Vec<usize> = (start * c..(start + count) * c).collect();
        self.gather(a, Arc::new(idx), count, c)
    }

    /// Non-overlapping mean pooling along columns.
    pub fn avg_pool(&mut self, a: Var, factor: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(c % factor == 0, "pool factor must divide length");
        let oc = c / factor;
        let src = self.value(a);
        let inv = 1.0 / factor as f64;
        let v = (0..r * oc)
            .map(|k| {
                let (i, t) = (k / oc, k % oc);
                src[i * c + t * factor..i * c + (t + 1) * factor].iter().sum::<f64>() * inv
            })
            .collect();
        self.push(v, r, oc, Op::AvgPool(a, factor))
    }

    /// `a [r, k] x m [k, c]` with constant `m`.
    pub fn matmul_const(&mut self, a: Var, m: Arc<Vec<f64>>, cols: usize) -> Var {
        let (r, k) = self.shape(a);
        assert_eq!(m.len(), k * cols, "matmul shape mismatch");
        let av = self.value(a);
        let mut out = vec![0.0; r * cols];
        for i in 0..r {
            let orow = &mut out[i * cols..(i + 1) * cols];
            for (p, &x) in av[i * k..(i + 1) * k].iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                for (o, mv) in orow.iter_mut().zip(&m[p * cols..(p + 1) * cols]) {
                    *o += x * mv;
                }
            }
        }
        self.push(out, r, cols, Op::MatMulConst(a, m))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![s], 1, 1, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse pass from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, self, *a, |d, _| d.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    accumulate(&mut grads, self, *b, |d, _| d.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, self, *a, |d, _| d.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    accumulate(&mut grads, self, *b, |d, _| d.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, self, *a, |d, _| {
                        for ((x, gy), y) in d.iter_mut().zip(&g).zip(vb) {
                            *x += gy * y;
                        }
                    });
                    accumulate(&mut grads, self, *b, |d, _| {
                        for ((x, gy), y) in d.iter_mut().zip(&g).zip(va) {
                            *x += gy * y;
                        }
                    });
                }
                Op::Scale(a, k) => {
                    accumulate(&mut grads, self, *a, |d, _| d.iter_mut().zip(&g).for_each(|(x, y)| *x += k * y));
                }
                Op::AddConst(a) => {
                    accumulate(&mut grads, self, *a, |d, _| d.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                }
                Op::MulConst(a, k) => {
                    accumulate(&mut grads, self, *a, |d, _| {
                        for ((x, gy), kv) in d.iter_mut().zip(&g).zip(k.iter()) {
                            *x += gy * kv;
                        }
                    });
                }
                Op::Silu(a) => {
                    accumulate(&mut grads, self, *a, |d, src| {
                        for ((x, gy), s) in d.iter_mut().zip(&g).zip(src) {
                            *x += gy * silu_grad(*s);
                        }
                    });
                }
                Op::LnOffset(a, off) => {
                    accumulate(&mut grads, self, *a, |d, src| {
                        for ((x, gy), s) in d.iter_mut().zip(&g).zip(src) {
                            *x += gy / (s + off);
                        }
                    });
                }
                Op::Abs(a) => {
                    accumulate(&mut grads, self, *a, |d, src| {
                        for ((x, gy), s) in d.iter_mut().zip(&g).zip(src) {
                            if *s > 0.0 {
                                *x += gy;
                            } else if *s < 0.0 {
                                *x -= gy;
                            }
                        }
                    });
                }
                Op::Square(a) => {
                    accumulate(&mut grads, self, *a, |d, src| {
                        for ((x, gy), s) in d.iter_mut().zip(&g).zip(src) {
                            *x += 2.0 * gy * s;
                        }
                    });
                }
                Op::Hypot(a, b) => {
                    let out = &node.value;
                    for v in [*a, *b] {
                        accumulate(&mut grads, self, v, |d, src| {
                            for (((x, gy), s), h) in d.iter_mut().zip(&g).zip(src).zip(out) {
                                *x += gy * s / h;
                            }
                        });
                    }
                }
                Op::Atan2 { im, re } => {
                    let (vi, vr) = (self.value(*im), self.value(*re));
                    let r2: Vec<f64> = vi.iter().zip(vr).map(|(y, x)| x * x + y * y).collect();
                    accumulate(&mut grads, self, *im, |d, _| {
                        for (k, x) in d.iter_mut().enumerate() {
                            if r2[k] > 0.0 {
                                *x += g[k] * vr[k] / r2[k];
                            }
                        }
                    });
                    accumulate(&mut grads, self, *re, |d, _| {
                        for (k, x) in d.iter_mut().enumerate() {
                            if r2[k] > 0.0 {
                                *x -= g[k] * vi[k] / r2[k];
                            }
                        }
                    });
                }
                Op::WrapPi(a) => {
                    accumulate(&mut grads, self, *a, |d, _| d.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                }
                Op::Conv1d {
                    input,
                    weight,
                    bias,
                    cin,
                    kernel,
                } => {
                    let (cin, kernel) = (*cin, *kernel);
                    let len = node.cols;
                    let cout = node.rows;
                    let pad = (kernel - 1) / 2;
                    let x = self.value(*input);
                    let w = self.value(*weight);
                    accumulate(&mut grads, self, *bias, |d, _| {
                        for o in 0..cout {
                            d[o] += g[o * len..(o + 1) * len].iter().sum::<f64>();
                        }
                    });
                    accumulate(&mut grads, self, *weight, |d, _| {
                        for o in 0..cout {
                            let grow = &g[o * len..(o + 1) * len];
                            for i in 0..cin {
                                let xrow = &x[i * len..(i + 1) * len];
                                for j in 0..kernel {
                                    let (t0, t1) = valid_range(len, j, pad);
                                    let src = t0 + j - pad;
                                    let s: f64 = grow[t0..t1]
                                        .iter()
                                        .zip(&xrow[src..src + (t1 - t0)])
                                        .map(|(a, b)| a * b)
                                        .sum();
                                    d[o * cin * kernel + i * kernel + j] += s;
                                }
                            }
                        }
                    });
                    accumulate(&mut grads, self, *input, |d, _| {
                        for o in 0..cout {
                            let grow = &g[o * len..(o + 1) * len];
                            for i in 0..cin {
                                let drow = &mut d[i * len..(i + 1) * len];
                                for j in 0..kernel {
                                    let wv = w[o * cin * kernel + i * kernel + j];
                                    let (t0, t1) = valid_range(len, j, pad);
                                    let src = t0 + j - pad;
                                    for (dv, gv) in drow[src..src + (t1 - t0)].iter_mut().zip(&grow[t0..t1]) {
                                        *dv += wv * gv;
                                    }
                                }
                            }
                        }
                    });
                }
                Op::Gather(a, idx) => {
                    accumulate(&mut grads, self, *a, |d, _| {
                        for (gy, &i) in g.iter().zip(idx.iter()) {
                            d[i] += gy;
                        }
                    });
                }
                Op::AvgPool(a, factor) => {
                    let inv = 1.0 / *factor as f64;
                    let oc = node.cols;
                    let c = oc * factor;
                    accumulate(&mut grads, self, *a, |d, _| {
                        for (k, gy) in g.iter().enumerate() {
                            let (i, t) = (k / oc, k % oc);
                            for x in &mut d[i * c + t * factor..i * c + (t + 1) * factor] {
                                *x += gy * inv;
                            }
                        }
                    });
                }
                Op::MatMulConst(a, m) => {
                    let cols = node.cols;
                    let (r, k) = self.shape(*a);
                    accumulate(&mut grads, self, *a, |d, _| {
                        for i in 0..r {
                            let grow = &g[i * cols..(i + 1) * cols];
                            for p in 0..k {
                                let s: f64 =
                                    grow.iter().zip(&m[p * cols..(p + 1) * cols]).map(|(a, b)| a * b).sum();
                                d[i * k + p] += s;
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    accumulate(&mut grads, self, *a, |d, _| d.iter_mut().for_each(|x| *x += g[0]));
                }
            }
            grads[id] = Some(g);
        }
        Grads { grads }
    }
}

fn valid_range(len: usize, j: usize, pad: usize) -> (usize, usize) {
    // t + j - pad in [0, len)
    let t0 = pad.saturating_sub(j);
    let t1 = (len + pad).saturating_sub(j).min(len);
    (t0, t1.max(t0))
}

fn accumulate<F>(grads: &mut [Option<Vec<f64>>], tape: &Tape, target: Var, f: F)
where
    F: FnOnce(&mut [f64], &[f64]),
{
    let node = &tape.nodes[target.0];
    let slot = grads[target.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
    f(slot, &node.value);
}
