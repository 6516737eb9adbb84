//! Shared test utilities: a scalar reverse-mode differentiation oracle over
//! explicitly unrolled graphs, and central finite-difference helpers.

#![allow(dead_code)]

pub mod gradcheck;

/// Scalar computation graph with eager evaluation. Backward walks the nodes
/// in reverse insertion order, so building the graph in forward order yields
/// correct reverse-mode gradients.
pub struct Graph {
    ops: Vec<Op>,
    pub vals: Vec<f64>,
    pub grads: Vec<f64>,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddC(usize, f64),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Max2(usize, usize),
    /// Heaviside(u - v_th) forward (threshold fires); rectangle surrogate
    /// (1/a on |u - v_th| < a/2, strict) backward.
    Spike { u: usize, v_th: f64, a: f64 },
}

impl Graph {
    pub fn new() -> Self {
        Graph { ops: Vec::new(), vals: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, op: Op, val: f64) -> usize {
        self.ops.push(op);
        self.vals.push(val);
        self.grads.push(0.0);
        self.vals.len() - 1
    }

    pub fn leaf(&mut self, v: f64) -> usize {
        self.push(Op::Leaf, v)
    }

    pub fn add(&mut self, a: usize, b: usize) -> usize {
        let v = self.vals[a] + self.vals[b];
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: usize, b: usize) -> usize {
        let v = self.vals[a] - self.vals[b];
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: usize, b: usize) -> usize {
        let v = self.vals[a] * self.vals[b];
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: usize, b: usize) -> usize {
        let v = self.vals[a] / self.vals[b];
        self.push(Op::Div(a, b), v)
    }

    pub fn scale(&mut self, a: usize, c: f64) -> usize {
        let v = self.vals[a] * c;
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_const(&mut self, a: usize, c: f64) -> usize {
        let v = self.vals[a] + c;
        self.push(Op::AddC(a, c), v)
    }

    pub fn sigmoid(&mut self, a: usize) -> usize {
        let v = 1.0 / (1.0 + (-self.vals[a]).exp());
        self.push(Op::Sigmoid(a), v)
    }

    pub fn relu(&mut self, a: usize) -> usize {
        let v = if self.vals[a] > 0.0 { self.vals[a] } else { 0.0 };
        self.push(Op::Relu(a), v)
    }

    pub fn exp(&mut self, a: usize) -> usize {
        let v = self.vals[a].exp();
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: usize) -> usize {
        let v = self.vals[a].ln();
        self.push(Op::Ln(a), v)
    }

    pub fn sqrt(&mut self, a: usize) -> usize {
        let v = self.vals[a].sqrt();
        self.push(Op::Sqrt(a), v)
    }

    /// Ties route the gradient to the first argument, so a left-assoc chain
    /// sends a tied maximum's gradient to the earliest element.
    pub fn max2(&mut self, a: usize, b: usize) -> usize {
        let v = self.vals[a].max(self.vals[b]);
        self.push(Op::Max2(a, b), v)
    }

    pub fn max_of(&mut self, xs: &[usize]) -> usize {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.max2(acc, x);
        }
        acc
    }

    pub fn spike(&mut self, u: usize, v_th: f64, a: f64) -> usize {
        let v = if self.vals[u] - v_th >= 0.0 { 1.0 } else { 0.0 };
        self.push(Op::Spike { u, v_th, a }, v)
    }

    pub fn sum(&mut self, xs: &[usize]) -> usize {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x);
        }
        acc
    }

    pub fn mean(&mut self, xs: &[usize]) -> usize {
        let s = self.sum(xs);
        self.scale(s, 1.0 / xs.len() as f64)
    }

    /// dot(xs, weights as constants)
    pub fn weighted_sum(&mut self, xs: &[usize], weights: &[f64]) -> usize {
        assert_eq!(xs.len(), weights.len());
        let mut terms = Vec::with_capacity(xs.len());
        for (&x, &w) in xs.iter().zip(weights) {
            terms.push(self.scale(x, w));
        }
        self.sum(&terms)
    }

    /// Reverse-mode sweep seeding d(output)/d(output) = 1.
    pub fn backward(&mut self, output: usize) {
        for g in &mut self.grads {
            *g = 0.0;
        }
        self.grads[output] = 1.0;
        for i in (0..self.ops.len()).rev() {
            let g = self.grads[i];
            if g == 0.0 {
                continue;
            }
            match self.ops[i] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.grads[a] += g;
                    self.grads[b] += g;
                }
                Op::Sub(a, b) => {
                    self.grads[a] += g;
                    self.grads[b] -= g;
                }
                Op::Mul(a, b) => {
                    self.grads[a] += g * self.vals[b];
                    self.grads[b] += g * self.vals[a];
                }
                Op::Div(a, b) => {
                    self.grads[a] += g / self.vals[b];
                    self.grads[b] -= g * self.vals[a] / (self.vals[b] * self.vals[b]);
                }
                Op::Scale(a, c) => self.grads[a] += g * c,
                Op::AddC(a, _) => self.grads[a] += g,
                Op::Sigmoid(a) => {
                    let s = self.vals[i];
                    self.grads[a] += g * s * (1.0 - s);
                }
                Op::Relu(a) => {
                    if self.vals[a] > 0.0 {
                        self.grads[a] += g;
                    }
                }
                Op::Exp(a) => self.grads[a] += g * self.vals[i],
                Op::Ln(a) => self.grads[a] += g / self.vals[a],
                Op::Sqrt(a) => self.grads[a] += g / (2.0 * self.vals[i]),
                Op::Max2(a, b) => {
                    if self.vals[a] >= self.vals[b] {
                        self.grads[a] += g;
                    } else {
                        self.grads[b] += g;
                    }
                }
                Op::Spike { u, v_th, a } => {
                    if (self.vals[u] - v_th).abs() < a / 2.0 {
                        self.grads[u] += g / a;
                    }
                }
            }
        }
    }

    pub fn val(&self, id: usize) -> f64 {
        self.vals[id]
    }

    pub fn grad(&self, id: usize) -> f64 {
        self.grads[id]
    }
}

/// Central finite difference of a scalar function at `x` along coordinate
/// `i` with step `h`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let mut xm = x.to_vec();
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// max_i |analytic_i - fd_i| / max(|analytic_i|, |fd_i|, 1.0)
pub fn max_rel_error(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    h: f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let fd = central_diff(f, x, i, h);
        let denom = analytic[i].abs().max(fd.abs()).max(1.0);
        worst = worst.max((analytic[i] - fd).abs() / denom);
    }
    worst
}
