//! Eager reverse-mode differentiation over flat `f64` vectors.
//!
//! Values are computed as nodes are pushed, so callers can inspect
//! intermediate results (for example to reject a zero-norm direction) before
//! building further. Nodes are appended in evaluation order, which is already
//! a topological order for the backward sweep.

use std::sync::Arc;

use crate::linear::LinearMap;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    Offset(Var),
    MulConst(Var, Arc<[f64]>),
    AddConst(Var),
    Linear(Var, Arc<dyn LinearMap>),
    Slice(Var, usize),
    Concat(Vec<Var>),
    Tanh(Var),
    Exp(Var),
    Sqrt(Var),
    Recip(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Dot(Var, Var),
    MulScalar(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, or zeros of length `len` when nothing flowed there.
    pub fn wrt(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; len])
    }
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a length-1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.len(), 1, "scalar() on a vector node");
        value[0]
    }

    pub fn dim(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input.
    pub fn var(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient is tracked through it.
    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "elementwise op on mismatched lengths");
        va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect()
    }

    fn map_value(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.value(a).iter().map(|x| f(*x)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map_value(a, |x| x * c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// `a + c` elementwise.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.map_value(a, |x| x + c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Offset(a), rg)
    }

    pub fn mul_const(&mut self, a: Var, c: Arc<[f64]>) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), c.len());
        let v = va.iter().zip(c.iter()).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a]);
        self.push(v, Op::MulConst(a, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), c.len());
        let v = va.iter().zip(c).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a]);
        self.push(v, Op::AddConst(a), rg)
    }

    /// `a·x + b·y`.
    pub fn lin_comb(&mut self, x: Var, a: f64, y: Var, b: f64) -> Var {
        let sx = self.scale(x, a);
        let sy = self.scale(y, b);
        self.add(sx, sy)
    }

    pub fn linear(&mut self, a: Var, map: Arc<dyn LinearMap>) -> Var {
        assert_eq!(self.dim(a), map.input_len(), "linear map input length");
        let mut out = vec![0.0; map.output_len()];
        map.apply(self.value(a), &mut out);
        let rg = self.rg(&[a]);
        self.push(out, Op::Linear(a, map), rg)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a)[start..start + len].to_vec();
        let rg = self.rg(&[a]);
        self.push(v, Op::Slice(a, start), rg)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let v = parts
            .iter()
            .flat_map(|p| self.value(*p).iter().copied())
            .collect();
        let rg = self.rg(parts);
        self.push(v, Op::Concat(parts.to_vec()), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map_value(a, f64::tanh);
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map_value(a, f64::exp);
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.map_value(a, f64::sqrt);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sqrt(a), rg)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.map_value(a, f64::recip);
        let rg = self.rg(&[a]);
        self.push(v, Op::Recip(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.map_value(a, f64::abs);
        let rg = self.rg(&[a]);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.map_value(a, |x| x * x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Square(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = vec![self.value(a).iter().sum()];
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.dim(a).max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "dot on mismatched lengths");
        let v = vec![va.iter().zip(vb).map(|(x, y)| x * y).sum()];
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Dot(a, b), rg)
    }

    /// Vector `a` times length-1 node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.dim(s), 1, "mul_scalar expects a scalar node");
        let k = self.scalar(s);
        let v = self.map_value(a, |x| x * k);
        let rg = self.rg(&[a, s]);
        self.push(v, Op::MulScalar(a, s), rg)
    }

    /// Euclidean norm as a length-1 node.
    pub fn norm(&mut self, a: Var) -> Var {
        let sq = self.dot(a, a);
        self.sqrt(sq)
    }

    /// Reverse sweep from the length-1 node `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.dim(output), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    s.iter_mut().zip(g).for_each(|(o, gv)| *o -= gv)
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |s| {
                    for ((o, gv), y) in s.iter_mut().zip(g).zip(vb) {
                        *o += gv * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((o, gv), x) in s.iter_mut().zip(g).zip(va) {
                        *o += gv * x;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| {
                s.iter_mut().zip(g).for_each(|(o, gv)| *o += gv * c)
            }),
            Op::Offset(a) | Op::AddConst(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::MulConst(a, c) => acc(*a, &mut |s| {
                for ((o, gv), k) in s.iter_mut().zip(g).zip(c.iter()) {
                    *o += gv * k;
                }
            }),
            Op::Linear(a, map) => acc(*a, &mut |s| map.apply_transpose(g, s)),
            Op::Slice(a, start) => acc(*a, &mut |s| add_into(&mut s[*start..*start + g.len()], g)),
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    let seg = &g[offset..offset + n];
                    acc(*p, &mut |s| add_into(s, seg));
                    offset += n;
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, &mut |s| {
                    for ((o, gv), yv) in s.iter_mut().zip(g).zip(y) {
                        *o += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                acc(*a, &mut |s| {
                    for ((o, gv), yv) in s.iter_mut().zip(g).zip(y) {
                        *o += gv * yv;
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                acc(*a, &mut |s| {
                    for ((o, gv), yv) in s.iter_mut().zip(g).zip(y) {
                        // Subgradient 0 at the origin keeps zero-norm inputs finite.
                        if *yv > 0.0 {
                            *o += gv * 0.5 / yv;
                        }
                    }
                });
            }
            Op::Recip(a) => {
                let y = &node.value;
                acc(*a, &mut |s| {
                    for ((o, gv), yv) in s.iter_mut().zip(g).zip(y) {
                        *o -= gv * yv * yv;
                    }
                });
            }
            Op::Abs(a) => {
                let x = &nodes[a.0].value;
                acc(*a, &mut |s| {
                    for ((o, gv), xv) in s.iter_mut().zip(g).zip(x) {
                        if *xv > 0.0 {
                            *o += gv;
                        } else if *xv < 0.0 {
                            *o -= gv;
                        }
                    }
                });
            }
            Op::Square(a) => {
                let x = &nodes[a.0].value;
                acc(*a, &mut |s| {
                    for ((o, gv), xv) in s.iter_mut().zip(g).zip(x) {
                        *o += 2.0 * gv * xv;
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|o| *o += g[0])),
            Op::Dot(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |s| {
                    s.iter_mut().zip(vb).for_each(|(o, y)| *o += g[0] * y)
                });
                acc(*b, &mut |s| {
                    s.iter_mut().zip(va).for_each(|(o, x)| *o += g[0] * x)
                });
            }
            Op::MulScalar(a, k) => {
                let kv = nodes[k.0].value[0];
                let va = &nodes[a.0].value;
                acc(*a, &mut |s| {
                    s.iter_mut().zip(g).for_each(|(o, gv)| *o += gv * kv)
                });
                acc(*k, &mut |s| {
                    s[0] += g.iter().zip(va).map(|(gv, x)| gv * x).sum::<f64>()
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` at `x`.
    fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn build(t: &mut Tape, x: Var) -> Var {
        let th = t.tanh(x);
        let e = t.exp(th);
        let sq = t.square(x);
        let p = t.offset(sq, 1.0);
        let r = t.recip(p);
        let m = t.mul(e, r);
        let n = t.norm(m);
        let a = t.abs(x);
        let s = t.slice(a, 1, 2);
        let ss = t.sum(s);
        let y = t.mul_scalar(m, ss);
        let d = t.dot(y, x);
        t.add(d, n)
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let x0 = vec![0.3, -0.7, 1.1, 0.05];
        let mut tape = Tape::new();
        let x = tape.var(x0.clone());
        let out = build(&mut tape, x);
        let grads = tape.backward(out);
        let analytic = grads.wrt(x, 4);

        let numeric = numeric_grad(&x0, |v| {
            let mut t = Tape::new();
            let x = t.var(v.to_vec());
            let o = build(&mut t, x);
            t.scalar(o)
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(vec![1.0, 2.0]);
        let x = tape.var(vec![3.0, 4.0]);
        let d = tape.dot(c, x);
        let g = tape.backward(d);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn sqrt_at_zero_has_finite_gradient() {
        let mut tape = Tape::new();
        let x = tape.var(vec![0.0, 0.0]);
        let n = tape.norm(x);
        let g = tape.backward(n);
        assert!(g.wrt(x, 2).iter().all(|v| v.is_finite()));
    }
}
