//! Reverse-mode differentiation over the handful of vector operations the
//! scoring head needs.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward sweep walks it once in reverse.

use super::{dot, guard_norm, norm, softmax};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `w · x + b` with `w` of shape `rows × cols`.
    Affine {
        w: Var,
        x: Var,
        b: Var,
    },
    Relu(Var),
    Softmax(Var),
    Hadamard(Var, Var),
    Add(Var, Var),
    Cosine(Var, Var),
    WeightedCosine {
        a: Var,
        x: Var,
        y: Var,
    },
    Stack(Vec<Var>),
    /// Scalar times vector.
    Scale {
        s: Var,
        x: Var,
    },
    /// `-log softmax(logits)[target]`.
    CrossEntropy {
        logits: Var,
        target: usize,
    },
    Mean(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`; zeros if `v` does not
    /// influence the output.
    pub fn get(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.lens[v.0]],
        }
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

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Column-vector leaf.
    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        let n = value.len();
        self.push(value, n, 1, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(vec![value], 1, 1, Op::Leaf)
    }

    /// Row-major matrix leaf.
    pub fn matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix leaf {rows}x{cols} with {} entries",
                data.len()
            )));
        }
        Ok(self.push(data, rows, cols, Op::Leaf))
    }

    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = (self.nodes[w.0].rows, self.nodes[w.0].cols);
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[b.0].value;
        if xv.len() != cols || bv.len() != rows {
            return Err(Error::shape(format!(
                "affine {rows}x{cols} with input {} and bias {}",
                xv.len(),
                bv.len()
            )));
        }
        let wv = &self.nodes[w.0].value;
        let out: Vec<f64> = (0..rows)
            .map(|i| dot(&wv[i * cols..(i + 1) * cols], xv) + bv[i])
            .collect();
        Ok(self.push(out, rows, 1, Op::Affine { w, x, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = super::relu(&self.nodes[x.0].value);
        let n = out.len();
        self.push(out, n, 1, Op::Relu(x))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax(&self.nodes[x.0].value);
        let n = out.len();
        self.push(out, n, 1, Op::Softmax(x))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            check_len(av, bv, "hadamard")?;
            super::hadamard(av, bv)
        };
        let n = out.len();
        Ok(self.push(out, n, 1, Op::Hadamard(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out: Vec<f64> = {
            let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            check_len(av, bv, "add")?;
            av.iter().zip(bv).map(|(x, y)| x + y).collect()
        };
        let n = out.len();
        Ok(self.push(out, n, 1, Op::Add(a, b)))
    }

    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = super::cosine(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(vec![c], 1, 1, Op::Cosine(a, b)))
    }

    pub fn weighted_cosine(&mut self, a: Var, x: Var, y: Var) -> Result<Var> {
        let c = super::weighted_cosine(
            &self.nodes[a.0].value,
            &self.nodes[x.0].value,
            &self.nodes[y.0].value,
        )?;
        Ok(self.push(vec![c], 1, 1, Op::WeightedCosine { a, x, y }))
    }

    /// Collects scalar nodes into one vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Var {
        let out: Vec<f64> = scalars.iter().map(|s| self.nodes[s.0].value[0]).collect();
        let n = out.len();
        self.push(out, n, 1, Op::Stack(scalars.to_vec()))
    }

    pub fn scale(&mut self, s: Var, x: Var) -> Var {
        let sv = self.nodes[s.0].value[0];
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| sv * v).collect();
        let n = out.len();
        self.push(out, n, 1, Op::Scale { s, x })
    }

    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = &self.nodes[logits.0].value;
        if target >= z.len() {
            return Err(Error::shape(format!(
                "target {target} outside {} logits",
                z.len()
            )));
        }
        let loss = log_sum_exp(z) - z[target];
        Ok(self.push(vec![loss], 1, 1, Op::CrossEntropy { logits, target }))
    }

    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::EmptyInput("mean over no nodes"));
        }
        let mut acc = 0.0;
        for x in xs {
            acc += self.nodes[x.0].value[0];
        }
        let out = acc / xs.len() as f64;
        Ok(self.push(vec![out], 1, 1, Op::Mean(xs.to_vec())))
    }

    /// Back-propagates from a scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        let lens: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0; lens[output.0]]);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Affine { w, x, b } => {
                    let (rows, cols) = (self.nodes[w.0].rows, self.nodes[w.0].cols);
                    let wv = &self.nodes[w.0].value;
                    let xv = &self.nodes[x.0].value;
                    {
                        let gw = slot(&mut grads, &lens, *w);
                        for i in 0..rows {
                            let gi = g[i];
                            if gi != 0.0 {
                                let row = &mut gw[i * cols..(i + 1) * cols];
                                for (dst, xj) in row.iter_mut().zip(xv) {
                                    *dst += gi * xj;
                                }
                            }
                        }
                    }
                    {
                        let gx = slot(&mut grads, &lens, *x);
                        for i in 0..rows {
                            let gi = g[i];
                            if gi != 0.0 {
                                for (dst, wij) in gx.iter_mut().zip(&wv[i * cols..(i + 1) * cols]) {
                                    *dst += gi * wij;
                                }
                            }
                        }
                    }
                    accumulate(slot(&mut grads, &lens, *b), &g);
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = slot(&mut grads, &lens, *x);
                    for ((dst, gi), xi) in gx.iter_mut().zip(&g).zip(xv) {
                        if *xi > 0.0 {
                            *dst += gi;
                        }
                    }
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let inner = dot(&g, y);
                    let gx = slot(&mut grads, &lens, *x);
                    for ((dst, gi), yi) in gx.iter_mut().zip(&g).zip(y) {
                        *dst += yi * (gi - inner);
                    }
                }
                Op::Hadamard(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    for ((dst, gi), bi) in slot(&mut grads, &lens, *a).iter_mut().zip(&g).zip(bv) {
                        *dst += gi * bi;
                    }
                    for ((dst, gi), ai) in slot(&mut grads, &lens, *b).iter_mut().zip(&g).zip(av) {
                        *dst += gi * ai;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(slot(&mut grads, &lens, *a), &g);
                    accumulate(slot(&mut grads, &lens, *b), &g);
                }
                Op::Cosine(a, b) => {
                    let (ga, gb) = cosine_adjoints(
                        &self.nodes[a.0].value,
                        &self.nodes[b.0].value,
                        node.value[0],
                        g[0],
                    );
                    accumulate(slot(&mut grads, &lens, *a), &ga);
                    accumulate(slot(&mut grads, &lens, *b), &gb);
                }
                Op::WeightedCosine { a, x, y } => {
                    let av = &self.nodes[a.0].value;
                    let xv = &self.nodes[x.0].value;
                    let yv = &self.nodes[y.0].value;
                    let u = super::hadamard(av, xv);
                    let v = super::hadamard(av, yv);
                    let (gu, gv) = cosine_adjoints(&u, &v, node.value[0], g[0]);
                    {
                        let ga = slot(&mut grads, &lens, *a);
                        for k in 0..ga.len() {
                            ga[k] += gu[k] * xv[k] + gv[k] * yv[k];
                        }
                    }
                    for ((dst, gk), ak) in slot(&mut grads, &lens, *x).iter_mut().zip(&gu).zip(av) {
                        *dst += gk * ak;
                    }
                    for ((dst, gk), ak) in slot(&mut grads, &lens, *y).iter_mut().zip(&gv).zip(av) {
                        *dst += gk * ak;
                    }
                }
                Op::Stack(parts) => {
                    for (k, p) in parts.iter().enumerate() {
                        slot(&mut grads, &lens, *p)[0] += g[k];
                    }
                }
                Op::Scale { s, x } => {
                    let sv = self.nodes[s.0].value[0];
                    let xv = &self.nodes[x.0].value;
                    slot(&mut grads, &lens, *s)[0] += dot(&g, xv);
                    for (dst, gi) in slot(&mut grads, &lens, *x).iter_mut().zip(&g) {
                        *dst += sv * gi;
                    }
                }
                Op::CrossEntropy { logits, target } => {
                    let p = softmax(&self.nodes[logits.0].value);
                    let gz = slot(&mut grads, &lens, *logits);
                    for (k, (dst, pk)) in gz.iter_mut().zip(&p).enumerate() {
                        let indicator = if k == *target { 1.0 } else { 0.0 };
                        *dst += g[0] * (pk - indicator);
                    }
                }
                Op::Mean(parts) => {
                    let share = g[0] / parts.len() as f64;
                    for p in parts {
                        slot(&mut grads, &lens, *p)[0] += share;
                    }
                }
            }
            // Leaves keep their adjoint for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads, lens }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], lens: &[usize], v: Var) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; lens[v.0]])
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn check_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "{what} of lengths {} and {}",
            a.len(),
            b.len()
        )))
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = 0.0;
    for v in z {
        acc += (v - max).exp();
    }
    max + acc.ln()
}

/// Adjoints of `c = <u, v> / (|u| |v|)` scaled by the upstream gradient.
fn cosine_adjoints(u: &[f64], v: &[f64], c: f64, upstream: f64) -> (Vec<f64>, Vec<f64>) {
    let nu = norm(u);
    let nv = norm(v);
    debug_assert!(guard_norm(nu).is_ok() && guard_norm(nv).is_ok());
    let inv = 1.0 / (nu * nv);
    let gu = u
        .iter()
        .zip(v)
        .map(|(ui, vi)| upstream * (vi * inv - c * ui / (nu * nu)))
        .collect();
    let gv = u
        .iter()
        .zip(v)
        .map(|(ui, vi)| upstream * (ui * inv - c * vi / (nv * nv)))
        .collect();
    (gu, gv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central differences of `f` around `x`, compared with `analytic`.
    fn assert_fd(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) {
        let h = 1e-6;
        let mut p = x.to_vec();
        for i in 0..x.len() {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            let fd = (up - down) / (2.0 * h);
            let scale = fd.abs().max(analytic[i].abs());
            let err = (fd - analytic[i]).abs();
            assert!(
                err <= 1e-4 * scale || (scale < 1e-6 && err <= 1e-7),
                "coordinate {i}: analytic {} vs fd {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn unused_leaves_get_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0]);
        let unused = tape.leaf(vec![3.0, 4.0, 5.0]);
        let b = tape.leaf(vec![0.5, -1.0]);
        let c = tape.cosine(a, b).unwrap();
        let g = tape.backward(c);
        assert_eq!(g.get(unused), vec![0.0; 3]);
        assert_eq!(g.get(a).len(), 2);
    }

    #[test]
    fn shared_node_accumulates_both_paths() {
        // f(x) = <x, x> via hadamard then a stacked sum through mean.
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3.0]);
        let sq = tape.hadamard(x, x).unwrap();
        let out = tape.mean(&[sq]).unwrap();
        assert_eq!(tape.scalar_value(out), 9.0);
        let g = tape.backward(out);
        assert_eq!(g.get(x), vec![6.0]);
    }

    #[test]
    fn primitives_match_finite_differences() {
        for (seed, n) in [(1u64, 2usize), (2, 8), (3, 512)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a0: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
            let x0 = rand_vec(&mut rng, n);
            let y0 = rand_vec(&mut rng, n);

            // weighted cosine, all three arguments
            let build = |a: &[f64], x: &[f64], y: &[f64]| {
                let mut t = Tape::new();
                let (av, xv, yv) = (t.leaf(a.to_vec()), t.leaf(x.to_vec()), t.leaf(y.to_vec()));
                let out = t.weighted_cosine(av, xv, yv).unwrap();
                (t, av, xv, yv, out)
            };
            let (t, av, xv, yv, out) = build(&a0, &x0, &y0);
            let g = t.backward(out);
            assert_fd(|a| t_value(build(a, &x0, &y0)), &a0, &g.get(av));
            assert_fd(|x| t_value(build(&a0, x, &y0)), &x0, &g.get(xv));
            assert_fd(|y| t_value(build(&a0, &x0, y)), &y0, &g.get(yv));

            // softmax -> hadamard -> cosine, checks softmax/hadamard/cosine/add
            let chain = |x: &[f64]| {
                let mut t = Tape::new();
                let xv = t.leaf(x.to_vec());
                let yv = t.leaf(y0.clone());
                let s = t.softmax(xv);
                let h = t.hadamard(s, yv).unwrap();
                let sum = t.add(h, xv).unwrap();
                let out = t.cosine(sum, yv).unwrap();
                (t, xv, out)
            };
            let (t, xv, out) = chain(&x0);
            let g = t.backward(out);
            assert_fd(
                |x| {
                    let (t, _, o) = chain(x);
                    t.scalar_value(o)
                },
                &x0,
                &g.get(xv),
            );
        }
    }

    fn t_value(parts: (Tape, Var, Var, Var, Var)) -> f64 {
        parts.0.scalar_value(parts.4)
    }

    #[test]
    fn affine_relu_scale_cross_entropy_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (rows, cols) = (5, 4);
        // Flat layout: W (rows*cols), x (cols), b (rows), s (1).
        let p0 = rand_vec(&mut rng, rows * cols + cols + rows + 1);
        let build = |p: &[f64]| {
            let mut t = Tape::new();
            let w = t.matrix(rows, cols, p[..rows * cols].to_vec()).unwrap();
            let x = t.leaf(p[rows * cols..rows * cols + cols].to_vec());
            let b = t.leaf(p[rows * cols + cols..rows * cols + cols + rows].to_vec());
            let s = t.scalar(p[p.len() - 1]);
            let y = t.affine(w, x, b).unwrap();
            let r = t.relu(y);
            let z = t.scale(s, r);
            let ce0 = t.cross_entropy(z, 1).unwrap();
            let ce1 = t.cross_entropy(y, 3).unwrap();
            let stacked = t.stack(&[ce0, ce1]);
            let st = t.scale(s, stacked);
            let ce2 = t.cross_entropy(st, 0).unwrap();
            let out = t.mean(&[ce0, ce1, ce2]).unwrap();
            (t, vec![w, x, b, s], out)
        };
        let (t, vars, out) = build(&p0);
        let g = t.backward(out);
        let analytic: Vec<f64> = vars.iter().flat_map(|v| g.get(*v)).collect();
        assert_fd(
            |p| {
                let (t, _, o) = build(p);
                t.scalar_value(o)
            },
            &p0,
            &analytic,
        );
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_n() {
        let mut t = Tape::new();
        let z = t.leaf(vec![0.3; 7]);
        let ce = t.cross_entropy(z, 2).unwrap();
        assert!((t.scalar_value(ce) - 7f64.ln()).abs() < 1e-14);
    }
}
