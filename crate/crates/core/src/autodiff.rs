//! Minimal tape-based reverse-mode automatic differentiation over dense
//! vectors and matrices.
//!
//! Every node stores its forward value eagerly, so a [`Tape`] is always in
//! topological order: an operation can only reference nodes that already
//! exist. [`Tape::backward`] walks the tape once in reverse and returns the
//! gradient of a scalar node with respect to every node.
//!
//! ```
//! use fedfleet::autodiff::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.scalar(3.0);
//! let y = tape.square(x);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x), &[6.0]);
//! ```

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatVec(Var, Var),
    MatMul(Var, Var),
    AddCol(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp(Var, f64, f64),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    fn push(&mut self, op: Op, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            op,
            value,
            rows,
            cols,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    /// Row-major `rows x cols` input node.
    pub fn matrix(&mut self, values: Vec<f64>, rows: usize, cols: usize) -> Result<Var> {
        if values.len() != rows * cols {
            return Err(Error::Contract(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        Ok(self.push(Op::Leaf, values, rows, cols))
    }

    /// Column vector input node.
    pub fn vector(&mut self, values: Vec<f64>) -> Var {
        let n = values.len();
        self.push(Op::Leaf, values, n, 1)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(Op::Leaf, vec![x], 1, 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Contract(format!(
                "{what}: shape {sa:?} does not match {sb:?}"
            )));
        }
        Ok(sa)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, what)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(self.push(op, value, r, c))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.shape(a);
        let value = self.value(a).iter().map(|x| f(*x)).collect();
        self.push(op, value, r, c)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Matrix (`r x c`) times column vector (`c`).
    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var> {
        let (r, c) = self.shape(m);
        let (xr, xc) = self.shape(x);
        if xc != 1 || xr != c {
            return Err(Error::Contract(format!(
                "matvec: {r}x{c} matrix times {xr}x{xc} operand"
            )));
        }
        let mv = self.value(m);
        let xv = self.value(x);
        let value = mv
            .chunks_exact(c)
            .map(|row| row.iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        Ok(self.push(Op::MatVec(m, x), value, r, 1))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), stable_sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), stable_softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|x| !(**x > 0.0)) {
            return Err(Error::Numeric(format!("log of non-positive value {x}")));
        }
        Ok(self.map(a, Op::Log(a), f64::ln))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    /// Element-wise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(Op::Sum(a), vec![s], 1, 1)
    }

    /// Stack nodes with equal column counts vertically.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.shape(p).1,
            None => return Err(Error::Contract("concat of nothing".into())),
        };
        let mut value = Vec::new();
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(Error::Contract(format!(
                    "concat: parts have {} and {cols} columns",
                    self.shape(p).1
                )));
            }
            value.extend_from_slice(self.value(p));
        }
        let rows = value.len() / cols;
        Ok(self.push(Op::Concat(parts.to_vec()), value, rows, cols))
    }

    /// Rows `start..start + len`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(Error::Contract(format!(
                "slice rows {start}..{} of a {r}x{c} node",
                start + len
            )));
        }
        let value = self.value(a)[start * c..(start + len) * c].to_vec();
        Ok(self.push(Op::Slice(a, start * c), value, len, c))
    }

    /// Matrix product of an `r x k` and a `k x c` node.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.shape(a);
        let (bk, c) = self.shape(b);
        if bk != k {
            return Err(Error::Contract(format!("matmul: {r}x{k} times {bk}x{c}")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            let out = &mut value[i * c..(i + 1) * c];
            for (p, aip) in av[i * k..(i + 1) * k].iter().enumerate() {
                if *aip != 0.0 {
                    for (o, bpj) in out.iter_mut().zip(&bv[p * c..(p + 1) * c]) {
                        *o += aip * bpj;
                    }
                }
            }
        }
        Ok(self.push(Op::MatMul(a, b), value, r, c))
    }

    /// Add the column vector `b` to every column of `x`.
    pub fn add_col(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(b) != (r, 1) {
            return Err(Error::Contract(format!(
                "add_col: {:?} bias for a {r}x{c} node",
                self.shape(b)
            )));
        }
        let bv = self.value(b);
        let value = self
            .value(x)
            .chunks_exact(c)
            .zip(bv)
            .flat_map(|(row, bi)| row.iter().map(move |v| v + bi))
            .collect();
        Ok(self.push(Op::AddCol(x, b), value, r, c))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[loss.0][0] = 1.0;
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = std::mem::take(&mut grads[id]);
            if g.iter().all(|x| *x == 0.0) {
                grads[id] = g;
                continue;
            }
            let y = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &g, |_, g| g);
                    accumulate(&mut grads[b.0], &g, |_, g| g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], &g, |_, g| g);
                    accumulate(&mut grads[b.0], &g, |_, g| -g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    accumulate(&mut grads[a.0], &g, |i, g| g * vb[i]);
                    accumulate(&mut grads[b.0], &g, |i, g| g * va[i]);
                }
                Op::MatVec(m, x) => {
                    let mn = &self.nodes[m.0];
                    let xv = &self.nodes[x.0].value;
                    let c = mn.cols;
                    {
                        let gm = &mut grads[m.0];
                        for (i, gi) in g.iter().enumerate() {
                            if *gi != 0.0 {
                                for (gmij, xj) in gm[i * c..(i + 1) * c].iter_mut().zip(xv) {
                                    *gmij += gi * xj;
                                }
                            }
                        }
                    }
                    let gx = &mut grads[x.0];
                    for (i, gi) in g.iter().enumerate() {
                        if *gi != 0.0 {
                            for (gxj, mij) in gx.iter_mut().zip(&mn.value[i * c..(i + 1) * c]) {
                                *gxj += gi * mij;
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (an, bn) = (&self.nodes[a.0], &self.nodes[b.0]);
                    let (r, k, c) = (an.rows, an.cols, bn.cols);
                    {
                        let ga = &mut grads[a.0];
                        for i in 0..r {
                            let gi = &g[i * c..(i + 1) * c];
                            for p in 0..k {
                                let bp = &bn.value[p * c..(p + 1) * c];
                                ga[i * k + p] += gi.iter().zip(bp).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                    let gb = &mut grads[b.0];
                    for i in 0..r {
                        let gi = &g[i * c..(i + 1) * c];
                        for p in 0..k {
                            let aip = an.value[i * k + p];
                            if aip != 0.0 {
                                for (d, x) in gb[p * c..(p + 1) * c].iter_mut().zip(gi) {
                                    *d += aip * x;
                                }
                            }
                        }
                    }
                }
                Op::AddCol(x, b) => {
                    let c = self.nodes[x.0].cols;
                    accumulate(&mut grads[x.0], &g, |_, g| g);
                    for (d, row) in grads[b.0].iter_mut().zip(g.chunks_exact(c)) {
                        *d += row.iter().sum::<f64>();
                    }
                }
                Op::Tanh(a) => accumulate(&mut grads[a.0], &g, |i, g| g * (1.0 - y[i] * y[i])),
                Op::Sigmoid(a) => accumulate(&mut grads[a.0], &g, |i, g| g * y[i] * (1.0 - y[i])),
                Op::Softplus(a) => {
                    let x = &self.nodes[a.0].value;
                    accumulate(&mut grads[a.0], &g, |i, g| g * stable_sigmoid(x[i]))
                }
                Op::Exp(a) => accumulate(&mut grads[a.0], &g, |i, g| g * y[i]),
                Op::Log(a) => {
                    let x = &self.nodes[a.0].value;
                    accumulate(&mut grads[a.0], &g, |i, g| g / x[i])
                }
                Op::Square(a) => {
                    let x = &self.nodes[a.0].value;
                    accumulate(&mut grads[a.0], &g, |i, g| 2.0 * x[i] * g)
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    for v in grads[a.0].iter_mut() {
                        *v += g0;
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        accumulate(&mut grads[p.0], &g[off..off + n], |_, g| g);
                        off += n;
                    }
                }
                Op::Slice(a, start) => {
                    let dst = &mut grads[a.0][*start..*start + g.len()];
                    for (d, s) in dst.iter_mut().zip(&g) {
                        *d += s;
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], &g, |_, g| c * g),
                Op::AddScalar(a) => accumulate(&mut grads[a.0], &g, |_, g| g),
                Op::Clamp(a, lo, hi) => {
                    let x = &self.nodes[a.0].value;
                    accumulate(&mut grads[a.0], &g, |i, g| {
                        if x[i] < *lo || x[i] > *hi {
                            0.0
                        } else {
                            g
                        }
                    })
                }
            }
            grads[id] = g;
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(dst: &mut [f64], g: &[f64], f: impl Fn(usize, f64) -> f64) {
    for (i, (d, gi)) in dst.iter_mut().zip(g).enumerate() {
        *d += f(i, *gi);
    }
}

/// Largest `|analytic - central difference| / max(1, |analytic|)` over all
/// coordinates of `x`. `f` returns the value and its analytic gradient.
pub fn finite_diff_check<F>(f: F, x: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step must be positive, got {h}")));
    }
    let (v0, analytic) = f(x)?;
    if !v0.is_finite() {
        return Err(Error::Numeric("function value is not finite".into()));
    }
    if analytic.len() != x.len() {
        return Err(Error::Contract(format!(
            "gradient of length {} for {} inputs",
            analytic.len(),
            x.len()
        )));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let (fp, _) = f(&probe)?;
        probe[i] = x[i] - h;
        let (fm, _) = f(&probe)?;
        probe[i] = x[i];
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value probing coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    #[test]
    fn forward_examples() {
        let mut t = Tape::new();
        let z = t.scalar(0.0);
        let th = t.tanh(z);
        let sg = t.sigmoid(z);
        assert_eq!(t.value(th), &[0.0]);
        assert_eq!(t.value(sg), &[0.5]);
        let eye = t.matrix(vec![1.0, 0.0, 0.0, 1.0], 2, 2).unwrap();
        let x = t.vector(vec![3.0, 4.0]);
        let y = t.matvec(eye, x).unwrap();
        assert_eq!(t.value(y), &[3.0, 4.0]);
    }

    #[test]
    fn shape_and_domain_errors() {
        let mut t = Tape::new();
        let a = t.vector(vec![1.0, 2.0]);
        let b = t.vector(vec![1.0, 2.0, 3.0]);
        assert!(matches!(t.add(a, b), Err(Error::Contract(_))));
        let m = t.matrix(vec![0.0; 6], 2, 3).unwrap();
        assert!(matches!(t.matvec(m, a), Err(Error::Contract(_))));
        assert!(t.matrix(vec![0.0; 5], 2, 3).is_err());
        let neg = t.vector(vec![1.0, 0.0]);
        assert!(matches!(t.log(neg), Err(Error::Numeric(_))));
        assert!(matches!(t.backward(a), Err(Error::Contract(_))));
        assert!(t.slice(a, 1, 2).is_err());
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.scalar(3.0);
        let y = t.square(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x), &[6.0]);
        assert_eq!(g.get(y), &[1.0]);
    }

    #[test]
    fn disconnected_leaf_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.scalar(2.0);
        let unused = t.vector(vec![1.0, 5.0]);
        let y = t.exp(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(unused), &[0.0, 0.0]);
        assert!((g.get(x)[0] - 2f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn nonlinearity_derivatives_at_zero() {
        let mut t = Tape::new();
        let x = t.scalar(0.0);
        let a = t.tanh(x);
        let ga = t.backward(a).unwrap();
        assert_eq!(ga.get(x), &[1.0]);
        let s = t.sigmoid(x);
        let gs = t.backward(s).unwrap();
        assert_eq!(gs.get(x), &[0.25]);
        let sp = t.softplus(x);
        assert!((t.value(sp)[0] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(t.backward(sp).unwrap().get(x), &[0.5]);
        let e = t.exp(x);
        assert_eq!(t.backward(e).unwrap().get(x), &[1.0]);
    }

    #[test]
    fn stable_forms_survive_extremes() {
        let mut t = Tape::new();
        let x = t.vector(vec![-800.0, 800.0]);
        let s = t.sigmoid(x);
        let p = t.softplus(x);
        assert_eq!(t.value(s), &[0.0, 1.0]);
        assert_eq!(t.value(p)[0], 0.0);
        assert_eq!(t.value(p)[1], 800.0);
    }

    fn random_vec(rng: &mut crate::rng::Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    // loss = sum(tanh(W x)) with W, x as the differentiated inputs.
    fn tanh_layer(input: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut t = Tape::new();
        let w = t.matrix(input[..16].to_vec(), 4, 4)?;
        let x = t.vector(input[16..].to_vec());
        let y = t.matvec(w, x)?;
        let a = t.tanh(y);
        let l = t.sum(a);
        let g = t.backward(l)?;
        let mut grad = g.get(w).to_vec();
        grad.extend_from_slice(g.get(x));
        Ok((t.value(l)[0], grad))
    }

    #[test]
    fn tanh_layer_matches_central_differences() {
        let mut rng = rng_from(5, &[]);
        for _ in 0..20 {
            let input = random_vec(&mut rng, 20);
            let err = finite_diff_check(tanh_layer, &input, 1e-5).unwrap();
            assert!(err < 1e-5, "relative error {err}");
        }
    }

    #[test]
    fn finite_diff_check_examples() {
        let quad = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let v = 3.0 * x[0] * x[0] + x[0] * x[1] - 2.0 * x[1] * x[1] + 4.0;
            Ok((v, vec![6.0 * x[0] + x[1], x[0] - 4.0 * x[1]]))
        };
        assert!(finite_diff_check(quad, &[0.7, -1.3], 1e-3).unwrap() <= 1e-8);
        let constant = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((2.5, vec![0.0, 0.0])) };
        assert_eq!(finite_diff_check(constant, &[1.0, 2.0], 1e-4).unwrap(), 0.0);
        assert!(finite_diff_check(constant, &[1.0], 0.0).is_err());
        let bad = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((f64::NAN, vec![0.0])) };
        assert!(matches!(finite_diff_check(bad, &[1.0], 1e-4), Err(Error::Numeric(_))));
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let mut rng = rng_from(9, &[]);
        for _ in 0..10 {
            let xs = random_vec(&mut rng, 5);
            let mut t = Tape::new();
            let x = t.vector(xs.clone());
            let a = t.tanh(x);
            let fa = t.sum(a);
            let sq = t.square(x);
            let fb = t.sum(sq);
            let both = t.add(fa, fb).unwrap();
            let g_sum = t.backward(both).unwrap().get(x).to_vec();
            let ga = t.backward(fa).unwrap().get(x).to_vec();
            let gb = t.backward(fb).unwrap().get(x).to_vec();
            for i in 0..5 {
                assert!((g_sum[i] - ga[i] - gb[i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn concat_slice_clamp_route_gradients() {
        let mut t = Tape::new();
        let a = t.vector(vec![1.0, 2.0]);
        let b = t.vector(vec![-3.0]);
        let c = t.concat(&[a, b]).unwrap();
        let s = t.slice(c, 1, 2).unwrap();
        let cl = t.clamp(s, -1.0, 10.0);
        let sc = t.scale(cl, 2.0);
        let sh = t.add_scalar(sc, 1.0);
        let l = t.sum(sh);
        assert_eq!(t.value(cl), &[2.0, -1.0]);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(a), &[0.0, 2.0]);
        assert_eq!(g.get(b), &[0.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let input: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let (v1, g1) = tanh_layer(&input).unwrap();
        let (v2, g2) = tanh_layer(&input).unwrap();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    // loss = sum(sigmoid(W X + b) * Y) over a 3x4 weight, 4x5 batch, 3-bias.
    fn batched_layer(input: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut t = Tape::new();
        let w = t.matrix(input[..12].to_vec(), 3, 4)?;
        let x = t.matrix(input[12..32].to_vec(), 4, 5)?;
        let b = t.vector(input[32..35].to_vec());
        let y = t.matrix((0..15).map(|i| (i as f64 * 0.37).sin()).collect(), 3, 5)?;
        let wx = t.matmul(w, x)?;
        let pre = t.add_col(wx, b)?;
        let top = t.slice(pre, 1, 2)?;
        let bottom = t.slice(pre, 0, 1)?;
        let stacked = t.concat(&[top, bottom])?;
        let act = t.sigmoid(stacked);
        let prod = t.mul(act, y)?;
        let l = t.sum(prod);
        let g = t.backward(l)?;
        let mut grad = g.get(w).to_vec();
        grad.extend_from_slice(g.get(x));
        grad.extend_from_slice(g.get(b));
        Ok((t.value(l)[0], grad))
    }

    #[test]
    fn batched_ops_match_central_differences() {
        let mut rng = rng_from(13, &[]);
        for _ in 0..10 {
            let input = random_vec(&mut rng, 35);
            let err = finite_diff_check(batched_layer, &input, 1e-5).unwrap();
            assert!(err < 1e-6, "relative error {err}");
        }
    }

    #[test]
    fn matmul_agrees_with_matvec_per_column() {
        let mut t = Tape::new();
        let m = t.matrix(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3).unwrap();
        let x = t.matrix(vec![1.0, 0.5, -1.0, 2.0, 0.0, 1.0], 3, 2).unwrap();
        let y = t.matmul(m, x).unwrap();
        let c0 = t.vector(vec![1.0, -1.0, 0.0]);
        let y0 = t.matvec(m, c0).unwrap();
        assert_eq!(t.shape(y), (2, 2));
        assert_eq!(t.value(y)[0], t.value(y0)[0]);
        assert_eq!(t.value(y)[2], t.value(y0)[1]);
        let bad = t.vector(vec![1.0, 2.0]);
        assert!(t.matmul(m, bad).is_err());
        assert!(t.add_col(y, bad).is_ok());
        assert!(t.add_col(y, c0).is_err());
    }
}
