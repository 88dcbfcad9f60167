//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Every op appends a node holding its forward value and a closure that maps
//! the node's output gradient to contributions for its parents. `backward`
//! walks the tape once in reverse. All ops reject non-finite results.

use crate::error::{NumError, Result};
use crate::tensor::Tensor;
use rand::Rng;

/// Handle to a node on a [`Tape`]. Cheap to copy; only valid for the tape
/// that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<(usize, Tensor)>>;

struct Node {
    value: Tensor,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zeros if the leaf did not participate in the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, backward: Option<BackwardFn>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, backward, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        value: Tensor,
        backward: Option<BackwardFn>,
        requires_grad: bool,
        ctx: &str,
    ) -> Result<Var> {
        value.check_finite(ctx)?;
        Ok(self.push(value, backward, requires_grad))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf (a model parameter or input requiring gradients).
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        t.check_finite("leaf")?;
        Ok(self.push(t, None, true))
    }

    /// Non-differentiable constant.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        t.check_finite("constant")?;
        Ok(self.push(t, None, false))
    }

    pub fn scalar_const(&mut self, v: f64) -> Result<Var> {
        self.constant(Tensor::scalar(v))
    }

    // ---- elementwise binary ----

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NumError::Shape(format!(
                "{}: {:?} vs {:?}",
                op,
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        let back: Option<BackwardFn> = rg.then(|| {
            Box::new(move |g: &Tensor| vec![(a.0, g.clone()), (b.0, g.clone())]) as BackwardFn
        });
        self.push_checked(Tensor::new(shape, out)?, back, rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        let back: Option<BackwardFn> = rg.then(|| {
            Box::new(move |g: &Tensor| {
                let neg: Vec<f64> = g.data().iter().map(|v| -v).collect();
                vec![
                    (a.0, g.clone()),
                    (b.0, Tensor::new(g.shape().to_vec(), neg).unwrap()),
                ]
            }) as BackwardFn
        });
        self.push_checked(Tensor::new(shape, out)?, back, rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        let back: Option<BackwardFn> = rg.then(|| {
            Box::new(move |g: &Tensor| {
                let ga: Vec<f64> = g.data().iter().zip(bv.data()).map(|(gv, y)| gv * y).collect();
                let gb: Vec<f64> = g.data().iter().zip(av.data()).map(|(gv, x)| gv * x).collect();
                vec![
                    (a.0, Tensor::new(g.shape().to_vec(), ga).unwrap()),
                    (b.0, Tensor::new(g.shape().to_vec(), gb).unwrap()),
                ]
            }) as BackwardFn
        });
        self.push_checked(Tensor::new(shape, out)?, back, rg, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x / y).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        let back: Option<BackwardFn> = rg.then(|| {
            Box::new(move |g: &Tensor| {
                let ga: Vec<f64> = g.data().iter().zip(bv.data()).map(|(gv, y)| gv / y).collect();
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(av.data().iter().zip(bv.data()))
                    .map(|(gv, (x, y))| -gv * x / (y * y))
                    .collect();
                vec![
                    (a.0, Tensor::new(g.shape().to_vec(), ga).unwrap()),
                    (b.0, Tensor::new(g.shape().to_vec(), gb).unwrap()),
                ]
            }) as BackwardFn
        });
        self.push_checked(Tensor::new(shape, out)?, back, rg, "div")
    }

    // ---- elementwise unary ----

    fn unary<F, G>(&mut self, a: Var, f: F, df: G, name: &str) -> Result<Var>
    where
        F: Fn(f64) -> f64,
        G: Fn(f64, f64) -> f64 + 'static, // (input, output) -> d out/d in
    {
        let av = self.value(a).clone();
        let out: Vec<f64> = av.data().iter().map(|&x| f(x)).collect();
        let shape = av.shape().to_vec();
        let outv = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        let back: Option<BackwardFn> = if rg {
            let outc = outv.clone();
            Some(Box::new(move |g: &Tensor| {
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(av.data().iter().zip(outc.data()))
                    .map(|(gv, (&x, &y))| gv * df(x, y))
                    .collect();
                vec![(a.0, Tensor::new(g.shape().to_vec(), ga).unwrap())]
            }))
        } else {
            None
        };
        self.push_checked(outv, back, rg, name)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| -x, |_, _| -1.0, "neg")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y, "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y), "sigmoid")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, |_, y| y, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, |x, _| 1.0 / x, "log")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::sqrt, |_, y| 0.5 / y, "sqrt")
    }

    /// Elementwise `a * k + b` with constant scalars.
    pub fn affine(&mut self, a: Var, k: f64, b: f64) -> Result<Var> {
        self.unary(a, move |x| x * k + b, move |_, _| k, "affine")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.affine(a, k, 0.0)
    }

    // ---- reductions and contractions ----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let s: f64 = av.data().iter().sum();
        let rg = self.rg(a);
        let shape = av.shape().to_vec();
        let back: Option<BackwardFn> = rg.then(|| {
            Box::new(move |g: &Tensor| {
                vec![(a.0, Tensor::full(shape.clone(), g.item()))]
            }) as BackwardFn
        });
        self.push_checked(Tensor::scalar(s), back, rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
        let rg = self.rg(a) || self.rg(b);
        let back: Option<BackwardFn> = rg.then(|| {
            Box::new(move |g: &Tensor| {
                let gv = g.item();
                let ga: Vec<f64> = bv.data().iter().map(|y| gv * y).collect();
                let gb: Vec<f64> = av.data().iter().map(|x| gv * x).collect();
                vec![
                    (a.0, Tensor::new(bv.shape().to_vec(), ga).unwrap()),
                    (b.0, Tensor::new(av.shape().to_vec(), gb).unwrap()),
                ]
            }) as BackwardFn
        });
        self.push_checked(Tensor::scalar(s), back, rg, "dot")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = av.matmul(&bv)?;
        let rg = self.rg(a) || self.rg(b);
        let back: Option<BackwardFn> = rg.then(|| {
            Box::new(move |g: &Tensor| {
                // dA = g · Bᵀ ; dB = Aᵀ · g
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g.data()[i * n + j] * bv.data()[p * n + j];
                        }
                        ga[i * k + p] = s;
                    }
                }
                let mut gb = vec![0.0; k * n];
                for p in 0..k {
                    for j in 0..n {
                        let mut s = 0.0;
                        for i in 0..m {
                            s += av.data()[i * k + p] * g.data()[i * n + j];
                        }
                        gb[p * n + j] = s;
                    }
                }
                vec![
                    (a.0, Tensor::new(vec![m, k], ga).unwrap()),
                    (b.0, Tensor::new(vec![k, n], gb).unwrap()),
                ]
            }) as BackwardFn
        });
        self.push_checked(out, back, rg, "matmul")
    }

    /// `W (m×k) · x (k) -> (m)`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let wv = self.value(w).clone();
        let xv = self.value(x).clone();
        if wv.shape().len() != 2 || xv.shape().len() != 1 || wv.cols() != xv.len() {
            return Err(NumError::Shape(format!(
                "matvec {:?} x {:?}",
                wv.shape(),
                xv.shape()
            )));
        }
        let (m, k) = (wv.rows(), wv.cols());
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &wv.data()[i * k..(i + 1) * k];
            out[i] = row.iter().zip(xv.data()).map(|(a, b)| a * b).sum();
        }
        let rg = self.rg(w) || self.rg(x);
        let back: Option<BackwardFn> = rg.then(|| {
            Box::new(move |g: &Tensor| {
                let mut gw = vec![0.0; m * k];
                for i in 0..m {
                    let gi = g.data()[i];
                    for p in 0..k {
                        gw[i * k + p] = gi * xv.data()[p];
                    }
                }
                let mut gx = vec![0.0; k];
                for p in 0..k {
                    let mut s = 0.0;
                    for i in 0..m {
                        s += wv.data()[i * k + p] * g.data()[i];
                    }
                    gx[p] = s;
                }
                vec![
                    (w.0, Tensor::new(vec![m, k], gw).unwrap()),
                    (x.0, Tensor::new(vec![k], gx).unwrap()),
                ]
            }) as BackwardFn
        });
        self.push_checked(Tensor::vector(out), back, rg, "matvec")
    }

    /// `x (m) · W (m×k) -> (k)`: transposed matrix-vector product, used for
    /// expectation lookups over row-major embedding tables.
    pub fn matvec_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        if wv.shape().len() != 2 || xv.shape().len() != 1 || wv.rows() != xv.len() {
            return Err(NumError::Shape(format!(
                "matvec_t {:?} x {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (m, k) = (wv.rows(), wv.cols());
        let mut out = vec![0.0; k];
        for i in 0..m {
            let xi = xv.data()[i];
            if xi == 0.0 {
                continue;
            }
            for (o, wj) in out.iter_mut().zip(&wv.data()[i * k..(i + 1) * k]) {
                *o += xi * wj;
            }
        }
        let rg = self.rg(x) || self.rg(w);
        let back: Option<BackwardFn> = rg.then(|| {
            Box::new(move |g: &Tensor| {
                let mut gx = vec![0.0; m];
                for i in 0..m {
                    gx[i] = wv.data()[i * k..(i + 1) * k]
                        .iter()
                        .zip(g.data())
                        .map(|(a, b)| a * b)
                        .sum();
                }
                let mut gw = vec![0.0; m * k];
                for i in 0..m {
                    let xi = xv.data()[i];
                    for j in 0..k {
                        gw[i * k + j] = xi * g.data()[j];
                    }
                }
                vec![
                    (x.0, Tensor::vector(gx)),
                    (w.0, Tensor::new(vec![m, k], gw).unwrap()),
                ]
            }) as BackwardFn
        });
        self.push_checked(Tensor::vector(out), back, rg, "matvec_t")
    }

    /// Broadcast a scalar over a vector: `s * v`.
    pub fn smul(&mut self, s: Var, v: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(NumError::Shape("smul: first arg must be scalar".into()));
        }
        let sv = self.value(s).item();
        let vv = self.value(v).clone();
        let out: Vec<f64> = vv.data().iter().map(|x| sv * x).collect();
        let shape = vv.shape().to_vec();
        let rg = self.rg(s) || self.rg(v);
        let back: Option<BackwardFn> = rg.then(|| {
            Box::new(move |g: &Tensor| {
                let gs: f64 = g.data().iter().zip(vv.data()).map(|(gv, x)| gv * x).sum();
                let gvv: Vec<f64> = g.data().iter().map(|gv| gv * sv).collect();
                vec![
                    (s.0, Tensor::scalar(gs)),
                    (v.0, Tensor::new(g.shape().to_vec(), gvv).unwrap()),
                ]
            }) as BackwardFn
        });
        self.push_checked(Tensor::new(shape, out)?, back, rg, "smul")
    }

    // ---- structural ----

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumError::Shape("concat of zero parts".into()));
        }
        let mut out = Vec::new();
        let mut lens = Vec::with_capacity(parts.len());
        let mut rg = false;
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 1 {
                return Err(NumError::Shape("concat expects rank-1 tensors".into()));
            }
            lens.push(v.len());
            out.extend_from_slice(v.data());
            rg |= self.rg(p);
        }
        let idxs: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let back: Option<BackwardFn> = rg.then(|| {
            Box::new(move |g: &Tensor| {
                let mut res = Vec::with_capacity(idxs.len());
                let mut off = 0;
                for (&i, &l) in idxs.iter().zip(&lens) {
                    res.push((i, Tensor::vector(g.data()[off..off + l].to_vec())));
                    off += l;
                }
                res
            }) as BackwardFn
        });
        self.push_checked(Tensor::vector(out), back, rg, "concat")
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 1 || start + len > av.len() {
            return Err(NumError::Shape(format!(
                "slice [{start}, {start}+{len}) of length {}",
                av.len()
            )));
        }
        let total = av.len();
        let out = av.data()[start..start + len].to_vec();
        let rg = self.rg(a);
        let back: Option<BackwardFn> = rg.then(|| {
            Box::new(move |g: &Tensor| {
                let mut full = vec![0.0; total];
                full[start..start + len].copy_from_slice(g.data());
                vec![(a.0, Tensor::vector(full))]
            }) as BackwardFn
        });
        self.push_checked(Tensor::vector(out), back, rg, "slice")
    }

    /// Row lookup into a matrix (embedding lookup). Gradient scatters into
    /// the selected row.
    pub fn lookup_row(&mut self, m: Var, row: usize) -> Result<Var> {
        let mv = self.value(m);
        if mv.shape().len() != 2 || row >= mv.rows() {
            return Err(NumError::Shape(format!(
                "lookup_row {row} of {:?}",
                mv.shape()
            )));
        }
        let (r, c) = (mv.rows(), mv.cols());
        let out = mv.data()[row * c..(row + 1) * c].to_vec();
        let rg = self.rg(m);
        let back: Option<BackwardFn> = rg.then(|| {
            Box::new(move |g: &Tensor| {
                let mut full = vec![0.0; r * c];
                full[row * c..(row + 1) * c].copy_from_slice(g.data());
                vec![(m.0, Tensor::new(vec![r, c], full).unwrap())]
            }) as BackwardFn
        });
        self.push_checked(Tensor::vector(out), back, rg, "lookup_row")
    }

    // ---- softmax family ----

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 1 {
            return Err(NumError::Shape("softmax expects rank-1".into()));
        }
        let max = av.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = av.data().iter().map(|x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let outv = Tensor::vector(out);
        let rg = self.rg(a);
        let back: Option<BackwardFn> = if rg {
            let y = outv.clone();
            Some(Box::new(move |g: &Tensor| {
                let gy: f64 = g.data().iter().zip(y.data()).map(|(gv, yv)| gv * yv).sum();
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| yv * (gv - gy))
                    .collect();
                vec![(a.0, Tensor::vector(ga))]
            }))
        } else {
            None
        };
        self.push_checked(outv, back, rg, "softmax")
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 1 {
            return Err(NumError::Shape("log_softmax expects rank-1".into()));
        }
        let max = av.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logz = av
            .data()
            .iter()
            .map(|x| (x - max).exp())
            .sum::<f64>()
            .ln()
            + max;
        let out: Vec<f64> = av.data().iter().map(|x| x - logz).collect();
        let outv = Tensor::vector(out);
        let rg = self.rg(a);
        let back: Option<BackwardFn> = if rg {
            let ls = outv.clone();
            Some(Box::new(move |g: &Tensor| {
                let gsum: f64 = g.data().iter().sum();
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(ls.data())
                    .map(|(gv, l)| gv - l.exp() * gsum)
                    .collect();
                vec![(a.0, Tensor::vector(ga))]
            }))
        } else {
            None
        };
        self.push_checked(outv, back, rg, "log_softmax")
    }

    /// Inverted dropout: survivors scaled by 1/(1-p) in training mode,
    /// identity in eval mode.
    pub fn dropout<R: Rng>(
        &mut self,
        a: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumError::Shape(format!("dropout rate {p} out of [0,1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mv = self.constant(Tensor::new(self.value(a).shape().to_vec(), mask)?)?;
        self.mul(a, mv)
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Returns per-node gradients; leaves
    /// that did not participate get `None` (read as zeros).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(NumError::Shape("backward: loss must be scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(back) = &self.nodes[i].backward {
                for (pi, contrib) in back(&g) {
                    if !self.nodes[pi].requires_grad && self.nodes[pi].backward.is_none() {
                        continue;
                    }
                    match &mut grads[pi] {
                        Some(acc) => {
                            for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                                *a += c;
                            }
                        }
                        None => grads[pi] = Some(contrib),
                    }
                }
            }
            // keep leaf gradients, drop intermediates that are done
            if self.nodes[i].backward.is_none() && self.nodes[i].requires_grad {
                grads[i] = Some(g);
            }
        }
        for g in grads.iter().flatten() {
            g.check_finite("backward")?;
        }
        Ok(Gradients { grads })
    }
}
