//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so reverse index order is a valid
//! topological order for backpropagation. Values and gradients are `f64`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Sum(Var),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    L2Norm {
        a: Var,
        b: Var,
        weights: Vec<f64>,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn plane_out(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output spatial size of a convolution, or `None` when the kernel does not fit.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > size + 2 * pad {
        return None;
    }
    Some((size + 2 * pad - kernel) / stride + 1)
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Inserts a tensor as a leaf; its `requires_grad` flag decides whether
    /// gradients are tracked for it.
    pub fn tensor(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&x| x as f64).collect();
        self.push(t.shape().to_vec(), value, Op::Leaf, t.requires_grad())
    }

    /// Inserts an `f64` leaf directly.
    pub fn leaf(&mut self, shape: &[usize], value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel == 0 || numel != value.len() {
            return Err(Error::shape(
                "leaf",
                format!("shape {shape:?} with {} values", value.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), value, Op::Leaf, requires_grad))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// Copies a node's value out as an `f32` tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = self.node(v);
        Tensor::new(
            node.shape.clone(),
            node.value.iter().map(|&x| x as f32).collect(),
        )
        .expect("graph node shapes are valid")
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}: expected ranks 4, 4, 1"),
            ));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c || bs[0] != f {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}: channel mismatch"),
            ));
        }
        let (ho, wo) = match (
            conv_output_size(h, kh, stride, pad),
            conv_output_size(w, kw, stride, pad),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {kh}x{kw} stride {stride} pad {pad} does not fit {h}x{w}"),
                ))
            }
        };
        let geom = ConvGeom { n, c, h, w, f, kh, kw, ho, wo };
        let cols = im2col(self.value(input), &geom, stride, pad);
        let (patch, plane) = (geom.patch(), geom.plane_out());
        let wv = self.value(weight);
        let bv = self.value(bias);
        let mut out = vec![0.0; n * f * plane];
        for s in 0..n {
            let dst = &mut out[s * f * plane..(s + 1) * f * plane];
            for (fi, row) in dst.chunks_mut(plane).enumerate() {
                row.fill(bv[fi]);
            }
            // out_s[F, P] += W[F, patch] * cols_s[patch, P]
            gemm(
                f,
                patch,
                plane,
                wv,
                (patch as isize, 1),
                &cols[s * patch * plane..(s + 1) * patch * plane],
                (plane as isize, 1),
                1.0,
                dst,
            );
        }
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            vec![n, f, ho, wo],
            out,
            Op::Conv2d { input, weight, bias, stride, pad, geom, cols },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(x);
        self.push(shape, out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(x);
        self.push(shape, out, Op::Sigmoid(x), rg)
    }

    /// Elementwise sum; axes of size 1 broadcast against the other operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("add", self.shape(a), self.shape(b))?;
        let out = broadcast_map(
            &shape,
            self.shape(a),
            self.value(a),
            self.shape(b),
            self.value(b),
            |x, y| x + y,
        );
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    /// Elementwise product; axes of size 1 broadcast against the other operand.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("mul", self.shape(a), self.shape(b))?;
        let out = broadcast_map(
            &shape,
            self.shape(a),
            self.value(a),
            self.shape(b),
            self.value(b),
            |x, y| x * y,
        );
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Mul(a, b), rg))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(x);
        self.push(shape, out, Op::AddScalar(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(x);
        self.push(shape, out, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        let rg = self.needs(x);
        self.push(vec![1], vec![total], Op::Sum(x), rg)
    }

    pub fn global_average_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::shape("global_average_pool", format!("expected rank 4, got {xs:?}")));
        }
        let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let out = self
            .value(x)
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let rg = self.needs(x);
        Ok(self.push(vec![n, c], out, Op::GlobalAvgPool(x), rg))
    }

    /// `x[N,D] * weight[D,C] + bias[C]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(weight), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::shape(
                "linear",
                format!("x {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (n, d, c) = (xs[0], xs[1], ws[1]);
        let mut out: Vec<f64> = self.value(bias).repeat(n);
        gemm(
            n,
            d,
            c,
            self.value(x),
            (d as isize, 1),
            self.value(weight),
            (c as isize, 1),
            1.0,
            &mut out,
        );
        let rg = self.needs(x) || self.needs(weight) || self.needs(bias);
        Ok(self.push(vec![n, c], out, Op::Linear { x, weight, bias }, rg))
    }

    /// Batch mean of `-log softmax(logits)[label]`, stabilised by max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {ls:?} with {} labels", labels.len()),
            ));
        }
        let c = ls[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let mut probs = Vec::with_capacity(self.value(logits).len());
        let mut loss = 0.0;
        for (row, &label) in self.value(logits).chunks(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            let log_sum = sum.ln();
            loss += log_sum - (row[label] - max);
            probs.extend(row.iter().map(|&z| ((z - max) - log_sum).exp()));
        }
        loss /= labels.len() as f64;
        let rg = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    /// Batch mean of per-sample Euclidean norms `||a_i - b_i||_2`.
    pub fn l2_norm_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.shape(a).first().copied().unwrap_or(0);
        self.weighted_l2_norm_loss(a, b, &vec![1.0; n])
    }

    /// `(1/N) * sum_i weights[i] * ||a_i - b_i||_2` over the leading batch axis.
    pub fn weighted_l2_norm_loss(&mut self, a: Var, b: Var, weights: &[f64]) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if as_ != bs {
            return Err(Error::shape("l2_norm_loss", format!("{as_:?} vs {bs:?}")));
        }
        let n = as_[0];
        if weights.len() != n {
            return Err(Error::shape(
                "l2_norm_loss",
                format!("{} weights for batch of {n}", weights.len()),
            ));
        }
        let per = self.value(a).len() / n;
        let norms: Vec<f64> = self
            .value(a)
            .chunks(per)
            .zip(self.value(b).chunks(per))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
            .collect();
        let loss = norms.iter().zip(weights).map(|(m, w)| m * w).sum::<f64>() / n as f64;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::L2Norm { a, b, weights: weights.to_vec(), norms },
            rg,
        ))
    }

    /// Backpropagates from a scalar node. Gradients are added to whatever
    /// earlier `backward` calls left, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match node.grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Relu(x) => {
                if self.needs(*x) {
                    let d = self
                        .value(*x)
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect::<Vec<_>>();
                    accumulate(grads, *x, &d);
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let d = node
                        .value
                        .iter()
                        .zip(g)
                        .map(|(&y, &gv)| gv * y * (1.0 - y))
                        .collect::<Vec<_>>();
                    accumulate(grads, *x, &d);
                }
            }
            Op::AddScalar(x) => {
                if self.needs(*x) {
                    accumulate(grads, *x, g);
                }
            }
            Op::Scale(x, c) => {
                if self.needs(*x) {
                    let d = g.iter().map(|&gv| gv * c).collect::<Vec<_>>();
                    accumulate(grads, *x, &d);
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let d = vec![g[0]; self.value(*x).len()];
                    accumulate(grads, *x, &d);
                }
            }
            Op::Add(a, b) => {
                for operand in [*a, *b] {
                    if self.needs(operand) {
                        let d = reduce_broadcast(&node.shape, g, self.shape(operand), |gv, _| gv);
                        accumulate(grads, operand, &d);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (operand, other) in [(*a, *b), (*b, *a)] {
                    if self.needs(operand) {
                        let other_full = broadcast_map(
                            &node.shape,
                            self.shape(other),
                            self.value(other),
                            self.shape(other),
                            self.value(other),
                            |x, _| x,
                        );
                        let d = reduce_broadcast(&node.shape, g, self.shape(operand), |gv, k| {
                            gv * other_full[k]
                        });
                        accumulate(grads, operand, &d);
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.needs(*x) {
                    let xs = self.shape(*x);
                    let plane = xs[2] * xs[3];
                    let mut d = Vec::with_capacity(self.value(*x).len());
                    for &gv in g {
                        d.extend(std::iter::repeat_n(gv / plane as f64, plane));
                    }
                    accumulate(grads, *x, &d);
                }
            }
            Op::Linear { x, weight, bias } => {
                let (n, d, c) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*weight)[1]);
                if self.needs(*x) {
                    // dx[N,D] = g[N,C] * W^T
                    let mut dx = vec![0.0; n * d];
                    gemm(n, c, d, g, (c as isize, 1), self.value(*weight), (1, c as isize), 0.0, &mut dx);
                    accumulate(grads, *x, &dx);
                }
                if self.needs(*weight) {
                    // dW[D,C] = x^T * g
                    let mut dw = vec![0.0; d * c];
                    gemm(d, n, c, self.value(*x), (1, d as isize), g, (c as isize, 1), 0.0, &mut dw);
                    accumulate(grads, *weight, &dw);
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    accumulate(grads, *bias, &db);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if self.needs(*logits) {
                    let c = self.shape(*logits)[1];
                    let scale = g[0] / labels.len() as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (row, &label) in labels.iter().enumerate() {
                        d[row * c + label] -= scale;
                    }
                    accumulate(grads, *logits, &d);
                }
            }
            Op::L2Norm { a, b, weights, norms } => {
                let n = norms.len();
                let per = self.value(*a).len() / n;
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = vec![0.0; av.len()];
                for s in 0..n {
                    if norms[s] == 0.0 {
                        continue;
                    }
                    let k = g[0] * weights[s] / (n as f64 * norms[s]);
                    for j in s * per..(s + 1) * per {
                        da[j] = k * (av[j] - bv[j]);
                    }
                }
                if self.needs(*b) {
                    let db: Vec<f64> = da.iter().map(|v| -v).collect();
                    accumulate(grads, *b, &db);
                }
                if self.needs(*a) {
                    accumulate(grads, *a, &da);
                }
            }
            Op::Conv2d { input, weight, bias, stride, pad, geom, cols } => {
                let (patch, plane, f) = (geom.patch(), geom.plane_out(), geom.f);
                if self.needs(*bias) {
                    let mut db = vec![0.0; f];
                    for sample in g.chunks(f * plane) {
                        for (fi, row) in sample.chunks(plane).enumerate() {
                            db[fi] += row.iter().sum::<f64>();
                        }
                    }
                    accumulate(grads, *bias, &db);
                }
                if self.needs(*weight) {
                    let mut dw = vec![0.0; f * patch];
                    for s in 0..geom.n {
                        // dW[F, patch] += g_s[F, P] * cols_s^T
                        gemm(
                            f,
                            plane,
                            patch,
                            &g[s * f * plane..(s + 1) * f * plane],
                            (plane as isize, 1),
                            &cols[s * patch * plane..(s + 1) * patch * plane],
                            (1, plane as isize),
                            1.0,
                            &mut dw,
                        );
                    }
                    accumulate(grads, *weight, &dw);
                }
                if self.needs(*input) {
                    let wv = self.value(*weight);
                    let mut dcols = vec![0.0; geom.n * patch * plane];
                    for s in 0..geom.n {
                        // dcols_s[patch, P] = W^T * g_s
                        gemm(
                            patch,
                            f,
                            plane,
                            wv,
                            (1, patch as isize),
                            &g[s * f * plane..(s + 1) * f * plane],
                            (plane as isize, 1),
                            0.0,
                            &mut dcols[s * patch * plane..(s + 1) * patch * plane],
                        );
                    }
                    let dx = col2im(&dcols, geom, *stride, *pad);
                    accumulate(grads, *input, &dx);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    match grads[v.0].as_mut() {
        Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => grads[v.0] = Some(delta.to_vec()),
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `c = alpha_c * c + a * b` with explicit (row, col) strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(a.len() >= m * k && b.len() >= k * n);
    // SAFETY: the slices cover every index reachable from the given
    // dimensions and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lays out every receptive field as a column: `[N][C*kh*kw][Ho*Wo]`.
fn im2col(x: &[f64], g: &ConvGeom, stride: usize, pad: usize) -> Vec<f64> {
    let (patch, plane) = (g.patch(), g.plane_out());
    let mut cols = vec![0.0; g.n * patch * plane];
    for s in 0..g.n {
        for ch in 0..g.c {
            let src = &x[(s * g.c + ch) * g.h * g.w..(s * g.c + ch + 1) * g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (ch * g.kh + ki) * g.kw + kj;
                    let dst = &mut cols[(s * patch + row) * plane..(s * patch + row + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[oy * g.wo + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, stride: usize, pad: usize) -> Vec<f64> {
    let (patch, plane) = (g.patch(), g.plane_out());
    let mut x = vec![0.0; g.n * g.c * g.h * g.w];
    for s in 0..g.n {
        for ch in 0..g.c {
            let dst = &mut x[(s * g.c + ch) * g.h * g.w..(s * g.c + ch + 1) * g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (ch * g.kh + ki) * g.kw + kj;
                    let src = &cols[(s * patch + row) * plane..(s * patch + row + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("rank mismatch {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// Row-major strides of `shape`, with zero stride on broadcast (size-1) axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Visits every output index with the matching flat indices into `a` and `b`.
fn for_each_broadcast(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let (sa, sb) = (broadcast_strides(a, out), broadcast_strides(b, out));
    let numel: usize = out.iter().product();
    let mut idx = vec![0usize; out.len()];
    let (mut ia, mut ib) = (0usize, 0usize);
    for k in 0..numel {
        f(k, ia, ib);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn broadcast_map(
    out: &[usize],
    a_shape: &[usize],
    a: &[f64],
    b_shape: &[usize],
    b: &[f64],
    op: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let mut result = vec![0.0; out.iter().product()];
    for_each_broadcast(out, a_shape, b_shape, |k, ia, ib| result[k] = op(a[ia], b[ib]));
    result
}

/// Sums `term(g[k], k)` over every output index that maps onto each element of `target`.
fn reduce_broadcast(out: &[usize], g: &[f64], target: &[usize], term: impl Fn(f64, usize) -> f64) -> Vec<f64> {
    let mut result = vec![0.0; target.iter().product()];
    for_each_broadcast(out, target, target, |k, it, _| result[it] += term(g[k], k));
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: &[usize], v: &[f64]) -> Var {
        g.leaf(shape, v.to_vec(), true).unwrap()
    }

    #[test]
    fn identity_kernel_conv() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 1, 3, 3], &[1.0; 9]);
        let w = leaf(&mut g, &[1, 1, 1, 1], &[1.0]);
        let b = leaf(&mut g, &[1], &[0.0]);
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert!(g.value(y).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_input_conv_yields_bias() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 2, 4, 4], &[0.0; 64]);
        let w = leaf(&mut g, &[3, 2, 3, 3], &[0.7; 54]);
        let b = leaf(&mut g, &[3], &[0.5, -1.0, 2.0]);
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        for (i, &v) in g.value(y).iter().enumerate() {
            let f = (i / 16) % 3;
            assert_eq!(v, [0.5, -1.0, 2.0][f]);
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 2, 3, 3], &[0.0; 18]);
        let w = leaf(&mut g, &[1, 1, 3, 3], &[0.0; 9]);
        let b = leaf(&mut g, &[1], &[0.0]);
        let err = g.conv2d(x, w, b, 1, 0).unwrap_err();
        assert!(err.to_string().contains("conv2d"));
        let w5 = leaf(&mut g, &[1, 2, 5, 5], &[0.0; 50]);
        assert!(g.conv2d(x, w5, b, 1, 0).is_err());
        assert!(g.conv2d(x, w5, b, 1, 1).is_ok());
    }

    #[test]
    fn relu_sigmoid_values() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3], &[-2.0, 0.0, 3.0]);
        let r = g.relu(x);
        assert_eq!(g.value(r), &[0.0, 0.0, 3.0]);
        let z = leaf(&mut g, &[1], &[0.0]);
        let s = g.sigmoid(z);
        assert_eq!(g.value(s), &[0.5]);
    }

    #[test]
    fn broadcast_rules() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut g, &[1, 3, 2, 2], &[1.0; 12]);
        let m = g.mul(a, b).unwrap();
        assert_eq!(g.shape(m), &[1, 3, 2, 2]);
        let c = leaf(&mut g, &[1, 2, 2, 2], &[1.0; 8]);
        assert!(g.mul(b, c).is_err());
        let d = leaf(&mut g, &[3, 2, 2], &[1.0; 12]);
        assert!(g.add(a, d).is_err());
    }

    #[test]
    fn gap_of_small_plane() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 5.0, 5.0, 5.0]);
        let p = g.global_average_pool(x).unwrap();
        assert_eq!(g.value(p), &[2.5, 5.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut g = Graph::new();
        let z = leaf(&mut g, &[2, 4], &[0.3; 8]);
        let l = g.softmax_cross_entropy(z, &[0, 3]).unwrap();
        assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-12);

        let z = leaf(&mut g, &[1, 3], &[20.0, 0.0, 0.0]);
        let l = g.softmax_cross_entropy(z, &[0]).unwrap();
        assert!(g.scalar(l) < 1e-6);

        assert!(matches!(
            g.softmax_cross_entropy(z, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn l2_norm_pythagorean() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[1, 2], &[3.0, 4.0]);
        let b = leaf(&mut g, &[1, 2], &[0.0, 0.0]);
        let l = g.l2_norm_loss(a, b).unwrap();
        assert_eq!(g.scalar(l), 5.0);
        let same = g.l2_norm_loss(a, a).unwrap();
        assert_eq!(g.scalar(same), 0.0);
        let c = leaf(&mut g, &[2, 1], &[0.0, 0.0]);
        assert!(g.l2_norm_loss(a, c).is_err());
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 3], &[0.5; 6]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[1.0, 2.0]);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[1.0, 2.0]);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn frozen_leaves_get_no_grad() {
        let mut g = Graph::new();
        let x = g.leaf(&[2], vec![1.0, 2.0], false).unwrap();
        let w = leaf(&mut g, &[2], &[3.0, 4.0]);
        let p = g.mul(x, w).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn conv_output_shape_law() {
        assert_eq!(conv_output_size(5, 3, 2, 1), Some(3));
        assert_eq!(conv_output_size(64, 3, 2, 1), Some(32));
        assert_eq!(conv_output_size(2, 5, 1, 1), None);
        assert_eq!(conv_output_size(4, 3, 0, 0), None);
    }
}
