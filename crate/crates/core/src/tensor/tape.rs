use super::kernels::{self, ConvGeom};
use super::{Element, Tensor};
use crate::error::{dim_err, Error, Result};

/// Smoothing added under the square root of every norm so the gradient at
/// the origin is defined (and zero).
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Element> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Conv2d { input: usize, kernel: usize, geom: ConvGeom, cols: Vec<T> },
    Relu { x: usize },
    AvgPool { x: usize, size: usize },
    Reshape { x: usize },
    Gather { x: usize, indices: Vec<usize> },
    BiasAdd { x: usize, bias: usize, channels: usize, inner: usize },
    ScaleAdd { a: usize, b: usize, lambda: T },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, factor: T },
    SoftmaxCe { logits: usize, targets: Vec<T>, probs: Vec<T>, k: usize },
    L2Norm { x: usize },
    RowNorms { x: usize, squared: bool },
    Mean { x: usize },
    Sum { x: usize },
}

impl<T: Element> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu { .. } => "relu",
            Op::AvgPool { .. } => "avgpool2d",
            Op::Reshape { .. } => "reshape",
            Op::Gather { .. } => "gather_rows",
            Op::BiasAdd { .. } => "bias_add",
            Op::ScaleAdd { .. } => "scale_add",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::L2Norm { .. } => "l2_norm",
            Op::RowNorms { .. } => "row_norms",
            Op::Mean { .. } => "mean",
            Op::Sum { .. } => "sum",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. }
            | Op::ScaleAdd { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b } => vec![a, b],
            Op::Conv2d { input, kernel, .. } => vec![input, kernel],
            Op::BiasAdd { x, bias, .. } => vec![x, bias],
            Op::SoftmaxCe { logits, .. } => vec![logits],
            Op::Relu { x }
            | Op::Gather { x, .. }
            | Op::AvgPool { x, .. }
            | Op::Reshape { x }
            | Op::Scale { x, .. }
            | Op::L2Norm { x }
            | Op::RowNorms { x, .. }
            | Op::Mean { x }
            | Op::Sum { x } => vec![x],
        }
    }
}

#[derive(Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run record of one forward pass.
///
/// Records are appended in evaluation order, so every record's inputs
/// precede it and a single reverse sweep visits them topologically.
#[derive(Debug, Default)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input; it receives a gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let needs_grad = value.requires_grad();
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value.with_requires_grad(false))
    }

    /// Copies a value into a fresh leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let mut value = self.value(v).clone();
        value.clear_grad();
        self.constant(value)
    }

    /// Handle of the record at `index`, if it exists.
    pub fn var(&self, index: usize) -> Option<Var> {
        (index < self.nodes.len()).then_some(Var(index))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient populated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs().into_iter().map(Var).collect()
    }

    /// Which relu inputs were strictly positive, in record order. Two passes
    /// with equal patterns took the same branch of every kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut bits = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                bits.extend(self.nodes[x].value.data().iter().map(|&v| v > T::zero()));
            }
        }
        bits
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = op.inputs().iter().any(|&i| self.nodes[i].needs_grad);
        let value = value.with_requires_grad(needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    // ----- forward operators -------------------------------------------------

    /// `[m x k] * [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new([m, n], out)?;
        self.push(value, Op::MatMul { a: a.0, b: b.0, m, k, n })
    }

    /// Zero-padded cross-correlation of `N x C x H x W` with `F x C x kh x kw`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(dim_err!("conv2d input {si:?} with kernel {sk:?}"));
        }
        if stride == 0 {
            return Err(dim_err!("conv2d stride must be positive"));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (f, kh, kw) = (sk[0], sk[2], sk[3]);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if kh > ph || kw > pw {
            return Err(dim_err!("conv2d kernel {kh}x{kw} larger than padded input {ph}x{pw}"));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(dim_err!(
                "conv2d output extent not integral: ({ph}-{kh})/{stride}, ({pw}-{kw})/{stride}"
            ));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad,
            ho: (ph - kh) / stride + 1,
            wo: (pw - kw) / stride + 1,
        };
        let cols = kernels::im2col(self.value(input).data(), &geom);
        let mut out = vec![T::zero(); f * geom.positions()];
        kernels::matmul_acc(
            self.value(kernel).data(),
            &cols,
            &mut out,
            f,
            geom.patch(),
            geom.positions(),
        );
        let data = kernels::fnp_to_nfp(&out, n, f, geom.ho * geom.wo);
        let value = Tensor::new([n, f, geom.ho, geom.wo], data)?;
        let cols = if self.nodes[kernel.0].needs_grad { cols } else { Vec::new() };
        self.push(value, Op::Conv2d { input: input.0, kernel: kernel.0, geom, cols })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push(value, Op::Relu { x: x.0 })
    }

    /// Non-overlapping `size x size` mean pooling over the two trailing axes.
    pub fn avgpool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || size == 0 || s[2] % size != 0 || s[3] % size != 0 {
            return Err(dim_err!("avgpool2d({size}) on {s:?}"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / size, w / size);
        let src = self.value(x).data();
        let scale = T::of(1.0 / (size * size) as f64);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            let ip = &src[plane * h * w..(plane + 1) * h * w];
            let op = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for dy in 0..size {
                        let row = &ip[(oy * size + dy) * w + ox * size..][..size];
                        for &v in row {
                            acc = acc + v;
                        }
                    }
                    op[oy * wo + ox] = acc * scale;
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        self.push(value, Op::AvgPool { x: x.0, size })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        self.push(value, Op::Reshape { x: x.0 })
    }

    /// Collapses everything after the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = [t.rows(), t.row_len()];
        self.reshape(x, &shape)
    }

    /// Rows of `x` in the order given; an index may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(x).select_rows(indices)?;
        self.push(value, Op::Gather { x: x.0, indices: indices.to_vec() })
    }

    /// Adds `bias[C]` along axis 1 of an `N x C` or `N x C x H x W` tensor.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(dim_err!("bias_add {sx:?} with bias {sb:?}"));
        }
        let channels = sx[1];
        let inner: usize = sx[2..].iter().product();
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for (chunk_idx, chunk) in data.chunks_mut(inner).enumerate() {
            let bv = b[chunk_idx % channels];
            for v in chunk {
                *v = *v + bv;
            }
        }
        let value = Tensor::new(sx.to_vec(), data)?;
        self.push(value, Op::BiasAdd { x: x.0, bias: bias.0, channels, inner })
    }

    /// Elementwise `lambda * a + (1 - lambda) * b`.
    ///
    /// Where `a` and `b` agree the result is that value exactly, so mixing a
    /// sample with itself is a bitwise identity.
    pub fn scale_add(&mut self, a: Var, b: Var, lambda: f64) -> Result<Var> {
        if !lambda.is_finite() {
            return Err(Error::Validation(format!("scale_add with lambda {lambda}")));
        }
        self.same_shape(a, b, "scale_add")?;
        let lam = T::of(lambda);
        let value = scale_add_values(self.value(a), self.value(b), lam)?;
        self.push(value, Op::ScaleAdd { a: a.0, b: b.0, lambda: lam })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: impl Fn(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let name = op(0, 0).name();
        self.same_shape(a, b, name)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, op(a.0, b.0))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let factor = T::of(factor);
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push(value, Op::Scale { x: x.0, factor })
    }

    /// Mean over rows of `-sum_k t_k * log softmax(z)_k`, with soft targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || targets.shape() != s {
            return Err(dim_err!(
                "softmax_cross_entropy logits {s:?} with targets {:?}",
                targets.shape()
            ));
        }
        let (n, k) = (s[0], s[1]);
        if k < 2 {
            return Err(Error::Validation(format!("softmax_cross_entropy needs K >= 2, got {k}")));
        }
        for (i, row) in targets.data().chunks(k).enumerate() {
            let total: f64 = row.iter().map(|v| v.as_f64()).sum();
            if (total - 1.0).abs() > 1e-5 || row.iter().any(|&v| v < T::zero()) {
                return Err(Error::Validation(format!(
                    "target row {i} is not on the simplex (sum {total})"
                )));
            }
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for i in 0..n {
            let zr = &z[i * k..(i + 1) * k];
            let tr = &targets.data()[i * k..(i + 1) * k];
            let m = zr.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(zr) {
                *p = (v - m).exp();
                sum = sum + *p;
            }
            let log_sum = sum.ln();
            let mut row_loss = T::zero();
            for j in 0..k {
                probs[i * k + j] = probs[i * k + j] / sum;
                if tr[j] != T::zero() {
                    row_loss = row_loss - tr[j] * (zr[j] - m - log_sum);
                }
            }
            total = total + row_loss;
        }
        let value = Tensor::scalar(total / T::of(n as f64));
        self.push(
            value,
            Op::SoftmaxCe { logits: logits.0, targets: targets.data().to_vec(), probs, k },
        )
    }

    /// `sqrt(sum(v^2) + eps)` over the whole tensor.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let ss: T = self.value(x).data().iter().map(|&v| v * v).sum();
        let value = Tensor::scalar((ss + T::of(NORM_EPS)).sqrt());
        self.push(value, Op::L2Norm { x: x.0 })
    }

    /// Per-row norms of an `N x D` tensor, either `sqrt(sum + eps)` or the plain
    /// sum of squares.
    pub fn row_norms(&mut self, x: Var, squared: bool) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(dim_err!("row_norms on {:?}", t.shape()));
        }
        let data: Vec<T> = t
            .data()
            .chunks(t.row_len())
            .map(|row| {
                let ss: T = row.iter().map(|&v| v * v).sum();
                if squared {
                    ss
                } else {
                    (ss + T::of(NORM_EPS)).sqrt()
                }
            })
            .collect();
        let value = Tensor::new([t.rows()], data)?;
        self.push(value, Op::RowNorms { x: x.0, squared })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum();
        let value = Tensor::scalar(s / T::of(t.len() as f64));
        self.push(value, Op::Mean { x: x.0 })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 })
    }

    // ----- reverse sweep -----------------------------------------------------

    /// Propagates d(loss)/d(value) to every recorded value that depends on a
    /// `requires_grad` leaf. Leaf gradients accumulate into existing slots;
    /// gradients from several uses of one value are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("loss was not recorded on this tape".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward from non-scalar of shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
            let node = &mut self.nodes[idx];
            let g = match (matches!(node.op, Op::Leaf), node.value.grad.take()) {
                (true, Some(mut prev)) => {
                    for (p, v) in prev.iter_mut().zip(&g) {
                        *p = *p + *v;
                    }
                    prev
                }
                _ => g,
            };
            node.value.grad = Some(g);
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].needs_grad;
        let val = |i: usize| nodes[i].value.data();
        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_bt_acc(g, val(b), &mut da, m, n, k);
                    accumulate(grads, a, da);
                }
                if wants(b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_at_acc(val(a), g, &mut db, k, m, n);
                    accumulate(grads, b, db);
                }
            }
            Op::Conv2d { input, kernel, geom, cols } => {
                let (input, kernel, geom) = (*input, *kernel, *geom);
                let p = geom.ho * geom.wo;
                let g_fnp = kernels::nfp_to_fnp(g, geom.n, geom.f, p);
                if wants(kernel) {
                    let mut dk = vec![T::zero(); geom.f * geom.patch()];
                    kernels::matmul_bt_acc(&g_fnp, cols, &mut dk, geom.f, geom.positions(), geom.patch());
                    accumulate(grads, kernel, dk);
                }
                if wants(input) {
                    let mut dcols = vec![T::zero(); geom.patch() * geom.positions()];
                    kernels::matmul_at_acc(val(kernel), &g_fnp, &mut dcols, geom.patch(), geom.f, geom.positions());
                    let mut dx = vec![T::zero(); geom.n * geom.c * geom.h * geom.w];
                    kernels::col2im(&dcols, &geom, &mut dx);
                    accumulate(grads, input, dx);
                }
            }
            &Op::Relu { x } => {
                let out = val(idx);
                let dx = g
                    .iter()
                    .zip(out)
                    .map(|(&gv, &o)| if o > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, x, dx);
            }
            &Op::AvgPool { x, size } => {
                let s = nodes[x].value.shape();
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (h / size, w / size);
                let scale = T::of(1.0 / (size * size) as f64);
                let mut dx = vec![T::zero(); nodes[x].value.len()];
                for plane in 0..s[0] * s[1] {
                    for iy in 0..h {
                        for ix in 0..w {
                            dx[plane * h * w + iy * w + ix] =
                                g[plane * ho * wo + (iy / size) * wo + ix / size] * scale;
                        }
                    }
                }
                accumulate(grads, x, dx);
            }
            &Op::Reshape { x } => accumulate(grads, x, g.to_vec()),
            Op::Gather { x, indices } => {
                let src = &nodes[*x].value;
                let w = src.row_len();
                let mut dx = vec![T::zero(); src.len()];
                for (r, &from) in indices.iter().enumerate() {
                    for (d, &v) in dx[from * w..(from + 1) * w].iter_mut().zip(&g[r * w..(r + 1) * w]) {
                        *d = *d + v;
                    }
                }
                accumulate(grads, *x, dx);
            }
            &Op::BiasAdd { x, bias, channels, inner } => {
                if wants(bias) {
                    let mut db = vec![T::zero(); channels];
                    for (chunk_idx, chunk) in g.chunks(inner).enumerate() {
                        let s: T = chunk.iter().copied().sum();
                        db[chunk_idx % channels] = db[chunk_idx % channels] + s;
                    }
                    accumulate(grads, bias, db);
                }
                if wants(x) {
                    accumulate(grads, x, g.to_vec());
                }
            }
            &Op::ScaleAdd { a, b, lambda } => {
                if wants(a) {
                    accumulate(grads, a, g.iter().map(|&v| v * lambda).collect());
                }
                if wants(b) {
                    let mu = T::one() - lambda;
                    accumulate(grads, b, g.iter().map(|&v| v * mu).collect());
                }
            }
            &Op::Add { a, b } => {
                if wants(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if wants(b) {
                    accumulate(grads, b, g.to_vec());
                }
            }
            &Op::Sub { a, b } => {
                if wants(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if wants(b) {
                    accumulate(grads, b, g.iter().map(|&v| -v).collect());
                }
            }
            &Op::Mul { a, b } => {
                if wants(a) {
                    accumulate(grads, a, g.iter().zip(val(b)).map(|(&u, &v)| u * v).collect());
                }
                if wants(b) {
                    accumulate(grads, b, g.iter().zip(val(a)).map(|(&u, &v)| u * v).collect());
                }
            }
            &Op::Scale { x, factor } => {
                accumulate(grads, x, g.iter().map(|&v| v * factor).collect());
            }
            Op::SoftmaxCe { logits, targets, probs, k } => {
                let k = *k;
                let n = probs.len() / k;
                let scale = g[0] / T::of(n as f64);
                let mut dz = vec![T::zero(); n * k];
                for i in 0..n {
                    let tr = &targets[i * k..(i + 1) * k];
                    let mass: T = tr.iter().copied().sum();
                    for j in 0..k {
                        dz[i * k + j] = (probs[i * k + j] * mass - tr[j]) * scale;
                    }
                }
                accumulate(grads, *logits, dz);
            }
            &Op::L2Norm { x } => {
                let norm = val(idx)[0];
                let s = g[0] / norm;
                accumulate(grads, x, val(x).iter().map(|&v| v * s).collect());
            }
            &Op::RowNorms { x, squared } => {
                let src = &nodes[x].value;
                let w = src.row_len();
                let out = val(idx);
                let mut dx = vec![T::zero(); src.len()];
                for (r, row) in src.data().chunks(w).enumerate() {
                    let s = if squared { g[r] * T::of(2.0) } else { g[r] / out[r] };
                    for (d, &v) in dx[r * w..(r + 1) * w].iter_mut().zip(row) {
                        *d = v * s;
                    }
                }
                accumulate(grads, x, dx);
            }
            &Op::Mean { x } => {
                let n = nodes[x].value.len();
                accumulate(grads, x, vec![g[0] / T::of(n as f64); n]);
            }
            &Op::Sum { x } => {
                accumulate(grads, x, vec![g[0]; nodes[x].value.len()]);
            }
        }
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], idx: usize, contribution: Vec<T>) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e = *e + c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// The value rule of [`Tape::scale_add`], usable outside a tape.
pub fn scale_add_values<T: Element>(a: &Tensor<T>, b: &Tensor<T>, lambda: T) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(dim_err!("scale_add: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    let mu = T::one() - lambda;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| if x == y { x } else { lambda * x + mu * y })
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}
