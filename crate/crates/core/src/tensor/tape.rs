use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type ElementGrad = Box<dyn Fn(f32) -> f32 + Send + Sync>;

enum Op {
    /// Leaf, or an op whose inputs need no gradient.
    Leaf,
    Matmul { a: Var, b: Var, a_t: bool, b_t: bool, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias { x: Var, bias: Var },
    MulByScalarVar { x: Var, s: Var },
    Scale { x: Var, c: f32 },
    Shift { x: Var },
    Reshape { x: Var },
    Transpose { x: Var, rows: usize, cols: usize },
    SoftmaxRows { x: Var, cols: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Gelu { x: Var },
    LeakyRelu { x: Var, slope: f32 },
    Sigmoid { x: Var },
    Softplus { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    MaxAll { x: Var, index: usize },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cout: usize, cols: Vec<f32> },
    ConvTranspose2x2 { x: Var, w: Var, b: Var, h: usize, w_in: usize, cin: usize, cout: usize },
    Resize { x: Var, from: (usize, usize, usize), to: (usize, usize) },
    AvgPool2 { x: Var, h: usize, w: usize, c: usize },
    ConcatRows { parts: Vec<(Var, usize)> },
    SliceRows { x: Var, start: usize, len: usize, cols: usize },
    SliceCols { x: Var, start: usize, len: usize, cols: usize },
    ConcatCols { parts: Vec<(Var, usize)>, rows: usize },
    BceWithLogits { x: Var, target: Vec<f32> },
    Elementwise { x: Var, grad: ElementGrad },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so inputs always precede their
/// consumers and a reverse sweep is a valid topological order. One tape per
/// thread; tapes are cheap to create and are dropped after backward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradients are only accumulated for leaves created with
    /// `requires_grad = true` and the ops that depend on them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: impl FnOnce() -> Op) -> Var {
        debug_assert!(
            value.all_finite() || inputs.iter().any(|&i| !self.value(i).all_finite()),
            "non-finite output {value:?} from finite inputs"
        );
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op() } else { Op::Leaf };
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: impl FnOnce() -> Op) -> Var {
        let out = self.value(x).map(f);
        self.push(out, &[x], op)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    /// `aᵀ · b`
    pub fn t_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, false)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, a_t: bool, b_t: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ([ar, ac], [br, bc]) = match (av.dims2("matmul"), bv.dims2("matmul")) {
            (Ok(x), Ok(y)) => (x, y),
            _ => return Err(Error::shape("matmul", av.shape(), bv.shape())),
        };
        let (m, k) = if a_t { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, av.data(), a_t, bv.data(), b_t, &mut out, false);
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(value, &[a, b], || Op::Matmul { a, b, a_t, b_t, m, k, n }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose2()?;
        let [cols, rows] = value.dims2("transpose")?;
        Ok(self.push(value, &[x], || Op::Transpose { x, rows, cols }))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, &[x], || Op::Reshape { x }))
    }

    // ---- elementwise binary ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, &[a, b], || Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, &[a, b], || Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, &[a, b], || Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        Ok(self.push(value, &[a, b], || Op::Div(a, b)))
    }

    /// Adds a length-`C` vector to every position of a `[..., C]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.last_dim();
        if bv.numel() != c {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(value, &[x, bias], || Op::AddBias { x, bias }))
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(Error::shape("mul_scalar", self.value(x).shape(), sv.shape()));
        }
        let k = sv.item();
        let value = self.value(x).map(|v| v * k);
        Ok(self.push(value, &[x, s], || Op::MulByScalarVar { x, s }))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, |v| v * c, || Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, |v| v + c, || Op::Shift { x })
    }

    // ---- activations ----

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, || Op::Gelu { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, || Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, || Op::Sigmoid { x })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, kernels::softplus, || Op::Softplus { x })
    }

    /// Elementwise map with a caller-supplied derivative. The derivative is
    /// trusted as given; `grad_check` is the way to validate it.
    pub fn map_elementwise(
        &mut self,
        x: Var,
        f: impl Fn(f32) -> f32,
        df: impl Fn(f32) -> f32 + Send + Sync + 'static,
    ) -> Var {
        self.unary(x, f, || Op::Elementwise { x, grad: Box::new(df) })
    }

    // ---- normalisation ----

    /// Row-wise softmax over the last axis of a 2-D tensor, max-shifted.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [_, cols] = xv.dims2("softmax_rows")?;
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(cols) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for v in row.iter_mut() {
                *v = kernels::exp(*v - m);
                z += *v;
            }
            let inv = 1.0 / z;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(value, &[x], || Op::SoftmaxRows { x, cols }))
    }

    /// Normalises over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.numel() != c || bv.numel() != c {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.numel() / c;
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let src = &xv.data()[r * c..(r + 1) * c];
            let m0 = src.iter().sum::<f32>() / c as f32;
            // One refinement pass; makes constant rows normalise to exactly zero.
            let mean = m0 + src.iter().map(|v| v - m0).sum::<f32>() / c as f32;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (src[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(value, &[x, gamma, beta], || Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), &[x], || Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = (xv.data().iter().map(|&v| v as f64).sum::<f64>() / xv.numel() as f64) as f32;
        self.push(Tensor::scalar(s), &[x], || Op::Mean { x })
    }

    /// Global maximum. The gradient goes to the first maximising entry.
    pub fn max_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut index = 0;
        for (i, &v) in xv.data().iter().enumerate() {
            if v > xv.data()[index] {
                index = i;
            }
        }
        let m = xv.data()[index];
        self.push(Tensor::scalar(m), &[x], || Op::MaxAll { x, index })
    }

    /// Mean binary cross-entropy between `sigmoid(x)` and a fixed target.
    pub fn bce_with_logits(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        same_shape("bce_with_logits", xv, target)?;
        let total: f64 = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&l, &t)| (kernels::softplus(l) - l * t) as f64)
            .sum();
        let value = Tensor::scalar((total / xv.numel() as f64) as f32);
        let target = target.data().to_vec();
        Ok(self.push(value, &[x], || Op::BceWithLogits { x, target }))
    }

    // ---- spatial ----

    /// Cross-correlation of `x: [H, W, Cin]` with `w: [k, k, Cin, Cout]`, zero padded.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let [h, wd, cin] = xv.dims3("conv2d")?;
        let (k, cout) = match wv.shape()[..] {
            [k1, k2, ci, co] if k1 == k2 && ci == cin => (k1, co),
            _ => return Err(Error::shape("conv2d", xv.shape(), wv.shape())),
        };
        if bv.numel() != cout {
            return Err(Error::shape("conv2d bias", wv.shape(), bv.shape()));
        }
        let geom = ConvGeom::new(h, wd, cin, k, stride, pad)
            .ok_or_else(|| Error::invalid(format!("kernel {k} does not fit a {h}x{wd} input")))?;
        let cols = geom.im2col(xv.data());
        let npix = geom.h_out * geom.w_out;
        let mut out = vec![0.0; npix * cout];
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(bv.data());
        }
        kernels::gemm(npix, geom.patch_len(), cout, &cols, false, wv.data(), false, &mut out, true);
        let value = Tensor::from_parts(vec![geom.h_out, geom.w_out, cout], out);
        Ok(self.push(value, &[x, w, b], || Op::Conv2d { x, w, b, geom, cout, cols }))
    }

    /// Stride-2, kernel-2 transposed convolution. `w` has shape `[Cin, 2, 2, Cout]`;
    /// output pixel `(2i+dy, 2j+dx)` is fed only by input pixel `(i, j)`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let [h, w_in, cin] = xv.dims3("conv_transpose2x2")?;
        let cout = match wv.shape()[..] {
            [ci, 2, 2, co] if ci == cin => co,
            _ => return Err(Error::shape("conv_transpose2x2", xv.shape(), wv.shape())),
        };
        if bv.numel() != cout {
            return Err(Error::shape("conv_transpose2x2 bias", wv.shape(), bv.shape()));
        }
        let npix = h * w_in;
        let mut y = vec![0.0; npix * 4 * cout];
        kernels::gemm(npix, cin, 4 * cout, xv.data(), false, wv.data(), false, &mut y, false);
        let mut out = vec![0.0; npix * 4 * cout];
        scatter_2x2(&y, &mut out, h, w_in, cout, |d, s| *d = s);
        for row in out.chunks_exact_mut(cout) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let value = Tensor::from_parts(vec![2 * h, 2 * w_in, cout], out);
        Ok(self.push(value, &[x, w, b], || Op::ConvTranspose2x2 { x, w, b, h, w_in, cin, cout }))
    }

    /// Bilinear resize of `[H, W, C]` to `[ho, wo, C]` with half-pixel centres.
    pub fn resize_bilinear(&mut self, x: Var, ho: usize, wo: usize) -> Result<Var> {
        let xv = self.value(x);
        let [h, w, c] = xv.dims3("resize_bilinear")?;
        let out = kernels::resize_forward(xv.data(), (h, w, c), (ho, wo));
        let value = Tensor::from_parts(vec![ho, wo, c], out);
        Ok(self.push(value, &[x], || Op::Resize { x, from: (h, w, c), to: (ho, wo) }))
    }

    /// 2×2 average pooling with stride 2; `H` and `W` must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [h, w, c] = xv.dims3("avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(format!("avg_pool2 needs even spatial dims, got {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                let dst = &mut out[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let base = ((2 * oy + dy) * w + 2 * ox + dx) * c;
                    for (d, s) in dst.iter_mut().zip(&xv.data()[base..base + c]) {
                        *d += 0.25 * s;
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![ho, wo, c], out);
        Ok(self.push(value, &[x], || Op::AvgPool2 { x, h, w, c }))
    }

    // ---- structural ----

    /// Stacks 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let cols = self.value(*first).dims2("concat_rows")?[1];
        let mut data = Vec::new();
        let mut meta = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            let [r, c] = pv.dims2("concat_rows")?;
            if c != cols {
                return Err(Error::shape("concat_rows", self.value(*first).shape(), pv.shape()));
            }
            data.extend_from_slice(pv.data());
            meta.push((p, r));
        }
        let rows = data.len() / cols;
        let value = Tensor::from_parts(vec![rows, cols], data);
        Ok(self.push(value, parts, || Op::ConcatRows { parts: meta }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let [rows, cols] = xv.dims2("slice_rows")?;
        if len == 0 || start + len > rows {
            return Err(Error::invalid(format!("rows {start}..{} of {rows}", start + len)));
        }
        let data = xv.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::from_parts(vec![len, cols], data);
        Ok(self.push(value, &[x], || Op::SliceRows { x, start, len, cols }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let [rows, cols] = xv.dims2("slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(Error::invalid(format!("cols {start}..{} of {cols}", start + len)));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::from_parts(vec![rows, len], data);
        Ok(self.push(value, &[x], || Op::SliceCols { x, start, len, cols }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let rows = self.value(*first).dims2("concat_cols")?[0];
        let mut meta = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            let [r, c] = pv.dims2("concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.value(*first).shape(), pv.shape()));
            }
            meta.push((p, c));
        }
        let total: usize = meta.iter().map(|m| m.1).sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for &(p, c) in &meta {
            let pv = self.value(p).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + c].copy_from_slice(&pv[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let value = Tensor::from_parts(vec![rows, total], data);
        Ok(self.push(value, parts, || Op::ConcatCols { parts: meta, rows }))
    }

    // ---- backward ----

    /// Reverse sweep from a single-element `loss`. Every node is visited once,
    /// in reverse creation order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        let gd = g.data();
        let val = |v: Var| self.value(v);
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, shape: &[usize], data: Vec<f32>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.data_mut().iter_mut().zip(&data).for_each(|(a, b)| *a += b),
                slot => *slot = Some(Tensor::from_parts(shape.to_vec(), data)),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b, a_t, b_t, m, k, n } => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    // d op(a) = g · op(b)ᵀ ; for a stored transposed, da = op(b) · gᵀ
                    let mut da = vec![0.0; m * k];
                    if *a_t {
                        kernels::gemm(*k, *n, *m, bv.data(), *b_t, gd, true, &mut da, false);
                    } else {
                        kernels::gemm(*m, *n, *k, gd, false, bv.data(), !*b_t, &mut da, false);
                    }
                    acc(*a, av.shape(), da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    if *b_t {
                        kernels::gemm(*n, *m, *k, gd, true, av.data(), *a_t, &mut db, false);
                    } else {
                        kernels::gemm(*k, *m, *n, av.data(), !*a_t, gd, false, &mut db, false);
                    }
                    acc(*b, bv.shape(), db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, out.shape(), gd.to_vec());
                acc(*b, out.shape(), gd.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, out.shape(), gd.to_vec());
                acc(*b, out.shape(), gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, out.shape(), gd.iter().zip(bv).map(|(g, y)| g * y).collect());
                acc(*b, out.shape(), gd.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, out.shape(), gd.iter().zip(bv).map(|(g, y)| g / y).collect());
                let db = gd.iter().zip(av).zip(bv).map(|((g, x), y)| -g * x / (y * y)).collect();
                acc(*b, out.shape(), db);
            }
            Op::AddBias { x, bias } => {
                acc(*x, out.shape(), gd.to_vec());
                let bv = val(*bias);
                let c = bv.numel();
                let mut db = vec![0.0; c];
                for row in gd.chunks_exact(c) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
                acc(*bias, bv.shape(), db);
            }
            Op::MulByScalarVar { x, s } => {
                let k = val(*s).item();
                acc(*x, out.shape(), gd.iter().map(|g| g * k).collect());
                let xd = val(*x).data();
                let ds: f64 = gd.iter().zip(xd).map(|(g, v)| (*g as f64) * (*v as f64)).sum();
                acc(*s, val(*s).shape(), vec![ds as f32]);
            }
            Op::Scale { x, c } => acc(*x, out.shape(), gd.iter().map(|g| g * c).collect()),
            Op::Shift { x } => acc(*x, out.shape(), gd.to_vec()),
            Op::Reshape { x } => acc(*x, val(*x).shape(), gd.to_vec()),
            Op::Transpose { x, rows, cols } => {
                // out is cols×rows
                let mut dx = vec![0.0; rows * cols];
                kernels::transpose_into(gd, *cols, *rows, &mut dx);
                acc(*x, val(*x).shape(), dx);
            }
            Op::SoftmaxRows { x, cols } => {
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_exact_mut(*cols).zip(y.chunks_exact(*cols)).zip(gd.chunks_exact(*cols)) {
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..*cols {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, out.shape(), dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = val(*gamma);
                let c = gv.numel();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; gd.len()];
                for (r, rs) in rstd.iter().enumerate() {
                    let gr = &gd[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..c {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gv.data()[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= c as f32;
                    mean_dh_h /= c as f32;
                    for j in 0..c {
                        let dh = gr[j] * gv.data()[j];
                        dx[r * c + j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                acc(*x, out.shape(), dx);
                acc(*gamma, gv.shape(), dgamma);
                acc(*beta, val(*beta).shape(), dbeta);
            }
            Op::Gelu { x } => {
                let xd = val(*x).data();
                acc(*x, out.shape(), gd.iter().zip(xd).map(|(g, v)| g * kernels::gelu_grad(*v)).collect());
            }
            Op::LeakyRelu { x, slope } => {
                let xd = val(*x).data();
                let dx = gd.iter().zip(xd).map(|(g, v)| if *v > 0.0 { *g } else { g * slope }).collect();
                acc(*x, out.shape(), dx);
            }
            Op::Sigmoid { x } => {
                let dx = gd.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                acc(*x, out.shape(), dx);
            }
            Op::Softplus { x } => {
                let xd = val(*x).data();
                acc(*x, out.shape(), gd.iter().zip(xd).map(|(g, v)| g * kernels::sigmoid(*v)).collect());
            }
            Op::Elementwise { x, grad } => {
                let xd = val(*x).data();
                acc(*x, out.shape(), gd.iter().zip(xd).map(|(g, v)| g * grad(*v)).collect());
            }
            Op::Sum { x } => {
                let xv = val(*x);
                acc(*x, xv.shape(), vec![gd[0]; xv.numel()]);
            }
            Op::Mean { x } => {
                let xv = val(*x);
                acc(*x, xv.shape(), vec![gd[0] / xv.numel() as f32; xv.numel()]);
            }
            Op::MaxAll { x, index } => {
                let xv = val(*x);
                let mut dx = vec![0.0; xv.numel()];
                dx[*index] = gd[0];
                acc(*x, xv.shape(), dx);
            }
            Op::BceWithLogits { x, target } => {
                let xd = val(*x).data();
                let scale = gd[0] / xd.len() as f32;
                let dx = xd.iter().zip(target).map(|(l, t)| scale * (kernels::sigmoid(*l) - t)).collect();
                acc(*x, val(*x).shape(), dx);
            }
            Op::Conv2d { x, w, b, geom, cout, cols } => {
                let npix = geom.h_out * geom.w_out;
                let plen = geom.patch_len();
                if needs(*w) {
                    let mut dw = vec![0.0; plen * cout];
                    kernels::gemm(plen, npix, *cout, cols, true, gd, false, &mut dw, false);
                    acc(*w, val(*w).shape(), dw);
                }
                if needs(*b) {
                    let mut db = vec![0.0; *cout];
                    for row in gd.chunks_exact(*cout) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    acc(*b, val(*b).shape(), db);
                }
                if needs(*x) {
                    let mut dcols = vec![0.0; npix * plen];
                    kernels::gemm(npix, *cout, plen, gd, false, val(*w).data(), true, &mut dcols, false);
                    acc(*x, val(*x).shape(), geom.col2im(&dcols));
                }
            }
            Op::ConvTranspose2x2 { x, w, b, h, w_in, cin, cout } => {
                let npix = h * w_in;
                let mut dy = vec![0.0; npix * 4 * cout];
                gather_2x2(gd, &mut dy, *h, *w_in, *cout);
                if needs(*w) {
                    let mut dw = vec![0.0; cin * 4 * cout];
                    kernels::gemm(*cin, npix, 4 * cout, val(*x).data(), true, &dy, false, &mut dw, false);
                    acc(*w, val(*w).shape(), dw);
                }
                if needs(*b) {
                    let mut db = vec![0.0; *cout];
                    for row in gd.chunks_exact(*cout) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    acc(*b, val(*b).shape(), db);
                }
                if needs(*x) {
                    let mut dx = vec![0.0; npix * cin];
                    kernels::gemm(npix, 4 * cout, *cin, &dy, false, val(*w).data(), true, &mut dx, false);
                    acc(*x, val(*x).shape(), dx);
                }
            }
            Op::Resize { x, from, to } => {
                acc(*x, val(*x).shape(), kernels::resize_backward(gd, *from, *to));
            }
            Op::AvgPool2 { x, h, w, c } => {
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = vec![0.0; h * w * c];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let src = &gd[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
                        for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let base = ((2 * oy + dy) * w + 2 * ox + dxo) * c;
                            dx[base..base + c].iter_mut().zip(src).for_each(|(d, s)| *d += 0.25 * s);
                        }
                    }
                }
                acc(*x, val(*x).shape(), dx);
            }
            Op::ConcatRows { parts } => {
                let cols = out.last_dim();
                let mut offset = 0;
                for &(p, r) in parts {
                    acc(p, val(p).shape(), gd[offset * cols..(offset + r) * cols].to_vec());
                    offset += r;
                }
            }
            Op::SliceRows { x, start, len, cols } => {
                let xv = val(*x);
                let mut dx = vec![0.0; xv.numel()];
                dx[start * cols..(start + len) * cols].copy_from_slice(gd);
                acc(*x, xv.shape(), dx);
            }
            Op::SliceCols { x, start, len, cols } => {
                let xv = val(*x);
                let rows = xv.numel() / cols;
                let mut dx = vec![0.0; xv.numel()];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                acc(*x, xv.shape(), dx);
            }
            Op::ConcatCols { parts, rows } => {
                let total = out.last_dim();
                let mut offset = 0;
                for &(p, c) in parts {
                    let mut dp = Vec::with_capacity(rows * c);
                    for r in 0..*rows {
                        dp.extend_from_slice(&gd[r * total + offset..r * total + offset + c]);
                    }
                    acc(p, val(p).shape(), dp);
                    offset += c;
                }
            }
        }
    }
}

fn scatter_2x2(y: &[f32], out: &mut [f32], h: usize, w: usize, cout: usize, f: impl Fn(&mut f32, f32)) {
    let wo = 2 * w;
    for i in 0..h {
        for j in 0..w {
            let src = &y[(i * w + j) * 4 * cout..(i * w + j + 1) * 4 * cout];
            for (tap, chunk) in src.chunks_exact(cout).enumerate() {
                let (dy, dx) = (tap / 2, tap % 2);
                let base = ((2 * i + dy) * wo + 2 * j + dx) * cout;
                out[base..base + cout].iter_mut().zip(chunk).for_each(|(d, s)| f(d, *s));
            }
        }
    }
}

fn gather_2x2(g: &[f32], dy: &mut [f32], h: usize, w: usize, cout: usize) {
    let wo = 2 * w;
    for i in 0..h {
        for j in 0..w {
            let dst = &mut dy[(i * w + j) * 4 * cout..(i * w + j + 1) * 4 * cout];
            for (tap, chunk) in dst.chunks_exact_mut(cout).enumerate() {
                let (ty, tx) = (tap / 2, tap % 2);
                let base = ((2 * i + ty) * wo + 2 * j + tx) * cout;
                chunk.copy_from_slice(&g[base..base + cout]);
            }
        }
    }
}
