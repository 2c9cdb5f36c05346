//! Tape-based reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as it executes; [`Graph::backward`]
//! replays the tape in reverse and returns gradients for requested
//! variables. Graphs are built per training step and dropped afterwards.
//! Everything is single-threaded and evaluation order is fixed, so results
//! are bit-reproducible.

use super::tensor::Tensor;

/// Handle into a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    SqrtGuard(Var),
    MeanAll(Var),
    Reshape(Var),
    BiasAddChw(Var, Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<f64>, rstd: Vec<f64> },
    SoftmaxRows(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    MatMulTn(Var, Var),
    ConcatChannel(Var, Var),
    SliceBatch { x: Var, start: usize },
    UpsampleNearest2(Var),
    TokensFromBchw(Var),
    TokensToBchw { x: Var, b: usize, h: usize, w: usize },
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "add shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let t = Tensor { shape: ta.shape.clone(), data };
        self.push(Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "sub shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let t = Tensor { shape: ta.shape.clone(), data };
        self.push(Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "mul shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let t = Tensor { shape: ta.shape.clone(), data };
        self.push(Op::Mul(a, b), t)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.nodes[a.0].value.map(|v| v * c);
        self.push(Op::Scale(a, c), t)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.nodes[a.0].value.map(|v| v + c);
        self.push(Op::AddScalar(a), t)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|v| v * sigmoid(v));
        self.push(Op::Silu(a), t)
    }

    pub fn sigmoid_op(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(sigmoid);
        self.push(Op::Sigmoid(a), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|v| v.max(0.0));
        self.push(Op::Relu(a), t)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(f64::abs);
        self.push(Op::Abs(a), t)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|v| v * v);
        self.push(Op::Square(a), t)
    }

    /// Square root with a guarded gradient at zero.
    pub fn sqrt_guard(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|v| v.max(0.0).sqrt());
        self.push(Op::SqrtGuard(a), t)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let mean = ta.data.iter().sum::<f64>() / ta.numel() as f64;
        self.push(Op::MeanAll(a), Tensor::scalar(mean))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let ta = &self.nodes[a.0].value;
        assert_eq!(ta.numel(), shape.iter().product::<usize>(), "reshape numel mismatch");
        let t = Tensor { shape: shape.to_vec(), data: ta.data.clone() };
        self.push(Op::Reshape(a), t)
    }

    /// Adds a per-channel bias [C] to every spatial position of x [B,C,H,W].
    pub fn bias_add_chw(&mut self, x: Var, b: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let tb = &self.nodes[b.0].value;
        let (bs, c, h, w) = tx.dims4();
        assert_eq!(tb.numel(), c, "bias length mismatch");
        let hw = h * w;
        let mut data = tx.data.clone();
        for bi in 0..bs {
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                let bias = tb.data[ci];
                for v in &mut data[off..off + hw] {
                    *v += bias;
                }
            }
        }
        let t = Tensor { shape: tx.shape.clone(), data };
        self.push(Op::BiasAddChw(x, b), t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let tx = &self.nodes[x.0].value;
        let tw = &self.nodes[w.0].value;
        let out = conv2d_forward(tx, tw, stride, pad);
        self.push(Op::Conv2d { x, w, stride, pad }, out)
    }

    /// x [T, Cin] * w [Cin, Cout] + b.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let tx = &self.nodes[x.0].value;
        let tw = &self.nodes[w.0].value;
        let (t, cin) = tx.dims2();
        let (cin_w, cout) = tw.dims2();
        assert_eq!(cin, cin_w, "linear input dim mismatch");
        let mut out = vec![0.0; t * cout];
        matmul_acc(&tx.data, &tw.data, &mut out, t, cin, cout);
        if let Some(bv) = b {
            let tb = &self.nodes[bv.0].value;
            assert_eq!(tb.numel(), cout, "linear bias mismatch");
            for row in out.chunks_exact_mut(cout) {
                for (o, bb) in row.iter_mut().zip(&tb.data) {
                    *o += bb;
                }
            }
        }
        let t = Tensor::from_vec(&[t, cout], out);
        self.push(Op::Linear { x, w, b }, t)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let tx = &self.nodes[x.0].value;
        let tg = &self.nodes[gamma.0].value;
        let tb = &self.nodes[beta.0].value;
        let (b, c, h, w) = tx.dims4();
        assert_eq!(c % groups, 0, "channels not divisible by groups");
        assert_eq!(tg.numel(), c);
        assert_eq!(tb.numel(), c);
        let cg = c / groups;
        let m = cg * h * w;
        let hw = h * w;
        let mut mean = vec![0.0; b * groups];
        let mut rstd = vec![0.0; b * groups];
        let mut out = vec![0.0; tx.numel()];
        for bi in 0..b {
            for g in 0..groups {
                let base = (bi * c + g * cg) * hw;
                let slice = &tx.data[base..base + m];
                let mu = slice.iter().sum::<f64>() / m as f64;
                let var = slice.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
                let rs = 1.0 / (var + eps).sqrt();
                mean[bi * groups + g] = mu;
                rstd[bi * groups + g] = rs;
                for cc in 0..cg {
                    let ci = g * cg + cc;
                    let off = (bi * c + ci) * hw;
                    let (ga, be) = (tg.data[ci], tb.data[ci]);
                    for k in 0..hw {
                        out[off + k] = ga * (tx.data[off + k] - mu) * rs + be;
                    }
                }
            }
        }
        let t = Tensor { shape: tx.shape.clone(), data: out };
        self.push(Op::GroupNorm { x, gamma, beta, groups, mean, rstd }, t)
    }

    /// Softmax over the last dimension of a [T, S] tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let (t, s) = tx.dims2();
        let mut out = vec![0.0; t * s];
        for r in 0..t {
            let row = &tx.data[r * s..(r + 1) * s];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in out[r * s..(r + 1) * s].iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in &mut out[r * s..(r + 1) * s] {
                *o /= sum;
            }
        }
        let t = Tensor::from_vec(&[t, s], out);
        self.push(Op::SoftmaxRows(x), t)
    }

    /// a [M, K] * b [K, N].
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = ta.dims2();
        let (k2, n) = tb.dims2();
        assert_eq!(k, k2, "matmul inner dim mismatch");
        let mut out = vec![0.0; m * n];
        matmul_acc(&ta.data, &tb.data, &mut out, m, k, n);
        self.push(Op::MatMul(a, b), Tensor::from_vec(&[m, n], out))
    }

    /// a [M, K] * b [N, K]^T -> [M, N].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = ta.dims2();
        let (n, k2) = tb.dims2();
        assert_eq!(k, k2, "matmul_nt inner dim mismatch");
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(&ta.data, &tb.data, &mut out, m, k, n);
        self.push(Op::MatMulNt(a, b), Tensor::from_vec(&[m, n], out))
    }

    /// a [K, M]^T * b [K, N] -> [M, N].
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (k, m) = ta.dims2();
        let (k2, n) = tb.dims2();
        assert_eq!(k, k2, "matmul_tn inner dim mismatch");
        let mut out = vec![0.0; m * n];
        matmul_tn_acc(&ta.data, &tb.data, &mut out, m, k, n);
        self.push(Op::MatMulTn(a, b), Tensor::from_vec(&[m, n], out))
    }

    /// Concatenates two [B, C, H, W] tensors along the channel axis.
    pub fn concat_channel(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ba, ca, h, w) = ta.dims4();
        let (bb, cb, hb, wb) = tb.dims4();
        assert!(ba == bb && h == hb && w == wb, "concat_channel spatial mismatch");
        let hw = h * w;
        let mut out = vec![0.0; (ca + cb) * ba * hw];
        for bi in 0..ba {
            let dst = bi * (ca + cb) * hw;
            out[dst..dst + ca * hw]
                .copy_from_slice(&ta.data[bi * ca * hw..(bi + 1) * ca * hw]);
            out[dst + ca * hw..dst + (ca + cb) * hw]
                .copy_from_slice(&tb.data[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let t = Tensor::from_vec(&[ba, ca + cb, h, w], out);
        self.push(Op::ConcatChannel(a, b), t)
    }

    /// Takes batch entries [start, start+len) of a [B, C, H, W] tensor.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = &self.nodes[x.0].value;
        let (b, c, h, w) = tx.dims4();
        assert!(start + len <= b, "slice_batch out of range");
        let stride = c * h * w;
        let data = tx.data[start * stride..(start + len) * stride].to_vec();
        let t = Tensor::from_vec(&[len, c, h, w], data);
        self.push(Op::SliceBatch { x, start }, t)
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let (b, c, h, w) = tx.dims4();
        let (oh, ow) = (h * 2, w * 2);
        let mut out = vec![0.0; b * c * oh * ow];
        for bc in 0..b * c {
            let src = bc * h * w;
            let dst = bc * oh * ow;
            for y in 0..h {
                for x_ in 0..w {
                    let v = tx.data[src + y * w + x_];
                    let o = dst + (2 * y) * ow + 2 * x_;
                    out[o] = v;
                    out[o + 1] = v;
                    out[o + ow] = v;
                    out[o + ow + 1] = v;
                }
            }
        }
        let t = Tensor::from_vec(&[b, c, oh, ow], out);
        self.push(Op::UpsampleNearest2(x), t)
    }

    /// [B, C, H, W] -> [B*H*W, C] with batch-major, row-major token order.
    pub fn tokens_from_bchw(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let (b, c, h, w) = tx.dims4();
        let hw = h * w;
        let mut out = vec![0.0; b * hw * c];
        for bi in 0..b {
            for ci in 0..c {
                let src = (bi * c + ci) * hw;
                for k in 0..hw {
                    out[(bi * hw + k) * c + ci] = tx.data[src + k];
                }
            }
        }
        let t = Tensor::from_vec(&[b * hw, c], out);
        self.push(Op::TokensFromBchw(x), t)
    }

    /// Inverse of [`Graph::tokens_from_bchw`].
    pub fn tokens_to_bchw(&mut self, x: Var, b: usize, h: usize, w: usize) -> Var {
        let tx = &self.nodes[x.0].value;
        let (t, c) = tx.dims2();
        assert_eq!(t, b * h * w, "token count mismatch");
        let hw = h * w;
        let mut out = vec![0.0; b * c * hw];
        for bi in 0..b {
            for ci in 0..c {
                let dst = (bi * c + ci) * hw;
                for k in 0..hw {
                    out[dst + k] = tx.data[(bi * hw + k) * c + ci];
                }
            }
        }
        let tv = Tensor::from_vec(&[b, c, h, w], out);
        self.push(Op::TokensToBchw { x, b, h, w }, tv)
    }

    /// Reverse sweep from `loss` (a scalar), returning gradients of the
    /// requested variables in order.
    pub fn backward(&self, loss: Var, wrt: &[Var]) -> Vec<Tensor> {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.accumulate_input_grads(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }

        wrt.iter()
            .map(|v| {
                grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(&self.nodes[v.0].value.shape))
            })
            .collect()
    }

    fn accumulate_input_grads(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, g: Tensor| {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, n) in existing.data.iter_mut().zip(&g.data) {
                        *e += n;
                    }
                }
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let ga = Tensor {
                    shape: ta.shape.clone(),
                    data: gy.data.iter().zip(&tb.data).map(|(g, v)| g * v).collect(),
                };
                let gb = Tensor {
                    shape: tb.shape.clone(),
                    data: gy.data.iter().zip(&ta.data).map(|(g, v)| g * v).collect(),
                };
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Scale(a, c) => acc(*a, gy.map(|v| v * c)),
            Op::AddScalar(a) => acc(*a, gy.clone()),
            Op::Silu(a) => {
                let tx = &self.nodes[a.0].value;
                let g = Tensor {
                    shape: tx.shape.clone(),
                    data: gy
                        .data
                        .iter()
                        .zip(&tx.data)
                        .map(|(g, &x)| {
                            let s = sigmoid(x);
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .collect(),
                };
                acc(*a, g);
            }
            Op::Sigmoid(a) => {
                let ty = &node.value;
                let g = Tensor {
                    shape: ty.shape.clone(),
                    data: gy.data.iter().zip(&ty.data).map(|(g, &y)| g * y * (1.0 - y)).collect(),
                };
                acc(*a, g);
            }
            Op::Relu(a) => {
                let tx = &self.nodes[a.0].value;
                let g = Tensor {
                    shape: tx.shape.clone(),
                    data: gy
                        .data
                        .iter()
                        .zip(&tx.data)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                };
                acc(*a, g);
            }
            Op::Abs(a) => {
                let tx = &self.nodes[a.0].value;
                let g = Tensor {
                    shape: tx.shape.clone(),
                    data: gy
                        .data
                        .iter()
                        .zip(&tx.data)
                        .map(|(g, &x)| g * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
                        .collect(),
                };
                acc(*a, g);
            }
            Op::Square(a) => {
                let tx = &self.nodes[a.0].value;
                let g = Tensor {
                    shape: tx.shape.clone(),
                    data: gy.data.iter().zip(&tx.data).map(|(g, &x)| g * 2.0 * x).collect(),
                };
                acc(*a, g);
            }
            Op::SqrtGuard(a) => {
                let ty = &node.value;
                let g = Tensor {
                    shape: ty.shape.clone(),
                    data: gy
                        .data
                        .iter()
                        .zip(&ty.data)
                        .map(|(g, &y)| g / (2.0 * y.max(1e-12)))
                        .collect(),
                };
                acc(*a, g);
            }
            Op::MeanAll(a) => {
                let ta = &self.nodes[a.0].value;
                let scale = gy.item() / ta.numel() as f64;
                acc(*a, Tensor { shape: ta.shape.clone(), data: vec![scale; ta.numel()] });
            }
            Op::Reshape(a) => {
                let ta = &self.nodes[a.0].value;
                acc(*a, Tensor { shape: ta.shape.clone(), data: gy.data.clone() });
            }
            Op::BiasAddChw(x, b) => {
                acc(*x, gy.clone());
                let tb = &self.nodes[b.0].value;
                let tx = &self.nodes[x.0].value;
                let (bs, c, h, w) = tx.dims4();
                let hw = h * w;
                let mut gb = vec![0.0; c];
                for bi in 0..bs {
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        gb[ci] += gy.data[off..off + hw].iter().sum::<f64>();
                    }
                }
                acc(*b, Tensor { shape: tb.shape.clone(), data: gb });
            }
            Op::Conv2d { x, w, stride, pad } => {
                let tx = &self.nodes[x.0].value;
                let tw = &self.nodes[w.0].value;
                let (gx, gw) = conv2d_backward(tx, tw, gy, *stride, *pad);
                acc(*x, gx);
                acc(*w, gw);
            }
            Op::Linear { x, w, b } => {
                let tx = &self.nodes[x.0].value;
                let tw = &self.nodes[w.0].value;
                let (t, cin) = tx.dims2();
                let (_, cout) = tw.dims2();
                // dx = gy * w^T
                let mut gx = vec![0.0; t * cin];
                matmul_nt_acc(&gy.data, &tw.data, &mut gx, t, cout, cin);
                acc(*x, Tensor::from_vec(&[t, cin], gx));
                // dw = x^T * gy
                let mut gw = vec![0.0; cin * cout];
                matmul_tn_acc(&tx.data, &gy.data, &mut gw, cin, t, cout);
                acc(*w, Tensor::from_vec(&[cin, cout], gw));
                if let Some(bv) = b {
                    let mut gb = vec![0.0; cout];
                    for row in gy.data.chunks_exact(cout) {
                        for (g, r) in gb.iter_mut().zip(row) {
                            *g += r;
                        }
                    }
                    acc(*bv, Tensor::from_vec(&[cout], gb));
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                let tx = &self.nodes[x.0].value;
                let tg = &self.nodes[gamma.0].value;
                let (b, c, h, w) = tx.dims4();
                let cg = c / groups;
                let hw = h * w;
                let m = cg * hw;
                let mut gx = vec![0.0; tx.numel()];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for bi in 0..b {
                    for g in 0..*groups {
                        let mu = mean[bi * groups + g];
                        let rs = rstd[bi * groups + g];
                        // First pass: per-group means of dxhat and dxhat*xhat,
                        // plus gamma/beta grads.
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for cc in 0..cg {
                            let ci = g * cg + cc;
                            let off = (bi * c + ci) * hw;
                            let ga = tg.data[ci];
                            for k in 0..hw {
                                let xhat = (tx.data[off + k] - mu) * rs;
                                let dy = gy.data[off + k];
                                let dxhat = dy * ga;
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                                ggamma[ci] += dy * xhat;
                                gbeta[ci] += dy;
                            }
                        }
                        let mean_dxhat = sum_dxhat / m as f64;
                        let mean_dxhat_xhat = sum_dxhat_xhat / m as f64;
                        for cc in 0..cg {
                            let ci = g * cg + cc;
                            let off = (bi * c + ci) * hw;
                            let ga = tg.data[ci];
                            for k in 0..hw {
                                let xhat = (tx.data[off + k] - mu) * rs;
                                let dxhat = gy.data[off + k] * ga;
                                gx[off + k] = rs * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                            }
                        }
                    }
                }
                acc(*x, Tensor { shape: tx.shape.clone(), data: gx });
                acc(*gamma, Tensor::from_vec(&[c], ggamma));
                acc(*beta, Tensor::from_vec(&[c], gbeta));
            }
            Op::SoftmaxRows(x) => {
                let ty = &node.value;
                let (t, s) = ty.dims2();
                let mut gx = vec![0.0; t * s];
                for r in 0..t {
                    let y = &ty.data[r * s..(r + 1) * s];
                    let dy = &gy.data[r * s..(r + 1) * s];
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for k in 0..s {
                        gx[r * s + k] = y[k] * (dy[k] - dot);
                    }
                }
                acc(*x, Tensor::from_vec(&[t, s], gx));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = ta.dims2();
                let (_, n) = tb.dims2();
                let mut ga = vec![0.0; m * k];
                matmul_nt_acc(&gy.data, &tb.data, &mut ga, m, n, k);
                acc(*a, Tensor::from_vec(&[m, k], ga));
                let mut gb = vec![0.0; k * n];
                matmul_tn_acc(&ta.data, &gy.data, &mut gb, k, m, n);
                acc(*b, Tensor::from_vec(&[k, n], gb));
            }
            Op::MatMulNt(a, b) => {
                // y = a b^T : da = gy * b ; db = gy^T * a
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = ta.dims2();
                let (n, _) = tb.dims2();
                let mut ga = vec![0.0; m * k];
                matmul_acc(&gy.data, &tb.data, &mut ga, m, n, k);
                acc(*a, Tensor::from_vec(&[m, k], ga));
                let mut gb = vec![0.0; n * k];
                matmul_tn_acc(&gy.data, &ta.data, &mut gb, n, m, k);
                acc(*b, Tensor::from_vec(&[n, k], gb));
            }
            Op::MatMulTn(a, b) => {
                // y = a^T b : da = b * gy^T -> shape [K, M]; db = a * gy
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (k, m) = ta.dims2();
                let (_, n) = tb.dims2();
                let mut ga = vec![0.0; k * m];
                matmul_nt_acc(&tb.data, &gy.data, &mut ga, k, n, m);
                acc(*a, Tensor::from_vec(&[k, m], ga));
                let mut gb = vec![0.0; k * n];
                matmul_acc(&ta.data, &gy.data, &mut gb, k, m, n);
                acc(*b, Tensor::from_vec(&[k, n], gb));
            }
            Op::ConcatChannel(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (bs, ca, h, w) = ta.dims4();
                let (_, cb, _, _) = tb.dims4();
                let hw = h * w;
                let mut ga = vec![0.0; ta.numel()];
                let mut gb = vec![0.0; tb.numel()];
                for bi in 0..bs {
                    let src = bi * (ca + cb) * hw;
                    ga[bi * ca * hw..(bi + 1) * ca * hw]
                        .copy_from_slice(&gy.data[src..src + ca * hw]);
                    gb[bi * cb * hw..(bi + 1) * cb * hw]
                        .copy_from_slice(&gy.data[src + ca * hw..src + (ca + cb) * hw]);
                }
                acc(*a, Tensor { shape: ta.shape.clone(), data: ga });
                acc(*b, Tensor { shape: tb.shape.clone(), data: gb });
            }
            Op::SliceBatch { x, start } => {
                let tx = &self.nodes[x.0].value;
                let (_, c, h, w) = tx.dims4();
                let stride = c * h * w;
                let mut gx = vec![0.0; tx.numel()];
                gx[start * stride..start * stride + gy.data.len()].copy_from_slice(&gy.data);
                acc(*x, Tensor { shape: tx.shape.clone(), data: gx });
            }
            Op::UpsampleNearest2(x) => {
                let tx = &self.nodes[x.0].value;
                let (b, c, h, w) = tx.dims4();
                let ow = w * 2;
                let mut gx = vec![0.0; tx.numel()];
                for bc in 0..b * c {
                    let dst = bc * h * w;
                    let src = bc * (h * 2) * ow;
                    for y in 0..h {
                        for x_ in 0..w {
                            let o = src + (2 * y) * ow + 2 * x_;
                            gx[dst + y * w + x_] =
                                gy.data[o] + gy.data[o + 1] + gy.data[o + ow] + gy.data[o + ow + 1];
                        }
                    }
                }
                acc(*x, Tensor { shape: tx.shape.clone(), data: gx });
            }
            Op::TokensFromBchw(x) => {
                let tx = &self.nodes[x.0].value;
                let (b, c, h, w) = tx.dims4();
                let hw = h * w;
                let mut gx = vec![0.0; tx.numel()];
                for bi in 0..b {
                    for ci in 0..c {
                        let dst = (bi * c + ci) * hw;
                        for k in 0..hw {
                            gx[dst + k] = gy.data[(bi * hw + k) * c + ci];
                        }
                    }
                }
                acc(*x, Tensor { shape: tx.shape.clone(), data: gx });
            }
            Op::TokensToBchw { x, b, h, w } => {
                let tx = &self.nodes[x.0].value;
                let (_, c, _, _) = node.value.dims4();
                let hw = h * w;
                let mut gx = vec![0.0; tx.numel()];
                for bi in 0..*b {
                    for ci in 0..c {
                        let src = (bi * c + ci) * hw;
                        for k in 0..hw {
                            gx[(bi * hw + k) * c + ci] = gy.data[src + k];
                        }
                    }
                }
                acc(*x, Tensor { shape: tx.shape.clone(), data: gx });
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// out[m, n] += a[m, k] * b[k, n]
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m, n] += a[m, k] * b[n, k]^T
fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// out[m, n] += a[k, m]^T * b[k, n]
fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn conv2d_out_size(in_size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (in_size + 2 * pad - k) / stride + 1
}

/// Valid output range [lo, hi) such that 0 <= o*stride + k_off < in_size.
fn valid_range(in_size: usize, out_size: usize, k_off: i64, stride: usize) -> (usize, usize) {
    let s = stride as i64;
    let lo = if k_off >= 0 { 0 } else { (-k_off + s - 1) / s };
    let hi_inclusive = (in_size as i64 - 1 - k_off).div_euclid(s);
    let lo = lo.max(0) as usize;
    let hi = (hi_inclusive + 1).clamp(0, out_size as i64) as usize;
    (lo.min(hi), hi)
}

fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (b, cin, h, win) = x.dims4();
    let (cout, cin_w, kh, kw) = w.dims4();
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    let oh = conv2d_out_size(h, kh, stride, pad);
    let ow = conv2d_out_size(win, kw, stride, pad);
    let mut out = vec![0.0; b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            let out_base = (bi * cout + co) * oh * ow;
            for ci in 0..cin {
                let x_base = (bi * cin + ci) * h * win;
                let w_base = (co * cin + ci) * kh * kw;
                for ky in 0..kh {
                    let y_off = ky as i64 - pad as i64;
                    let (oy_lo, oy_hi) = valid_range(h, oh, y_off, stride);
                    for kx in 0..kw {
                        let x_off = kx as i64 - pad as i64;
                        let (ox_lo, ox_hi) = valid_range(win, ow, x_off, stride);
                        let wv = w.data[w_base + ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * stride) as i64 + y_off;
                            let x_row = x_base + iy as usize * win;
                            let o_row = out_base + oy * ow;
                            for ox in ox_lo..ox_hi {
                                let ix = (ox * stride) as i64 + x_off;
                                out[o_row + ox] += wv * x.data[x_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, cout, oh, ow], out)
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor) {
    let (b, cin, h, win) = x.dims4();
    let (cout, _, kh, kw) = w.dims4();
    let (_, _, oh, ow) = gy.dims4();
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    for bi in 0..b {
        for co in 0..cout {
            let gy_base = (bi * cout + co) * oh * ow;
            for ci in 0..cin {
                let x_base = (bi * cin + ci) * h * win;
                let w_base = (co * cin + ci) * kh * kw;
                for ky in 0..kh {
                    let y_off = ky as i64 - pad as i64;
                    let (oy_lo, oy_hi) = valid_range(h, oh, y_off, stride);
                    for kx in 0..kw {
                        let x_off = kx as i64 - pad as i64;
                        let (ox_lo, ox_hi) = valid_range(win, ow, x_off, stride);
                        let wv = w.data[w_base + ky * kw + kx];
                        let mut wg = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = ((oy * stride) as i64 + y_off) as usize;
                            let x_row = x_base + iy * win;
                            let g_row = gy_base + oy * ow;
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * stride) as i64 + x_off) as usize;
                                let g = gy.data[g_row + ox];
                                wg += g * x.data[x_row + ix];
                                gx[x_row + ix] += g * wv;
                            }
                        }
                        gw[w_base + ky * kw + kx] += wg;
                    }
                }
            }
        }
    }
    (
        Tensor { shape: x.shape.clone(), data: gx },
        Tensor { shape: w.shape.clone(), data: gw },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central finite-difference check of d(scalar output)/d(leaf) against
    /// the tape gradient, at every element of the leaf.
    fn check_gradient(
        build: impl Fn(&mut Graph, Var) -> Var,
        input: &Tensor,
        tol: f64,
    ) {
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let loss = build(&mut g, x);
        let analytic = g.backward(loss, &[x]).pop().unwrap();

        let h = 1e-5;
        for i in 0..input.numel() {
            let mut plus = input.clone();
            plus.data[i] += h;
            let mut minus = input.clone();
            minus.data[i] -= h;
            let mut gp = Graph::new();
            let xp = gp.leaf(plus);
            let lp_var = build(&mut gp, xp);
            let lp = gp.value(lp_var).item();
            let mut gm = Graph::new();
            let xm = gm.leaf(minus);
            let lm_var = build(&mut gm, xm);
            let lm = gm.value(lm_var).item();
            let fd = (lp - lm) / (2.0 * h);
            let a = analytic.data[i];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(
                (a - fd).abs() / denom < tol,
                "grad mismatch at {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn conv2d_matches_hand_computation() {
        // 1x1x3x3 input, single 3x3 kernel, pad 1: center output is the
        // full dot product.
        let x = Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(f64::from).collect());
        let w = Tensor::from_vec(&[1, 1, 3, 3], vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let wv = g.leaf(w);
        let y = g.conv2d(xv, wv, 1, 1);
        // Identity kernel reproduces the input.
        assert_eq!(g.value(y).data, x.data);

        let w2 = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]);
        let wv2 = g.leaf(w2);
        let y2 = g.conv2d(xv, wv2, 1, 1);
        // Center pixel sums all nine values = 45.
        assert_eq!(g.value(y2).data[4], 45.0);
        // Corner (0,0) sums the 2x2 block {1,2,4,5} = 12.
        assert_eq!(g.value(y2).data[0], 12.0);
    }

    #[test]
    fn conv2d_stride2_shapes() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 3, 24, 24]));
        let w = g.leaf(Tensor::zeros(&[8, 3, 3, 3]));
        let y = g.conv2d(x, w, 2, 1);
        assert_eq!(g.value(y).shape, vec![2, 8, 12, 12]);
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, &[2, 3]);
        check_gradient(
            |g, x| {
                let s = g.silu(x);
                let q = g.square(s);
                g.mean_all(q)
            },
            &x,
            1e-6,
        );
        check_gradient(
            |g, x| {
                let s = g.sigmoid_op(x);
                let a = g.abs(s);
                let m = g.mean_all(a);
                g.sqrt_guard(m)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, &[1, 2, 5, 5]);
        let w = random_tensor(&mut rng, &[3, 2, 3, 3]);
        // Check d/dx with w fixed.
        let w_c = w.clone();
        check_gradient(
            move |g, x| {
                let wv = g.leaf(w_c.clone());
                let y = g.conv2d(x, wv, 2, 1);
                let sq = g.square(y);
                g.mean_all(sq)
            },
            &x,
            1e-5,
        );
        // Check d/dw with x fixed.
        let x_c = x.clone();
        check_gradient(
            move |g, w| {
                let xv = g.leaf(x_c.clone());
                let y = g.conv2d(xv, w, 2, 1);
                let sq = g.square(y);
                g.mean_all(sq)
            },
            &w,
            1e-5,
        );
    }

    #[test]
    fn group_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, &[2, 4, 3, 3]);
        let gamma = random_tensor(&mut rng, &[4]);
        let beta = random_tensor(&mut rng, &[4]);
        let (gc, bc) = (gamma.clone(), beta.clone());
        check_gradient(
            move |g, x| {
                let ga = g.leaf(gc.clone());
                let be = g.leaf(bc.clone());
                let y = g.group_norm(x, ga, be, 2, 1e-5);
                let sq = g.square(y);
                g.mean_all(sq)
            },
            &x,
            1e-4,
        );
        let xc = x.clone();
        let bc = beta.clone();
        check_gradient(
            move |g, ga| {
                let xv = g.leaf(xc.clone());
                let be = g.leaf(bc.clone());
                let y = g.group_norm(xv, ga, be, 2, 1e-5);
                let sq = g.square(y);
                g.mean_all(sq)
            },
            &gamma,
            1e-5,
        );
    }

    #[test]
    fn attention_style_gradients() {
        // Softmax(q k^T / sqrt(d)) v with shared input: exercises softmax,
        // all three matmul variants, and tokens round trip.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, &[1, 3, 2, 2]);
        let wq = random_tensor(&mut rng, &[3, 3]);
        let wk = random_tensor(&mut rng, &[3, 3]);
        let wv = random_tensor(&mut rng, &[3, 3]);
        let (wq_c, wk_c, wv_c) = (wq.clone(), wk.clone(), wv.clone());
        check_gradient(
            move |g, x| {
                let t = g.tokens_from_bchw(x);
                let q_w = g.leaf(wq_c.clone());
                let k_w = g.leaf(wk_c.clone());
                let v_w = g.leaf(wv_c.clone());
                let q = g.matmul(t, q_w);
                let k = g.matmul(t, k_w);
                let v = g.matmul(t, v_w);
                let scores = g.matmul_nt(q, k);
                let scaled = g.scale(scores, 1.0 / (3.0f64).sqrt());
                let probs = g.softmax_rows(scaled);
                let out = g.matmul(probs, v);
                let back = g.tokens_to_bchw(out, 1, 2, 2);
                let sq = g.square(back);
                g.mean_all(sq)
            },
            &x,
            1e-4,
        );
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, &[2, 2, 2, 2]);
        check_gradient(
            |g, x| {
                let up = g.upsample_nearest2(x);
                let slice = g.slice_batch(up, 1, 1);
                let cat = g.concat_channel(slice, slice);
                let sq = g.square(cat);
                g.mean_all(sq)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn gram_style_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor(&mut rng, &[1, 3, 2, 2]);
        check_gradient(
            |g, x| {
                let t = g.tokens_from_bchw(x);
                let gram = g.matmul_tn(t, t);
                let sq = g.square(gram);
                let m = g.mean_all(sq);
                g.sqrt_guard(m)
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn linear_and_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&mut rng, &[4, 3]);
        let w = random_tensor(&mut rng, &[3, 5]);
        let b = random_tensor(&mut rng, &[5]);
        let (wc, bc) = (w.clone(), b.clone());
        check_gradient(
            move |g, x| {
                let wv = g.leaf(wc.clone());
                let bv = g.leaf(bc.clone());
                let y = g.linear(x, wv, Some(bv));
                let sq = g.square(y);
                g.mean_all(sq)
            },
            &x,
            1e-6,
        );
        let xc = x.clone();
        check_gradient(
            move |g, w| {
                let xv = g.leaf(xc.clone());
                let y = g.linear(xv, w, None);
                let s = g.silu(y);
                g.mean_all(s)
            },
            &w,
            1e-5,
        );
    }

    #[test]
    fn bias_add_chw_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&mut rng, &[2, 3, 2, 2]);
        let b = random_tensor(&mut rng, &[3]);
        let xc = x.clone();
        check_gradient(
            move |g, b| {
                let xv = g.leaf(xc.clone());
                let y = g.bias_add_chw(xv, b);
                let sq = g.square(y);
                g.mean_all(sq)
            },
            &b,
            1e-6,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&mut rng, &[5, 7]);
        let mut g = Graph::new();
        let xv = g.leaf(x);
        let y = g.softmax_rows(xv);
        for row in g.value(y).data.chunks_exact(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
