//! Reverse-mode differentiation over a linear record of executed operations.

use super::kernels::{self, ConvGeometry, UpGeometry};
use super::{dims4, shape_err, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization statistics source for [`Tape::batch_norm`].
#[derive(Debug, Clone)]
pub enum BnMode<T> {
    /// Normalize with the batch's own per-channel statistics.
    Train { eps: T },
    /// Normalize with fixed (running) statistics.
    Eval { mean: Vec<T>, var: Vec<T>, eps: T },
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    TransposedConv {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: UpGeometry,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Tanh {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    SelectBatch {
        input: Var,
        index: usize,
    },
    StackBatch {
        inputs: Vec<Var>,
    },
    ExpandBatch {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        target: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, kernel, bias, ..
            }
            | Op::TransposedConv {
                input, kernel, bias, ..
            } => {
                vec![*input, *kernel, *bias]
            }
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::MaxPool { input, .. }
            | Op::Relu { input }
            | Op::Sigmoid { input }
            | Op::Tanh { input }
            | Op::Scale { input, .. }
            | Op::Sum { input }
            | Op::SelectBatch { input, .. }
            | Op::ExpandBatch { input } => vec![*input],
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::ConcatChannels { a, b } => {
                vec![*a, *b]
            }
            Op::StackBatch { inputs } => inputs.clone(),
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order; [`Tape::backward`] walks them in
/// reverse. Because values can only be built from handles that already exist,
/// every node's inputs precede it.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    /// Leaf that never receives a gradient (inputs, targets).
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    /// Leaf that always receives a gradient (parameters).
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last [`backward`](Self::backward), if any
    /// reached this value.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        const OP: &str = "conv2d";
        let [n, cin, h, w] = dims4(OP, self.shape(input))?;
        let [cout, kcin, kh, kw] = match self.shape(kernel) {
            &[a, b, c, d] => [a, b, c, d],
            s => return Err(shape_err(OP, format!("kernel must be [Cout,Cin,kh,kw], got {s:?}"))),
        };
        if kcin != cin {
            return Err(shape_err(
                OP,
                format!("input channels {cin} do not match kernel input channels {kcin}"),
            ));
        }
        if self.shape(bias) != [cout] {
            return Err(shape_err(
                OP,
                format!(
                    "bias shape {:?} does not match output channels {cout}",
                    self.shape(bias)
                ),
            ));
        }
        if stride == 0 {
            return Err(shape_err(OP, "stride must be at least 1"));
        }
        for (name, extent, k) in [("height", h, kh), ("width", w, kw)] {
            if k > extent + 2 * padding {
                return Err(shape_err(
                    OP,
                    format!("kernel {name} {k} exceeds padded input {name} {}", extent + 2 * padding),
                ));
            }
            if (extent + 2 * padding - k) % stride != 0 {
                return Err(TensorError::StrideDivision {
                    op: OP,
                    extent,
                    padding,
                    kernel: k,
                    stride,
                });
            }
        }
        let geom = ConvGeometry {
            batch: n,
            in_channels: cin,
            height: h,
            width: w,
            out_channels: cout,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(&geom, self.data(input), self.data(kernel), self.data(bias));
        let value = Tensor::new(&[n, cout, geom.out_height(), geom.out_width()], out)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = dims4("maxpool2x2", self.shape(input))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err(
                "maxpool2x2",
                format!("height {h} and width {w} must both be even"),
            ));
        }
        let (out, argmax) = kernels::maxpool2x2_forward(self.data(input), n * c, h, w);
        let value = Tensor::new(&[n, c, h / 2, w / 2], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::MaxPool { input, argmax }, rg))
    }

    /// Fractional-stride (stride 1/2) convolution: exact 2x spatial upsampling.
    pub fn transposed_conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var, TensorError> {
        const OP: &str = "transposed_conv2d";
        let [n, c, h, w] = dims4(OP, self.shape(input))?;
        let [kc, cout] = match self.shape(kernel) {
            &[a, b, 2, 2] => [a, b],
            s => return Err(shape_err(OP, format!("kernel must be [Cin,Cout,2,2], got {s:?}"))),
        };
        if kc != c {
            return Err(shape_err(
                OP,
                format!("input channels {c} do not match kernel input channels {kc}"),
            ));
        }
        if self.shape(bias) != [cout] {
            return Err(shape_err(
                OP,
                format!(
                    "bias shape {:?} does not match output channels {cout}",
                    self.shape(bias)
                ),
            ));
        }
        let geom = UpGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: cout,
        };
        let out = kernels::transposed_conv2x2_forward(&geom, self.data(input), self.data(kernel), self.data(bias));
        let value = Tensor::new(&[n, cout, 2 * h, 2 * w], out)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::TransposedConv {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    fn unary(&mut self, input: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape(), data).expect("unary op preserves shape");
        let rg = self.any_grad(&[input]);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(input, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, kernels::sigmoid, Op::Sigmoid { input })
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.unary(input, |v| v.tanh(), Op::Tanh { input })
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        self.unary(input, |v| v * factor, Op::Scale { input, factor })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                name,
                format!("operand shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let s: T = self.data(input).iter().copied().sum();
        let rg = self.any_grad(&[input]);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        const OP: &str = "concat_channels";
        let [n, c1, h, w] = dims4(OP, self.shape(a))?;
        let [n2, c2, h2, w2] = dims4(OP, self.shape(b))?;
        if n != n2 {
            return Err(shape_err(OP, format!("batch sizes {n} and {n2} differ")));
        }
        if (h, w) != (h2, w2) {
            return Err(shape_err(OP, format!("spatial sizes {h}x{w} and {h2}x{w2} differ")));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (c1 + c2) * plane);
        for i in 0..n {
            data.extend_from_slice(&self.data(a)[i * c1 * plane..(i + 1) * c1 * plane]);
            data.extend_from_slice(&self.data(b)[i * c2 * plane..(i + 1) * c2 * plane]);
        }
        let value = Tensor::new(&[n, c1 + c2, h, w], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::ConcatChannels { a, b }, rg))
    }

    /// Item `index` of the leading (batch) axis, keeping a batch axis of 1.
    pub fn select_batch(&mut self, input: Var, index: usize) -> Result<Var, TensorError> {
        let shape = self.shape(input).to_vec();
        if shape.is_empty() || index >= shape[0] {
            return Err(shape_err(
                "select_batch",
                format!("index {index} out of range for shape {shape:?}"),
            ));
        }
        let item: usize = shape[1..].iter().product();
        let data = self.data(input)[index * item..(index + 1) * item].to_vec();
        let mut out_shape = shape;
        out_shape[0] = 1;
        let value = Tensor::new(&out_shape, data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::SelectBatch { input, index }, rg))
    }

    /// Concatenates tensors along the leading (batch) axis.
    pub fn stack_batch(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        let first = inputs.first().ok_or_else(|| shape_err("stack_batch", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut total = 0;
        let mut data = Vec::new();
        for &v in inputs {
            let s = self.shape(v);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err(
                    "stack_batch",
                    format!("shape {s:?} does not match trailing dims {tail:?}"),
                ));
            }
            total += s[0];
            data.extend_from_slice(self.data(v));
        }
        let mut shape = vec![total];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, data)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            value,
            Op::StackBatch {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Broadcasts an unbatched `[C,H,W]` tensor to `[n,C,H,W]`.
    pub fn expand_batch(&mut self, input: Var, n: usize) -> Result<Var, TensorError> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 || n == 0 {
            return Err(shape_err(
                "expand_batch",
                format!("expected [C,H,W] and n >= 1, got {shape:?}, n={n}"),
            ));
        }
        let data = self.data(input).repeat(n);
        let value = Tensor::new(&[n, shape[0], shape[1], shape[2]], data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::ExpandBatch { input }, rg))
    }

    /// Per-channel batch normalization over the (N, H, W) axes. In train mode
    /// the returned statistics are the batch mean and (biased) variance, for
    /// the caller to fold into its running estimates.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: &BnMode<T>,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>), TensorError> {
        const OP: &str = "batch_norm";
        let [n, c, h, w] = dims4(OP, self.shape(input))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(OP, format!("scale/shift must have shape [{c}]")));
        }
        let plane = h * w;
        let count = n * plane;
        let x = self.data(input);
        let (mean, var, eps, train) = match mode {
            BnMode::Train { eps } => {
                if count < 2 {
                    return Err(TensorError::DegenerateBatch(count));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let inv = T::one() / T::from_f64(count as f64);
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        let start = (b * c + ch) * plane;
                        s = s + x[start..start + plane].iter().copied().sum::<T>();
                    }
                    let m = s * inv;
                    let mut sq = T::zero();
                    for b in 0..n {
                        let start = (b * c + ch) * plane;
                        sq = sq + x[start..start + plane].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                    }
                    mean[ch] = m;
                    var[ch] = sq * inv;
                }
                (mean, var, *eps, true)
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err(OP, format!("running statistics must have {c} channels")));
                }
                (mean.clone(), var.clone(), *eps, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let start = (b * c + ch) * plane;
                for i in start..start + plane {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        let v = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, train.then_some((mean, var))))
    }

    /// Mean over all `N*H*W` pixels of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &[usize]) -> Result<Var, TensorError> {
        const OP: &str = "softmax_cross_entropy";
        let [n, k, h, w] = dims4(OP, self.shape(logits))?;
        if k < 2 {
            return Err(shape_err(OP, format!("need at least 2 classes, got {k}")));
        }
        let plane = h * w;
        if target.len() != n * plane {
            return Err(shape_err(
                OP,
                format!("target has {} pixels, logits have {}", target.len(), n * plane),
            ));
        }
        if let Some((index, &id)) = target.iter().enumerate().find(|(_, &t)| t >= k) {
            return Err(TensorError::TargetOutOfRange { id, index, classes: k });
        }
        let x = self.data(logits);
        let mut probs = vec![T::zero(); x.len()];
        let mut total = 0.0f64;
        for b in 0..n {
            let base = b * k * plane;
            for p in 0..plane {
                let mut mx = x[base + p];
                for cl in 1..k {
                    mx = mx.max(x[base + cl * plane + p]);
                }
                let mut denom = T::zero();
                for cl in 0..k {
                    let e = (x[base + cl * plane + p] - mx).exp();
                    probs[base + cl * plane + p] = e;
                    denom = denom + e;
                }
                for cl in 0..k {
                    probs[base + cl * plane + p] = probs[base + cl * plane + p] / denom;
                }
                let t = target[b * plane + p];
                let log_p = x[base + t * plane + p] - mx - denom.ln();
                total -= log_p.as_f64();
            }
        }
        let loss = T::from_f64(total / (n * plane) as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Propagates d(loss)/d(loss) = 1 back through every recorded operation.
    /// Gradients of values used several times are summed.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(gout) = self.grads[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                self.grads[id] = Some(gout);
                continue;
            }
            self.backward_node(id, &gout);
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    /// Zeroed gradient slot for `v`, or `None` when `v` needs no gradient.
    fn slot(&mut self, v: Var) -> Option<Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(
            self.grads[v.0]
                .take()
                .unwrap_or_else(|| vec![T::zero(); self.nodes[v.0].value.len()]),
        )
    }

    fn put(&mut self, v: Var, g: Option<Vec<T>>) {
        if let Some(g) = g {
            self.grads[v.0] = Some(g);
        }
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if let Some(mut g) = self.slot(v) {
            f(&mut g);
            self.grads[v.0] = Some(g);
        }
    }

    fn backward_node(&mut self, id: usize, gout: &[T]) {
        // Temporarily detach the op so input values can be borrowed while
        // gradient slots are mutated.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        debug_assert!(op.inputs().iter().all(|v| v.0 < id));
        match &op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (mut dx, mut dk, mut db) = (self.slot(*input), self.slot(*kernel), self.slot(*bias));
                kernels::conv2d_backward(
                    geom,
                    self.data(*input),
                    self.data(*kernel),
                    gout,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.put(*input, dx);
                self.put(*kernel, dk);
                self.put(*bias, db);
            }
            Op::TransposedConv {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (mut dx, mut dk, mut db) = (self.slot(*input), self.slot(*kernel), self.slot(*bias));
                kernels::transposed_conv2x2_backward(
                    geom,
                    self.data(*input),
                    self.data(*kernel),
                    gout,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.put(*input, dx);
                self.put(*kernel, dk);
                self.put(*bias, db);
            }
            Op::MaxPool { input, argmax } => self.accumulate(*input, |g| {
                for (&src, &d) in argmax.iter().zip(gout) {
                    g[src] = g[src] + d;
                }
            }),
            Op::Relu { input } => {
                let x = self.nodes[input.0].value.data().to_vec();
                self.accumulate(*input, |g| {
                    for ((gi, &xi), &d) in g.iter_mut().zip(&x).zip(gout) {
                        if xi > T::zero() {
                            *gi = *gi + d;
                        }
                    }
                })
            }
            Op::Sigmoid { input } => {
                let y = self.nodes[id].value.data().to_vec();
                self.accumulate(*input, |g| {
                    for ((gi, &yi), &d) in g.iter_mut().zip(&y).zip(gout) {
                        *gi = *gi + d * yi * (T::one() - yi);
                    }
                })
            }
            Op::Tanh { input } => {
                let y = self.nodes[id].value.data().to_vec();
                self.accumulate(*input, |g| {
                    for ((gi, &yi), &d) in g.iter_mut().zip(&y).zip(gout) {
                        *gi = *gi + d * (T::one() - yi * yi);
                    }
                })
            }
            Op::Scale { input, factor } => self.accumulate(*input, |g| {
                for (gi, &d) in g.iter_mut().zip(gout) {
                    *gi = *gi + d * *factor;
                }
            }),
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(op, Op::Sub { .. }) {
                    -T::one()
                } else {
                    T::one()
                };
                self.accumulate(*a, |g| {
                    for (gi, &d) in g.iter_mut().zip(gout) {
                        *gi = *gi + d;
                    }
                });
                self.accumulate(*b, |g| {
                    for (gi, &d) in g.iter_mut().zip(gout) {
                        *gi = *gi + sign * d;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = self.data(*a).to_vec();
                let bv = self.data(*b).to_vec();
                self.accumulate(*a, |g| {
                    for ((gi, &y), &d) in g.iter_mut().zip(&bv).zip(gout) {
                        *gi = *gi + d * y;
                    }
                });
                self.accumulate(*b, |g| {
                    for ((gi, &x), &d) in g.iter_mut().zip(&av).zip(gout) {
                        *gi = *gi + d * x;
                    }
                });
            }
            Op::Sum { input } => self.accumulate(*input, |g| {
                for gi in g.iter_mut() {
                    *gi = *gi + gout[0];
                }
            }),
            Op::ConcatChannels { a, b } => {
                let [n, c1, h, w] = dims4("concat", self.shape(*a)).expect("checked in forward");
                let c2 = self.shape(*b)[1];
                let plane = h * w;
                self.accumulate(*a, |g| {
                    for i in 0..n {
                        let src = &gout[i * (c1 + c2) * plane..][..c1 * plane];
                        for (gi, &d) in g[i * c1 * plane..(i + 1) * c1 * plane].iter_mut().zip(src) {
                            *gi = *gi + d;
                        }
                    }
                });
                self.accumulate(*b, |g| {
                    for i in 0..n {
                        let src = &gout[(i * (c1 + c2) + c1) * plane..][..c2 * plane];
                        for (gi, &d) in g[i * c2 * plane..(i + 1) * c2 * plane].iter_mut().zip(src) {
                            *gi = *gi + d;
                        }
                    }
                });
            }
            Op::SelectBatch { input, index } => {
                let item = gout.len();
                self.accumulate(*input, |g| {
                    for (gi, &d) in g[index * item..(index + 1) * item].iter_mut().zip(gout) {
                        *gi = *gi + d;
                    }
                })
            }
            Op::StackBatch { inputs } => {
                let mut offset = 0;
                for &v in inputs {
                    let len = self.nodes[v.0].value.len();
                    let src = &gout[offset..offset + len];
                    self.accumulate(v, |g| {
                        for (gi, &d) in g.iter_mut().zip(src) {
                            *gi = *gi + d;
                        }
                    });
                    offset += len;
                }
            }
            Op::ExpandBatch { input } => {
                let item = self.nodes[input.0].value.len();
                self.accumulate(*input, |g| {
                    for chunk in gout.chunks(item) {
                        for (gi, &d) in g.iter_mut().zip(chunk) {
                            *gi = *gi + d;
                        }
                    }
                })
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [n, c, h, w] = dims4("batch_norm", self.shape(*input)).expect("checked in forward");
                let plane = h * w;
                let count = T::from_f64((n * plane) as f64);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let start = (b * c + ch) * plane;
                        for i in start..start + plane {
                            sum_dy[ch] = sum_dy[ch] + gout[i];
                            sum_dy_xhat[ch] = sum_dy_xhat[ch] + gout[i] * xhat[i];
                        }
                    }
                }
                self.accumulate(*gamma, |g| {
                    for ch in 0..c {
                        g[ch] = g[ch] + sum_dy_xhat[ch];
                    }
                });
                self.accumulate(*beta, |g| {
                    for ch in 0..c {
                        g[ch] = g[ch] + sum_dy[ch];
                    }
                });
                let gm = self.data(*gamma).to_vec();
                self.accumulate(*input, |g| {
                    for b in 0..n {
                        for ch in 0..c {
                            let start = (b * c + ch) * plane;
                            let k = gm[ch] * inv_std[ch];
                            for i in start..start + plane {
                                let d = if *train {
                                    k * (gout[i] - (sum_dy[ch] + xhat[i] * sum_dy_xhat[ch]) / count)
                                } else {
                                    k * gout[i]
                                };
                                g[i] = g[i] + d;
                            }
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, probs, target } => {
                let [n, k, h, w] = dims4("softmax_cross_entropy", self.shape(*logits)).expect("checked in forward");
                let plane = h * w;
                let scale = gout[0] / T::from_f64((n * plane) as f64);
                self.accumulate(*logits, |g| {
                    for b in 0..n {
                        for cl in 0..k {
                            for p in 0..plane {
                                let i = (b * k + cl) * plane + p;
                                let hot = if target[b * plane + p] == cl {
                                    T::one()
                                } else {
                                    T::zero()
                                };
                                g[i] = g[i] + scale * (probs[i] - hot);
                            }
                        }
                    }
                });
            }
        }
        self.nodes[id].op = op;
    }
}
