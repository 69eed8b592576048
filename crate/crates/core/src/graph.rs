//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order; node ids are
//! therefore already a topological order and [`Graph::backward`] is a single
//! reverse sweep. Leaf gradients accumulate (`+=`) across backward calls.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Element, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Destination of one source block inside a scatter: sample index and the
/// top-left pixel of the block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockTarget {
    pub sample: usize,
    pub y: usize,
    pub x: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        batch: usize,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool {
        x: Var,
        window: usize,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Upsample {
        x: Var,
        fh: usize,
        fw: usize,
    },
    Reshape(Var),
    ScatterBlocks {
        base: Var,
        src: Var,
        targets: Vec<BlockTarget>,
    },
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    BceWithLogits {
        logits: Var,
        targets: Var,
    },
    Dice {
        probs: Var,
        targets: Var,
        smooth: f64,
    },
}

#[derive(Debug)]
struct Node<E: Element> {
    value: Tensor<E>,
    op: Op,
    requires_grad: bool,
    is_param: bool,
    grad: Option<Tensor<E>>,
}

#[derive(Debug)]
pub struct Graph<E: Element = f32> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape4(t: &[usize], what: &str) -> Result<[usize; 4]> {
    match t {
        &[a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::dim(format!("{what}: expected rank-4 tensor, got {t:?}"))),
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<E>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<E>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Trainable parameter leaf. Parameters are excluded from
    /// [`Graph::stash_bytes`] since they are owned by the model.
    pub fn param(&mut self, t: Tensor<E>) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.nodes[v.0].is_param = true;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` if no backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn grad_or_zeros(&self, v: Var) -> Tensor<E> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    /// Bytes held by every non-parameter node: op outputs plus constant
    /// inputs. This is what stays alive until the graph is dropped.
    pub fn stash_bytes(&self) -> u64 {
        self.nodes
            .iter()
            .filter(|n| !n.is_param)
            .map(|n| n.value.nbytes())
            .sum()
    }

    /// Hash of every data-dependent branch taken in the forward pass (relu
    /// signs and maxpool winners). Two evaluations with equal signatures lie
    /// on the same linear piece of the piecewise-linear parts of the graph.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.nodes[x.0].value.data() {
                        (v > E::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    // ---------------------------------------------------------------- ops

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let [batch, cin, h, wd] = shape4(self.shape(x), "conv2d input")?;
        let [cout, wcin, kh, kw] = shape4(self.shape(w), "conv2d weight")?;
        if wcin != cin {
            return Err(Error::dim(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if self.shape(b) != [cout] {
            return Err(Error::dim(format!(
                "conv2d: bias shape {:?}, expected [{cout}]",
                self.shape(b)
            )));
        }
        if stride == 0 || kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(Error::dim(format!(
                "conv2d: kernel {kh}x{kw} stride {stride} does not fit {h}x{wd} with padding {padding}"
            )));
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
        };
        let (ho, wo) = geom.out_hw();
        let out = kernels::conv2d_forward(
            &geom,
            batch,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let rg = self.rg(&[x, w, b]);
        let t = Tensor::new(vec![batch, cout, ho, wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, batch }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > E::zero() { v } else { E::zero() });
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(t, Op::Sigmoid(x), rg)
    }

    fn pool_dims(&self, x: Var, window: usize, what: &str) -> Result<[usize; 4]> {
        let s = shape4(self.shape(x), what)?;
        if window == 0 || s[2] % window != 0 || s[3] % window != 0 {
            return Err(Error::dim(format!(
                "{what}: spatial dims {}x{} not divisible by window {window}",
                s[2], s[3]
            )));
        }
        Ok(s)
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let [b, c, h, w] = self.pool_dims(x, window, "maxpool2d")?;
        let (ho, wo) = (h / window, w / window);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * window * w + ox * window;
                    for dy in 0..window {
                        for dx in 0..window {
                            let i = base + (oy * window + dy) * w + ox * window + dx;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let rg = self.rg(&[x]);
        let t = Tensor::new(vec![b, c, ho, wo], out)?;
        Ok(self.push(t, Op::MaxPool { x, argmax }, rg))
    }

    pub fn avgpool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let [b, c, h, w] = self.pool_dims(x, window, "avgpool2d")?;
        let t = avgpool_values(self.value(x), window);
        debug_assert_eq!(t.shape(), [b, c, h / window, w / window]);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::AvgPool { x, window }, rg))
    }

    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = shape4(self.shape(x), "global_avgpool")?;
        let hw = h * w;
        let inv = E::of(1.0 / hw as f64);
        let src = self.value(x).data();
        let out = (0..b * c)
            .map(|p| kernels::sum(&src[p * hw..(p + 1) * hw]) * inv)
            .collect();
        let rg = self.rg(&[x]);
        let t = Tensor::new(vec![b, c], out)?;
        Ok(self.push(t, Op::GlobalAvgPool(x), rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bs, f) = match self.shape(x) {
            &[bs, f] => (bs, f),
            s => return Err(Error::dim(format!("linear: input must be rank 2, got {s:?}"))),
        };
        let (wf, g) = match self.shape(w) {
            &[wf, g] => (wf, g),
            s => return Err(Error::dim(format!("linear: weight must be rank 2, got {s:?}"))),
        };
        if wf != f {
            return Err(Error::dim(format!(
                "linear: input features {f} vs weight rows {wf}"
            )));
        }
        if self.shape(b) != [g] {
            return Err(Error::dim(format!(
                "linear: bias shape {:?}, expected [{g}]",
                self.shape(b)
            )));
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = Vec::with_capacity(bs * g);
        for r in 0..bs {
            let mut row = bd.to_vec();
            for (fi, &xv) in xd[r * f..(r + 1) * f].iter().enumerate() {
                kernels::axpy(xv, &wd[fi * g..(fi + 1) * g], &mut row);
            }
            out.extend(row);
        }
        let rg = self.rg(&[x, w, b]);
        let t = Tensor::new(vec![bs, g], out)?;
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    /// Elementwise sum. An operand whose shape is a trailing suffix of the
    /// other's is repeated along the leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let t = if sa == sb {
            let mut t = self.value(a).clone();
            t.add_assign(self.value(b))?;
            t
        } else if sa.ends_with(&sb) || sb.ends_with(&sa) {
            let (big, small) = if sa.len() >= sb.len() { (a, b) } else { (b, a) };
            let s = self.value(small).data();
            let mut t = self.value(big).clone();
            for chunk in t.data_mut().chunks_mut(s.len()) {
                for (x, &y) in chunk.iter_mut().zip(s) {
                    *x = *x + y;
                }
            }
            t
        } else {
            return Err(Error::dim(format!("add: incompatible shapes {sa:?} and {sb:?}")));
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::dim(format!("concat: axis {axis} out of range for {s0:?}")));
        }
        let mut out_shape = s0.clone();
        out_shape[axis] = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != s0.len()
                || s.iter()
                    .zip(&s0)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim(format!("concat: {s0:?} vs {s:?} on axis {axis}")));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let chunks: Vec<usize> = xs
            .iter()
            .map(|&v| self.shape(v)[axis..].iter().product())
            .collect();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for (&v, &c) in xs.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(v).data()[o * c..(o + 1) * c]);
            }
        }
        let rg = self.rg(xs);
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn upsample_nearest(&mut self, x: Var, fh: usize, fw: usize) -> Result<Var> {
        let [b, c, h, w] = shape4(self.shape(x), "upsample_nearest")?;
        if fh == 0 || fw == 0 {
            return Err(Error::dim("upsample_nearest: zero factor"));
        }
        let t = upsample_values(self.value(x), fh, fw);
        debug_assert_eq!(t.shape(), [b, c, h * fh, w * fw]);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Upsample { x, fh, fw }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Copy of `base` with each source block `src[k]` written at
    /// `targets[k]`. Gradient reaches `src` only through the written blocks
    /// and `base` only outside them.
    pub fn scatter_blocks(&mut self, base: Var, src: Var, targets: &[BlockTarget]) -> Result<Var> {
        let [b, c, h, w] = shape4(self.shape(base), "scatter_blocks base")?;
        let [k, sc, bh, bw] = shape4(self.shape(src), "scatter_blocks source")?;
        if sc != c || k != targets.len() {
            return Err(Error::dim(format!(
                "scatter_blocks: source {:?} vs base {:?} with {} targets",
                self.shape(src),
                self.shape(base),
                targets.len()
            )));
        }
        let mut covered = vec![false; b * h * w];
        for t in targets {
            if t.sample >= b || t.y + bh > h || t.x + bw > w {
                return Err(Error::Index(format!(
                    "scatter_blocks: target {t:?} outside base {:?}",
                    self.shape(base)
                )));
            }
            for y in t.y..t.y + bh {
                for x in t.x..t.x + bw {
                    let i = (t.sample * h + y) * w + x;
                    if covered[i] {
                        return Err(Error::Index(format!("scatter_blocks: overlapping target {t:?}")));
                    }
                    covered[i] = true;
                }
            }
        }
        let mut out = self.value(base).clone();
        let sd = self.value(src).data();
        let od = out.data_mut();
        for (ki, t) in targets.iter().enumerate() {
            for ch in 0..c {
                for y in 0..bh {
                    let s0 = ((ki * c + ch) * bh + y) * bw;
                    let d0 = ((t.sample * c + ch) * h + t.y + y) * w + t.x;
                    od[d0..d0 + bw].copy_from_slice(&sd[s0..s0 + bw]);
                }
            }
        }
        let rg = self.rg(&[base, src]);
        Ok(self.push(
            out,
            Op::ScatterBlocks {
                base,
                src,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(kernels::sum(self.value(x).data()));
        let rg = self.rg(&[x]);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let t = Tensor::scalar(kernels::sum(self.value(x).data()) * E::of(1.0 / n));
        let rg = self.rg(&[x]);
        self.push(t, Op::Mean(x), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = E::of(factor);
        let t = self.value(x).map(|v| v * f);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, factor), rg)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = match self.shape(logits) {
            &[b, k] => (b, k),
            s => return Err(Error::dim(format!("cross_entropy: logits must be [B,K], got {s:?}"))),
        };
        if labels.len() != b {
            return Err(Error::dim(format!(
                "cross_entropy: {} labels for batch {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(format!(
                "cross_entropy: label {bad} outside [0, {k})"
            )));
        }
        let ld = self.value(logits).data();
        let mut total = 0.0f64;
        for (r, &label) in labels.iter().enumerate() {
            let row = &ld[r * k..(r + 1) * k];
            let lse = log_sum_exp(row);
            total += lse - row[label].as_f64();
        }
        let t = Tensor::scalar(E::of(total / b as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy computed from logits in the stable form
    /// `max(x,0) - x*t + ln(1 + e^{-|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        self.check_binary_targets(logits, targets, "bce")?;
        let (ld, td) = (self.value(logits).data(), self.value(targets).data());
        let mut total = 0.0f64;
        for (&x, &t) in ld.iter().zip(td) {
            let softplus = (-x.abs()).exp().ln_1p();
            total += (x.max(E::zero()) - x * t + softplus).as_f64();
        }
        let t = Tensor::scalar(E::of(total / ld.len() as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(t, Op::BceWithLogits { logits, targets }, rg))
    }

    /// `1 - (2 Σ p·t + smooth) / (Σ p + Σ t + smooth)`.
    pub fn dice_loss(&mut self, probs: Var, targets: Var, smooth: f64) -> Result<Var> {
        self.check_binary_targets(probs, targets, "dice")?;
        let (inter, total) = dice_terms(self.value(probs).data(), self.value(targets).data());
        let t = Tensor::scalar(E::of(1.0 - (2.0 * inter + smooth) / (total + smooth)));
        let rg = self.rg(&[probs]);
        Ok(self.push(
            t,
            Op::Dice {
                probs,
                targets,
                smooth,
            },
            rg,
        ))
    }

    fn check_binary_targets(&self, x: Var, t: Var, what: &str) -> Result<()> {
        if self.shape(x) != self.shape(t) {
            return Err(Error::dim(format!(
                "{what}: prediction {:?} vs target {:?}",
                self.shape(x),
                self.shape(t)
            )));
        }
        if self.requires_grad(t) {
            return Err(Error::contract(format!("{what}: targets must be constant")));
        }
        if self
            .value(t)
            .data()
            .iter()
            .any(|&v| v != E::zero() && v != E::one())
        {
            return Err(Error::contract(format!("{what}: target values must be 0 or 1")));
        }
        Ok(())
    }

    // ----------------------------------------------------------- backward

    /// Accumulate `d loss / d leaf` into every gradient-requiring leaf that
    /// `loss` depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (v, contrib) in self.local_grads(i, &g)? {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor<E>) -> Result<Vec<(Var, Tensor<E>)>> {
        let node = &self.nodes[i];
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, batch } => {
                let r = kernels::conv2d_backward(
                    geom,
                    *batch,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    self.requires_grad(*x),
                );
                if let Some(gi) = r.input {
                    out.push((*x, Tensor::new(self.shape(*x).to_vec(), gi)?));
                }
                out.push((*w, Tensor::new(self.shape(*w).to_vec(), r.weight)?));
                out.push((*b, Tensor::new(self.shape(*b).to_vec(), r.bias)?));
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let data = xd.iter().zip(gd).map(|(&v, &d)| if v > E::zero() { d } else { E::zero() });
                out.push((*x, Tensor::new(self.shape(*x).to_vec(), data.collect())?));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let data = y.iter().zip(gd).map(|(&v, &d)| d * v * (E::one() - v));
                out.push((*x, Tensor::new(self.shape(*x).to_vec(), data.collect())?));
            }
            Op::MaxPool { x, argmax, .. } => {
                let mut t = Tensor::zeros(self.shape(*x));
                let td = t.data_mut();
                for (j, &src) in argmax.iter().enumerate() {
                    td[src as usize] = td[src as usize] + gd[j];
                }
                out.push((*x, t));
            }
            Op::AvgPool { x, window } => {
                let [_, _, h, w] = shape4(self.shape(*x), "avgpool2d")?;
                let (ho, wo) = (h / window, w / window);
                let inv = E::of(1.0 / (window * window) as f64);
                let t = Tensor::from_fn(self.shape(*x), |j| {
                    let plane = j / (h * w);
                    let (y, xx) = ((j / w) % h, j % w);
                    gd[(plane * ho + y / window) * wo + xx / window] * inv
                });
                out.push((*x, t));
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = shape4(self.shape(*x), "global_avgpool")?;
                let inv = E::of(1.0 / (h * w) as f64);
                let t = Tensor::from_fn(self.shape(*x), |j| gd[j / (h * w)] * inv);
                out.push((*x, t));
            }
            Op::Linear { x, w, b } => {
                let (bs, f) = (self.shape(*x)[0], self.shape(*x)[1]);
                let gdim = self.shape(*w)[1];
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                if self.requires_grad(*x) {
                    let t = Tensor::from_fn(&[bs, f], |j| {
                        let (r, fi) = (j / f, j % f);
                        kernels::dot(&gd[r * gdim..(r + 1) * gdim], &wd[fi * gdim..(fi + 1) * gdim])
                    });
                    out.push((*x, t));
                }
                let mut gw = vec![E::zero(); f * gdim];
                let mut gb = vec![E::zero(); gdim];
                for r in 0..bs {
                    let grow = &gd[r * gdim..(r + 1) * gdim];
                    for fi in 0..f {
                        kernels::axpy(xd[r * f + fi], grow, &mut gw[fi * gdim..(fi + 1) * gdim]);
                    }
                    kernels::axpy(E::one(), grow, &mut gb);
                }
                out.push((*w, Tensor::new(vec![f, gdim], gw)?));
                out.push((*b, Tensor::new(vec![gdim], gb)?));
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    let s = self.value(v);
                    if s.len() == g.len() {
                        out.push((v, g.clone()));
                    } else {
                        let mut t = Tensor::zeros(s.shape());
                        for chunk in gd.chunks(s.len()) {
                            kernels::axpy(E::one(), chunk, t.data_mut());
                        }
                        out.push((v, t));
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let outer: usize = node.value.shape()[..*axis].iter().product();
                let chunks: Vec<usize> = xs
                    .iter()
                    .map(|&v| self.shape(v)[*axis..].iter().product())
                    .collect();
                let row: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&v, &c) in xs.iter().zip(&chunks) {
                    let mut data = Vec::with_capacity(outer * c);
                    for o in 0..outer {
                        data.extend_from_slice(&gd[o * row + offset..o * row + offset + c]);
                    }
                    offset += c;
                    out.push((v, Tensor::new(self.shape(v).to_vec(), data)?));
                }
            }
            &Op::Upsample { x, fh, fw } => {
                let [b, c, h, w] = shape4(self.shape(x), "upsample_nearest")?;
                let wo = w * fw;
                let mut t = Tensor::zeros(&[b, c, h, w]);
                let td = t.data_mut();
                for (dst, band) in td.chunks_mut(w).zip(gd.chunks(fh * wo)) {
                    for src in band.chunks(wo) {
                        for (d, cell) in dst.iter_mut().zip(src.chunks(fw)) {
                            for &v in cell {
                                *d = *d + v;
                            }
                        }
                    }
                }
                out.push((x, t));
            }
            Op::Reshape(x) => out.push((*x, g.clone().reshaped(self.shape(*x))?)),
            Op::ScatterBlocks { base, src, targets } => {
                let [_, c, h, w] = shape4(self.shape(*base), "scatter_blocks")?;
                let [k, _, bh, bw] = shape4(self.shape(*src), "scatter_blocks")?;
                let mut gs = Vec::with_capacity(k * c * bh * bw);
                let mut gb = self.requires_grad(*base).then(|| g.clone());
                for t in targets {
                    for ch in 0..c {
                        for y in 0..bh {
                            let d0 = ((t.sample * c + ch) * h + t.y + y) * w + t.x;
                            gs.extend_from_slice(&gd[d0..d0 + bw]);
                            if let Some(gb) = gb.as_mut() {
                                gb.data_mut()[d0..d0 + bw].fill(E::zero());
                            }
                        }
                    }
                }
                out.push((*src, Tensor::new(vec![k, c, bh, bw], gs)?));
                if let Some(gb) = gb {
                    out.push((*base, gb));
                }
            }
            Op::Sum(x) => out.push((*x, Tensor::full(self.shape(*x), gd[0]))),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                out.push((*x, Tensor::full(self.shape(*x), gd[0] * E::of(1.0 / n))));
            }
            Op::Scale(x, f) => {
                let f = E::of(*f);
                out.push((*x, g.map(|v| v * f)));
            }
            Op::CrossEntropy { logits, labels } => {
                let k = self.shape(*logits)[1];
                let b = labels.len();
                let ld = self.value(*logits).data();
                let scale = gd[0].as_f64() / b as f64;
                let mut data = Vec::with_capacity(b * k);
                for (r, &label) in labels.iter().enumerate() {
                    let row = &ld[r * k..(r + 1) * k];
                    let lse = log_sum_exp(row);
                    for (j, &v) in row.iter().enumerate() {
                        let p = (v.as_f64() - lse).exp();
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        data.push(E::of((p - onehot) * scale));
                    }
                }
                out.push((*logits, Tensor::new(vec![b, k], data)?));
            }
            Op::BceWithLogits { logits, targets } => {
                let (ld, td) = (self.value(*logits).data(), self.value(*targets).data());
                let scale = E::of(1.0 / ld.len() as f64) * gd[0];
                let t = Tensor::from_fn(self.shape(*logits), |j| (sigmoid(ld[j]) - td[j]) * scale);
                out.push((*logits, t));
            }
            Op::Dice {
                probs,
                targets,
                smooth,
            } => {
                let (pd, td) = (self.value(*probs).data(), self.value(*targets).data());
                let (inter, total) = dice_terms(pd, td);
                let num = 2.0 * inter + smooth;
                let den = total + smooth;
                let up = gd[0].as_f64();
                let t = Tensor::from_fn(self.shape(*probs), |j| {
                    let tj = td[j].as_f64();
                    E::of(-up * (2.0 * tj * den - num) / (den * den))
                });
                out.push((*probs, t));
            }
        }
        Ok(out)
    }
}

#[inline]
fn sigmoid<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

fn log_sum_exp<E: Element>(row: &[E]) -> f64 {
    let m = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln()
}

fn dice_terms<E: Element>(p: &[E], t: &[E]) -> (f64, f64) {
    let inter = kernels::dot(p, t).as_f64();
    let total = (kernels::sum(p) + kernels::sum(t)).as_f64();
    (inter, total)
}

/// Area-average downsampling of a rank-4 tensor by `window` (no graph).
pub fn avgpool_values<E: Element>(t: &Tensor<E>, window: usize) -> Tensor<E> {
    avgpool_values_hw(t, window, window)
}

/// Area-average downsampling with independent vertical/horizontal factors.
pub fn avgpool_values_hw<E: Element>(t: &Tensor<E>, fh: usize, fw: usize) -> Tensor<E> {
    let s = t.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / fh, w / fw);
    let inv = E::of(1.0 / (fh * fw) as f64);
    let src = t.data();
    let mut out = Vec::with_capacity(b * c * ho * wo);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = E::zero();
                for dy in 0..fh {
                    let row = base + (oy * fh + dy) * w + ox * fw;
                    for dx in 0..fw {
                        acc = acc + src[row + dx];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    Tensor::new(vec![b, c, ho, wo], out).expect("pool shape")
}

/// Nearest-neighbour upsampling of a rank-4 tensor (no graph).
pub fn upsample_values<E: Element>(t: &Tensor<E>, fh: usize, fw: usize) -> Tensor<E> {
    let s = t.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let src = t.data();
    let wo = w * fw;
    let mut out = Vec::with_capacity(b * c * h * fh * wo);
    for row in src.chunks(w) {
        let start = out.len();
        for &v in row {
            out.extend(std::iter::repeat_n(v, fw));
        }
        for _ in 1..fh {
            out.extend_from_within(start..start + wo);
        }
    }
    Tensor::new(vec![b, c, h * fh, w * fw], out).expect("upsample shape")
}
