//! Patch feature extractors and aggregators.
//!
//! An [`Architecture`] describes layer structure only; a [`Model`] pairs it
//! with named parameter tensors. Forward passes bind the parameters into a
//! [`Graph`] so the same code serves training, inference and gradient checks
//! in either precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    /// Output feature width `d` (classification) or map channels `C`
    /// (segmentation).
    pub out_channels: usize,
    pub patch: (usize, usize),
    /// Stride of the first convolution (classification only).
    pub stem_stride: usize,
}

impl BackboneSpec {
    pub fn cls_default(in_channels: usize, patch: (usize, usize)) -> Self {
        Self {
            in_channels,
            widths: vec![16, 32, 64],
            out_channels: 64,
            patch,
            stem_stride: 1,
        }
    }

    pub fn seg_default(in_channels: usize, patch: (usize, usize)) -> Self {
        Self {
            in_channels,
            widths: vec![16, 32],
            out_channels: 8,
            patch,
            stem_stride: 1,
        }
    }

    /// Total spatial reduction of the classification stages.
    pub fn cls_downsample(&self) -> usize {
        self.stem_stride * (1 << self.widths.len().saturating_sub(1))
    }

    fn validate_common(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Build("channel counts must be positive".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Build(format!("bad stage widths {:?}", self.widths)));
        }
        if self.patch.0 == 0 || self.patch.1 == 0 {
            return Err(Error::Build("patch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregatorSpec {
    /// Input `[B, d, m, n]`, output `[B, num_classes]`.
    Cls {
        rows: usize,
        cols: usize,
        feature_dim: usize,
        num_classes: usize,
    },
    /// Input `[B, in_channels, M, N]`, output `[B, 1, M, N]`.
    Seg {
        height: usize,
        width: usize,
        in_channels: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Architecture {
    ClsBackbone(BackboneSpec),
    SegBackbone(BackboneSpec),
    Aggregator(AggregatorSpec),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Kaiming { fan_in: usize },
    Zero,
}

struct ParamDecl {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn conv_decl(out: &mut Vec<ParamDecl>, name: &str, cin: usize, cout: usize, k: usize) {
    out.push(ParamDecl {
        name: format!("{name}.weight"),
        shape: vec![cout, cin, k, k],
        init: Init::Kaiming { fan_in: cin * k * k },
    });
    out.push(ParamDecl {
        name: format!("{name}.bias"),
        shape: vec![cout],
        init: Init::Zero,
    });
}

/// Channel plan of the segmentation encoder-decoder, as `(name, cin, cout, k)`.
fn seg_layers(s: &BackboneSpec) -> [(&'static str, usize, usize, usize); 6] {
    let (a, b) = (s.widths[0], s.widths[1]);
    [
        ("enc1", s.in_channels, a, 3),
        ("enc2", a, b, 3),
        ("bottleneck", b, b, 3),
        ("dec2", 2 * b, b, 3),
        ("dec1", b + a, a, 3),
        ("head", a, s.out_channels, 1),
    ]
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::ClsBackbone(s) => {
                s.validate_common()?;
                if s.stem_stride == 0 {
                    return Err(Error::Build("stem stride must be positive".into()));
                }
                if *s.widths.last().unwrap() != s.out_channels {
                    return Err(Error::Build(format!(
                        "feature dim {} must equal the last stage width {}",
                        s.out_channels,
                        s.widths.last().unwrap()
                    )));
                }
                let f = s.cls_downsample();
                if s.patch.0 % f != 0 || s.patch.1 % f != 0 {
                    return Err(Error::Build(format!(
                        "patch {:?} not divisible by cumulative downsampling {f}",
                        s.patch
                    )));
                }
            }
            Architecture::SegBackbone(s) => {
                s.validate_common()?;
                if s.widths.len() != 2 {
                    return Err(Error::Build(format!(
                        "segmentation backbone takes two widths, got {:?}",
                        s.widths
                    )));
                }
                if s.patch.0 % 4 != 0 || s.patch.1 % 4 != 0 {
                    return Err(Error::Build(format!(
                        "patch {:?} not divisible by 4",
                        s.patch
                    )));
                }
            }
            Architecture::Aggregator(AggregatorSpec::Cls {
                rows,
                cols,
                feature_dim,
                num_classes,
            }) => {
                if rows * cols < 1 || *feature_dim == 0 || *num_classes == 0 {
                    return Err(Error::Build(format!("bad aggregator layout {self:?}")));
                }
            }
            Architecture::Aggregator(AggregatorSpec::Seg {
                height,
                width,
                in_channels,
            }) => {
                if height * width * in_channels == 0 {
                    return Err(Error::Build(format!("bad aggregator layout {self:?}")));
                }
            }
        }
        Ok(())
    }

    fn params(&self) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        match self {
            Architecture::ClsBackbone(s) => {
                let mut cin = s.in_channels;
                for (i, &w) in s.widths.iter().enumerate() {
                    conv_decl(&mut out, &format!("stage{i}.conv"), cin, w, 3);
                    cin = w;
                }
            }
            Architecture::SegBackbone(s) => {
                for (name, cin, cout, k) in seg_layers(s) {
                    conv_decl(&mut out, name, cin, cout, k);
                }
            }
            Architecture::Aggregator(AggregatorSpec::Cls {
                feature_dim,
                num_classes,
                ..
            }) => {
                conv_decl(&mut out, "mix.conv", *feature_dim, *feature_dim, 3);
                out.push(ParamDecl {
                    name: "classifier.weight".into(),
                    shape: vec![*feature_dim, *num_classes],
                    init: Init::Kaiming {
                        fan_in: *feature_dim,
                    },
                });
                out.push(ParamDecl {
                    name: "classifier.bias".into(),
                    shape: vec![*num_classes],
                    init: Init::Zero,
                });
            }
            Architecture::Aggregator(AggregatorSpec::Seg { in_channels, .. }) => {
                conv_decl(&mut out, "head", *in_channels, 1, 1);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|d| d.shape.iter().product::<usize>()).sum()
    }

    /// Same architecture with a different patch size (backbones only).
    pub fn with_patch(&self, patch: (usize, usize)) -> Self {
        match self {
            Architecture::ClsBackbone(s) => Architecture::ClsBackbone(BackboneSpec { patch, ..s.clone() }),
            Architecture::SegBackbone(s) => Architecture::SegBackbone(BackboneSpec { patch, ..s.clone() }),
            other => other.clone(),
        }
    }

    /// Expected input shape for a batch of `batch`.
    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        match self {
            Architecture::ClsBackbone(s) | Architecture::SegBackbone(s) => {
                vec![batch, s.in_channels, s.patch.0, s.patch.1]
            }
            Architecture::Aggregator(AggregatorSpec::Cls {
                rows,
                cols,
                feature_dim,
                ..
            }) => vec![batch, *feature_dim, *rows, *cols],
            Architecture::Aggregator(AggregatorSpec::Seg {
                height,
                width,
                in_channels,
            }) => vec![batch, *in_channels, *height, *width],
        }
    }

    /// Run the forward pass. `params` must be the bound parameters in
    /// declaration order (see [`Model::bind`]).
    pub fn forward<E: Element>(&self, g: &mut Graph<E>, params: &[Var], x: Var) -> Result<Var> {
        let expect = self.input_shape(g.shape(x)[0]);
        if g.shape(x) != expect.as_slice() {
            return Err(Error::dim(format!(
                "model input {:?}, expected {expect:?}",
                g.shape(x)
            )));
        }
        let p = |i: usize| (params[2 * i], params[2 * i + 1]);
        match self {
            Architecture::ClsBackbone(s) => {
                let mut h = x;
                let last = s.widths.len() - 1;
                for i in 0..=last {
                    let (w, b) = p(i);
                    let stride = if i == 0 { s.stem_stride } else { 1 };
                    h = g.conv2d(h, w, b, stride, 1)?;
                    h = g.relu(h);
                    if i < last {
                        h = g.maxpool2d(h, 2)?;
                    }
                }
                g.global_avgpool(h)
            }
            Architecture::SegBackbone(_) => {
                let conv_relu = |g: &mut Graph<E>, x: Var, i: usize| -> Result<Var> {
                    let (w, b) = p(i);
                    let y = g.conv2d(x, w, b, 1, 1)?;
                    Ok(g.relu(y))
                };
                let e1 = conv_relu(g, x, 0)?;
                let h = g.maxpool2d(e1, 2)?;
                let e2 = conv_relu(g, h, 1)?;
                let h = g.maxpool2d(e2, 2)?;
                let bn = conv_relu(g, h, 2)?;
                let h = g.upsample_nearest(bn, 2, 2)?;
                let h = g.concat(&[h, e2], 1)?;
                let d2 = conv_relu(g, h, 3)?;
                let h = g.upsample_nearest(d2, 2, 2)?;
                let h = g.concat(&[h, e1], 1)?;
                let d1 = conv_relu(g, h, 4)?;
                let (w, b) = p(5);
                g.conv2d(d1, w, b, 1, 0)
            }
            Architecture::Aggregator(AggregatorSpec::Cls { .. }) => {
                let (w, b) = p(0);
                let h = g.conv2d(x, w, b, 1, 1)?;
                let h = g.relu(h);
                let h = g.global_avgpool(h)?;
                let (w, b) = p(1);
                g.linear(h, w, b)
            }
            Architecture::Aggregator(AggregatorSpec::Seg { .. }) => {
                let (w, b) = p(0);
                g.conv2d(x, w, b, 1, 0)
            }
        }
    }

    /// Elements stashed by [`Architecture::forward`] for a batch of `batch`:
    /// every op output, excluding the input and the parameters.
    pub fn stash_elements(&self, batch: usize) -> u64 {
        let b = batch as u64;
        match self {
            Architecture::ClsBackbone(s) => {
                let (mut h, mut w) = (s.patch.0 as u64, s.patch.1 as u64);
                let st = s.stem_stride as u64;
                let mut total = 0;
                let last = s.widths.len() - 1;
                for (i, &c) in s.widths.iter().enumerate() {
                    if i == 0 {
                        h = (h - 1) / st + 1;
                        w = (w - 1) / st + 1;
                    }
                    let c = c as u64;
                    total += 2 * b * c * h * w;
                    if i < last {
                        h /= 2;
                        w /= 2;
                        total += b * c * h * w;
                    }
                }
                total + b * s.out_channels as u64
            }
            Architecture::SegBackbone(s) => {
                let (a, c) = (s.widths[0] as u64, s.widths[1] as u64);
                let full = (s.patch.0 * s.patch.1) as u64;
                let half = full / 4;
                let quarter = full / 16;
                b * (2 * a * full // enc1 conv + relu
                    + a * half // pool
                    + 2 * c * half // enc2
                    + c * quarter // pool
                    + 2 * c * quarter // bottleneck
                    + c * half // upsample
                    + 2 * c * half // concat
                    + 2 * c * half // dec2
                    + c * full // upsample
                    + (c + a) * full // concat
                    + 2 * a * full // dec1
                    + s.out_channels as u64 * full) // head
            }
            Architecture::Aggregator(AggregatorSpec::Cls {
                rows,
                cols,
                feature_dim,
                num_classes,
            }) => {
                let d = *feature_dim as u64;
                b * (2 * d * (rows * cols) as u64 + d + *num_classes as u64)
            }
            Architecture::Aggregator(AggregatorSpec::Seg { height, width, .. }) => {
                b * (height * width) as u64
            }
        }
    }

    /// Output shape for a batch of `batch`.
    pub fn output_shape(&self, batch: usize) -> Vec<usize> {
        match self {
            Architecture::ClsBackbone(s) => vec![batch, s.out_channels],
            Architecture::SegBackbone(s) => vec![batch, s.out_channels, s.patch.0, s.patch.1],
            Architecture::Aggregator(AggregatorSpec::Cls { num_classes, .. }) => {
                vec![batch, *num_classes]
            }
            Architecture::Aggregator(AggregatorSpec::Seg { height, width, .. }) => {
                vec![batch, 1, *height, *width]
            }
        }
    }
}

/// Named parameters and their accumulated gradients, in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<E: Element = f32> {
    pub arch: Architecture,
    names: Vec<String>,
    values: Vec<Tensor<E>>,
    grads: Vec<Tensor<E>>,
}

impl<E: Element> Model<E> {
    /// Build with Kaiming-uniform weights (`±sqrt(6 / fan_in)`) and zero
    /// biases.
    pub fn init(arch: Architecture, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let decls = arch.params();
        let mut values = Vec::with_capacity(decls.len());
        for d in &decls {
            let t = match d.init {
                Init::Zero => Tensor::zeros(&d.shape),
                Init::Kaiming { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&d.shape, |_| E::of(rng.random_range(-bound..bound)))
                }
            };
            values.push(t);
        }
        Self::from_parts(arch, decls, values)
    }

    fn from_parts(arch: Architecture, decls: Vec<ParamDecl>, values: Vec<Tensor<E>>) -> Result<Self> {
        for (d, v) in decls.iter().zip(&values) {
            if v.shape() != d.shape.as_slice() {
                return Err(Error::dim(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    d.name,
                    v.shape(),
                    d.shape
                )));
            }
        }
        let grads = values.iter().map(|v| Tensor::zeros(v.shape())).collect();
        Ok(Self {
            arch,
            names: decls.into_iter().map(|d| d.name).collect(),
            values,
            grads,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<E>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<E>] {
        &mut self.values
    }

    pub fn grads(&self) -> &[Tensor<E>] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [Tensor<E>] {
        &mut self.grads
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.values[i])
    }

    pub fn param_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn param_bytes(&self) -> u64 {
        self.values.iter().map(Tensor::nbytes).sum()
    }

    /// Insert every parameter into `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<E>) -> Vec<Var> {
        self.values.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Insert every parameter as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph<E>) -> Vec<Var> {
        self.values.iter().map(|t| g.input(t.clone())).collect()
    }

    pub fn forward(&self, g: &mut Graph<E>, params: &[Var], x: Var) -> Result<Var> {
        self.arch.forward(g, params, x)
    }

    /// Add the gradients a backward pass left on `vars` into the model's
    /// accumulators, in declaration order.
    pub fn absorb_grads(&mut self, g: &Graph<E>, vars: &[Var]) -> Result<()> {
        for (acc, &v) in self.grads.iter_mut().zip(vars) {
            if let Some(gr) = g.grad(v) {
                acc.add_assign(gr)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|t| t.fill(E::zero()));
    }

    /// Write one blob per parameter plus `manifest.txt` (`name file shape`).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (name, t) in self.names.iter().zip(&self.values) {
            let file = format!("{name}.pgt");
            t.save(dir.join(&file))?;
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(manifest, "{name} {file} {}", dims.join("x"));
        }
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    /// Load parameters for `arch` from a directory written by [`Model::save`].
    pub fn load(arch: Architecture, dir: &Path) -> Result<Self> {
        arch.validate()?;
        let text = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let mut files = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(name), Some(file), Some(_), None) => {
                    files.insert(name.to_string(), file.to_string());
                }
                _ => {
                    return Err(Error::Format(format!(
                        "manifest line {}: expected `name file shape`",
                        ln + 1
                    )))
                }
            }
        }
        let decls = arch.params();
        if files.len() != decls.len() {
            return Err(Error::Format(format!(
                "manifest lists {} parameters, architecture has {}",
                files.len(),
                decls.len()
            )));
        }
        let mut values = Vec::with_capacity(decls.len());
        for d in &decls {
            let file = files
                .get(&d.name)
                .ok_or_else(|| Error::Format(format!("manifest lacks parameter {}", d.name)))?;
            values.push(Tensor::<f32>::load(dir.join(file))?.cast());
        }
        Self::from_parts(arch, decls, values)
    }

    pub fn cast<F: Element>(&self) -> Model<F> {
        Model {
            arch: self.arch.clone(),
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: self.grads.iter().map(Tensor::cast).collect(),
        }
    }
}

pub fn build_backbone_cls<E: Element>(spec: BackboneSpec, rng: &mut impl Rng) -> Result<Model<E>> {
    Model::init(Architecture::ClsBackbone(spec), rng)
}

pub fn build_backbone_seg<E: Element>(spec: BackboneSpec, rng: &mut impl Rng) -> Result<Model<E>> {
    Model::init(Architecture::SegBackbone(spec), rng)
}

pub fn build_aggregator<E: Element>(spec: AggregatorSpec, rng: &mut impl Rng) -> Result<Model<E>> {
    Model::init(Architecture::Aggregator(spec), rng)
}
