//! Central finite-difference verification of autodiff gradients.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{BlockTarget, Graph, Var};
use crate::nets::{AggregatorSpec, Architecture, BackboneSpec, Model};
use crate::patch::{extract_patches, make_global_patch, PatchGrid, ZBlock};
use crate::patch::{fuse_add, fuse_concat_seg, zblock_var};
use crate::tensor::{Element, Tensor};
use crate::train::seg_loss;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over compared elements.
    pub max_rel_err: f64,
    /// Elements compared against finite differences.
    pub checked: usize,
    /// Elements whose `±eps` stencil crossed a relu or maxpool switch point;
    /// the function is not differentiable on the stencil there, so the
    /// central difference is not a valid reference.
    pub skipped: usize,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &Self) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.pass &= other.pass;
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compare autodiff gradients of the scalar `f(inputs)` with respect to
/// every input element against central differences
/// `(f(x+eps) - f(x-eps)) / (2 eps)`.
///
/// `f` receives the graph and one gradient-requiring leaf per input, and must
/// be deterministic.
pub fn grad_check<E, F>(f: F, inputs: &[Tensor<E>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    E: Element,
    F: Fn(&mut Graph<E>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<E>]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars)?;
        Ok((g.value(out).data()[0].as_f64(), g.branch_signature()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let base_sig = g.branch_signature();
    g.backward(out)?;
    let analytic: Vec<Tensor<E>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
        pass: true,
    };
    let mut work = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + E::of(eps);
            let (fp, sp) = eval(&work)?;
            work[ti].data_mut()[j] = orig - E::of(eps);
            let (fm, sm) = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let err = rel_err(grad.data()[j].as_f64(), numeric);
            report.max_rel_err = report.max_rel_err.max(err);
            report.checked += 1;
        }
    }
    report.pass = report.max_rel_err < tol;
    Ok(report)
}


pub const SUITE_EPS: f64 = 1e-3;
pub const SUITE_TOL: f64 = 1e-3;

/// Checks the suite runs, in order.
pub const SUITE_CASES: &[&str] = &[
    "conv2d",
    "relu",
    "sigmoid",
    "maxpool2d",
    "avgpool2d",
    "global_avgpool",
    "linear",
    "add",
    "concat",
    "upsample_nearest",
    "reshape",
    "scatter_blocks",
    "sum",
    "mean",
    "scale",
    "cross_entropy",
    "bce_with_logits",
    "dice_loss",
    "cls_network",
    "seg_network",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub trials: usize,
    pub report: GradCheckReport,
}

fn uniform<E: Element>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<E> {
    Tensor::from_fn(shape, |_| E::of(rng.random_range(lo..hi)))
}

/// Weighted sum of every element with fixed random weights, so that no
/// gradient cancels by symmetry.
fn project<E: Element>(g: &mut Graph<E>, y: Var, weights: &Tensor<E>) -> Result<Var> {
    let n = g.value(y).len();
    let row = g.reshape(y, &[1, n])?;
    let w = g.input(weights.clone().reshaped(&[n, 1])?);
    let b = g.input(Tensor::zeros(&[1]));
    let out = g.linear(row, w, b)?;
    Ok(g.sum(out))
}

fn random_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.random_range(1..=4);
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

type CaseFn<E> = Box<dyn Fn(&mut Graph<E>, &[Var]) -> Result<Var>>;

/// One randomized instance of a case: the function and its inputs.
fn instance<E: Element>(name: &str, rng: &mut ChaCha8Rng) -> Result<(CaseFn<E>, Vec<Tensor<E>>)> {
    let r = rng;
    Ok(match name {
        "conv2d" => {
            let (b, cin, cout) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
            let k = [1, 3][r.random_range(0..2)];
            let (stride, pad) = (r.random_range(1..=2), r.random_range(0..=k / 2));
            let (h, w) = (r.random_range(k..=7), r.random_range(k..=7));
            let ho = (h + 2 * pad - k) / stride + 1;
            let wo = (w + 2 * pad - k) / stride + 1;
            let proj = uniform(r, &[b * cout * ho * wo], -1.0, 1.0);
            let inputs = vec![
                uniform(r, &[b, cin, h, w], -1.0, 1.0),
                uniform(r, &[cout, cin, k, k], -1.0, 1.0),
                uniform(r, &[cout], -1.0, 1.0),
            ];
            (
                Box::new(move |g: &mut Graph<E>, v: &[Var]| {
                    let y = g.conv2d(v[0], v[1], v[2], stride, pad)?;
                    project(g, y, &proj)
                }),
                inputs,
            )
        }
        "relu" | "sigmoid" | "reshape" | "sum" | "mean" | "scale" => {
            let shape = random_shape(r);
            let n: usize = shape.iter().product();
            let proj = uniform(r, &[n], -1.0, 1.0);
            let factor = r.random_range(-2.0..2.0);
            let mut flipped = shape.clone();
            flipped.reverse();
            let which = name.to_string();
            (
                Box::new(move |g: &mut Graph<E>, v: &[Var]| match which.as_str() {
                    "relu" => {
                        let y = g.relu(v[0]);
                        project(g, y, &proj)
                    }
                    "sigmoid" => {
                        let y = g.sigmoid(v[0]);
                        project(g, y, &proj)
                    }
                    "reshape" => {
                        let y = g.reshape(v[0], &flipped)?;
                        project(g, y, &proj)
                    }
                    "scale" => {
                        let y = g.scale(v[0], factor);
                        project(g, y, &proj)
                    }
                    // Reductions: weight first so each element's gradient differs.
                    "sum" => {
                        let y = g.relu(v[0]);
                        let s = g.sum(y);
                        let p = project(g, v[0], &proj)?;
                        g.add(s, p)
                    }
                    _ => {
                        let y = g.relu(v[0]);
                        let s = g.mean(y);
                        let p = project(g, v[0], &proj)?;
                        g.add(s, p)
                    }
                }),
                vec![uniform(r, &shape, -1.0, 1.0)],
            )
        }
        "maxpool2d" | "avgpool2d" | "global_avgpool" => {
            let window = r.random_range(2..=3);
            let (b, c) = (r.random_range(1..=2), r.random_range(1..=3));
            let (h, w) = (window * r.random_range(1..=3), window * r.random_range(1..=3));
            let out = match name {
                "global_avgpool" => b * c,
                _ => b * c * (h / window) * (w / window),
            };
            let proj = uniform(r, &[out], -1.0, 1.0);
            let which = name.to_string();
            (
                Box::new(move |g: &mut Graph<E>, v: &[Var]| {
                    let y = match which.as_str() {
                        "maxpool2d" => g.maxpool2d(v[0], window)?,
                        "avgpool2d" => g.avgpool2d(v[0], window)?,
                        _ => g.global_avgpool(v[0])?,
                    };
                    project(g, y, &proj)
                }),
                vec![uniform(r, &[b, c, h, w], -1.0, 1.0)],
            )
        }
        "linear" => {
            let (b, i, o) = (r.random_range(1..=3), r.random_range(1..=5), r.random_range(1..=4));
            let proj = uniform(r, &[b * o], -1.0, 1.0);
            (
                Box::new(move |g: &mut Graph<E>, v: &[Var]| {
                    let y = g.linear(v[0], v[1], v[2])?;
                    project(g, y, &proj)
                }),
                vec![
                    uniform(r, &[b, i], -1.0, 1.0),
                    uniform(r, &[i, o], -1.0, 1.0),
                    uniform(r, &[o], -1.0, 1.0),
                ],
            )
        }
        "add" => {
            let shape = random_shape(r);
            // Half the trials broadcast a trailing suffix.
            let cut = if r.random_bool(0.5) { r.random_range(0..shape.len()) } else { 0 };
            let n: usize = shape.iter().product();
            let proj = uniform(r, &[n], -1.0, 1.0);
            (
                Box::new(move |g: &mut Graph<E>, v: &[Var]| {
                    let y = g.add(v[0], v[1])?;
                    project(g, y, &proj)
                }),
                vec![uniform(r, &shape, -1.0, 1.0), uniform(r, &shape[cut..], -1.0, 1.0)],
            )
        }
        "concat" => {
            let base = random_shape(r);
            let axis = r.random_range(0..base.len());
            let parts = r.random_range(2..=3);
            let mut inputs = Vec::new();
            let mut n = 0;
            for _ in 0..parts {
                let mut s = base.clone();
                s[axis] = r.random_range(1..=3);
                n += s.iter().product::<usize>();
                inputs.push(uniform(r, &s, -1.0, 1.0));
            }
            let proj = uniform(r, &[n], -1.0, 1.0);
            (
                Box::new(move |g: &mut Graph<E>, v: &[Var]| {
                    let y = g.concat(v, axis)?;
                    project(g, y, &proj)
                }),
                inputs,
            )
        }
        "upsample_nearest" => {
            let s = [r.random_range(1..=2), r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3)];
            let (fh, fw) = (r.random_range(1..=3), r.random_range(1..=3));
            let proj = uniform(r, &[s.iter().product::<usize>() * fh * fw], -1.0, 1.0);
            (
                Box::new(move |g: &mut Graph<E>, v: &[Var]| {
                    let y = g.upsample_nearest(v[0], fh, fw)?;
                    project(g, y, &proj)
                }),
                vec![uniform(r, &s, -1.0, 1.0)],
            )
        }
        "scatter_blocks" => {
            let (b, c) = (r.random_range(1..=2), r.random_range(1..=2));
            let (rows, cols) = (r.random_range(1..=3), r.random_range(1..=3));
            let (bh, bw) = (r.random_range(1..=2), r.random_range(1..=2));
            let cells = b * rows * cols;
            let k = r.random_range(1..=cells);
            let targets: Vec<BlockTarget> = sample(r, cells, k)
                .into_iter()
                .map(|i| BlockTarget {
                    sample: i / (rows * cols),
                    y: (i % (rows * cols)) / cols * bh,
                    x: i % cols * bw,
                })
                .collect();
            let proj = uniform(r, &[b * c * rows * bh * cols * bw], -1.0, 1.0);
            (
                Box::new(move |g: &mut Graph<E>, v: &[Var]| {
                    let y = g.scatter_blocks(v[0], v[1], &targets)?;
                    project(g, y, &proj)
                }),
                vec![
                    uniform(r, &[b, c, rows * bh, cols * bw], -1.0, 1.0),
                    uniform(r, &[k, c, bh, bw], -1.0, 1.0),
                ],
            )
        }
        "cross_entropy" => {
            let (b, k) = (r.random_range(1..=4), r.random_range(2..=5));
            let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
            (
                Box::new(move |g: &mut Graph<E>, v: &[Var]| g.cross_entropy(v[0], &labels)),
                vec![uniform(r, &[b, k], -2.0, 2.0)],
            )
        }
        "bce_with_logits" | "dice_loss" => {
            let shape = random_shape(r);
            let targets: Tensor<E> = Tensor::from_fn(&shape, |_| E::of(r.random_range(0..2) as f64));
            let dice = name == "dice_loss";
            let input = if dice { uniform(r, &shape, 0.05, 0.95) } else { uniform(r, &shape, -3.0, 3.0) };
            (
                Box::new(move |g: &mut Graph<E>, v: &[Var]| {
                    let t = g.input(targets.clone());
                    if dice {
                        g.dice_loss(v[0], t, 1.0)
                    } else {
                        g.bce_with_logits(v[0], t)
                    }
                }),
                vec![input],
            )
        }
        "cls_network" | "seg_network" => network_instance(name == "seg_network", r)?,
        other => return Err(crate::error::Error::contract(format!("unknown grad-check case `{other}`"))),
    })
}

/// A full forward pass: patches through the backbone into a Z-block whose
/// other cells hold stale constants, optional global fusion, aggregator and
/// task loss. Inputs are every backbone then aggregator parameter.
fn network_instance<E: Element>(seg: bool, r: &mut ChaCha8Rng) -> Result<(CaseFn<E>, Vec<Tensor<E>>)> {
    let (rows, cols) = (r.random_range(1..=2), r.random_range(1..=2));
    let batch = r.random_range(1..=2);
    let use_global = r.random_bool(0.5);
    let ph = if seg { 4 } else { 2 * r.random_range(1..=2) };
    let grid = PatchGrid::new(1, rows * ph, cols * ph, rows, cols)?;
    let spec = BackboneSpec {
        in_channels: 1,
        widths: if seg {
            vec![r.random_range(1..=2), r.random_range(1..=2)]
        } else {
            let last = r.random_range(1..=3);
            vec![r.random_range(1..=2), last]
        },
        out_channels: 0,
        patch: (ph, ph),
        stem_stride: 1,
    };
    let spec = BackboneSpec {
        out_channels: if seg { r.random_range(1..=2) } else { *spec.widths.last().unwrap() },
        ..spec
    };
    let (bb_arch, agg_arch) = if seg {
        let c = spec.out_channels;
        (
            Architecture::SegBackbone(spec),
            Architecture::Aggregator(AggregatorSpec::Seg {
                height: grid.height,
                width: grid.width,
                in_channels: if use_global { 2 * c } else { c },
            }),
        )
    } else {
        let d = spec.out_channels;
        (
            Architecture::ClsBackbone(spec),
            Architecture::Aggregator(AggregatorSpec::Cls {
                rows,
                cols,
                feature_dim: d,
                num_classes: 3,
            }),
        )
    };
    let bb: Model<E> = Model::init(bb_arch, r)?;
    let agg: Model<E> = Model::init(agg_arch, r)?;
    let nb = bb.values().len();

    // Per image: a random fresh subset, with every other cell stale.
    let cells = grid.cells();
    let k = r.random_range(1..=cells);
    let images: Vec<Tensor<E>> = (0..batch).map(|_| uniform(r, &[1, grid.height, grid.width], 0.0, 1.0)).collect();
    let cell_shape = if seg { vec![bb.arch.output_shape(1)[1], ph, ph] } else { vec![bb.arch.output_shape(1)[1]] };
    let mut blocks = Vec::new();
    let mut patches = Vec::new();
    for x in &images {
        let fresh: Vec<usize> = sample(r, cells, k).into_vec();
        let fresh_set: BTreeSet<usize> = fresh.iter().copied().collect();
        let stale: Vec<usize> = (0..cells).filter(|c| !fresh_set.contains(c)).collect();
        let mut z = if seg {
            ZBlock::canvas(&grid, cell_shape[0])
        } else {
            ZBlock::grid(rows, cols, cell_shape[0])
        };
        let stale_feats: Vec<Tensor<E>> = stale.iter().map(|_| uniform(r, &cell_shape, -1.0, 1.0)).collect();
        z.update(&stale, &stale_feats)?;
        let placeholders: Vec<Tensor<E>> = fresh.iter().map(|_| Tensor::zeros(&cell_shape)).collect();
        z.update(&fresh, &placeholders)?;
        patches.extend(extract_patches(x, &grid, &fresh)?);
        blocks.push(z);
    }
    let patch_shape = [batch * k, 1, ph, ph];
    let globals: Vec<E> = images
        .iter()
        .map(|x| make_global_patch(x, &grid).map(Tensor::into_data))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..3)).collect();
    let mask: Tensor<E> = Tensor::from_fn(&[batch, 1, grid.height, grid.width], |_| E::of(r.random_range(0..2) as f64));
    let mut inputs = bb.values().to_vec();
    inputs.extend_from_slice(agg.values());
    let f = move |g: &mut Graph<E>, v: &[Var]| -> Result<Var> {
        let (pb, pa) = v.split_at(nb);
        let xs = g.input(Tensor::new(patch_shape.to_vec(), patches.clone())?);
        let feats = bb.forward(g, pb, xs)?;
        let mut z = zblock_var(g, &blocks, feats)?;
        if use_global {
            let gx = g.input(Tensor::new(vec![batch, 1, ph, ph], globals.clone())?);
            let gf = bb.forward(g, pb, gx)?;
            z = if seg { fuse_concat_seg(g, z, gf)? } else { fuse_add(g, z, gf)? };
        }
        let y = agg.forward(g, pa, z)?;
        if seg {
            let t = g.input(mask.clone());
            seg_loss(g, y, t)
        } else {
            g.cross_entropy(y, &labels)
        }
    };
    Ok((Box::new(f), inputs))
}

/// Run every case `trials` times with fresh random shapes.
pub fn run_suite<E: Element>(trials: usize, seed: u64, eps: f64, tol: f64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::with_capacity(SUITE_CASES.len());
    for (ci, &name) in SUITE_CASES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(ci as u64));
        let mut total = GradCheckReport {
            max_rel_err: 0.0,
            checked: 0,
            skipped: 0,
            pass: true,
        };
        for _ in 0..trials {
            let (f, inputs) = instance::<E>(name, &mut rng)?;
            total.merge(&grad_check(f, &inputs, eps, tol)?);
        }
        out.push(SuiteEntry { name, trials, report: total });
    }
    Ok(out)
}
