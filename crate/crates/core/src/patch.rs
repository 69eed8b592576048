//! Tiling, patch sampling, the latent Z-block and feature fusion.

use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{avgpool_values_hw, BlockTarget, Graph, Var};
use crate::nets::Model;
use crate::tensor::{Element, Tensor};

/// Image geometry and its non-overlapping `rows x cols` tiling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(channels: usize, height: usize, width: usize, rows: usize, cols: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || rows == 0 || cols == 0 {
            return Err(Error::dim("patch grid dimensions must be positive"));
        }
        if !height.is_multiple_of(rows) || !width.is_multiple_of(cols) {
            return Err(Error::dim(format!(
                "{height}x{width} image does not split into a {rows}x{cols} grid"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            rows,
            cols,
        })
    }

    pub fn patch_h(&self) -> usize {
        self.height / self.rows
    }

    pub fn patch_w(&self) -> usize {
        self.width / self.cols
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Top-left pixel of cell `index` (row-major).
    pub fn origin(&self, index: usize) -> (usize, usize) {
        ((index / self.cols) * self.patch_h(), (index % self.cols) * self.patch_w())
    }

    fn check_image<E: Element>(&self, x: &Tensor<E>) -> Result<()> {
        if x.shape() != [self.channels, self.height, self.width] {
            return Err(Error::dim(format!(
                "image {:?} does not match grid {}x{}x{}",
                x.shape(),
                self.channels,
                self.height,
                self.width
            )));
        }
        Ok(())
    }
}

/// Sampling schedule: `k` patches per inner iteration, `iters` inner
/// iterations per outer step, always without replacement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchPlan {
    pub rate: f64,
    pub k: usize,
    pub iters: usize,
    pub cells: usize,
}

impl PatchPlan {
    pub fn new(grid: &PatchGrid, rate: f64, iters: usize) -> Result<Self> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::Plan(format!("sampling rate {rate} outside (0, 1]")));
        }
        if iters == 0 {
            return Err(Error::Plan("inner iterations must be at least 1".into()));
        }
        let cells = grid.cells();
        // The epsilon absorbs binary representation error such as 0.2 * 16.
        let k = ((rate * cells as f64 + 1e-9).floor() as usize).max(1);
        if k * iters > cells {
            return Err(Error::Plan(format!(
                "{k} patches x {iters} iterations exceeds the {cells} available cells"
            )));
        }
        Ok(Self {
            rate,
            k,
            iters,
            cells,
        })
    }
}

/// `k` distinct indices drawn uniformly from the cells not in `excluded`,
/// returned in ascending order.
pub fn sample_patches(rng: &mut impl Rng, plan: &PatchPlan, excluded: &BTreeSet<usize>) -> Result<Vec<usize>> {
    let free: Vec<usize> = (0..plan.cells).filter(|i| !excluded.contains(i)).collect();
    if free.len() < plan.k {
        return Err(Error::Plan(format!(
            "need {} patches but only {} unseen cells remain",
            plan.k,
            free.len()
        )));
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, free.len(), plan.k)
        .into_iter()
        .map(|i| free[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Copy the listed patches of `x` into a `[k, c, ph, pw]` buffer.
pub fn extract_patches<E: Element>(x: &Tensor<E>, grid: &PatchGrid, indices: &[usize]) -> Result<Vec<E>> {
    grid.check_image(x)?;
    let (ph, pw) = (grid.patch_h(), grid.patch_w());
    let mut out = Vec::with_capacity(indices.len() * grid.channels * ph * pw);
    let xd = x.data();
    for &idx in indices {
        if idx >= grid.cells() {
            return Err(Error::Index(format!("patch {idx} outside {} cells", grid.cells())));
        }
        let (y0, x0) = grid.origin(idx);
        for c in 0..grid.channels {
            for y in 0..ph {
                let s = (c * grid.height + y0 + y) * grid.width + x0;
                out.extend_from_slice(&xd[s..s + pw]);
            }
        }
    }
    Ok(out)
}

/// All `rows * cols` patches as `[mn, c, ph, pw]`, row-major cell order.
pub fn tile_image<E: Element>(x: &Tensor<E>, grid: &PatchGrid) -> Result<Tensor<E>> {
    let all: Vec<usize> = (0..grid.cells()).collect();
    let data = extract_patches(x, grid, &all)?;
    Tensor::new(vec![grid.cells(), grid.channels, grid.patch_h(), grid.patch_w()], data)
}

/// Inverse of [`tile_image`].
pub fn stitch<E: Element>(patches: &Tensor<E>, grid: &PatchGrid) -> Result<Tensor<E>> {
    let cell_shape = [grid.channels, grid.patch_h(), grid.patch_w()];
    if patches.shape() != [grid.cells(), cell_shape[0], cell_shape[1], cell_shape[2]] {
        return Err(Error::dim(format!("patch set {:?} does not match grid", patches.shape())));
    }
    let cells: Vec<(usize, Tensor<E>)> = (0..grid.cells())
        .map(|i| Ok((i, patches.slab(i)?.reshaped(&cell_shape)?)))
        .collect::<Result<_>>()?;
    let refs: Vec<(usize, &Tensor<E>)> = cells.iter().map(|(i, t)| (*i, t)).collect();
    tile_features_to_canvas(grid, grid.channels, &refs)
}

/// Place per-cell `[C, ph, pw]` maps at their grid positions on a zero
/// `[C, M, N]` canvas.
pub fn tile_features_to_canvas<E: Element>(
    grid: &PatchGrid,
    channels: usize,
    cells: &[(usize, &Tensor<E>)],
) -> Result<Tensor<E>> {
    let mut z = ZBlock::canvas(grid, channels);
    let (idx, feats): (Vec<usize>, Vec<Tensor<E>>) = cells.iter().map(|(i, t)| (*i, (*t).clone())).unzip();
    z.update(&idx, &feats)?;
    Ok(z.storage)
}

/// The full image area-averaged down to one patch.
pub fn make_global_patch<E: Element>(x: &Tensor<E>, grid: &PatchGrid) -> Result<Tensor<E>> {
    grid.check_image(x)?;
    let t = x.clone().reshaped(&[1, grid.channels, grid.height, grid.width])?;
    avgpool_values_hw(&t, grid.rows, grid.cols).reshaped(&[grid.channels, grid.patch_h(), grid.patch_w()])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZLayout {
    /// One `dim`-vector per cell, stored as `[dim, rows, cols]`.
    Grid { rows: usize, cols: usize, dim: usize },
    /// One `[channels, ph, pw]` map per cell, tiled into `[channels, M, N]`.
    Canvas {
        rows: usize,
        cols: usize,
        channels: usize,
        height: usize,
        width: usize,
    },
}

/// Per-image latent cache. Entries of fresh cells enter the graph through a
/// scatter from their source features; all others are constants.
#[derive(Clone, Debug, PartialEq)]
pub struct ZBlock<E: Element = f32> {
    layout: ZLayout,
    storage: Tensor<E>,
    fresh: Vec<bool>,
    filled: Vec<bool>,
    fresh_order: Vec<usize>,
}

impl<E: Element> ZBlock<E> {
    pub fn grid(rows: usize, cols: usize, dim: usize) -> Self {
        Self::with_layout(ZLayout::Grid { rows, cols, dim })
    }

    pub fn canvas(grid: &PatchGrid, channels: usize) -> Self {
        Self::with_layout(ZLayout::Canvas {
            rows: grid.rows,
            cols: grid.cols,
            channels,
            height: grid.height,
            width: grid.width,
        })
    }

    fn with_layout(layout: ZLayout) -> Self {
        let (shape, cells) = match layout {
            ZLayout::Grid { rows, cols, dim } => (vec![dim, rows, cols], rows * cols),
            ZLayout::Canvas {
                rows,
                cols,
                channels,
                height,
                width,
            } => (vec![channels, height, width], rows * cols),
        };
        Self {
            layout,
            storage: Tensor::zeros(&shape),
            fresh: vec![false; cells],
            filled: vec![false; cells],
            fresh_order: Vec::new(),
        }
    }

    pub fn layout(&self) -> ZLayout {
        self.layout
    }

    pub fn storage(&self) -> &Tensor<E> {
        &self.storage
    }

    pub fn cells(&self) -> usize {
        self.fresh.len()
    }

    pub fn is_fresh(&self, cell: usize) -> bool {
        self.fresh[cell]
    }

    pub fn is_filled(&self, cell: usize) -> bool {
        self.filled[cell]
    }

    /// Fresh cells in the order they were written by the last update.
    pub fn fresh_cells(&self) -> &[usize] {
        &self.fresh_order
    }

    pub fn nbytes(&self) -> u64 {
        self.storage.nbytes()
    }

    /// Shape of one cell's feature.
    pub fn cell_shape(&self) -> Vec<usize> {
        match self.layout {
            ZLayout::Grid { dim, .. } => vec![dim],
            ZLayout::Canvas {
                rows,
                cols,
                channels,
                height,
                width,
            } => vec![channels, height / rows, width / cols],
        }
    }

    /// Shape of the per-cell block a scatter writes: `[d, 1, 1]` or
    /// `[C, ph, pw]`.
    pub fn block_shape(&self) -> [usize; 3] {
        match self.layout {
            ZLayout::Grid { dim, .. } => [dim, 1, 1],
            ZLayout::Canvas {
                rows,
                cols,
                channels,
                height,
                width,
            } => [channels, height / rows, width / cols],
        }
    }

    pub fn target(&self, sample: usize, cell: usize) -> BlockTarget {
        match self.layout {
            ZLayout::Grid { cols, .. } => BlockTarget {
                sample,
                y: cell / cols,
                x: cell % cols,
            },
            ZLayout::Canvas {
                rows,
                cols,
                height,
                width,
                ..
            } => BlockTarget {
                sample,
                y: (cell / cols) * (height / rows),
                x: (cell % cols) * (width / cols),
            },
        }
    }

    /// Overwrite `cells` with `features` and mark them fresh. Previously
    /// fresh cells keep their values but become stale.
    pub fn update(&mut self, cells: &[usize], features: &[Tensor<E>]) -> Result<()> {
        if cells.len() != features.len() {
            return Err(Error::dim(format!(
                "{} cells but {} feature tensors",
                cells.len(),
                features.len()
            )));
        }
        let cell_shape = self.cell_shape();
        let mut seen = BTreeSet::new();
        for (&c, f) in cells.iter().zip(features) {
            if c >= self.cells() {
                return Err(Error::Index(format!("cell {c} outside {} cells", self.cells())));
            }
            if !seen.insert(c) {
                return Err(Error::Index(format!("cell {c} listed twice")));
            }
            if f.shape() != cell_shape.as_slice() {
                return Err(Error::dim(format!(
                    "feature {:?} does not match cell shape {cell_shape:?}",
                    f.shape()
                )));
            }
        }
        self.fresh.fill(false);
        for (&c, f) in cells.iter().zip(features) {
            self.write_cell(c, f.data());
            self.fresh[c] = true;
            self.filled[c] = true;
        }
        self.fresh_order = cells.to_vec();
        Ok(())
    }

    /// Demote every fresh cell to stale.
    pub fn detach_all(&mut self) {
        self.fresh.fill(false);
        self.fresh_order.clear();
    }

    fn write_cell(&mut self, cell: usize, data: &[E]) {
        let (h, w) = (self.storage.shape()[1], self.storage.shape()[2]);
        let [ch, bh, bw] = self.block_shape();
        let t = self.target(0, cell);
        let sd = self.storage.data_mut();
        for c in 0..ch {
            for y in 0..bh {
                let d0 = (c * h + t.y + y) * w + t.x;
                let s0 = (c * bh + y) * bw;
                sd[d0..d0 + bw].copy_from_slice(&data[s0..s0 + bw]);
            }
        }
    }
}

/// Stack the blocks into a batched graph tensor whose fresh cells are
/// re-derived from `fresh_src` (rows ordered by block, then by each block's
/// fresh order). Stale cells enter as constants.
pub fn zblock_var<E: Element>(g: &mut Graph<E>, blocks: &[ZBlock<E>], fresh_src: Var) -> Result<Var> {
    let first = blocks.first().ok_or_else(|| Error::dim("no Z-blocks"))?;
    let layout = first.layout;
    if blocks.iter().any(|b| b.layout != layout) {
        return Err(Error::dim("Z-blocks in a batch must share a layout"));
    }
    let mut base_shape = vec![blocks.len()];
    base_shape.extend_from_slice(first.storage.shape());
    let mut data = Vec::with_capacity(base_shape.iter().product());
    let mut targets = Vec::new();
    for (b, z) in blocks.iter().enumerate() {
        data.extend_from_slice(z.storage.data());
        targets.extend(z.fresh_order.iter().map(|&c| z.target(b, c)));
    }
    let base = g.input(Tensor::new(base_shape, data)?);
    let [ch, bh, bw] = first.block_shape();
    let src = g.reshape(fresh_src, &[targets.len(), ch, bh, bw])?;
    g.scatter_blocks(base, src, &targets)
}

/// `Z + g` with the `[B, d]` global feature broadcast over every grid cell.
pub fn fuse_add<E: Element>(g: &mut Graph<E>, z: Var, global: Var) -> Result<Var> {
    let &[b, d, m, n] = g.shape(z) else {
        return Err(Error::dim(format!("fuse_add: Z must be [B,d,m,n], got {:?}", g.shape(z))));
    };
    if g.shape(global) != [b, d] {
        return Err(Error::dim(format!(
            "fuse_add: global feature {:?} vs Z {:?}",
            g.shape(global),
            g.shape(z)
        )));
    }
    let col = g.reshape(global, &[b, d, 1, 1])?;
    let spread = g.upsample_nearest(col, m, n)?;
    g.add(z, spread)
}

/// Concatenate the canvas with the global feature map upsampled to canvas
/// size: channels `[0, C)` canvas, `[C, 2C)` global.
pub fn fuse_concat_seg<E: Element>(g: &mut Graph<E>, canvas: Var, global: Var) -> Result<Var> {
    let (&[b, c, h, w], &[gb, gc, gh, gw]) = (g.shape(canvas), g.shape(global)) else {
        return Err(Error::dim("fuse_concat_seg: expected rank-4 inputs"));
    };
    if b != gb || c != gc || h % gh != 0 || w % gw != 0 {
        return Err(Error::dim(format!(
            "fuse_concat_seg: canvas {:?} vs global {:?}",
            g.shape(canvas),
            g.shape(global)
        )));
    }
    let up = g.upsample_nearest(global, h / gh, w / gw)?;
    g.concat(&[canvas, up], 1)
}

/// Compute every cell of `x` with frozen `backbone`, at most `chunk` patches
/// per forward pass. No cell is left fresh.
pub fn fill_zblock_for_inference<E: Element>(
    backbone: &Model<E>,
    x: &Tensor<E>,
    grid: &PatchGrid,
    chunk: usize,
) -> Result<ZBlock<E>> {
    let out_shape = backbone.arch.output_shape(1);
    let mut z = match out_shape.as_slice() {
        &[_, d] => ZBlock::grid(grid.rows, grid.cols, d),
        &[_, c, _, _] => ZBlock::canvas(grid, c),
        _ => return Err(Error::dim("unsupported backbone output")),
    };
    let cell_shape = z.cell_shape();
    let chunk = chunk.max(1);
    let all: Vec<usize> = (0..grid.cells()).collect();
    let mut feats = Vec::with_capacity(grid.cells());
    for part in all.chunks(chunk) {
        let mut g = Graph::new();
        let params = backbone.bind_frozen(&mut g);
        let shape = vec![part.len(), grid.channels, grid.patch_h(), grid.patch_w()];
        let xv = g.input(Tensor::new(shape, extract_patches(x, grid, part)?)?);
        let y = backbone.forward(&mut g, &params, xv)?;
        for i in 0..part.len() {
            feats.push(g.value(y).slab(i)?.reshaped(&cell_shape)?);
        }
    }
    z.update(&all, &feats)?;
    z.detach_all();
    Ok(z)
}
