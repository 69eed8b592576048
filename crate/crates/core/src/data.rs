//! Synthetic datasets and their on-disk format.
//!
//! Classification images hold small glyphs; the label is the number of
//! crosses. Segmentation images hold thin quadratic strokes over noise.
//! Every sample derives its randomness from `(seed, index)` alone.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::Task;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GlyphKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl GlyphKind {
    pub const ALL: [GlyphKind; 4] = [GlyphKind::Circle, GlyphKind::Square, GlyphKind::Triangle, GlyphKind::Cross];

    pub fn name(self) -> &'static str {
        match self {
            GlyphKind::Circle => "circle",
            GlyphKind::Square => "square",
            GlyphKind::Triangle => "triangle",
            GlyphKind::Cross => "cross",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Placement of one glyph: bounding box top-left and side length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Glyph {
    pub kind: GlyphKind,
    pub y: usize,
    pub x: usize,
    pub size: usize,
}

impl Glyph {
    fn overlaps(&self, other: &Glyph, gap: usize) -> bool {
        self.y < other.y + other.size + gap
            && other.y < self.y + self.size + gap
            && self.x < other.x + other.size + gap
            && other.x < self.x + self.size + gap
    }
}

/// Grey level of a glyph's tile; textured pixels alternate above and below it.
const TILE_LEVEL: f32 = 0.5;
const TEXTURE_SWING: f32 = 0.5;

/// Mask of the textured region of a glyph on its `size x size` tile.
pub fn glyph_template(kind: GlyphKind, size: usize) -> Vec<bool> {
    let s = size as f64;
    let c = (s - 1.0) / 2.0;
    let mut out = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64, x as f64);
            out[y * size + x] = match kind {
                GlyphKind::Circle => ((fy - c).powi(2) + (fx - c).powi(2)).sqrt() <= s / 2.0 - 1.0,
                GlyphKind::Square => fy >= 1.0 && fx >= 1.0 && fy <= s - 2.0 && fx <= s - 2.0,
                // apex at top centre, base one row above the tile edge
                GlyphKind::Triangle => (fx - c).abs() <= (fy + 1.0) / s * (s / 2.0) && fy <= s - 2.0,
                GlyphKind::Cross => (fy - fx).abs() < 1.6 || (fy + fx - (s - 1.0)).abs() < 1.6,
            };
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClsSample {
    /// `[1, M, N]` in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub glyphs: Vec<Glyph>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Tensor,
    /// `[1, M, N]` of `{0, 1}`.
    pub mask: Tensor,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub task: Task,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub seed: u64,
    pub version: u32,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        format!(
            "task={}\ncount={}\nM={}\nN={}\nK={}\nseed={}\nversion={}\n",
            self.task.name(),
            self.count,
            self.height,
            self.width,
            self.classes,
            self.seed,
            self.version
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = std::collections::BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("manifest line `{line}` is not key=value")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("manifest lacks `{k}`")));
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|e| Error::Format(format!("manifest `{k}`: {e}")))
        };
        let version = num("version")? as u32;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let task = Task::parse(get("task")?).ok_or_else(|| Error::Format("manifest: unknown task".into()))?;
        Ok(Self {
            task,
            count: num("count")? as usize,
            height: num("M")? as usize,
            width: num("N")? as usize,
            classes: num("K")? as usize,
            seed: num("seed")?,
            version,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Samples {
    Cls(Vec<ClsSample>),
    Seg(Vec<SegSample>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Samples,
}

impl Dataset {
    pub fn len(&self) -> usize {
        match &self.samples {
            Samples::Cls(s) => s.len(),
            Samples::Seg(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, i: usize) -> &Tensor {
        match &self.samples {
            Samples::Cls(s) => &s[i].image,
            Samples::Seg(s) => &s[i].image,
        }
    }
}

fn sample_rng(seed: u64, index: usize, attempt: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((index as u64) << 16) | attempt);
    r
}

/// Number of crosses, clamped to `classes - 1`.
pub fn label_of(glyphs: &[Glyph], classes: usize) -> usize {
    glyphs.iter().filter(|g| g.kind == GlyphKind::Cross).count().min(classes - 1)
}

/// Draw one glyph layout whose label is `target`; `None` when placement
/// runs out of tries.
fn layout(rng: &mut impl Rng, height: usize, width: usize, target: usize, classes: usize) -> Option<Vec<Glyph>> {
    let count = rng.random_range(6..=10usize);
    let crosses = if target + 1 == classes {
        rng.random_range(target..=(target + 2).min(count))
    } else {
        target
    };
    let others = [GlyphKind::Circle, GlyphKind::Square, GlyphKind::Triangle];
    let mut kinds: Vec<GlyphKind> = (0..count)
        .map(|i| if i < crosses { GlyphKind::Cross } else { others[rng.random_range(0..3)] })
        .collect();
    // shuffle so crosses are not always placed first
    for i in (1..kinds.len()).rev() {
        let j = rng.random_range(0..=i);
        kinds.swap(i, j);
    }
    let mut placed: Vec<Glyph> = Vec::with_capacity(count);
    let mut tries = 0;
    for kind in kinds {
        loop {
            tries += 1;
            if tries > 1000 {
                return None;
            }
            let size = rng.random_range(10..=14usize);
            if size + 2 > height || size + 2 > width {
                return None;
            }
            let g = Glyph {
                kind,
                y: rng.random_range(1..=height - size - 1),
                x: rng.random_range(1..=width - size - 1),
                size,
            };
            if placed.iter().all(|p| !p.overlaps(&g, 2)) {
                placed.push(g);
                break;
            }
        }
    }
    Some(placed)
}

/// Every glyph is a grey tile with its shape drawn as a checkerboard. The
/// checkerboard follows image pixel parity, so it sums to zero over any
/// 2x2 block and area averaging leaves little beyond the tile.
pub fn render_glyphs(glyphs: &[Glyph], height: usize, width: usize) -> Tensor {
    let mut img = Tensor::zeros(&[1, height, width]);
    let d = img.data_mut();
    for g in glyphs {
        let t = glyph_template(g.kind, g.size);
        for y in 0..g.size {
            for x in 0..g.size {
                let (py, px) = (g.y + y, g.x + x);
                let swing = match (t[y * g.size + x], (py + px) % 2 == 0) {
                    (false, _) => 0.0,
                    (true, true) => TEXTURE_SWING,
                    (true, false) => -TEXTURE_SWING,
                };
                d[py * width + px] = TILE_LEVEL + swing;
            }
        }
    }
    img
}

pub fn gen_cls_sample(seed: u64, index: usize, height: usize, width: usize, classes: usize) -> Result<ClsSample> {
    let mut attempt = 0;
    loop {
        let mut rng = sample_rng(seed, index, attempt);
        let target = rng.random_range(0..classes);
        if let Some(glyphs) = layout(&mut rng, height, width, target, classes) {
            let label = label_of(&glyphs, classes);
            debug_assert_eq!(label, target);
            return Ok(ClsSample {
                image: render_glyphs(&glyphs, height, width),
                label,
                glyphs,
            });
        }
        attempt += 1;
        if attempt > 100 {
            return Err(Error::contract(format!("cannot place glyphs on a {height}x{width} image")));
        }
    }
}

pub fn gen_cls(seed: u64, count: usize, height: usize, width: usize, classes: usize) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::contract("count must be >= 1"));
    }
    if classes < 2 {
        return Err(Error::contract("need at least two classes"));
    }
    let samples = (0..count)
        .map(|i| gen_cls_sample(seed, i, height, width, classes))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest: DatasetManifest {
            task: Task::Classification,
            count,
            height,
            width,
            classes,
            seed,
            version: FORMAT_VERSION,
        },
        samples: Samples::Cls(samples),
    })
}

/// Lowest stroke intensity before noise.
pub const STROKE_MIN: f32 = 0.5;
pub const NOISE_SIGMA: f64 = 0.05;

/// Rasterize strokes; returns the noiseless stroke intensity map and mask.
fn strokes(rng: &mut impl Rng, height: usize, width: usize) -> (Vec<f32>, Vec<bool>) {
    let mut ink = vec![0.0f32; height * width];
    let mut mask = vec![false; height * width];
    let curves = rng.random_range(3..=6);
    let (h, w) = (height as f64, width as f64);
    for _ in 0..curves {
        let p: Vec<(f64, f64)> = (0..3).map(|_| (rng.random_range(0.0..h), rng.random_range(0.0..w))).collect();
        let radius = rng.random_range(1..=3usize) as f64 / 2.0;
        let level: f32 = rng.random_range(STROKE_MIN..=1.0);
        let length = ((p[0].0 - p[1].0).hypot(p[0].1 - p[1].1) + (p[1].0 - p[2].0).hypot(p[1].1 - p[2].1)).max(1.0);
        let steps = (length * 4.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let (a, b, c) = ((1.0 - t) * (1.0 - t), 2.0 * (1.0 - t) * t, t * t);
            let cy = a * p[0].0 + b * p[1].0 + c * p[2].0;
            let cx = a * p[0].1 + b * p[1].1 + c * p[2].1;
            let y0 = (cy - radius).floor().max(0.0) as usize;
            let x0 = (cx - radius).floor().max(0.0) as usize;
            let y1 = ((cy + radius).ceil() as usize).min(height - 1);
            let x1 = ((cx + radius).ceil() as usize).min(width - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    // pixel centres within the stroke radius
                    let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                    if (py - cy).hypot(px - cx) <= radius {
                        let i = y * width + x;
                        mask[i] = true;
                        ink[i] = ink[i].max(level);
                    }
                }
            }
        }
    }
    (ink, mask)
}

pub fn gen_seg_sample(seed: u64, index: usize, height: usize, width: usize) -> SegSample {
    let mut rng = sample_rng(seed, index, 0);
    let (ink, mask) = strokes(&mut rng, height, width);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let data: Vec<f32> = ink.iter().map(|&v| v + noise.sample(&mut rng) as f32).collect();
    SegSample {
        image: Tensor::new(vec![1, height, width], data).expect("shape"),
        mask: Tensor::new(vec![1, height, width], mask.iter().map(|&b| b as u8 as f32).collect()).expect("shape"),
    }
}

pub fn gen_seg(seed: u64, count: usize, height: usize, width: usize) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::contract("count must be >= 1"));
    }
    let samples = (0..count).map(|i| gen_seg_sample(seed, i, height, width)).collect();
    Ok(Dataset {
        manifest: DatasetManifest {
            task: Task::Segmentation,
            count,
            height,
            width,
            classes: 2,
            seed,
            version: FORMAT_VERSION,
        },
        samples: Samples::Seg(samples),
    })
}

fn img_name(i: usize) -> String {
    format!("img_{i:06}.pgt")
}

fn mask_name(i: usize) -> String {
    format!("mask_{i:06}.pgt")
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    match &ds.samples {
        Samples::Cls(s) => {
            let mut labels = String::from("index,label\n");
            let mut glyphs = String::from("index,kind,y,x,size\n");
            for (i, smp) in s.iter().enumerate() {
                smp.image.save(dir.join(img_name(i)))?;
                let _ = writeln!(labels, "{i},{}", smp.label);
                for g in &smp.glyphs {
                    let _ = writeln!(glyphs, "{i},{},{},{},{}", g.kind.name(), g.y, g.x, g.size);
                }
            }
            std::fs::write(dir.join("label.csv"), labels)?;
            std::fs::write(dir.join("glyphs.csv"), glyphs)?;
        }
        Samples::Seg(s) => {
            for (i, smp) in s.iter().enumerate() {
                smp.image.save(dir.join(img_name(i)))?;
                smp.mask.save(dir.join(mask_name(i)))?;
            }
        }
    }
    // Written last so a partially written directory never looks complete.
    std::fs::write(dir.join("manifest.txt"), ds.manifest.to_text())?;
    Ok(())
}

fn count_files(dir: &Path, prefix: &str) -> Result<usize> {
    let mut n = 0;
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if name.starts_with(prefix) && name.ends_with(".pgt") {
            n += 1;
        }
    }
    Ok(n)
}

fn parse_glyphs(text: &str, count: usize) -> Result<Vec<Vec<Glyph>>> {
    let mut out = vec![Vec::new(); count];
    for (ln, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("glyphs.csv line {}", ln + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        let i: usize = f[0].parse().map_err(|_| bad())?;
        let g = Glyph {
            kind: GlyphKind::parse(f[1]).ok_or_else(bad)?,
            y: f[2].parse().map_err(|_| bad())?,
            x: f[3].parse().map_err(|_| bad())?,
            size: f[4].parse().map_err(|_| bad())?,
        };
        out.get_mut(i).ok_or_else(bad)?.push(g);
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|e| Error::Format(format!("{}: {e}", dir.join("manifest.txt").display())))?;
    let manifest = DatasetManifest::parse(&text)?;
    let n = manifest.count;
    let images_on_disk = count_files(dir, "img_")?;
    if images_on_disk != n {
        return Err(Error::Format(format!(
            "manifest lists {n} samples but {images_on_disk} image blobs exist"
        )));
    }
    let shape = [1, manifest.height, manifest.width];
    let load = |name: String| -> Result<Tensor> {
        let t = Tensor::load(dir.join(&name))?;
        if t.shape() != shape {
            return Err(Error::Format(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    };
    let samples = match manifest.task {
        Task::Classification => {
            let labels_text = std::fs::read_to_string(dir.join("label.csv"))?;
            let mut labels = vec![None; n];
            for (ln, line) in labels_text.lines().enumerate().skip(1) {
                let bad = || Error::Format(format!("label.csv line {}", ln + 1));
                let (i, l) = line.split_once(',').ok_or_else(bad)?;
                let (i, l): (usize, usize) = (i.parse().map_err(|_| bad())?, l.parse().map_err(|_| bad())?);
                if l >= manifest.classes {
                    return Err(bad());
                }
                *labels.get_mut(i).ok_or_else(bad)? = Some(l);
            }
            let glyphs = match std::fs::read_to_string(dir.join("glyphs.csv")) {
                Ok(t) => parse_glyphs(&t, n)?,
                Err(_) => vec![Vec::new(); n],
            };
            let mut out = Vec::with_capacity(n);
            for (i, (label, glyphs)) in labels.into_iter().zip(glyphs).enumerate() {
                out.push(ClsSample {
                    image: load(img_name(i))?,
                    label: label.ok_or_else(|| Error::Format(format!("label.csv lacks sample {i}")))?,
                    glyphs,
                });
            }
            Samples::Cls(out)
        }
        Task::Segmentation => {
            let masks_on_disk = count_files(dir, "mask_")?;
            if masks_on_disk != n {
                return Err(Error::Format(format!(
                    "manifest lists {n} samples but {masks_on_disk} mask blobs exist"
                )));
            }
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                out.push(SegSample {
                    image: load(img_name(i))?,
                    mask: load(mask_name(i))?,
                });
            }
            Samples::Seg(out)
        }
    };
    Ok(Dataset { manifest, samples })
}
