//! Synthetic moving-shapes segmentation videos, one-hot encoding, augmentation
//! and the SEGV container format.
//!
//! SEGV layout (all integers little-endian):
//!
//! ```text
//! "SEGV" | version u32 = 1 | count u32 | K u32 | H u32 | W u32
//! per sequence: T u32 | T·H·W class-index bytes, frame-major, row-major
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

pub const SEGV_MAGIC: [u8; 4] = *b"SEGV";
pub const SEGV_VERSION: u32 = 1;
pub const SEGV_HEADER_LEN: usize = 24;

/// One frame's dense class-index map.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl SegMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err(
                "segmap",
                format!("{} indices for {height}x{width}", data.len()),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    pub fn max_class(&self) -> Option<u8> {
        self.data.iter().copied().max()
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&c| c as usize >= num_classes) {
            Some(&c) => Err(Error::ClassOutOfRange {
                index: c as usize,
                classes: num_classes,
            }),
            None => Ok(()),
        }
    }

    /// Pixel count per class, `num_classes` entries.
    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for &c in &self.data {
            if let Some(slot) = h.get_mut(c as usize) {
                *slot += 1;
            }
        }
        h
    }

    /// The window `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Invalid(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{} frame",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    /// Rotation by `quarter_turns × 90°` counter-clockwise.
    pub fn rotate(&self, quarter_turns: u8) -> Self {
        let (h, w) = (self.height, self.width);
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => {
                let mut data = Vec::with_capacity(h * w);
                for r in 0..w {
                    for c in 0..h {
                        data.push(self.get(c, w - 1 - r));
                    }
                }
                Self {
                    height: w,
                    width: h,
                    data,
                }
            }
            2 => {
                let mut data = self.data.clone();
                data.reverse();
                Self {
                    height: h,
                    width: w,
                    data,
                }
            }
            _ => self.rotate(1).rotate(2),
        }
    }
}

/// Frames of one video, all of identical extents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegSequence {
    pub frames: Vec<SegMap>,
}

impl SegSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// A set of sequences sharing `K`, `H` and `W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegDataset {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub sequences: Vec<SegSequence>,
}

impl SegDataset {
    pub fn validate(&self) -> Result<()> {
        for seq in &self.sequences {
            for f in &seq.frames {
                if f.height != self.height || f.width != self.width {
                    return Err(shape_err(
                        "dataset",
                        format!("frame {}x{} in a {}x{} dataset", f.height, f.width, self.height, self.width),
                    ));
                }
                f.check_classes(self.num_classes)?;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Disc,
}

/// A shape's state: top-left corner, extents and per-frame velocity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub class: u8,
    pub x: i64,
    pub y: i64,
    pub width: usize,
    pub height: usize,
    pub vx: i64,
    pub vy: i64,
}

impl Shape {
    /// Advances one frame. A velocity component flips sign when moving would
    /// take the shape outside the frame.
    pub fn step(self, frame_h: usize, frame_w: usize) -> Self {
        let (x, vx) = bounce(self.x, self.vx, self.width, frame_w);
        let (y, vy) = bounce(self.y, self.vy, self.height, frame_h);
        Self { x, y, vx, vy, ..self }
    }

    pub fn contains(&self, py: i64, px: i64) -> bool {
        let (dy, dx) = (py - self.y, px - self.x);
        if dy < 0 || dx < 0 || dy >= self.height as i64 || dx >= self.width as i64 {
            return false;
        }
        match self.kind {
            ShapeKind::Rectangle => true,
            ShapeKind::Disc => {
                let d = self.width as i64;
                let (ey, ex) = (2 * dy - (d - 1), 2 * dx - (d - 1));
                ey * ey + ex * ex <= d * d
            }
        }
    }
}

fn bounce(pos: i64, vel: i64, extent: usize, frame: usize) -> (i64, i64) {
    let max = frame as i64 - extent as i64;
    let next = pos + vel;
    if (0..=max).contains(&next) {
        (next, vel)
    } else {
        let vel = -vel;
        ((pos + vel).clamp(0, max.max(0)), vel)
    }
}

/// Draws `shapes` in order, later ones on top, over class-0 background.
pub fn render(shapes: &[Shape], height: usize, width: usize) -> SegMap {
    let mut m = SegMap::filled(height, width, 0);
    for s in shapes {
        let y0 = s.y.max(0) as usize;
        let x0 = s.x.max(0) as usize;
        let y1 = ((s.y + s.height as i64).max(0) as usize).min(height);
        let x1 = ((s.x + s.width as i64).max(0) as usize).min(width);
        for y in y0..y1 {
            for x in x0..x1 {
                if s.contains(y as i64, x as i64) {
                    m.set(y, x, s.class);
                }
            }
        }
    }
    m
}

/// Generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub shapes_per_sequence: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Velocity components are drawn uniformly from `-max_speed..=max_speed`.
    pub max_speed: i64,
    pub kinds: Vec<ShapeKind>,
    pub frames: usize,
    pub sequences: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 4,
            shapes_per_sequence: 3,
            min_size: 10,
            max_size: 18,
            max_speed: 3,
            kinds: vec![ShapeKind::Rectangle, ShapeKind::Disc],
            frames: 8,
            sequences: 500,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::Invalid(format!(
                "num_classes must be in 2..=256, got {}",
                self.num_classes
            )));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(Error::Invalid(format!(
                "shape sizes {}..={} are not a valid range",
                self.min_size, self.max_size
            )));
        }
        if self.max_size > self.height || self.max_size > self.width {
            return Err(Error::Invalid(format!(
                "shape size {} is larger than the {}x{} frame",
                self.max_size, self.height, self.width
            )));
        }
        if self.max_speed < 0 {
            return Err(Error::Invalid("max_speed must be non-negative".into()));
        }
        if self.kinds.is_empty() {
            return Err(Error::Invalid("at least one shape kind is required".into()));
        }
        Ok(())
    }
}

/// Initial shapes of sequence `index`. The draw depends only on `(cfg.seed, index)`.
pub fn sample_scene(cfg: &GenConfig, index: usize) -> Result<Vec<Shape>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let mut shapes = Vec::with_capacity(cfg.shapes_per_sequence);
    for _ in 0..cfg.shapes_per_sequence {
        let kind = cfg.kinds[rng.random_range(0..cfg.kinds.len())];
        let class = rng.random_range(1..cfg.num_classes) as u8;
        let width = rng.random_range(cfg.min_size..=cfg.max_size);
        let height = match kind {
            ShapeKind::Rectangle => rng.random_range(cfg.min_size..=cfg.max_size),
            ShapeKind::Disc => width,
        };
        let x = rng.random_range(0..=(cfg.width - width)) as i64;
        let y = rng.random_range(0..=(cfg.height - height)) as i64;
        let vx = rng.random_range(-cfg.max_speed..=cfg.max_speed);
        let vy = rng.random_range(-cfg.max_speed..=cfg.max_speed);
        shapes.push(Shape {
            kind,
            class,
            x,
            y,
            width,
            height,
            vx,
            vy,
        });
    }
    Ok(shapes)
}

/// Renders `frames` frames starting from `scene`.
pub fn simulate(scene: &[Shape], frames: usize, height: usize, width: usize) -> SegSequence {
    let mut state = scene.to_vec();
    let mut out = Vec::with_capacity(frames);
    for i in 0..frames {
        if i > 0 {
            for s in &mut state {
                *s = s.step(height, width);
            }
        }
        out.push(render(&state, height, width));
    }
    SegSequence { frames: out }
}

/// Generates `cfg.sequences` sequences. Parallel and serial generation agree bit for bit.
pub fn generate_dataset(cfg: &GenConfig) -> Result<SegDataset> {
    generate_range(cfg, 0..cfg.sequences)
}

/// Generates `count` held-out sequences: indices `cfg.sequences..cfg.sequences + count`
/// of the same seeded stream, so they never coincide with [`generate_dataset`]'s.
pub fn generate_validation(cfg: &GenConfig, count: usize) -> Result<SegDataset> {
    generate_range(cfg, cfg.sequences..cfg.sequences + count)
}

/// Generates the sequences with the given indices.
pub fn generate_range(cfg: &GenConfig, indices: std::ops::Range<usize>) -> Result<SegDataset> {
    cfg.validate()?;
    let sequences = indices
        .into_par_iter()
        .map(|i| sample_scene(cfg, i).map(|scene| simulate(&scene, cfg.frames, cfg.height, cfg.width)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SegDataset {
        num_classes: cfg.num_classes,
        height: cfg.height,
        width: cfg.width,
        sequences,
    })
}

/// `1×K×H×W` indicator tensor of `m`.
pub fn one_hot<T: Element>(m: &SegMap, num_classes: usize) -> Result<Tensor<T>> {
    one_hot_batch(&[m], num_classes)
}

/// `N×K×H×W` indicator tensor of equally sized maps.
pub fn one_hot_batch<T: Element>(maps: &[&SegMap], num_classes: usize) -> Result<Tensor<T>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Invalid("one-hot of zero maps".into()))?;
    let (h, w) = (first.height, first.width);
    let plane = h * w;
    let mut data = vec![T::zero(); maps.len() * num_classes * plane];
    for (n, m) in maps.iter().enumerate() {
        if m.height != h || m.width != w {
            return Err(shape_err("one_hot", format!("{}x{} vs {h}x{w}", m.height, m.width)));
        }
        m.check_classes(num_classes)?;
        for (p, &c) in m.data.iter().enumerate() {
            data[(n * num_classes + c as usize) * plane + p] = T::one();
        }
    }
    Tensor::from_vec([maps.len(), num_classes, h, w], data)
}

/// Per-pixel argmax over channels of `N×K×H×W` logits; ties go to the lowest class.
pub fn argmax_classes<T: Element>(logits: &Tensor<T>) -> Result<Vec<SegMap>> {
    let [n, k, h, w] = logits.dims();
    if k == 0 || k > 256 {
        return Err(Error::Invalid(format!("cannot take argmax over {k} classes")));
    }
    let plane = h * w;
    let data = logits.data();
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let mut classes = vec![0u8; plane];
        for (p, slot) in classes.iter_mut().enumerate() {
            let mut best = 0;
            let mut best_v = data[b * k * plane + p];
            for c in 1..k {
                let v = data[(b * k + c) * plane + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            *slot = best as u8;
        }
        out.push(SegMap {
            height: h,
            width: w,
            data: classes,
        });
    }
    Ok(out)
}

/// Crops the same random window and applies the same random quarter-turn to every frame.
pub fn augment(seq: &SegSequence, seed: u64, crop: (usize, usize), rotations: &[u8]) -> Result<SegSequence> {
    let Some(first) = seq.frames.first() else {
        return Ok(seq.clone());
    };
    let (ch, cw) = crop;
    if ch > first.height || cw > first.width {
        return Err(Error::Invalid(format!(
            "crop {ch}x{cw} is larger than the {}x{} frame",
            first.height, first.width
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y0 = rng.random_range(0..=first.height - ch);
    let x0 = rng.random_range(0..=first.width - cw);
    let turns = if rotations.is_empty() {
        0
    } else {
        rotations[rng.random_range(0..rotations.len())]
    };
    let frames = seq
        .frames
        .iter()
        .map(|f| f.crop(y0, x0, ch, cw).map(|c| c.rotate(turns)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SegSequence { frames })
}

fn eof_as_truncated(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Truncated("SEGV")
    } else {
        Error::Io(e)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(eof_as_truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Invalid(format!("{what} {v} does not fit the SEGV header")))
}

pub fn write_segv_to(w: &mut impl Write, ds: &SegDataset) -> Result<()> {
    ds.validate()?;
    w.write_all(&SEGV_MAGIC)?;
    for v in [
        SEGV_VERSION,
        to_u32(ds.sequences.len(), "sequence count")?,
        to_u32(ds.num_classes, "class count")?,
        to_u32(ds.height, "height")?,
        to_u32(ds.width, "width")?,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for seq in &ds.sequences {
        w.write_all(&to_u32(seq.frames.len(), "frame count")?.to_le_bytes())?;
        for f in &seq.frames {
            w.write_all(&f.data)?;
        }
    }
    Ok(())
}

pub fn read_segv_from(r: &mut impl Read) -> Result<SegDataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof_as_truncated)?;
    if magic != SEGV_MAGIC {
        return Err(Error::BadMagic {
            expected: SEGV_MAGIC,
            found: magic,
        });
    }
    let version = read_u32(r)?;
    if version != SEGV_VERSION {
        return Err(Error::UnsupportedVersion {
            format: "SEGV",
            version,
        });
    }
    let count = read_u32(r)? as usize;
    let num_classes = read_u32(r)? as usize;
    let height = read_u32(r)? as usize;
    let width = read_u32(r)? as usize;
    let plane = height
        .checked_mul(width)
        .ok_or_else(|| Error::Invalid(format!("SEGV frame {height}x{width} overflows")))?;
    let mut sequences = Vec::new();
    for _ in 0..count {
        let t = read_u32(r)? as usize;
        let mut frames = Vec::new();
        for _ in 0..t {
            let mut data = vec![0u8; plane];
            r.read_exact(&mut data).map_err(eof_as_truncated)?;
            let m = SegMap { height, width, data };
            m.check_classes(num_classes)?;
            frames.push(m);
        }
        sequences.push(SegSequence { frames });
    }
    Ok(SegDataset {
        num_classes,
        height,
        width,
        sequences,
    })
}

pub fn write_segv(path: impl AsRef<Path>, ds: &SegDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_segv_to(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

pub fn read_segv(path: impl AsRef<Path>) -> Result<SegDataset> {
    read_segv_from(&mut BufReader::new(File::open(path)?))
}
