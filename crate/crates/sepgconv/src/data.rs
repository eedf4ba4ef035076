//! Dataset plumbing: IDX and amat loaders, a procedural digit
//! synthesizer for self-contained runs, seeded rotation, and batching.
//!
//! Everything here is deterministic given its seed, so training runs are
//! reproducible end to end. Images are stored as f32 in [0,1] with shape
//! [N,1,28,28]; training code casts to its working precision.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 28;
const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// A labeled image collection: images [N,1,28,28] in [0,1], one label in
/// 0..=9 per image, and a tag recording where the data came from.
#[derive(Clone, Debug)]
pub struct LabeledImageSet {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    pub provenance: String,
}

impl LabeledImageSet {
    pub fn new(images: Tensor<f32>, labels: Vec<u8>, provenance: impl Into<String>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != IMAGE_SIDE || s[3] != IMAGE_SIDE {
            return Err(Error::shape(format!("images want [N,1,28,28], got {:?}", s)));
        }
        if s[0] != labels.len() {
            return Err(Error::invalid(format!("{} images but {} labels", s[0], labels.len())));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::invalid(format!("label {} out of 0..=9", l)));
        }
        if images.data().iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::invalid("pixel values must lie in [0,1]"));
        }
        Ok(LabeledImageSet { images, labels, provenance: provenance.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// One image as [1,28,28].
    pub fn image(&self, i: usize) -> Tensor<f32> {
        let data = self.images.data()[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS].to_vec();
        Tensor::new(&[1, IMAGE_SIDE, IMAGE_SIDE], data).unwrap()
    }

    /// The subset at the given indices, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("index {} out of {} samples", i, self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]);
            labels.push(self.labels[i]);
        }
        let images = Tensor::new(&[indices.len(), 1, IMAGE_SIDE, IMAGE_SIDE], data)?;
        LabeledImageSet::new(images, labels, self.provenance.clone())
    }

    /// A seeded random subset holding ceil(fraction * N) samples.
    pub fn fraction(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!("fraction {} outside (0,1]", fraction)));
        }
        let keep = ((fraction * self.len() as f64).ceil() as usize).clamp(1, self.len());
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.truncate(keep);
        self.select(&order)
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::data_file(
            path,
            format!("truncated: wanted 4 bytes at offset {}, file has {}", offset, bytes.len()),
        ));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Parse a big-endian IDX image/label file pair (the classic MNIST
/// layout): images magic 0x00000803 with dims [N,28,28] and one byte per
/// pixel, labels magic 0x00000801 with dim [N]. Pixels are scaled by
/// 1/255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let ipath = images_path.as_ref();
    let lpath = labels_path.as_ref();
    let ibytes = fs::read(ipath).map_err(|e| Error::io(ipath, e))?;
    let lbytes = fs::read(lpath).map_err(|e| Error::io(lpath, e))?;

    let magic = read_be_u32(&ibytes, 0, ipath)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::data_file(
            ipath,
            format!("bad image magic 0x{:08x} at offset 0 (want 0x{:08x})", magic, IDX_IMAGE_MAGIC),
        ));
    }
    let n = read_be_u32(&ibytes, 4, ipath)? as usize;
    let h = read_be_u32(&ibytes, 8, ipath)? as usize;
    let w = read_be_u32(&ibytes, 12, ipath)? as usize;
    if h != IMAGE_SIDE || w != IMAGE_SIDE {
        return Err(Error::data_file(ipath, format!("want 28x28 images, file holds {}x{}", h, w)));
    }
    let want = 16 + n * IMAGE_PIXELS;
    if ibytes.len() != want {
        return Err(Error::data_file(
            ipath,
            format!("{} images of 28x28 need {} bytes, file has {}", n, want, ibytes.len()),
        ));
    }

    let lmagic = read_be_u32(&lbytes, 0, lpath)?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(Error::data_file(
            lpath,
            format!("bad label magic 0x{:08x} at offset 0 (want 0x{:08x})", lmagic, IDX_LABEL_MAGIC),
        ));
    }
    let ln = read_be_u32(&lbytes, 4, lpath)? as usize;
    if ln != n {
        return Err(Error::data_file(lpath, format!("{} labels for {} images", ln, n)));
    }
    if lbytes.len() != 8 + n {
        return Err(Error::data_file(
            lpath,
            format!("{} labels need {} bytes, file has {}", n, 8 + n, lbytes.len()),
        ));
    }
    if let Some(pos) = lbytes[8..].iter().position(|&l| l > 9) {
        return Err(Error::data_file(lpath, format!("label {} at index {} out of 0..=9", lbytes[8 + pos], pos)));
    }

    let data: Vec<f32> = ibytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let images = Tensor::new(&[n, 1, IMAGE_SIDE, IMAGE_SIDE], data)?;
    LabeledImageSet::new(images, lbytes[8..].to_vec(), format!("idx:{}", ipath.display()))
}

/// Write a set back out as an IDX pair; pixels are rounded to bytes, so
/// byte-sourced sets round-trip exactly.
pub fn write_idx(set: &LabeledImageSet, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let ipath = images_path.as_ref();
    let lpath = labels_path.as_ref();
    let n = set.len();
    let mut ibytes = Vec::with_capacity(16 + n * IMAGE_PIXELS);
    ibytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    ibytes.extend_from_slice(&(n as u32).to_be_bytes());
    ibytes.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    ibytes.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    ibytes.extend(set.images.data().iter().map(|&v| (v * 255.0).round() as u8));
    fs::write(ipath, ibytes).map_err(|e| Error::io(ipath, e))?;

    let mut lbytes = Vec::with_capacity(8 + n);
    lbytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lbytes.extend_from_slice(&(n as u32).to_be_bytes());
    lbytes.extend_from_slice(&set.labels);
    fs::write(lpath, lbytes).map_err(|e| Error::io(lpath, e))
}

/// An amat load plus how many out-of-range pixel values were clamped.
#[derive(Debug)]
pub struct AmatLoad {
    pub set: LabeledImageSet,
    pub clamped_values: usize,
}

/// Parse the text amat layout: each line holds 784 decimals (row-major
/// 28x28, nominally already in [0,1]) followed by the label. Values
/// outside [0,1] are clamped and counted rather than rejected.
pub fn load_amat(path: impl AsRef<Path>) -> Result<AmatLoad> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut clamped = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != IMAGE_PIXELS + 1 {
            return Err(Error::data_file(
                path,
                format!("line {}: want {} fields, got {}", lineno + 1, IMAGE_PIXELS + 1, fields.len()),
            ));
        }
        for (col, f) in fields[..IMAGE_PIXELS].iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| {
                Error::data_file(path, format!("line {}: field {} ({:?}) is not a number", lineno + 1, col + 1, f))
            })?;
            if !v.is_finite() {
                return Err(Error::data_file(path, format!("line {}: non-finite pixel value", lineno + 1)));
            }
            if !(0.0..=1.0).contains(&v) {
                clamped += 1;
            }
            data.push(v.clamp(0.0, 1.0) as f32);
        }
        let lab: f64 = fields[IMAGE_PIXELS]
            .parse()
            .map_err(|_| Error::data_file(path, format!("line {}: label {:?} is not a number", lineno + 1, fields[IMAGE_PIXELS])))?;
        if lab.fract() != 0.0 || !(0.0..=9.0).contains(&lab) {
            return Err(Error::data_file(path, format!("line {}: label {} is not an integer in 0..=9", lineno + 1, lab)));
        }
        labels.push(lab as u8);
    }
    if labels.is_empty() {
        return Err(Error::data_file(path, "no samples"));
    }
    let n = labels.len();
    let images = Tensor::new(&[n, 1, IMAGE_SIDE, IMAGE_SIDE], data)?;
    let set = LabeledImageSet::new(images, labels, format!("amat:{}", path.display()))?;
    Ok(AmatLoad { set, clamped_values: clamped })
}

// ---------------------------------------------------------------------
// procedural digits
// ---------------------------------------------------------------------

/// Polyline strokes per digit, control points in a unit box (y down).
/// Crude stick digits, but each class has its own topology, which is all
/// a desk-scale learning check needs.
fn digit_strokes(digit: u8) -> Vec<Vec<(f64, f64)>> {
    fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> Vec<(f64, f64)> {
        (0..=20)
            .map(|i| {
                let t = i as f64 / 20.0 * std::f64::consts::TAU;
                (cx + rx * t.cos(), cy + ry * t.sin())
            })
            .collect()
    }
    match digit {
        0 => vec![ellipse(0.5, 0.5, 0.3, 0.42)],
        1 => vec![vec![(0.36, 0.26), (0.56, 0.08), (0.56, 0.92)]],
        2 => vec![vec![
            (0.26, 0.3),
            (0.32, 0.14),
            (0.52, 0.08),
            (0.7, 0.16),
            (0.74, 0.34),
            (0.3, 0.68),
            (0.24, 0.9),
            (0.76, 0.9),
        ]],
        3 => vec![
            vec![(0.28, 0.16), (0.52, 0.09), (0.7, 0.24), (0.56, 0.44), (0.42, 0.48)],
            vec![(0.42, 0.48), (0.62, 0.52), (0.74, 0.68), (0.56, 0.88), (0.28, 0.84)],
        ],
        4 => vec![
            vec![(0.6, 0.08), (0.24, 0.6), (0.8, 0.6)],
            vec![(0.62, 0.34), (0.62, 0.92)],
        ],
        5 => vec![
            vec![(0.72, 0.1), (0.3, 0.1), (0.28, 0.45)],
            vec![(0.28, 0.45), (0.56, 0.4), (0.74, 0.56), (0.64, 0.84), (0.34, 0.9), (0.24, 0.78)],
        ],
        6 => vec![
            vec![(0.66, 0.1), (0.44, 0.2), (0.3, 0.48), (0.28, 0.72)],
            ellipse(0.47, 0.68, 0.2, 0.2),
        ],
        7 => vec![
            vec![(0.24, 0.12), (0.76, 0.12), (0.4, 0.9)],
            vec![(0.34, 0.52), (0.6, 0.52)],
        ],
        8 => vec![ellipse(0.5, 0.3, 0.2, 0.19), ellipse(0.5, 0.7, 0.25, 0.21)],
        9 => vec![
            ellipse(0.52, 0.32, 0.21, 0.21),
            vec![(0.73, 0.32), (0.7, 0.6), (0.54, 0.9)],
        ],
        _ => unreachable!("digit out of range"),
    }
}

/// Distance from point p to segment ab.
fn seg_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 { 0.0 } else { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Render one digit to a 28x28 canvas with mild per-sample jitter in
/// position, scale, and stroke thickness.
fn render_digit(digit: u8, rng: &mut impl Rng) -> Vec<f32> {
    let scale = 20.0 * rng.gen_range(0.88..1.08);
    let ox = (28.0 - scale) / 2.0 + rng.gen_range(-1.6..1.6);
    let oy = (28.0 - scale) / 2.0 + rng.gen_range(-1.6..1.6);
    let thick = rng.gen_range(0.55..0.95);
    let strokes = digit_strokes(digit);

    let mut img = vec![0.0f32; IMAGE_PIXELS];
    for stroke in &strokes {
        for pair in stroke.windows(2) {
            let a = (pair[0].0 * scale + ox, pair[0].1 * scale + oy);
            let b = (pair[1].0 * scale + ox, pair[1].1 * scale + oy);
            let lo_x = (a.0.min(b.0) - thick - 1.0).floor().max(0.0) as usize;
            let hi_x = (a.0.max(b.0) + thick + 1.0).ceil().min(27.0) as usize;
            let lo_y = (a.1.min(b.1) - thick - 1.0).floor().max(0.0) as usize;
            let hi_y = (a.1.max(b.1) + thick + 1.0).ceil().min(27.0) as usize;
            for y in lo_y..=hi_y {
                for x in lo_x..=hi_x {
                    let d = seg_distance((x as f64, y as f64), a, b);
                    // solid core with a one-pixel soft edge
                    let v = (1.0 - (d - thick).max(0.0)).clamp(0.0, 1.0) as f32;
                    let px = &mut img[y * IMAGE_SIDE + x];
                    *px = px.max(v);
                }
            }
        }
    }
    img
}

/// Deterministically synthesize n upright digit images, labels cycling
/// 0..=9 (so counts are exactly balanced when 10 divides n).
pub fn synth_digits(n: usize, seed: u64) -> Result<LabeledImageSet> {
    if n == 0 {
        return Err(Error::invalid("cannot synthesize an empty set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * IMAGE_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = (i % 10) as u8;
        data.extend(render_digit(digit, &mut rng));
        labels.push(digit);
    }
    let images = Tensor::new(&[n, 1, IMAGE_SIDE, IMAGE_SIDE], data)?;
    LabeledImageSet::new(images, labels, format!("synthetic(seed={})", seed))
}

/// Rotate one [1,H,W] image by `angle_deg` about the grid center with
/// bilinear sampling and zero fill. At 90-degree multiples this agrees
/// with the exact index-permutation rotations up to interpolation
/// rounding.
pub fn rotate_image_bilinear(img: &Tensor<f32>, angle_deg: f64) -> Result<Tensor<f32>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::shape(format!("want [1,H,W], got {:?}", s)));
    }
    let (h, w) = (s[1], s[2]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let rad = angle_deg.to_radians();
    let (sin, cos) = rad.sin_cos();
    let src = img.data();
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            // sample the source at the location this pixel came from
            let xc = c as f64 - cx;
            let yc = r as f64 - cy;
            let xs = cos * xc - sin * yc + cx;
            let ys = sin * xc + cos * yc + cy;
            let x0 = xs.floor();
            let y0 = ys.floor();
            let fx = xs - x0;
            let fy = ys - y0;
            let mut acc = 0.0f64;
            for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                    let yy = y0 as isize + dy;
                    let xx = x0 as isize + dx;
                    if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                        acc += wy * wx * src[yy as usize * w + xx as usize] as f64;
                    }
                }
            }
            out[r * w + c] = (acc as f32).clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[1, h, w], out)
}

/// Rotate every image by an independent uniform angle in [0, 360) drawn
/// from a seeded stream. Labels are untouched, so the class distribution
/// is preserved exactly.
pub fn synth_rotated(base: &LabeledImageSet, seed: u64) -> Result<LabeledImageSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(base.images.numel());
    for i in 0..base.len() {
        let angle = rng.gen_range(0.0..360.0);
        let rotated = rotate_image_bilinear(&base.image(i), angle)?;
        data.extend_from_slice(rotated.data());
    }
    let images = Tensor::new(&[base.len(), 1, IMAGE_SIDE, IMAGE_SIDE], data)?;
    LabeledImageSet::new(images, base.labels.clone(), format!("{} (rotated seed={})", base.provenance, seed))
}

/// Seeded mini-batch iterator; the last batch may be short.
pub struct Batches<'a> {
    set: &'a LabeledImageSet,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

pub fn batches(set: &LabeledImageSet, batch_size: usize, seed: u64, shuffle: bool) -> Result<Batches<'_>> {
    if set.is_empty() {
        return Err(Error::invalid("cannot batch an empty set"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(Batches { set, order, batch_size, next: 0 })
}

impl Iterator for Batches<'_> {
    type Item = (Tensor<f32>, Vec<u8>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let idx = &self.order[self.next..end];
        self.next = end;
        let mut data = Vec::with_capacity(idx.len() * IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.set.images.data()[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]);
            labels.push(self.set.labels[i]);
        }
        let images = Tensor::new(&[idx.len(), 1, IMAGE_SIDE, IMAGE_SIDE], data).unwrap();
        Some((images, labels))
    }
}
