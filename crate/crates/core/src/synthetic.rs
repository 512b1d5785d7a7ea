//! Procedural scenes with planted parts and exact ground truth.
//!
//! Each scene draws an object center, then places every part template at its
//! anchor (plus jitter) with independent probability `p_k`. Part 0 is the
//! discriminative "body": its color variant decides the class.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    /// Horizontal bar, three times as wide as it is tall.
    Bar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartTemplate {
    pub shape: Shape,
    pub color: [f64; 3],
    /// Half-extent range in pixels, inclusive.
    pub size: (f64, f64),
    pub probability: f64,
    /// Offset (row, col) of the part center from the object center.
    pub anchor: (f64, f64),
}

impl PartTemplate {
    /// Largest half-extent along (rows, cols).
    fn reach(&self) -> (f64, f64) {
        match self.shape {
            Shape::Bar => (self.size.1 / 3.0, self.size.1),
            _ => (self.size.1, self.size.1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub parts: Vec<PartTemplate>,
    /// Color variants of part 0; the variant index is the class label.
    pub class_colors: Vec<[f64; 3]>,
    pub background: [f64; 3],
    /// Maximum offset of the object center from the canvas center.
    pub center_jitter: f64,
    /// Maximum offset of each part from its anchor.
    pub anchor_jitter: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let part = |shape, color, size, probability, anchor| PartTemplate {
            shape,
            color,
            size,
            probability,
            anchor,
        };
        Self {
            height: 64,
            width: 64,
            parts: vec![
                part(Shape::Disk, [1.0, 1.0, 1.0], (7.0, 9.0), 1.0, (0.0, 0.0)),
                part(Shape::Square, [0.95, 0.95, 0.95], (4.0, 5.0), 1.0, (-16.0, 0.0)),
                part(Shape::Bar, [0.0, 0.9, 0.9], (6.0, 8.0), 0.7, (15.0, -10.0)),
                part(Shape::Disk, [0.9, 0.0, 0.9], (3.0, 4.0), 0.4, (14.0, 11.0)),
            ],
            class_colors: vec![
                [0.9, 0.15, 0.1],
                [0.1, 0.8, 0.15],
                [0.15, 0.25, 0.95],
                [0.95, 0.85, 0.1],
            ],
            background: [0.25, 0.22, 0.2],
            center_jitter: 6.0,
            anchor_jitter: 2.0,
            noise: 0.05,
        }
    }
}

impl SceneSpec {
    pub fn classes(&self) -> usize {
        self.class_colors.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts.is_empty() || self.class_colors.len() < 2 {
            return Err(Error::Config("scene needs at least one part and two classes".into()));
        }
        if self.parts[0].probability != 1.0 {
            return Err(Error::Config("part 0 carries the class and must always be present".into()));
        }
        for (k, p) in self.parts.iter().enumerate() {
            if !(p.probability > 0.0 && p.probability <= 1.0) {
                return Err(Error::Config(format!("part {k} probability {} outside (0, 1]", p.probability)));
            }
            if !(p.size.0 > 0.0 && p.size.0 <= p.size.1) {
                return Err(Error::Config(format!("part {k} size range {:?} invalid", p.size)));
            }
            let (rr, rc) = p.reach();
            let slack = self.center_jitter + self.anchor_jitter;
            let (cy, cx) = ((self.height as f64 - 1.0) / 2.0, (self.width as f64 - 1.0) / 2.0);
            let (top, bottom) = (cy + p.anchor.0 - slack - rr, cy + p.anchor.0 + slack + rr);
            let (left, right) = (cx + p.anchor.1 - slack - rc, cx + p.anchor.1 + slack + rc);
            if top < 0.0 || left < 0.0 || bottom > self.height as f64 - 1.0 || right > self.width as f64 - 1.0 {
                return Err(Error::Config(format!("part {k} can leave the canvas")));
            }
        }
        if !(self.noise >= 0.0 && self.center_jitter >= 0.0 && self.anchor_jitter >= 0.0) {
            return Err(Error::Config("noise and jitter must be non-negative".into()));
        }
        Ok(())
    }
}

/// Axis-aligned box in continuous pixel coordinates, inclusive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub top: f64,
    pub left: f64,
    pub bottom: f64,
    pub right: f64,
}

impl BBox {
    pub fn contains(&self, row: f64, col: f64) -> bool {
        row >= self.top && row <= self.bottom && col >= self.left && col <= self.right
    }

    pub fn diagonal(&self) -> f64 {
        (self.bottom - self.top).hypot(self.right - self.left)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3×H×W`, values `k/255`.
    pub image: Tensor,
    pub label: usize,
    /// Part centers (row, col); `None` where the part is absent.
    pub landmarks: Vec<Option<(f64, f64)>>,
    pub bbox: BBox,
    pub presence: Vec<bool>,
}

impl Sample {
    /// Mirror image left-right, with ground truth to match.
    pub fn hflip(&self) -> Sample {
        let (c, h, w) = (self.image.shape()[0], self.image.shape()[1], self.image.shape()[2]);
        let src = self.image.data();
        let mut data = vec![0.0; src.len()];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    data[(ch * h + i) * w + j] = src[(ch * h + i) * w + (w - 1 - j)];
                }
            }
        }
        let flip = |col: f64| (w - 1) as f64 - col;
        Sample {
            image: Tensor::new(&[c, h, w], data).expect("same shape"),
            label: self.label,
            landmarks: self.landmarks.iter().map(|l| l.map(|(r, col)| (r, flip(col)))).collect(),
            bbox: BBox {
                left: flip(self.bbox.right),
                right: flip(self.bbox.left),
                ..self.bbox
            },
            presence: self.presence.clone(),
        }
    }
}

fn covers(shape: Shape, half: f64, dy: f64, dx: f64) -> bool {
    match shape {
        Shape::Disk => dy * dy + dx * dx <= half * half,
        Shape::Square => dy.abs() <= half && dx.abs() <= half,
        Shape::Bar => dy.abs() <= half / 3.0 && dx.abs() <= half,
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn generate_one(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Sample {
    let (h, w) = (spec.height, spec.width);
    let jitter = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let cy = (h as f64 - 1.0) / 2.0 + jitter(rng, spec.center_jitter);
    let cx = (w as f64 - 1.0) / 2.0 + jitter(rng, spec.center_jitter);
    let label = rng.random_range(0..spec.classes());

    let mut rgb = vec![0.0; 3 * h * w];
    for (ch, &v) in spec.background.iter().enumerate() {
        rgb[ch * h * w..(ch + 1) * h * w].fill(v);
    }
    let mut landmarks = Vec::with_capacity(spec.parts.len());
    let mut presence = Vec::with_capacity(spec.parts.len());
    let mut bbox: Option<BBox> = None;
    for (k, part) in spec.parts.iter().enumerate() {
        // Draw every variate even for absent parts so the stream layout
        // does not depend on earlier outcomes.
        let present = rng.random::<f64>() < part.probability;
        let py = cy + part.anchor.0 + jitter(rng, spec.anchor_jitter);
        let px = cx + part.anchor.1 + jitter(rng, spec.anchor_jitter);
        let half = rng.random_range(part.size.0..=part.size.1);
        presence.push(present);
        if !present {
            landmarks.push(None);
            continue;
        }
        landmarks.push(Some((py, px)));
        let color = if k == 0 { spec.class_colors[label] } else { part.color };
        let (rr, rc) = match part.shape {
            Shape::Bar => (half / 3.0, half),
            _ => (half, half),
        };
        let b = BBox {
            top: py - rr,
            left: px - rc,
            bottom: py + rr,
            right: px + rc,
        };
        bbox = Some(match bbox {
            None => b,
            Some(o) => BBox {
                top: o.top.min(b.top),
                left: o.left.min(b.left),
                bottom: o.bottom.max(b.bottom),
                right: o.right.max(b.right),
            },
        });
        for i in (py - rr).floor().max(0.0) as usize..=((py + rr).ceil() as usize).min(h - 1) {
            for j in (px - rc).floor().max(0.0) as usize..=((px + rc).ceil() as usize).min(w - 1) {
                if covers(part.shape, half, i as f64 - py, j as f64 - px) {
                    for (ch, &v) in color.iter().enumerate() {
                        rgb[(ch * h + i) * w + j] = v;
                    }
                }
            }
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("validated noise");
        rgb.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    rgb.iter_mut().for_each(|v| *v = quantize(*v));
    Sample {
        image: Tensor::new(&[3, h, w], rgb).expect("consistent extents"),
        label,
        landmarks,
        bbox: bbox.expect("part 0 is always present"),
        presence,
    }
}

/// `count` samples; sample `i` uses stream `i` of a generator seeded by `seed`.
pub fn generate(spec: &SceneSpec, count: usize, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    Ok(parallel::map_range(count, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        generate_one(spec, &mut rng)
    }))
}

pub const MANIFEST: &str = "manifest.csv";

fn manifest_header(parts: usize) -> String {
    let mut h = String::from("# file,label");
    (0..parts).for_each(|k| write!(h, ",present{k}").unwrap());
    (0..parts).for_each(|k| write!(h, ",row{k},col{k}").unwrap());
    h.push_str(",top,left,bottom,right");
    h
}

/// Writes `NNNNN.ppm` images plus a manifest with one line per sample.
pub fn save(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let parts = samples.first().map_or(0, |s| s.presence.len());
    let mut manifest = manifest_header(parts);
    manifest.push('\n');
    for (i, s) in samples.iter().enumerate() {
        let file = format!("{i:05}.ppm");
        write_ppm(&dir.join(&file), &s.image)?;
        write!(manifest, "{file},{}", s.label).unwrap();
        s.presence.iter().for_each(|&p| write!(manifest, ",{}", p as u8).unwrap());
        for l in &s.landmarks {
            match l {
                Some((r, c)) => write!(manifest, ",{r},{c}").unwrap(),
                None => manifest.push_str(",-,-"),
            }
        }
        let b = s.bbox;
        writeln!(manifest, ",{},{},{},{}", b.top, b.left, b.bottom, b.right).unwrap();
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut samples = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty()) {
        let bad = |what: &str| Error::Format(format!("manifest line {}: {what}", n + 1));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 6 || (fields.len() - 6) % 3 != 0 {
            return Err(bad("wrong field count"));
        }
        let parts = (fields.len() - 6) / 3;
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number {s:?}")));
        let label = fields[1].parse().map_err(|_| bad("bad label"))?;
        let presence = fields[2..2 + parts]
            .iter()
            .map(|f| match *f {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(bad("presence flag must be 0 or 1")),
            })
            .collect::<Result<Vec<_>>>()?;
        let mut landmarks = Vec::with_capacity(parts);
        for k in 0..parts {
            let (r, c) = (fields[2 + parts + 2 * k], fields[3 + parts + 2 * k]);
            landmarks.push(if r == "-" { None } else { Some((num(r)?, num(c)?)) });
        }
        let b = &fields[2 + 3 * parts..];
        samples.push(Sample {
            image: read_ppm(&dir.join(fields[0]))?,
            label,
            landmarks,
            bbox: BBox {
                top: num(b[0])?,
                left: num(b[1])?,
                bottom: num(b[2])?,
                right: num(b[3])?,
            },
            presence,
        });
    }
    Ok(samples)
}

/// Writes a `3×H×W` tensor in `[0, 1]` as a binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::invalid(format!("PPM needs 3×H×W, got {:?}", image.shape())));
    };
    let v = image.data();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| (v[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([at(0), at(1), at(2)])
    });
    let out = BufWriter::new(File::create(path)?);
    PnmEncoder::new(out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), w as u32, h as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}
