//! Datasets: a seeded synthetic Gaussian-blob image generator and a loader
//! for directories of 8-bit binary PGM images.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Shape3;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: Shape3,
    pub num_classes: usize,
    pub samples: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(shape: Shape3, num_classes: usize, samples: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::Shape(format!("{} samples but {} labels", samples.len(), labels.len())));
        }
        if let Some(s) = samples.iter().find(|s| s.len() != shape.len()) {
            return Err(Error::Shape(format!("sample of length {} for shape {:?}", s.len(), shape)));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Shape(format!("label {l} outside {num_classes} classes")));
        }
        Ok(Self { shape, num_classes, samples, labels })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.samples.iter().map(|s| s.as_slice()).zip(self.labels.iter().copied())
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            shape: self.shape,
            num_classes: self.num_classes,
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    pub fn concat(parts: &[&Dataset]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Parameter("no datasets to concatenate".into()))?;
        let mut out = Dataset { samples: vec![], labels: vec![], ..(*first).clone() };
        for p in parts {
            if p.shape != first.shape || p.num_classes != first.num_classes {
                return Err(Error::Shape("datasets differ in shape or class count".into()));
            }
            out.samples.extend(p.samples.iter().cloned());
            out.labels.extend(&p.labels);
        }
        Ok(out)
    }

    /// Deterministic shuffle followed by a split into `n` disjoint parts of
    /// near-equal size.
    pub fn partition(&self, n: usize, seed: u64) -> Result<Vec<Dataset>> {
        if n == 0 || n > self.len() {
            return Err(Error::Parameter(format!("cannot split {} samples into {n} parts", self.len())));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
        let base = self.len() / n;
        let extra = self.len() % n;
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        for p in 0..n {
            let size = base + usize::from(p < extra);
            out.push(self.subset(&idx[start..start + size]));
            start += size;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobConfig {
    pub num_classes: usize,
    pub side: usize,
    /// Radius of the blob in pixels.
    pub sigma: f64,
    /// Max center offset in pixels, uniform per axis.
    pub jitter: f64,
    /// Std-dev of additive pixel noise.
    pub noise: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self { num_classes: 4, side: 16, sigma: 2.0, jitter: 2.0, noise: 0.25 }
    }
}

impl BlobConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.side < 4 {
            return Err(Error::Config("blob data needs >= 2 classes and side >= 4".into()));
        }
        if !(self.sigma > 0.0) || !(self.jitter >= 0.0) || !(self.noise >= 0.0) {
            return Err(Error::Config("blob sigma must be positive, jitter and noise non-negative".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> Shape3 {
        Shape3::new(1, self.side, self.side)
    }

    /// Class centers evenly spaced on a circle around the image center.
    pub fn centers(&self) -> Vec<(f64, f64)> {
        let mid = (self.side as f64 - 1.0) / 2.0;
        let r = self.side as f64 / 4.0;
        (0..self.num_classes)
            .map(|c| {
                let t = std::f64::consts::TAU * c as f64 / self.num_classes as f64;
                (mid + r * t.sin(), mid + r * t.cos())
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, label: usize, rng: &mut R) -> Vec<f64> {
        let (cy, cx) = self.centers()[label];
        let (cy, cx) = (cy + rng.gen_range(-1.0..=1.0) * self.jitter, cx + rng.gen_range(-1.0..=1.0) * self.jitter);
        let noise = Normal::new(0.0, self.noise.max(f64::MIN_POSITIVE)).unwrap();
        let mut out = Vec::with_capacity(self.side * self.side);
        for i in 0..self.side {
            for j in 0..self.side {
                let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                let v = (-d2 / (2.0 * self.sigma * self.sigma)).exp();
                let n = if self.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                out.push(v + n);
            }
        }
        out
    }

    /// `count` samples with labels cycling through the classes.
    pub fn generate(&self, count: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..count).map(|i| i % self.num_classes).collect();
        let samples = labels.iter().map(|&l| self.sample(l, &mut rng)).collect();
        Dataset::new(self.shape(), self.num_classes, samples, labels)
    }
}

fn pgm_token<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format(path, "truncated PGM header"));
    }
    Ok(&bytes[start..*pos])
}

fn pgm_number(bytes: &[u8], pos: &mut usize, path: &Path) -> Result<usize> {
    let tok = pgm_token(bytes, pos, path)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(path, format!("bad PGM header field {:?}", String::from_utf8_lossy(tok))))
}

/// Parses a binary (P5) 8-bit PGM; returns (width, height, pixels / maxval).
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut pos = 0;
    if pgm_token(bytes, &mut pos, path)? != b"P5" {
        return Err(Error::format(path, "not a binary PGM (P5)"));
    }
    let w = pgm_number(bytes, &mut pos, path)?;
    let h = pgm_number(bytes, &mut pos, path)?;
    let maxval = pgm_number(bytes, &mut pos, path)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(path, format!("only 8-bit PGM supported, maxval {maxval}")));
    }
    pos += 1;
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| Error::format(path, "truncated PGM pixel data"))?;
    Ok((w, h, data.iter().map(|&b| b as f64 / maxval as f64).collect()))
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    std::fs::write(path, encode_pgm(width, height, pixels)).map_err(|e| Error::io(path, e))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Loads `<root>/<class_label>/<sample>.pgm`. Class directories are sorted
/// by name and numbered from 0; every image must be `side` x `side`.
pub fn load_pgm_dir(root: &Path, side: usize) -> Result<(Dataset, Vec<String>)> {
    let mut names = Vec::new();
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let label = names.len();
        names.push(class_dir.file_name().unwrap().to_string_lossy().into_owned());
        for file in sorted_entries(&class_dir)? {
            if file.extension().and_then(|e| e.to_str()) != Some("pgm") {
                continue;
            }
            let bytes = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
            let (w, h, px) = parse_pgm(&bytes, &file)?;
            if w != side || h != side {
                return Err(Error::format(&file, format!("expected {side}x{side}, got {w}x{h}")));
            }
            samples.push(px);
            labels.push(label);
        }
    }
    if names.len() < 2 || samples.is_empty() {
        return Err(Error::format(root, "need at least two class directories with .pgm images"));
    }
    let ds = Dataset::new(Shape3::new(1, side, side), names.len(), samples, labels)?;
    Ok((ds, names))
}

/// Writes a dataset in the layout read by [`load_pgm_dir`], one directory per
/// class named `class<label>`.
pub fn write_pgm_dir(root: &Path, ds: &Dataset) -> Result<()> {
    let side = ds.shape.w;
    for c in 0..ds.num_classes {
        let dir = root.join(format!("class{c}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (i, (x, y)) in ds.pairs().enumerate() {
        write_pgm(&root.join(format!("class{y}")).join(format!("{i:05}.pgm")), side, ds.shape.h, x)?;
    }
    Ok(())
}
