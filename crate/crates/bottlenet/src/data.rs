//! Labeled image datasets: the binary BNDS file format and the synthetic
//! generators used as desk-scale training data.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"BNDS";

/// u8 images with class labels; pixels scale to [0, 1] at batch time.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub num_classes: usize,
    pub records: Vec<(Vec<u8>, u8)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Assemble the samples at `indices` into an f64 batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let shape = Shape::new(indices.len(), self.h, self.w, self.c);
        let mut data = Vec::with_capacity(shape.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let (pixels, label) = &self.records[i];
            data.extend(pixels.iter().map(|&p| p as f64 / 255.0));
            labels.push(*label as usize);
        }
        Ok((Tensor::from_vec(shape, data)?, labels))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        w.write_all(&(self.h as u32).to_le_bytes())?;
        w.write_all(&(self.w as u32).to_le_bytes())?;
        w.write_all(&(self.c as u32).to_le_bytes())?;
        w.write_all(&(self.num_classes as u32).to_le_bytes())?;
        for (pixels, label) in &self.records {
            w.write_all(pixels)?;
            w.write_all(&[*label])?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::CorruptStream {
                offset: 0,
                reason: "bad BNDS magic".into(),
            });
        }
        let mut u32buf = [0u8; 4];
        let mut next = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut u32buf)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let count = next(r)? as usize;
        let h = next(r)? as usize;
        let w = next(r)? as usize;
        let c = next(r)? as usize;
        let num_classes = next(r)? as usize;
        if h == 0 || w == 0 || c == 0 || num_classes == 0 {
            return Err(Error::CorruptStream {
                offset: 8,
                reason: "zero dimension in BNDS header".into(),
            });
        }
        let mut records = Vec::with_capacity(count);
        let mut pixels = vec![0u8; h * w * c];
        for i in 0..count {
            r.read_exact(&mut pixels).map_err(|_| Error::CorruptStream {
                offset: 24 + i * (h * w * c + 1),
                reason: "truncated record".into(),
            })?;
            let mut label = [0u8; 1];
            r.read_exact(&mut label)?;
            if label[0] as usize >= num_classes {
                return Err(Error::CorruptStream {
                    offset: 24 + i * (h * w * c + 1) + h * w * c,
                    reason: format!("label {} out of range", label[0]),
                });
            }
            records.push((pixels.clone(), label[0]));
        }
        Ok(Dataset {
            h,
            w,
            c,
            num_classes,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        Self::read_from(&mut f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    Blobs,
    Stripes,
    Shapes,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SyntheticKind::Blobs),
            "stripes" => Ok(SyntheticKind::Stripes),
            "shapes" => Ok(SyntheticKind::Shapes),
            other => Err(Error::InvalidConfig(format!("unknown dataset kind {other}"))),
        }
    }
}

/// Generate a deterministic synthetic dataset. Classes are separable by both
/// low-frequency (position, shape) and mid-frequency (stripe) structure.
pub fn generate(
    kind: SyntheticKind,
    count: usize,
    h: usize,
    w: usize,
    c: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::InvalidConfig("need at least 2 classes".into()));
    }
    if count < num_classes {
        return Err(Error::InvalidConfig(
            "need at least one sample per class".into(),
        ));
    }
    let max_classes = match kind {
        SyntheticKind::Shapes => 4,
        _ => 8,
    };
    if num_classes > max_classes {
        return Err(Error::InvalidConfig(format!(
            "kind supports at most {max_classes} classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let label = (i % num_classes) as u8;
        let img = match kind {
            SyntheticKind::Blobs => blob_image(&mut rng, h, w, c, label, num_classes),
            SyntheticKind::Stripes => stripe_image(&mut rng, h, w, c, label),
            SyntheticKind::Shapes => shape_image(&mut rng, h, w, c, label),
        };
        records.push((img, label));
    }
    Ok(Dataset {
        h,
        w,
        c,
        num_classes,
        records,
    })
}

fn blob_image(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    c: usize,
    label: u8,
    num_classes: usize,
) -> Vec<u8> {
    // class centers on a circle around the image center
    let angle = 2.0 * std::f64::consts::PI * label as f64 / num_classes as f64;
    let r = (h.min(w)) as f64 / 4.0;
    let cy = h as f64 / 2.0 + r * angle.sin() + rng.gen_range(-1.5..1.5);
    let cx = w as f64 / 2.0 + r * angle.cos() + rng.gen_range(-1.5..1.5);
    let sigma = (h.min(w)) as f64 / 8.0;
    let mut img = vec![0u8; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            let v = 230.0 * (-d2 / (2.0 * sigma * sigma)).exp() + rng.gen_range(0.0..25.0);
            for ch in 0..c {
                img[(y * w + x) * c + ch] = v.min(255.0) as u8;
            }
        }
    }
    img
}

/// Stripe frequency for class k, in cycles per image width.
pub fn stripe_frequency(label: u8) -> f64 {
    2.0 + 2.0 * label as f64
}

fn stripe_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, label: u8) -> Vec<u8> {
    let freq = stripe_frequency(label);
    let phase = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    let mut img = vec![0u8; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let t = 2.0 * std::f64::consts::PI * freq * x as f64 / w as f64 + phase;
            let v = 128.0 + 100.0 * t.sin() + rng.gen_range(-12.0..12.0);
            for ch in 0..c {
                img[(y * w + x) * c + ch] = v.clamp(0.0, 255.0) as u8;
            }
        }
    }
    img
}

fn shape_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, label: u8) -> Vec<u8> {
    let mut img: Vec<u8> = (0..h * w * c).map(|_| rng.gen_range(0..30u8)).collect();
    let size = rng.gen_range(h / 4..h / 2) as isize;
    let cy = rng.gen_range(size..h as isize - size);
    let cx = rng.gen_range(size..w as isize - size);
    let mut put = |y: isize, x: isize| {
        if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
            for ch in 0..c {
                img[(y as usize * w + x as usize) * c + ch] = 255;
            }
        }
    };
    match label % 4 {
        0 => {
            // filled square
            for y in -size / 2..=size / 2 {
                for x in -size / 2..=size / 2 {
                    put(cy + y, cx + x);
                }
            }
        }
        1 => {
            // circle outline
            for deg in 0..360 {
                let a = deg as f64 * std::f64::consts::PI / 180.0;
                put(
                    cy + (a.sin() * size as f64 / 2.0).round() as isize,
                    cx + (a.cos() * size as f64 / 2.0).round() as isize,
                );
            }
        }
        2 => {
            // cross
            for d in -size / 2..=size / 2 {
                put(cy + d, cx);
                put(cy, cx + d);
            }
        }
        _ => {
            // diagonal X
            for d in -size / 2..=size / 2 {
                put(cy + d, cx + d);
                put(cy + d, cx - d);
            }
        }
    }
    img
}

/// Analytic stripe classifier: projects each image onto the candidate stripe
/// frequencies and picks the strongest response. Independent oracle for the
/// learnability of the stripes dataset.
pub fn stripe_oracle_classify(img: &[u8], h: usize, w: usize, c: usize, num_classes: usize) -> usize {
    let mut best = (0usize, -1.0f64);
    for k in 0..num_classes {
        let freq = stripe_frequency(k as u8);
        let (mut re, mut im) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let v = img[(y * w + x) * c] as f64;
                let t = 2.0 * std::f64::consts::PI * freq * x as f64 / w as f64;
                re += v * t.cos();
                im += v * t.sin();
            }
        }
        let mag = (re * re + im * im).sqrt();
        if mag > best.1 {
            best = (k, mag);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bnds_roundtrip() {
        let ds = generate(SyntheticKind::Blobs, 10, 8, 8, 1, 2, 7).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn bnds_rejects_truncation() {
        let ds = generate(SyntheticKind::Blobs, 4, 8, 8, 1, 2, 7).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Dataset::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = generate(SyntheticKind::Shapes, 12, 16, 16, 1, 3, 42).unwrap();
        let b = generate(SyntheticKind::Shapes, 12, 16, 16, 1, 3, 42).unwrap();
        assert_eq!(a, b);
        let c = generate(SyntheticKind::Shapes, 12, 16, 16, 1, 3, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn stripes_learnable_by_frequency_oracle() {
        let ds = generate(SyntheticKind::Stripes, 100, 28, 28, 1, 4, 5).unwrap();
        let correct = ds
            .records
            .iter()
            .filter(|(img, label)| {
                stripe_oracle_classify(img, 28, 28, 1, 4) == *label as usize
            })
            .count();
        assert!(correct >= 90, "oracle classified only {correct}/100");
    }

    #[test]
    fn generate_rejects_bad_config() {
        assert!(generate(SyntheticKind::Blobs, 10, 8, 8, 1, 1, 0).is_err());
        assert!(generate(SyntheticKind::Shapes, 10, 8, 8, 1, 7, 0).is_err());
    }
}
