//! Lossy feature codec: uniform quantization, channel tiling, and a
//! JPEG-like 8x8 DCT block coder with run-length + Elias-gamma prefix coding.
//!
//! The bitstream is self-defined (not interoperable with standard JPEG);
//! client and server share this single implementation so the transmitted
//! feature reconstructs bit-exactly on both sides.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use std::sync::OnceLock;

pub const BLOCK: usize = 8;
const MAGIC: &[u8; 4] = b"BNF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodecParams {
    /// Bits per quantized sample, 1..=16.
    pub bits: u8,
    /// Quality in 1..=100; scales the quantization table.
    pub quality: u8,
}

impl CodecParams {
    pub fn new(bits: u8, quality: u8) -> Result<Self> {
        if !(1..=16).contains(&bits) {
            return Err(Error::InvalidConfig(format!("bits {} not in 1..=16", bits)));
        }
        if !(1..=100).contains(&quality) {
            return Err(Error::InvalidConfig(format!(
                "quality {} not in 1..=100",
                quality
            )));
        }
        Ok(CodecParams { bits, quality })
    }
}

impl Default for CodecParams {
    fn default() -> Self {
        CodecParams {
            bits: 8,
            quality: 20,
        }
    }
}

// ---------------------------------------------------------------------------
// Quantizer
// ---------------------------------------------------------------------------

/// Uniform quantizer to unsigned n-bit integers.
///
/// `F~ = round((F - min) / (max - min) * (2^n - 1))`, half away from zero.
/// A constant input (max == min) maps to all zeros.
pub fn quantize(data: &[f64], bits: u8) -> (Vec<u16>, f64, f64) {
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let levels = ((1u32 << bits) - 1) as f64;
    if hi <= lo {
        return (vec![0; data.len()], lo, hi);
    }
    let q = data
        .iter()
        .map(|&v| (((v - lo) / (hi - lo)) * levels).round() as u16)
        .collect();
    (q, lo, hi)
}

/// Inverse of [`quantize`]: `F^ = min + F~ / (2^n - 1) * (max - min)`.
pub fn dequantize(q: &[u16], lo: f64, hi: f64, bits: u8) -> Vec<f64> {
    let levels = ((1u32 << bits) - 1) as f64;
    if hi <= lo {
        return vec![lo; q.len()];
    }
    q.iter()
        .map(|&v| lo + (v as f64 / levels) * (hi - lo))
        .collect()
}

// ---------------------------------------------------------------------------
// Channel tiling
// ---------------------------------------------------------------------------

/// Grid dimensions (grid_w, grid_h) for `c` channels, padded to the next
/// power of two: width 2^ceil(log2(C)/2), height 2^floor(log2(C)/2).
pub fn tile_grid(c: usize) -> (usize, usize) {
    let c_pad = c.next_power_of_two();
    let log2 = c_pad.trailing_zeros() as usize;
    let gw = 1usize << log2.div_ceil(2);
    let gh = 1usize << (log2 / 2);
    (gw, gh)
}

/// Rearrange a (h, w, c) integer tensor into a single tiled image.
///
/// Channel k occupies grid cell (k mod grid_w, k div grid_w); pad tiles
/// beyond c are zero. Returns (image, img_w, img_h).
pub fn tile(q: &[u16], h: usize, w: usize, c: usize) -> (Vec<u16>, usize, usize) {
    let (gw, gh) = tile_grid(c);
    let img_w = gw * w;
    let img_h = gh * h;
    let mut img = vec![0u16; img_w * img_h];
    for k in 0..c {
        let cell_x = (k % gw) * w;
        let cell_y = (k / gw) * h;
        for y in 0..h {
            for x in 0..w {
                img[(cell_y + y) * img_w + cell_x + x] = q[(y * w + x) * c + k];
            }
        }
    }
    (img, img_w, img_h)
}

/// Inverse of [`tile`]; pad tiles are discarded.
pub fn untile(img: &[u16], img_w: usize, img_h: usize, h: usize, w: usize, c: usize) -> Result<Vec<u16>> {
    let (gw, gh) = tile_grid(c);
    if img_w != gw * w || img_h != gh * h || img.len() != img_w * img_h {
        return Err(Error::InvalidConfig(format!(
            "tiled image {}x{} inconsistent with feature ({}, {}, {})",
            img_w, img_h, h, w, c
        )));
    }
    let mut q = vec![0u16; h * w * c];
    for k in 0..c {
        let cell_x = (k % gw) * w;
        let cell_y = (k / gw) * h;
        for y in 0..h {
            for x in 0..w {
                q[(y * w + x) * c + k] = img[(cell_y + y) * img_w + cell_x + x];
            }
        }
    }
    Ok(q)
}

// ---------------------------------------------------------------------------
// 8x8 DCT block coder
// ---------------------------------------------------------------------------

/// Base luminance quantization table (row-major).
const BASE_QTABLE: [u32; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Quality-scaled quantization table; entries clamped to >= 1.
pub fn scaled_qtable(quality: u8) -> [u32; 64] {
    let q = quality.clamp(1, 100) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut t = [0u32; 64];
    for (i, &b) in BASE_QTABLE.iter().enumerate() {
        t[i] = ((b * scale + 50) / 100).max(1);
    }
    t
}

fn zigzag_order() -> &'static [usize; 64] {
    static ZZ: OnceLock<[usize; 64]> = OnceLock::new();
    ZZ.get_or_init(|| {
        let mut order = [0usize; 64];
        let (mut y, mut x) = (0isize, 0isize);
        let mut up = true;
        for slot in order.iter_mut() {
            *slot = (y * 8 + x) as usize;
            if up {
                if x == 7 {
                    y += 1;
                    up = false;
                } else if y == 0 {
                    x += 1;
                    up = false;
                } else {
                    x += 1;
                    y -= 1;
                }
            } else if y == 7 {
                x += 1;
                up = true;
            } else if x == 0 {
                y += 1;
                up = true;
            } else {
                x -= 1;
                y += 1;
            }
        }
        order
    })
}

fn dct_basis() -> &'static [f64; 64] {
    static TBL: OnceLock<[f64; 64]> = OnceLock::new();
    TBL.get_or_init(|| {
        let mut t = [0.0f64; 64];
        for u in 0..8 {
            let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for x in 0..8 {
                t[u * 8 + x] =
                    cu * ((2.0 * x as f64 + 1.0) * u as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        t
    })
}

/// 2-D orthonormal DCT-II of one 8x8 block.
fn dct2d(block: &[f64; 64]) -> [f64; 64] {
    let b = dct_basis();
    let mut tmp = [0.0f64; 64];
    // rows
    for y in 0..8 {
        for u in 0..8 {
            let mut acc = 0.0;
            for x in 0..8 {
                acc += block[y * 8 + x] * b[u * 8 + x];
            }
            tmp[y * 8 + u] = acc;
        }
    }
    let mut out = [0.0f64; 64];
    // columns
    for v in 0..8 {
        for u in 0..8 {
            let mut acc = 0.0;
            for y in 0..8 {
                acc += tmp[y * 8 + u] * b[v * 8 + y];
            }
            out[v * 8 + u] = acc;
        }
    }
    out
}

/// Inverse of [`dct2d`].
fn idct2d(coeff: &[f64; 64]) -> [f64; 64] {
    let b = dct_basis();
    let mut tmp = [0.0f64; 64];
    for u in 0..8 {
        for y in 0..8 {
            let mut acc = 0.0;
            for v in 0..8 {
                acc += coeff[v * 8 + u] * b[v * 8 + y];
            }
            tmp[y * 8 + u] = acc;
        }
    }
    let mut out = [0.0f64; 64];
    for y in 0..8 {
        for x in 0..8 {
            let mut acc = 0.0;
            for u in 0..8 {
                acc += tmp[y * 8 + u] * b[u * 8 + x];
            }
            out[y * 8 + x] = acc;
        }
    }
    out
}

struct BitWriter {
    bytes: Vec<u8>,
    cur: u8,
    nbits: u8,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter {
            bytes: Vec::new(),
            cur: 0,
            nbits: 0,
        }
    }

    fn push_bit(&mut self, bit: bool) {
        self.cur = (self.cur << 1) | bit as u8;
        self.nbits += 1;
        if self.nbits == 8 {
            self.bytes.push(self.cur);
            self.cur = 0;
            self.nbits = 0;
        }
    }

    /// Elias-gamma code for u >= 1.
    fn put_gamma(&mut self, u: u64) {
        debug_assert!(u >= 1);
        let n = 63 - u.leading_zeros();
        for _ in 0..n {
            self.push_bit(false);
        }
        for i in (0..=n).rev() {
            self.push_bit((u >> i) & 1 == 1);
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.nbits > 0 {
            self.cur <<= 8 - self.nbits;
            self.bytes.push(self.cur);
        }
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    bit: u8,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, pos: 0, bit: 0 }
    }

    fn next_bit(&mut self) -> Result<bool> {
        if self.pos >= self.bytes.len() {
            return Err(Error::CorruptStream {
                offset: self.pos,
                reason: "unexpected end of payload".into(),
            });
        }
        let b = (self.bytes[self.pos] >> (7 - self.bit)) & 1 == 1;
        self.bit += 1;
        if self.bit == 8 {
            self.bit = 0;
            self.pos += 1;
        }
        Ok(b)
    }

    fn get_gamma(&mut self) -> Result<u64> {
        let mut n = 0u32;
        while !self.next_bit()? {
            n += 1;
            if n > 63 {
                return Err(Error::CorruptStream {
                    offset: self.pos,
                    reason: "gamma code prefix too long".into(),
                });
            }
        }
        let mut u = 1u64;
        for _ in 0..n {
            u = (u << 1) | self.next_bit()? as u64;
        }
        Ok(u)
    }
}

// signed mappings for gamma coding
fn map_dc(v: i64) -> u64 {
    if v >= 0 {
        (2 * v + 1) as u64
    } else {
        (-2 * v) as u64
    }
}

fn unmap_dc(u: u64) -> i64 {
    if u % 2 == 1 {
        ((u - 1) / 2) as i64
    } else {
        -((u / 2) as i64)
    }
}

fn map_ac(v: i64) -> u64 {
    debug_assert!(v != 0);
    if v > 0 {
        (2 * v) as u64
    } else {
        (-2 * v + 1) as u64
    }
}

fn unmap_ac(u: u64) -> i64 {
    if u % 2 == 0 {
        (u / 2) as i64
    } else {
        -(((u - 1) / 2) as i64)
    }
}

/// Encode a tiled n-bit image into the block-coded payload.
///
/// Per block: level shift by 2^(n-1), 2-D DCT, divide by the quality-scaled
/// table, round, zigzag, then run-length of zeros with gamma-coded symbols.
/// Edge blocks are padded by edge replication.
pub fn encode_image(img: &[u16], img_w: usize, img_h: usize, params: CodecParams) -> Vec<u8> {
    let qt = scaled_qtable(params.quality);
    let zz = zigzag_order();
    let shift = (1i64 << (params.bits - 1)) as f64;
    let bw = img_w.div_ceil(BLOCK);
    let bh = img_h.div_ceil(BLOCK);
    let mut out = BitWriter::new();
    let mut prev_dc = 0i64;
    for by in 0..bh {
        for bx in 0..bw {
            let mut block = [0.0f64; 64];
            for y in 0..8 {
                // edge replication for partial blocks
                let sy = (by * BLOCK + y).min(img_h - 1);
                for x in 0..8 {
                    let sx = (bx * BLOCK + x).min(img_w - 1);
                    block[y * 8 + x] = img[sy * img_w + sx] as f64 - shift;
                }
            }
            let coeff = dct2d(&block);
            let mut quantized = [0i64; 64];
            for i in 0..64 {
                quantized[i] = (coeff[i] / qt[i] as f64).round() as i64;
            }
            // DC: difference from previous block
            let dc = quantized[zz[0]];
            out.put_gamma(map_dc(dc - prev_dc));
            prev_dc = dc;
            // AC: (zero-run, value) pairs, EOB = gamma(1)
            let mut run = 0u64;
            for &zi in &zz[1..] {
                let v = quantized[zi];
                if v == 0 {
                    run += 1;
                } else {
                    out.put_gamma(run + 2);
                    out.put_gamma(map_ac(v));
                    run = 0;
                }
            }
            out.put_gamma(1); // EOB
        }
    }
    out.finish()
}

/// Inverse of [`encode_image`]; output samples clamped to [0, 2^n - 1].
pub fn decode_image(
    payload: &[u8],
    img_w: usize,
    img_h: usize,
    params: CodecParams,
) -> Result<Vec<u16>> {
    let qt = scaled_qtable(params.quality);
    let zz = zigzag_order();
    let shift = (1i64 << (params.bits - 1)) as f64;
    let max_sample = ((1u32 << params.bits) - 1) as f64;
    let bw = img_w.div_ceil(BLOCK);
    let bh = img_h.div_ceil(BLOCK);
    let mut img = vec![0u16; img_w * img_h];
    let mut rd = BitReader::new(payload);
    let mut prev_dc = 0i64;
    for by in 0..bh {
        for bx in 0..bw {
            let mut quantized = [0i64; 64];
            let dc = prev_dc + unmap_dc(rd.get_gamma()?);
            prev_dc = dc;
            quantized[zz[0]] = dc;
            let mut pos = 1usize;
            loop {
                let m = rd.get_gamma()?;
                if m == 1 {
                    break; // EOB
                }
                let run = (m - 2) as usize;
                pos += run;
                if pos > 63 {
                    return Err(Error::CorruptStream {
                        offset: rd.pos,
                        reason: "zero run past end of block".into(),
                    });
                }
                quantized[zz[pos]] = unmap_ac(rd.get_gamma()?);
                pos += 1;
                if pos > 64 {
                    return Err(Error::CorruptStream {
                        offset: rd.pos,
                        reason: "coefficient index past end of block".into(),
                    });
                }
            }
            let mut coeff = [0.0f64; 64];
            for i in 0..64 {
                coeff[i] = (quantized[i] * qt[i] as i64) as f64;
            }
            let pixels = idct2d(&coeff);
            for y in 0..8 {
                let dy = by * BLOCK + y;
                if dy >= img_h {
                    continue;
                }
                for x in 0..8 {
                    let dx = bx * BLOCK + x;
                    if dx >= img_w {
                        continue;
                    }
                    let v = (pixels[y * 8 + x] + shift).round().clamp(0.0, max_sample);
                    img[dy * img_w + dx] = v as u16;
                }
            }
        }
    }
    Ok(img)
}

// ---------------------------------------------------------------------------
// Wire format
// ---------------------------------------------------------------------------

/// A transmitted feature: header with shape and dequantization range plus
/// the entropy-coded payload.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFeature {
    pub bits: u8,
    pub quality: u8,
    pub w: u16,
    pub h: u16,
    pub c: u16,
    /// Tiled-image dims before 8x8 block padding.
    pub crop_w: u16,
    pub crop_h: u16,
    pub min: f32,
    pub max: f32,
    pub payload: Vec<u8>,
}

pub const HEADER_LEN: usize = 4 + 1 + 1 + 2 + 2 + 2 + 2 + 2 + 4 + 4 + 4;

impl EncodedFeature {
    /// Serialize as the little-endian "BNF1" layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(self.bits);
        out.push(self.quality);
        out.extend_from_slice(&self.w.to_le_bytes());
        out.extend_from_slice(&self.h.to_le_bytes());
        out.extend_from_slice(&self.c.to_le_bytes());
        out.extend_from_slice(&self.crop_w.to_le_bytes());
        out.extend_from_slice(&self.crop_h.to_le_bytes());
        out.extend_from_slice(&self.min.to_le_bytes());
        out.extend_from_slice(&self.max.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |offset: usize, reason: &str| Error::CorruptStream {
            offset,
            reason: reason.to_string(),
        };
        if bytes.len() < HEADER_LEN {
            return Err(corrupt(bytes.len(), "truncated header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(corrupt(0, "bad magic"));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let f32_at =
            |i: usize| f32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        let bits = bytes[4];
        let quality = bytes[5];
        if !(1..=16).contains(&bits) {
            return Err(corrupt(4, "bits out of range"));
        }
        if !(1..=100).contains(&quality) {
            return Err(corrupt(5, "quality out of range"));
        }
        let w = u16_at(6);
        let h = u16_at(8);
        let c = u16_at(10);
        if w == 0 || h == 0 || c == 0 {
            return Err(corrupt(6, "zero feature dimension"));
        }
        let crop_w = u16_at(12);
        let crop_h = u16_at(14);
        let min = f32_at(16);
        let max = f32_at(20);
        if !min.is_finite() || !max.is_finite() {
            return Err(corrupt(16, "non-finite dequantization range"));
        }
        let payload_len = u32::from_le_bytes([bytes[24], bytes[25], bytes[26], bytes[27]]) as usize;
        if bytes.len() != HEADER_LEN + payload_len {
            return Err(corrupt(24, "payload length mismatch"));
        }
        let (gw, gh) = tile_grid(c as usize);
        if crop_w as usize != gw * w as usize || crop_h as usize != gh * h as usize {
            return Err(corrupt(12, "tiled-image dims inconsistent with shape"));
        }
        Ok(EncodedFeature {
            bits,
            quality,
            w,
            h,
            c,
            crop_w,
            crop_h,
            min,
            max,
            payload: bytes[HEADER_LEN..].to_vec(),
        })
    }
}

/// Encode a single-sample feature tensor (batch must be 1).
pub fn encode_feature(feature: &Tensor, params: CodecParams) -> Result<EncodedFeature> {
    if feature.shape.batch != 1 {
        return Err(Error::InvalidConfig(format!(
            "encode_feature expects batch 1, got {}",
            feature.shape.batch
        )));
    }
    let (h, w, c) = feature.shape.hwc();
    if w > u16::MAX as usize || h > u16::MAX as usize || c > u16::MAX as usize {
        return Err(Error::InvalidConfig("feature dims exceed u16".into()));
    }
    let (q, lo, hi) = quantize(&feature.data, params.bits);
    let (img, img_w, img_h) = tile(&q, h, w, c);
    let payload = encode_image(&img, img_w, img_h, params);
    Ok(EncodedFeature {
        bits: params.bits,
        quality: params.quality,
        w: w as u16,
        h: h as u16,
        c: c as u16,
        crop_w: img_w as u16,
        crop_h: img_h as u16,
        min: lo as f32,
        max: hi as f32,
        payload,
    })
}

/// Invert [`encode_feature`]: decode, untile, dequantize.
pub fn decode_feature(enc: &EncodedFeature) -> Result<Tensor> {
    let (h, w, c) = (enc.h as usize, enc.w as usize, enc.c as usize);
    let params = CodecParams::new(enc.bits, enc.quality)?;
    let img = decode_image(&enc.payload, enc.crop_w as usize, enc.crop_h as usize, params)?;
    let q = untile(&img, enc.crop_w as usize, enc.crop_h as usize, h, w, c)?;
    let data = dequantize(&q, enc.min as f64, enc.max as f64, enc.bits);
    Tensor::from_vec(Shape::new(1, h, w, c), data)
}

/// Forward path of the codec node: exactly what the runtime transmits.
/// Returns the reconstructed tensor and the encoded size in bytes.
pub fn roundtrip_feature(feature: &Tensor, params: CodecParams) -> Result<(Tensor, usize)> {
    let enc = encode_feature(feature, params)?;
    let size = enc.to_bytes().len();
    let dec = decode_feature(&enc)?;
    Ok((dec, size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantize_example_vectors() {
        let (q, lo, hi) = quantize(&[0.0, 0.5, 1.0], 8);
        assert_eq!(q, vec![0, 128, 255]);
        assert_eq!((lo, hi), (0.0, 1.0));

        let (q, lo, hi) = quantize(&[3.5, 3.5, 3.5], 8);
        assert_eq!(q, vec![0, 0, 0]);
        assert_eq!((lo, hi), (3.5, 3.5));

        let (q, _, _) = quantize(&[-1.0, 0.0, 1.0, 2.0], 2);
        assert_eq!(q, vec![0, 1, 2, 3]);
    }

    #[test]
    fn dequantize_endpoints() {
        let got = dequantize(&[0, 255], -2.0, 3.0, 8);
        assert_eq!(got[0], -2.0);
        assert_eq!(got[1], 3.0);
        // constant range restored exactly
        let got = dequantize(&[0, 0], 1.25, 1.25, 8);
        assert_eq!(got, vec![1.25, 1.25]);
    }

    #[test]
    fn quantize_roundtrip_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(1..=12u8);
            let len = rng.gen_range(1..64usize);
            let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let (q, lo, hi) = quantize(&data, n);
            let back = dequantize(&q, lo, hi, n);
            let bound = (hi - lo) / (2.0 * ((1u32 << n) - 1) as f64) + 1e-12;
            for (a, b) in data.iter().zip(&back) {
                assert!((a - b).abs() <= bound, "|{} - {}| > {}", a, b, bound);
            }
        }
    }

    #[test]
    fn tile_grid_dims() {
        assert_eq!(tile_grid(256), (16, 16));
        assert_eq!(tile_grid(32), (8, 4));
        assert_eq!(tile_grid(1), (1, 1));
        assert_eq!(tile_grid(5), (4, 2)); // pad to 8
        assert_eq!(tile_grid(3), (2, 2)); // pad to 4
    }

    #[test]
    fn tile_untile_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &c in &[1usize, 2, 3, 5, 32, 256] {
            let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
            let q: Vec<u16> = (0..h * w * c).map(|_| rng.gen_range(0..256)).collect();
            let (img, iw, ih) = tile(&q, h, w, c);
            let back = untile(&img, iw, ih, h, w, c).unwrap();
            assert_eq!(q, back);
        }
    }

    #[test]
    fn untile_rejects_dim_mismatch() {
        let (img, iw, ih) = tile(&[1, 2, 3, 4], 2, 2, 1);
        assert!(untile(&img, iw + 1, ih, 2, 2, 1).is_err());
    }

    #[test]
    fn constant_image_roundtrips() {
        // the level-shift midpoint is exact at every quality
        for &q in &[1u8, 20, 55, 100] {
            let params = CodecParams::new(8, q).unwrap();
            let img = vec![128u16; 24 * 24];
            let bytes = encode_image(&img, 24, 24, params);
            let back = decode_image(&bytes, 24, 24, params).unwrap();
            assert_eq!(back, img);
        }
        // off-midpoint constants are exact once the DC step is fine enough
        for &q in &[95u8, 100] {
            let params = CodecParams::new(8, q).unwrap();
            let img = vec![137u16; 24 * 24];
            let bytes = encode_image(&img, 24, 24, params);
            let back = decode_image(&bytes, 24, 24, params).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn zero_tensor_survives() {
        let t = Tensor::zeros(Shape::new(1, 6, 6, 3));
        let (back, _) = roundtrip_feature(&t, CodecParams::default()).unwrap();
        assert_eq!(back.data, t.data);
    }

    fn smooth_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<u16> {
        // random low-frequency mixture, natural-ish statistics
        let fx = rng.gen_range(0.02..0.2);
        let fy = rng.gen_range(0.02..0.2);
        let px = rng.gen_range(0.0..6.28);
        let amp = rng.gen_range(30.0..110.0);
        (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                let v = 128.0 + amp * (fx * x + px).sin() * (fy * y).cos();
                v.round().clamp(0.0, 255.0) as u16
            })
            .collect()
    }

    #[test]
    fn near_lossless_at_quality_100() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = CodecParams::new(8, 100).unwrap();
        for _ in 0..20 {
            let img = smooth_image(&mut rng, 16, 16);
            let back = decode_image(&encode_image(&img, 16, 16, params), 16, 16, params).unwrap();
            for (a, b) in img.iter().zip(&back) {
                assert!((*a as i32 - *b as i32).abs() <= 4);
            }
        }
    }

    #[test]
    fn payload_size_monotone_in_quality() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let ladder = [1u8, 5, 10, 20, 40, 60, 80, 100];
        let mut violations = 0usize;
        let mut comparisons = 0usize;
        for _ in 0..100 {
            let img = smooth_image(&mut rng, 24, 24);
            let sizes: Vec<usize> = ladder
                .iter()
                .map(|&q| encode_image(&img, 24, 24, CodecParams::new(8, q).unwrap()).len())
                .collect();
            for win in sizes.windows(2) {
                comparisons += 1;
                if win[0] > win[1] {
                    violations += 1;
                }
            }
        }
        assert!(
            violations * 100 <= comparisons,
            "{violations}/{comparisons} monotonicity violations"
        );
    }

    #[test]
    fn reencode_stabilizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for &q in &[20u8, 100] {
            let params = CodecParams::new(8, q).unwrap();
            let img = smooth_image(&mut rng, 16, 16);
            let mut cur = decode_image(&encode_image(&img, 16, 16, params), 16, 16, params).unwrap();
            let mut stabilized = false;
            for _ in 0..8 {
                let next =
                    decode_image(&encode_image(&cur, 16, 16, params), 16, 16, params).unwrap();
                if next == cur {
                    stabilized = true;
                    break;
                }
                cur = next;
            }
            assert!(stabilized, "re-encode at q={q} did not reach a fixed point");
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let params = CodecParams::default();
        let img = vec![10u16; 16 * 16];
        let mut bytes = encode_image(&img, 16, 16, params);
        bytes.truncate(bytes.len() / 2);
        match decode_image(&bytes, 16, 16, params) {
            Err(Error::CorruptStream { .. }) => {}
            other => panic!("expected corrupt stream, got {:?}", other),
        }
    }

    #[test]
    fn feature_wire_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let shape = Shape::new(1, 7, 7, 5);
        let data: Vec<f64> = (0..shape.len()).map(|_| rng.gen_range(-1.0..4.0)).collect();
        let t = Tensor::from_vec(shape, data).unwrap();
        let enc = encode_feature(&t, CodecParams::default()).unwrap();
        let bytes = enc.to_bytes();
        let parsed = EncodedFeature::from_bytes(&bytes).unwrap();
        assert_eq!(parsed, enc);
        let dec = decode_feature(&parsed).unwrap();
        assert_eq!(dec.shape, shape);
    }

    #[test]
    fn from_bytes_rejects_garbage() {
        assert!(EncodedFeature::from_bytes(b"nope").is_err());
        let t = Tensor::filled(Shape::new(1, 4, 4, 2), 0.5);
        let mut bytes = encode_feature(&t, CodecParams::default()).unwrap().to_bytes();
        bytes[0] = b'X';
        assert!(EncodedFeature::from_bytes(&bytes).is_err());
    }
}
