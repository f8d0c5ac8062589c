//! Grayscale images, binary masks, resampling and 16-bit PGM I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{height}×{width} image needs {} pixels, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    /// `1×1×H×W` tensor view for the networks.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.height, self.width], self.data.clone())
            .expect("non-empty image")
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Bilinear resampling with the half-pixel convention and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Image {
        let rows = kernels::bilinear_taps(self.height, height);
        let cols = kernels::bilinear_taps(self.width, width);
        let mut out = vec![0.0; height * width];
        kernels::resample_plane(&self.data, self.height, self.width, &rows, &cols, &mut out);
        Image {
            height,
            width,
            data: out,
        }
    }

    /// Sub-image `rows top..top+height`, `cols left..left+width`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        assert!(top + height <= self.height && left + width <= self.width);
        let mut data = Vec::with_capacity(height * width);
        for r in top..top + height {
            data.extend_from_slice(&self.data[r * self.width + left..][..width]);
        }
        Image {
            height,
            width,
            data,
        }
    }

    /// Pads to `height×width` (each at least the current size) by mirror
    /// reflection, keeping the content centered.
    pub fn reflect_pad(&self, height: usize, width: usize) -> Image {
        assert!(height >= self.height && width >= self.width);
        let top = (height - self.height) / 2;
        let left = (width - self.width) / 2;
        let mut out = Image::filled(height, width, 0.0);
        for r in 0..height {
            let sr = reflect(r as isize - top as isize, self.height);
            for c in 0..width {
                let sc = reflect(c as isize - left as isize, self.width);
                out.data[r * width + c] = self.data[sr * self.width + sc];
            }
        }
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let samples: Vec<u16> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        write_pgm16(path, self.height, self.width, &samples)
    }

    pub fn read_pgm(path: &Path) -> Result<Image> {
        let (h, w, max, samples) = read_pgm(path)?;
        Image::new(h, w, samples.iter().map(|&s| s as f64 / max as f64).collect())
    }
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{height}×{width} mask needs {} pixels, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Pixelwise `logits[0] > logits[1]` of an `N×2×H×W` tensor, sample `n`.
    pub fn from_logits(logits: &Tensor, n: usize) -> Result<Mask> {
        let (_, c, h, w) = logits.dims4()?;
        if c != 2 {
            return Err(Error::shape(format!("expected 2 logit channels, got {c}")));
        }
        let d = logits.data();
        let fg = &d[(n * 2) * h * w..][..h * w];
        let bg = &d[(n * 2 + 1) * h * w..][..h * w];
        Ok(Mask {
            height: h,
            width: w,
            data: fg.iter().zip(bg).map(|(a, b)| a > b).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// Mean `(row, col)` of the foreground, if any.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    sr += r as f64;
                    sc += c as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sr / n as f64, sc / n as f64))
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Nearest-neighbour resampling: destination `i` reads source
    /// `floor((i + 0.5)·src/dst)`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        let pick = |i: usize, src: usize, dst: usize| {
            (((i as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1)
        };
        let rows: Vec<usize> = (0..height).map(|r| pick(r, self.height, height)).collect();
        let cols: Vec<usize> = (0..width).map(|c| pick(c, self.width, width)).collect();
        Mask::from_fn(height, width, |r, c| self.get(rows[r], cols[c]))
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Mask {
        assert!(top + height <= self.height && left + width <= self.width);
        Mask::from_fn(height, width, |r, c| self.get(top + r, left + c))
    }

    /// Foreground pixels with a 4-neighbour outside the foreground or on
    /// the frame border.
    pub fn contour(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |r, c| {
            if !self.get(r, c) {
                return false;
            }
            r == 0
                || c == 0
                || r + 1 == self.height
                || c + 1 == self.width
                || !self.get(r - 1, c)
                || !self.get(r + 1, c)
                || !self.get(r, c - 1)
                || !self.get(r, c + 1)
        })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let samples: Vec<u16> = self.data.iter().map(|&b| if b { 65535 } else { 0 }).collect();
        write_pgm16(path, self.height, self.width, &samples)
    }

    /// Any non-zero sample counts as foreground.
    pub fn read_pgm(path: &Path) -> Result<Mask> {
        let (h, w, _, samples) = read_pgm(path)?;
        Mask::new(h, w, samples.iter().map(|&s| s > 0).collect())
    }
}

/// The image with the mask contour burned in at full intensity.
pub fn overlay(image: &Image, mask: &Mask) -> Image {
    assert_eq!((image.height, image.width), (mask.height, mask.width));
    let contour = mask.contour();
    let mut out = image.clone();
    for (v, &edge) in out.data.iter_mut().zip(&contour.data) {
        if edge {
            *v = 1.0;
        }
    }
    out
}

fn write_pgm16(path: &Path, height: usize, width: usize, samples: &[u16]) -> Result<()> {
    let mut buf = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for s in samples {
        buf.extend_from_slice(&s.to_be_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Parses a binary (P5) PGM with 8- or 16-bit samples.
fn read_pgm(path: &Path) -> Result<(usize, usize, u32, Vec<u32>)> {
    let bytes = fs::read(path)?;
    let bad = |what: &str| Error::format(format!("{}: {what}", path.display()));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace before the raster
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if w == 0 || h == 0 || max == 0 || max > 65535 {
        return Err(bad("bad dimensions or maxval"));
    }
    let bps = if max > 255 { 2 } else { 1 };
    let raster = bytes.get(pos..).ok_or_else(|| bad("missing raster"))?;
    if raster.len() < w * h * bps {
        return Err(bad("truncated raster"));
    }
    let samples = if bps == 2 {
        raster[..w * h * 2]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
            .collect()
    } else {
        raster[..w * h].iter().map(|&b| b as u32).collect()
    };
    Ok((h, w, max as u32, samples))
}
