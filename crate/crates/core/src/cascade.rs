//! Coarse-to-fine inference: preprocess the frame, localize the brain with
//! one network, crop a window around it, segment the crop with a second
//! network and paste the result back into the frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::net::Network;
use crate::par;
use crate::phantom::SegSample;

/// Frame geometry. Inputs are trimmed to at most `edge_crop` per side,
/// resized to `resize_to`, and the fine stage sees `crop_to` windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySpec {
    pub edge_crop: usize,
    pub resize_to: usize,
    pub crop_to: usize,
}

impl Default for GeometrySpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl GeometrySpec {
    pub fn desk() -> Self {
        Self {
            edge_crop: 192,
            resize_to: 128,
            crop_to: 64,
        }
    }

    pub fn paper() -> Self {
        Self {
            edge_crop: 768,
            resize_to: 512,
            crop_to: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resize_to == 0 || self.resize_to % 16 != 0 {
            return Err(Error::config(format!(
                "resize_to must be a positive multiple of 16, got {}",
                self.resize_to
            )));
        }
        if 2 * self.crop_to != self.resize_to {
            return Err(Error::config(format!(
                "crop_to must be half of resize_to, got {} and {}",
                self.crop_to, self.resize_to
            )));
        }
        if self.edge_crop == 0 {
            return Err(Error::config("edge_crop must be positive"));
        }
        Ok(())
    }
}

/// A preprocessed frame. `constant` is set when the input had no
/// intensity range and was mapped to all zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed {
    pub image: Image,
    pub constant: bool,
}

/// Center-crop and square-up plan shared by images and masks.
#[derive(Clone, Copy, Debug)]
struct Framing {
    top: usize,
    left: usize,
    height: usize,
    width: usize,
    side: usize,
}

impl Framing {
    fn new(height: usize, width: usize, edge_crop: usize) -> Self {
        let ch = height.min(edge_crop);
        let cw = width.min(edge_crop);
        Self {
            top: (height - ch) / 2,
            left: (width - cw) / 2,
            height: ch,
            width: cw,
            side: ch.max(cw),
        }
    }
}

fn frame_image(raw: &Image, geo: &GeometrySpec) -> Image {
    let f = Framing::new(raw.height(), raw.width(), geo.edge_crop);
    let mut img = raw.crop(f.top, f.left, f.height, f.width);
    if f.height != f.width {
        img = img.reflect_pad(f.side, f.side);
    }
    if f.side != geo.resize_to {
        img = img.resize_bilinear(geo.resize_to, geo.resize_to);
    }
    img
}

/// Trims edges beyond `edge_crop`, reflect-pads a non-square remainder to a
/// square, resizes bilinearly to `resize_to` and min-max normalizes.
pub fn preprocess(raw: &Image, geo: &GeometrySpec) -> Result<Preprocessed> {
    if raw.is_empty() {
        return Err(Error::shape("cannot preprocess an empty image"));
    }
    let mut img = frame_image(raw, geo);
    let (lo, hi) = img.min_max();
    let constant = !(hi > lo);
    if constant {
        log::warn!("constant {}×{} image normalized to zeros", raw.height(), raw.width());
        img.data_mut().fill(0.0);
    } else {
        let span = hi - lo;
        for v in img.data_mut() {
            *v = (*v - lo) / span;
        }
    }
    Ok(Preprocessed {
        image: img,
        constant,
    })
}

/// Applies the geometric part of [`preprocess`] to a mask, with
/// nearest-neighbour resizing.
pub fn preprocess_mask(raw: &Mask, geo: &GeometrySpec) -> Result<Mask> {
    if raw.height() == 0 || raw.width() == 0 {
        return Err(Error::shape("cannot preprocess an empty mask"));
    }
    let f = Framing::new(raw.height(), raw.width(), geo.edge_crop);
    let mut m = raw.crop(f.top, f.left, f.height, f.width);
    if f.height != f.width {
        let as_image = Image::new(m.height(), m.width(), m.as_f64())?;
        let padded = as_image.reflect_pad(f.side, f.side);
        m = Mask::new(f.side, f.side, padded.data().iter().map(|&v| v > 0.5).collect())?;
    }
    Ok(m.resize_nearest(geo.resize_to, geo.resize_to))
}

/// A square window of side `side` inside a `frame_height×frame_width` frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub center_row: usize,
    pub center_col: usize,
    pub side: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    /// The localization mask was empty and the frame center was used.
    pub fallback: bool,
}

impl CropWindow {
    /// Window of side `side` around `(row, col)`, shifted to lie inside the
    /// frame.
    pub fn around(row: usize, col: usize, side: usize, frame: (usize, usize)) -> Self {
        assert!(side <= frame.0 && side <= frame.1, "window larger than frame");
        let half = side / 2;
        Self {
            center_row: row.clamp(half, frame.0 - (side - half)),
            center_col: col.clamp(half, frame.1 - (side - half)),
            side,
            frame_height: frame.0,
            frame_width: frame.1,
            fallback: false,
        }
    }

    pub fn top(&self) -> usize {
        self.center_row - self.side / 2
    }

    pub fn left(&self) -> usize {
        self.center_col - self.side / 2
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top()..self.top() + self.side).contains(&row)
            && (self.left()..self.left() + self.side).contains(&col)
    }

    pub fn crop_image(&self, img: &Image) -> Image {
        img.crop(self.top(), self.left(), self.side, self.side)
    }

    pub fn crop_mask(&self, m: &Mask) -> Mask {
        m.crop(self.top(), self.left(), self.side, self.side)
    }

    /// Writes `crop` into a zero frame at this window.
    pub fn paste(&self, crop: &Mask) -> Mask {
        assert_eq!((crop.height(), crop.width()), (self.side, self.side));
        let (top, left) = (self.top(), self.left());
        Mask::from_fn(self.frame_height, self.frame_width, |r, c| {
            self.contains(r, c) && crop.get(r - top, c - left)
        })
    }
}

/// Window of side `side` centred on the rounded foreground centroid of
/// `mask`, or on the frame centre when the mask is empty.
pub fn compute_center(mask: &Mask, side: usize) -> CropWindow {
    let frame = (mask.height(), mask.width());
    match mask.centroid() {
        Some((r, c)) => CropWindow::around(r.round() as usize, c.round() as usize, side, frame),
        None => {
            log::warn!("empty localization mask, using the frame centre");
            CropWindow {
                fallback: true,
                ..CropWindow::around(frame.0 / 2, frame.1 / 2, side, frame)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeResult {
    pub loc_mask: Mask,
    pub window: CropWindow,
    pub fine_mask_crop: Mask,
    pub fine_mask_full: Mask,
    pub constant_input: bool,
}

/// One JSON line per segmented input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeRecord {
    pub id: String,
    pub top: usize,
    pub left: usize,
    pub side: usize,
    pub center_row: usize,
    pub center_col: usize,
    pub fallback: bool,
    pub constant_input: bool,
    pub foreground_pixels: usize,
}

impl CascadeRecord {
    pub fn new(id: &str, result: &CascadeResult) -> Self {
        let w = &result.window;
        Self {
            id: id.to_string(),
            top: w.top(),
            left: w.left(),
            side: w.side,
            center_row: w.center_row,
            center_col: w.center_col,
            fallback: w.fallback,
            constant_input: result.constant_input,
            foreground_pixels: result.fine_mask_full.count(),
        }
    }
}

fn check_input_size(net: &Network, expected: usize, role: &str) -> Result<()> {
    let got = net.config().input_size;
    if got != expected {
        return Err(Error::shape(format!(
            "{role} network expects {got}×{got} input, geometry gives {expected}×{expected}"
        )));
    }
    Ok(())
}

fn predict_mask(net: &Network, img: &Image) -> Result<Mask> {
    Mask::from_logits(&net.predict_logits(&img.to_tensor())?, 0)
}

/// Localize with `loc`, crop around the predicted centroid, segment the crop
/// with `seg` and paste back.
pub fn run_cascade(
    loc: &Network,
    seg: &Network,
    raw: &Image,
    geo: &GeometrySpec,
) -> Result<CascadeResult> {
    geo.validate()?;
    check_input_size(loc, geo.resize_to, "localization")?;
    check_input_size(seg, geo.crop_to, "segmentation")?;
    let pre = preprocess(raw, geo)?;
    let loc_mask = predict_mask(loc, &pre.image)?;
    let window = compute_center(&loc_mask, geo.crop_to);
    finish(seg, &pre, loc_mask, window)
}

/// The fine stage for a known window, e.g. one centred on ground truth.
pub fn run_fine_stage(
    seg: &Network,
    raw: &Image,
    window: CropWindow,
    geo: &GeometrySpec,
) -> Result<CascadeResult> {
    geo.validate()?;
    check_input_size(seg, geo.crop_to, "segmentation")?;
    let pre = preprocess(raw, geo)?;
    let loc_mask = Mask::empty(geo.resize_to, geo.resize_to);
    finish(seg, &pre, loc_mask, window)
}

fn finish(
    seg: &Network,
    pre: &Preprocessed,
    loc_mask: Mask,
    window: CropWindow,
) -> Result<CascadeResult> {
    let fine_mask_crop = predict_mask(seg, &window.crop_image(&pre.image))?;
    let fine_mask_full = window.paste(&fine_mask_crop);
    Ok(CascadeResult {
        loc_mask,
        window,
        fine_mask_crop,
        fine_mask_full,
        constant_input: pre.constant,
    })
}

/// Single-stage segmentation of the whole resized frame.
pub fn run_full_frame(seg: &Network, raw: &Image, geo: &GeometrySpec) -> Result<Mask> {
    geo.validate()?;
    check_input_size(seg, geo.resize_to, "full-frame")?;
    predict_mask(seg, &preprocess(raw, geo)?.image)
}

/// A training or evaluation pair in network coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
}

/// Preprocesses raw samples to `resize_to` frames.
pub fn frame_examples(samples: &[SegSample], geo: &GeometrySpec) -> Result<Vec<LabeledImage>> {
    par::map(samples, |s| {
        Ok(LabeledImage {
            id: s.id.clone(),
            image: preprocess(&s.image, geo)?.image,
            mask: preprocess_mask(&s.mask, geo)?,
        })
    })
    .into_iter()
    .collect()
}

/// Ground-truth-centred `crop_to` windows of preprocessed frames, the
/// fine-stage training set.
pub fn crop_examples(frames: &[LabeledImage], geo: &GeometrySpec) -> Vec<LabeledImage> {
    frames
        .iter()
        .map(|f| {
            let w = compute_center(&f.mask, geo.crop_to);
            LabeledImage {
                id: f.id.clone(),
                image: w.crop_image(&f.image),
                mask: w.crop_mask(&f.mask),
            }
        })
        .collect()
}

/// Returns `frames` followed by one zoomed copy of each: the ground-truth
/// centred crop resized back up to the full frame.
pub fn refeed_samples(frames: &[LabeledImage], geo: &GeometrySpec) -> Vec<LabeledImage> {
    let n = geo.resize_to;
    let zoomed = crop_examples(frames, geo).into_iter().map(|c| LabeledImage {
        id: format!("{}_refeed", c.id),
        image: c.image.resize_bilinear(n, n),
        mask: c.mask.resize_nearest(n, n),
    });
    frames.iter().cloned().chain(zoomed).collect()
}
