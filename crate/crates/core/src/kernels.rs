//! Slice-level numeric kernels behind the autograd ops.
//!
//! Everything here works on raw row-major buffers with explicit dimensions;
//! shape validation happens one level up in [`crate::autograd`].

/// Upper bound on the im2col buffer, in elements.
const IM2COL_BUDGET: usize = 1 << 20;

/// `c = alpha * a·b + beta * c` for strided matrices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, rs: usize, cs: usize| {
        (rows - 1) * rs + (cols.max(1) - 1) * cs + 1
    };
    if k > 0 {
        assert!(a.len() >= extent(m, k, rsa, csa), "gemm: A too short");
        assert!(b.len() >= extent(k, n, rsb, csb), "gemm: B too short");
    }
    assert!(c.len() >= extent(m, n, rsc, csc), "gemm: C too short");
    // SAFETY: the asserts above keep every strided access in bounds, and `c`
    // is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of a stride-1 square-kernel convolution on one sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    fn rows_per_chunk(&self) -> usize {
        let per_row = self.cin * self.k * self.k * self.out_w();
        (IM2COL_BUDGET / per_row.max(1)).clamp(1, self.out_h())
    }

    /// Fills `cols` (shape `cin·k·k × rows·out_w`) for output rows `r0..r0+rows`.
    fn im2col(&self, x: &[f64], r0: usize, rows: usize, cols: &mut [f64]) {
        let (k, pad, wo) = (self.k, self.pad, self.out_w());
        let ncols = rows * wo;
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * ncols..][..ncols];
                    for r in 0..rows {
                        let dst = &mut row[r * wo..(r + 1) * wo];
                        let iy = (r0 + r + ky) as isize - pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..][..self.w];
                        let (lo, hi) = valid_range(kx, pad, self.w, wo);
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        if lo < hi {
                            let off = lo + kx - pad;
                            dst[lo..hi].copy_from_slice(&src[off..off + (hi - lo)]);
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into the input gradient `dx`.
    fn col2im(&self, cols: &[f64], r0: usize, rows: usize, dx: &mut [f64]) {
        let (k, pad, wo) = (self.k, self.pad, self.out_w());
        let ncols = rows * wo;
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * ncols..][..ncols];
                    for r in 0..rows {
                        let iy = (r0 + r + ky) as isize - pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let (lo, hi) = valid_range(kx, pad, self.w, wo);
                        if lo >= hi {
                            continue;
                        }
                        let off = lo + kx - pad;
                        let dst = &mut plane[iy as usize * self.w + off..][..hi - lo];
                        for (d, s) in dst.iter_mut().zip(&row[r * wo + lo..r * wo + hi]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose tap `kx` lands inside a row of width `w`.
fn valid_range(kx: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).min(wo);
    let hi = (w + pad).saturating_sub(kx).min(wo);
    (lo, hi.max(lo))
}

/// Dense convolution (cross-correlation) of one sample.
///
/// `weight` is `cout × cin × k × k`; returns `cout × out_h × out_w`.
pub(crate) fn conv2d_forward(
    g: ConvGeom,
    x: &[f64],
    weight: &[f64],
    cout: usize,
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    let kk = g.cin * g.k * g.k;
    if g.k == 1 && g.pad == 0 {
        gemm(cout, g.cin, plane, weight, (kk, 1), x, (plane, 1), 0.0, out, (plane, 1));
    } else {
        let chunk = g.rows_per_chunk();
        let mut cols = vec![0.0; kk * chunk * wo];
        let mut r0 = 0;
        while r0 < ho {
            let rows = chunk.min(ho - r0);
            let ncols = rows * wo;
            g.im2col(x, r0, rows, &mut cols[..kk * ncols]);
            gemm(
                cout,
                kk,
                ncols,
                weight,
                (kk, 1),
                &cols,
                (ncols, 1),
                0.0,
                &mut out[r0 * wo..],
                (plane, 1),
            );
            r0 += rows;
        }
    }
    if let Some(b) = bias {
        for (co, bv) in b.iter().enumerate() {
            for v in &mut out[co * plane..(co + 1) * plane] {
                *v += bv;
            }
        }
    }
}

/// Backward of [`conv2d_forward`] for one sample; accumulates into the
/// provided gradient buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: ConvGeom,
    x: &[f64],
    weight: &[f64],
    cout: usize,
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    let kk = g.cin * g.k * g.k;
    if let Some(db) = db {
        for (co, d) in db.iter_mut().enumerate() {
            *d += dy[co * plane..(co + 1) * plane].iter().sum::<f64>();
        }
    }
    if g.k == 1 && g.pad == 0 {
        if let Some(dw) = dw {
            // dW += dY · Xᵀ
            gemm(cout, plane, g.cin, dy, (plane, 1), x, (1, plane), 1.0, dw, (kk, 1));
        }
        if let Some(dx) = dx {
            // dX += Wᵀ · dY
            gemm(g.cin, cout, plane, weight, (1, kk), dy, (plane, 1), 1.0, dx, (plane, 1));
        }
        return;
    }
    let chunk = g.rows_per_chunk();
    let mut cols = vec![0.0; kk * chunk * wo];
    let mut dcols = if dx.is_some() {
        vec![0.0; kk * chunk * wo]
    } else {
        Vec::new()
    };
    let mut dw = dw;
    let mut dx = dx;
    let mut r0 = 0;
    while r0 < ho {
        let rows = chunk.min(ho - r0);
        let ncols = rows * wo;
        let dy_chunk = &dy[r0 * wo..];
        if let Some(dw) = dw.as_deref_mut() {
            g.im2col(x, r0, rows, &mut cols[..kk * ncols]);
            gemm(cout, ncols, kk, dy_chunk, (plane, 1), &cols, (1, ncols), 1.0, dw, (kk, 1));
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(
                kk,
                cout,
                ncols,
                weight,
                (1, kk),
                dy_chunk,
                (plane, 1),
                0.0,
                &mut dcols,
                (ncols, 1),
            );
            g.col2im(&dcols[..kk * ncols], r0, rows, dx);
        }
        r0 += rows;
    }
}

fn pad_plane(src: &[f64], h: usize, w: usize, pad: usize, dst: &mut [f64]) {
    let wp = w + 2 * pad;
    dst.fill(0.0);
    for y in 0..h {
        dst[(y + pad) * wp + pad..][..w].copy_from_slice(&src[y * w..(y + 1) * w]);
    }
}

/// Depthwise convolution of one sample: one `k×k` filter per channel.
pub(crate) fn depthwise_forward(
    c: usize,
    g: ConvGeom,
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let (k, pad) = (g.k, g.pad);
    let (ho, wo) = (g.out_h(), g.out_w());
    let (hp, wp) = (g.h + 2 * pad, g.w + 2 * pad);
    let mut padded = vec![0.0; hp * wp];
    for ch in 0..c {
        pad_plane(&x[ch * g.h * g.w..][..g.h * g.w], g.h, g.w, pad, &mut padded);
        let kern = &weight[ch * k * k..(ch + 1) * k * k];
        let dst_plane = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        dst_plane.fill(bias.map_or(0.0, |b| b[ch]));
        for y in 0..ho {
            let dst = &mut dst_plane[y * wo..(y + 1) * wo];
            for ky in 0..k {
                let src_row = &padded[(y + ky) * wp..(y + ky + 1) * wp];
                for kx in 0..k {
                    let wv = kern[ky * k + kx];
                    for (d, s) in dst.iter_mut().zip(&src_row[kx..kx + wo]) {
                        *d += wv * s;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_backward(
    c: usize,
    g: ConvGeom,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let (k, pad) = (g.k, g.pad);
    let (ho, wo) = (g.out_h(), g.out_w());
    let (hp, wp) = (g.h + 2 * pad, g.w + 2 * pad);
    let mut padded = vec![0.0; hp * wp];
    let mut dpadded = vec![0.0; hp * wp];
    for ch in 0..c {
        let dy_plane = &dy[ch * ho * wo..(ch + 1) * ho * wo];
        if let Some(db) = db.as_deref_mut() {
            db[ch] += dy_plane.iter().sum::<f64>();
        }
        let kern = &weight[ch * k * k..(ch + 1) * k * k];
        if let Some(dw) = dw.as_deref_mut() {
            pad_plane(&x[ch * g.h * g.w..][..g.h * g.w], g.h, g.w, pad, &mut padded);
            let dkern = &mut dw[ch * k * k..(ch + 1) * k * k];
            for y in 0..ho {
                let grow = &dy_plane[y * wo..(y + 1) * wo];
                for ky in 0..k {
                    let src_row = &padded[(y + ky) * wp..(y + ky + 1) * wp];
                    for kx in 0..k {
                        let dot: f64 = grow
                            .iter()
                            .zip(&src_row[kx..kx + wo])
                            .map(|(a, b)| a * b)
                            .sum();
                        dkern[ky * k + kx] += dot;
                    }
                }
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            dpadded.fill(0.0);
            for y in 0..ho {
                let grow = &dy_plane[y * wo..(y + 1) * wo];
                for ky in 0..k {
                    let dst_row = &mut dpadded[(y + ky) * wp..(y + ky + 1) * wp];
                    for kx in 0..k {
                        let wv = kern[ky * k + kx];
                        for (d, s) in dst_row[kx..kx + wo].iter_mut().zip(grow) {
                            *d += wv * s;
                        }
                    }
                }
            }
            let dplane = &mut dx[ch * g.h * g.w..(ch + 1) * g.h * g.w];
            for y in 0..g.h {
                let src = &dpadded[(y + pad) * wp + pad..][..g.w];
                for (d, s) in dplane[y * g.w..(y + 1) * g.w].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
}

/// Source-row interpolation taps for resampling `src` samples onto `dst`
/// samples with the half-pixel (align-corners=false) convention:
/// destination `i` reads source coordinate `(i + 0.5)·src/dst − 0.5`,
/// clamped to `[0, src − 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w1: f64,
}

pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            Tap {
                i0,
                i1,
                w1: s - i0 as f64,
            }
        })
        .collect()
}

pub(crate) fn resample_plane(
    src: &[f64],
    h: usize,
    w: usize,
    rows: &[Tap],
    cols: &[Tap],
    out: &mut [f64],
) {
    let wo = cols.len();
    debug_assert_eq!(src.len(), h * w);
    for (i, ry) in rows.iter().enumerate() {
        let r0 = &src[ry.i0 * w..(ry.i0 + 1) * w];
        let r1 = &src[ry.i1 * w..(ry.i1 + 1) * w];
        let dst = &mut out[i * wo..(i + 1) * wo];
        for (d, cx) in dst.iter_mut().zip(cols) {
            let top = r0[cx.i0] * (1.0 - cx.w1) + r0[cx.i1] * cx.w1;
            let bot = r1[cx.i0] * (1.0 - cx.w1) + r1[cx.i1] * cx.w1;
            *d = top * (1.0 - ry.w1) + bot * ry.w1;
        }
    }
}

pub(crate) fn resample_plane_backward(
    dy: &[f64],
    w: usize,
    rows: &[Tap],
    cols: &[Tap],
    dx: &mut [f64],
) {
    let wo = cols.len();
    for (i, ry) in rows.iter().enumerate() {
        let g = &dy[i * wo..(i + 1) * wo];
        for (gv, cx) in g.iter().zip(cols) {
            let top = gv * (1.0 - ry.w1);
            let bot = gv * ry.w1;
            dx[ry.i0 * w + cx.i0] += top * (1.0 - cx.w1);
            dx[ry.i0 * w + cx.i1] += top * cx.w1;
            dx[ry.i1 * w + cx.i0] += bot * (1.0 - cx.w1);
            dx[ry.i1 * w + cx.i1] += bot * cx.w1;
        }
    }
}
