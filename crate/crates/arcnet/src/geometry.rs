//! Cartesian/polar resampling with bilinear interpolation.
//!
//! Both transforms are centered on the grid center `((H-1)/2, (W-1)/2)` and
//! sample radii up to `R_max = min(H, W)/2 - 1`, which keeps every forward
//! sample inside the source image. Column `j` of a polar grid is the A-line
//! at angle `2*pi*j/theta`; row 0 sits on the center. Samples outside the
//! source domain evaluate to 0, and points beyond `R_max` in the inverse
//! transform evaluate to 0 as well.
//!
//! Because the sample locations are fixed, both transforms are linear in the
//! input values. Their adjoints (the exact gradients) scatter cotangents back
//! through the same interpolation weights; [`WarpTable`] captures the
//! weights once so the network can reuse them every step.

use crate::error::{Error, Result};
use crate::par;
use std::f64::consts::PI;

/// Multi-channel image in Cartesian coordinates, row-major per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct CartesianGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl CartesianGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels < 1 || height < 2 || width < 2 {
            return Err(Error::Invalid(format!(
                "cartesian grid needs C >= 1, H >= 2, W >= 2, got ({channels}, {height}, {width})"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "cartesian grid: {} values for {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(CartesianGrid {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        CartesianGrid::new(
            channels,
            height,
            width,
            vec![0.0; channels * height * width],
        )
        .expect("valid dims")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }

    /// Grid center in pixel coordinates.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.height as f64 - 1.0) / 2.0,
            (self.width as f64 - 1.0) / 2.0,
        )
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let pl = self.height * self.width;
        &self.data[c * pl..(c + 1) * pl]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Multi-channel grid in polar coordinates: rows are radii, columns A-lines.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarGrid {
    channels: usize,
    rho: usize,
    theta: usize,
    data: Vec<f64>,
}

impl PolarGrid {
    pub fn new(channels: usize, rho: usize, theta: usize, data: Vec<f64>) -> Result<Self> {
        if channels < 1 || rho < 1 || theta < 2 {
            return Err(Error::Invalid(format!(
                "polar grid needs C >= 1, rho >= 1, theta >= 2, got ({channels}, {rho}, {theta})"
            )));
        }
        if data.len() != channels * rho * theta {
            return Err(Error::Shape(format!(
                "polar grid: {} values for {}x{}x{}",
                data.len(),
                channels,
                rho,
                theta
            )));
        }
        Ok(PolarGrid {
            channels,
            rho,
            theta,
            data,
        })
    }

    pub fn zeros(channels: usize, rho: usize, theta: usize) -> Self {
        PolarGrid::new(channels, rho, theta, vec![0.0; channels * rho * theta]).expect("valid dims")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn rho(&self) -> usize {
        self.rho
    }
    pub fn theta(&self) -> usize {
        self.theta
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let pl = self.rho * self.theta;
        &self.data[c * pl..(c + 1) * pl]
    }

    pub fn at(&self, c: usize, r: usize, j: usize) -> f64 {
        self.data[(c * self.rho + r) * self.theta + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Outer sampling radius for a `h x w` Cartesian grid.
pub fn r_max(h: usize, w: usize) -> f64 {
    (h.min(w) as f64) / 2.0 - 1.0
}

/// Precomputed bilinear sampling weights for one warp direction.
///
/// Each output cell holds up to four source taps; taps that fall outside the
/// source domain carry weight 0. `apply` evaluates the warp on one plane,
/// `accumulate_adjoint` scatters a cotangent back through the same weights.
#[derive(Clone, Debug)]
pub struct WarpTable {
    out_rows: usize,
    out_cols: usize,
    src_len: usize,
    idx: Vec<[u32; 4]>,
    wgt: Vec<[f64; 4]>,
}

impl WarpTable {
    pub fn out_rows(&self) -> usize {
        self.out_rows
    }
    pub fn out_cols(&self) -> usize {
        self.out_cols
    }
    pub fn out_len(&self) -> usize {
        self.out_rows * self.out_cols
    }
    pub fn src_len(&self) -> usize {
        self.src_len
    }

    pub fn apply(&self, src: &[f64], dst: &mut [f64]) {
        debug_assert_eq!(src.len(), self.src_len);
        debug_assert_eq!(dst.len(), self.out_len());
        for (o, out) in dst.iter_mut().enumerate() {
            let idx = &self.idx[o];
            let wgt = &self.wgt[o];
            *out = wgt[0] * src[idx[0] as usize]
                + wgt[1] * src[idx[1] as usize]
                + wgt[2] * src[idx[2] as usize]
                + wgt[3] * src[idx[3] as usize];
        }
    }

    /// Adjoint of [`apply`]: `dsrc += W^T * dout`.
    pub fn accumulate_adjoint(&self, dout: &[f64], dsrc: &mut [f64]) {
        debug_assert_eq!(dout.len(), self.out_len());
        debug_assert_eq!(dsrc.len(), self.src_len);
        for (o, &d) in dout.iter().enumerate() {
            let idx = &self.idx[o];
            let wgt = &self.wgt[o];
            dsrc[idx[0] as usize] += wgt[0] * d;
            dsrc[idx[1] as usize] += wgt[1] * d;
            dsrc[idx[2] as usize] += wgt[2] * d;
            dsrc[idx[3] as usize] += wgt[3] * d;
        }
    }
}

fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> ([u32; 4], [f64; 4]) {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let y0i = y0 as i64;
    let x0i = x0 as i64;
    let mut idx = [0u32; 4];
    let mut wgt = [0.0f64; 4];
    let cand = [
        (y0i, x0i, (1.0 - fy) * (1.0 - fx)),
        (y0i, x0i + 1, (1.0 - fy) * fx),
        (y0i + 1, x0i, fy * (1.0 - fx)),
        (y0i + 1, x0i + 1, fy * fx),
    ];
    for (k, (yy, xx, ww)) in cand.into_iter().enumerate() {
        if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
            idx[k] = (yy as usize * w + xx as usize) as u32;
            wgt[k] = ww;
        }
    }
    (idx, wgt)
}

/// Sampling table for the forward polar transform of a `h x w` image.
pub fn polar_table(h: usize, w: usize, rho: usize, theta: usize) -> WarpTable {
    let rmax = r_max(h, w);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut idx = Vec::with_capacity(rho * theta);
    let mut wgt = Vec::with_capacity(rho * theta);
    for r in 0..rho {
        let rad = if rho == 1 {
            0.0
        } else {
            r as f64 * rmax / (rho as f64 - 1.0)
        };
        for j in 0..theta {
            let phi = 2.0 * PI * j as f64 / theta as f64;
            let sy = cy + rad * phi.sin();
            let sx = cx + rad * phi.cos();
            let (i, ww) = bilinear_taps(sy, sx, h, w);
            idx.push(i);
            wgt.push(ww);
        }
    }
    WarpTable {
        out_rows: rho,
        out_cols: theta,
        src_len: h * w,
        idx,
        wgt,
    }
}

/// Sampling table for the inverse polar transform onto a `h x w` image.
///
/// The angular coordinate interpolates circularly (column `theta - 1` wraps
/// to column 0); the radial coordinate clamps at `rho - 1`; points beyond
/// `R_max` of the output grid evaluate to 0.
pub fn cartesian_table(rho: usize, theta: usize, h: usize, w: usize) -> WarpTable {
    let rmax = r_max(h, w);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut idx = Vec::with_capacity(h * w);
    let mut wgt = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let rad = dy.hypot(dx);
            if rad > rmax + 1e-9 {
                idx.push([0; 4]);
                wgt.push([0.0; 4]);
                continue;
            }
            let rr = if rho == 1 {
                0.0
            } else {
                (rad / rmax * (rho as f64 - 1.0)).min(rho as f64 - 1.0)
            };
            let r0 = rr.floor() as usize;
            let fr = rr - r0 as f64;
            let r1 = (r0 + 1).min(rho - 1);
            let mut phi = dy.atan2(dx);
            if phi < 0.0 {
                phi += 2.0 * PI;
            }
            let jj = phi / (2.0 * PI) * theta as f64;
            let mut j0 = jj.floor() as usize;
            let mut fj = jj - j0 as f64;
            if j0 >= theta {
                j0 = 0;
                fj = 0.0;
            }
            let j1 = (j0 + 1) % theta;
            idx.push([
                (r0 * theta + j0) as u32,
                (r0 * theta + j1) as u32,
                (r1 * theta + j0) as u32,
                (r1 * theta + j1) as u32,
            ]);
            wgt.push([
                (1.0 - fr) * (1.0 - fj),
                (1.0 - fr) * fj,
                fr * (1.0 - fj),
                fr * fj,
            ]);
        }
    }
    WarpTable {
        out_rows: h,
        out_cols: w,
        src_len: rho * theta,
        idx,
        wgt,
    }
}

/// Resample a Cartesian grid onto polar coordinates.
pub fn to_polar(src: &CartesianGrid, rho: usize, theta: usize) -> Result<PolarGrid> {
    if rho < 1 || theta < 2 {
        return Err(Error::Invalid(format!(
            "polar target needs rho >= 1 and theta >= 2, got ({rho}, {theta})"
        )));
    }
    if !src.all_finite() {
        return Err(Error::Invalid("to_polar: non-finite input".into()));
    }
    let table = polar_table(src.height(), src.width(), rho, theta);
    let mut out = PolarGrid::zeros(src.channels(), rho, theta);
    let pl = rho * theta;
    par::chunks_mut_indexed(out.data_mut(), pl, |c, plane| {
        table.apply(src.channel(c), plane);
    });
    Ok(out)
}

/// Resample a polar grid back onto Cartesian coordinates.
pub fn to_cartesian(src: &PolarGrid, h: usize, w: usize) -> Result<CartesianGrid> {
    if h < 2 || w < 2 {
        return Err(Error::Invalid(format!(
            "cartesian target needs H, W >= 2, got ({h}, {w})"
        )));
    }
    if !src.all_finite() {
        return Err(Error::Invalid("to_cartesian: non-finite input".into()));
    }
    let table = cartesian_table(src.rho(), src.theta(), h, w);
    let mut out = CartesianGrid::zeros(src.channels(), h, w);
    let pl = h * w;
    par::chunks_mut_indexed(out.data_mut(), pl, |c, plane| {
        table.apply(src.channel(c), plane);
    });
    Ok(out)
}

/// Exact gradient of [`to_polar`]: scatter a polar cotangent back onto the
/// `h x w` Cartesian domain.
pub fn to_polar_adjoint(grad_out: &PolarGrid, h: usize, w: usize) -> CartesianGrid {
    let table = polar_table(h, w, grad_out.rho(), grad_out.theta());
    let mut out = CartesianGrid::zeros(grad_out.channels(), h, w);
    let pl = h * w;
    par::chunks_mut_indexed(out.data_mut(), pl, |c, plane| {
        table.accumulate_adjoint(grad_out.channel(c), plane);
    });
    out
}

/// Exact gradient of [`to_cartesian`]: scatter a Cartesian cotangent back
/// onto the `rho x theta` polar domain.
pub fn to_cartesian_adjoint(grad_out: &CartesianGrid, rho: usize, theta: usize) -> PolarGrid {
    let table = cartesian_table(rho, theta, grad_out.height(), grad_out.width());
    let mut out = PolarGrid::zeros(grad_out.channels(), rho, theta);
    let pl = rho * theta;
    par::chunks_mut_indexed(out.data_mut(), pl, |c, plane| {
        table.accumulate_adjoint(grad_out.channel(c), plane);
    });
    out
}

/// Rotate about the grid center by `angle` radians (bilinear, zero fill).
///
/// Rotating by `k * 2*pi/theta` shifts the polar transform forward by `k`
/// columns.
pub fn rotate_about_center(src: &CartesianGrid, angle: f64) -> CartesianGrid {
    let (cy, cx) = src.center();
    let (sin_a, cos_a) = angle.sin_cos();
    let h = src.height();
    let w = src.width();
    let mut out = CartesianGrid::zeros(src.channels(), h, w);
    let pl = h * w;
    par::chunks_mut_indexed(out.data_mut(), pl, |c, plane| {
        let chan = src.channel(c);
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let sy = cy + dy * cos_a - dx * sin_a;
                let sx = cx + dx * cos_a + dy * sin_a;
                let (idx, wgt) = bilinear_taps(sy, sx, h, w);
                plane[y * w + x] = wgt[0] * chan[idx[0] as usize]
                    + wgt[1] * chan[idx[1] as usize]
                    + wgt[2] * chan[idx[2] as usize]
                    + wgt[3] * chan[idx[3] as usize];
            }
        }
    });
    out
}

/// Bilinear resize with edge clamping (half-pixel centers).
pub fn resize_bilinear(src: &CartesianGrid, h_out: usize, w_out: usize) -> CartesianGrid {
    let h = src.height();
    let w = src.width();
    let mut out = CartesianGrid::zeros(src.channels(), h_out, w_out);
    let sy_scale = h as f64 / h_out as f64;
    let sx_scale = w as f64 / w_out as f64;
    let taps_1d = |t: usize, scale: f64, size: usize| -> (usize, usize, f64) {
        let s = ((t as f64 + 0.5) * scale - 0.5).clamp(0.0, size as f64 - 1.0);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(size - 1);
        (i0, i1, s - i0 as f64)
    };
    let pl = h_out * w_out;
    par::chunks_mut_indexed(out.data_mut(), pl, |c, plane| {
        let chan = src.channel(c);
        for y in 0..h_out {
            let (y0, y1, fy) = taps_1d(y, sy_scale, h);
            for x in 0..w_out {
                let (x0, x1, fx) = taps_1d(x, sx_scale, w);
                plane[y * w_out + x] = (1.0 - fy)
                    * ((1.0 - fx) * chan[y0 * w + x0] + fx * chan[y0 * w + x1])
                    + fy * ((1.0 - fx) * chan[y1 * w + x0] + fx * chan[y1 * w + x1]);
            }
        }
    });
    out
}

/// Mirror across the horizontal axis (`y -> H-1-y`), the spatial flip whose
/// polar counterpart is the exact column reversal `j -> (theta - j) % theta`.
pub fn flip_vertical(src: &CartesianGrid) -> CartesianGrid {
    let h = src.height();
    let w = src.width();
    let mut out = CartesianGrid::zeros(src.channels(), h, w);
    for c in 0..src.channels() {
        let chan = src.channel(c);
        let pl = h * w;
        let plane = &mut out.data_mut()[c * pl..(c + 1) * pl];
        for y in 0..h {
            plane[y * w..(y + 1) * w].copy_from_slice(&chan[(h - 1 - y) * w..(h - y) * w]);
        }
    }
    out
}
