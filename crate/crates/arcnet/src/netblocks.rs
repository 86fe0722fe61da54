//! Building blocks for both branches: 2-D convolutions with zero or
//! circular-in-theta padding, batch normalization, residual blocks with
//! optional strided downsampling, bilinear upsampling, 1x1 projection and
//! global average pooling over the radial axis.
//!
//! Layers do not own their parameters; they hold handles into a flat
//! [`ParamSet`] so the optimizer and the checkpoint writer can treat the
//! whole model as one named vector. Every layer implements an explicit
//! backward pass, verified against central finite differences in the tests.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{self, Tensor};

/// Padding behavior of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    /// Zero padding on both spatial axes.
    Zero,
    /// Circular padding along the second spatial axis (theta), zero along the
    /// first (radial). Only meaningful for polar-layout grids.
    CircularTheta,
}

/// Flat named storage for parameters or state buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Handle to one named tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn alloc(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let len: usize = shape.iter().product();
        let entry = ParamEntry {
            name: name.into(),
            offset: self.values.len(),
            shape: shape.to_vec(),
        };
        self.values.extend(std::iter::repeat_n(0.0, len));
        self.entries.push(entry);
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn view(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id.0];
        &self.values[e.offset..e.offset + e.len()]
    }

    pub fn view_mut(&mut self, id: ParamId) -> &mut [f64] {
        let e = self.entries[id.0].clone();
        &mut self.values[e.offset..e.offset + e.len()]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }
}

/// State buffers (running statistics) share the storage mechanics.
pub type BufferSet = ParamSet;

/// Specification of one convolution.
#[derive(Clone, Debug)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding_mode: PadMode,
    pub bias: bool,
}

impl ConvSpec {
    fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Invalid(format!(
                "conv kernel must be odd, got {}",
                self.kernel
            )));
        }
        if !(self.stride == 1 || self.stride == 2) {
            return Err(Error::Invalid(format!(
                "conv stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        Ok(())
    }
}

/// Convolution layer with same-size (stride 1) or halved (stride 2) output.
#[derive(Clone, Debug)]
pub struct Conv2d {
    spec: ConvSpec,
    weight: ParamId,
    bias: Option<ParamId>,
}

fn conv_out(size: usize, stride: usize) -> usize {
    size.div_ceil(stride)
}

impl Conv2d {
    pub fn new(prefix: &str, spec: ConvSpec, params: &mut ParamSet) -> Result<Self> {
        spec.validate()?;
        let weight = params.alloc(
            format!("{prefix}.weight"),
            &[
                spec.out_channels,
                spec.in_channels * spec.kernel * spec.kernel,
            ],
        );
        let bias = if spec.bias {
            Some(params.alloc(format!("{prefix}.bias"), &[spec.out_channels]))
        } else {
            None
        };
        Ok(Conv2d { spec, weight, bias })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize) {
        (conv_out(h, self.spec.stride), conv_out(w, self.spec.stride))
    }

    /// Gather input patches into an `(n*oh*ow) x (cin*k*k)` matrix.
    fn im2col(&self, x: &Tensor) -> Vec<f64> {
        let k = self.spec.kernel;
        let p = (k - 1) / 2;
        let s = self.spec.stride;
        let (n, cin, h, w) = x.shape();
        let (oh, ow) = self.out_shape(h, w);
        let row_len = cin * k * k;
        let mut cols = vec![0.0; n * oh * ow * row_len];
        let circular = self.spec.padding_mode == PadMode::CircularTheta;
        let coarse = cols.len() >= 262_144;
        par::chunks_mut_indexed_if(coarse, &mut cols, oh * ow * row_len, |ni, sample| {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (oy * ow + ox) * row_len;
                    for ci in 0..cin {
                        let plane = x.plane(ni, ci);
                        for ky in 0..k {
                            let y = (oy * s + ky) as i64 - p as i64;
                            if y < 0 || y >= h as i64 {
                                continue; // both modes zero-pad the first axis
                            }
                            let yrow = y as usize * w;
                            for kx in 0..k {
                                let xx = (ox * s + kx) as i64 - p as i64;
                                let col = row + (ci * k + ky) * k + kx;
                                if xx >= 0 && xx < w as i64 {
                                    sample[col] = plane[yrow + xx as usize];
                                } else if circular {
                                    let wrapped = xx.rem_euclid(w as i64) as usize;
                                    sample[col] = plane[yrow + wrapped];
                                }
                            }
                        }
                    }
                }
            }
        });
        cols
    }

    pub fn forward(&self, x: &Tensor, params: &ParamSet) -> Result<Tensor> {
        let (n, cin, h, w) = x.shape();
        if cin != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {cin}",
                self.spec.in_channels
            )));
        }
        let (oh, ow) = self.out_shape(h, w);
        let cout = self.spec.out_channels;
        let k = self.spec.kernel;
        let row_len = cin * k * k;
        let rows = n * oh * ow;
        let cols = self.im2col(x);
        let out_mat = tensor::matmul_nt(&cols, params.view(self.weight), rows, row_len, cout);
        // Reorder (rows, cout) into NCHW and add the bias.
        let mut out = Tensor::zeros(n, cout, oh, ow);
        let bias = self.bias.map(|b| params.view(b).to_vec());
        let pl = oh * ow;
        par::chunks_mut_indexed(out.data_mut(), pl, |plane_idx, plane| {
            let ni = plane_idx / cout;
            let o = plane_idx % cout;
            let b = bias.as_ref().map(|bv| bv[o]).unwrap_or(0.0);
            for (px, dst) in plane.iter_mut().enumerate() {
                *dst = out_mat[(ni * pl + px) * cout + o] + b;
            }
        });
        Ok(out)
    }

    /// Backward pass: accumulates parameter gradients into `grads` (laid out
    /// like the param set) and returns the input gradient.
    pub fn backward(
        &self,
        x: &Tensor,
        dy: &Tensor,
        params: &ParamSet,
        grads: &mut [f64],
    ) -> Tensor {
        let (n, cin, h, w) = x.shape();
        let (oh, ow) = self.out_shape(h, w);
        let cout = self.spec.out_channels;
        let k = self.spec.kernel;
        let p = (k - 1) / 2;
        let s = self.spec.stride;
        let row_len = cin * k * k;
        let rows = n * oh * ow;
        debug_assert_eq!(dy.shape(), (n, cout, oh, ow));

        // dy back to (rows, cout) layout.
        let mut dy_mat = vec![0.0; rows * cout];
        let pl = oh * ow;
        for ni in 0..n {
            for o in 0..cout {
                let plane = dy.plane(ni, o);
                for (px, &v) in plane.iter().enumerate() {
                    dy_mat[(ni * pl + px) * cout + o] = v;
                }
            }
        }

        // Parameter gradients.
        let cols = self.im2col(x);
        {
            let we = params.entry(self.weight);
            let dw = &mut grads[we.offset..we.offset + we.len()];
            tensor::matmul_tn_acc(dw, &dy_mat, &cols, cout, rows, row_len);
        }
        if let Some(bid) = self.bias {
            let be = params.entry(bid);
            let db = &mut grads[be.offset..be.offset + be.len()];
            for r in 0..rows {
                for o in 0..cout {
                    db[o] += dy_mat[r * cout + o];
                }
            }
        }

        // Input gradient: dcols = dy_mat * W, then scatter back (col2im).
        let mut dcols = vec![0.0; rows * row_len];
        tensor::matmul_nn_acc(
            &mut dcols,
            &dy_mat,
            params.view(self.weight),
            rows,
            cout,
            row_len,
        );
        let mut dx = Tensor::zeros(n, cin, h, w);
        let circular = self.spec.padding_mode == PadMode::CircularTheta;
        let coarse = dcols.len() >= 262_144;
        par::chunks_mut_indexed_if(coarse, dx.data_mut(), h * w, |plane_idx, plane| {
            let ni = plane_idx / cin;
            let ci = plane_idx % cin;
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((ni * oh + oy) * ow + ox) * row_len;
                    for ky in 0..k {
                        let y = (oy * s + ky) as i64 - p as i64;
                        if y < 0 || y >= h as i64 {
                            continue;
                        }
                        let yrow = y as usize * w;
                        for kx in 0..k {
                            let xx = (ox * s + kx) as i64 - p as i64;
                            let col = row + (ci * k + ky) * k + kx;
                            if xx >= 0 && xx < w as i64 {
                                plane[yrow + xx as usize] += dcols[col];
                            } else if circular {
                                let wrapped = xx.rem_euclid(w as i64) as usize;
                                plane[yrow + wrapped] += dcols[col];
                            }
                        }
                    }
                }
            }
        });
        dx
    }
}

/// Batch normalization over (N, H, W) per channel with learned affine.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    channels: usize,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    eps: f64,
    momentum: f64,
}

/// Per-channel statistics captured during the training forward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(
        prefix: &str,
        channels: usize,
        params: &mut ParamSet,
        buffers: &mut BufferSet,
    ) -> Self {
        BatchNorm2d {
            channels,
            gamma: params.alloc(format!("{prefix}.gamma"), &[channels]),
            beta: params.alloc(format!("{prefix}.beta"), &[channels]),
            running_mean: buffers.alloc(format!("{prefix}.running_mean"), &[channels]),
            running_var: buffers.alloc(format!("{prefix}.running_var"), &[channels]),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward_train(
        &self,
        x: &Tensor,
        params: &ParamSet,
        buffers: &mut BufferSet,
        update_stats: bool,
    ) -> (Tensor, BnCache) {
        let (n, c, h, w) = x.shape();
        debug_assert_eq!(c, self.channels);
        let m = (n * h * w) as f64;
        let pl = h * w;
        let stats: Vec<(f64, f64)> = par::map_indexed_if(n * h * w >= 16_384, c, |ci| {
            let mut sum = 0.0;
            for ni in 0..n {
                for &v in x.plane(ni, ci) {
                    sum += v;
                }
            }
            let mean = sum / m;
            let mut var = 0.0;
            for ni in 0..n {
                for &v in x.plane(ni, ci) {
                    var += (v - mean) * (v - mean);
                }
            }
            (mean, var / m)
        });
        let gamma = params.view(self.gamma);
        let beta = params.view(self.beta);
        let mut out = Tensor::zeros(n, c, h, w);
        par::chunks_mut_indexed(out.data_mut(), pl, |plane_idx, plane| {
            let ni = plane_idx / c;
            let ci = plane_idx % c;
            let (mean, var) = stats[ci];
            let inv_std = 1.0 / (var + self.eps).sqrt();
            let g = gamma[ci] * inv_std;
            let b = beta[ci];
            for (dst, &v) in plane.iter_mut().zip(x.plane(ni, ci)) {
                *dst = g * (v - mean) + b;
            }
        });
        if update_stats {
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let mom = self.momentum;
            let rm = buffers.view_mut(self.running_mean);
            for ci in 0..c {
                rm[ci] = (1.0 - mom) * rm[ci] + mom * stats[ci].0;
            }
            let rv = buffers.view_mut(self.running_var);
            for ci in 0..c {
                rv[ci] = (1.0 - mom) * rv[ci] + mom * stats[ci].1 * unbias;
            }
        }
        let cache = BnCache {
            mean: stats.iter().map(|s| s.0).collect(),
            inv_std: stats
                .iter()
                .map(|s| 1.0 / (s.1 + self.eps).sqrt())
                .collect(),
        };
        (out, cache)
    }

    pub fn forward_eval(&self, x: &Tensor, params: &ParamSet, buffers: &BufferSet) -> Tensor {
        let (n, c, h, w) = x.shape();
        debug_assert_eq!(c, self.channels);
        let gamma = params.view(self.gamma);
        let beta = params.view(self.beta);
        let rm = buffers.view(self.running_mean);
        let rv = buffers.view(self.running_var);
        let mut out = Tensor::zeros(n, c, h, w);
        let pl = h * w;
        par::chunks_mut_indexed(out.data_mut(), pl, |plane_idx, plane| {
            let ni = plane_idx / c;
            let ci = plane_idx % c;
            let g = gamma[ci] / (rv[ci] + self.eps).sqrt();
            let b = beta[ci] - g * rm[ci];
            for (dst, &v) in plane.iter_mut().zip(x.plane(ni, ci)) {
                *dst = g * v + b;
            }
        });
        out
    }

    pub fn backward(
        &self,
        x: &Tensor,
        cache: &BnCache,
        dy: &Tensor,
        params: &ParamSet,
        grads: &mut [f64],
    ) -> Tensor {
        let (n, c, h, w) = x.shape();
        let m = (n * h * w) as f64;
        let gamma = params.view(self.gamma);

        // Per-channel reductions of dy and dy * xhat.
        let sums: Vec<(f64, f64)> = par::map_indexed_if(n * h * w >= 16_384, c, |ci| {
            let mean = cache.mean[ci];
            let inv_std = cache.inv_std[ci];
            let mut s_dy = 0.0;
            let mut s_dy_xhat = 0.0;
            for ni in 0..n {
                for (&xv, &dv) in x.plane(ni, ci).iter().zip(dy.plane(ni, ci)) {
                    s_dy += dv;
                    s_dy_xhat += dv * (xv - mean) * inv_std;
                }
            }
            (s_dy, s_dy_xhat)
        });

        {
            let ge = params.entry(self.gamma);
            let dgamma = &mut grads[ge.offset..ge.offset + ge.len()];
            for ci in 0..c {
                dgamma[ci] += sums[ci].1;
            }
            let be = params.entry(self.beta);
            let dbeta = &mut grads[be.offset..be.offset + be.len()];
            for ci in 0..c {
                dbeta[ci] += sums[ci].0;
            }
        }

        let mut dx = Tensor::zeros(n, c, h, w);
        let pl = h * w;
        par::chunks_mut_indexed(dx.data_mut(), pl, |plane_idx, plane| {
            let ni = plane_idx / c;
            let ci = plane_idx % c;
            let mean = cache.mean[ci];
            let inv_std = cache.inv_std[ci];
            let (s_dy, s_dy_xhat) = sums[ci];
            let scale = gamma[ci] * inv_std;
            for ((dst, &xv), &dv) in plane.iter_mut().zip(x.plane(ni, ci)).zip(dy.plane(ni, ci)) {
                let xhat = (xv - mean) * inv_std;
                *dst = scale * (dv - s_dy / m - xhat * s_dy_xhat / m);
            }
        });
        dx
    }
}

/// Residual block: two 3x3 convolutions with batch norm, plus an identity or
/// strided 1x1-projection shortcut. Downsampling applies to both axes.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
    in_channels: usize,
    out_channels: usize,
    downsample: usize,
}

/// Intermediates needed by the residual-block backward pass.
pub struct ResBlockCache {
    x: Tensor,
    c1: Tensor,
    bn1: BnCache,
    r1: Tensor,
    c2: Tensor,
    bn2: BnCache,
    sc_conv: Option<Tensor>,
    sc_bn: Option<BnCache>,
    y: Tensor,
}

impl ResBlockCache {
    pub fn output(&self) -> &Tensor {
        &self.y
    }

    pub fn input(&self) -> &Tensor {
        &self.x
    }
}

impl ResidualBlock {
    pub fn new(
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        downsample: usize,
        pad_mode: PadMode,
        params: &mut ParamSet,
        buffers: &mut BufferSet,
    ) -> Result<Self> {
        if !(downsample == 1 || downsample == 2) {
            return Err(Error::Invalid(format!(
                "downsample factor must be 1 or 2, got {downsample}"
            )));
        }
        let conv1 = Conv2d::new(
            &format!("{prefix}.conv1"),
            ConvSpec {
                in_channels,
                out_channels,
                kernel: 3,
                stride: downsample,
                padding_mode: pad_mode,
                bias: false,
            },
            params,
        )?;
        let bn1 = BatchNorm2d::new(&format!("{prefix}.bn1"), out_channels, params, buffers);
        let conv2 = Conv2d::new(
            &format!("{prefix}.conv2"),
            ConvSpec {
                in_channels: out_channels,
                out_channels,
                kernel: 3,
                stride: 1,
                padding_mode: pad_mode,
                bias: false,
            },
            params,
        )?;
        let bn2 = BatchNorm2d::new(&format!("{prefix}.bn2"), out_channels, params, buffers);
        let shortcut = if downsample != 1 || in_channels != out_channels {
            let conv = Conv2d::new(
                &format!("{prefix}.shortcut"),
                ConvSpec {
                    in_channels,
                    out_channels,
                    kernel: 1,
                    stride: downsample,
                    padding_mode: pad_mode,
                    bias: false,
                },
                params,
            )?;
            let bn = BatchNorm2d::new(
                &format!("{prefix}.shortcut_bn"),
                out_channels,
                params,
                buffers,
            );
            Some((conv, bn))
        } else {
            None
        };
        Ok(ResidualBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
            in_channels,
            out_channels,
            downsample,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn downsample(&self) -> usize {
        self.downsample
    }

    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize) {
        (conv_out(h, self.downsample), conv_out(w, self.downsample))
    }

    pub fn forward_train(
        &self,
        x: Tensor,
        params: &ParamSet,
        buffers: &mut BufferSet,
        update_stats: bool,
    ) -> Result<(Tensor, ResBlockCache)> {
        let c1 = self.conv1.forward(&x, params)?;
        let (b1, bn1c) = self.bn1.forward_train(&c1, params, buffers, update_stats);
        let r1 = tensor::relu(&b1);
        let c2 = self.conv2.forward(&r1, params)?;
        let (b2, bn2c) = self.bn2.forward_train(&c2, params, buffers, update_stats);
        let (pre, sc_conv, sc_bn) = match &self.shortcut {
            None => (tensor::add(&b2, &x), None, None),
            Some((conv, bn)) => {
                let sc = conv.forward(&x, params)?;
                let (sb, sbc) = bn.forward_train(&sc, params, buffers, update_stats);
                (tensor::add(&b2, &sb), Some(sc), Some(sbc))
            }
        };
        let y = tensor::relu(&pre);
        Ok((
            y.clone(),
            ResBlockCache {
                x,
                c1,
                bn1: bn1c,
                r1,
                c2,
                bn2: bn2c,
                sc_conv,
                sc_bn,
                y,
            },
        ))
    }

    pub fn forward_eval(
        &self,
        x: &Tensor,
        params: &ParamSet,
        buffers: &BufferSet,
    ) -> Result<Tensor> {
        let c1 = self.conv1.forward(x, params)?;
        let b1 = self.bn1.forward_eval(&c1, params, buffers);
        let r1 = tensor::relu(&b1);
        let c2 = self.conv2.forward(&r1, params)?;
        let b2 = self.bn2.forward_eval(&c2, params, buffers);
        let pre = match &self.shortcut {
            None => tensor::add(&b2, x),
            Some((conv, bn)) => {
                let sc = conv.forward(x, params)?;
                tensor::add(&b2, &bn.forward_eval(&sc, params, buffers))
            }
        };
        Ok(tensor::relu(&pre))
    }

    pub fn backward(
        &self,
        cache: &ResBlockCache,
        dy: &Tensor,
        params: &ParamSet,
        grads: &mut [f64],
    ) -> Tensor {
        // Through the final activation; the same cotangent feeds the main
        // path and the shortcut.
        let dpre = tensor::relu_backward(&cache.y, dy);

        // Main path.
        let dc2 = self
            .bn2
            .backward(&cache.c2, &cache.bn2, &dpre, params, grads);
        let dr1 = self.conv2.backward(&cache.r1, &dc2, params, grads);
        let db1 = tensor::relu_backward(&cache.r1, &dr1);
        let dc1 = self
            .bn1
            .backward(&cache.c1, &cache.bn1, &db1, params, grads);
        let dx_main = self.conv1.backward(&cache.x, &dc1, params, grads);

        // Shortcut path.
        let dx_short = match &self.shortcut {
            None => dpre,
            Some((conv, bn)) => {
                let sc = cache.sc_conv.as_ref().expect("shortcut cache");
                let sbc = cache.sc_bn.as_ref().expect("shortcut bn cache");
                let dsc = bn.backward(sc, sbc, &dpre, params, grads);
                conv.backward(&cache.x, &dsc, params, grads)
            }
        };
        tensor::add(&dx_main, &dx_short)
    }
}

/// Pad a feature grid: circular along theta (columns), zeros along the
/// radial axis (rows).
pub fn circular_pad_theta(x: &Tensor, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.shape();
    if pad >= w {
        return Err(Error::Invalid(format!("circular pad {pad} >= theta {w}")));
    }
    if pad == 0 {
        return Ok(x.clone());
    }
    let (nh, nw) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros(n, c, nh, nw);
    for ni in 0..n {
        for ci in 0..c {
            let src = x.plane(ni, ci);
            let dst = out.plane_mut(ni, ci);
            for y in 0..h {
                for xx in 0..nw {
                    let sx = (xx as i64 - pad as i64).rem_euclid(w as i64) as usize;
                    dst[(y + pad) * nw + xx] = src[y * w + sx];
                }
            }
        }
    }
    Ok(out)
}

fn upsample_taps(t: usize, in_size: usize, out_size: usize, circular: bool) -> (usize, usize, f64) {
    let s = (t as f64 + 0.5) * in_size as f64 / out_size as f64 - 0.5;
    if circular {
        let s = s.rem_euclid(in_size as f64);
        let i0 = (s.floor() as usize).min(in_size - 1);
        ((i0) % in_size, (i0 + 1) % in_size, s - s.floor())
    } else {
        let s = s.clamp(0.0, in_size as f64 - 1.0);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(in_size - 1), s - i0 as f64)
    }
}

/// Bilinear upsampling; the second axis interpolates circularly for polar
/// grids. Rejects downsizing.
pub fn upsample_bilinear(x: &Tensor, th: usize, tw: usize, circular_w: bool) -> Result<Tensor> {
    let (n, c, h, w) = x.shape();
    if th < h || tw < w {
        return Err(Error::Invalid(format!(
            "upsample cannot downsize: ({h}, {w}) -> ({th}, {tw})"
        )));
    }
    let row_taps: Vec<_> = (0..th).map(|t| upsample_taps(t, h, th, false)).collect();
    let col_taps: Vec<_> = (0..tw)
        .map(|t| upsample_taps(t, w, tw, circular_w))
        .collect();
    let mut out = Tensor::zeros(n, c, th, tw);
    par::chunks_mut_indexed(out.data_mut(), th * tw, |plane_idx, plane| {
        let ni = plane_idx / c;
        let ci = plane_idx % c;
        let src = x.plane(ni, ci);
        for (ty, &(y0, y1, fy)) in row_taps.iter().enumerate() {
            for (tx, &(x0, x1, fx)) in col_taps.iter().enumerate() {
                plane[ty * tw + tx] = (1.0 - fy)
                    * ((1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1])
                    + fy * ((1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
            }
        }
    });
    Ok(out)
}

/// Adjoint of [`upsample_bilinear`] back onto an `h x w` grid.
pub fn upsample_bilinear_adjoint(dy: &Tensor, h: usize, w: usize, circular_w: bool) -> Tensor {
    let (n, c, th, tw) = dy.shape();
    let row_taps: Vec<_> = (0..th).map(|t| upsample_taps(t, h, th, false)).collect();
    let col_taps: Vec<_> = (0..tw)
        .map(|t| upsample_taps(t, w, tw, circular_w))
        .collect();
    let mut out = Tensor::zeros(n, c, h, w);
    par::chunks_mut_indexed(out.data_mut(), h * w, |plane_idx, plane| {
        let ni = plane_idx / c;
        let ci = plane_idx % c;
        let src = dy.plane(ni, ci);
        for (ty, &(y0, y1, fy)) in row_taps.iter().enumerate() {
            for (tx, &(x0, x1, fx)) in col_taps.iter().enumerate() {
                let d = src[ty * tw + tx];
                plane[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * d;
                plane[y0 * w + x1] += (1.0 - fy) * fx * d;
                plane[y1 * w + x0] += fy * (1.0 - fx) * d;
                plane[y1 * w + x1] += fy * fx * d;
            }
        }
    });
    out
}

/// Collapse the radial axis by global average pooling: (N, C, H, W) ->
/// (N, C, 1, W).
pub fn mean_over_rows(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.shape();
    let mut out = Tensor::zeros(n, c, 1, w);
    par::chunks_mut_indexed(out.data_mut(), w, |plane_idx, row| {
        let ni = plane_idx / c;
        let ci = plane_idx % c;
        let src = x.plane(ni, ci);
        for (xx, dst) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for y in 0..h {
                acc += src[y * w + xx];
            }
            *dst = acc / h as f64;
        }
    });
    out
}

/// Adjoint of [`mean_over_rows`]: broadcast the cotangent over `h` rows.
pub fn mean_over_rows_adjoint(dy: &Tensor, h: usize) -> Tensor {
    let (n, c, _, w) = dy.shape();
    let mut out = Tensor::zeros(n, c, h, w);
    par::chunks_mut_indexed(out.data_mut(), h * w, |plane_idx, plane| {
        let ni = plane_idx / c;
        let ci = plane_idx % c;
        let src = dy.plane(ni, ci);
        for y in 0..h {
            for xx in 0..w {
                plane[y * w + xx] = src[xx] / h as f64;
            }
        }
    });
    out
}

/// 1x1-project a polar feature grid to class scores and collapse the radial
/// axis, yielding one score vector per A-line column: (C, H, W) tensor ->
/// (W, n_classes). `weight` is `n_classes x C` row-major.
pub fn project_and_pool(
    x: &Tensor,
    n_classes: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Result<Tensor> {
    if n_classes < 2 {
        return Err(Error::Invalid(format!(
            "project_and_pool needs >= 2 classes, got {n_classes}"
        )));
    }
    let (n, c, h, w) = x.shape();
    if weight.len() != n_classes * c {
        return Err(Error::Shape(format!(
            "project_and_pool: weight {} vs {} x {}",
            weight.len(),
            n_classes,
            c
        )));
    }
    let mut out = Tensor::zeros(n, n_classes, 1, w);
    for ni in 0..n {
        for o in 0..n_classes {
            let b = bias.map(|bv| bv[o]).unwrap_or(0.0);
            for xx in 0..w {
                let mut acc = 0.0;
                for ci in 0..c {
                    let src = x.plane(ni, ci);
                    let mut col = 0.0;
                    for y in 0..h {
                        col += src[y * w + xx];
                    }
                    acc += weight[o * c + ci] * col;
                }
                out.set(ni, o, 0, xx, acc / h as f64 + b);
            }
        }
    }
    Ok(out)
}
