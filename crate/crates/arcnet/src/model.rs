//! The dual-branch A-line classification network and its ablation variants.
//!
//! The polar branch runs four residual blocks with circular padding over the
//! polar-transformed stack; the Cartesian branch mirrors it with half the
//! feature sizes and zero padding. After each of blocks 1-3 the branches
//! exchange features: the outgoing feature volume is warped into the other
//! branch's coordinate system (via the bilinear transforms in [`crate::geometry`])
//! and concatenated to that branch's own features before the next block.
//! After block 4 the polar features are upsampled back to the stage-1 grid,
//! concatenated with the stored stage-1 output, projected to class scores
//! with a 1x1 convolution, pooled over the radial axis, and circularly
//! upsampled along theta to one score vector per A-line.
//!
//! Variants:
//! - `full`: bi-directional exchange after blocks 1-3.
//! - `one-way`: Cartesian-to-polar exchange only.
//! - `single`: the polar-warped output of Cartesian block 1 joins the polar
//!   stack before polar block 1; no other exchange.
//! - `polar`: no Cartesian branch at all.
//!
//! The Cartesian block of the last stage is never instantiated: its output
//! would feed no consumer (the head reads the polar branch only).

use crate::error::{Error, Result};
use crate::geometry::{self, CartesianGrid, PolarGrid, WarpTable};
use crate::loss::Logits;
use crate::netblocks::{
    mean_over_rows, mean_over_rows_adjoint, upsample_bilinear, upsample_bilinear_adjoint,
    BufferSet, Conv2d, ConvSpec, PadMode, ParamSet, ResBlockCache, ResidualBlock,
};
use crate::par;
use crate::seed_mix;
use crate::tensor::{self, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Architecture variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    OneWay,
    Single,
    #[serde(rename = "polar", alias = "polar-only")]
    PolarOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::OneWay,
        Variant::Single,
        Variant::PolarOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::OneWay => "one-way",
            Variant::Single => "single",
            Variant::PolarOnly => "polar",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "one-way" | "one_way" | "oneway" => Ok(Variant::OneWay),
            "single" => Ok(Variant::Single),
            "polar" | "polar-only" | "polar_only" => Ok(Variant::PolarOnly),
            other => Err(Error::Invalid(format!(
                "unknown variant '{other}' (expected full, one-way, single or polar)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Model hyperparameters. The defaults reproduce the production
/// configuration; tests shrink the spatial extents (and optionally the
/// feature sizes) while keeping the structure intact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArcNetConfig {
    pub variant: Variant,
    /// Cartesian input height/width.
    pub height: usize,
    pub width: usize,
    /// Polar input radial/angular extents.
    pub rho: usize,
    pub theta: usize,
    /// Polar-branch feature sizes per block.
    pub polar_channels: [usize; 4],
    /// Cartesian-branch feature sizes; must be exactly half the polar sizes.
    /// The last entry is carried for symmetry but never instantiated.
    pub cart_channels: [usize; 4],
    /// Per-block downsampling factors, applied to both spatial axes.
    pub downsample: [usize; 4],
    pub n_classes: usize,
    /// Number of consecutive frames stacked in the channel dimension.
    pub stack_depth: usize,
}

impl ArcNetConfig {
    /// Production-scale configuration.
    pub fn full_size(variant: Variant) -> Self {
        ArcNetConfig {
            variant,
            height: 352,
            width: 352,
            rho: 176,
            theta: 224,
            polar_channels: [32, 64, 128, 256],
            cart_channels: [16, 32, 64, 128],
            downsample: [2, 2, 2, 1],
            n_classes: 3,
            stack_depth: 3,
        }
    }

    /// Desk-scale configuration with shrunken spatial extents.
    pub fn reduced(
        variant: Variant,
        height: usize,
        width: usize,
        rho: usize,
        theta: usize,
    ) -> Self {
        ArcNetConfig {
            height,
            width,
            rho,
            theta,
            ..ArcNetConfig::full_size(variant)
        }
    }

    /// Scale every feature size by `num/den` (Cartesian stays half of polar).
    pub fn with_channel_scale(mut self, num: usize, den: usize) -> Self {
        for c in &mut self.polar_channels {
            *c = (*c * num / den).max(4);
        }
        for (c, p) in self.cart_channels.iter_mut().zip(self.polar_channels) {
            *c = (p / 2).max(2);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta < 8 || !self.theta.is_multiple_of(8) {
            return Err(Error::Invalid(format!(
                "theta must be a positive multiple of 8, got {}",
                self.theta
            )));
        }
        if self.rho < 8 || !self.rho.is_multiple_of(8) {
            return Err(Error::Invalid(format!(
                "rho must be a positive multiple of 8, got {}",
                self.rho
            )));
        }
        if !self.height.is_multiple_of(8)
            || !self.width.is_multiple_of(8)
            || self.height < 16
            || self.width < 16
        {
            return Err(Error::Invalid(format!(
                "height and width must be multiples of 8 (>= 16), got {}x{}",
                self.height, self.width
            )));
        }
        for (c, p) in self.cart_channels.iter().zip(self.polar_channels) {
            if *c * 2 != p {
                return Err(Error::Invalid(format!(
                    "cartesian feature sizes must be half the polar sizes, got {:?} vs {:?}",
                    self.cart_channels, self.polar_channels
                )));
            }
        }
        for d in self.downsample {
            if d != 1 && d != 2 {
                return Err(Error::Invalid(format!(
                    "downsample factors must be 1 or 2, got {d}"
                )));
            }
        }
        if self.n_classes < 2 {
            return Err(Error::Invalid("n_classes must be at least 2".into()));
        }
        if self.stack_depth < 1 {
            return Err(Error::Invalid("stack_depth must be at least 1".into()));
        }
        Ok(())
    }

    /// Spatial sizes of the polar grid before block 1 and after each block.
    pub fn polar_sizes(&self) -> [(usize, usize); 5] {
        let mut out = [(0, 0); 5];
        out[0] = (self.rho, self.theta);
        for k in 0..4 {
            let d = self.downsample[k];
            out[k + 1] = (out[k].0.div_ceil(d), out[k].1.div_ceil(d));
        }
        out
    }

    /// Spatial sizes of the Cartesian grid before block 1 and after each block.
    pub fn cart_sizes(&self) -> [(usize, usize); 5] {
        let mut out = [(0, 0); 5];
        out[0] = (self.height, self.width);
        for k in 0..4 {
            let d = self.downsample[k];
            out[k + 1] = (out[k].0.div_ceil(d), out[k].1.div_ceil(d));
        }
        out
    }

    /// Number of Cartesian blocks the variant instantiates.
    pub fn cart_block_count(&self) -> usize {
        match self.variant {
            Variant::Full | Variant::OneWay => 3,
            Variant::Single => 1,
            Variant::PolarOnly => 0,
        }
    }
}

/// One frame's worth of network input: the Cartesian stack and its polar
/// counterpart (`to_polar` of the same channels, up to interpolation).
#[derive(Clone, Debug)]
pub struct InputPair {
    pub cart: CartesianGrid,
    pub polar: PolarGrid,
}

impl InputPair {
    pub fn check(&self, cfg: &ArcNetConfig) -> Result<()> {
        if self.cart.channels() != cfg.stack_depth
            || self.cart.height() != cfg.height
            || self.cart.width() != cfg.width
        {
            return Err(Error::Shape(format!(
                "input cart stack {}x{}x{} does not match config {}x{}x{}",
                self.cart.channels(),
                self.cart.height(),
                self.cart.width(),
                cfg.stack_depth,
                cfg.height,
                cfg.width
            )));
        }
        if self.polar.channels() != cfg.stack_depth
            || self.polar.rho() != cfg.rho
            || self.polar.theta() != cfg.theta
        {
            return Err(Error::Shape(format!(
                "input polar stack {}x{}x{} does not match config {}x{}x{}",
                self.polar.channels(),
                self.polar.rho(),
                self.polar.theta(),
                cfg.stack_depth,
                cfg.rho,
                cfg.theta
            )));
        }
        Ok(())
    }
}

/// Parameter-count summary per branch.
#[derive(Clone, Debug)]
pub struct ParamReport {
    pub variant: Variant,
    pub total: usize,
    pub polar: usize,
    pub cart: usize,
    pub head: usize,
}

impl std::fmt::Display for ParamReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} parameters (polar {}, cartesian {}, head {})",
            self.variant, self.total, self.polar, self.cart, self.head
        )
    }
}

fn warp_tensor(x: &Tensor, table: &WarpTable) -> Tensor {
    let (n, c, _, _) = x.shape();
    let mut out = Tensor::zeros(n, c, table.out_rows(), table.out_cols());
    let pl = table.out_len();
    par::chunks_mut_indexed(out.data_mut(), pl, |plane_idx, plane| {
        let ni = plane_idx / c;
        let ci = plane_idx % c;
        table.apply(x.plane(ni, ci), plane);
    });
    out
}

fn warp_tensor_adjoint(dy: &Tensor, table: &WarpTable, src_h: usize, src_w: usize) -> Tensor {
    let (n, c, _, _) = dy.shape();
    debug_assert_eq!(src_h * src_w, table.src_len());
    let mut out = Tensor::zeros(n, c, src_h, src_w);
    let pl = src_h * src_w;
    par::chunks_mut_indexed(out.data_mut(), pl, |plane_idx, plane| {
        let ni = plane_idx / c;
        let ci = plane_idx % c;
        table.accumulate_adjoint(dy.plane(ni, ci), plane);
    });
    out
}

fn add_into(acc: &mut Option<Tensor>, t: Tensor) {
    match acc {
        None => *acc = Some(t),
        Some(a) => *a = tensor::add(a, &t),
    }
}

/// Intermediate activations captured by a training forward pass.
pub struct Trace {
    polar: Vec<ResBlockCache>,
    cart: Vec<ResBlockCache>,
    head_in: Tensor,
    head_out: Tensor,
}

/// The assembled network: blocks, warp tables and flat parameter storage.
pub struct ArcNet {
    cfg: ArcNetConfig,
    params: ParamSet,
    buffers: BufferSet,
    polar_blocks: Vec<ResidualBlock>,
    cart_blocks: Vec<ResidualBlock>,
    head: Conv2d,
    /// Warp of Cartesian block-k output into the polar grid feeding polar
    /// block k+1 (index 0 is the `single` pre-block-1 injection).
    cart_to_polar: [Option<WarpTable>; 4],
    /// Warp of polar block-k output into the Cartesian grid feeding
    /// Cartesian block k+1 (indices 1..2 used, `full` only).
    polar_to_cart: [Option<WarpTable>; 3],
}

impl ArcNet {
    /// Construct the network with deterministic parameter initialization.
    pub fn build(cfg: ArcNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut buffers = BufferSet::new();
        let sp = cfg.polar_sizes();
        let sc = cfg.cart_sizes();

        // Channel wiring per variant.
        let pc = cfg.polar_channels;
        let cc = cfg.cart_channels;
        let polar_in: [usize; 4] = match cfg.variant {
            Variant::Full | Variant::OneWay => {
                [cfg.stack_depth, pc[0] + cc[0], pc[1] + cc[1], pc[2] + cc[2]]
            }
            Variant::Single => [cfg.stack_depth + cc[0], pc[0], pc[1], pc[2]],
            Variant::PolarOnly => [cfg.stack_depth, pc[0], pc[1], pc[2]],
        };
        let cart_in: Vec<usize> = match cfg.variant {
            Variant::Full => vec![cfg.stack_depth, cc[0] + pc[0], cc[1] + pc[1]],
            Variant::OneWay => vec![cfg.stack_depth, cc[0], cc[1]],
            Variant::Single => vec![cfg.stack_depth],
            Variant::PolarOnly => vec![],
        };

        let mut polar_blocks = Vec::new();
        for k in 0..4 {
            polar_blocks.push(ResidualBlock::new(
                &format!("polar.b{}", k + 1),
                polar_in[k],
                pc[k],
                cfg.downsample[k],
                PadMode::CircularTheta,
                &mut params,
                &mut buffers,
            )?);
        }
        let mut cart_blocks = Vec::new();
        for (k, &cin) in cart_in.iter().enumerate() {
            cart_blocks.push(ResidualBlock::new(
                &format!("cart.b{}", k + 1),
                cin,
                cc[k],
                cfg.downsample[k],
                PadMode::Zero,
                &mut params,
                &mut buffers,
            )?);
        }
        let head = Conv2d::new(
            "head",
            ConvSpec {
                in_channels: pc[3] + pc[0],
                out_channels: cfg.n_classes,
                kernel: 1,
                stride: 1,
                padding_mode: PadMode::Zero,
                bias: true,
            },
            &mut params,
        )?;

        // Warp tables; target sizes must equal the receiving branch's grid.
        let mut cart_to_polar: [Option<WarpTable>; 4] = [None, None, None, None];
        let mut polar_to_cart: [Option<WarpTable>; 3] = [None, None, None];
        match cfg.variant {
            Variant::Full | Variant::OneWay => {
                for k in 1..=3 {
                    let t = geometry::polar_table(sc[k].0, sc[k].1, sp[k].0, sp[k].1);
                    assert_eq!((t.out_rows(), t.out_cols()), sp[k]);
                    cart_to_polar[k] = Some(t);
                }
                if cfg.variant == Variant::Full {
                    for k in 1..=2 {
                        let t = geometry::cartesian_table(sp[k].0, sp[k].1, sc[k].0, sc[k].1);
                        assert_eq!((t.out_rows(), t.out_cols()), sc[k]);
                        polar_to_cart[k] = Some(t);
                    }
                }
            }
            Variant::Single => {
                let t = geometry::polar_table(sc[1].0, sc[1].1, sp[0].0, sp[0].1);
                assert_eq!((t.out_rows(), t.out_cols()), sp[0]);
                cart_to_polar[0] = Some(t);
            }
            Variant::PolarOnly => {}
        }

        let mut net = ArcNet {
            cfg,
            params,
            buffers,
            polar_blocks,
            cart_blocks,
            head,
            cart_to_polar,
            polar_to_cart,
        };
        net.init_params(seed);
        Ok(net)
    }

    fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(&[seed, 0x12_17]));
        let mut gauss = move || {
            // Box-Muller; u1 in (0, 1].
            let u1: f64 = 1.0 - rng.random::<f64>();
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let entries = self.params.entries().to_vec();
        for e in &entries {
            let vals = &mut self.params.values_mut()[e.offset..e.offset + e.len()];
            if e.name.ends_with(".weight") {
                let fan_in = e.shape[1] as f64;
                let std = (2.0 / fan_in).sqrt();
                for v in vals {
                    *v = gauss() * std;
                }
            } else if e.name.ends_with(".gamma") {
                vals.fill(1.0);
            } else {
                vals.fill(0.0);
            }
        }
        let entries = self.buffers.entries().to_vec();
        for e in &entries {
            let vals = &mut self.buffers.values_mut()[e.offset..e.offset + e.len()];
            if e.name.ends_with(".running_var") {
                vals.fill(1.0);
            } else {
                vals.fill(0.0);
            }
        }
    }

    pub fn config(&self) -> &ArcNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn buffers(&self) -> &BufferSet {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut BufferSet {
        &mut self.buffers
    }

    pub fn parameter_report(&self) -> ParamReport {
        let mut polar = 0;
        let mut cart = 0;
        let mut head = 0;
        for e in self.params.entries() {
            if e.name.starts_with("polar.") {
                polar += e.len();
            } else if e.name.starts_with("cart.") {
                cart += e.len();
            } else {
                head += e.len();
            }
        }
        ParamReport {
            variant: self.cfg.variant,
            total: self.params.len(),
            polar,
            cart,
            head,
        }
    }

    fn batch_tensors(&self, pairs: &[InputPair]) -> Result<(Tensor, Tensor)> {
        if pairs.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        for p in pairs {
            p.check(&self.cfg)?;
        }
        let n = pairs.len();
        let c = self.cfg.stack_depth;
        let (h, w) = (self.cfg.height, self.cfg.width);
        let (rho, theta) = (self.cfg.rho, self.cfg.theta);
        let mut cart = Tensor::zeros(n, c, h, w);
        let mut polar = Tensor::zeros(n, c, rho, theta);
        for (ni, pair) in pairs.iter().enumerate() {
            cart.data_mut()[ni * c * h * w..(ni + 1) * c * h * w].copy_from_slice(pair.cart.data());
            polar.data_mut()[ni * c * rho * theta..(ni + 1) * c * rho * theta]
                .copy_from_slice(pair.polar.data());
        }
        Ok((polar, cart))
    }

    fn logits_from_tensor(&self, out: &Tensor) -> Vec<Logits> {
        let (n, nc, _, theta) = out.shape();
        (0..n)
            .map(|ni| {
                let mut l = Logits::zeros(theta, nc);
                for i in 0..theta {
                    for c in 0..nc {
                        l.set(i, c, out.at(ni, c, 0, i));
                    }
                }
                l
            })
            .collect()
    }

    fn tensor_from_dlogits(&self, dlogits: &[Logits]) -> Tensor {
        let n = dlogits.len();
        let nc = self.cfg.n_classes;
        let theta = self.cfg.theta;
        let mut out = Tensor::zeros(n, nc, 1, theta);
        for (ni, dl) in dlogits.iter().enumerate() {
            for i in 0..theta {
                for c in 0..nc {
                    out.set(ni, c, 0, i, dl.at(i, c));
                }
            }
        }
        out
    }

    /// Training-mode forward pass (batch statistics); returns per-frame
    /// logits and the trace needed by [`ArcNet::backward`].
    pub fn forward_train(
        &mut self,
        pairs: &[InputPair],
        update_stats: bool,
    ) -> Result<(Vec<Logits>, Trace)> {
        let (polar0, cart0) = self.batch_tensors(pairs)?;
        let variant = self.cfg.variant;
        let sp = self.cfg.polar_sizes();

        let mut cart_caches: Vec<ResBlockCache> = Vec::new();
        let mut polar_caches: Vec<ResBlockCache> = Vec::new();

        let params = &self.params;

        // Cartesian block 1 runs first so `single` can inject its output.
        let mut cart_prev: Option<Tensor> = None;
        if !self.cart_blocks.is_empty() {
            let (c1, cache) = self.cart_blocks[0].forward_train(
                cart0,
                params,
                &mut self.buffers,
                update_stats,
            )?;
            cart_caches.push(cache);
            cart_prev = Some(c1);
        }

        let polar_in1 = match variant {
            Variant::Single => {
                let warped = warp_tensor(
                    cart_prev.as_ref().expect("single has cart block 1"),
                    self.cart_to_polar[0].as_ref().expect("single warp"),
                );
                tensor::concat_channels(&polar0, &warped)
            }
            _ => polar0,
        };
        let (p1, cache) = self.polar_blocks[0].forward_train(
            polar_in1,
            params,
            &mut self.buffers,
            update_stats,
        )?;
        polar_caches.push(cache);
        let mut polar_prev = p1;

        for k in 1..4 {
            // Next Cartesian block, where the variant has one at this stage.
            let next_cart = if k < self.cart_blocks.len() {
                let prev = cart_prev.as_ref().expect("cart chain");
                let cart_in = match variant {
                    Variant::Full => {
                        let warped = warp_tensor(
                            &polar_prev,
                            self.polar_to_cart[k].as_ref().expect("full p2c warp"),
                        );
                        tensor::concat_channels(prev, &warped)
                    }
                    _ => prev.clone(),
                };
                let (ck, cache) = self.cart_blocks[k].forward_train(
                    cart_in,
                    params,
                    &mut self.buffers,
                    update_stats,
                )?;
                cart_caches.push(cache);
                Some(ck)
            } else {
                None
            };

            // Polar block k+1, with the Cartesian exchange where configured.
            let polar_in = match variant {
                Variant::Full | Variant::OneWay => {
                    let warped = warp_tensor(
                        cart_prev.as_ref().expect("exchange needs cart features"),
                        self.cart_to_polar[k].as_ref().expect("c2p warp"),
                    );
                    tensor::concat_channels(&polar_prev, &warped)
                }
                _ => polar_prev.clone(),
            };
            let (pk, cache) = self.polar_blocks[k].forward_train(
                polar_in,
                params,
                &mut self.buffers,
                update_stats,
            )?;
            polar_caches.push(cache);
            polar_prev = pk;
            if let Some(ck) = next_cart {
                cart_prev = Some(ck);
            }
        }

        // Head: upsample block-4 output to the stage-1 grid, fuse with the
        // stored stage-1 features, project, pool, and recover full theta.
        let (h1, w1) = sp[1];
        let upsampled = upsample_bilinear(&polar_prev, h1, w1, true)?;
        let head_in = tensor::concat_channels(&upsampled, polar_caches[0].output());
        let head_out = self.head.forward(&head_in, params)?;
        let pooled = mean_over_rows(&head_out);
        let out = upsample_bilinear(&pooled, 1, self.cfg.theta, true)?;
        let logits = self.logits_from_tensor(&out);
        Ok((
            logits,
            Trace {
                polar: polar_caches,
                cart: cart_caches,
                head_in,
                head_out,
            },
        ))
    }

    /// Inference-mode forward pass (running statistics, no trace).
    pub fn forward_infer(&self, pairs: &[InputPair]) -> Result<Vec<Logits>> {
        let (polar0, cart0) = self.batch_tensors(pairs)?;
        let variant = self.cfg.variant;
        let sp = self.cfg.polar_sizes();
        let params = &self.params;
        let buffers = &self.buffers;

        let mut cart_prev: Option<Tensor> = None;
        if !self.cart_blocks.is_empty() {
            cart_prev = Some(self.cart_blocks[0].forward_eval(&cart0, params, buffers)?);
        }
        let polar_in1 = match variant {
            Variant::Single => {
                let warped = warp_tensor(
                    cart_prev.as_ref().expect("single has cart block 1"),
                    self.cart_to_polar[0].as_ref().expect("single warp"),
                );
                tensor::concat_channels(&polar0, &warped)
            }
            _ => polar0,
        };
        let mut polar_prev = self.polar_blocks[0].forward_eval(&polar_in1, params, buffers)?;
        let stage1 = polar_prev.clone();

        for k in 1..4 {
            let next_cart = if k < self.cart_blocks.len() {
                let prev = cart_prev.as_ref().expect("cart chain");
                let cart_in = match variant {
                    Variant::Full => {
                        let warped = warp_tensor(
                            &polar_prev,
                            self.polar_to_cart[k].as_ref().expect("full p2c warp"),
                        );
                        tensor::concat_channels(prev, &warped)
                    }
                    _ => prev.clone(),
                };
                Some(self.cart_blocks[k].forward_eval(&cart_in, params, buffers)?)
            } else {
                None
            };
            let polar_in = match variant {
                Variant::Full | Variant::OneWay => {
                    let warped = warp_tensor(
                        cart_prev.as_ref().expect("exchange needs cart features"),
                        self.cart_to_polar[k].as_ref().expect("c2p warp"),
                    );
                    tensor::concat_channels(&polar_prev, &warped)
                }
                _ => polar_prev.clone(),
            };
            polar_prev = self.polar_blocks[k].forward_eval(&polar_in, params, buffers)?;
            if let Some(ck) = next_cart {
                cart_prev = Some(ck);
            }
        }

        let (h1, w1) = sp[1];
        let upsampled = upsample_bilinear(&polar_prev, h1, w1, true)?;
        let head_in = tensor::concat_channels(&upsampled, &stage1);
        let head_out = self.head.forward(&head_in, params)?;
        let pooled = mean_over_rows(&head_out);
        let out = upsample_bilinear(&pooled, 1, self.cfg.theta, true)?;
        Ok(self.logits_from_tensor(&out))
    }

    /// Backward pass: accumulate parameter gradients for a batch cotangent.
    pub fn backward(&self, trace: &Trace, dlogits: &[Logits], grads: &mut [f64]) {
        assert_eq!(grads.len(), self.params.len());
        let variant = self.cfg.variant;
        let params = &self.params;
        let sp = self.cfg.polar_sizes();
        let sc = self.cfg.cart_sizes();
        let pc = self.cfg.polar_channels;
        let cc = self.cfg.cart_channels;

        // Head chain.
        let d_out = self.tensor_from_dlogits(dlogits);
        let d_pooled = upsample_bilinear_adjoint(&d_out, 1, sp[1].1, true);
        let d_head_out = mean_over_rows_adjoint(&d_pooled, trace.head_out.h());
        let d_head_in = self
            .head
            .backward(&trace.head_in, &d_head_out, params, grads);
        let (d_upsampled, d_p1_head) = tensor::split_channels(&d_head_in, pc[3]);
        let (p4h, p4w) = sp[4];
        let d_p4 = upsample_bilinear_adjoint(&d_upsampled, p4h, p4w, true);

        // Stage-wise cotangent accumulators for block outputs.
        let mut d_polar: [Option<Tensor>; 4] = [None, None, None, Some(d_p4)];
        let mut d_cart: [Option<Tensor>; 3] = [None, None, None];
        add_into(&mut d_polar[0], d_p1_head);

        // Blocks 4..2: peel the concatenated inputs apart and route the
        // cross-branch parts through the warp adjoints.
        for k in (1..4).rev() {
            let d_pk = d_polar[k].take().expect("polar cotangent");
            let d_polar_in = self.polar_blocks[k].backward(&trace.polar[k], &d_pk, params, grads);
            match variant {
                Variant::Full | Variant::OneWay => {
                    let (d_prev, d_warped) = tensor::split_channels(&d_polar_in, pc[k - 1]);
                    add_into(&mut d_polar[k - 1], d_prev);
                    let table = self.cart_to_polar[k].as_ref().expect("c2p warp");
                    let d_ck = warp_tensor_adjoint(&d_warped, table, sc[k].0, sc[k].1);
                    add_into(&mut d_cart[k - 1], d_ck);
                }
                _ => add_into(&mut d_polar[k - 1], d_polar_in),
            }

            // Matching Cartesian block at this stage (output index k).
            if k < self.cart_blocks.len() {
                if let Some(d_ck) = d_cart[k].take() {
                    let d_cart_in =
                        self.cart_blocks[k].backward(&trace.cart[k], &d_ck, params, grads);
                    match variant {
                        Variant::Full => {
                            let (d_prev, d_warped) = tensor::split_channels(&d_cart_in, cc[k - 1]);
                            add_into(&mut d_cart[k - 1], d_prev);
                            let table = self.polar_to_cart[k].as_ref().expect("p2c warp");
                            let d_pk_extra =
                                warp_tensor_adjoint(&d_warped, table, sp[k].0, sp[k].1);
                            add_into(&mut d_polar[k - 1], d_pk_extra);
                        }
                        _ => add_into(&mut d_cart[k - 1], d_cart_in),
                    }
                }
            }
        }

        // Block 1 of both branches.
        let d_p1 = d_polar[0].take().expect("stage-1 polar cotangent");
        let d_polar_in1 = self.polar_blocks[0].backward(&trace.polar[0], &d_p1, params, grads);
        if variant == Variant::Single {
            let (_, d_warped) = tensor::split_channels(&d_polar_in1, self.cfg.stack_depth);
            let table = self.cart_to_polar[0].as_ref().expect("single warp");
            let d_c1 = warp_tensor_adjoint(&d_warped, table, sc[1].0, sc[1].1);
            add_into(&mut d_cart[0], d_c1);
        }
        if !self.cart_blocks.is_empty() {
            if let Some(d_c1) = d_cart[0].take() {
                let _ = self.cart_blocks[0].backward(&trace.cart[0], &d_c1, params, grads);
            }
        }
    }
}
