//! A small Inception-flavoured backbone: a strided stem followed by three
//! kinds of multi-branch blocks, each branch a chain of
//! convolution/normalization/ReLU units whose outputs are concatenated.
//!
//! Also hosts the activation/parameter memory planner, which walks the same
//! layer layout as the network builder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::conv::{conv2d_backward_ref, conv2d_ref, ConvParams, ConvRef};
use crate::ops::deform::{deform_conv_backward_ref, deform_conv_forward_ref};
use crate::params::{ModelParams, ParamId, ParamKind};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    StemCbr,
    BlockA,
    BlockB,
    BlockC,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub repeats: usize,
    pub out_channels: usize,
    /// First repeat runs at stride 2.
    pub downsample: bool,
}

impl BlockSpec {
    pub const fn new(kind: BlockKind, repeats: usize, out_channels: usize, downsample: bool) -> Self {
        BlockSpec {
            kind,
            repeats,
            out_channels,
            downsample,
        }
    }
}

/// Stem of two stride-2 stages, then A x3, B x1, C x2.
pub fn default_specs() -> Vec<BlockSpec> {
    vec![
        BlockSpec::new(BlockKind::StemCbr, 2, 8, true),
        BlockSpec::new(BlockKind::BlockA, 3, 16, true),
        BlockSpec::new(BlockKind::BlockB, 1, 32, true),
        BlockSpec::new(BlockKind::BlockC, 2, 64, false),
    ]
}

/// [`default_specs`] with every block repeat count doubled.
pub fn doubled_specs() -> Vec<BlockSpec> {
    default_specs()
        .into_iter()
        .map(|mut s| {
            if s.kind != BlockKind::StemCbr {
                s.repeats *= 2;
            }
            s
        })
        .collect()
}

pub fn validate_specs(specs: &[BlockSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::invalid("backbone needs at least one block"));
    }
    for s in specs {
        if s.repeats == 0 {
            return Err(Error::invalid(format!("{:?}: repeats must be >= 1", s.kind)));
        }
        if s.out_channels < 4 {
            return Err(Error::invalid(format!("{:?}: out_channels must be >= 4", s.kind)));
        }
    }
    Ok(())
}

pub fn total_stride(specs: &[BlockSpec]) -> usize {
    specs
        .iter()
        .map(|s| match (s.kind, s.downsample) {
            (BlockKind::StemCbr, true) => 1 << s.repeats,
            (_, true) => 2,
            (_, false) => 1,
        })
        .product()
}

/// Shape of one convolution/normalization/ReLU unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct UnitShape {
    kernel: usize,
    stride: usize,
    out_channels: usize,
}

/// Branch layout of one block repeat.
fn block_layout(spec: &BlockSpec, repeat: usize) -> Vec<Vec<UnitShape>> {
    let out = spec.out_channels;
    let (h, q) = (out / 2, out / 4);
    let first_stride = if spec.downsample && repeat == 0 { 2 } else { 1 };
    let u = |kernel, out_channels| UnitShape {
        kernel,
        stride: 1,
        out_channels,
    };
    let mut branches = match spec.kind {
        BlockKind::StemCbr => {
            let stride = if spec.downsample { 2 } else { 1 };
            return vec![vec![UnitShape {
                kernel: 3,
                stride,
                out_channels: out,
            }]];
        }
        BlockKind::BlockA => vec![vec![u(1, h)], vec![u(3, out - h)]],
        BlockKind::BlockB => vec![vec![u(1, h)], vec![u(1, q), u(3, out - h)]],
        BlockKind::BlockC => vec![vec![u(1, h)], vec![u(3, q)], vec![u(1, q), u(3, out - h - q)]],
    };
    for b in &mut branches {
        b[0].stride = first_stride;
    }
    branches
}

#[derive(Debug, Clone, PartialEq)]
pub enum NormMode {
    Frozen,
    MovingAverage,
}

/// Per-channel affine normalization with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub mode: NormMode,
}

impl NormState {
    pub fn identity(channels: usize) -> Self {
        NormState {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            mode: NormMode::Frozen,
        }
    }

    /// Moving-average update from one feature map; a no-op when frozen.
    pub fn observe(&mut self, z: &Tensor) -> Result<()> {
        if self.mode == NormMode::Frozen {
            return Ok(());
        }
        let (c, ..) = z.dims3()?;
        if c != self.scale.len() {
            return Err(Error::invalid("normalization channel count mismatch"));
        }
        for ch in 0..c {
            let (m, v) = channel_moments(z.plane(ch));
            self.running_mean[ch] = NORM_MOMENTUM * self.running_mean[ch] + (1.0 - NORM_MOMENTUM) * m;
            self.running_var[ch] = NORM_MOMENTUM * self.running_var[ch] + (1.0 - NORM_MOMENTUM) * v;
        }
        Ok(())
    }
}

fn channel_moments(plane: &[f64]) -> (f64, f64) {
    let n = plane.len() as f64;
    let m = plane.iter().sum::<f64>() / n;
    let v = plane.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v)
}

struct NormRef<'a> {
    scale: &'a [f64],
    shift: &'a [f64],
    mean: &'a [f64],
    var: &'a [f64],
}

fn norm_relu_forward(z: &Tensor, n: &NormRef) -> Result<Tensor> {
    let (c, ..) = z.dims3()?;
    if n.scale.len() != c {
        return Err(Error::invalid(format!(
            "normalization has {} channels, feature map has {c}",
            n.scale.len()
        )));
    }
    let mut y = z.clone();
    for ch in 0..c {
        let inv = 1.0 / (n.var[ch] + NORM_EPS).sqrt();
        let (a, b) = (n.scale[ch] * inv, n.shift[ch] - n.scale[ch] * inv * n.mean[ch]);
        for v in y.plane_mut(ch) {
            *v = (a * *v + b).max(0.0);
        }
    }
    Ok(y)
}

/// Returns `(grad_z, grad_scale, grad_shift)` given the ReLU output `y`.
fn norm_relu_backward(z: &Tensor, y: &Tensor, n: &NormRef, grad_y: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (c, ..) = z.dims3().expect("checked in forward");
    let mut gz = grad_y.clone();
    let mut gscale = vec![0.0; c];
    let mut gshift = vec![0.0; c];
    for ch in 0..c {
        let inv = 1.0 / (n.var[ch] + NORM_EPS).sqrt();
        let (zp, yp) = (z.plane(ch), y.plane(ch));
        let g = gz.plane_mut(ch);
        for i in 0..g.len() {
            if yp[i] <= 0.0 {
                g[i] = 0.0;
                continue;
            }
            gshift[ch] += g[i];
            gscale[ch] += g[i] * (zp[i] - n.mean[ch]) * inv;
            g[i] *= n.scale[ch] * inv;
        }
    }
    (gz, gscale, gshift)
}

impl NormState {
    fn view(&self) -> NormRef<'_> {
        NormRef {
            scale: &self.scale,
            shift: &self.shift,
            mean: &self.running_mean,
            var: &self.running_var,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbrGrads {
    pub x: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

/// `relu(normalize(conv2d(x)))` using the stored statistics.
pub fn cbr_forward(x: &Tensor, conv: &ConvParams, norm: &NormState) -> Result<Tensor> {
    let z = conv2d_ref(x, &conv.view())?;
    norm_relu_forward(&z, &norm.view())
}

pub fn cbr_backward(x: &Tensor, conv: &ConvParams, norm: &NormState, grad_y: &Tensor) -> Result<CbrGrads> {
    let z = conv2d_ref(x, &conv.view())?;
    let y = norm_relu_forward(&z, &norm.view())?;
    if grad_y.shape() != y.shape() {
        return Err(Error::invalid(format!(
            "upstream gradient {:?} does not match output {:?}",
            grad_y.shape(),
            y.shape()
        )));
    }
    let (gz, scale, shift) = norm_relu_backward(&z, &y, &norm.view(), grad_y);
    let g = conv2d_backward_ref(x, &conv.view(), &gz)?;
    Ok(CbrGrads {
        x: g.x,
        weights: g.weights,
        bias: g.bias,
        scale,
        shift,
    })
}

// ---------------------------------------------------------------------------
// Network form, reading weights from a `ModelParams` store.

#[derive(Debug, Clone)]
pub(crate) struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    /// Registers He-uniform weights and zero bias.
    pub fn register(
        params: &mut ModelParams,
        name: &str,
        shape: [usize; 4],
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let a = (6.0 / fan_in).sqrt();
        let w = Tensor::from_fn(&shape, |_| rng.gen_range(-a..a));
        Self::register_with(params, name, w, stride)
    }

    pub fn register_with(params: &mut ModelParams, name: &str, w: Tensor, stride: usize) -> Result<Self> {
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        Ok(ConvLayer {
            w: params.insert(format!("{name}.weight"), ParamKind::Trainable, w)?,
            b: params.insert(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[cout]))?,
            stride,
            pad: k / 2,
        })
    }

    pub fn view<'a>(&self, params: &'a ModelParams) -> ConvRef<'a> {
        ConvRef {
            weights: params.tensor(self.w),
            bias: params.tensor(self.b),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn forward(&self, params: &ModelParams, x: &Tensor) -> Result<Tensor> {
        conv2d_ref(x, &self.view(params))
    }

    /// Accumulates weight/bias gradients, returns the input gradient.
    pub fn backward(&self, params: &ModelParams, x: &Tensor, gy: &Tensor, grads: &mut ModelParams) -> Result<Tensor> {
        let g = conv2d_backward_ref(x, &self.view(params), gy)?;
        grads.tensor_mut(self.w).add_assign(&g.weights)?;
        grads.tensor_mut(self.b).add_assign(&g.bias)?;
        Ok(g.x)
    }
}

#[derive(Debug, Clone)]
struct NormLayer {
    scale: ParamId,
    shift: ParamId,
    mean: ParamId,
    var: ParamId,
}

impl NormLayer {
    fn register(params: &mut ModelParams, name: &str, c: usize) -> Result<Self> {
        Ok(NormLayer {
            scale: params.insert(format!("{name}.scale"), ParamKind::Trainable, Tensor::ones(&[c]))?,
            shift: params.insert(format!("{name}.shift"), ParamKind::Trainable, Tensor::zeros(&[c]))?,
            mean: params.insert(format!("{name}.running_mean"), ParamKind::Statistic, Tensor::zeros(&[c]))?,
            var: params.insert(format!("{name}.running_var"), ParamKind::Statistic, Tensor::ones(&[c]))?,
        })
    }

    fn view<'a>(&self, params: &'a ModelParams) -> NormRef<'a> {
        NormRef {
            scale: params.tensor(self.scale).data(),
            shift: params.tensor(self.shift).data(),
            mean: params.tensor(self.mean).data(),
            var: params.tensor(self.var).data(),
        }
    }
}

/// Statistics produced by a moving-average forward pass, to be written back
/// into the parameter store.
#[derive(Debug, Default)]
pub struct NormUpdates {
    pub(crate) updates: Vec<(ParamId, Tensor)>,
}

impl NormUpdates {
    pub fn apply(self, params: &mut ModelParams) {
        for (id, t) in self.updates {
            *params.tensor_mut(id) = t;
        }
    }
}

#[derive(Debug, Clone)]
struct Unit {
    conv: ConvLayer,
    norm: NormLayer,
    /// Offset-predicting convolution for deformable units.
    offset: Option<ConvLayer>,
}

#[derive(Debug, Clone)]
struct UnitCache {
    x: Tensor,
    offsets: Option<Tensor>,
    z: Tensor,
    y: Tensor,
}

impl Unit {
    fn forward(&self, params: &ModelParams, x: Tensor, warm: Option<&mut NormUpdates>) -> Result<UnitCache> {
        let conv = self.conv.view(params);
        let (z, offsets) = match &self.offset {
            None => (conv2d_ref(&x, &conv)?, None),
            Some(oc) => {
                let off = oc.forward(params, &x)?;
                (deform_conv_forward_ref(&x, &conv, &off)?, Some(off))
            }
        };
        let y = match warm {
            None => norm_relu_forward(&z, &self.norm.view(params))?,
            Some(up) => {
                let mut mean = params.tensor(self.norm.mean).clone();
                let mut var = params.tensor(self.norm.var).clone();
                for ch in 0..mean.len() {
                    let (m, v) = channel_moments(z.plane(ch));
                    let md = mean.data_mut();
                    md[ch] = NORM_MOMENTUM * md[ch] + (1.0 - NORM_MOMENTUM) * m;
                    let vd = var.data_mut();
                    vd[ch] = NORM_MOMENTUM * vd[ch] + (1.0 - NORM_MOMENTUM) * v;
                }
                let n = NormRef {
                    scale: params.tensor(self.norm.scale).data(),
                    shift: params.tensor(self.norm.shift).data(),
                    mean: mean.data(),
                    var: var.data(),
                };
                let y = norm_relu_forward(&z, &n)?;
                up.updates.push((self.norm.mean, mean));
                up.updates.push((self.norm.var, var));
                y
            }
        };
        Ok(UnitCache { x, offsets, z, y })
    }

    fn backward(&self, params: &ModelParams, c: &UnitCache, gy: &Tensor, grads: &mut ModelParams) -> Result<Tensor> {
        let (gz, gscale, gshift) = norm_relu_backward(&c.z, &c.y, &self.norm.view(params), gy);
        add_slice(grads.tensor_mut(self.norm.scale), &gscale);
        add_slice(grads.tensor_mut(self.norm.shift), &gshift);
        let conv = self.conv.view(params);
        match (&self.offset, &c.offsets) {
            (Some(oc), Some(off)) => {
                let g = deform_conv_backward_ref(&c.x, &conv, off, &gz)?;
                grads.tensor_mut(self.conv.w).add_assign(&g.weights)?;
                grads.tensor_mut(self.conv.b).add_assign(&g.bias)?;
                let mut gx = g.x;
                gx.add_assign(&oc.backward(params, &c.x, &g.offsets, grads)?)?;
                Ok(gx)
            }
            _ => self.conv.backward(params, &c.x, &gz, grads),
        }
    }
}

fn add_slice(t: &mut Tensor, v: &[f64]) {
    for (a, b) in t.data_mut().iter_mut().zip(v) {
        *a += b;
    }
}

#[derive(Debug, Clone)]
struct Block {
    branches: Vec<Vec<Unit>>,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    branches: Vec<Vec<UnitCache>>,
}

impl Block {
    fn forward(
        &self,
        params: &ModelParams,
        x: &Tensor,
        mut warm: Option<&mut NormUpdates>,
    ) -> Result<(Tensor, BlockCache)> {
        let mut caches = Vec::with_capacity(self.branches.len());
        for units in &self.branches {
            let mut cur = x.clone();
            let mut bc = Vec::with_capacity(units.len());
            for u in units {
                let c = u.forward(params, cur, warm.as_deref_mut())?;
                cur = c.y.clone();
                bc.push(c);
            }
            caches.push(bc);
        }
        let outs: Vec<&Tensor> = caches.iter().map(|b| &b.last().expect("non-empty branch").y).collect();
        Ok((concat_channels(&outs)?, BlockCache { branches: caches }))
    }

    fn backward(&self, params: &ModelParams, cache: &BlockCache, gy: &Tensor, grads: &mut ModelParams) -> Result<Tensor> {
        let (_, h, w) = gy.dims3()?;
        let mut gx: Option<Tensor> = None;
        let mut ch0 = 0;
        for (units, bc) in self.branches.iter().zip(&cache.branches) {
            let (c, ..) = bc.last().expect("non-empty branch").y.dims3()?;
            let mut g = Tensor::new(vec![c, h, w], gy.data()[ch0 * h * w..(ch0 + c) * h * w].to_vec())?;
            ch0 += c;
            for (u, uc) in units.iter().zip(bc).rev() {
                g = u.backward(params, uc, &g, grads)?;
            }
            match gx.as_mut() {
                None => gx = Some(g),
                Some(acc) => acc.add_assign(&g)?,
            }
        }
        Ok(gx.expect("block has branches"))
    }
}

pub(crate) fn concat_channels(maps: &[&Tensor]) -> Result<Tensor> {
    let (_, h, w) = maps[0].dims3()?;
    let mut data = Vec::new();
    let mut c = 0;
    for m in maps {
        let (mc, mh, mw) = m.dims3()?;
        if (mh, mw) != (h, w) {
            return Err(Error::invalid("cannot concatenate maps of different extents"));
        }
        data.extend_from_slice(m.data());
        c += mc;
    }
    Tensor::new(vec![c, h, w], data)
}

#[derive(Debug, Clone)]
pub struct Backbone {
    blocks: Vec<Block>,
    specs: Vec<BlockSpec>,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
}

#[derive(Debug, Clone)]
pub struct BackboneCache {
    blocks: Vec<BlockCache>,
}

impl Backbone {
    /// Registers all backbone parameters under `prefix`. When `deformable_last`
    /// is set, every 3x3 unit of the final block repeat gets an offset branch
    /// (zero-initialized, so training starts from the plain convolution).
    pub fn build(
        specs: &[BlockSpec],
        in_channels: usize,
        deformable_last: bool,
        prefix: &str,
        params: &mut ModelParams,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        validate_specs(specs)?;
        let mut blocks = Vec::new();
        let mut c_in = in_channels;
        let n_specs = specs.len();
        for (si, spec) in specs.iter().enumerate() {
            for r in 0..spec.repeats {
                let last = si + 1 == n_specs && r + 1 == spec.repeats;
                let mut branches = Vec::new();
                for (bi, layout) in block_layout(spec, r).iter().enumerate() {
                    let mut units = Vec::new();
                    let mut c = c_in;
                    for (ui, us) in layout.iter().enumerate() {
                        let name = format!("{prefix}.s{si}.r{r}.b{bi}.u{ui}");
                        let conv = ConvLayer::register(
                            params,
                            &format!("{name}.conv"),
                            [us.out_channels, c, us.kernel, us.kernel],
                            us.stride,
                            rng,
                        )?;
                        let offset = if deformable_last && last && us.kernel > 1 {
                            let taps = us.kernel * us.kernel;
                            let w = Tensor::zeros(&[2 * taps, c, us.kernel, us.kernel]);
                            Some(ConvLayer::register_with(params, &format!("{name}.offset"), w, us.stride)?)
                        } else {
                            None
                        };
                        let norm = NormLayer::register(params, &format!("{name}.norm"), us.out_channels)?;
                        units.push(Unit { conv, norm, offset });
                        c = us.out_channels;
                    }
                    branches.push(units);
                }
                c_in = spec.out_channels;
                blocks.push(Block { branches });
            }
        }
        Ok(Backbone {
            blocks,
            specs: specs.to_vec(),
            in_channels,
            out_channels: c_in,
            stride: total_stride(specs),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn specs(&self) -> &[BlockSpec] {
        &self.specs
    }

    /// Names of the offset-branch weights, in build order.
    pub fn offset_param_ids(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| b.branches.iter().flatten())
            .filter_map(|u| u.offset.as_ref().map(|o| o.w))
            .collect()
    }

    pub fn forward(&self, params: &ModelParams, x: &Tensor) -> Result<(Tensor, BackboneCache)> {
        self.run(params, x, None)
    }

    /// Forward pass in moving-average mode: statistics are updated with
    /// momentum and used immediately; the new values are returned for the
    /// caller to commit.
    pub fn forward_warm(&self, params: &ModelParams, x: &Tensor) -> Result<(Tensor, NormUpdates)> {
        let mut up = NormUpdates::default();
        let (y, _) = self.run(params, x, Some(&mut up))?;
        Ok((y, up))
    }

    fn run(
        &self,
        params: &ModelParams,
        x: &Tensor,
        mut warm: Option<&mut NormUpdates>,
    ) -> Result<(Tensor, BackboneCache)> {
        let (c, h, w) = x.dims3()?;
        if c != self.in_channels {
            return Err(Error::invalid(format!(
                "backbone expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        if h % self.stride != 0 || w % self.stride != 0 {
            return Err(Error::invalid(format!(
                "input {h}x{w} is not divisible by the backbone stride {}",
                self.stride
            )));
        }
        let mut cur = Tensor::new(vec![c, h, w], x.data().to_vec())?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, bc) = b.forward(params, &cur, warm.as_deref_mut())?;
            caches.push(bc);
            cur = y;
        }
        Ok((cur, BackboneCache { blocks: caches }))
    }

    pub fn backward(
        &self,
        params: &ModelParams,
        cache: &BackboneCache,
        grad_out: &Tensor,
        grads: &mut ModelParams,
    ) -> Result<Tensor> {
        let mut g = grad_out.clone();
        for (b, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            g = b.backward(params, bc, &g, grads)?;
        }
        Ok(g)
    }
}

// ---------------------------------------------------------------------------
// Memory planning.

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMemory {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub activation_bytes: u64,
    pub param_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryPlan {
    pub layers: Vec<LayerMemory>,
    /// Every activation kept for the backward pass, input included.
    pub activation_bytes: u64,
    pub param_bytes: u64,
    /// Largest sum of two consecutive live activations.
    pub peak_bytes: u64,
    /// Activations and their gradients, plus weights, gradients and
    /// momentum buffers.
    pub training_bytes: u64,
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Closed-form activation and parameter accounting for a single-channel
/// square input of side `input_side`.
pub fn memory_plan(specs: &[BlockSpec], input_side: usize, bytes_per_element: u64, batch: u64) -> MemoryPlan {
    let mut layers = vec![LayerMemory {
        name: "input".into(),
        channels: 1,
        height: input_side,
        width: input_side,
        activation_bytes: input_side as u64 * input_side as u64 * bytes_per_element * batch,
        param_bytes: 0,
    }];
    let mut c_in = 1;
    let mut side = input_side;
    for (si, spec) in specs.iter().enumerate() {
        for r in 0..spec.repeats {
            let mut out_side = side;
            for (bi, layout) in block_layout(spec, r).iter().enumerate() {
                let mut c = c_in;
                let mut s = side;
                for (ui, us) in layout.iter().enumerate() {
                    s = ceil_div(s, us.stride);
                    let params = (us.out_channels * (c * us.kernel * us.kernel + 1) + 4 * us.out_channels) as u64;
                    layers.push(LayerMemory {
                        name: format!("s{si}.r{r}.b{bi}.u{ui}"),
                        channels: us.out_channels,
                        height: s,
                        width: s,
                        activation_bytes: (us.out_channels * s * s) as u64 * bytes_per_element * batch,
                        param_bytes: params * bytes_per_element,
                    });
                    c = us.out_channels;
                }
                out_side = s;
            }
            if spec.kind != BlockKind::StemCbr {
                layers.push(LayerMemory {
                    name: format!("s{si}.r{r}.concat"),
                    channels: spec.out_channels,
                    height: out_side,
                    width: out_side,
                    activation_bytes: (spec.out_channels * out_side * out_side) as u64 * bytes_per_element * batch,
                    param_bytes: 0,
                });
            }
            side = out_side;
            c_in = spec.out_channels;
        }
    }
    let activation_bytes = layers.iter().map(|l| l.activation_bytes).sum();
    let param_bytes = layers.iter().map(|l| l.param_bytes).sum();
    let peak_bytes = layers
        .windows(2)
        .map(|w| w[0].activation_bytes + w[1].activation_bytes)
        .max()
        .unwrap_or(layers[0].activation_bytes);
    MemoryPlan {
        layers,
        activation_bytes,
        param_bytes,
        peak_bytes,
        training_bytes: 2 * activation_bytes + 3 * param_bytes,
    }
}

/// Largest input side, a multiple of the backbone stride, whose training
/// footprint fits in `budget_bytes`.
pub fn max_feasible_side(specs: &[BlockSpec], budget_bytes: u64, bytes_per_element: u64, batch: u64) -> Option<usize> {
    let step = total_stride(specs);
    let fits = |n: usize| memory_plan(specs, n * step, bytes_per_element, batch).training_bytes <= budget_bytes;
    if !fits(1) {
        return None;
    }
    let mut lo = 1;
    let mut hi = 2;
    while fits(hi) {
        lo = hi;
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(lo * step)
}
