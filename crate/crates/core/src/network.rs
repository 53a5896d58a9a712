//! Dual-encoder / shared-decoder U-Net.
//!
//! Both encoders share one [`ArchitectureSpec`] and are built from
//! conv-IN-LReLU blocks (`conv1, down1, conv2, ..., downN`). The decoder
//! first fuses the concatenated bottlenecks of the general and target
//! encoders, then walks back up with transposed convolutions, concatenating
//! skip tensors taken from the target encoder only. Sigmoid heads on the
//! finest decoder stages provide deep supervision.
//!
//! Every subnetwork owns a flat [`ParamStore`]; the three stores are the
//! parameter groups the trainer updates independently.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, ConvGeom, NormCache, UpGeom};
use crate::tensor::Tensor;

/// Layer widths, kernels and strides of one encoder (the decoder mirrors it).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    /// 2 or 3 spatial axes.
    pub ndim: usize,
    pub in_channels: usize,
    /// Input patch, one extent per spatial axis.
    pub patch: Vec<usize>,
    /// Output widths of `conv1, ..., convN` followed by the bottleneck width.
    pub channels: Vec<usize>,
    /// Kernel of `conv1 .. convN`, always given as `[d, h, w]`.
    pub kernels: Vec<[usize; 3]>,
    /// Stride of `down1 .. downN` as `[d, h, w]`.
    pub strides: Vec<[usize; 3]>,
    /// Number of sigmoid heads, attached to the finest decoder stages.
    pub ds_heads: usize,
}

impl ArchitectureSpec {
    /// 3D U-Net for 56x160x192 CT patches.
    pub fn standard_3d() -> Self {
        let k3 = [3, 3, 3];
        Self {
            name: "standard-3d".into(),
            ndim: 3,
            in_channels: 1,
            patch: vec![56, 160, 192],
            channels: vec![32, 64, 128, 256, 320, 320],
            kernels: vec![[1, 3, 3], k3, k3, k3, k3],
            strides: vec![[1, 2, 2], [2, 2, 2], [2, 2, 2], [2, 2, 2], [1, 2, 2]],
            ds_heads: 3,
        }
    }

    /// 2D U-Net for 448x384 slices.
    pub fn standard_2d() -> Self {
        Self {
            name: "standard-2d".into(),
            ndim: 2,
            in_channels: 1,
            patch: vec![448, 384],
            channels: vec![32, 64, 128, 256, 480, 480, 480],
            kernels: vec![[1, 3, 3]; 6],
            strides: vec![[1, 2, 2]; 6],
            ds_heads: 4,
        }
    }

    /// Three resolutions, eight base channels, 64x64 patches.
    pub fn tiny() -> Self {
        Self {
            name: "tiny".into(),
            ndim: 2,
            in_channels: 1,
            patch: vec![64, 64],
            channels: vec![8, 16, 32],
            kernels: vec![[1, 3, 3]; 2],
            strides: vec![[1, 2, 2]; 2],
            ds_heads: 2,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "standard-3d" => Some(Self::standard_3d()),
            "standard-2d" => Some(Self::standard_2d()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    /// Number of downsampling stages.
    pub fn levels(&self) -> usize {
        self.strides.len()
    }

    pub fn patch3(&self) -> [usize; 3] {
        crate::grid::dims3(&self.patch)
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.levels();
        if !(2..=3).contains(&self.ndim) || self.patch.len() != self.ndim {
            return Err(Error::Config(format!(
                "architecture '{}' needs ndim 2 or 3 and a patch of matching rank",
                self.name
            )));
        }
        if n == 0 || self.channels.len() != n + 1 || self.kernels.len() != n {
            return Err(Error::Config(format!(
                "architecture '{}': {} strides need {} channel widths and {} kernels",
                self.name,
                n,
                n + 1,
                n
            )));
        }
        if self.in_channels == 0 || self.channels.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.ds_heads == 0 || self.ds_heads > n {
            return Err(Error::Config(format!("ds_heads must lie in 1..={n}, got {}", self.ds_heads)));
        }
        for k in &self.kernels {
            if k.iter().any(|&v| v % 2 == 0) || (self.ndim == 2 && k[0] != 1) {
                return Err(Error::Config(format!("kernel {k:?} must be odd (and flat in 2D)")));
            }
        }
        for s in &self.strides {
            if s.contains(&0) || (self.ndim == 2 && s[0] != 1) {
                return Err(Error::Config(format!("invalid stride {s:?}")));
            }
        }
        let offset = 3 - self.ndim;
        for axis in 0..self.ndim {
            let stride: usize = self.strides.iter().map(|s| s[axis + offset]).product();
            let extent = self.patch[axis];
            if !extent.is_multiple_of(stride) {
                return Err(Error::IndivisiblePatch { axis, extent, stride });
            }
        }
        Ok(())
    }

    /// Kernel of the strided convolution `down{level}` (1-based): the kernel of
    /// the stage it opens, and the deepest kernel for the bottleneck.
    fn down_kernel(&self, level: usize) -> [usize; 3] {
        let next = level.min(self.levels() - 1);
        let mut k = self.kernels[next];
        let s = self.strides[level - 1];
        for a in 0..3 {
            if s[a] > 1 {
                k[a] = 3;
            }
        }
        k
    }
}

/// Location of one named parameter inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter buffer with a name table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    values: Vec<f64>,
    entries: Vec<ParamEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slot {
    offset: usize,
    len: usize,
}

impl Slot {
    fn of<'a>(&self, buf: &'a [f64]) -> &'a [f64] {
        &buf[self.offset..self.offset + self.len]
    }

    fn of_mut<'a>(&self, buf: &'a mut [f64]) -> &'a mut [f64] {
        &mut buf[self.offset..self.offset + self.len]
    }
}

impl ParamStore {
    fn alloc(&mut self, name: String, shape: Vec<usize>) -> Slot {
        let offset = self.values.len();
        let len: usize = shape.iter().product();
        self.values.resize(offset + len, 0.0);
        self.entries.push(ParamEntry { name, shape, offset });
        Slot { offset, len }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Replaces the values, keeping the layout.
    pub fn load(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(shape_err(self.values.len(), values.len()));
        }
        self.values = values;
        Ok(())
    }
}

/// Conv, instance norm, leaky rectifier.
#[derive(Debug, Clone)]
struct ConvBlock {
    name: String,
    geom: ConvGeom,
    weight: Slot,
    bias: Slot,
    gamma: Slot,
    beta: Slot,
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Tensor,
    norm: NormCache,
    pre_activation: Tensor,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, name: String, geom: ConvGeom) -> Self {
        let k = geom.kernel;
        let weight = store.alloc(
            format!("{name}.weight"),
            vec![geom.out_channels, geom.in_channels, k[0], k[1], k[2]],
        );
        let bias = store.alloc(format!("{name}.bias"), vec![geom.out_channels]);
        let gamma = store.alloc(format!("{name}.norm.weight"), vec![geom.out_channels]);
        let beta = store.alloc(format!("{name}.norm.bias"), vec![geom.out_channels]);
        Self { name, geom, weight, bias, gamma, beta }
    }

    fn init(&self, values: &mut [f64], rng: &mut ChaCha8Rng) {
        let fan_in = self.geom.in_channels * self.geom.kernel.iter().product::<usize>();
        fill_normal(self.weight.of_mut(values), ops::init_std(fan_in), rng);
        self.gamma.of_mut(values).fill(1.0);
    }

    fn forward(&self, p: &[f64], x: &Tensor) -> (Tensor, BlockCache) {
        let z = self.geom.forward(self.weight.of(p), self.bias.of(p), x);
        let (pre_activation, norm) = ops::instance_norm_forward(self.gamma.of(p), self.beta.of(p), &z);
        let y = ops::leaky_relu(&pre_activation);
        (y, BlockCache { input: x.clone(), norm, pre_activation })
    }

    fn backward(&self, p: &[f64], cache: &BlockCache, dy: &Tensor, g: &mut [f64]) -> Tensor {
        let d_pre = ops::leaky_relu_backward(&cache.pre_activation, dy);
        let mut d_gamma = vec![0.0; self.gamma.len];
        let mut d_beta = vec![0.0; self.beta.len];
        let dz = ops::instance_norm_backward(self.gamma.of(p), &cache.norm, &d_pre, &mut d_gamma, &mut d_beta);
        ops::axpy(self.gamma.of_mut(g), 1.0, &d_gamma);
        ops::axpy(self.beta.of_mut(g), 1.0, &d_beta);
        let mut d_w = vec![0.0; self.weight.len];
        let mut d_b = vec![0.0; self.bias.len];
        let dx = self.geom.backward(self.weight.of(p), &cache.input, &dz, &mut d_w, &mut d_b);
        ops::axpy(self.weight.of_mut(g), 1.0, &d_w);
        ops::axpy(self.bias.of_mut(g), 1.0, &d_b);
        dx
    }
}

fn fill_normal(buf: &mut [f64], std: f64, rng: &mut ChaCha8Rng) {
    let dist = Normal::new(0.0, std).expect("finite std");
    for v in buf {
        *v = dist.sample(rng);
    }
}

/// Contracting path shared by the general and target encoders.
#[derive(Debug, Clone)]
pub struct Encoder {
    blocks: Vec<ConvBlock>,
    params: ParamStore,
}

/// Activations kept from an encoder forward pass.
#[derive(Debug, Clone)]
pub struct EncoderPass {
    caches: Vec<BlockCache>,
    outputs: Vec<Tensor>,
    pub macs: u64,
}

impl EncoderPass {
    /// Output of `conv{level}` (1-based).
    pub fn stage(&self, level: usize) -> &Tensor {
        &self.outputs[2 * (level - 1)]
    }

    pub fn bottleneck(&self) -> &Tensor {
        self.outputs.last().expect("encoder has blocks")
    }

    /// Block outputs in order `conv1, down1, ..., down{n}`.
    pub fn outputs(&self) -> &[Tensor] {
        &self.outputs
    }

    pub fn levels(&self) -> usize {
        self.outputs.len() / 2
    }
}

impl Encoder {
    fn build(spec: &ArchitectureSpec) -> Self {
        let mut params = ParamStore::default();
        let mut blocks = Vec::new();
        let mut in_c = spec.in_channels;
        for level in 1..=spec.levels() {
            let c = spec.channels[level - 1];
            let geom = ConvGeom::same(in_c, c, spec.kernels[level - 1], [1, 1, 1]);
            blocks.push(ConvBlock::new(&mut params, format!("conv{level}"), geom));
            let geom = ConvGeom::same(c, spec.channels[level], spec.down_kernel(level), spec.strides[level - 1]);
            blocks.push(ConvBlock::new(&mut params, format!("down{level}"), geom));
            in_c = spec.channels[level];
        }
        Self { blocks, params }
    }

    fn init(&mut self, rng: &mut ChaCha8Rng) {
        for b in &self.blocks {
            b.init(&mut self.params.values, rng);
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn forward(&self, x: &Tensor) -> EncoderPass {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut outputs = Vec::with_capacity(self.blocks.len());
        let mut macs = 0;
        let mut h = x.clone();
        for b in &self.blocks {
            macs += b.geom.macs(h.dims);
            let (y, cache) = b.forward(&self.params.values, &h);
            caches.push(cache);
            outputs.push(y.clone());
            h = y;
        }
        EncoderPass { caches, outputs, macs }
    }

    /// Accumulates into `grad` the parameter gradient induced by gradients
    /// on the stage outputs (`d_stages[level - 1]`) and on the bottleneck.
    pub fn backward(
        &self,
        pass: &EncoderPass,
        d_stages: &[Option<Tensor>],
        d_bottleneck: Option<&Tensor>,
        grad: &mut [f64],
    ) {
        let deepest = d_stages.iter().rposition(Option::is_some).map(|l| 2 * l);
        let start = if d_bottleneck.is_some() { Some(self.blocks.len() - 1) } else { deepest };
        let Some(start) = start else { return };
        let mut running: Option<Tensor> = d_bottleneck.filter(|_| start == self.blocks.len() - 1).cloned();
        for i in (0..=start).rev() {
            let mut dy = running.take().unwrap_or_else(|| {
                let o = &pass.outputs[i];
                Tensor::zeros(o.channels, o.dims)
            });
            if i % 2 == 0 {
                if let Some(Some(d)) = d_stages.get(i / 2) {
                    dy.add_assign(d);
                }
            }
            running = Some(self.blocks[i].backward(&self.params.values, &pass.caches[i], &dy, grad));
        }
    }
}

#[derive(Debug, Clone)]
struct UpLayer {
    geom: UpGeom,
    weight: Slot,
    bias: Slot,
}

#[derive(Debug, Clone)]
struct Head {
    geom: ConvGeom,
    weight: Slot,
    bias: Slot,
    level: usize,
}

/// Expanding path consuming the fused bottlenecks and target skips.
#[derive(Debug, Clone)]
pub struct Decoder {
    fuse: ConvBlock,
    ups: Vec<UpLayer>,
    convs: Vec<ConvBlock>,
    heads: Vec<Head>,
    levels: usize,
    params: ParamStore,
}

#[derive(Debug, Clone)]
pub struct DecoderPass {
    fuse_cache: BlockCache,
    up_inputs: Vec<Tensor>,
    conv_caches: Vec<BlockCache>,
    stage_outputs: Vec<Tensor>,
    /// Sigmoid probabilities, full resolution first.
    pub outputs: Vec<Tensor>,
    pub macs: u64,
}

impl DecoderPass {
    /// Outputs of `conv{n+1}, ..., conv{2n}`, coarsest first.
    pub fn stage_outputs(&self) -> &[Tensor] {
        &self.stage_outputs
    }
}

impl Decoder {
    fn build(spec: &ArchitectureSpec) -> Self {
        let n = spec.levels();
        let mut params = ParamStore::default();
        let cb = spec.bottleneck_channels();
        let fuse = ConvBlock::new(&mut params, "fuse".into(), ConvGeom::same(2 * cb, cb, spec.kernels[n - 1], [1, 1, 1]));
        let mut ups = Vec::new();
        let mut convs = Vec::new();
        for j in 0..n {
            let level = n - j;
            let name = n + 1 + j;
            let c = spec.channels[level - 1];
            let geom = UpGeom { in_channels: spec.channels[level], out_channels: c, factor: spec.strides[level - 1] };
            let weight = params.alloc(
                format!("up{name}.weight"),
                vec![geom.in_channels, geom.out_channels, geom.factor[0], geom.factor[1], geom.factor[2]],
            );
            let bias = params.alloc(format!("up{name}.bias"), vec![c]);
            ups.push(UpLayer { geom, weight, bias });
            let geom = ConvGeom::same(2 * c, c, spec.kernels[level - 1], [1, 1, 1]);
            convs.push(ConvBlock::new(&mut params, format!("conv{name}"), geom));
        }
        let mut heads = Vec::new();
        for level in 1..=spec.ds_heads {
            let c = spec.channels[level - 1];
            let geom = ConvGeom::same(c, 1, [1, 1, 1], [1, 1, 1]);
            let weight = params.alloc(format!("head{level}.weight"), vec![1, c, 1, 1, 1]);
            let bias = params.alloc(format!("head{level}.bias"), vec![1]);
            heads.push(Head { geom, weight, bias, level });
        }
        Self { fuse, ups, convs, heads, levels: n, params }
    }

    fn init(&mut self, rng: &mut ChaCha8Rng) {
        let v = &mut self.params.values;
        self.fuse.init(v, rng);
        for (up, conv) in self.ups.iter().zip(&self.convs) {
            fill_normal(up.weight.of_mut(v), ops::init_std(up.geom.in_channels), rng);
            conv.init(v, rng);
        }
        for h in &self.heads {
            fill_normal(h.weight.of_mut(v), ops::init_std(h.geom.in_channels), rng);
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn head_index(&self, level: usize) -> Option<usize> {
        self.heads.iter().position(|h| h.level == level)
    }

    /// `fused` is the concatenation of both bottlenecks; `skips[level - 1]`
    /// is the target encoder's `conv{level}` output.
    pub fn forward(&self, fused: &Tensor, skips: &[&Tensor]) -> Result<DecoderPass> {
        if skips.len() != self.levels {
            return Err(shape_err(self.levels, skips.len()));
        }
        let p = &self.params.values;
        let mut macs = self.fuse.geom.macs(fused.dims);
        let (mut h, fuse_cache) = self.fuse.forward(p, fused);
        let mut up_inputs = Vec::with_capacity(self.levels);
        let mut conv_caches = Vec::with_capacity(self.levels);
        let mut stage_outputs = Vec::with_capacity(self.levels);
        for j in 0..self.levels {
            let level = self.levels - j;
            let up = &self.ups[j];
            macs += up.geom.macs(h.dims);
            let u = up.geom.forward(up.weight.of(p), up.bias.of(p), &h);
            up_inputs.push(h);
            let skip = skips[level - 1];
            if skip.dims != u.dims {
                return Err(shape_err(u.shape_vec(), skip.shape_vec()));
            }
            let cat = Tensor::concat(&[&u, skip])?;
            macs += self.convs[j].geom.macs(cat.dims);
            let (y, cache) = self.convs[j].forward(p, &cat);
            conv_caches.push(cache);
            stage_outputs.push(y.clone());
            h = y;
        }
        let mut outputs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let x = &stage_outputs[self.levels - head.level];
            macs += head.geom.macs(x.dims);
            let mut z = head.geom.forward(head.weight.of(p), head.bias.of(p), x);
            z.data.iter_mut().for_each(|v| *v = ops::sigmoid(*v));
            outputs.push(z);
        }
        Ok(DecoderPass { fuse_cache, up_inputs, conv_caches, stage_outputs, outputs, macs })
    }

    /// Gradients with respect to the fused input and every skip tensor, given
    /// gradients on the head probabilities.
    pub fn backward(&self, pass: &DecoderPass, d_outputs: &[Tensor], grad: &mut [f64]) -> (Tensor, Vec<Tensor>) {
        let p = &self.params.values;
        // filled finest level first
        let mut d_skips: Vec<Tensor> = Vec::with_capacity(self.levels);
        let mut running: Option<Tensor> = None;
        for j in (0..self.levels).rev() {
            let level = self.levels - j;
            let out = &pass.stage_outputs[j];
            let mut dy = running.take().unwrap_or_else(|| Tensor::zeros(out.channels, out.dims));
            if let Some(hi) = self.head_index(level) {
                let head = &self.heads[hi];
                let prob = &pass.outputs[hi];
                let dz_data = prob.data.iter().zip(&d_outputs[hi].data).map(|(pv, g)| g * pv * (1.0 - pv)).collect();
                let dz = Tensor { channels: 1, dims: prob.dims, data: dz_data };
                let mut dw = vec![0.0; head.weight.len];
                let mut db = vec![0.0; head.bias.len];
                let dx = head.geom.backward(head.weight.of(p), out, &dz, &mut dw, &mut db);
                ops::axpy(head.weight.of_mut(grad), 1.0, &dw);
                ops::axpy(head.bias.of_mut(grad), 1.0, &db);
                dy.add_assign(&dx);
            }
            let d_cat = self.convs[j].backward(p, &pass.conv_caches[j], &dy, grad);
            let c = d_cat.channels / 2;
            let mut parts = d_cat.split(&[c, c]).into_iter();
            let d_up = parts.next().expect("two halves");
            d_skips.push(parts.next().expect("two halves"));
            let up = &self.ups[j];
            let mut dw = vec![0.0; up.weight.len];
            let mut db = vec![0.0; up.bias.len];
            let dh = up.geom.backward(up.weight.of(p), &pass.up_inputs[j], &d_up, &mut dw, &mut db);
            ops::axpy(up.weight.of_mut(grad), 1.0, &dw);
            ops::axpy(up.bias.of_mut(grad), 1.0, &db);
            running = Some(dh);
        }
        let d_fuse = running.expect("at least one level");
        let d_fused = self.fuse.backward(p, &pass.fuse_cache, &d_fuse, grad);
        (d_fused, d_skips)
    }
}

/// Parameter group identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    GeneralEncoder,
    TargetEncoder,
    Decoder,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::GeneralEncoder, Group::TargetEncoder, Group::Decoder];

    pub fn key(&self) -> &'static str {
        match self {
            Group::GeneralEncoder => "general_encoder",
            Group::TargetEncoder => "target_encoder",
            Group::Decoder => "decoder",
        }
    }
}

/// Where a decoder input comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    General(String),
    Target(String),
    Decoder(String),
}

/// One data-flow edge into a decoder layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub into: String,
    pub from: Source,
}

/// A probed feature size, e.g. `conv1: 32x56x160x192`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageShape {
    pub stage: String,
    pub channels: usize,
    pub dims: Vec<usize>,
}

impl StageShape {
    pub fn label(&self) -> String {
        let mut s = self.channels.to_string();
        for d in &self.dims {
            s.push('x');
            s.push_str(&d.to_string());
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct DualEncoderNet {
    spec: ArchitectureSpec,
    general: Encoder,
    target: Encoder,
    decoder: Decoder,
}

/// Everything a forward pass on target inputs produces for one sample.
#[derive(Debug, Clone)]
pub struct TargetPass {
    pub general: EncoderPass,
    pub target: EncoderPass,
    pub decoder: DecoderPass,
}

impl TargetPass {
    pub fn predictions(&self) -> &[Tensor] {
        &self.decoder.outputs
    }

    pub fn general_bottleneck(&self) -> &Tensor {
        self.general.bottleneck()
    }

    pub fn target_bottleneck(&self) -> &Tensor {
        self.target.bottleneck()
    }

    pub fn macs(&self) -> u64 {
        self.general.macs + self.target.macs + self.decoder.macs
    }
}

impl DualEncoderNet {
    pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut net = Self::build_uninit(spec)?;
        for (stream, group) in Group::ALL.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream as u64 + 1);
            match group {
                Group::GeneralEncoder => net.general.init(&mut rng),
                Group::TargetEncoder => net.target.init(&mut rng),
                Group::Decoder => net.decoder.init(&mut rng),
            }
        }
        Ok(net)
    }

    /// Allocates the layout with all parameters zero (used before loading a
    /// checkpoint).
    pub fn build_uninit(spec: &ArchitectureSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec: spec.clone(),
            general: Encoder::build(spec),
            target: Encoder::build(spec),
            decoder: Decoder::build(spec),
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn general(&self) -> &Encoder {
        &self.general
    }

    pub fn target(&self) -> &Encoder {
        &self.target
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn params(&self, group: Group) -> &ParamStore {
        match group {
            Group::GeneralEncoder => &self.general.params,
            Group::TargetEncoder => &self.target.params,
            Group::Decoder => &self.decoder.params,
        }
    }

    pub fn params_mut(&mut self, group: Group) -> &mut ParamStore {
        match group {
            Group::GeneralEncoder => &mut self.general.params,
            Group::TargetEncoder => &mut self.target.params,
            Group::Decoder => &mut self.decoder.params,
        }
    }

    pub fn num_params(&self) -> usize {
        Group::ALL.iter().map(|g| self.params(*g).len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.channels != self.spec.in_channels || x.dims != self.spec.patch3() {
            return Err(shape_err(
                (self.spec.in_channels, self.spec.patch3()),
                (x.channels, x.dims),
            ));
        }
        Ok(())
    }

    /// Runs both encoders on a target input and decodes.
    pub fn forward_target(&self, x: &Tensor) -> Result<TargetPass> {
        self.check_input(x)?;
        let general = self.general.forward(x);
        let target = self.target.forward(x);
        let decoder = self.decode(general.bottleneck(), &target)?;
        Ok(TargetPass { general, target, decoder })
    }

    /// General encoder only; no decoder work.
    pub fn forward_general(&self, x: &Tensor) -> Result<EncoderPass> {
        self.check_input(x)?;
        Ok(self.general.forward(x))
    }

    /// Decoder pass on an explicit general bottleneck and a target encoder
    /// pass. The only general-encoder tensor the decoder ever sees is
    /// `general_bottleneck`.
    pub fn decode(&self, general_bottleneck: &Tensor, target: &EncoderPass) -> Result<DecoderPass> {
        let fused = Tensor::concat(&[general_bottleneck, target.bottleneck()])?;
        let skips: Vec<&Tensor> = (1..=self.spec.levels()).map(|l| target.stage(l)).collect();
        self.decoder.forward(&fused, &skips)
    }

    /// Full-resolution foreground probability for one patch.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_target(x)?.decoder.outputs.swap_remove(0))
    }

    /// Data-flow edges into the decoder, derived from the same layer table
    /// the forward pass walks.
    pub fn wiring(&self) -> Vec<Edge> {
        let n = self.spec.levels();
        let bottleneck = format!("down{n}");
        let mut edges = vec![
            Edge { into: "fuse".into(), from: Source::General(bottleneck.clone()) },
            Edge { into: "fuse".into(), from: Source::Target(bottleneck) },
        ];
        let mut prev = String::from("fuse");
        for j in 0..n {
            let level = n - j;
            let name = n + 1 + j;
            edges.push(Edge { into: format!("up{name}"), from: Source::Decoder(prev) });
            edges.push(Edge { into: format!("conv{name}"), from: Source::Decoder(format!("up{name}")) });
            edges.push(Edge { into: format!("conv{name}"), from: Source::Target(format!("conv{level}")) });
            prev = format!("conv{name}");
        }
        edges
    }

    /// Feature sizes of every encoder and decoder stage for the configured
    /// patch, computed from the layer geometry.
    pub fn probe_shapes(&self) -> Vec<StageShape> {
        let ndim = self.spec.ndim;
        let show = |dims: [usize; 3]| dims[3 - ndim..].to_vec();
        let mut rows = Vec::new();
        let mut dims = self.spec.patch3();
        rows.push(StageShape { stage: "input".into(), channels: self.spec.in_channels, dims: show(dims) });
        for b in &self.general.blocks {
            dims = b.geom.out_dims(dims);
            rows.push(StageShape { stage: b.name.clone(), channels: b.geom.out_channels, dims: show(dims) });
        }
        dims = self.decoder.fuse.geom.out_dims(dims);
        rows.push(StageShape { stage: "fuse".into(), channels: self.decoder.fuse.geom.out_channels, dims: show(dims) });
        for (up, conv) in self.decoder.ups.iter().zip(&self.decoder.convs) {
            dims = up.geom.out_dims(dims);
            let name = conv.name.replace("conv", "up");
            rows.push(StageShape { stage: name, channels: up.geom.out_channels, dims: show(dims) });
            dims = conv.geom.out_dims(dims);
            rows.push(StageShape { stage: conv.name.clone(), channels: conv.geom.out_channels, dims: show(dims) });
        }
        rows.push(StageShape { stage: "output".into(), channels: 1, dims: show(dims) });
        rows
    }
}
