//! Residual U-Net backbone, parameter layout and the full forward/backward
//! pass of the class-conditional segmentation network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::head::{
    apply_dynamic_head_cached, controller_input, dynamic_head_backward, encode_task,
    generate_kernels, global_average_pool, DynamicKernels, HeadCache, HeadShape,
};
use super::layers::{
    conv2d, conv2d_backward, maxpool2, maxpool2_backward, upconv2, upconv2_backward, ConvShape,
    UpShape,
};
use super::real::Real;
use super::tensor::{relu_backward, Tensor};
use crate::error::{Error, Result};

pub const INIT_SCHEME: &str = "fanin-normal/zero-residual/hyper-fanin/zero-bias";
pub const PARAMS_VERSION: u32 = 1;
const BLOCKS_PER_LEVEL: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    /// Channels of the decoder output `M` fed to the dynamic head.
    pub decoder_channels: usize,
    pub head_channels: usize,
    pub init_scheme: String,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            in_channels: 3,
            base_channels: 32,
            depth: 5,
            decoder_channels: 8,
            head_channels: 8,
            init_scheme: INIT_SCHEME.to_string(),
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_classes", self.num_classes),
            ("in_channels", self.in_channels),
            ("base_channels", self.base_channels),
            ("decoder_channels", self.decoder_channels),
            ("head_channels", self.head_channels),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("network {name} must be ≥ 1")));
            }
        }
        if self.depth < 2 {
            return Err(Error::Config("network depth must be ≥ 2".into()));
        }
        if self.init_scheme != INIT_SCHEME {
            return Err(Error::Config(format!(
                "unknown init scheme '{}'",
                self.init_scheme
            )));
        }
        Ok(())
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Channels of the bottleneck feature `F`.
    pub fn feature_channels(&self) -> usize {
        self.level_channels(self.depth - 1)
    }

    pub fn head_shape(&self) -> HeadShape {
        HeadShape {
            in_channels: self.decoder_channels,
            hidden: self.head_channels,
        }
    }

    pub fn kernel_len(&self) -> usize {
        self.head_shape().kernel_len()
    }

    /// Spatial sizes must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvSlot {
    w: usize,
    b: usize,
    shape: ConvShape,
}

#[derive(Clone, Copy, Debug)]
struct UpSlot {
    w: usize,
    b: usize,
    shape: UpShape,
}

#[derive(Clone, Debug)]
struct BlockSlot {
    conv1: ConvSlot,
    conv2: ConvSlot,
    proj: Option<ConvSlot>,
}

/// Array names and shapes in registration order, plus the structural map
/// from layers to array indices.
#[derive(Clone, Debug)]
pub struct Layout {
    entries: Vec<(String, Vec<usize>, InitKind)>,
    enc: Vec<Vec<BlockSlot>>,
    up: Vec<UpSlot>,
    dec: Vec<Vec<BlockSlot>>,
    out: ConvSlot,
    controller_w: usize,
    controller_b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum InitKind {
    /// N(0, 2 / fan_in), for weights followed by a rectifier.
    He(usize),
    /// N(0, 1 / fan_in), for weights feeding a linear output.
    Lecun(usize),
    /// Controller rows scaled so generated kernels start at the fan-in
    /// scale of the head layer they feed.
    Controller(usize, HeadShape),
    Zero,
}

struct LayoutBuilder {
    entries: Vec<(String, Vec<usize>, InitKind)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: InitKind) -> usize {
        self.entries.push((name, shape, init));
        self.entries.len() - 1
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, relu_after: bool) -> ConvSlot {
        let fan_in = cin * k * k;
        let init = if relu_after {
            InitKind::He(fan_in)
        } else {
            InitKind::Lecun(fan_in)
        };
        let w = self.add(format!("{prefix}.weight"), vec![cout, cin, k, k], init);
        let b = self.add(format!("{prefix}.bias"), vec![cout], InitKind::Zero);
        ConvSlot {
            w,
            b,
            shape: ConvShape { cin, cout, k },
        }
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize) -> BlockSlot {
        let conv1 = self.conv(&format!("{prefix}.conv1"), cin, cout, 3, true);
        let conv2 = self.conv(&format!("{prefix}.conv2"), cout, cout, 3, true);
        // residual branch starts silent so each block is its shortcut at init
        self.entries[conv2.w].2 = InitKind::Zero;
        let proj = (cin != cout).then(|| self.conv(&format!("{prefix}.proj"), cin, cout, 1, true));
        BlockSlot { conv1, conv2, proj }
    }
}

impl Layout {
    pub fn new(cfg: &NetworkConfig) -> Self {
        let mut lb = LayoutBuilder { entries: Vec::new() };
        let mut enc = Vec::new();
        for level in 0..cfg.depth {
            let cout = cfg.level_channels(level);
            let cin = if level == 0 {
                cfg.in_channels
            } else {
                cfg.level_channels(level - 1)
            };
            let mut blocks = Vec::new();
            for b in 0..BLOCKS_PER_LEVEL {
                let bin = if b == 0 { cin } else { cout };
                blocks.push(lb.block(&format!("enc{level}.block{b}"), bin, cout));
            }
            enc.push(blocks);
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for level in 0..cfg.depth - 1 {
            let cin = cfg.level_channels(level + 1);
            let cout = cfg.level_channels(level);
            let w = lb.add(
                format!("up{level}.weight"),
                vec![cin, cout, 2, 2],
                InitKind::He(cin),
            );
            let b = lb.add(format!("up{level}.bias"), vec![cout], InitKind::Zero);
            up.push(UpSlot {
                w,
                b,
                shape: UpShape { cin, cout },
            });
            let mut blocks = Vec::new();
            for bidx in 0..BLOCKS_PER_LEVEL {
                let bin = if bidx == 0 { 2 * cout } else { cout };
                blocks.push(lb.block(&format!("dec{level}.block{bidx}"), bin, cout));
            }
            dec.push(blocks);
        }
        let out = lb.conv("out", cfg.base_channels, cfg.decoder_channels, 1, false);
        let ctrl_in = cfg.feature_channels() + cfg.num_classes;
        let controller_w = lb.add(
            "controller.weight".into(),
            vec![cfg.kernel_len(), ctrl_in],
            InitKind::Controller(ctrl_in, cfg.head_shape()),
        );
        let controller_b = lb.add("controller.bias".into(), vec![cfg.kernel_len()], InitKind::Zero);
        Self {
            entries: lb.entries,
            enc,
            up,
            dec,
            out,
            controller_w,
            controller_b,
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn shapes(&self) -> impl Iterator<Item = &[usize]> {
        self.entries.iter().map(|(_, s, _)| s.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// All learnable arrays of the network, in [`Layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: NetworkConfig,
    pub version: u32,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub arrays: Vec<Vec<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        Ok(Self {
            config: config.clone(),
            version: PARAMS_VERSION,
            names: layout.names().map(str::to_string).collect(),
            shapes: layout.shapes().map(<[usize]>::to_vec).collect(),
            arrays: layout
                .shapes()
                .map(|s| vec![T::zero(); s.iter().product()])
                .collect(),
        })
    }

    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.arrays.iter().map(|a| vec![T::zero(); a.len()]).collect()
    }

    pub fn num_values(&self) -> usize {
        self.arrays.iter().map(Vec::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.index_of(name).map(|i| self.arrays[i].as_slice())
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.iter().flatten().all(|v| v.is_finite())
    }

    /// Converts the element type (e.g. `f32` training weights to `f64`).
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            version: self.version,
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|a| a.iter().map(|v| U::from(*v).expect("cast")).collect())
                .collect(),
        }
    }

    fn check_layout(&self, layout: &Layout) -> Result<()> {
        if self.arrays.len() != layout.len()
            || self
                .shapes
                .iter()
                .zip(layout.shapes())
                .any(|(a, b)| a.as_slice() != b)
        {
            return Err(Error::Shape("parameter arrays do not match network layout".into()));
        }
        Ok(())
    }
}

/// Random fan-in-scaled weights and zero biases, deterministic in `config.seed`.
pub fn init_params<T: Real>(config: &NetworkConfig) -> Result<ModelParams<T>> {
    let mut params = ModelParams::<T>::zeros(config)?;
    let layout = Layout::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for ((_, _, init), arr) in layout.entries.iter().zip(params.arrays.iter_mut()) {
        if let InitKind::Controller(fan_in, head) = *init {
            let unit = Normal::new(0.0, 1.0).expect("unit normal");
            for (r, row) in arr.chunks_mut(fan_in).enumerate() {
                let std = head.target_std(r) / (fan_in as f64).sqrt();
                for v in row.iter_mut() {
                    *v = T::lit(std * unit.sample(&mut rng));
                }
            }
            continue;
        }
        let std = match *init {
            InitKind::He(fan_in) => (2.0 / fan_in as f64).sqrt(),
            InitKind::Lecun(fan_in) => (1.0 / fan_in as f64).sqrt(),
            InitKind::Zero | InitKind::Controller(..) => continue,
        };
        let normal = Normal::new(0.0, std).expect("finite std");
        for v in arr.iter_mut() {
            *v = T::lit(normal.sample(&mut rng));
        }
    }
    Ok(params)
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    input: Tensor<T>,
    pre1: Tensor<T>,
    pre_sum: Tensor<T>,
}

fn block_forward<T: Real>(p: &ModelParams<T>, s: &BlockSlot, x: Tensor<T>) -> (Tensor<T>, BlockCache<T>) {
    let a = &p.arrays;
    let pre1 = conv2d(&x, s.conv1.shape, &a[s.conv1.w], &a[s.conv1.b]);
    let mut pre_sum = conv2d(&pre1.relu(), s.conv2.shape, &a[s.conv2.w], &a[s.conv2.b]);
    match &s.proj {
        Some(proj) => pre_sum.add_assign(&conv2d(&x, proj.shape, &a[proj.w], &a[proj.b])),
        None => pre_sum.add_assign(&x),
    }
    let y = pre_sum.relu();
    (
        y,
        BlockCache {
            input: x,
            pre1,
            pre_sum,
        },
    )
}

fn block_backward<T: Real>(
    p: &ModelParams<T>,
    s: &BlockSlot,
    cache: &BlockCache<T>,
    mut grad: Tensor<T>,
    grads: &mut [Vec<T>],
) -> Tensor<T> {
    let a = &p.arrays;
    relu_backward(&mut grad, &cache.pre_sum);
    let h1 = cache.pre1.relu();
    let (gw, gb) = pair_mut(grads, s.conv2.w, s.conv2.b);
    let mut dh1 = conv2d_backward(&h1, s.conv2.shape, &a[s.conv2.w], &grad, gw, gb);
    relu_backward(&mut dh1, &cache.pre1);
    let (gw, gb) = pair_mut(grads, s.conv1.w, s.conv1.b);
    let mut dx = conv2d_backward(&cache.input, s.conv1.shape, &a[s.conv1.w], &dh1, gw, gb);
    match &s.proj {
        Some(proj) => {
            let (gw, gb) = pair_mut(grads, proj.w, proj.b);
            dx.add_assign(&conv2d_backward(&cache.input, proj.shape, &a[proj.w], &grad, gw, gb));
        }
        None => dx.add_assign(&grad),
    }
    dx
}

fn level_forward<T: Real>(
    p: &ModelParams<T>,
    blocks: &[BlockSlot],
    mut x: Tensor<T>,
) -> (Tensor<T>, Vec<BlockCache<T>>) {
    let mut caches = Vec::with_capacity(blocks.len());
    for b in blocks {
        let (y, c) = block_forward(p, b, x);
        caches.push(c);
        x = y;
    }
    (x, caches)
}

fn level_backward<T: Real>(
    p: &ModelParams<T>,
    blocks: &[BlockSlot],
    caches: &[BlockCache<T>],
    mut grad: Tensor<T>,
    grads: &mut [Vec<T>],
) -> Tensor<T> {
    for (b, c) in blocks.iter().zip(caches).rev() {
        grad = block_backward(p, b, c, grad, grads);
    }
    grad
}

fn pair_mut<T>(v: &mut [Vec<T>], i: usize, j: usize) -> (&mut [T], &mut [T]) {
    assert!(i < j, "weight registered before bias");
    let (lo, hi) = v.split_at_mut(j);
    (&mut lo[i], &mut hi[0])
}

/// Activations of one backbone pass.
#[derive(Clone, Debug)]
pub struct BackboneTape<T> {
    enc: Vec<Vec<BlockCache<T>>>,
    enc_out: Vec<Tensor<T>>,
    pool_arg: Vec<Vec<u8>>,
    up_in: Vec<Tensor<T>>,
    dec: Vec<Vec<BlockCache<T>>>,
    out_in: Tensor<T>,
}

/// Bottleneck feature `F`, decoder output `M`, and the tape for backward.
pub struct BackboneOutput<T> {
    pub feature: Tensor<T>,
    pub decoder: Tensor<T>,
    pub tape: BackboneTape<T>,
}

pub fn backbone_forward<T: Real>(image: &Tensor<T>, params: &ModelParams<T>) -> Result<BackboneOutput<T>> {
    let cfg = &params.config;
    let layout = Layout::new(cfg);
    params.check_layout(&layout)?;
    if image.channels != cfg.in_channels {
        return Err(Error::Shape(format!(
            "input has {} channels, network expects {}",
            image.channels, cfg.in_channels
        )));
    }
    let div = cfg.divisor();
    if image.height == 0
        || image.width == 0
        || !image.height.is_multiple_of(div)
        || !image.width.is_multiple_of(div)
    {
        return Err(Error::Shape(format!(
            "input {}×{} must be a non-zero multiple of {div} (2^(depth-1)) in each dimension",
            image.height, image.width
        )));
    }

    let mut enc = Vec::with_capacity(cfg.depth);
    let mut enc_out: Vec<Tensor<T>> = Vec::with_capacity(cfg.depth);
    let mut pool_arg = Vec::with_capacity(cfg.depth - 1);
    for (level, blocks) in layout.enc.iter().enumerate() {
        let x = if level == 0 {
            image.clone()
        } else {
            let (pooled, arg) = maxpool2(&enc_out[level - 1]);
            pool_arg.push(arg);
            pooled
        };
        let (y, caches) = level_forward(params, blocks, x);
        enc.push(caches);
        enc_out.push(y);
    }

    let a = &params.arrays;
    let mut cur = enc_out[cfg.depth - 1].clone();
    let mut up_in = vec![Tensor::zeros(0, 0, 0); cfg.depth - 1];
    let mut dec: Vec<Vec<BlockCache<T>>> = vec![Vec::new(); cfg.depth - 1];
    for level in (0..cfg.depth - 1).rev() {
        let u = &layout.up[level];
        let up = upconv2(&cur, u.shape, &a[u.w], &a[u.b]);
        up_in[level] = cur;
        let cat = up.concat(&enc_out[level]);
        let (y, caches) = level_forward(params, &layout.dec[level], cat);
        dec[level] = caches;
        cur = y;
    }
    let decoder = conv2d(&cur, layout.out.shape, &a[layout.out.w], &a[layout.out.b]);
    Ok(BackboneOutput {
        feature: enc_out[cfg.depth - 1].clone(),
        decoder,
        tape: BackboneTape {
            enc,
            enc_out,
            pool_arg,
            up_in,
            dec,
            out_in: cur,
        },
    })
}

/// Accumulates parameter gradients given upstream gradients on `M` and `F`.
pub fn backbone_backward<T: Real>(
    params: &ModelParams<T>,
    tape: &BackboneTape<T>,
    grad_decoder: &Tensor<T>,
    grad_feature: &Tensor<T>,
    grads: &mut [Vec<T>],
) {
    let cfg = &params.config;
    let layout = Layout::new(cfg);
    let a = &params.arrays;
    let depth = cfg.depth;

    let (gw, gb) = pair_mut(grads, layout.out.w, layout.out.b);
    let mut grad = conv2d_backward(&tape.out_in, layout.out.shape, &a[layout.out.w], grad_decoder, gw, gb);

    let mut skip_grads: Vec<Tensor<T>> = Vec::with_capacity(depth - 1);
    for level in 0..depth - 1 {
        let dcat = level_backward(params, &layout.dec[level], &tape.dec[level], grad, grads);
        let (dup, dskip) = dcat.split_channels(cfg.level_channels(level));
        skip_grads.push(dskip);
        let u = &layout.up[level];
        let (gw, gb) = pair_mut(grads, u.w, u.b);
        grad = upconv2_backward(&tape.up_in[level], u.shape, &a[u.w], &dup, gw, gb);
    }
    grad.add_assign(grad_feature);

    for level in (0..depth).rev() {
        let dx = level_backward(params, &layout.enc[level], &tape.enc[level], grad, grads);
        if level == 0 {
            break;
        }
        let prev = &tape.enc_out[level - 1];
        let mut g = maxpool2_backward(&dx, &tape.pool_arg[level - 1], prev.height, prev.width);
        g.add_assign(&skip_grads[level - 1]);
        grad = g;
    }
}

/// Everything needed to backpropagate one (image, class) query.
pub struct ForwardPass<T> {
    pub logits: Tensor<T>,
    backbone: BackboneOutput<T>,
    controller_in: Vec<T>,
    kernels: DynamicKernels<T>,
    head: HeadCache<T>,
}

impl<T: Real> ForwardPass<T> {
    pub fn kernels(&self) -> &DynamicKernels<T> {
        &self.kernels
    }

    pub fn feature(&self) -> &Tensor<T> {
        &self.backbone.feature
    }

    pub fn decoder(&self) -> &Tensor<T> {
        &self.backbone.decoder
    }
}

pub fn forward_pass<T: Real>(params: &ModelParams<T>, image: &Tensor<T>, class_id: usize) -> Result<ForwardPass<T>> {
    let cfg = &params.config;
    let task = encode_task(class_id, cfg.num_classes)?;
    let backbone = backbone_forward(image, params)?;
    let pooled = global_average_pool(&backbone.feature)?;
    let wi = params.index_of("controller.weight").expect("controller in layout");
    let bi = params.index_of("controller.bias").expect("controller in layout");
    let kernels = generate_kernels(&pooled, &task, &params.arrays[wi], &params.arrays[bi], cfg.head_shape())?;
    let (logits, head) = apply_dynamic_head_cached(&backbone.decoder, &kernels)?;
    Ok(ForwardPass {
        logits,
        controller_in: controller_input(&pooled, &task),
        backbone,
        kernels,
        head,
    })
}

/// Accumulates `d loss / d params` into `grads` given `d loss / d logits`.
pub fn backward_pass<T: Real>(params: &ModelParams<T>, pass: &ForwardPass<T>, grad_logits: &[T], grads: &mut [Vec<T>]) {
    let cfg = &params.config;
    let layout = Layout::new(cfg);
    let (dflat, dm) = dynamic_head_backward(&pass.backbone.decoder, &pass.kernels, &pass.head, grad_logits);

    // controller: kernels = W · input + b
    let n_in = pass.controller_in.len();
    let n_out = dflat.len();
    {
        let (gw, gb) = pair_mut(grads, layout.controller_w, layout.controller_b);
        T::gemm(n_out, 1, n_in, T::one(), &dflat, false, &pass.controller_in, false, T::one(), gw);
        for (g, d) in gb.iter_mut().zip(&dflat) {
            *g += *d;
        }
    }
    let w = &params.arrays[layout.controller_w];
    let mut dinput = vec![T::zero(); n_in];
    T::gemm(n_in, n_out, 1, T::one(), w, true, &dflat, false, T::zero(), &mut dinput);

    // GAP backward: spread d pooled[c] / (h·w) over channel c of F
    let f = &pass.backbone.feature;
    let plane = f.plane();
    let scale = T::one() / T::from_usize(plane).expect("plane");
    let mut df = Tensor::zeros(f.channels, f.height, f.width);
    for c in 0..f.channels {
        df.data[c * plane..(c + 1) * plane].fill(dinput[c] * scale);
    }
    backbone_backward(params, &pass.backbone.tape, &dm, &df, grads);
}

/// Logit map for one (image, class) query.
pub fn forward_logits<T: Real>(params: &ModelParams<T>, image: &Tensor<T>, class_id: usize) -> Result<Tensor<T>> {
    forward_pass(params, image, class_id).map(|p| p.logits)
}

/// Probability map in (0, 1) for one (image, class) query.
pub fn forward<T: Real>(params: &ModelParams<T>, image: &Tensor<T>, class_id: usize) -> Result<Tensor<T>> {
    Ok(forward_logits(params, image, class_id)?.map(sigmoid))
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}
