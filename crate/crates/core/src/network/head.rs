//! Task encoding, kernel controller and the dynamic segmentation head.

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One-hot task code for a 1-based lesion class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassVector {
    index: usize,
    values: Vec<u8>,
}

impl ClassVector {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_real<T: Real>(&self) -> Vec<T> {
        self.values
            .iter()
            .map(|&v| if v == 1 { T::one() } else { T::zero() })
            .collect()
    }
}

pub fn encode_task(class_index: usize, num_classes: usize) -> Result<ClassVector> {
    if class_index == 0 || class_index > num_classes {
        return Err(Error::ClassOutOfRange {
            index: class_index,
            count: num_classes,
        });
    }
    let mut values = vec![0u8; num_classes];
    values[class_index - 1] = 1;
    Ok(ClassVector {
        index: class_index,
        values,
    })
}

/// Channel widths of the three 1×1 head layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadShape {
    /// Decoder output channels feeding the head.
    pub in_channels: usize,
    pub hidden: usize,
}

impl HeadShape {
    /// Flat kernel length: `hidden·in + hidden + hidden² + hidden + hidden + 1`.
    pub fn kernel_len(&self) -> usize {
        let (c, h) = (self.in_channels, self.hidden);
        h * c + h + h * h + h + h + 1
    }

    // offsets of (w1, b1, w2, b2, w3, b3) in the flat vector
    fn offsets(&self) -> [usize; 7] {
        let (c, h) = (self.in_channels, self.hidden);
        let mut o = [0usize; 7];
        let lens = [h * c, h, h * h, h, h, 1];
        for i in 0..6 {
            o[i + 1] = o[i] + lens[i];
        }
        o
    }

    /// Variance-preserving std for the generated value at flat index `r`:
    /// He for the two hidden layers, LeCun for the output layer, 0 for biases.
    pub(crate) fn target_std(&self, r: usize) -> f64 {
        let o = self.offsets();
        let (c, h) = (self.in_channels as f64, self.hidden as f64);
        match r {
            r if r < o[1] => (2.0 / c).sqrt(),
            r if r < o[2] => 0.0,
            r if r < o[3] => (2.0 / h).sqrt(),
            r if r < o[4] => 0.0,
            r if r < o[5] => (1.0 / h).sqrt(),
            _ => 0.0,
        }
    }
}

/// Generated head parameters, stored flat in the order
/// `w1 (hidden×in), b1, w2 (hidden×hidden), b2, w3 (hidden), b3`.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicKernels<T> {
    pub shape: HeadShape,
    flat: Vec<T>,
}

impl<T: Real> DynamicKernels<T> {
    pub fn from_flat(shape: HeadShape, flat: Vec<T>) -> Result<Self> {
        if flat.len() != shape.kernel_len() {
            return Err(Error::Shape(format!(
                "kernel vector has {} values, head needs {}",
                flat.len(),
                shape.kernel_len()
            )));
        }
        Ok(Self { shape, flat })
    }

    pub fn zeros(shape: HeadShape) -> Self {
        Self {
            shape,
            flat: vec![T::zero(); shape.kernel_len()],
        }
    }

    pub fn flat(&self) -> &[T] {
        &self.flat
    }

    pub fn into_flat(self) -> Vec<T> {
        self.flat
    }

    fn part(&self, i: usize) -> &[T] {
        let o = self.shape.offsets();
        &self.flat[o[i]..o[i + 1]]
    }

    pub fn w1(&self) -> &[T] {
        self.part(0)
    }
    pub fn b1(&self) -> &[T] {
        self.part(1)
    }
    pub fn w2(&self) -> &[T] {
        self.part(2)
    }
    pub fn b2(&self) -> &[T] {
        self.part(3)
    }
    pub fn w3(&self) -> &[T] {
        self.part(4)
    }
    pub fn b3(&self) -> T {
        self.part(5)[0]
    }

    /// Rebuilds a kernel set from its six parts.
    pub fn from_parts(shape: HeadShape, parts: [&[T]; 6]) -> Result<Self> {
        let flat: Vec<T> = parts.iter().flat_map(|p| p.iter().copied()).collect();
        Self::from_flat(shape, flat)
    }
}

pub fn global_average_pool<T: Real>(f: &Tensor<T>) -> Result<Vec<T>> {
    if f.channels == 0 || f.plane() == 0 {
        return Err(Error::Shape("global average pool of an empty feature map".into()));
    }
    let n = T::from_usize(f.plane()).expect("plane size");
    Ok((0..f.channels)
        .map(|c| f.channel(c).iter().copied().sum::<T>() / n)
        .collect())
}

/// Affine controller: `kernels = weight · (pooled ∥ task) + bias`, with
/// `weight` stored row-major as `kernel_len × (pooled + task)`.
pub fn generate_kernels<T: Real>(
    pooled: &[T],
    task: &ClassVector,
    weight: &[T],
    bias: &[T],
    shape: HeadShape,
) -> Result<DynamicKernels<T>> {
    let input = controller_input(pooled, task);
    let out_len = shape.kernel_len();
    if bias.len() != out_len || weight.len() != out_len * input.len() {
        return Err(Error::Shape(format!(
            "controller expects {}×{} weights and {} biases, got {} and {}",
            out_len,
            input.len(),
            out_len,
            weight.len(),
            bias.len()
        )));
    }
    let mut flat = bias.to_vec();
    T::gemm(out_len, input.len(), 1, T::one(), weight, false, &input, false, T::one(), &mut flat);
    DynamicKernels::from_flat(shape, flat)
}

pub fn controller_input<T: Real>(pooled: &[T], task: &ClassVector) -> Vec<T> {
    let mut v = pooled.to_vec();
    v.extend(task.as_real::<T>());
    v
}

/// Intermediate activations of the head, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct HeadCache<T> {
    pub pre1: Vec<T>,
    pub pre2: Vec<T>,
}

/// Three 1×1 convolutions with ReLU after the first two; returns logits.
pub fn apply_dynamic_head<T: Real>(m: &Tensor<T>, k: &DynamicKernels<T>) -> Result<Tensor<T>> {
    apply_dynamic_head_cached(m, k).map(|(z, _)| z)
}

pub fn apply_dynamic_head_cached<T: Real>(
    m: &Tensor<T>,
    k: &DynamicKernels<T>,
) -> Result<(Tensor<T>, HeadCache<T>)> {
    let HeadShape { in_channels, hidden } = k.shape;
    if m.channels != in_channels {
        return Err(Error::Shape(format!(
            "head expects {in_channels} input channels, decoder gave {}",
            m.channels
        )));
    }
    let hw = m.plane();
    let layer = |w: &[T], b: &[T], x: &[T], cin: usize, cout: usize| {
        let mut out = vec![T::zero(); cout * hw];
        for (o, bo) in b.iter().enumerate() {
            out[o * hw..(o + 1) * hw].fill(*bo);
        }
        T::gemm(cout, cin, hw, T::one(), w, false, x, false, T::one(), &mut out);
        out
    };
    let pre1 = layer(k.w1(), k.b1(), &m.data, in_channels, hidden);
    let h1: Vec<T> = pre1.iter().map(|v| v.max(T::zero())).collect();
    let pre2 = layer(k.w2(), k.b2(), &h1, hidden, hidden);
    let h2: Vec<T> = pre2.iter().map(|v| v.max(T::zero())).collect();
    let z = layer(k.w3(), &[k.b3()], &h2, hidden, 1);
    Ok((
        Tensor::from_vec(1, m.height, m.width, z),
        HeadCache { pre1, pre2 },
    ))
}

/// Backward through the head. Returns (gradient w.r.t. the flat kernels,
/// gradient w.r.t. `m`).
pub fn dynamic_head_backward<T: Real>(
    m: &Tensor<T>,
    k: &DynamicKernels<T>,
    cache: &HeadCache<T>,
    grad_logits: &[T],
) -> (Vec<T>, Tensor<T>) {
    let HeadShape { in_channels, hidden } = k.shape;
    let hw = m.plane();
    let h1: Vec<T> = cache.pre1.iter().map(|v| v.max(T::zero())).collect();
    let h2: Vec<T> = cache.pre2.iter().map(|v| v.max(T::zero())).collect();

    let mut dw3 = vec![T::zero(); hidden];
    T::gemm(1, hw, hidden, T::one(), grad_logits, false, &h2, true, T::zero(), &mut dw3);
    let db3: T = grad_logits.iter().copied().sum();
    let mut dpre2 = vec![T::zero(); hidden * hw];
    T::gemm(hidden, 1, hw, T::one(), k.w3(), true, grad_logits, false, T::zero(), &mut dpre2);
    mask_relu(&mut dpre2, &cache.pre2);

    let mut dw2 = vec![T::zero(); hidden * hidden];
    T::gemm(hidden, hw, hidden, T::one(), &dpre2, false, &h1, true, T::zero(), &mut dw2);
    let db2 = row_sums(&dpre2, hidden, hw);
    let mut dpre1 = vec![T::zero(); hidden * hw];
    T::gemm(hidden, hidden, hw, T::one(), k.w2(), true, &dpre2, false, T::zero(), &mut dpre1);
    mask_relu(&mut dpre1, &cache.pre1);

    let mut dw1 = vec![T::zero(); hidden * in_channels];
    T::gemm(hidden, hw, in_channels, T::one(), &dpre1, false, &m.data, true, T::zero(), &mut dw1);
    let db1 = row_sums(&dpre1, hidden, hw);
    let mut dm = Tensor::zeros(in_channels, m.height, m.width);
    T::gemm(in_channels, hidden, hw, T::one(), k.w1(), true, &dpre1, false, T::zero(), &mut dm.data);

    let mut dflat = Vec::with_capacity(k.shape.kernel_len());
    dflat.extend(dw1);
    dflat.extend(db1);
    dflat.extend(dw2);
    dflat.extend(db2);
    dflat.extend(dw3);
    dflat.push(db3);
    (dflat, dm)
}

fn mask_relu<T: Real>(grad: &mut [T], pre: &[T]) {
    for (g, p) in grad.iter_mut().zip(pre) {
        if *p <= T::zero() {
            *g = T::zero();
        }
    }
}

fn row_sums<T: Real>(m: &[T], rows: usize, cols: usize) -> Vec<T> {
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().copied().sum())
        .collect()
}
