use super::real::Real;

/// Dense channel-major feature map (C × H × W) for a single image.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor data length");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other), "tensor add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Stacks `self` and `other` along channels.
    pub fn concat(&self, other: &Self) -> Self {
        assert_eq!((self.height, self.width), (other.height, other.width));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Self::from_vec(self.channels + other.channels, self.height, self.width, data)
    }

    /// Inverse of [`Tensor::concat`] for gradients: first `c` channels, rest.
    pub fn split_channels(self, c: usize) -> (Self, Self) {
        let p = self.plane();
        let mut data = self.data;
        let rest = data.split_off(c * p);
        (
            Self::from_vec(c, self.height, self.width, data),
            Self::from_vec(self.channels - c, self.height, self.width, rest),
        )
    }

    pub fn relu(&self) -> Self {
        self.map(|v| v.max(T::zero()))
    }
}

impl<T: Copy> Tensor<T> {
    pub fn map<U, F: Fn(T) -> U>(&self, f: F) -> Tensor<U> {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl<T> Tensor<T> {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

/// In place `grad *= 1[pre > 0]`.
pub fn relu_backward<T: Real>(grad: &mut Tensor<T>, pre: &Tensor<T>) {
    for (g, p) in grad.data.iter_mut().zip(&pre.data) {
        if *p <= T::zero() {
            *g = T::zero();
        }
    }
}
