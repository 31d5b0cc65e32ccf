//! Small parameterized building blocks shared by both branches.

use crate::error::Result;
use crate::tensor::{Param, Tape, Tensor, TensorId};
use rand_chacha::ChaCha8Rng;

/// Fully connected layer over row vectors: `x[R,in] -> [R,out]`.
#[derive(Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Self {
        let std = (1.0 / input as f32).sqrt();
        Linear {
            weight: Param::randn(rng, &[input, output], std),
            bias: Param::zeros(&[output]),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: TensorId) -> Result<TensorId> {
        let w = t.param(&self.weight);
        let y = t.matmul(x, w)?;
        let b = t.param(&self.bias);
        t.add_row_bias(y, b)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// 2-d convolution layer with bias.
#[derive(Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let std = (2.0 / (c_in * k * k) as f32).sqrt();
        Conv2d {
            weight: Param::randn(rng, &[c_out, c_in, k, k], std),
            bias: Param::zeros(&[c_out]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: TensorId) -> Result<TensorId> {
        let w = t.param(&self.weight);
        let b = t.param(&self.bias);
        t.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Two 3x3 convs with a skip connection; a 1x1 projection aligns channels
/// when they differ.
#[derive(Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Self {
        ResidualBlock {
            conv1: Conv2d::new(rng, c_in, c_out, 3, 1, 1),
            conv2: Conv2d::new(rng, c_out, c_out, 3, 1, 1),
            skip: (c_in != c_out).then(|| Conv2d::new(rng, c_in, c_out, 1, 1, 0)),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: TensorId) -> Result<TensorId> {
        let h = self.conv1.forward(t, x)?;
        let h = t.relu(h)?;
        let h = self.conv2.forward(t, h)?;
        let s = match &self.skip {
            Some(proj) => proj.forward(t, x)?,
            None => x,
        };
        let y = t.add(h, s)?;
        t.relu(y)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        if let Some(s) = &self.skip {
            p.extend(s.params());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv1.params_mut();
        p.extend(self.conv2.params_mut());
        if let Some(s) = &mut self.skip {
            p.extend(s.params_mut());
        }
        p
    }
}

/// Flattens `[C,H,W]` into attention layout `[H*W, C]`.
pub fn to_positions(t: &mut Tape, x: TensorId) -> Result<TensorId> {
    let s = t.shape(x).to_vec();
    let flat = t.reshape(x, &[s[0], s[1] * s[2]])?;
    t.transpose(flat)
}

/// Inverse of [`to_positions`]: `[H*W, C] -> [C,H,W]`.
pub fn to_plane(t: &mut Tape, x: TensorId, h: usize, w: usize) -> Result<TensorId> {
    let tr = t.transpose(x)?;
    let c = t.shape(tr)[0];
    t.reshape(tr, &[c, h, w])
}

/// Identity-matrix tensor, used by tests and degenerate configurations.
pub fn identity(n: usize) -> Tensor {
    let mut data = vec![0.0f32; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
    }
    Tensor::from_vec(&[n, n], data).expect("square identity")
}
