use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HyperParams;

/// Layer widths of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input_dim: usize,
    pub enc_out: usize,
    pub attn_hidden: usize,
}

/// The named tensors, in storage (and checkpoint) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tensor {
    /// Post-encoder weights, `enc_out x input_dim`.
    EncW,
    EncB,
    /// Attention tanh branch, `attn_hidden x enc_out`.
    AttnV,
    AttnVB,
    /// Attention sigmoid gate, `attn_hidden x enc_out`.
    AttnU,
    AttnUB,
    /// Attention projection to one logit per tile.
    AttnW,
    /// Per-tile score head.
    ScoreW,
    ScoreB,
}

impl Tensor {
    pub const ALL: [Tensor; 9] = [
        Tensor::EncW,
        Tensor::EncB,
        Tensor::AttnV,
        Tensor::AttnVB,
        Tensor::AttnU,
        Tensor::AttnUB,
        Tensor::AttnW,
        Tensor::ScoreW,
        Tensor::ScoreB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tensor::EncW => "enc_w",
            Tensor::EncB => "enc_b",
            Tensor::AttnV => "attn_v",
            Tensor::AttnVB => "attn_v_b",
            Tensor::AttnU => "attn_u",
            Tensor::AttnUB => "attn_u_b",
            Tensor::AttnW => "attn_w",
            Tensor::ScoreW => "score_w",
            Tensor::ScoreB => "score_b",
        }
    }
}

impl ModelShape {
    pub fn from_hyper(h: &HyperParams) -> Self {
        Self { input_dim: h.input_dim, enc_out: h.enc_out, attn_hidden: h.attn_hidden }
    }

    /// `(rows, cols)` of a tensor; vectors are `(len, 1)`.
    pub fn dims(&self, t: Tensor) -> (usize, usize) {
        let (d, e, a) = (self.input_dim, self.enc_out, self.attn_hidden);
        match t {
            Tensor::EncW => (e, d),
            Tensor::EncB => (e, 1),
            Tensor::AttnV | Tensor::AttnU => (a, e),
            Tensor::AttnVB | Tensor::AttnUB | Tensor::AttnW => (a, 1),
            Tensor::ScoreW => (e, 1),
            Tensor::ScoreB => (1, 1),
        }
    }

    pub fn range(&self, t: Tensor) -> Range<usize> {
        let mut start = 0;
        for other in Tensor::ALL {
            let (r, c) = self.dims(other);
            if other == t {
                return start..start + r * c;
            }
            start += r * c;
        }
        unreachable!("every tensor is in Tensor::ALL")
    }

    pub fn len(&self) -> usize {
        Tensor::ALL.iter().map(|&t| {
            let (r, c) = self.dims(t);
            r * c
        }).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fan-in used for the initialization bound; `None` for biases.
    fn fan_in(&self, t: Tensor) -> Option<usize> {
        match t {
            Tensor::EncW => Some(self.input_dim),
            Tensor::AttnV | Tensor::AttnU | Tensor::ScoreW => Some(self.enc_out),
            Tensor::AttnW => Some(self.attn_hidden),
            Tensor::EncB | Tensor::AttnVB | Tensor::AttnUB | Tensor::ScoreB => None,
        }
    }
}

macro_rules! tensor_access {
    ($ty:ident) => {
        impl $ty {
            pub fn zeros(shape: ModelShape) -> Self {
                Self { shape, data: vec![0.0; shape.len()] }
            }

            pub fn get(&self, t: Tensor) -> &[f64] {
                &self.data[self.shape.range(t)]
            }

            pub fn get_mut(&mut self, t: Tensor) -> &mut [f64] {
                let r = self.shape.range(t);
                &mut self.data[r]
            }
        }
    };
}

/// All trainable weights, stored flat in [`Tensor::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub shape: ModelShape,
    pub data: Vec<f64>,
}

/// Gradient of a scalar loss with respect to every entry of [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub shape: ModelShape,
    pub data: Vec<f64>,
}

tensor_access!(ModelParams);
tensor_access!(Gradients);

impl ModelParams {
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
pub fn init_params(seed: u64, hyper: &HyperParams) -> ModelParams {
    let shape = ModelShape::from_hyper(hyper);
    let mut params = ModelParams::zeros(shape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in Tensor::ALL {
        if let Some(fan_in) = shape.fan_in(t) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in params.get_mut(t) {
                *v = rng.random_range(-bound..bound);
            }
        }
    }
    params
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes() {
        let p = init_params(0, &HyperParams::default());
        assert_eq!(p.shape.dims(Tensor::EncW), (512, 2048));
        assert_eq!(p.get(Tensor::EncW).len(), 512 * 2048);
        assert_eq!(p.shape.dims(Tensor::AttnV), (128, 512));
        assert_eq!(p.get(Tensor::AttnW).len(), 128);
        assert_eq!(p.get(Tensor::ScoreW).len(), 512);
        assert_eq!(p.data.len(), 512 * 2048 + 512 + 2 * (128 * 512 + 128) + 128 + 512 + 1);
    }

    #[test]
    fn init_is_seeded() {
        let h = HyperParams { input_dim: 16, enc_out: 8, attn_hidden: 4, ..Default::default() };
        assert_eq!(init_params(3, &h), init_params(3, &h));
        assert_ne!(init_params(3, &h), init_params(4, &h));
    }

    #[test]
    fn init_bounds_and_zero_biases() {
        let h = HyperParams { input_dim: 64, enc_out: 16, attn_hidden: 8, ..Default::default() };
        let p = init_params(9, &h);
        assert!(p.get(Tensor::EncW).iter().all(|v| v.abs() < 1.0 / 8.0));
        assert!(p.get(Tensor::AttnW).iter().all(|v| v.abs() < 1.0 / 8f64.sqrt()));
        for t in [Tensor::EncB, Tensor::AttnVB, Tensor::AttnUB, Tensor::ScoreB] {
            assert!(p.get(t).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn ranges_tile_the_buffer() {
        let s = ModelShape { input_dim: 5, enc_out: 3, attn_hidden: 2 };
        let mut next = 0;
        for t in Tensor::ALL {
            let r = s.range(t);
            assert_eq!(r.start, next);
            next = r.end;
        }
        assert_eq!(next, s.len());
    }
}
