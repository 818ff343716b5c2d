//! Small neural-network toolkit with hand-written backward passes: direct
//! convolutions via im2col + GEMM, instance normalization, a few
//! activations, nearest-neighbour upsampling, and Adam. Everything runs in
//! f64; trainers quantize parameters and optimizer state to f32 values at
//! epoch boundaries so that the f32 checkpoint format is lossless.

pub mod block;
mod conv;
mod norm;
pub mod ops;

pub use conv::{Conv2d, Conv2dCache, Conv3d, Conv3dCache};
pub use norm::{InstanceNorm, InstanceNormCache};

use crate::rng::SeedStream;
use ndarray::ArrayD;
use std::collections::BTreeMap;

/// A named trainable array with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub w: ArrayD<f64>,
    pub g: ArrayD<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, w: ArrayD<f64>) -> Self {
        let g = ArrayD::zeros(w.raw_dim());
        Param {
            name: name.into(),
            w,
            g,
        }
    }

    pub fn zero_grad(&mut self) {
        self.g.fill(0.0);
    }

    /// Round to the nearest f32 value (checkpoints store f32).
    pub fn quantize_f32(&mut self) {
        self.w.mapv_inplace(|v| v as f32 as f64);
    }
}

/// Conv weight init: N(0, 0.02), the CycleGAN convention.
pub fn init_conv_weight(rng: &mut SeedStream, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(ndarray::IxDyn(shape), || rng.normal_scaled(0.0, 0.02))
}

/// Adam with bias correction. Moment slots are keyed by parameter name so
/// they survive checkpointing.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub slots: BTreeMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            ..Adam::new(lr)
        }
    }

    /// One update over the given parameters; `lr_scale` applies schedules.
    pub fn step(&mut self, params: &mut [&mut Param], lr_scale: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr = self.lr * lr_scale;
        for p in params.iter_mut() {
            let (m, v) = self
                .slots
                .entry(p.name.clone())
                .or_insert_with(|| (ArrayD::zeros(p.w.raw_dim()), ArrayD::zeros(p.w.raw_dim())));
            ndarray::Zip::from(&mut p.w)
                .and(&p.g)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }

    pub fn quantize_f32(&mut self) {
        for (m, v) in self.slots.values_mut() {
            m.mapv_inplace(|x| x as f32 as f64);
            v.mapv_inplace(|x| x as f32 as f64);
        }
    }
}
