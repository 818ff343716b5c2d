//! Conv + InstanceNorm + ReLU blocks, 2D and 3D.

use super::{Conv2d, Conv2dCache, Conv3d, Conv3dCache, InstanceNorm, InstanceNormCache, Param};
use crate::nn::ops::{relu, relu_backward};
use crate::rng::SeedStream;
use ndarray::{Array3, Array4, ArrayD};

pub struct ConvBlock2d {
    pub conv: Conv2d,
    pub norm: InstanceNorm,
}

pub struct ConvBlock2dCache {
    pub conv: Conv2dCache,
    pub norm: InstanceNormCache,
    pub pre_act: ArrayD<f64>,
}

impl ConvBlock2d {
    pub fn new(
        name: &str,
        ic: usize,
        oc: usize,
        k: usize,
        stride: usize,
        rng: &mut SeedStream,
    ) -> Self {
        ConvBlock2d {
            conv: Conv2d::new(name, ic, oc, k, stride, k / 2, rng),
            norm: InstanceNorm::new(name, oc, rng),
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, ConvBlock2dCache) {
        let (y, conv) = self.conv.forward(x);
        let (pre_act, norm) = self.norm.forward(&y.into_dyn());
        let out = relu(&pre_act);
        (
            out.into_dimensionality().unwrap(),
            ConvBlock2dCache {
                conv,
                norm,
                pre_act,
            },
        )
    }

    pub fn backward(&mut self, cache: &ConvBlock2dCache, dy: &Array3<f64>) -> Array3<f64> {
        let d_pre = relu_backward(&cache.pre_act, &dy.clone().into_dyn());
        let d_conv = self.norm.backward(&cache.norm, &d_pre);
        self.conv
            .backward(&cache.conv, &d_conv.into_dimensionality().unwrap())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv.params_mut();
        p.extend(self.norm.params_mut());
        p
    }
}

pub struct ConvBlock3d {
    pub conv: Conv3d,
    pub norm: InstanceNorm,
}

pub struct ConvBlock3dCache {
    pub conv: Conv3dCache,
    pub norm: InstanceNormCache,
    pub pre_act: ArrayD<f64>,
}

impl ConvBlock3d {
    pub fn new(
        name: &str,
        ic: usize,
        oc: usize,
        k: usize,
        stride: usize,
        rng: &mut SeedStream,
    ) -> Self {
        ConvBlock3d {
            conv: Conv3d::new(name, ic, oc, k, stride, k / 2, rng),
            norm: InstanceNorm::new(name, oc, rng),
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, ConvBlock3dCache) {
        let (y, conv) = self.conv.forward(x);
        let (pre_act, norm) = self.norm.forward(&y.into_dyn());
        let out = relu(&pre_act);
        (
            out.into_dimensionality().unwrap(),
            ConvBlock3dCache {
                conv,
                norm,
                pre_act,
            },
        )
    }

    pub fn backward(&mut self, cache: &ConvBlock3dCache, dy: &Array4<f64>) -> Array4<f64> {
        let d_pre = relu_backward(&cache.pre_act, &dy.clone().into_dyn());
        let d_conv = self.norm.backward(&cache.norm, &d_pre);
        self.conv
            .backward(&cache.conv, &d_conv.into_dimensionality().unwrap())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv.params_mut();
        p.extend(self.norm.params_mut());
        p
    }
}
