//! Fixed-architecture U-Nets (2D slice-wise and 3D patch-wise): double-conv
//! stages, strided-conv downsampling, nearest-upsample + conv decoding with
//! skip concatenation, 1x1 logit head.

use crate::nn::block::{ConvBlock2d, ConvBlock2dCache, ConvBlock3d, ConvBlock3dCache};
use crate::nn::ops::{upsample2x_2d, upsample2x_2d_backward, upsample2x_3d, upsample2x_3d_backward};
use crate::nn::{Conv2d, Conv2dCache, Conv3d, Conv3dCache, Param};
use crate::rng::SeedStream;
use ndarray::{s, Array3, Array4};

struct Double2d {
    a: ConvBlock2d,
    b: ConvBlock2d,
}

struct Double2dCache {
    a: ConvBlock2dCache,
    b: ConvBlock2dCache,
}

impl Double2d {
    fn new(name: &str, ic: usize, oc: usize, rng: &mut SeedStream) -> Self {
        Double2d {
            a: ConvBlock2d::new(&format!("{name}.a"), ic, oc, 3, 1, rng),
            b: ConvBlock2d::new(&format!("{name}.b"), oc, oc, 3, 1, rng),
        }
    }

    fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Double2dCache) {
        let (h, a) = self.a.forward(x);
        let (y, b) = self.b.forward(&h);
        (y, Double2dCache { a, b })
    }

    fn backward(&mut self, cache: &Double2dCache, dy: &Array3<f64>) -> Array3<f64> {
        let dh = self.b.backward(&cache.b, dy);
        self.a.backward(&cache.a, &dh)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.a.params_mut();
        p.extend(self.b.params_mut());
        p
    }
}

pub struct UNet2d {
    enc: Vec<Double2d>,
    downs: Vec<ConvBlock2d>,
    up_convs: Vec<ConvBlock2d>,
    dec: Vec<Double2d>,
    head: Conv2d,
    depth: usize,
}

pub struct UNet2dCache {
    enc: Vec<Double2dCache>,
    enc_outs: Vec<Array3<f64>>,
    downs: Vec<ConvBlock2dCache>,
    ups: Vec<ConvBlock2dCache>,
    dec: Vec<Double2dCache>,
    head: Conv2dCache,
}

impl UNet2d {
    pub fn new(
        prefix: &str,
        in_ch: usize,
        n_classes: usize,
        base: usize,
        depth: usize,
        rng: &mut SeedStream,
    ) -> Self {
        let width = |i: usize| base << i;
        let mut enc = Vec::new();
        let mut downs = Vec::new();
        for i in 0..=depth {
            let ic = if i == 0 { in_ch } else { width(i) };
            enc.push(Double2d::new(&format!("{prefix}.enc{i}"), ic, width(i), rng));
            if i < depth {
                downs.push(ConvBlock2d::new(
                    &format!("{prefix}.down{i}"),
                    width(i),
                    width(i + 1),
                    3,
                    2,
                    rng,
                ));
            }
        }
        let mut up_convs = Vec::new();
        let mut dec = Vec::new();
        for i in (0..depth).rev() {
            up_convs.push(ConvBlock2d::new(
                &format!("{prefix}.up{i}"),
                width(i + 1),
                width(i),
                3,
                1,
                rng,
            ));
            dec.push(Double2d::new(
                &format!("{prefix}.dec{i}"),
                2 * width(i),
                width(i),
                rng,
            ));
        }
        let head = Conv2d::new(&format!("{prefix}.head"), base, n_classes, 1, 1, 0, rng);
        UNet2d {
            enc,
            downs,
            up_convs,
            dec,
            head,
            depth,
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, UNet2dCache) {
        let mut enc_caches = Vec::new();
        let mut enc_outs = Vec::new();
        let mut down_caches = Vec::new();
        let mut h = x.clone();
        for i in 0..=self.depth {
            let (y, c) = self.enc[i].forward(&h);
            enc_caches.push(c);
            enc_outs.push(y.clone());
            h = y;
            if i < self.depth {
                let (d, c) = self.downs[i].forward(&h);
                down_caches.push(c);
                h = d;
            }
        }
        let mut up_caches = Vec::new();
        let mut dec_caches = Vec::new();
        for (j, i) in (0..self.depth).rev().enumerate() {
            let up = upsample2x_2d(&h);
            let (u, cu) = self.up_convs[j].forward(&up);
            up_caches.push(cu);
            let skip = &enc_outs[i];
            let (c0, hh, ww) = u.dim();
            let (c1, _, _) = skip.dim();
            let mut cat = Array3::zeros((c0 + c1, hh, ww));
            cat.slice_mut(s![..c1, .., ..]).assign(skip);
            cat.slice_mut(s![c1.., .., ..]).assign(&u);
            let (y, cd) = self.dec[j].forward(&cat);
            dec_caches.push(cd);
            h = y;
        }
        let (logits, head) = self.head.forward(&h);
        (
            logits,
            UNet2dCache {
                enc: enc_caches,
                enc_outs,
                downs: down_caches,
                ups: up_caches,
                dec: dec_caches,
                head,
            },
        )
    }

    pub fn backward(&mut self, cache: &UNet2dCache, dy: &Array3<f64>) {
        let mut grad = self.head.backward(&cache.head, dy);
        // Skip gradients to feed back into the encoder, indexed by level.
        // Decoder stages were pushed in forward order (shallowest last);
        // walk them in reverse.
        let mut skip_grads: Vec<Option<Array3<f64>>> = vec![None; self.depth + 1];
        for (j, i) in (0..self.depth).rev().enumerate().collect::<Vec<_>>().into_iter().rev() {
            let d_cat = self.dec[j].backward(&cache.dec[j], &grad);
            let skip_ch = cache.enc_outs[i].dim().0;
            let d_skip = d_cat.slice(s![..skip_ch, .., ..]).to_owned();
            let d_u = d_cat.slice(s![skip_ch.., .., ..]).to_owned();
            skip_grads[i] = Some(d_skip);
            let d_up = self.up_convs[j].backward(&cache.ups[j], &d_u);
            grad = upsample2x_2d_backward(&d_up);
        }
        for i in (0..=self.depth).rev() {
            if i < self.depth {
                grad = self.downs[i].backward(&cache.downs[i], &grad);
            }
            if let Some(sg) = &skip_grads[i] {
                grad += sg;
            }
            grad = self.enc[i].backward(&cache.enc[i], &grad);
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = Vec::new();
        for e in &mut self.enc {
            p.extend(e.params_mut());
        }
        for d in &mut self.downs {
            p.extend(d.params_mut());
        }
        for u in &mut self.up_convs {
            p.extend(u.params_mut());
        }
        for d in &mut self.dec {
            p.extend(d.params_mut());
        }
        p.extend(self.head.params_mut());
        p
    }
}

struct Double3d {
    a: ConvBlock3d,
    b: ConvBlock3d,
}

struct Double3dCache {
    a: ConvBlock3dCache,
    b: ConvBlock3dCache,
}

impl Double3d {
    fn new(name: &str, ic: usize, oc: usize, rng: &mut SeedStream) -> Self {
        Double3d {
            a: ConvBlock3d::new(&format!("{name}.a"), ic, oc, 3, 1, rng),
            b: ConvBlock3d::new(&format!("{name}.b"), oc, oc, 3, 1, rng),
        }
    }

    fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, Double3dCache) {
        let (h, a) = self.a.forward(x);
        let (y, b) = self.b.forward(&h);
        (y, Double3dCache { a, b })
    }

    fn backward(&mut self, cache: &Double3dCache, dy: &Array4<f64>) -> Array4<f64> {
        let dh = self.b.backward(&cache.b, dy);
        self.a.backward(&cache.a, &dh)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.a.params_mut();
        p.extend(self.b.params_mut());
        p
    }
}

pub struct UNet3d {
    enc: Vec<Double3d>,
    downs: Vec<ConvBlock3d>,
    up_convs: Vec<ConvBlock3d>,
    dec: Vec<Double3d>,
    head: Conv3d,
    depth: usize,
}

pub struct UNet3dCache {
    enc: Vec<Double3dCache>,
    enc_outs: Vec<Array4<f64>>,
    downs: Vec<ConvBlock3dCache>,
    ups: Vec<ConvBlock3dCache>,
    dec: Vec<Double3dCache>,
    head: Conv3dCache,
}

impl UNet3d {
    pub fn new(
        prefix: &str,
        in_ch: usize,
        n_classes: usize,
        base: usize,
        depth: usize,
        rng: &mut SeedStream,
    ) -> Self {
        let width = |i: usize| base << i;
        let mut enc = Vec::new();
        let mut downs = Vec::new();
        for i in 0..=depth {
            let ic = if i == 0 { in_ch } else { width(i) };
            enc.push(Double3d::new(&format!("{prefix}.enc{i}"), ic, width(i), rng));
            if i < depth {
                downs.push(ConvBlock3d::new(
                    &format!("{prefix}.down{i}"),
                    width(i),
                    width(i + 1),
                    3,
                    2,
                    rng,
                ));
            }
        }
        let mut up_convs = Vec::new();
        let mut dec = Vec::new();
        for i in (0..depth).rev() {
            up_convs.push(ConvBlock3d::new(
                &format!("{prefix}.up{i}"),
                width(i + 1),
                width(i),
                3,
                1,
                rng,
            ));
            dec.push(Double3d::new(
                &format!("{prefix}.dec{i}"),
                2 * width(i),
                width(i),
                rng,
            ));
        }
        let head = Conv3d::new(&format!("{prefix}.head"), base, n_classes, 1, 1, 0, rng);
        UNet3d {
            enc,
            downs,
            up_convs,
            dec,
            head,
            depth,
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, UNet3dCache) {
        let mut enc_caches = Vec::new();
        let mut enc_outs = Vec::new();
        let mut down_caches = Vec::new();
        let mut h = x.clone();
        for i in 0..=self.depth {
            let (y, c) = self.enc[i].forward(&h);
            enc_caches.push(c);
            enc_outs.push(y.clone());
            h = y;
            if i < self.depth {
                let (d, c) = self.downs[i].forward(&h);
                down_caches.push(c);
                h = d;
            }
        }
        let mut up_caches = Vec::new();
        let mut dec_caches = Vec::new();
        for (j, i) in (0..self.depth).rev().enumerate() {
            let up = upsample2x_3d(&h);
            let (u, cu) = self.up_convs[j].forward(&up);
            up_caches.push(cu);
            let skip = &enc_outs[i];
            let (c0, dd, hh, ww) = u.dim();
            let (c1, _, _, _) = skip.dim();
            let mut cat = Array4::zeros((c0 + c1, dd, hh, ww));
            cat.slice_mut(s![..c1, .., .., ..]).assign(skip);
            cat.slice_mut(s![c1.., .., .., ..]).assign(&u);
            let (y, cd) = self.dec[j].forward(&cat);
            dec_caches.push(cd);
            h = y;
        }
        let (logits, head) = self.head.forward(&h);
        (
            logits,
            UNet3dCache {
                enc: enc_caches,
                enc_outs,
                downs: down_caches,
                ups: up_caches,
                dec: dec_caches,
                head,
            },
        )
    }

    pub fn backward(&mut self, cache: &UNet3dCache, dy: &Array4<f64>) {
        let mut grad = self.head.backward(&cache.head, dy);
        let mut skip_grads: Vec<Option<Array4<f64>>> = vec![None; self.depth + 1];
        for (j, i) in (0..self.depth).rev().enumerate().collect::<Vec<_>>().into_iter().rev() {
            let d_cat = self.dec[j].backward(&cache.dec[j], &grad);
            let skip_ch = cache.enc_outs[i].dim().0;
            let d_skip = d_cat.slice(s![..skip_ch, .., .., ..]).to_owned();
            let d_u = d_cat.slice(s![skip_ch.., .., .., ..]).to_owned();
            skip_grads[i] = Some(d_skip);
            let d_up = self.up_convs[j].backward(&cache.ups[j], &d_u);
            grad = upsample2x_3d_backward(&d_up);
        }
        for i in (0..=self.depth).rev() {
            if i < self.depth {
                grad = self.downs[i].backward(&cache.downs[i], &grad);
            }
            if let Some(sg) = &skip_grads[i] {
                grad += sg;
            }
            grad = self.enc[i].backward(&cache.enc[i], &grad);
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = Vec::new();
        for e in &mut self.enc {
            p.extend(e.params_mut());
        }
        for d in &mut self.downs {
            p.extend(d.params_mut());
        }
        for u in &mut self.up_convs {
            p.extend(u.params_mut());
        }
        for d in &mut self.dec {
            p.extend(d.params_mut());
        }
        p.extend(self.head.params_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unet2d_shapes_and_backward_fd() {
        let mut rng = SeedStream::new(31);
        let mut net = UNet2d::new("u", 1, 3, 4, 2, &mut rng);
        let x = Array3::from_shape_simple_fn((1, 8, 8), || rng.normal() * 0.5);
        let (y, cache) = net.forward(&x);
        assert_eq!(y.dim(), (3, 8, 8));

        let head = Array3::from_shape_simple_fn((3, 8, 8), || rng.normal());
        for p in net.params_mut() {
            p.zero_grad();
        }
        net.backward(&cache, &head);

        // FD spot-check on the first element of a few parameters.
        let names: Vec<String> = net.params_mut().iter().map(|p| p.name.clone()).collect();
        for probe in [0usize, names.len() / 2, names.len() - 1] {
            let name = names[probe].clone();
            let analytic = net
                .params_mut()
                .into_iter()
                .find(|p| p.name == name)
                .unwrap()
                .g
                .as_slice()
                .unwrap()[0];
            let eps = 1e-6;
            let bump = |net: &mut UNet2d, v: f64| {
                net.params_mut()
                    .into_iter()
                    .find(|p| p.name == name)
                    .unwrap()
                    .w
                    .as_slice_mut()
                    .unwrap()[0] = v;
            };
            let orig = {
                net.params_mut()
                    .into_iter()
                    .find(|p| p.name == name)
                    .unwrap()
                    .w
                    .as_slice()
                    .unwrap()[0]
            };
            bump(&mut net, orig + eps);
            let hi = (&net.forward(&x).0 * &head).sum();
            bump(&mut net, orig - eps);
            let lo = (&net.forward(&x).0 * &head).sum();
            bump(&mut net, orig);
            let fd = (hi - lo) / (2.0 * eps);
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((analytic - fd) / denom).abs() < 1e-4,
                "{name}: analytic {analytic} vs fd {fd}"
            );
        }

    }

    #[test]
    fn unet3d_shapes_and_param_fd() {
        let mut rng = SeedStream::new(32);
        let mut net = UNet3d::new("u", 1, 3, 2, 2, &mut rng);
        let x = Array4::from_shape_simple_fn((1, 4, 8, 8), || rng.normal() * 0.5);
        let (y, cache) = net.forward(&x);
        assert_eq!(y.dim(), (3, 4, 8, 8));

        let head = Array4::from_shape_simple_fn((3, 4, 8, 8), || rng.normal());
        for p in net.params_mut() {
            p.zero_grad();
        }
        net.backward(&cache, &head);

        let names: Vec<String> = net.params_mut().iter().map(|p| p.name.clone()).collect();
        for probe in [0usize, names.len() - 1] {
            let name = names[probe].clone();
            let analytic = net
                .params_mut()
                .into_iter()
                .find(|p| p.name == name)
                .unwrap()
                .g
                .as_slice()
                .unwrap()[0];
            let eps = 1e-6;
            let set = |net: &mut UNet3d, v: f64| {
                net.params_mut()
                    .into_iter()
                    .find(|p| p.name == name)
                    .unwrap()
                    .w
                    .as_slice_mut()
                    .unwrap()[0] = v;
            };
            let orig = net
                .params_mut()
                .into_iter()
                .find(|p| p.name == name)
                .unwrap()
                .w
                .as_slice()
                .unwrap()[0];
            set(&mut net, orig + eps);
            let hi = (&net.forward(&x).0 * &head).sum();
            set(&mut net, orig - eps);
            let lo = (&net.forward(&x).0 * &head).sum();
            set(&mut net, orig);
            let fd = (hi - lo) / (2.0 * eps);
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((analytic - fd) / denom).abs() < 1e-4,
                "{name}: analytic {analytic} vs fd {fd}"
            );
        }
    }
}
