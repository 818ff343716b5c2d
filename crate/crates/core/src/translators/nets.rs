//! Desk-scale translation networks: a residual encoder-decoder generator
//! with taps on its encoder features, and a 3-layer patch discriminator.

use crate::error::{Error, Result};
use crate::nn::ops::{lrelu, lrelu_backward, relu, relu_backward, tanh, tanh_backward};
use crate::nn::{Conv2d, Conv2dCache, InstanceNorm, InstanceNormCache, Param};
use crate::rng::SeedStream;
use ndarray::{Array3, ArrayD};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetKind {
    Generator,
    Discriminator,
}

/// Architecture hyperparameters for either network kind.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetSpec {
    pub kind: NetKind,
    pub base_width: usize,
    pub n_down: usize,
    pub n_resblocks: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl NetSpec {
    pub fn generator(base_width: usize, n_down: usize, n_resblocks: usize) -> Self {
        NetSpec {
            kind: NetKind::Generator,
            base_width,
            n_down,
            n_resblocks,
            in_channels: 1,
            out_channels: 1,
        }
    }

    pub fn discriminator(base_width: usize) -> Self {
        NetSpec {
            kind: NetKind::Discriminator,
            base_width,
            n_down: 2,
            n_resblocks: 0,
            in_channels: 1,
            out_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::ConfigInvalid(format!("net spec widths: {self:?}")));
        }
        if self.kind == NetKind::Generator && self.n_down == 0 {
            return Err(Error::ConfigInvalid("generator needs n_down >= 1".into()));
        }
        Ok(())
    }
}

fn dyn3(x: Array3<f64>) -> ArrayD<f64> {
    x.into_dyn()
}

fn fix3(x: ArrayD<f64>) -> Array3<f64> {
    x.into_dimensionality().unwrap()
}

/// Conv + InstanceNorm + ReLU stage.
struct CinR {
    conv: Conv2d,
    norm: InstanceNorm,
}

struct CinRCache {
    conv: Conv2dCache,
    norm: InstanceNormCache,
    pre_act: ArrayD<f64>,
}

impl CinR {
    fn new(name: &str, ic: usize, oc: usize, k: usize, stride: usize, rng: &mut SeedStream) -> Self {
        CinR {
            conv: Conv2d::new(name, ic, oc, k, stride, k / 2, rng),
            norm: InstanceNorm::new(name, oc, rng),
        }
    }

    fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, CinRCache) {
        let (y, conv) = self.conv.forward(x);
        let (pre_act, norm) = self.norm.forward(&dyn3(y));
        let out = relu(&pre_act);
        (
            fix3(out),
            CinRCache {
                conv,
                norm,
                pre_act,
            },
        )
    }

    fn backward(&mut self, cache: &CinRCache, dy: &Array3<f64>) -> Array3<f64> {
        let d_pre = relu_backward(&cache.pre_act, &dyn3(dy.clone()));
        let d_conv = self.norm.backward(&cache.norm, &d_pre);
        self.conv.backward(&cache.conv, &fix3(d_conv))
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv.params_mut();
        p.extend(self.norm.params_mut());
        p
    }
}

/// Residual block: conv-IN-ReLU-conv-IN plus the skip, no activation after
/// the addition.
struct ResBlock {
    a: CinR,
    conv_b: Conv2d,
    norm_b: InstanceNorm,
}

struct ResBlockCache {
    a: CinRCache,
    conv_b: Conv2dCache,
    norm_b: InstanceNormCache,
}

impl ResBlock {
    fn new(name: &str, c: usize, rng: &mut SeedStream) -> Self {
        ResBlock {
            a: CinR::new(&format!("{name}.a"), c, c, 3, 1, rng),
            conv_b: Conv2d::new(&format!("{name}.b"), c, c, 3, 1, 1, rng),
            norm_b: InstanceNorm::new(&format!("{name}.b"), c, rng),
        }
    }

    fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, ResBlockCache) {
        let (h, a) = self.a.forward(x);
        let (h2, conv_b) = self.conv_b.forward(&h);
        let (h3, norm_b) = self.norm_b.forward(&dyn3(h2));
        let out = fix3(h3) + x;
        (out, ResBlockCache { a, conv_b, norm_b })
    }

    fn backward(&mut self, cache: &ResBlockCache, dy: &Array3<f64>) -> Array3<f64> {
        let d_norm = self.norm_b.backward(&cache.norm_b, &dyn3(dy.clone()));
        let d_h = self.conv_b.backward(&cache.conv_b, &fix3(d_norm));
        let mut dx = self.a.backward(&cache.a, &d_h);
        dx += dy; // skip path
        dx
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.a.params_mut();
        p.extend(self.conv_b.params_mut());
        p.extend(self.norm_b.params_mut());
        p
    }
}

/// Upsample2x + conv-IN-ReLU stage.
struct UpBlock {
    body: CinR,
}

struct UpBlockCache {
    body: CinRCache,
}

impl UpBlock {
    fn new(name: &str, ic: usize, oc: usize, rng: &mut SeedStream) -> Self {
        UpBlock {
            body: CinR::new(name, ic, oc, 3, 1, rng),
        }
    }

    fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, UpBlockCache) {
        let up = crate::nn::ops::upsample2x_2d(x);
        let (y, body) = self.body.forward(&up);
        (y, UpBlockCache { body })
    }

    fn backward(&mut self, cache: &UpBlockCache, dy: &Array3<f64>) -> Array3<f64> {
        let d_up = self.body.backward(&cache.body, dy);
        crate::nn::ops::upsample2x_2d_backward(&d_up)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.body.params_mut()
    }
}

/// Residual encoder-decoder generator with a bounded (tanh) output.
/// Encoder activations after each downsampling stage are the feature taps
/// used by the contrastive trainer.
pub struct ResnetGenerator {
    stem: CinR,
    downs: Vec<CinR>,
    res: Vec<ResBlock>,
    ups: Vec<UpBlock>,
    head: Conv2d,
    pub spec: NetSpec,
}

pub struct EncoderCache {
    input_dim: (usize, usize, usize),
    stem: CinRCache,
    downs: Vec<CinRCache>,
}

pub struct GenCache {
    enc: EncoderCache,
    res: Vec<ResBlockCache>,
    ups: Vec<UpBlockCache>,
    head: Conv2dCache,
    head_out: ArrayD<f64>, // tanh output, for the backward pass
}

impl ResnetGenerator {
    pub fn new(prefix: &str, spec: &NetSpec, rng: &mut SeedStream) -> Result<Self> {
        spec.validate()?;
        if spec.kind != NetKind::Generator {
            return Err(Error::ConfigInvalid("expected a generator spec".into()));
        }
        let w = spec.base_width;
        let stem = CinR::new(&format!("{prefix}.stem"), spec.in_channels, w, 3, 1, rng);
        let mut downs = Vec::new();
        for d in 0..spec.n_down {
            let ic = w << d;
            downs.push(CinR::new(
                &format!("{prefix}.down{d}"),
                ic,
                ic * 2,
                3,
                2,
                rng,
            ));
        }
        let mid = w << spec.n_down;
        let res = (0..spec.n_resblocks)
            .map(|i| ResBlock::new(&format!("{prefix}.res{i}"), mid, rng))
            .collect();
        let mut ups = Vec::new();
        for d in (0..spec.n_down).rev() {
            let oc = w << d;
            ups.push(UpBlock::new(&format!("{prefix}.up{d}"), oc * 2, oc, rng));
        }
        let head = Conv2d::new(&format!("{prefix}.head"), w, spec.out_channels, 3, 1, 1, rng);
        Ok(ResnetGenerator {
            stem,
            downs,
            res,
            ups,
            head,
            spec: spec.clone(),
        })
    }

    /// Number of encoder feature taps (= number of downsampling stages).
    pub fn n_taps(&self) -> usize {
        self.downs.len()
    }

    /// Encoder only: returns the tap activations.
    pub fn encode(&self, x: &Array3<f64>) -> (Vec<Array3<f64>>, EncoderCache) {
        let input_dim = x.dim();
        let (mut h, stem) = self.stem.forward(x);
        let mut taps = Vec::with_capacity(self.downs.len());
        let mut down_caches = Vec::with_capacity(self.downs.len());
        for down in &self.downs {
            let (next, cache) = down.forward(&h);
            taps.push(next.clone());
            down_caches.push(cache);
            h = next;
        }
        (
            taps,
            EncoderCache {
                input_dim,
                stem,
                downs: down_caches,
            },
        )
    }

    /// Backward through the encoder alone, feeding gradient into each tap.
    /// Returns the gradient w.r.t. the encoder input.
    pub fn encoder_backward(
        &mut self,
        cache: &EncoderCache,
        d_taps: &[Array3<f64>],
    ) -> Array3<f64> {
        assert_eq!(d_taps.len(), self.downs.len());
        let mut grad: Option<Array3<f64>> = None;
        for i in (0..self.downs.len()).rev() {
            let mut dy = d_taps[i].clone();
            if let Some(g) = grad {
                dy += &g;
            }
            grad = Some(self.downs[i].backward(&cache.downs[i], &dy));
        }
        let dy = grad.unwrap_or_else(|| {
            Array3::zeros((
                self.spec.base_width,
                cache.input_dim.1,
                cache.input_dim.2,
            ))
        });
        self.stem.backward(&cache.stem, &dy)
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, GenCache) {
        let (y, _taps, cache) = self.forward_with_feats(x);
        (y, cache)
    }

    pub fn forward_with_feats(
        &self,
        x: &Array3<f64>,
    ) -> (Array3<f64>, Vec<Array3<f64>>, GenCache) {
        let (taps, enc) = self.encode(x);
        let mut h = taps.last().unwrap().clone();
        let mut res_caches = Vec::with_capacity(self.res.len());
        for block in &self.res {
            let (next, cache) = block.forward(&h);
            res_caches.push(cache);
            h = next;
        }
        let mut up_caches = Vec::with_capacity(self.ups.len());
        for up in &self.ups {
            let (next, cache) = up.forward(&h);
            up_caches.push(cache);
            h = next;
        }
        let (logits, head_cache) = self.head.forward(&h);
        let out = tanh(&dyn3(logits));
        let y = fix3(out.clone());
        (
            y,
            taps,
            GenCache {
                enc,
                res: res_caches,
                ups: up_caches,
                head: head_cache,
                head_out: out,
            },
        )
    }

    /// Full backward. `d_taps`, when given, injects extra gradient at each
    /// encoder tap (the contrastive trainer's source-feature path).
    pub fn backward(
        &mut self,
        cache: &GenCache,
        dy: &Array3<f64>,
        d_taps: Option<&[Array3<f64>]>,
    ) -> Array3<f64> {
        let d_logits = tanh_backward(&cache.head_out, &dyn3(dy.clone()));
        let mut grad = self.head.backward(&cache.head, &fix3(d_logits));
        for i in (0..self.ups.len()).rev() {
            grad = self.ups[i].backward(&cache.ups[i], &grad);
        }
        for i in (0..self.res.len()).rev() {
            grad = self.res[i].backward(&cache.res[i], &grad);
        }
        // grad now sits at the deepest tap; walk the encoder with injection.
        let n = self.downs.len();
        for i in (0..n).rev() {
            let mut dy_i = grad;
            if let Some(taps) = d_taps {
                dy_i += &taps[i];
            }
            grad = self.downs[i].backward(&cache.enc.downs[i], &dy_i);
        }
        self.stem.backward(&cache.enc.stem, &grad)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.stem.params_mut();
        for d in &mut self.downs {
            p.extend(d.params_mut());
        }
        for r in &mut self.res {
            p.extend(r.params_mut());
        }
        for u in &mut self.ups {
            p.extend(u.params_mut());
        }
        p.extend(self.head.params_mut());
        p
    }
}

/// 3-layer patch discriminator: two strided conv stages and a 1-channel
/// logit map head (least-squares GAN operates on the map directly).
pub struct PatchDiscriminator {
    c1: Conv2d,
    c2: Conv2d,
    n2: InstanceNorm,
    c3: Conv2d,
    pub spec: NetSpec,
}

pub struct DisCache {
    c1: Conv2dCache,
    a1_in: ArrayD<f64>,
    c2: Conv2dCache,
    n2: InstanceNormCache,
    a2_in: ArrayD<f64>,
    c3: Conv2dCache,
}

const LRELU_SLOPE: f64 = 0.2;

impl PatchDiscriminator {
    pub fn new(prefix: &str, spec: &NetSpec, rng: &mut SeedStream) -> Result<Self> {
        spec.validate()?;
        if spec.kind != NetKind::Discriminator {
            return Err(Error::ConfigInvalid("expected a discriminator spec".into()));
        }
        let w = spec.base_width;
        Ok(PatchDiscriminator {
            c1: Conv2d::new(&format!("{prefix}.c1"), spec.in_channels, w, 4, 2, 1, rng),
            c2: Conv2d::new(&format!("{prefix}.c2"), w, 2 * w, 4, 2, 1, rng),
            n2: InstanceNorm::new(&format!("{prefix}.c2"), 2 * w, rng),
            c3: Conv2d::new(&format!("{prefix}.c3"), 2 * w, 1, 4, 1, 1, rng),
            spec: spec.clone(),
        })
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, DisCache) {
        let (h1, c1) = self.c1.forward(x);
        let a1_in = dyn3(h1);
        let h1a = fix3(lrelu(&a1_in, LRELU_SLOPE));
        let (h2, c2) = self.c2.forward(&h1a);
        let (h2n, n2) = self.n2.forward(&dyn3(h2));
        let a2_in = h2n;
        let h2a = fix3(lrelu(&a2_in, LRELU_SLOPE));
        let (logits, c3) = self.c3.forward(&h2a);
        (
            logits,
            DisCache {
                c1,
                a1_in,
                c2,
                n2,
                a2_in,
                c3,
            },
        )
    }

    pub fn backward(&mut self, cache: &DisCache, dy: &Array3<f64>) -> Array3<f64> {
        let d_h2a = self.c3.backward(&cache.c3, dy);
        let d_a2 = lrelu_backward(&cache.a2_in, &dyn3(d_h2a), LRELU_SLOPE);
        let d_h2 = self.n2.backward(&cache.n2, &d_a2);
        let d_h1a = self.c2.backward(&cache.c2, &fix3(d_h2));
        let d_a1 = lrelu_backward(&cache.a1_in, &dyn3(d_h1a), LRELU_SLOPE);
        self.c1.backward(&cache.c1, &fix3(d_a1))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.c1.params_mut();
        p.extend(self.c2.params_mut());
        p.extend(self.n2.params_mut());
        p.extend(self.c3.params_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{fd_gradient, max_rel_err};

    fn gen_spec() -> NetSpec {
        NetSpec::generator(4, 2, 1)
    }

    #[test]
    fn generator_output_is_bounded_and_shape_preserving() {
        let mut rng = SeedStream::new(5);
        let g = ResnetGenerator::new("g", &gen_spec(), &mut rng).unwrap();
        let x = Array3::from_shape_simple_fn((1, 16, 16), || rng.normal());
        let (y, taps, _) = g.forward_with_feats(&x);
        assert_eq!(y.dim(), (1, 16, 16));
        assert!(y.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(taps.len(), 2);
        assert_eq!(taps[0].dim(), (8, 8, 8));
        assert_eq!(taps[1].dim(), (16, 4, 4));
    }

    #[test]
    fn generator_backward_matches_fd() {
        let mut rng = SeedStream::new(6);
        let mut g = ResnetGenerator::new("g", &gen_spec(), &mut rng).unwrap();
        let x = Array3::from_shape_simple_fn((1, 8, 8), || rng.normal() * 0.5);
        let head = Array3::from_shape_simple_fn((1, 8, 8), || rng.normal());
        let (_, cache) = g.forward(&x);
        for p in g.params_mut() {
            p.zero_grad();
        }
        let dx = g.backward(&cache, &head, None);

        let loss = |xx: &Array3<f64>| {
            let (y, _) = g.forward(xx);
            (&y * &head).sum()
        };
        let fd = fd_gradient(
            |p| loss(&p.clone().into_dimensionality().unwrap()),
            &x.clone().into_dyn(),
            1e-6,
        );
        let err = max_rel_err(&dx.into_dyn(), &fd);
        assert!(err < 1e-4, "generator dx rel err {err}");
    }

    #[test]
    fn generator_param_grads_match_fd_on_a_sample() {
        let mut rng = SeedStream::new(7);
        let mut g = ResnetGenerator::new("g", &gen_spec(), &mut rng).unwrap();
        let x = Array3::from_shape_simple_fn((1, 8, 8), || rng.normal() * 0.5);
        let head = Array3::from_shape_simple_fn((1, 8, 8), || rng.normal());
        let (_, cache) = g.forward(&x);
        for p in g.params_mut() {
            p.zero_grad();
        }
        g.backward(&cache, &head, None);

        // Spot-check a few parameters of different kinds via FD on their
        // first element (full FD over every weight is needlessly slow).
        let names: Vec<String> = g.params_mut().iter().map(|p| p.name.clone()).collect();
        let grad_head = |g: &mut ResnetGenerator, name: &str| -> f64 {
            g.params_mut()
                .into_iter()
                .find(|p| p.name == name)
                .unwrap()
                .g
                .as_slice()
                .unwrap()[0]
        };
        let set_head = |g: &mut ResnetGenerator, name: &str, v: f64| {
            g.params_mut()
                .into_iter()
                .find(|p| p.name == name)
                .unwrap()
                .w
                .as_slice_mut()
                .unwrap()[0] = v;
        };
        let get_head = |g: &mut ResnetGenerator, name: &str| -> f64 {
            g.params_mut()
                .into_iter()
                .find(|p| p.name == name)
                .unwrap()
                .w
                .as_slice()
                .unwrap()[0]
        };
        for probe in [0usize, 3, names.len() - 1] {
            let name = names[probe].clone();
            let analytic = grad_head(&mut g, &name);
            let eps = 1e-6;
            let orig = get_head(&mut g, &name);
            set_head(&mut g, &name, orig + eps);
            let hi = (&g.forward(&x).0 * &head).sum();
            set_head(&mut g, &name, orig - eps);
            let lo = (&g.forward(&x).0 * &head).sum();
            set_head(&mut g, &name, orig);
            let fd = (hi - lo) / (2.0 * eps);
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((analytic - fd) / denom).abs() < 1e-4,
                "param {name}: analytic {analytic} vs fd {fd}"
            );
        }
    }

    #[test]
    fn encoder_backward_matches_fd() {
        let mut rng = SeedStream::new(8);
        let mut g = ResnetGenerator::new("g", &gen_spec(), &mut rng).unwrap();
        let x = Array3::from_shape_simple_fn((1, 8, 8), || rng.normal() * 0.5);
        let heads: Vec<Array3<f64>> = vec![
            Array3::from_shape_simple_fn((8, 4, 4), || rng.normal()),
            Array3::from_shape_simple_fn((16, 2, 2), || rng.normal()),
        ];
        let (_, cache) = g.encode(&x);
        for p in g.params_mut() {
            p.zero_grad();
        }
        let dx = g.encoder_backward(&cache, &heads);

        let loss = |xx: &Array3<f64>| {
            let (taps, _) = g.encode(xx);
            taps.iter()
                .zip(heads.iter())
                .map(|(t, h)| (t * h).sum())
                .sum::<f64>()
        };
        let fd = fd_gradient(
            |p| loss(&p.clone().into_dimensionality().unwrap()),
            &x.clone().into_dyn(),
            1e-6,
        );
        let err = max_rel_err(&dx.into_dyn(), &fd);
        assert!(err < 1e-4, "encoder dx rel err {err}");
    }

    #[test]
    fn discriminator_backward_matches_fd() {
        let mut rng = SeedStream::new(9);
        let mut d =
            PatchDiscriminator::new("d", &NetSpec::discriminator(4), &mut rng).unwrap();
        let x = Array3::from_shape_simple_fn((1, 12, 12), || rng.normal() * 0.5);
        let (y, cache) = d.forward(&x);
        let head = Array3::from_shape_simple_fn(y.dim(), || rng.normal());
        for p in d.params_mut() {
            p.zero_grad();
        }
        let dx = d.backward(&cache, &head);
        let loss = |xx: &Array3<f64>| {
            let (y, _) = d.forward(xx);
            (&y * &head).sum()
        };
        let fd = fd_gradient(
            |p| loss(&p.clone().into_dimensionality().unwrap()),
            &x.clone().into_dyn(),
            1e-6,
        );
        let err = max_rel_err(&dx.into_dyn(), &fd);
        assert!(err < 1e-4, "discriminator dx rel err {err}");
    }

    #[test]
    fn unique_param_names() {
        let mut rng = SeedStream::new(10);
        let mut g = ResnetGenerator::new("g", &gen_spec(), &mut rng).unwrap();
        let names: Vec<String> = g.params_mut().iter().map(|p| p.name.clone()).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(names.len(), dedup.len());
    }
}
