//! Instance normalization over the spatial dims of a channels-first array.

use super::Param;
use ndarray::ArrayD;

pub struct InstanceNorm {
    pub gamma: Param, // (c)
    pub beta: Param,  // (c)
    pub eps: f64,
    c: usize,
}

pub struct InstanceNormCache {
    xhat: ArrayD<f64>,
    inv_std: Vec<f64>,
}

impl InstanceNorm {
    pub fn new(name: &str, c: usize, rng: &mut crate::rng::SeedStream) -> Self {
        let gamma = ArrayD::from_shape_simple_fn(ndarray::IxDyn(&[c]), || {
            rng.normal_scaled(1.0, 0.02)
        });
        InstanceNorm {
            gamma: Param::new(format!("{name}.gamma"), gamma),
            beta: Param::new(format!("{name}.beta"), ArrayD::zeros(ndarray::IxDyn(&[c]))),
            eps: 1e-5,
            c,
        }
    }

    pub fn forward(&self, x: &ArrayD<f64>) -> (ArrayD<f64>, InstanceNormCache) {
        assert_eq!(x.shape()[0], self.c, "{}: channels", self.gamma.name);
        let n: usize = x.len() / self.c;
        let flat = x.view().into_shape_with_order((self.c, n)).unwrap();
        let mut xhat = ArrayD::zeros(x.raw_dim());
        let mut y = ArrayD::zeros(x.raw_dim());
        let mut inv_std = Vec::with_capacity(self.c);
        {
            let mut xhat_flat = xhat.view_mut().into_shape_with_order((self.c, n)).unwrap();
            let mut y_flat = y.view_mut().into_shape_with_order((self.c, n)).unwrap();
            for c in 0..self.c {
                let row = flat.row(c);
                let mean = row.sum() / n as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + self.eps).sqrt();
                inv_std.push(is);
                let g = self.gamma.w[[c]];
                let b = self.beta.w[[c]];
                for j in 0..n {
                    let xh = (row[j] - mean) * is;
                    xhat_flat[[c, j]] = xh;
                    y_flat[[c, j]] = g * xh + b;
                }
            }
        }
        (y, InstanceNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &InstanceNormCache, dy: &ArrayD<f64>) -> ArrayD<f64> {
        let n: usize = dy.len() / self.c;
        let dy_flat = dy.view().into_shape_with_order((self.c, n)).unwrap();
        let xhat_flat = cache
            .xhat
            .view()
            .into_shape_with_order((self.c, n))
            .unwrap();
        let mut dx = ArrayD::zeros(dy.raw_dim());
        {
            let mut dx_flat = dx.view_mut().into_shape_with_order((self.c, n)).unwrap();
            for c in 0..self.c {
                let g = self.gamma.w[[c]];
                let is = cache.inv_std[c];
                let dyr = dy_flat.row(c);
                let xhr = xhat_flat.row(c);
                let sum_dy: f64 = dyr.sum();
                let sum_dy_xhat: f64 = dyr.iter().zip(xhr.iter()).map(|(&a, &b)| a * b).sum();
                self.gamma.g[[c]] += sum_dy_xhat;
                self.beta.g[[c]] += sum_dy;
                let nf = n as f64;
                for j in 0..n {
                    dx_flat[[c, j]] =
                        g * is / nf * (nf * dyr[j] - sum_dy - xhr[j] * sum_dy_xhat);
                }
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}
