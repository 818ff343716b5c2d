//! Direct 2D/3D convolutions, im2col + GEMM, with full backward passes.

use super::{init_conv_weight, Param};
use crate::rng::SeedStream;
use ndarray::{Array2, Array3, Array4, ArrayD, Ix2};

fn as_mat(p: &ArrayD<f64>, rows: usize, cols: usize) -> Array2<f64> {
    p.view()
        .into_shape_with_order((rows, cols))
        .unwrap()
        .to_owned()
}

pub struct Conv2d {
    pub w: Param, // (oc, ic, k, k)
    pub b: Param, // (oc)
    pub stride: usize,
    pub pad: usize,
    k: usize,
    ic: usize,
    oc: usize,
}

pub struct Conv2dCache {
    cols: Array2<f64>, // (ic*k*k, oh*ow)
    in_dim: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(
        name: &str,
        ic: usize,
        oc: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut SeedStream,
    ) -> Self {
        Conv2d {
            w: Param::new(format!("{name}.w"), init_conv_weight(rng, &[oc, ic, k, k])),
            b: Param::new(format!("{name}.b"), ArrayD::zeros(ndarray::IxDyn(&[oc]))),
            stride,
            pad,
            k,
            ic,
            oc,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array3<f64>) -> (Array2<f64>, (usize, usize)) {
        let (ic, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let k = self.k;
        let mut cols = Array2::zeros((ic * k * k, oh * ow));
        for c in 0..ic {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[[row, oy * ow + ox]] = x[[c, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
        (cols, (oh, ow))
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Conv2dCache) {
        let in_dim = x.dim();
        assert_eq!(in_dim.0, self.ic, "{}: channel mismatch", self.w.name);
        let (cols, (oh, ow)) = self.im2col(x);
        let w_mat = as_mat(&self.w.w, self.oc, self.ic * self.k * self.k);
        let mut y_mat = w_mat.dot(&cols); // (oc, oh*ow)
        for (o, mut row) in y_mat.rows_mut().into_iter().enumerate() {
            row += self.b.w[[o]];
        }
        let y = y_mat
            .into_shape_with_order((self.oc, oh, ow))
            .unwrap();
        (
            y,
            Conv2dCache {
                cols,
                in_dim,
                out_hw: (oh, ow),
            },
        )
    }

    /// Accumulates into `w.g` / `b.g`, returns the input gradient.
    pub fn backward(&mut self, cache: &Conv2dCache, dy: &Array3<f64>) -> Array3<f64> {
        let (oh, ow) = cache.out_hw;
        let dy_mat = dy
            .view()
            .into_shape_with_order((self.oc, oh * ow))
            .unwrap()
            .to_owned();
        let dw = dy_mat.dot(&cache.cols.t()); // (oc, ic*k*k)
        {
            let mut wg = self
                .w
                .g
                .view_mut()
                .into_shape_with_order((self.oc, self.ic * self.k * self.k))
                .unwrap();
            wg += &dw;
        }
        for o in 0..self.oc {
            self.b.g[[o]] += dy_mat.row(o).sum();
        }
        let w_mat = as_mat(&self.w.w, self.oc, self.ic * self.k * self.k);
        let dcols = w_mat.t().dot(&dy_mat); // (ic*k*k, oh*ow)

        // col2im
        let (ic, h, w) = cache.in_dim;
        let k = self.k;
        let mut dx = Array3::zeros((ic, h, w));
        for c in 0..ic {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[[c, iy as usize, ix as usize]] += dcols[[row, oy * ow + ox]];
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

pub struct Conv3d {
    pub w: Param, // (oc, ic, k, k, k)
    pub b: Param, // (oc)
    pub stride: usize,
    pub pad: usize,
    k: usize,
    ic: usize,
    oc: usize,
}

pub struct Conv3dCache {
    cols: Array2<f64>, // (ic*k^3, od*oh*ow)
    in_dim: (usize, usize, usize, usize),
    out_dhw: (usize, usize, usize),
}

impl Conv3d {
    pub fn new(
        name: &str,
        ic: usize,
        oc: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut SeedStream,
    ) -> Self {
        Conv3d {
            w: Param::new(
                format!("{name}.w"),
                init_conv_weight(rng, &[oc, ic, k, k, k]),
            ),
            b: Param::new(format!("{name}.b"), ArrayD::zeros(ndarray::IxDyn(&[oc]))),
            stride,
            pad,
            k,
            ic,
            oc,
        }
    }

    pub fn out_dhw(&self, d: usize, h: usize, w: usize) -> (usize, usize, usize) {
        (
            (d + 2 * self.pad - self.k) / self.stride + 1,
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array4<f64>) -> (Array2<f64>, (usize, usize, usize)) {
        let (ic, d, h, w) = x.dim();
        let (od, oh, ow) = self.out_dhw(d, h, w);
        let k = self.k;
        let mut cols = Array2::zeros((ic * k * k * k, od * oh * ow));
        for c in 0..ic {
            for kd in 0..k {
                for ki in 0..k {
                    for kj in 0..k {
                        let row = ((c * k + kd) * k + ki) * k + kj;
                        for oz in 0..od {
                            let iz = (oz * self.stride + kd) as isize - self.pad as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix =
                                        (ox * self.stride + kj) as isize - self.pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    cols[[row, (oz * oh + oy) * ow + ox]] =
                                        x[[c, iz as usize, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                }
            }
        }
        (cols, (od, oh, ow))
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, Conv3dCache) {
        let in_dim = x.dim();
        assert_eq!(in_dim.0, self.ic, "{}: channel mismatch", self.w.name);
        let (cols, (od, oh, ow)) = self.im2col(x);
        let w_mat = as_mat(&self.w.w, self.oc, self.ic * self.k * self.k * self.k);
        let mut y_mat = w_mat.dot(&cols);
        for (o, mut row) in y_mat.rows_mut().into_iter().enumerate() {
            row += self.b.w[[o]];
        }
        let y = y_mat
            .into_shape_with_order((self.oc, od, oh, ow))
            .unwrap();
        (
            y,
            Conv3dCache {
                cols,
                in_dim,
                out_dhw: (od, oh, ow),
            },
        )
    }

    pub fn backward(&mut self, cache: &Conv3dCache, dy: &Array4<f64>) -> Array4<f64> {
        let (od, oh, ow) = cache.out_dhw;
        let kk = self.k * self.k * self.k;
        let dy_mat = dy
            .view()
            .into_shape_with_order((self.oc, od * oh * ow))
            .unwrap()
            .to_owned();
        let dw = dy_mat.dot(&cache.cols.t());
        {
            let mut wg = self
                .w
                .g
                .view_mut()
                .into_shape_with_order((self.oc, self.ic * kk))
                .unwrap();
            wg += &dw;
        }
        for o in 0..self.oc {
            self.b.g[[o]] += dy_mat.row(o).sum();
        }
        let w_mat = as_mat(&self.w.w, self.oc, self.ic * kk);
        let dcols: Array2<f64> = w_mat.t().dot(&dy_mat);

        let (ic, d, h, w) = cache.in_dim;
        let k = self.k;
        let mut dx = Array4::zeros((ic, d, h, w));
        for c in 0..ic {
            for kd in 0..k {
                for ki in 0..k {
                    for kj in 0..k {
                        let row = ((c * k + kd) * k + ki) * k + kj;
                        for oz in 0..od {
                            let iz = (oz * self.stride + kd) as isize - self.pad as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix =
                                        (ox * self.stride + kj) as isize - self.pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    dx[[c, iz as usize, iy as usize, ix as usize]] +=
                                        dcols[[row, (oz * oh + oy) * ow + ox]];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Brute-force reference convolution used by the tests.
#[cfg(test)]
pub(crate) fn conv2d_reference(
    x: &Array3<f64>,
    w: &ndarray::Array4<f64>,
    b: &ndarray::Array1<f64>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (ic, h, ww) = x.dim();
    let (oc, _, k, _) = w.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (ww + 2 * pad - k) / stride + 1;
    let mut y = Array3::zeros((oc, oh, ow));
    for o in 0..oc {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[o];
                for c in 0..ic {
                    for ki in 0..k {
                        for kj in 0..k {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < ww as isize {
                                acc += w[[o, c, ki, kj]] * x[[c, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
                y[[o, oy, ox]] = acc;
            }
        }
    }
    y
}

#[allow(unused_imports)]
pub(crate) use ndarray::Ix4;

impl Conv2d {
    #[cfg(test)]
    pub(crate) fn weight4(&self) -> ndarray::Array4<f64> {
        self.w
            .w
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned()
    }
}

#[allow(dead_code)]
fn _type_checks(m: Array2<f64>) -> Array2<f64> {
    m.into_dimensionality::<Ix2>().unwrap()
}
