//! Stateless forward/backward ops: activations and nearest upsampling.

use ndarray::{Array3, Array4, ArrayD};

pub fn relu(x: &ArrayD<f64>) -> ArrayD<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(x: &ArrayD<f64>, dy: &ArrayD<f64>) -> ArrayD<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn lrelu(x: &ArrayD<f64>, slope: f64) -> ArrayD<f64> {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

pub fn lrelu_backward(x: &ArrayD<f64>, dy: &ArrayD<f64>, slope: f64) -> ArrayD<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= 0.0 {
            *d *= slope;
        }
    });
    dx
}

pub fn tanh(x: &ArrayD<f64>) -> ArrayD<f64> {
    x.mapv(f64::tanh)
}

/// Backward from the forward *output* y: d tanh = 1 - y^2.
pub fn tanh_backward(y: &ArrayD<f64>, dy: &ArrayD<f64>) -> ArrayD<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &v| {
        *d *= 1.0 - v * v;
    });
    dx
}

/// Nearest-neighbour 2x upsampling of a (C, H, W) map.
pub fn upsample2x_2d(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ch, y, xx)| x[[ch, y / 2, xx / 2]])
}

pub fn upsample2x_2d_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = dy.dim();
    let mut dx = Array3::zeros((c, h2 / 2, w2 / 2));
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                dx[[ch, y / 2, x / 2]] += dy[[ch, y, x]];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling of a (C, D, H, W) map.
pub fn upsample2x_3d(x: &Array4<f64>) -> Array4<f64> {
    let (c, d, h, w) = x.dim();
    Array4::from_shape_fn((c, 2 * d, 2 * h, 2 * w), |(ch, z, y, xx)| {
        x[[ch, z / 2, y / 2, xx / 2]]
    })
}

pub fn upsample2x_3d_backward(dy: &Array4<f64>) -> Array4<f64> {
    let (c, d2, h2, w2) = dy.dim();
    let mut dx = Array4::zeros((c, d2 / 2, h2 / 2, w2 / 2));
    for ch in 0..c {
        for z in 0..d2 {
            for y in 0..h2 {
                for x in 0..w2 {
                    dx[[ch, z / 2, y / 2, x / 2]] += dy[[ch, z, y, x]];
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{fd_gradient, max_rel_err};
    use crate::rng::SeedStream;
    use ndarray::IxDyn;

    #[test]
    fn activations_match_fd() {
        let mut r = SeedStream::new(3);
        // Keep points away from the ReLU kink.
        let x = ArrayD::from_shape_simple_fn(IxDyn(&[12]), || {
            let v = r.normal();
            if v.abs() < 0.05 {
                0.2
            } else {
                v
            }
        });
        let head = ArrayD::from_shape_simple_fn(IxDyn(&[12]), || r.normal());

        let d = relu_backward(&x, &head);
        let fd = fd_gradient(|p| (&relu(p) * &head).sum(), &x, 1e-6);
        assert!(max_rel_err(&d, &fd) < 1e-5);

        let d = lrelu_backward(&x, &head, 0.2);
        let fd = fd_gradient(|p| (&lrelu(p, 0.2) * &head).sum(), &x, 1e-6);
        assert!(max_rel_err(&d, &fd) < 1e-5);

        let y = tanh(&x);
        let d = tanh_backward(&y, &head);
        let fd = fd_gradient(|p| (&tanh(p) * &head).sum(), &x, 1e-6);
        assert!(max_rel_err(&d, &fd) < 1e-5);
    }

    #[test]
    fn upsample_roundtrip_shapes_and_adjoint() {
        let mut r = SeedStream::new(4);
        let x = ndarray::Array3::from_shape_simple_fn((2, 3, 4), || r.normal());
        let y = upsample2x_2d(&x);
        assert_eq!(y.dim(), (2, 6, 8));
        assert_eq!(y[[1, 5, 7]], x[[1, 2, 3]]);
        // <up(x), g> == <x, up_backward(g)> (adjoint identity).
        let g = ndarray::Array3::from_shape_simple_fn((2, 6, 8), || r.normal());
        let lhs = (&y * &g).sum();
        let rhs = (&x * &upsample2x_2d_backward(&g)).sum();
        assert!((lhs - rhs).abs() < 1e-10);

        let x3 = ndarray::Array4::from_shape_simple_fn((1, 2, 2, 3), || r.normal());
        let y3 = upsample2x_3d(&x3);
        assert_eq!(y3.dim(), (1, 4, 4, 6));
        let g3 = ndarray::Array4::from_shape_simple_fn((1, 4, 4, 6), || r.normal());
        let lhs = (&y3 * &g3).sum();
        let rhs = (&x3 * &upsample2x_3d_backward(&g3)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
