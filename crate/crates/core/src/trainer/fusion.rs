//! Gated image-to-point feature fusion:
//! `w = sigmoid(h(tanh(f(F3d) + g(F2d))))`, output `[F3d, w * F2d]`.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use super::nn::{sigmoid, Layout, Linear};
use crate::error::{input_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionGate {
    pub f: Linear,
    pub g: Linear,
    pub h: Linear,
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FusionCache {
    pub f3d: Array2<f64>,
    pub f2d: Array2<f64>,
    pub t: Array2<f64>,
    pub w: Array2<f64>,
}

impl FusionGate {
    pub fn new(layout: &mut Layout, dim: usize, hidden: usize) -> Self {
        Self {
            f: layout.linear("gate.f", dim, hidden),
            g: layout.linear("gate.g", dim, hidden),
            h: layout.linear("gate.h", hidden, dim),
        }
    }

    pub fn forward(
        &self,
        layout: &Layout,
        params: &[f64],
        f3d: ArrayView2<f64>,
        f2d: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, FusionCache)> {
        if f3d.dim() != f2d.dim() || f3d.ncols() != self.f.inputs(layout) {
            return Err(input_err(format!("fusion shapes {:?} and {:?} do not match the gate", f3d.dim(), f2d.dim())));
        }
        let t = (self.f.forward(layout, params, f3d) + self.g.forward(layout, params, f2d)).mapv(f64::tanh);
        let w = self.h.forward(layout, params, t.view()).mapv(sigmoid);
        let out = concatenate(Axis(1), &[f3d, (&w * &f2d).view()]).unwrap();
        Ok((out, FusionCache { f3d: f3d.to_owned(), f2d: f2d.to_owned(), t, w }))
    }

    /// Returns `(dF3d, dF2d)` and accumulates gate gradients.
    pub fn backward(
        &self,
        layout: &Layout,
        params: &[f64],
        grads: &mut [f64],
        cache: &FusionCache,
        dout: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let d = cache.f3d.ncols();
        let mut d3 = dout.slice(s![.., ..d]).to_owned();
        let dfused = dout.slice(s![.., d..]);
        let mut d2 = &dfused * &cache.w;
        let dw = &dfused * &cache.f2d;
        let dh = dw * &cache.w.mapv(|w| w * (1.0 - w));
        let dt = self.h.backward(layout, params, grads, cache.t.view(), &dh);
        let da = dt * &cache.t.mapv(|t| 1.0 - t * t);
        d3 += &self.f.backward(layout, params, grads, cache.f3d.view(), &da);
        d2 += &self.g.backward(layout, params, grads, cache.f2d.view(), &da);
        (d3, d2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gate_halves_image_features() {
        let mut layout = Layout::default();
        let gate = FusionGate::new(&mut layout, 2, 3);
        let params = vec![0.0; layout.len];
        let f3d = array![[1.0, -2.0]];
        let f2d = array![[4.0, 6.0]];
        let (out, _) = gate.forward(&layout, &params, f3d.view(), f2d.view()).unwrap();
        assert_eq!(out, array![[1.0, -2.0, 2.0, 3.0]]);
        let (out, _) = gate.forward(&layout, &params, f3d.view(), (f2d * 0.0).view()).unwrap();
        assert_eq!(out, array![[1.0, -2.0, 0.0, 0.0]]);
        assert!(gate.forward(&layout, &params, f3d.view(), array![[1.0]].view()).is_err());
    }
}
