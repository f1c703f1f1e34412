//! Flat parameter storage and the few layers the classifier needs.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A named matrix inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn view<'a>(&self, buf: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &buf[self.offset..self.offset + self.len()]).unwrap()
    }

    pub fn view_mut<'a>(&self, buf: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut buf[self.offset..self.offset + self.len()]).unwrap()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Layout {
    pub slots: Vec<Slot>,
    pub len: usize,
}

impl Layout {
    pub fn add(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.slots.push(Slot { name: name.into(), offset: self.len, rows, cols });
        self.len += rows * cols;
        self.slots.len() - 1
    }

    pub fn linear(&mut self, name: &str, inputs: usize, outputs: usize) -> Linear {
        Linear { w: self.add(&format!("{name}.w"), inputs, outputs), b: self.add(&format!("{name}.b"), 1, outputs) }
    }

    pub fn slot(&self, id: usize) -> &Slot {
        &self.slots[id]
    }
}

/// `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn inputs(&self, layout: &Layout) -> usize {
        layout.slot(self.w).rows
    }

    pub fn outputs(&self, layout: &Layout) -> usize {
        layout.slot(self.w).cols
    }

    pub fn forward(&self, layout: &Layout, params: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&layout.slot(self.w).view(params)) + layout.slot(self.b).view(params)
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(
        &self,
        layout: &Layout,
        params: &[f64],
        grads: &mut [f64],
        x: ArrayView2<f64>,
        dy: &Array2<f64>,
    ) -> Array2<f64> {
        let mut gw = layout.slot(self.w).view_mut(grads);
        gw += &x.t().dot(dy);
        let mut gb = layout.slot(self.b).view_mut(grads);
        gb += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&layout.slot(self.w).view(params).t())
    }

    /// He-style normal weights, zero bias.
    pub fn init(&self, layout: &Layout, params: &mut [f64], gain: f64, rng: &mut impl Rng) {
        let s = layout.slot(self.w);
        let normal = Normal::new(0.0, gain / (s.rows as f64).sqrt()).unwrap();
        for v in &mut params[s.offset..s.offset + s.len()] {
            *v = normal.sample(rng);
        }
        let b = layout.slot(self.b);
        params[b.offset..b.offset + b.len()].fill(0.0);
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut d = dy.clone();
    d.zip_mut_with(y, |g, &o| {
        if o <= 0.0 {
            *g = 0.0
        }
    });
    d
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Column means and standard deviations (floored) of `x`.
pub fn standardizer(x: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()));
    let std = x.var_axis(Axis(0), 0.0).mapv(|v| v.sqrt().max(1e-6));
    (mean, std)
}
