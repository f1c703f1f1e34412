//! The dual-branch classifier: a point head over handcrafted descriptors, an
//! image head over pixel descriptors, the fusion gate, a linear classifier and
//! two projection heads for association.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::features::POINT_FEATURE_DIM;
use super::fusion::{FusionCache, FusionGate};
use super::nn::{relu, relu_backward, Layout, Linear};
use crate::container::Container;
use crate::error::{config_err, input_err, Error, Result};
use crate::superpixel::PIXEL_DESCRIPTOR_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub point_inputs: usize,
    pub pixel_inputs: usize,
    pub hidden: usize,
    /// Width `D` of both branch features.
    pub dim: usize,
    pub gate_hidden: usize,
    pub projection_dim: usize,
}

impl ModelConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            point_inputs: POINT_FEATURE_DIM,
            pixel_inputs: PIXEL_DESCRIPTOR_DIM,
            hidden: 32,
            dim: 32,
            gate_hidden: 16,
            projection_dim: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.num_classes,
            self.point_inputs,
            self.pixel_inputs,
            self.hidden,
            self.dim,
            self.gate_hidden,
            self.projection_dim,
        ];
        if dims.contains(&0) || self.num_classes < 2 {
            return Err(config_err("model dimensions must be positive with at least two classes"));
        }
        Ok(())
    }
}

/// Parameter slots of a [`ModelConfig`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Network {
    pub config: ModelConfig,
    pub layout: Layout,
    pub point: [Linear; 2],
    pub image: [Linear; 2],
    pub gate: FusionGate,
    pub classifier: Linear,
    pub proj3d: Linear,
    pub proj2d: Linear,
}

impl Network {
    pub fn new(config: ModelConfig) -> Self {
        let mut l = Layout::default();
        let c = &config;
        let point = [l.linear("point.0", c.point_inputs, c.hidden), l.linear("point.1", c.hidden, c.dim)];
        let image = [l.linear("image.0", c.pixel_inputs, c.hidden), l.linear("image.1", c.hidden, c.dim)];
        let gate = FusionGate::new(&mut l, c.dim, c.gate_hidden);
        let classifier = l.linear("classifier", 2 * c.dim, c.num_classes);
        let proj3d = l.linear("proj3d", c.dim, c.projection_dim);
        let proj2d = l.linear("proj2d", c.dim, c.projection_dim);
        Self { config, layout: l, point, image, gate, classifier, proj3d, proj2d }
    }
}

/// Two-layer ReLU branch activations.
#[derive(Debug, Clone)]
pub struct BranchCache {
    pub x: Array2<f64>,
    pub h: Array2<f64>,
    pub out: Array2<f64>,
}

fn branch_forward(layers: &[Linear; 2], layout: &Layout, params: &[f64], x: Array2<f64>) -> BranchCache {
    let h = relu(&layers[0].forward(layout, params, x.view()));
    let out = relu(&layers[1].forward(layout, params, h.view()));
    BranchCache { x, h, out }
}

fn branch_backward(
    layers: &[Linear; 2],
    layout: &Layout,
    params: &[f64],
    grads: &mut [f64],
    c: &BranchCache,
    dout: &Array2<f64>,
) {
    let d = relu_backward(&c.out, dout);
    let dh = layers[1].backward(layout, params, grads, c.h.view(), &d);
    let d = relu_backward(&c.h, &dh);
    layers[0].backward(layout, params, grads, c.x.view(), &d);
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub point: BranchCache,
    pub image: BranchCache,
    pub fusion: FusionCache,
    pub fused: Array2<f64>,
    pub logits: Array2<f64>,
}

/// Parameters, input standardisation and optimiser state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierState {
    pub network: Network,
    pub params: Vec<f64>,
    pub velocity: Vec<f64>,
    pub step: u64,
    pub point_mean: Array1<f64>,
    pub point_std: Array1<f64>,
    pub pixel_mean: Array1<f64>,
    pub pixel_std: Array1<f64>,
}

impl ClassifierState {
    /// Deterministic initialisation; the standardisation defaults to identity.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let network = Network::new(config);
        let mut params = vec![0.0; network.layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he = 2f64.sqrt();
        for l in network.point.iter().chain(&network.image) {
            l.init(&network.layout, &mut params, he, &mut rng);
        }
        for l in [network.gate.f, network.gate.g, network.gate.h, network.classifier, network.proj3d, network.proj2d] {
            l.init(&network.layout, &mut params, 1.0, &mut rng);
        }
        let len = params.len();
        Ok(Self {
            network,
            params,
            velocity: vec![0.0; len],
            step: 0,
            point_mean: Array1::zeros(config.point_inputs),
            point_std: Array1::ones(config.point_inputs),
            pixel_mean: Array1::zeros(config.pixel_inputs),
            pixel_std: Array1::ones(config.pixel_inputs),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.network.config
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().chain(&self.velocity).all(|v| v.is_finite())
    }

    fn standardize(x: ArrayView2<f64>, mean: &Array1<f64>, std: &Array1<f64>) -> Result<Array2<f64>> {
        if x.ncols() != mean.len() {
            return Err(input_err(format!("expected {} input columns, got {}", mean.len(), x.ncols())));
        }
        Ok((&x - &mean.view().insert_axis(Axis(0))) / std.view().insert_axis(Axis(0)))
    }

    pub fn image_branch(&self, pixels: ArrayView2<f64>) -> Result<BranchCache> {
        let x = Self::standardize(pixels, &self.pixel_mean, &self.pixel_std)?;
        Ok(branch_forward(&self.network.image, &self.network.layout, &self.params, x))
    }

    pub fn forward(&self, points: ArrayView2<f64>, pixels: ArrayView2<f64>) -> Result<Forward> {
        if points.nrows() != pixels.nrows() {
            return Err(input_err("point and pixel inputs differ in row count"));
        }
        let n = &self.network;
        let x = Self::standardize(points, &self.point_mean, &self.point_std)?;
        let point = branch_forward(&n.point, &n.layout, &self.params, x);
        let image = self.image_branch(pixels)?;
        let (fused, fusion) = n.gate.forward(&n.layout, &self.params, point.out.view(), image.out.view())?;
        let logits = n.classifier.forward(&n.layout, &self.params, fused.view());
        Ok(Forward { point, image, fusion, fused, logits })
    }

    /// Backward pass from logit gradients plus optional extra gradients on the
    /// point-branch features; accumulates into `grads`.
    pub fn backward(
        &self,
        fwd: &Forward,
        dlogits: &Array2<f64>,
        extra_dpoint: Option<&Array2<f64>>,
        grads: &mut [f64],
    ) {
        let n = &self.network;
        let dfused = n.classifier.backward(&n.layout, &self.params, grads, fwd.fused.view(), dlogits);
        let (mut d3, d2) = n.gate.backward(&n.layout, &self.params, grads, &fwd.fusion, &dfused);
        if let Some(e) = extra_dpoint {
            d3 += e;
        }
        branch_backward(&n.point, &n.layout, &self.params, grads, &fwd.point, &d3);
        branch_backward(&n.image, &n.layout, &self.params, grads, &fwd.image, &d2);
    }

    /// Backward through the image branch alone (superpixel inputs).
    pub fn image_backward(&self, cache: &BranchCache, dout: &Array2<f64>, grads: &mut [f64]) {
        let n = &self.network;
        branch_backward(&n.image, &n.layout, &self.params, grads, cache, dout);
    }

    pub fn write_sections(&self, c: &mut Container) -> Result<()> {
        let m = self.config();
        let cfg = [m.num_classes, m.point_inputs, m.pixel_inputs, m.hidden, m.dim, m.gate_hidden, m.projection_dim];
        c.push_i64("model.config", &[cfg.len()], cfg.iter().map(|&v| v as i64).collect())?;
        c.push_f64("model.params", &[self.params.len()], self.params.clone())?;
        c.push_f64("model.velocity", &[self.velocity.len()], self.velocity.clone())?;
        c.push_i64("model.step", &[1], vec![self.step as i64])?;
        for (name, v) in [
            ("model.point_mean", &self.point_mean),
            ("model.point_std", &self.point_std),
            ("model.pixel_mean", &self.pixel_mean),
            ("model.pixel_std", &self.pixel_std),
        ] {
            c.push_f64(name, &[v.len()], v.to_vec())?;
        }
        Ok(())
    }

    pub fn read_sections(c: &Container) -> Result<Self> {
        let (_, cfg) = c.i64("model.config")?;
        if cfg.len() != 7 || cfg.iter().any(|&v| v <= 0) {
            return Err(Error::Format("bad model.config section".into()));
        }
        let u = |i: usize| cfg[i] as usize;
        let config = ModelConfig {
            num_classes: u(0),
            point_inputs: u(1),
            pixel_inputs: u(2),
            hidden: u(3),
            dim: u(4),
            gate_hidden: u(5),
            projection_dim: u(6),
        };
        let mut s = Self::init(config, 0)?;
        let load = |name: &str, len: usize| -> Result<Vec<f64>> {
            let (_, v) = c.f64(name)?;
            if v.len() != len {
                return Err(Error::Format(format!("section `{name}` has {} values, expected {len}", v.len())));
            }
            Ok(v.to_vec())
        };
        s.params = load("model.params", s.params.len())?;
        s.velocity = load("model.velocity", s.velocity.len())?;
        s.step = c.i64("model.step")?.1.first().copied().unwrap_or(0) as u64;
        s.point_mean = load("model.point_mean", config.point_inputs)?.into();
        s.point_std = load("model.point_std", config.point_inputs)?.into();
        s.pixel_mean = load("model.pixel_mean", config.pixel_inputs)?.into();
        s.pixel_std = load("model.pixel_std", config.pixel_inputs)?.into();
        if !s.is_finite() {
            return Err(Error::Format("non-finite checkpoint".into()));
        }
        Ok(s)
    }
}
