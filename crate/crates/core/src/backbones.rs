//! Small same-resolution restoration networks.
//!
//! Both architectures are plain 3x3 conv/ReLU stacks with a global skip:
//! the network predicts a correction that is added to its input. There is
//! no batch normalization, so a forward pass is a pure function of the
//! parameter list and can be run with look-ahead parameters.

use drtl_autograd::{no_grad, Float, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{DrtlError, Result};
use crate::image::Image;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    TinyDnCNN,
    TinyVDSR,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub arch: Arch,
    pub depth: usize,
    pub width: usize,
    pub channels: usize,
}

impl BackboneConfig {
    pub fn tiny_dncnn(channels: usize) -> Self {
        Self {
            arch: Arch::TinyDnCNN,
            depth: 6,
            width: 32,
            channels,
        }
    }

    pub fn tiny_vdsr(channels: usize) -> Self {
        Self {
            arch: Arch::TinyVDSR,
            depth: 8,
            width: 32,
            channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.width == 0 || !(self.channels == 1 || self.channels == 3) {
            return Err(DrtlError::Config(format!(
                "backbone needs depth >= 2, width >= 1, channels 1 or 3; got {self:?}"
            )));
        }
        Ok(())
    }

    /// `(name, shape)` for every parameter, in forward order.
    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::with_capacity(2 * self.depth);
        for l in 0..self.depth {
            let cin = if l == 0 { self.channels } else { self.width };
            let cout = if l + 1 == self.depth { self.channels } else { self.width };
            out.push((format!("conv{l}.weight"), vec![cout, cin, 3, 3]));
            out.push((format!("conv{l}.bias"), vec![cout]));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestorationModel<T: Float> {
    pub config: BackboneConfig,
    params: Vec<Tensor<T>>,
}

impl<T: Float> RestorationModel<T> {
    /// Weights and biases drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "backbone-init", 0);
        let schema = config.schema();
        let mut params = Vec::with_capacity(schema.len());
        let mut bound = 1.0;
        for (name, shape) in &schema {
            if name.ends_with("weight") {
                bound = 1.0 / ((shape[1] * 9) as f64).sqrt();
            }
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| T::from_f64_lossy(r.gen_range(-bound..bound)))
                .collect();
            params.push(Tensor::from_vec(shape, data).expect("schema shape"));
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: BackboneConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        check_schema(&config, &params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>())?;
        Ok(Self { config, params })
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        self.config
            .schema()
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.params.iter().cloned())
            .collect()
    }

    /// Fresh leaf variables holding the current parameters.
    pub fn param_vars(&self) -> Vec<Var<T>> {
        self.params.iter().cloned().map(Var::param).collect()
    }

    /// Zeroes the last layer, which makes the network the identity map.
    pub fn zero_last_layer(&mut self) {
        let n = self.params.len();
        for p in &mut self.params[n - 2..] {
            p.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Differentiable forward pass with externally supplied parameters.
    pub fn forward_with_params(&self, params: &[Var<T>], x: &Var<T>) -> Result<Var<T>> {
        check_schema(
            &self.config,
            &params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>(),
        )?;
        let s = x.shape();
        if s.len() != 4 || s[1] != self.config.channels {
            return Err(DrtlError::Shape(format!(
                "expected B x {} x H x W input, got {s:?}",
                self.config.channels
            )));
        }
        Ok(forward_unchecked(params, x))
    }

    /// Inference pass with the stored parameters; no graph is built.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        no_grad(|| {
            let ps: Vec<Var<T>> = self.params.iter().cloned().map(Var::constant).collect();
            self.forward_with_params(&ps, &Var::constant(x.clone()))
                .map(|v| v.value().clone())
        })
    }

    /// Restores a full image, clamping the output to `[0,1]`.
    pub fn restore(&self, img: &Image) -> Result<Image> {
        let (h, w, c) = img.dims();
        let x = Tensor::from_vec(&[1, c, h, w], img.to_planar())
            .expect("planar size")
            .cast::<T>();
        let y = self.forward(&x)?.cast::<f32>();
        Ok(Image::from_planar(h, w, c, y.data())?.clamp01())
    }
}

fn check_schema(config: &BackboneConfig, shapes: &[Vec<usize>]) -> Result<()> {
    let schema = config.schema();
    if schema.len() != shapes.len() {
        return Err(DrtlError::Shape(format!(
            "expected {} parameter tensors, got {}",
            schema.len(),
            shapes.len()
        )));
    }
    for ((name, want), got) in schema.iter().zip(shapes) {
        if want != got {
            return Err(DrtlError::Shape(format!("{name}: expected {want:?}, got {got:?}")));
        }
    }
    Ok(())
}

fn forward_unchecked<T: Float>(params: &[Var<T>], x: &Var<T>) -> Var<T> {
    let depth = params.len() / 2;
    let mut h = x.clone();
    for l in 0..depth {
        let w = &params[2 * l];
        let b = &params[2 * l + 1];
        let cout = b.shape()[0];
        h = h.conv2d(w).add_bcast(&b.reshape(&[1, cout, 1, 1]));
        if l + 1 < depth {
            h = h.relu();
        }
    }
    x.add(&h)
}
