//! Small multi-label convolutional classifier.
//!
//! `image - 0.5 -> [conv3x3 + ReLU] x L -> global average pool (z) -> linear -> sigmoid`
//!
//! The post-ReLU output of the last convolution is the spatial feature map used
//! for CAM; its spatial mean is the penultimate feature `z`. Backpropagation is
//! hand-written and checked against central finite differences in the tests.

pub mod checkpoint;
pub mod conv;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::GrayImage;
use crate::rng::Rng;
use conv::ConvShape;

/// Subtracted from every pixel before the first convolution.
pub const INPUT_SHIFT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_size: usize,
    pub in_channels: usize,
    pub convs: Vec<ConvSpec>,
    pub num_classes: usize,
}

impl Architecture {
    /// Three stride-2/2/1 layers of widths 8/16/`d`.
    pub fn small(input_size: usize, num_classes: usize, d: usize) -> Self {
        Architecture {
            input_size,
            in_channels: 1,
            convs: vec![
                ConvSpec {
                    out_channels: 8,
                    stride: 2,
                },
                ConvSpec {
                    out_channels: 16,
                    stride: 2,
                },
                ConvSpec {
                    out_channels: d,
                    stride: 1,
                },
            ],
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.convs.is_empty() || self.num_classes == 0 || self.input_size == 0 {
            return Err(Error::Config(format!("degenerate architecture {self:?}")));
        }
        if self.convs.iter().any(|c| c.out_channels == 0 || c.stride == 0) {
            return Err(Error::Config("conv layers need channels and stride >= 1".into()));
        }
        Ok(())
    }

    /// Penultimate feature dimension.
    pub fn feature_dim(&self) -> usize {
        self.convs.last().map_or(0, |c| c.out_channels)
    }

    fn layer_shapes(&self) -> Vec<ConvShape> {
        let mut shapes = Vec::with_capacity(self.convs.len());
        let (mut ch, mut h) = (self.in_channels, self.input_size);
        for c in &self.convs {
            let s = ConvShape {
                in_ch: ch,
                out_ch: c.out_channels,
                in_h: h,
                in_w: h,
                stride: c.stride,
            };
            h = s.out_h();
            ch = c.out_channels;
            shapes.push(s);
        }
        shapes
    }

    /// Spatial extent of the final feature map.
    pub fn feature_extent(&self) -> usize {
        self.convs
            .iter()
            .fold(self.input_size, |h, c| conv::out_extent(h, c.stride))
    }

    pub fn param_count(&self) -> usize {
        let mut ch = self.in_channels;
        let mut n = 0;
        for c in &self.convs {
            n += c.out_channels * ch * 9 + c.out_channels;
            ch = c.out_channels;
        }
        n + self.num_classes * ch + self.num_classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            name: name.into(),
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Final feature map, channel-major: value at `(u, v, k)` is
/// `data[k * h * w + u * w + v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn at(&self, u: usize, v: usize, k: usize) -> f64 {
        self.data[k * self.height * self.width + u * self.width + v]
    }

    pub fn plane(&self, k: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[k * n..(k + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub logits: Vec<f64>,
    /// Per-class sigmoid probabilities.
    pub scores: Vec<f64>,
    /// Global average of `feature_map`.
    pub z: Vec<f64>,
    pub feature_map: FeatureMap,
}

/// Gradient of a scalar loss with respect to one sample's forward outputs.
/// `d_logits` is added to whatever `d_scores` induces on the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad {
    pub d_scores: Vec<f64>,
    pub d_logits: Vec<f64>,
    pub d_z: Vec<f64>,
}

impl OutputGrad {
    pub fn zeros(num_classes: usize, d: usize) -> Self {
        OutputGrad {
            d_scores: vec![0.0; num_classes],
            d_logits: vec![0.0; num_classes],
            d_z: vec![0.0; d],
        }
    }
}

/// Activations retained for backpropagation: the input followed by every
/// post-ReLU conv output.
#[derive(Debug, Clone)]
pub struct Trace {
    activations: Vec<Vec<f64>>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Parameters in fixed order: `conv{i}.weight`, `conv{i}.bias` for every
/// layer, then `fc.weight` (`|C| x d`) and `fc.bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierState {
    pub arch: Architecture,
    pub params: Vec<Tensor>,
}

pub type Gradients = Vec<Tensor>;

impl ClassifierState {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let mut params = Vec::new();
        let mut ch = arch.in_channels;
        for (i, c) in arch.convs.iter().enumerate() {
            params.push(Tensor::zeros(
                format!("conv{i}.weight"),
                vec![c.out_channels, ch, 3, 3],
            ));
            params.push(Tensor::zeros(format!("conv{i}.bias"), vec![c.out_channels]));
            ch = c.out_channels;
        }
        params.push(Tensor::zeros("fc.weight", vec![arch.num_classes, ch]));
        params.push(Tensor::zeros("fc.bias", vec![arch.num_classes]));
        Ok(ClassifierState { arch, params })
    }

    /// He-normal weights, zero biases.
    pub fn init(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        let mut state = Self::zeros(arch)?;
        for t in &mut state.params {
            if t.name.ends_with(".weight") {
                let fan_in: usize = t.shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite");
                for v in &mut t.data {
                    *v = normal.sample(rng);
                }
            }
        }
        Ok(state)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|t| t.name == name)
    }

    /// Class weight matrix `W` (`|C| x d`, row-major).
    pub fn fc_weight(&self) -> &Tensor {
        &self.params[self.params.len() - 2]
    }

    pub fn fc_bias(&self) -> &Tensor {
        &self.params[self.params.len() - 1]
    }

    pub fn zero_grads(&self) -> Gradients {
        self.params
            .iter()
            .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
            .collect()
    }

    fn check_input(&self, image: &GrayImage) -> Result<()> {
        let n = self.arch.input_size;
        if image.width != n || image.height != n || self.arch.in_channels != 1 {
            return Err(Error::Shape(format!(
                "classifier expects {n}x{n}x{} input, got {}x{}x1",
                self.arch.in_channels, image.width, image.height
            )));
        }
        Ok(())
    }

    pub fn forward(&self, image: &GrayImage) -> Result<ForwardResult> {
        self.forward_traced(image).map(|(f, _)| f)
    }

    pub fn forward_traced(&self, image: &GrayImage) -> Result<(ForwardResult, Trace)> {
        self.check_input(image)?;
        let shapes = self.arch.layer_shapes();
        let mut activations = Vec::with_capacity(shapes.len() + 1);
        activations.push(image.data.iter().map(|v| v - INPUT_SHIFT).collect::<Vec<f64>>());
        for (i, s) in shapes.iter().enumerate() {
            let mut out = vec![0.0; s.out_ch * s.out_h() * s.out_w()];
            conv::forward(
                s,
                &activations[i],
                &self.params[2 * i].data,
                &self.params[2 * i + 1].data,
                &mut out,
            );
            for v in &mut out {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            activations.push(out);
        }

        let last = shapes.last().expect("validated");
        let (h, w, d) = (last.out_h(), last.out_w(), last.out_ch);
        let fmap = activations.last().expect("at least one layer");
        let area = (h * w) as f64;
        let z: Vec<f64> = fmap
            .chunks_exact(h * w)
            .map(|plane| plane.iter().sum::<f64>() / area)
            .collect();

        let (fc_w, fc_b) = (self.fc_weight(), self.fc_bias());
        let logits: Vec<f64> = (0..self.arch.num_classes)
            .map(|c| {
                let row = &fc_w.data[c * d..(c + 1) * d];
                fc_b.data[c] + row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let scores = logits.iter().map(|&l| sigmoid(l)).collect();
        let feature_map = FeatureMap {
            height: h,
            width: w,
            channels: d,
            data: fmap.clone(),
        };
        Ok((
            ForwardResult {
                logits,
                scores,
                z,
                feature_map,
            },
            Trace { activations },
        ))
    }

    /// Accumulates into `grads` the parameter gradient induced by `seed`.
    pub fn backward(
        &self,
        trace: &Trace,
        fwd: &ForwardResult,
        seed: &OutputGrad,
        grads: &mut Gradients,
    ) -> Result<()> {
        let c_n = self.arch.num_classes;
        let d = self.arch.feature_dim();
        if seed.d_scores.len() != c_n || seed.d_logits.len() != c_n || seed.d_z.len() != d {
            return Err(Error::Shape(format!(
                "output gradient has {}/{}/{} entries, expected {c_n}/{c_n}/{d}",
                seed.d_scores.len(),
                seed.d_logits.len(),
                seed.d_z.len()
            )));
        }
        let n_params = self.params.len();
        let fc_w = &self.fc_weight().data;

        let mut dz = seed.d_z.clone();
        for c in 0..c_n {
            let s = fwd.scores[c];
            let dl = seed.d_scores[c] * s * (1.0 - s) + seed.d_logits[c];
            if dl == 0.0 {
                continue;
            }
            grads[n_params - 1].data[c] += dl;
            let gw = &mut grads[n_params - 2].data[c * d..(c + 1) * d];
            for k in 0..d {
                gw[k] += dl * fwd.z[k];
                dz[k] += dl * fc_w[c * d + k];
            }
        }

        let shapes = self.arch.layer_shapes();
        let last = shapes.last().expect("validated");
        let area = last.out_h() * last.out_w();
        let mut upstream: Vec<f64> = dz
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g / area as f64, area))
            .collect();

        for (i, s) in shapes.iter().enumerate().rev() {
            let out = &trace.activations[i + 1];
            for (g, &a) in upstream.iter_mut().zip(out) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
            let input = &trace.activations[i];
            let (before, rest) = grads.split_at_mut(2 * i + 1);
            let d_weight = &mut before[2 * i].data;
            let d_bias = &mut rest[0].data;
            if i == 0 {
                conv::backward(
                    s,
                    input,
                    &self.params[0].data,
                    &upstream,
                    d_weight,
                    d_bias,
                    None,
                );
            } else {
                let mut d_in = vec![0.0; input.len()];
                conv::backward(
                    s,
                    input,
                    &self.params[2 * i].data,
                    &upstream,
                    d_weight,
                    d_bias,
                    Some(&mut d_in),
                );
                upstream = d_in;
            }
        }
        Ok(())
    }

    /// `p <- p - lr * g` for every parameter.
    pub fn apply_sgd(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        check_aligned(&self.params, grads)?;
        for (p, g) in self.params.iter_mut().zip(grads) {
            for (v, dv) in p.data.iter_mut().zip(&g.data) {
                *v -= lr * dv;
            }
        }
        Ok(())
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for t in &mut self.params {
            let n = t.numel();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

fn check_aligned(params: &[Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len()
        || params
            .iter()
            .zip(grads)
            .any(|(p, g)| p.shape != g.shape || p.data.len() != g.data.len())
    {
        return Err(Error::Shape("gradients are not aligned with parameters".into()));
    }
    Ok(())
}

/// Value of a scalar objective over a batch and the parameter gradient.
///
/// `loss` receives one [`ForwardResult`] per image and returns the loss value
/// together with its gradient with respect to each result's scores and `z`.
pub fn grad<F>(state: &ClassifierState, images: &[&GrayImage], loss: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&[ForwardResult]) -> Result<(f64, Vec<OutputGrad>)>,
{
    let mut forwards = Vec::with_capacity(images.len());
    let mut traces = Vec::with_capacity(images.len());
    for img in images {
        let (f, t) = state.forward_traced(img)?;
        forwards.push(f);
        traces.push(t);
    }
    let (value, seeds) = loss(&forwards)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(value));
    }
    if seeds.len() != forwards.len() {
        return Err(Error::Shape(format!(
            "{} output gradients for {} images",
            seeds.len(),
            forwards.len()
        )));
    }
    let mut grads = state.zero_grads();
    for ((t, f), s) in traces.iter().zip(&forwards).zip(&seeds) {
        state.backward(t, f, s, &mut grads)?;
    }
    Ok((value, grads))
}

pub fn sgd_step(state: &ClassifierState, grads: &Gradients, lr: f64) -> Result<ClassifierState> {
    let mut next = state.clone();
    next.apply_sgd(grads, lr)?;
    Ok(next)
}

/// Random grayscale image, for tests and gradient checks.
pub fn random_image(size: usize, rng: &mut Rng) -> GrayImage {
    let data = (0..size * size).map(|_| rng.random::<f64>()).collect();
    GrayImage::new(size, size, data).expect("sized")
}
