//! Feed-forward encoder `R^D -> R^d` with a projection head and an
//! l2-normalized output, plus its exact backward pass.
//!
//! Parameters live in one flat `Vec<f64>` (layer-major; each layer stores its
//! `out x in` weight matrix row-major followed by its bias) so the optimizer,
//! the momentum update and the checkpoint writer can treat them uniformly.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Co2Error, Result};
use crate::numeric::{dot, ensure_finite, norm, MIN_NORM};
use crate::rng::{self, Domain};

pub const PARAM_MAGIC: &[u8; 8] = b"CO2PARAM";
pub const PARAM_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// A single affine projection.
    Linear,
    /// Affine, ReLU, affine.
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub head: Head,
    pub activation: Activation,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden_dims: vec![64],
            embed_dim: 16,
            head: Head::Mlp,
            activation: Activation::Relu,
            init_seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.input_dim < self.embed_dim {
            return Err(Co2Error::InvalidConfig(format!(
                "encoder needs input_dim >= embed_dim >= 1, got {} and {}",
                self.input_dim, self.embed_dim
            )));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Co2Error::InvalidConfig(
                "hidden_dims must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }

    /// Equal architecture, ignoring the initialization seed.
    pub fn same_shape(&self, other: &Self) -> bool {
        self.input_dim == other.input_dim
            && self.hidden_dims == other.hidden_dims
            && self.embed_dim == other.embed_dim
            && self.head == other.head
            && self.activation == other.activation
    }

    /// `(fan_in, fan_out, relu)` for every affine layer in order.
    fn layer_dims(&self) -> Vec<(usize, usize, bool)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h, true));
            prev = h;
        }
        if self.head == Head::Mlp {
            dims.push((prev, prev, true));
        }
        dims.push((prev, self.embed_dim, false));
        dims
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    relu: bool,
    offset: usize,
}

impl Layer {
    fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }

    fn len(&self) -> usize {
        (self.fan_in + 1) * self.fan_out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    layers: Vec<Layer>,
    values: Vec<f64>,
}

fn layout(config: &EncoderConfig) -> (Vec<Layer>, usize) {
    let mut offset = 0;
    let layers = config
        .layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out, relu)| {
            let layer = Layer {
                fan_in,
                fan_out,
                relu,
                offset,
            };
            offset += layer.len();
            layer
        })
        .collect();
    (layers, offset)
}

/// Xavier-uniform weights from `config.init_seed`, zero biases.
pub fn init_params(config: &EncoderConfig) -> Result<EncoderParams> {
    config.validate()?;
    let (layers, total) = layout(config);
    let mut values = vec![0.0; total];
    for (i, layer) in layers.iter().enumerate() {
        let bound = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
        let mut rng = rng::stream(config.init_seed, Domain::EncoderInit, i as u64, 0);
        for w in &mut values[layer.weight_range()] {
            *w = rng.random_range(-bound..=bound);
        }
    }
    Ok(EncoderParams {
        config: config.clone(),
        layers,
        values,
    })
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input of every layer, followed by the raw (pre-normalization) output.
    activations: Vec<Vec<f64>>,
    /// Affine outputs before the ReLU, per layer.
    pre_activations: Vec<Vec<f64>>,
    raw_norm: f64,
    embedding: Vec<f64>,
}

impl ForwardTrace {
    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    pub fn raw_output(&self) -> &[f64] {
        self.activations.last().expect("trace has an output")
    }
}

impl EncoderParams {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Weight matrix (row-major, `fan_out x fan_in`) and bias of a layer.
    pub fn layer(&self, i: usize) -> (&[f64], &[f64]) {
        let l = &self.layers[i];
        (&self.values[l.weight_range()], &self.values[l.bias_range()])
    }

    pub fn layer_mut(&mut self, i: usize) -> (&mut [f64], &mut [f64]) {
        let l = self.layers[i];
        let (w, b) = self.values[l.offset..l.offset + l.len()].split_at_mut(l.fan_in * l.fan_out);
        (w, b)
    }

    /// Builds parameters from a flat value vector in the documented layout.
    pub fn from_values(config: EncoderConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (layers, total) = layout(&config);
        if values.len() != total {
            return Err(Co2Error::ShapeMismatch {
                expected: total,
                actual: values.len(),
            });
        }
        ensure_finite(&values, "encoder parameters")?;
        Ok(Self {
            config,
            layers,
            values,
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_trace(x).map(|t| t.embedding)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.config.input_dim {
            return Err(Co2Error::DimensionMismatch(format!(
                "encoder input has {} values, expected {}",
                x.len(),
                self.config.input_dim
            )));
        }
        ensure_finite(x, "encoder input")?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = self.layer(i);
            let input = activations.last().expect("input pushed");
            let h: Vec<f64> = w
                .chunks_exact(layer.fan_in)
                .zip(b)
                .map(|(row, bias)| dot(row, input) + bias)
                .collect();
            let a = if layer.relu {
                h.iter().map(|v| v.max(0.0)).collect()
            } else {
                h.clone()
            };
            pre_activations.push(h);
            activations.push(a);
        }
        let raw = activations.last().expect("output");
        let raw_norm = norm(raw);
        if !(raw_norm >= MIN_NORM) {
            return Err(Co2Error::ZeroVector { norm: raw_norm });
        }
        let embedding = raw.iter().map(|v| v / raw_norm).collect();
        Ok(ForwardTrace {
            activations,
            pre_activations,
            raw_norm,
            embedding,
        })
    }

    /// Gradient of `upstream . forward(x)` with respect to every parameter.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward_trace(x)?;
        let mut grads = vec![0.0; self.values.len()];
        self.accumulate_backward(&trace, upstream, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Adds `scale * d(upstream . embedding)/d(params)` into `grads`.
    pub fn accumulate_backward(
        &self,
        trace: &ForwardTrace,
        upstream: &[f64],
        scale: f64,
        grads: &mut [f64],
    ) -> Result<()> {
        self.accumulate_backward_with_input_grad(trace, upstream, scale, grads, None)
    }

    fn accumulate_backward_with_input_grad(
        &self,
        trace: &ForwardTrace,
        upstream: &[f64],
        scale: f64,
        grads: &mut [f64],
        input_grad: Option<&mut Vec<f64>>,
    ) -> Result<()> {
        if upstream.len() != self.config.embed_dim {
            return Err(Co2Error::ShapeMismatch {
                expected: self.config.embed_dim,
                actual: upstream.len(),
            });
        }
        if grads.len() != self.values.len() {
            return Err(Co2Error::ShapeMismatch {
                expected: self.values.len(),
                actual: grads.len(),
            });
        }
        // Normalization Jacobian: (I - y y^T) / |z|
        let y = &trace.embedding;
        let radial = dot(y, upstream);
        let mut delta: Vec<f64> = upstream
            .iter()
            .zip(y)
            .map(|(g, yi)| scale * (g - yi * radial) / trace.raw_norm)
            .collect();

        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.relu {
                for (d, h) in delta.iter_mut().zip(&trace.pre_activations[i]) {
                    if *h <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &trace.activations[i];
            let (gw, gb) = grads[layer.offset..layer.offset + layer.len()]
                .split_at_mut(layer.fan_in * layer.fan_out);
            for ((row, gb_j), &d) in gw.chunks_exact_mut(layer.fan_in).zip(gb).zip(&delta) {
                *gb_j += d;
                if d != 0.0 {
                    for (g, a) in row.iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
            }
            if i > 0 || input_grad.is_some() {
                let (w, _) = self.layer(i);
                let mut prev = vec![0.0; layer.fan_in];
                for (row, &d) in w.chunks_exact(layer.fan_in).zip(&delta) {
                    if d != 0.0 {
                        for (p, wv) in prev.iter_mut().zip(row) {
                            *p += d * wv;
                        }
                    }
                }
                delta = prev;
            }
        }
        if let Some(out) = input_grad {
            *out = delta;
        }
        Ok(())
    }

    /// Gradient of `upstream . forward(x)` with respect to the input `x`.
    pub fn input_gradient(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward_trace(x)?;
        let mut scratch = vec![0.0; self.values.len()];
        let mut out = Vec::new();
        self.accumulate_backward_with_input_grad(&trace, upstream, 1.0, &mut scratch, Some(&mut out))?;
        Ok(out)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let c = &self.config;
        w.write_all(PARAM_MAGIC)?;
        w.write_all(&PARAM_VERSION.to_le_bytes())?;
        w.write_all(&binio::usize_to_u32(c.input_dim, "input_dim")?.to_le_bytes())?;
        w.write_all(&binio::usize_to_u32(c.hidden_dims.len(), "hidden layer count")?.to_le_bytes())?;
        for &h in &c.hidden_dims {
            w.write_all(&binio::usize_to_u32(h, "hidden dim")?.to_le_bytes())?;
        }
        w.write_all(&binio::usize_to_u32(c.embed_dim, "embed_dim")?.to_le_bytes())?;
        w.write_all(&[head_code(c.head), activation_code(c.activation)])?;
        w.write_all(&c.init_seed.to_le_bytes())?;
        binio::write_f64s(w, &self.values)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        binio::read_exact(r, &mut magic, "parameter magic")?;
        if &magic != PARAM_MAGIC {
            return Err(Co2Error::BadMagic("parameter"));
        }
        let version = binio::read_u16(r, "parameter version")?;
        if version != PARAM_VERSION {
            return Err(Co2Error::UnsupportedVersion {
                kind: "parameter",
                version,
            });
        }
        let input_dim = binio::read_u32(r, "encoder config")? as usize;
        let n_hidden = binio::read_u32(r, "encoder config")? as usize;
        if n_hidden > 1 << 16 {
            return Err(Co2Error::DimensionMismatch(format!(
                "{n_hidden} hidden layers"
            )));
        }
        let hidden_dims = (0..n_hidden)
            .map(|_| binio::read_u32(r, "encoder config").map(|h| h as usize))
            .collect::<Result<Vec<_>>>()?;
        let embed_dim = binio::read_u32(r, "encoder config")? as usize;
        let head = head_from_code(binio::read_u8(r, "encoder config")?)?;
        let activation = activation_from_code(binio::read_u8(r, "encoder config")?)?;
        let init_seed = binio::read_u64(r, "encoder config")?;
        let config = EncoderConfig {
            input_dim,
            hidden_dims,
            embed_dim,
            head,
            activation,
            init_seed,
        };
        config.validate()?;
        let (_, total) = layout(&config);
        let values = binio::read_f64s(r, total, "encoder parameters")?;
        Self::from_values(config, values)
    }
}

fn head_code(head: Head) -> u8 {
    match head {
        Head::Linear => 0,
        Head::Mlp => 1,
    }
}

fn head_from_code(code: u8) -> Result<Head> {
    match code {
        0 => Ok(Head::Linear),
        1 => Ok(Head::Mlp),
        other => Err(Co2Error::InvalidConfig(format!("unknown head code {other}"))),
    }
}

fn activation_code(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
    }
}

fn activation_from_code(code: u8) -> Result<Activation> {
    match code {
        0 => Ok(Activation::Relu),
        other => Err(Co2Error::InvalidConfig(format!(
            "unknown activation code {other}"
        ))),
    }
}
