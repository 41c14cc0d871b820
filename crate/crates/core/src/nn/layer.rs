use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom, PoolGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer kind plus its shape hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        channels: usize,
        eps: f64,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

impl LayerSpec {
    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        Self::Conv2d {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        }
    }

    pub fn batch_norm(channels: usize) -> Self {
        Self::BatchNorm { channels, eps: 1e-5 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Conv2d { .. } => "conv2d",
            Self::BatchNorm { .. } => "batchnorm",
            Self::Relu => "relu",
            Self::MaxPool { .. } => "maxpool",
            Self::AvgPool { .. } => "avgpool",
            Self::Flatten => "flatten",
            Self::Dense { .. } => "dense",
        }
    }

    /// Conv and dense layers carry the weights `w_pq` and get a layer id.
    pub fn is_weighted(&self) -> bool {
        matches!(self, Self::Conv2d { .. } | Self::Dense { .. })
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |why: &str| {
            Err(Error::InvalidNetwork(format!(
                "{} cannot take input {input:?}: {why}",
                self.name()
            )))
        };
        match *self {
            Self::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return bad(&format!("expected [{in_channels}, H, W]"));
                }
                match ConvGeom::new(input[0], input[1], input[2], out_channels, kernel, stride, padding) {
                    Some(g) => Ok(vec![out_channels, g.out_h, g.out_w]),
                    None => bad("kernel larger than padded input"),
                }
            }
            Self::BatchNorm { channels, .. } => {
                if input.is_empty() || input[0] != channels || input.len() == 2 {
                    return bad(&format!("expected [{channels}] or [{channels}, H, W]"));
                }
                Ok(input.to_vec())
            }
            Self::Relu => Ok(input.to_vec()),
            Self::MaxPool { kernel, stride } | Self::AvgPool { kernel, stride } => {
                if input.len() != 3 {
                    return bad("expected [C, H, W]");
                }
                match PoolGeom::new(input[0], input[1], input[2], kernel, stride) {
                    Some(g) => Ok(vec![input[0], g.out_h, g.out_w]),
                    None => bad("window larger than input"),
                }
            }
            Self::Flatten => Ok(vec![input.iter().product()]),
            Self::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return bad(&format!("expected [{inputs}]"));
                }
                Ok(vec![outputs])
            }
        }
    }

    /// Expected lengths of (weight, bias, running stats).
    fn param_lens(&self) -> (usize, usize, usize) {
        match *self {
            Self::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (out_channels * in_channels * kernel * kernel, out_channels, 0),
            Self::BatchNorm { channels, .. } => (channels, channels, channels),
            Self::Dense { inputs, outputs } => (outputs * inputs, outputs, 0),
            _ => (0, 0, 0),
        }
    }
}

/// Parameters of a layer. Batch-norm stores `gamma` in `weight` and `beta` in `bias`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Params {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weight: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub running_mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    #[serde(default)]
    pub params: Params,
}

/// Gradients of a layer's trainable parameters (empty for parameter-free layers).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for batch-norm.
    Train,
    /// Running statistics for batch-norm.
    Eval,
}

/// Per-layer forward residue needed by backward.
#[derive(Debug, Clone)]
pub(crate) enum Aux {
    None,
    Argmax(Vec<usize>),
    Norm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
    },
}

impl Layer {
    /// A layer with zero-valued parameters (identity statistics for batch-norm).
    pub fn zeroed(spec: LayerSpec) -> Self {
        let (w, b, s) = spec.param_lens();
        let params = if let LayerSpec::BatchNorm { .. } = spec {
            Params {
                weight: vec![1.0; w],
                bias: vec![0.0; b],
                running_mean: vec![0.0; s],
                running_var: vec![1.0; s],
            }
        } else {
            Params {
                weight: vec![0.0; w],
                bias: vec![0.0; b],
                ..Params::default()
            }
        };
        Self { spec, params }
    }

    pub fn check_params(&self) -> Result<()> {
        let (w, b, s) = self.spec.param_lens();
        let p = &self.params;
        if p.weight.len() != w || p.bias.len() != b || p.running_mean.len() != s || p.running_var.len() != s {
            return Err(Error::InvalidNetwork(format!(
                "{} parameters have wrong lengths",
                self.spec.name()
            )));
        }
        let finite = [&p.weight, &p.bias, &p.running_mean, &p.running_var]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::InvalidNetwork(format!(
                "{} parameters are not finite",
                self.spec.name()
            )));
        }
        if p.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidNetwork("negative running variance".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let (w, b, _) = self.spec.param_lens();
        w + b
    }

    pub(crate) fn conv_geom(&self, input: &[usize]) -> Option<ConvGeom> {
        match self.spec {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => ConvGeom::new(input[0], input[1], input[2], out_channels, kernel, stride, padding),
            _ => None,
        }
    }

    pub(crate) fn pool_geom(&self, input: &[usize]) -> Option<PoolGeom> {
        match self.spec {
            LayerSpec::MaxPool { kernel, stride } | LayerSpec::AvgPool { kernel, stride } => {
                PoolGeom::new(input[0], input[1], input[2], kernel, stride)
            }
            _ => None,
        }
    }

    /// Batched forward. `x` is `[N, ..in_shape]`.
    pub(crate) fn forward(&self, x: &Tensor, in_shape: &[usize], out_shape: &[usize], mode: Mode) -> (Tensor, Aux) {
        let n = x.shape()[0];
        let in_len: usize = in_shape.iter().product();
        let out_len: usize = out_shape.iter().product();
        let mut full_shape = vec![n];
        full_shape.extend_from_slice(out_shape);
        let mut out = vec![0.0; n * out_len];
        let xd = x.data();
        let aux = match &self.spec {
            LayerSpec::Conv2d { .. } => {
                let g = self.conv_geom(in_shape).expect("validated geometry");
                let mut cols = Vec::new();
                for (xs, os) in xd.chunks(in_len).zip(out.chunks_mut(out_len)) {
                    kernels::conv_forward_sample(xs, &self.params.weight, Some(&self.params.bias), &g, &mut cols, os);
                }
                Aux::None
            }
            LayerSpec::Dense { inputs, outputs } => {
                kernels::dense_forward(xd, n, *inputs, *outputs, &self.params.weight, Some(&self.params.bias), &mut out);
                Aux::None
            }
            LayerSpec::BatchNorm { channels, eps } => {
                let c = *channels;
                let spatial = in_len / c;
                let (mean, var) = match mode {
                    Mode::Train => batch_moments(xd, n, c, spatial),
                    Mode::Eval => (self.params.running_mean.clone(), self.params.running_var.clone()),
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let mut xhat = vec![0.0; xd.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let off = s * in_len + ch * spatial;
                        let (g, b) = (self.params.weight[ch], self.params.bias[ch]);
                        for i in off..off + spatial {
                            let h = (xd[i] - mean[ch]) * inv_std[ch];
                            xhat[i] = h;
                            out[i] = g * h + b;
                        }
                    }
                }
                Aux::Norm {
                    xhat,
                    inv_std,
                    batch_mean: mean,
                    batch_var: var,
                }
            }
            LayerSpec::Relu => {
                for (o, &v) in out.iter_mut().zip(xd) {
                    *o = v.max(0.0);
                }
                Aux::None
            }
            LayerSpec::MaxPool { .. } => {
                let g = self.pool_geom(in_shape).expect("validated geometry");
                let mut arg = vec![0usize; n * out_len];
                for ((xs, os), am) in xd.chunks(in_len).zip(out.chunks_mut(out_len)).zip(arg.chunks_mut(out_len)) {
                    kernels::maxpool_sample(xs, &g, os, am);
                }
                Aux::Argmax(arg)
            }
            LayerSpec::AvgPool { .. } => {
                let g = self.pool_geom(in_shape).expect("validated geometry");
                for (xs, os) in xd.chunks(in_len).zip(out.chunks_mut(out_len)) {
                    kernels::avgpool_sample(xs, &g, os);
                }
                Aux::None
            }
            LayerSpec::Flatten => {
                out.copy_from_slice(xd);
                Aux::None
            }
        };
        (Tensor::new(full_shape, out).expect("consistent shape"), aux)
    }

    /// Batched backward. Returns the input gradient and, if asked, parameter gradients.
    pub(crate) fn backward(
        &self,
        x: &Tensor,
        in_shape: &[usize],
        aux: &Aux,
        grad_out: &Tensor,
        mode: Mode,
        want_params: bool,
    ) -> (Tensor, Option<ParamGrads>) {
        let n = x.shape()[0];
        let in_len: usize = in_shape.iter().product();
        let out_len = grad_out.len() / n;
        let xd = x.data();
        let gd = grad_out.data();
        let mut gin = vec![0.0; xd.len()];
        let mut pg = None;
        match &self.spec {
            LayerSpec::Conv2d { .. } => {
                let g = self.conv_geom(in_shape).expect("validated geometry");
                let mut cols = Vec::new();
                for (gs, gi) in gd.chunks(out_len).zip(gin.chunks_mut(in_len)) {
                    kernels::conv_backward_data_sample(gs, &self.params.weight, &g, &mut cols, gi);
                }
                if want_params {
                    let mut gw = vec![0.0; self.params.weight.len()];
                    let mut gb = vec![0.0; self.params.bias.len()];
                    for (xs, gs) in xd.chunks(in_len).zip(gd.chunks(out_len)) {
                        kernels::conv_backward_params_sample(xs, gs, &g, &mut cols, &mut gw, &mut gb);
                    }
                    pg = Some(ParamGrads { weight: gw, bias: gb });
                }
            }
            LayerSpec::Dense { inputs, outputs } => {
                kernels::dense_backward_data(gd, n, *inputs, *outputs, &self.params.weight, &mut gin);
                if want_params {
                    let mut gw = vec![0.0; self.params.weight.len()];
                    let mut gb = vec![0.0; self.params.bias.len()];
                    kernels::dense_backward_params(xd, gd, n, *inputs, *outputs, &mut gw, &mut gb);
                    pg = Some(ParamGrads { weight: gw, bias: gb });
                }
            }
            LayerSpec::BatchNorm { channels, .. } => {
                let Aux::Norm { xhat, inv_std, .. } = aux else {
                    unreachable!("batch-norm forward always records statistics")
                };
                let c = *channels;
                let spatial = in_len / c;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = s * in_len + ch * spatial;
                        for i in off..off + spatial {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                match mode {
                    Mode::Eval => {
                        for s in 0..n {
                            for ch in 0..c {
                                let off = s * in_len + ch * spatial;
                                let scale = self.params.weight[ch] * inv_std[ch];
                                for i in off..off + spatial {
                                    gin[i] = gd[i] * scale;
                                }
                            }
                        }
                    }
                    Mode::Train => {
                        let m = (n * spatial) as f64;
                        for ch in 0..c {
                            let scale = self.params.weight[ch] * inv_std[ch] / m;
                            for s in 0..n {
                                let off = s * in_len + ch * spatial;
                                for i in off..off + spatial {
                                    gin[i] = scale * (m * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                                }
                            }
                        }
                    }
                }
                if want_params {
                    pg = Some(ParamGrads {
                        weight: dgamma,
                        bias: dbeta,
                    });
                }
            }
            LayerSpec::Relu => {
                for ((gi, &g), &v) in gin.iter_mut().zip(gd).zip(xd) {
                    *gi = if v > 0.0 { g } else { 0.0 };
                }
            }
            LayerSpec::MaxPool { .. } => {
                let Aux::Argmax(arg) = aux else {
                    unreachable!("max-pool forward always records winners")
                };
                for s in 0..n {
                    for o in 0..out_len {
                        gin[s * in_len + arg[s * out_len + o]] += gd[s * out_len + o];
                    }
                }
            }
            LayerSpec::AvgPool { .. } => {
                let g = self.pool_geom(in_shape).expect("validated geometry");
                for (gs, gi) in gd.chunks(out_len).zip(gin.chunks_mut(in_len)) {
                    kernels::avgpool_backward_sample(gs, &g, gi);
                }
            }
            LayerSpec::Flatten => gin.copy_from_slice(gd),
        }
        if want_params && pg.is_none() {
            pg = Some(ParamGrads::default());
        }
        (Tensor::new(x.shape().to_vec(), gin).expect("consistent shape"), pg)
    }
}

/// Per-channel mean and biased variance over batch and spatial positions.
fn batch_moments(x: &[f64], n: usize, c: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * spatial) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * spatial;
            mean[ch] += x[off..off + spatial].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * spatial;
            var[ch] += x[off..off + spatial].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}
