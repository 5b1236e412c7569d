use std::ops::{Deref, DerefMut};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Fully connected network shape. `layer_widths` lists the input width, the
/// hidden widths, and the output width. Hidden layers use `activation`; the
/// output layer is linear.
///
/// Parameters are flattened layer by layer. Within a layer the weight matrix
/// comes first, stored row-major as `w[out][in]`, followed by the bias.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
}

/// Flat parameter vector in the canonical layout of an [`MlpSpec`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

/// Activations recorded by a forward pass, consumed by the backward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    // pre[l] and post[l] belong to layer l's output; inputs are kept apart.
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    nonzero: Vec<usize>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.post.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::InvalidParameter("MLP needs input and output widths".into()));
        }
        if layer_widths.contains(&0) {
            return Err(Error::InvalidParameter("MLP widths must be positive".into()));
        }
        Ok(Self {
            layer_widths,
            activation,
        })
    }

    /// `input -> hidden... -> output`.
    pub fn with_hidden(input: usize, hidden: &[usize], output: usize, activation: Activation) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self::new(widths, activation)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated non-empty")
    }

    fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layer_widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Offsets of each layer's weights in the flat vector.
    fn layer_offsets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.layer_widths.windows(2).map(move |w| {
            let start = offset;
            offset += w[0] * w[1] + w[1];
            (start, w[0], w[1])
        })
    }

    /// Uniform `±1/sqrt(fan_in)` initialisation for weights and biases.
    pub fn init_params(&self, rng: &mut Rng) -> ParamVector {
        let mut params = Vec::with_capacity(self.num_params());
        for (_, fan_in, fan_out) in self.layer_offsets() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..(fan_in * fan_out + fan_out) {
                params.push(rng.random_range(-bound..bound));
            }
        }
        ParamVector(params)
    }

    /// Like [`init_params`](Self::init_params) but the output layer is
    /// scaled by `output_scale`.
    pub fn init_params_scaled_output(&self, rng: &mut Rng, output_scale: f64) -> ParamVector {
        let mut params = self.init_params(rng);
        let (start, _, _) = self.layer_offsets().last().expect("at least one layer");
        params[start..].iter_mut().for_each(|p| *p *= output_scale);
        params
    }

    fn check(&self, params: &[f64], input: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::dims("MLP parameters", self.num_params(), params.len()));
        }
        if input.len() != self.input_dim() {
            return Err(Error::dims("MLP input", self.input_dim(), input.len()));
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        let mut cache = ForwardCache::default();
        self.forward_cached(params, input, &mut cache)?;
        Ok(cache.post.pop().unwrap_or_default())
    }

    /// Forward pass that keeps every layer's activations in `cache`.
    pub fn forward_cached(&self, params: &[f64], input: &[f64], cache: &mut ForwardCache) -> Result<()> {
        self.check(params, input)?;
        let layers = self.num_layers();
        cache.pre.resize_with(layers, Vec::new);
        cache.post.resize_with(layers, Vec::new);
        cache.input.clear();
        cache.input.extend_from_slice(input);
        cache.nonzero.clear();
        cache.nonzero.extend((0..input.len()).filter(|&i| input[i] != 0.0));
        let sparse = cache.nonzero.len() * 4 < input.len();

        for (l, (start, fan_in, fan_out)) in self.layer_offsets().enumerate() {
            let weights = &params[start..start + fan_in * fan_out];
            let bias = &params[start + fan_in * fan_out..start + fan_in * fan_out + fan_out];
            let z = &mut cache.pre[l];
            z.clear();
            z.extend_from_slice(bias);
            let x: &[f64] = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            if l == 0 && sparse {
                for &i in &cache.nonzero {
                    let xi = x[i];
                    for (j, zj) in z.iter_mut().enumerate() {
                        *zj += weights[j * fan_in + i] * xi;
                    }
                }
            } else {
                for (j, zj) in z.iter_mut().enumerate() {
                    let row = &weights[j * fan_in..(j + 1) * fan_in];
                    *zj += row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
                }
            }
            let last = l + 1 == layers;
            let a = &mut cache.post[l];
            a.clear();
            if last {
                a.extend_from_slice(&cache.pre[l]);
            } else {
                a.extend(cache.pre[l].iter().map(|&zj| self.activation.apply(zj)));
            }
        }
        Ok(())
    }

    /// Reverse pass for the loss `<output, out_grad>`. Parameter gradients
    /// are added into `grad`; the input gradient is written when requested.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ForwardCache,
        out_grad: &[f64],
        grad: &mut [f64],
        input_grad: Option<&mut [f64]>,
    ) -> Result<()> {
        if out_grad.len() != self.output_dim() {
            return Err(Error::dims("MLP output gradient", self.output_dim(), out_grad.len()));
        }
        if grad.len() != self.num_params() {
            return Err(Error::dims("MLP gradient buffer", self.num_params(), grad.len()));
        }
        let offsets: Vec<_> = self.layer_offsets().collect();
        let mut delta = out_grad.to_vec();
        let mut next_delta = Vec::new();
        let sparse = cache.nonzero.len() * 4 < cache.input.len();
        let mut input_grad = input_grad;

        for l in (0..offsets.len()).rev() {
            let (start, fan_in, fan_out) = offsets[l];
            let weights = &params[start..start + fan_in * fan_out];
            let x: &[f64] = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            {
                let (gw, gb) = grad[start..start + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for (j, dj) in delta.iter().enumerate() {
                    gb[j] += dj;
                    if *dj == 0.0 {
                        continue;
                    }
                    let row = &mut gw[j * fan_in..(j + 1) * fan_in];
                    if l == 0 && sparse {
                        for &i in &cache.nonzero {
                            row[i] += dj * x[i];
                        }
                    } else {
                        for (g, xi) in row.iter_mut().zip(x) {
                            *g += dj * xi;
                        }
                    }
                }
            }
            if l == 0 && input_grad.is_none() {
                break;
            }
            next_delta.clear();
            next_delta.resize(fan_in, 0.0);
            for (j, dj) in delta.iter().enumerate() {
                if *dj == 0.0 {
                    continue;
                }
                let row = &weights[j * fan_in..(j + 1) * fan_in];
                for (nd, w) in next_delta.iter_mut().zip(row) {
                    *nd += w * dj;
                }
            }
            if l == 0 {
                if let Some(out) = input_grad.as_deref_mut() {
                    if out.len() != fan_in {
                        return Err(Error::dims("MLP input gradient", fan_in, out.len()));
                    }
                    out.copy_from_slice(&next_delta);
                }
                break;
            }
            for (i, nd) in next_delta.iter_mut().enumerate() {
                *nd *= self.activation.derivative(cache.pre[l - 1][i], cache.post[l - 1][i]);
            }
            std::mem::swap(&mut delta, &mut next_delta);
        }
        Ok(())
    }

    /// Gradient of `<output(input), loss_seed>` with respect to the
    /// parameters.
    pub fn gradient(&self, params: &[f64], loss_seed: &[f64], input: &[f64]) -> Result<ParamVector> {
        let mut cache = ForwardCache::default();
        self.forward_cached(params, input, &mut cache)?;
        let mut grad = vec![0.0; self.num_params()];
        self.backward(params, &cache, loss_seed, &mut grad, None)?;
        ensure_finite(&grad, "MLP gradient")?;
        Ok(ParamVector(grad))
    }

    /// Gradient of `<output(input), loss_seed>` with respect to the input.
    pub fn input_gradient(&self, params: &[f64], loss_seed: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        let mut cache = ForwardCache::default();
        self.forward_cached(params, input, &mut cache)?;
        let mut grad = vec![0.0; self.num_params()];
        let mut input_grad = vec![0.0; self.input_dim()];
        self.backward(params, &cache, loss_seed, &mut grad, Some(&mut input_grad))?;
        Ok(input_grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zero_params_give_zero_output() {
        let spec = MlpSpec::with_hidden(3, &[4, 4], 2, Activation::Tanh).unwrap();
        let params = vec![0.0; spec.num_params()];
        assert_eq!(spec.forward(&params, &[1.0, -2.0, 0.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let spec = MlpSpec::new(vec![3, 3], Activation::Relu).unwrap();
        let mut params = vec![0.0; spec.num_params()];
        for i in 0..3 {
            params[i * 3 + i] = 1.0;
        }
        let x = [0.3, -1.5, 2.0];
        assert_eq!(spec.forward(&params, &x).unwrap(), x.to_vec());
    }

    #[test]
    fn scalar_linear_gradient() {
        let spec = MlpSpec::new(vec![2, 1], Activation::Relu).unwrap();
        let params = [0.4, -0.7, 0.1];
        let g = spec.gradient(&params, &[2.5], &[3.0, -1.0]).unwrap();
        assert_eq!(g.0, vec![7.5, -2.5, 2.5]);
        let zero = spec.gradient(&params, &[0.0], &[3.0, -1.0]).unwrap();
        assert!(zero.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn dimension_errors() {
        let spec = MlpSpec::with_hidden(2, &[3], 1, Activation::Relu).unwrap();
        let params = vec![0.1; spec.num_params()];
        assert!(spec.forward(&params, &[1.0]).is_err());
        assert!(spec.forward(&params[1..], &[1.0, 2.0]).is_err());
        assert!(spec.gradient(&params, &[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(MlpSpec::new(vec![2], Activation::Relu).is_err());
        assert!(MlpSpec::new(vec![2, 0, 1], Activation::Relu).is_err());
    }

    #[test]
    fn sparse_and_dense_paths_agree() {
        let spec = MlpSpec::with_hidden(40, &[8], 3, Activation::Relu).unwrap();
        let params = spec.init_params(&mut seeded(1));
        let mut x = vec![0.0; 40];
        x[3] = 1.0;
        x[31] = 1.0;
        let sparse = spec.forward(&params, &x).unwrap();
        // dense reference
        let mut h = vec![0.0; 8];
        for j in 0..8 {
            h[j] = params[320 + j] + (0..40).map(|i| params[j * 40 + i] * x[i]).sum::<f64>();
            h[j] = h[j].max(0.0);
        }
        let off = 320 + 8;
        for k in 0..3 {
            let y = params[off + 24 + k] + (0..8).map(|j| params[off + k * 8 + j] * h[j]).sum::<f64>();
            assert!((y - sparse[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn input_gradient_of_linear_map() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Tanh).unwrap();
        // w = [[1, 2], [3, 4]], b = 0
        let params = [1.0, 2.0, 3.0, 4.0, 0.0, 0.0];
        let g = spec.input_gradient(&params, &[1.0, -1.0], &[0.5, 0.5]).unwrap();
        assert_eq!(g, vec![-2.0, -2.0]);
    }
}
