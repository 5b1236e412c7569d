//! Small fully connected networks with hand-written backprop and Adam.

mod adam;
mod mlp;

pub use adam::{target_sync, AdamState, SyncMode};
pub use mlp::{Activation, ForwardCache, MlpSpec, ParamVector};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::Rng;

/// A network with its own optimizer state. Serialised as
/// `{spec, params, adam}`; this is also the checkpoint format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: MlpSpec,
    pub params: ParamVector,
    pub adam: AdamState,
}

impl Network {
    pub fn new(spec: MlpSpec, lr: f64, rng: &mut Rng) -> Self {
        let params = spec.init_params(rng);
        let adam = AdamState::new(params.len(), lr);
        Self { spec, params, adam }
    }

    pub fn with_output_scale(spec: MlpSpec, lr: f64, rng: &mut Rng, output_scale: f64) -> Self {
        let params = spec.init_params_scaled_output(rng, output_scale);
        let adam = AdamState::new(params.len(), lr);
        Self { spec, params, adam }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.spec.forward(&self.params, input)
    }

    pub fn forward_cached(&self, input: &[f64], cache: &mut ForwardCache) -> Result<()> {
        self.spec.forward_cached(&self.params, input, cache)
    }

    pub fn backward(&self, cache: &ForwardCache, out_grad: &[f64], grad: &mut [f64], input_grad: Option<&mut [f64]>) -> Result<()> {
        self.spec.backward(&self.params, cache, out_grad, grad, input_grad)
    }

    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    /// Adam step on a loss gradient.
    pub fn apply_gradient(&mut self, grad: &mut [f64], clip_norm: Option<f64>) -> Result<f64> {
        self.adam.step(&mut self.params, grad, clip_norm)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("network serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn checkpoint_round_trip() {
        let spec = MlpSpec::with_hidden(3, &[4], 2, Activation::Tanh).unwrap();
        let mut net = Network::new(spec, 1e-3, &mut seeded(0));
        let mut g = vec![0.1; net.params.len()];
        net.apply_gradient(&mut g, None).unwrap();
        let text = net.to_json();
        assert!(text.starts_with("{\"spec\""));
        assert_eq!(Network::from_json(&text).unwrap(), net);
    }
}
