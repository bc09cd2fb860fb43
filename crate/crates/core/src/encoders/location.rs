//! Location encoder: spherical-harmonic basis followed by an MLP.

use super::harmonics::spherical_harmonic_features;
use super::{GeoCoordinate, LocationConfig};
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct LocationEncoder {
    config: LocationConfig,
    hidden: Vec<Linear>,
    proj: Linear,
}

impl LocationEncoder {
    pub fn new<T: Scalar>(config: &LocationConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut hidden = Vec::with_capacity(config.hidden_depth);
        let mut fan_in = config.num_features();
        for i in 0..config.hidden_depth {
            hidden.push(Linear::new(store, &format!("location.hidden{i}"), fan_in, config.hidden_width, true, rng));
            fan_in = config.hidden_width;
        }
        let proj = Linear::new(store, "location.proj", fan_in, config.proj_dim, false, rng);
        Ok(Self {
            config: config.clone(),
            hidden,
            proj,
        })
    }

    pub fn config(&self) -> &LocationConfig {
        &self.config
    }

    pub fn features<T: Scalar>(&self, coords: &[GeoCoordinate]) -> Tensor<T> {
        let n = self.config.num_features();
        let mut out = Tensor::zeros(coords.len(), n);
        for (r, &c) in coords.iter().enumerate() {
            for (o, v) in out.row_mut(r).iter_mut().zip(spherical_harmonic_features(c, self.config.max_degree)) {
                *o = T::of(v);
            }
        }
        out
    }

    /// `batch × proj_dim` unit rows.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, coords: &[GeoCoordinate]) -> Var {
        let mut h = g.constant(self.features(coords));
        for layer in &self.hidden {
            h = layer.forward(g, h);
            h = g.gelu(h);
        }
        let p = self.proj.forward(g, h);
        g.l2_normalize(p)
    }

    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, coords: &[GeoCoordinate]) -> Vec<Vec<T>> {
        let mut g = Graph::frozen(store);
        let out = self.forward(&mut g, coords);
        let t = g.value(out);
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }
}
