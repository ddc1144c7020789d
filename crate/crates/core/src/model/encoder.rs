use serde::{Deserialize, Serialize};

use crate::attention::xavier;
use crate::error::{contract, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Observation layout declared by an environment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsSpec {
    /// Pixel grid, `channels × height × width`.
    Grid {
        channels: usize,
        height: usize,
        width: usize,
    },
    Vector { dim: usize },
}

impl ObsSpec {
    pub fn numel(&self) -> usize {
        match *self {
            ObsSpec::Grid {
                channels,
                height,
                width,
            } => channels * height * width,
            ObsSpec::Vector { dim } => dim,
        }
    }
}

/// Small observation encoder: three 3×3 convolutions and a linear map for
/// grids, a two-layer MLP for vectors.
#[derive(Clone, Debug)]
pub struct Encoder {
    spec: ObsSpec,
    convs: Vec<(ParamId, ParamId)>,
    linears: Vec<(ParamId, ParamId)>,
}

fn he_conv(rng: &mut Rng, out: usize, inp: usize) -> Tensor {
    let a = (6.0 / (inp * 9) as f64).sqrt();
    Tensor::uniform(&[out, inp, 3, 3], -a, a, rng)
}

impl Encoder {
    pub fn init(
        store: &mut ParamStore,
        spec: ObsSpec,
        d_model: usize,
        conv_channels: usize,
        rng: &mut Rng,
    ) -> Self {
        let mut convs = Vec::new();
        let mut linears = Vec::new();
        match spec {
            ObsSpec::Grid {
                channels,
                height,
                width,
            } => {
                let mut c_in = channels;
                for i in 0..3 {
                    let w = store.add(format!("enc.conv{i}.w"), he_conv(rng, conv_channels, c_in));
                    let b = store.add(format!("enc.conv{i}.b"), Tensor::zeros(&[conv_channels]));
                    convs.push((w, b));
                    c_in = conv_channels;
                }
                let flat = conv_channels * height * width;
                let w = store.add("enc.fc.w", xavier(rng, flat, d_model));
                let b = store.add("enc.fc.b", Tensor::zeros(&[d_model]));
                linears.push((w, b));
            }
            ObsSpec::Vector { dim } => {
                let w0 = store.add("enc.fc0.w", xavier(rng, dim, d_model));
                let b0 = store.add("enc.fc0.b", Tensor::zeros(&[d_model]));
                let w1 = store.add("enc.fc1.w", xavier(rng, d_model, d_model));
                let b1 = store.add("enc.fc1.b", Tensor::zeros(&[d_model]));
                linears.push((w0, b0));
                linears.push((w1, b1));
            }
        }
        Self {
            spec,
            convs,
            linears,
        }
    }

    pub fn spec(&self) -> ObsSpec {
        self.spec
    }

    /// `obs` holds `L` flattened observations back to back; returns `[L, d_model]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, obs: &[f64]) -> Result<Var> {
        let n = self.spec.numel();
        if obs.is_empty() || !obs.len().is_multiple_of(n) {
            return Err(contract(format!(
                "observation buffer of {} values does not hold whole {n}-value observations",
                obs.len()
            )));
        }
        let l = obs.len() / n;
        match self.spec {
            ObsSpec::Grid {
                channels,
                height,
                width,
            } => {
                let mut h = g.constant(Tensor::new(&[l, channels, height, width], obs.to_vec())?);
                for &(w, b) in &self.convs {
                    let (w, b) = (g.param(store, w), g.param(store, b));
                    let c = g.conv2d(h, w, b, 1)?;
                    h = g.relu(c);
                }
                let flat = g.shape(h)[1..].iter().product();
                let h = g.reshape(h, &[l, flat])?;
                let (w, b) = self.linears[0];
                let (w, b) = (g.param(store, w), g.param(store, b));
                let y = g.matmul(h, w)?;
                g.add_bias(y, b)
            }
            ObsSpec::Vector { dim } => {
                let mut h = g.constant(Tensor::new(&[l, dim], obs.to_vec())?);
                for (i, &(w, b)) in self.linears.iter().enumerate() {
                    let (w, b) = (g.param(store, w), g.param(store, b));
                    let y = g.matmul(h, w)?;
                    h = g.add_bias(y, b)?;
                    if i == 0 {
                        h = g.relu(h);
                    }
                }
                Ok(h)
            }
        }
    }
}
