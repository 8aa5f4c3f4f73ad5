use super::mlp::{Mlp, MlpGrads};
use crate::error::{Error, Result};

/// A set of named, flat parameter tensors in a fixed order.
pub trait Trainable {
    fn tensors(&self) -> Vec<(String, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])>;
}

impl Trainable for Mlp {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers().iter().enumerate() {
            out.push((format!("layer{i}.weight"), l.weight.as_slice().expect("standard layout")));
            out.push((format!("layer{i}.bias"), l.bias.as_slice().expect("standard layout")));
            if let Some(n) = &l.norm {
                out.push((format!("layer{i}.bn_scale"), n.scale.as_slice().expect("standard layout")));
                out.push((format!("layer{i}.bn_shift"), n.shift.as_slice().expect("standard layout")));
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.bump_version();
        let mut out = Vec::new();
        for (i, l) in self.layers_mut_unversioned().iter_mut().enumerate() {
            out.push((format!("layer{i}.weight"), l.weight.as_slice_mut().expect("standard layout")));
            out.push((format!("layer{i}.bias"), l.bias.as_slice_mut().expect("standard layout")));
            if let Some(n) = l.norm.as_mut() {
                out.push((format!("layer{i}.bn_scale"), n.scale.as_slice_mut().expect("standard layout")));
                out.push((format!("layer{i}.bn_shift"), n.shift.as_slice_mut().expect("standard layout")));
            }
        }
        out
    }
}

impl Trainable for MlpGrads {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), l.weight.as_slice().expect("standard layout")));
            out.push((format!("layer{i}.bias"), l.bias.as_slice().expect("standard layout")));
            if let (Some(s), Some(b)) = (&l.scale, &l.shift) {
                out.push((format!("layer{i}.bn_scale"), s.as_slice().expect("standard layout")));
                out.push((format!("layer{i}.bn_shift"), b.as_slice().expect("standard layout")));
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.weight"), l.weight.as_slice_mut().expect("standard layout")));
            out.push((format!("layer{i}.bias"), l.bias.as_slice_mut().expect("standard layout")));
            if let (Some(s), Some(b)) = (l.scale.as_mut(), l.shift.as_mut()) {
                out.push((format!("layer{i}.bn_scale"), s.as_slice_mut().expect("standard layout")));
                out.push((format!("layer{i}.bn_shift"), b.as_slice_mut().expect("standard layout")));
            }
        }
        out
    }
}

/// Plain named vectors, for parameters that are not part of a network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NamedVectors(pub Vec<(String, Vec<f64>)>);

impl NamedVectors {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

impl Trainable for NamedVectors {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        self.0.iter().map(|(n, v)| (n.clone(), v.as_slice())).collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.0.iter_mut().map(|(n, v)| (n.clone(), v.as_mut_slice())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// ADAM moment accumulators, created on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected ADAM update. Nothing is modified when any gradient is non-finite.
    pub fn step<P, G>(&mut self, params: &mut P, grads: &G, lr: f64) -> Result<()>
    where
        P: Trainable + ?Sized,
        G: Trainable + ?Sized,
    {
        let grads = grads.tensors();
        for (name, g) in &grads {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { term: format!("gradient of {name}[{i}]") });
            }
        }
        let mut params = params.tensors_mut();
        if params.len() != grads.len() {
            return Err(Error::Shape(format!("{} parameter tensors but {} gradients", params.len(), grads.len())));
        }
        for ((pn, p), (gn, g)) in params.iter().zip(&grads) {
            if pn != gn || p.len() != g.len() {
                return Err(Error::Shape(format!("parameter {pn}[{}] paired with gradient {gn}[{}]", p.len(), g.len())));
            }
        }
        if self.moments.is_empty() {
            self.moments = params.iter().map(|(n, p)| (n.clone(), vec![0.0; p.len()], vec![0.0; p.len()])).collect();
        } else if self.moments.len() != params.len()
            || self.moments.iter().zip(&params).any(|((n, m, _), (pn, p))| n != pn || m.len() != p.len())
        {
            return Err(Error::Shape("optimizer state does not match parameter layout".into()));
        }

        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((_, p), (_, g)), (_, m, v)) in params.iter_mut().zip(&grads).zip(self.moments.iter_mut()) {
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
