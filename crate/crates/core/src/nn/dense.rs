use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::blob;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseActivation {
    Identity,
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
}

impl DenseActivation {
    pub fn apply<'g>(self, v: Var<'g>) -> Var<'g> {
        match self {
            Self::Identity => v,
            Self::Relu => v.relu(),
            Self::LeakyRelu => v.leaky_relu(0.2),
            Self::Sigmoid => v.sigmoid(),
            Self::Tanh => v.tanh(),
        }
    }
}

/// Fully connected stack used for generators, discriminators and decoders.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseStack {
    sizes: Vec<usize>,
    hidden: DenseActivation,
    output: DenseActivation,
    params: Vec<Tensor>,
}

impl DenseStack {
    pub fn new(sizes: &[usize], hidden: DenseActivation, output: DenseActivation, seed: u64) -> Self {
        assert!(sizes.len() >= 2, "a dense stack needs input and output sizes");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for w in sizes.windows(2) {
            let n = Normal::new(0.0f32, (2.0 / w[0] as f32).sqrt()).expect("valid std");
            params.push(Tensor::from_fn(&[w[0], w[1]], |_| n.sample(&mut rng)));
            params.push(Tensor::zeros(&[w[1]]));
        }
        Self {
            sizes: sizes.to_vec(),
            hidden,
            output,
            params,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn bind<'g>(&self, g: &'g Graph, requires_grad: bool) -> Vec<Var<'g>> {
        self.params.iter().map(|p| g.leaf(p.clone(), requires_grad)).collect()
    }

    /// `[N, in] → [N, out]`.
    pub fn forward_with<'g>(&self, x: Var<'g>, p: &[Var<'g>]) -> Var<'g> {
        let layers = self.sizes.len() - 1;
        let mut h = x;
        for l in 0..layers {
            h = h.matmul(p[2 * l]).add_channel(p[2 * l + 1]);
            h = if l + 1 < layers {
                self.hidden.apply(h)
            } else {
                self.output.apply(h)
            };
        }
        h
    }

    pub fn forward<'g>(&self, x: Var<'g>) -> Var<'g> {
        let p = self.bind(x.graph(), false);
        self.forward_with(x, &p)
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let g = Graph::new();
        let out = self.forward(g.constant(x.clone()));
        let v = out.value();
        (*v).clone()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::json!({
            "sizes": self.sizes,
            "hidden": self.hidden,
            "output": self.output,
        });
        let refs: Vec<&Tensor> = self.params.iter().collect();
        blob::encode(b"RBDENSE1", &header, &refs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, tensors) = blob::decode(b"RBDENSE1", bytes)?;
        let sizes: Vec<usize> = serde_json::from_value(h["sizes"].clone())?;
        let hidden = serde_json::from_value(h["hidden"].clone())?;
        let output = serde_json::from_value(h["output"].clone())?;
        if sizes.len() < 2 {
            return Err(Error::Invalid("dense stack without layers".into()));
        }
        let mut s = Self::new(&sizes, hidden, output, 0);
        if tensors.len() != s.params.len()
            || tensors.iter().zip(&s.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Invalid("dense stack tensor shapes do not match header".into()));
        }
        s.params = tensors;
        Ok(s)
    }
}
