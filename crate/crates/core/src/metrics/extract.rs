use std::path::Path;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{Architecture, ModelSpec, Network};

/// Maps images to fixed-length feature vectors for D-Dis.
pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> String;

    /// Content hash identifying the exact extractor snapshot.
    fn fingerprint(&self) -> String;

    /// n×d feature matrix, one row per sample.
    fn extract(&self, ds: &LabeledDataset) -> Result<DMatrix<f64>>;
}

fn sha(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Raw pixels.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn id(&self) -> String {
        "identity".into()
    }

    fn fingerprint(&self) -> String {
        sha(&[b"identity"])
    }

    fn extract(&self, ds: &LabeledDataset) -> Result<DMatrix<f64>> {
        let d = ds.shape().len();
        Ok(DMatrix::from_fn(ds.len(), d, |i, j| ds.image(i)[j] as f64))
    }
}

/// Per-channel average pooling onto a `grid × grid` lattice.
#[derive(Clone, Copy, Debug)]
pub struct PoolExtractor {
    pub grid: usize,
}

impl FeatureExtractor for PoolExtractor {
    fn id(&self) -> String {
        format!("pool{}", self.grid)
    }

    fn fingerprint(&self) -> String {
        sha(&[b"pool", &(self.grid as u64).to_le_bytes()])
    }

    fn extract(&self, ds: &LabeledDataset) -> Result<DMatrix<f64>> {
        let s = ds.shape();
        let g = self.grid;
        if g == 0 || g > s.height || g > s.width {
            return Err(Error::Invalid(format!("pool grid {g} does not fit {s:?}")));
        }
        let d = g * g * s.channels;
        let mut m = DMatrix::zeros(ds.len(), d);
        for i in 0..ds.len() {
            let img = ds.image(i);
            for by in 0..g {
                let (y0, y1) = (by * s.height / g, (by + 1) * s.height / g);
                for bx in 0..g {
                    let (x0, x1) = (bx * s.width / g, (bx + 1) * s.width / g);
                    for c in 0..s.channels {
                        let mut acc = 0.0f64;
                        for y in y0..y1 {
                            for x in x0..x1 {
                                acc += img[(y * s.width + x) * s.channels + c] as f64;
                            }
                        }
                        m[(i, (by * g + bx) * s.channels + c)] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                    }
                }
            }
        }
        Ok(m)
    }
}

/// Penultimate-layer features of a classifier.
#[derive(Clone, Debug)]
pub struct NetworkExtractor {
    net: Network,
    tag: String,
    hash: String,
}

impl NetworkExtractor {
    pub fn new(net: Network, tag: &str) -> Self {
        let hash = sha(&[&net.to_bytes()]);
        Self {
            net,
            tag: tag.to_string(),
            hash,
        }
    }

    /// Untrained VGG-style network with a fixed seed: a cheap generic
    /// convolutional feature map.
    pub fn random_cnn(input: crate::data::ImageShape, seed: u64) -> Result<Self> {
        let net = Network::new(
            ModelSpec {
                architecture: Architecture::Cnn {
                    channels: vec![16, 32, 64, 64],
                    feature_width: 64,
                    batch_norm: false,
                },
                input,
                classes: 2,
            },
            seed,
        )?;
        Ok(Self::new(net, &format!("randcnn{seed}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        let net = Network::from_bytes(&bytes)?;
        Ok(Self::new(net, &format!("net:{}", path.display())))
    }

    pub fn network(&self) -> &Network {
        &self.net
    }
}

impl FeatureExtractor for NetworkExtractor {
    fn id(&self) -> String {
        self.tag.clone()
    }

    fn fingerprint(&self) -> String {
        self.hash.clone()
    }

    fn extract(&self, ds: &LabeledDataset) -> Result<DMatrix<f64>> {
        if ds.shape() != self.net.spec().input {
            return Err(Error::DimensionMismatch(format!(
                "extractor expects {:?}, got {:?}",
                self.net.spec().input,
                ds.shape()
            )));
        }
        let f = self.net.features(&ds.all_nchw());
        Ok(DMatrix::from_fn(f.rows(), f.cols(), |i, j| f.row(i)[j] as f64))
    }
}

/// Resolves `identity`, `pool<N>`, `randcnn[<seed>]` or `net:<weights path>`.
pub fn extractor_by_id(id: &str, input: crate::data::ImageShape) -> Result<Box<dyn FeatureExtractor>> {
    if id == "identity" {
        return Ok(Box::new(IdentityExtractor));
    }
    if let Some(g) = id.strip_prefix("pool") {
        let grid = g.parse().map_err(|_| Error::Invalid(format!("bad pool grid in `{id}`")))?;
        return Ok(Box::new(PoolExtractor { grid }));
    }
    if let Some(s) = id.strip_prefix("randcnn") {
        let seed = if s.is_empty() {
            0
        } else {
            s.parse().map_err(|_| Error::Invalid(format!("bad seed in `{id}`")))?
        };
        return Ok(Box::new(NetworkExtractor::random_cnn(input, seed)?));
    }
    if let Some(p) = id.strip_prefix("net:") {
        return Ok(Box::new(NetworkExtractor::load(Path::new(p))?));
    }
    Err(Error::Invalid(format!("unknown feature extractor `{id}`")))
}
