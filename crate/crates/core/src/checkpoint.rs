//! Versioned checkpoint container.
//!
//! Layout: the 8-byte tag `DENKFCKP`, a little-endian `u32` format version,
//! a `u64` header length, a JSON header describing every network and the
//! pipeline layout, then all floating-point values as little-endian `f64`.
//! Keeping floats out of the JSON makes the round trip bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingConfig;
use crate::error::{Error, Result};
use crate::models::{
    ChannelStats, Denkf, ModelSet, NoiseModel, Normalizer, ObservationModel, SensorModel,
    TransitionModel, Variant,
};
use crate::nn::{Adam, LayerSpec, Network};

pub const MAGIC: &[u8; 8] = b"DENKFCKP";
pub const FORMAT_VERSION: u32 = 1;
/// Version of the input layout the networks expect (column order of state,
/// action, raw channels and embeddings).
pub const LAYOUT_VERSION: u32 = 1;

const ROLES: [&str; 4] = ["transition", "observation", "sensor", "noise"];

/// A trained pipeline plus the bookkeeping needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub pipeline: Denkf,
    pub seed: u64,
    pub epoch: usize,
    /// One optimizer per network, in transition, observation, sensor, noise
    /// order.
    pub optimizer: Option<Vec<Adam>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NetHeader {
    role: String,
    layers: Vec<LayerSpec>,
    param_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    layout_version: u32,
    variant: Variant,
    d_model: usize,
    seed: u64,
    epoch: usize,
    networks: Vec<NetHeader>,
    optimizer_steps: Option<Vec<u64>>,
}

fn push_stats(out: &mut Vec<f64>, s: &ChannelStats) {
    out.extend(&s.mean);
    out.extend(&s.std);
}

struct Floats<'a> {
    data: &'a [f64],
    pos: usize,
}

impl Floats<'_> {
    fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.pos + n > self.data.len() {
            return Err(Error::Incompatible("checkpoint payload is truncated".into()));
        }
        let v = self.data[self.pos..self.pos + n].to_vec();
        self.pos += n;
        Ok(v)
    }

    fn stats(&mut self, dim: usize) -> Result<ChannelStats> {
        Ok(ChannelStats {
            mean: self.take(dim)?,
            std: self.take(dim)?,
        })
    }
}

impl Checkpoint {
    pub fn new(pipeline: Denkf, seed: u64) -> Self {
        Self {
            pipeline,
            seed,
            epoch: 0,
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let models = &self.pipeline.models;
        let nets = models.networks();
        let header = Header {
            layout_version: LAYOUT_VERSION,
            variant: models.variant,
            d_model: models.embedding.d_model,
            seed: self.seed,
            epoch: self.epoch,
            networks: nets
                .iter()
                .zip(ROLES)
                .map(|(n, role)| NetHeader {
                    role: role.into(),
                    layers: n.specs().to_vec(),
                    param_count: n.param_count(),
                })
                .collect(),
            optimizer_steps: self
                .optimizer
                .as_ref()
                .map(|o| o.iter().map(Adam::step_count).collect()),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::Invariant(format!("header serialization: {e}")))?;

        let mut floats = vec![models.embedding.base];
        let norm = &self.pipeline.normalizer;
        push_stats(&mut floats, &norm.state);
        push_stats(&mut floats, &norm.action);
        push_stats(&mut floats, &norm.raw);
        for n in nets {
            floats.push(n.dropout_rate());
            floats.extend(n.params());
        }
        if let Some(opt) = &self.optimizer {
            if opt.len() != 4 {
                return Err(Error::Invariant("expected one optimizer per network".into()));
            }
            for a in opt {
                let (m, v) = a.moments();
                floats.extend(m);
                floats.extend(v);
            }
        }

        let mut out = Vec::with_capacity(20 + json.len() + 8 * floats.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for f in floats {
            out.extend_from_slice(&f.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Incompatible(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(bad("checkpoint header is truncated"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| Error::Incompatible(format!("checkpoint header: {e}")))?;
        if header.layout_version != LAYOUT_VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint input layout version {}, this build expects {LAYOUT_VERSION}",
                header.layout_version
            )));
        }
        if header.networks.len() != 4
            || header.networks.iter().zip(ROLES).any(|(n, r)| n.role != r)
        {
            return Err(bad("checkpoint must hold transition, observation, sensor and noise networks"));
        }
        let payload = &body[hlen..];
        if payload.len() % 8 != 0 {
            return Err(bad("checkpoint payload is truncated"));
        }
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut fl = Floats { data: &data, pos: 0 };

        let base = fl.take(1)?[0];
        let embedding = EmbeddingConfig::new(header.d_model, base)?;
        let normalizer = Normalizer {
            state: fl.stats(crate::STATE_DIM)?,
            action: fl.stats(crate::ACTION_DIM)?,
            raw: fl.stats(crate::RAW_OBS_DIM)?,
        };
        let mut nets = Vec::with_capacity(4);
        for nh in &header.networks {
            let rate = fl.take(1)?[0];
            let mut net = Network::zeros(nh.layers.clone(), rate)?;
            if net.param_count() != nh.param_count {
                return Err(bad("parameter count does not match layer specs"));
            }
            net.set_params(&fl.take(nh.param_count)?)?;
            nets.push(net);
        }
        let optimizer = match &header.optimizer_steps {
            Some(steps) => {
                if steps.len() != 4 {
                    return Err(bad("expected one optimizer state per network"));
                }
                let mut opt = Vec::with_capacity(4);
                for (nh, step) in header.networks.iter().zip(steps) {
                    let m = fl.take(nh.param_count)?;
                    let v = fl.take(nh.param_count)?;
                    opt.push(Adam::restore(*step, m, v)?);
                }
                Some(opt)
            }
            None => None,
        };
        if fl.pos != data.len() {
            return Err(bad("checkpoint has trailing data"));
        }

        let variant = header.variant;
        let mut it = nets.into_iter();
        let mut next = || it.next().expect("four networks");
        let models = ModelSet {
            variant,
            embedding,
            transition: TransitionModel::from_network(
                next(),
                variant.temporal().then_some(embedding),
            )?,
            observation: ObservationModel::from_network(next())?,
            sensor: SensorModel::from_network(next(), variant.positional().then_some(embedding))?,
            noise: NoiseModel::from_network(next())?,
        };
        Ok(Self {
            pipeline: Denkf::new(models, normalizer),
            seed: header.seed,
            epoch: header.epoch,
            optimizer,
        })
    }

    /// Writes through a temporary file and renames, so a crash never leaves
    /// a half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Untrained pipeline with identity normalization, for tests and baselines.
pub fn fresh(variant: Variant, seed: u64) -> Result<Checkpoint> {
    let models = ModelSet::new(
        variant,
        EmbeddingConfig::default(),
        crate::models::DEFAULT_DROPOUT,
        seed,
    )?;
    Ok(Checkpoint::new(Denkf::new(models, Normalizer::identity()), seed))
}
