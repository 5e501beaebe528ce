//! Checkpoint container shared by base networks and adapter sets.
//!
//! A checkpoint is a directory holding `manifest.json` and `weights.bin`.
//! The manifest lists every tensor with its shape and byte offset into
//! `weights.bin`, which is the concatenation of all tensors as row-major
//! little-endian `f32`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, AdapterMethod};
use crate::backbones::{Network, NetworkSpec};
use crate::error::{Error, Result};

pub const FORMAT: &str = "convadapt-checkpoint";
pub const VERSION: u32 = 1;
pub const DTYPE: &str = "f32le";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Base,
    Adapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `weights.bin`.
    pub offset: usize,
    pub dtype: String,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: CheckpointKind,
    pub network: NetworkSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<AdapterMethod>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detach_norm: Option<bool>,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    /// Adapter hyper-parameters recorded in an adapter manifest.
    pub fn adapter_config(&self) -> Result<AdapterConfig> {
        match (self.kind, self.method, self.rank, self.alpha) {
            (CheckpointKind::Adapter, Some(method), Some(rank), Some(alpha)) => {
                let cfg = AdapterConfig {
                    method,
                    rank,
                    alpha,
                    epsilon: self.epsilon.unwrap_or(AdapterConfig::DEFAULT_EPSILON),
                    detach_norm: self.detach_norm.unwrap_or(false),
                };
                cfg.validate()?;
                Ok(cfg)
            }
            (CheckpointKind::Adapter, ..) => Err(Error::Data(
                "adapter manifest lacks method, rank or alpha".into(),
            )),
            (CheckpointKind::Base, ..) => {
                Err(Error::Data("expected an adapter checkpoint, found a base checkpoint".into()))
            }
        }
    }
}

/// An in-memory checkpoint: manifest plus tensor payloads in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub values: Vec<Vec<f32>>,
}

impl Checkpoint {
    fn from_tensors(
        kind: CheckpointKind,
        network: NetworkSpec,
        adapter: Option<AdapterConfig>,
        tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
    ) -> Self {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(tensors.len());
        let mut values = Vec::with_capacity(tensors.len());
        for (name, shape, data) in tensors {
            let n = data.len();
            entries.push(TensorEntry {
                name,
                shape,
                offset,
                dtype: DTYPE.into(),
            });
            values.push(data.into_iter().map(|v| v as f32).collect());
            offset += 4 * n;
        }
        Self {
            manifest: Manifest {
                format: FORMAT.into(),
                version: VERSION,
                kind,
                network,
                method: adapter.map(|a| a.method),
                rank: adapter.map(|a| a.rank),
                alpha: adapter.map(|a| a.alpha),
                epsilon: adapter.map(|a| a.epsilon),
                detach_norm: adapter.map(|a| a.detach_norm),
                tensors: entries,
            },
            values,
        }
    }

    /// Base weights and biases of every convolution.
    pub fn base(net: &Network) -> Self {
        let tensors = net
            .named_tensors()
            .into_iter()
            .filter(|(n, _, _)| n.ends_with(".weight") || n.ends_with(".bias"))
            .collect();
        Self::from_tensors(CheckpointKind::Base, net.spec(), None, tensors)
    }

    /// Adapter tensors only. Fails when the network carries no adapters.
    pub fn adapter(net: &Network) -> Result<Self> {
        let cfg = net
            .layers()
            .find_map(|l| l.adapter.as_ref().map(|a| a.config))
            .ok_or_else(|| Error::Config("network has no adapters to save".into()))?;
        let tensors = net
            .named_tensors()
            .into_iter()
            .filter(|(n, _, _)| !(n.ends_with(".weight") || n.ends_with(".bias")))
            .collect();
        Ok(Self::from_tensors(
            CheckpointKind::Adapter,
            net.spec(),
            Some(cfg),
            tensors,
        ))
    }

    pub fn tensor(&self, name: &str) -> Option<(&TensorEntry, &[f32])> {
        self.manifest
            .tensors
            .iter()
            .zip(&self.values)
            .find(|(e, _)| e.name == name)
            .map(|(e, v)| (e, v.as_slice()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes = Vec::new();
        for v in &self.values {
            for x in v {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        write_atomic(&dir.join("weights.bin"), &bytes)?;
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::json(&path, e))?;
        write_atomic(&path, (json + "\n").as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported checkpoint format {} v{}",
                path.display(),
                manifest.format,
                manifest.version
            )));
        }
        let wpath = dir.join("weights.bin");
        let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
        let mut values = Vec::with_capacity(manifest.tensors.len());
        for t in &manifest.tensors {
            if t.dtype != DTYPE {
                return Err(Error::Data(format!(
                    "tensor {} has unsupported dtype {}",
                    t.name, t.dtype
                )));
            }
            let end = t.offset + 4 * t.len();
            let chunk = bytes.get(t.offset..end).ok_or_else(|| {
                Error::Data(format!(
                    "tensor {} spans bytes {}..{end} but {} holds {}",
                    t.name,
                    t.offset,
                    wpath.display(),
                    bytes.len()
                ))
            })?;
            values.push(
                chunk
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            );
        }
        Ok(Self { manifest, values })
    }
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn check_names(ckpt: &Checkpoint, expected: &[(String, Vec<usize>)]) -> Result<()> {
    let have: BTreeMap<&str, &[usize]> = ckpt
        .manifest
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t.shape.as_slice()))
        .collect();
    let want: BTreeSet<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
    if let Some(extra) = have.keys().find(|n| !want.contains(*n)) {
        return Err(Error::Data(format!(
            "checkpoint tensor `{extra}` does not exist in the model"
        )));
    }
    for (name, shape) in expected {
        match have.get(name.as_str()) {
            None => return Err(Error::Data(format!("checkpoint is missing tensor `{name}`"))),
            Some(s) if *s != shape.as_slice() => {
                return Err(Error::Data(format!(
                    "tensor `{name}` has shape {s:?}, model expects {shape:?}"
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Loads a value into every tensor of the network whose name matches.
fn assign(net: &mut Network, ckpt: &Checkpoint) {
    let lookup: BTreeMap<&str, &[f32]> = ckpt
        .manifest
        .tensors
        .iter()
        .zip(&ckpt.values)
        .map(|(e, v)| (e.name.as_str(), v.as_slice()))
        .collect();
    let copy = |dst: &mut [f64], src: &[f32]| {
        dst.iter_mut().zip(src).for_each(|(d, s)| *d = f64::from(*s));
    };
    for layer in net.layers_mut() {
        if let Some(src) = lookup.get(format!("{}.weight", layer.name).as_str()) {
            copy(layer.base.data.as_slice_mut().expect("contiguous"), src);
        }
        let bias_name = format!("{}.bias", layer.name);
        if let (Some(b), Some(src)) = (layer.base.bias.as_mut(), lookup.get(bias_name.as_str())) {
            copy(b.as_slice_mut().expect("contiguous"), src);
        }
        let prefix = layer.name.clone();
        if let Some(a) = layer.adapter.as_mut() {
            for (t, dst) in a.tensors_mut() {
                if let Some(src) = lookup.get(format!("{prefix}.{t}").as_str()) {
                    copy(dst, src);
                }
            }
        }
        layer.zero_grad();
    }
}

pub fn save_base(net: &Network, dir: &Path) -> Result<()> {
    Checkpoint::base(net).write(dir)
}

/// Rebuilds a network from a base checkpoint.
pub fn load_base(dir: &Path) -> Result<Network> {
    let ckpt = Checkpoint::read(dir)?;
    network_from_base(&ckpt)
}

pub fn network_from_base(ckpt: &Checkpoint) -> Result<Network> {
    if ckpt.manifest.kind != CheckpointKind::Base {
        return Err(Error::Data(
            "expected a base checkpoint, found an adapter checkpoint".into(),
        ));
    }
    let spec = &ckpt.manifest.network;
    let mut net = Network::build(spec, 0)?;
    let expected: Vec<_> = Checkpoint::base(&net)
        .manifest
        .tensors
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    check_names(ckpt, &expected)?;
    assign(&mut net, ckpt);
    let trainable = spec
        .blocks
        .iter()
        .filter(|b| b.trainable)
        .map(|b| b.name.clone())
        .collect();
    net.set_trainable(&trainable)?;
    Ok(net)
}

pub fn save_adapter(net: &Network, dir: &Path) -> Result<()> {
    Checkpoint::adapter(net)?.write(dir)
}

/// Attaches the adapters stored in `dir` to `net`, replacing any present.
pub fn load_adapter(net: &mut Network, dir: &Path) -> Result<AdapterConfig> {
    let ckpt = Checkpoint::read(dir)?;
    apply_adapter(net, &ckpt)
}

pub fn apply_adapter(net: &mut Network, ckpt: &Checkpoint) -> Result<AdapterConfig> {
    let cfg = ckpt.manifest.adapter_config()?;
    if !ckpt.manifest.network.same_architecture(&net.spec()) {
        return Err(Error::Data(format!(
            "adapter was trained for a {} network with base_channels={}, model is {} with base_channels={}",
            ckpt.manifest.network.arch,
            ckpt.manifest.network.base_channels,
            net.arch(),
            net.spec().base_channels
        )));
    }
    net.detach_adapters();
    net.attach_adapters(&cfg, 0)?;
    let expected: Vec<_> = Checkpoint::adapter(net)?
        .manifest
        .tensors
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    check_names(ckpt, &expected)?;
    assign(net, ckpt);
    Ok(cfg)
}
