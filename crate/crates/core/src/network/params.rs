//! Named parameter registry and safetensors checkpoints.
//!
//! Names are dot-separated module paths, e.g.
//! `encoder.stage3.layer5.conv.weight` or `main.agg.node2.bn.running_mean`.
//! Trainable tensors and normalization buffers share the namespace; only
//! trainable ones are counted as parameters or touched by the optimizer.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// He-normal with the given fan-in.
    KaimingNormal { fan_in: usize },
    Const(f64),
}

#[derive(Clone)]
pub struct Param {
    pub var: Var,
    pub kind: ParamKind,
}

pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: Mutex<ChaCha8Rng>,
    entries: Mutex<BTreeMap<String, Param>>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            entries: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    fn create(&self, name: String, shape: &[usize], init: Init, kind: ParamKind) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let mut rng = self.rng.lock().expect("rng lock");
                (0..n).map(|_| normal.sample(&mut *rng)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let mut entries = self.entries.lock().expect("param lock");
        if entries.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate parameter name `{name}`")));
        }
        entries.insert(
            name,
            Param {
                var: var.clone(),
                kind,
            },
        );
        Ok(var)
    }

    /// Snapshot of all entries in name order.
    pub fn entries(&self) -> Vec<(String, Param)> {
        self.entries
            .lock()
            .expect("param lock")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.entries()
            .into_iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(n, p)| (n, p.var))
            .collect()
    }

    /// Number of learnable scalars, optionally skipping names under `exclude_prefix`.
    pub fn count_trainable(&self, exclude_prefix: Option<&str>) -> usize {
        self.trainable()
            .iter()
            .filter(|(n, _)| exclude_prefix.map_or(true, |p| !n.starts_with(p)))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Writes every entry to a safetensors file with the given metadata.
    pub fn save(&self, path: &Path, metadata: &HashMap<String, String>) -> Result<()> {
        let entries = self.entries();
        let mut blobs: Vec<(String, safetensors::Dtype, Vec<usize>, Vec<u8>)> = Vec::new();
        for (name, p) in &entries {
            let t = p.var.as_tensor();
            let shape = t.dims().to_vec();
            let (dtype, bytes) = tensor_bytes(t)?;
            blobs.push((name.clone(), dtype, shape, bytes));
        }
        let views: Vec<(String, safetensors::tensor::TensorView<'_>)> = blobs
            .iter()
            .map(|(n, d, s, b)| {
                safetensors::tensor::TensorView::new(*d, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(format!("{n}: {e}")))
            })
            .collect::<Result<_>>()?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        safetensors::serialize_to_file(views, Some(metadata.clone()), path)
            .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))?;
        Ok(())
    }

    /// Loads a checkpoint into the existing entries.
    ///
    /// Every entry whose name starts with `prefix` must be present in the file
    /// with the same shape, and the file must not carry extra names under that
    /// prefix. The first offending name (in sorted order) is reported.
    pub fn load(&self, path: &Path, prefix: &str) -> Result<HashMap<String, String>> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let metadata = meta.metadata().clone().unwrap_or_default();
        let st = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let ours: BTreeMap<String, Param> = self
            .entries()
            .into_iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .collect();
        let mut theirs: Vec<String> = st
            .names()
            .into_iter()
            .filter(|n| n.starts_with(prefix))
            .map(|n| n.to_string())
            .collect();
        theirs.sort();
        let mut all: Vec<&String> = ours.keys().chain(theirs.iter()).collect();
        all.sort();
        all.dedup();
        for name in all {
            let Some(param) = ours.get(name) else {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` is in the checkpoint but not in the model"
                )));
            };
            let view = st.tensor(name).map_err(|_| {
                Error::Checkpoint(format!("parameter `{name}` is missing from the checkpoint"))
            })?;
            if view.shape() != param.var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?} in the checkpoint but {:?} in the model",
                    view.shape(),
                    param.var.dims()
                )));
            }
            let t = tensor_from_view(&view, &self.device)?.to_dtype(self.dtype)?;
            param.var.set(&t)?;
        }
        Ok(metadata)
    }
}

fn tensor_bytes(t: &Tensor) -> Result<(safetensors::Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => (
            safetensors::Dtype::F32,
            flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        DType::F64 => (
            safetensors::Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn tensor_from_view(view: &safetensors::tensor::TensorView<'_>, device: &Device) -> Result<Tensor> {
    let data = view.data();
    let shape = view.shape().to_vec();
    let t = match view.dtype() {
        safetensors::Dtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(v, shape, device)?
        }
        safetensors::Dtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(v, shape, device)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    };
    Ok(t)
}

/// Reads the metadata block of a checkpoint without loading tensors.
pub fn read_checkpoint_metadata(path: &Path) -> Result<HashMap<String, String>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(meta.metadata().clone().unwrap_or_default())
}

/// Sum of element counts of every array in a checkpoint whose name passes `keep`.
pub fn checkpoint_element_count(path: &Path, keep: impl Fn(&str) -> bool) -> Result<usize> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = safetensors::SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(st
        .tensors()
        .iter()
        .filter(|(n, _)| keep(n))
        .map(|(_, v)| v.shape().iter().product::<usize>())
        .sum())
}

/// A name prefix inside a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn sub(&self, name: impl AsRef<str>) -> Scope<'a> {
        Scope {
            store: self.store,
            prefix: self.join(name.as_ref()),
        }
    }

    fn join(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn weight(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.store.create(self.join(name), shape, init, ParamKind::Trainable)
    }

    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.store.create(self.join(name), shape, init, ParamKind::Buffer)
    }
}
