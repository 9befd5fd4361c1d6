//! Model checkpoints.
//!
//! A checkpoint is a directory holding
//!
//! * `checkpoint.toml`: format version, model kind and config, training
//!   config, normaliser, progress and the parameter table (names, shapes);
//! * `params.bin`: every parameter in table order as little-endian `f64`;
//! * `optimizer.bin` (optional): magic `b"AMGOPT1\0"`, step count `u64`,
//!   `beta1, beta2, eps` as `f64`, then all first moments followed by all
//!   second moments in table order, little-endian `f64`.
//!
//! Loading rebuilds the model from its config and rejects any mismatch
//! between the stored table and the config-derived one.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::{MlpBaseline, MlpConfig};
use crate::error::{Error, Result};
use crate::model::{AmgModel, ModelConfig, NeuralOperator};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{Normalizer, TrainConfig, TrainState};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "checkpoint.toml";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
const OPT_MAGIC: &[u8; 8] = b"AMGOPT1\0";

/// Which operator a checkpoint (or run) holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Amg(ModelConfig),
    Mlp(MlpConfig),
}

impl ModelSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::Amg(_) => "amg",
            ModelSpec::Mlp(_) => "mlp",
        }
    }

    /// `(d_pos, d_a, d_u)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            ModelSpec::Amg(c) => (c.d_pos, c.d_a, c.d_u),
            ModelSpec::Mlp(c) => (c.d_pos, c.d_a, c.d_u),
        }
    }
}

/// Either operator behind one interface.
#[derive(Clone, Debug, PartialEq)]
pub enum Net<T> {
    Amg(AmgModel<T>),
    Mlp(MlpBaseline<T>),
}

impl<T: Scalar> Net<T> {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        Ok(match spec {
            ModelSpec::Amg(c) => Net::Amg(AmgModel::new(c.clone())?),
            ModelSpec::Mlp(c) => Net::Mlp(MlpBaseline::new(c.clone())?),
        })
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            Net::Amg(m) => ModelSpec::Amg(m.config.clone()),
            Net::Mlp(m) => ModelSpec::Mlp(m.config.clone()),
        }
    }
}

impl<T: Scalar> NeuralOperator<T> for Net<T> {
    fn params(&self) -> &ParamStore<T> {
        match self {
            Net::Amg(m) => &m.params,
            Net::Mlp(m) => &m.params,
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            Net::Amg(m) => &mut m.params,
            Net::Mlp(m) => &mut m.params,
        }
    }

    fn record(&self, tape: &mut Tape<T>, bound: &Bound, positions: &Tensor<T>, inputs: &Tensor<T>) -> Result<Var> {
        match self {
            Net::Amg(m) => m.record(tape, bound, positions, inputs),
            Net::Mlp(m) => m.record(tape, bound, positions, inputs),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub epochs_completed: usize,
    /// Element type the run trained in; buffers are always `f64`.
    pub precision: String,
    pub has_optimizer: bool,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub normalizer: Normalizer,
    pub params: Vec<ParamEntry>,
}

/// Everything restored from a checkpoint directory.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub net: Net<T>,
    pub normalizer: Normalizer,
    pub train: TrainConfig,
    pub state: TrainState<T>,
    pub manifest: CheckpointManifest,
}

fn table<T: Scalar>(p: &ParamStore<T>) -> Vec<ParamEntry> {
    p.names().iter().zip(p.tensors()).map(|(n, t)| ParamEntry { name: n.clone(), shape: t.shape().to_vec() }).collect()
}

fn push_f64s<T: Scalar>(out: &mut Vec<u8>, vals: impl IntoIterator<Item = T>) {
    for v in vals {
        out.extend_from_slice(&v.to_f64_lossless().to_le_bytes());
    }
}

/// Writes a checkpoint of `net` (and optionally its optimizer state).
pub fn save<T: Scalar>(
    dir: &Path,
    net: &Net<T>,
    normalizer: &Normalizer,
    train: &TrainConfig,
    state: Option<&TrainState<T>>,
    epochs_completed: usize,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = net.params();
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        epochs_completed,
        precision: T::NAME.into(),
        has_optimizer: state.is_some(),
        model: net.spec(),
        train: train.clone(),
        normalizer: normalizer.clone(),
        params: table(params),
    };
    let mut buf = Vec::with_capacity(8 * params.count());
    push_f64s(&mut buf, params.tensors().iter().flat_map(|t| t.data().iter().copied()));
    let path = dir.join(PARAMS_FILE);
    fs::write(&path, &buf).map_err(|e| Error::io(&path, e))?;
    if let Some(st) = state {
        let a = &st.adam;
        let mut buf = Vec::with_capacity(40 + 16 * params.count());
        buf.extend_from_slice(OPT_MAGIC);
        buf.extend_from_slice(&a.t.to_le_bytes());
        for x in [a.beta1, a.beta2, a.eps] {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        push_f64s(&mut buf, a.m.iter().flatten().copied());
        push_f64s(&mut buf, a.v.iter().flatten().copied());
        let path = dir.join(OPTIMIZER_FILE);
        fs::write(&path, &buf).map_err(|e| Error::io(&path, e))?;
    }
    let text = toml::to_string(&manifest).map_err(|e| Error::arg(format!("checkpoint manifest: {e}")))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read_f64s(bytes: &[u8]) -> impl Iterator<Item = f64> + '_ {
    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
}

/// Splits `vals` into vectors shaped like `params`.
fn split_like<T: Scalar>(params: &ParamStore<T>, vals: &mut impl Iterator<Item = f64>) -> Vec<Vec<T>> {
    params.tensors().iter().map(|t| vals.by_ref().take(t.numel()).map(T::from_f64_lossy).collect()).collect()
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = toml::from_str(&text).map_err(|e| Error::format(path.display(), e.to_string()))?;
    if m.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(path.display(), format!("format version {} (expected {CHECKPOINT_VERSION})", m.format_version)));
    }
    Ok(m)
}

/// Loads a checkpoint, validating the parameter table against the one the
/// stored config produces.
pub fn load<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let manifest = read_manifest(dir)?;
    let mpath = dir.join(MANIFEST_FILE).display().to_string();
    let mut net = Net::<T>::new(&manifest.model).map_err(|e| Error::format(&mpath, format!("model config: {e}")))?;
    let expected = table(net.params());
    if expected != manifest.params {
        let first = expected
            .iter()
            .zip(&manifest.params)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("{} {:?} expected, found {} {:?}", a.name, a.shape, b.name, b.shape))
            .unwrap_or_else(|| format!("{} parameters expected, found {}", expected.len(), manifest.params.len()));
        return Err(Error::format(&mpath, format!("parameter table does not match the config: {first}")));
    }
    let ppath = dir.join(PARAMS_FILE);
    let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let count = net.params().count();
    if bytes.len() != 8 * count {
        return Err(Error::format(ppath.display(), format!("{} bytes for {count} parameters", bytes.len())));
    }
    let tensors = split_like(net.params(), &mut read_f64s(&bytes))
        .into_iter()
        .zip(&expected)
        .map(|(data, e)| Tensor::new(e.shape.clone(), data))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::format(ppath.display(), e.to_string()))?;
    net.params_mut().assign(tensors)?;
    let mut state = TrainState::new(net.params());
    state.epochs_completed = manifest.epochs_completed;
    if manifest.has_optimizer {
        let opath = dir.join(OPTIMIZER_FILE);
        let bytes = fs::read(&opath).map_err(|e| Error::io(&opath, e))?;
        if bytes.len() != 40 + 16 * count || &bytes[..8] != OPT_MAGIC {
            return Err(Error::format(opath.display(), format!("{} bytes or bad magic for {count} parameters", bytes.len())));
        }
        let a = &mut state.adam;
        a.t = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let mut vals = read_f64s(&bytes[16..]);
        a.beta1 = vals.next().expect("header");
        a.beta2 = vals.next().expect("header");
        a.eps = vals.next().expect("header");
        a.m = split_like(net.params(), &mut vals);
        a.v = split_like(net.params(), &mut vals);
    }
    Ok(Checkpoint { net, normalizer: manifest.normalizer.clone(), train: manifest.train.clone(), state, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_amg() -> ModelSpec {
        ModelSpec::Amg(ModelConfig { d_h: 8, layers: 1, heads: 2, local_n: 16, physics_m: 2, seed: 3, ..ModelConfig::default() })
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for spec in [small_amg(), ModelSpec::Mlp(MlpConfig { hidden: 8, ..MlpConfig::default() })] {
            let net = Net::<f64>::new(&spec).unwrap();
            let mut st = TrainState::new(net.params());
            st.adam.t = 7;
            st.adam.m[0][0] = 0.125;
            st.adam.v[1][0] = 1e-300;
            st.epochs_completed = 7;
            let norm = Normalizer { input_mean: vec![0.1], input_std: vec![2.0], target_rms: vec![0.3] };
            let sub = dir.path().join(spec.kind());
            save(&sub, &net, &norm, &TrainConfig::default(), Some(&st), 7).unwrap();
            let ck = load::<f64>(&sub).unwrap();
            assert_eq!(ck.net, net);
            assert_eq!(ck.state, st);
            assert_eq!(ck.normalizer, norm);
            assert_eq!(ck.manifest.precision, "f64");
        }
    }

    #[test]
    fn f32_round_trip_through_f64_buffers() {
        let dir = tempfile::tempdir().unwrap();
        let net = Net::<f32>::new(&small_amg()).unwrap();
        save(dir.path(), &net, &Normalizer::identity(1, 1), &TrainConfig::default(), None, 0).unwrap();
        let ck = load::<f32>(dir.path()).unwrap();
        assert_eq!(ck.net, net);
        assert!(!dir.path().join(OPTIMIZER_FILE).exists());
    }

    #[test]
    fn mismatches_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let net = Net::<f64>::new(&small_amg()).unwrap();
        save(dir.path(), &net, &Normalizer::identity(1, 1), &TrainConfig::default(), None, 0).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replacen("d_h = 8", "d_h = 16", 1)).unwrap();
        assert!(matches!(load::<f64>(dir.path()), Err(Error::Format { .. })));
        fs::write(&path, text).unwrap();
        let ppath = dir.path().join(PARAMS_FILE);
        let mut bytes = fs::read(&ppath).unwrap();
        bytes.pop();
        fs::write(&ppath, bytes).unwrap();
        match load::<f64>(dir.path()) {
            Err(Error::Format { file, .. }) => assert!(file.ends_with(PARAMS_FILE)),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
