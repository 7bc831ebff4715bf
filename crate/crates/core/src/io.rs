//! On-disk formats: checkpoints, IFR arrays and prefilter results.
//!
//! Checkpoints are JSON documents holding a config and named tensors.
//! Floats are written with round-trip precision, so loading restores the
//! exact bits. IFR values are a little-endian `f64` array behind a short
//! header, with a JSON sidecar describing rows and solver state.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::write_file;
use crate::error::{Error, Result};
use crate::influence::{InfluenceMatrix, Method, PrefilterResult};
use crate::model::{Downstream, ModelConfig, SplitModel, Upstream};
use crate::sae::SaeParams;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "latinf-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const IFR_MAGIC: &[u8; 4] = b"LIFR";
pub const POSITIONS_MAGIC: &[u8; 4] = b"LIFP";
pub const IFR_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Model,
    Sae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: CheckpointKind,
    /// Model config for models; `{ "k": .., "insert_layer": .. }` for SAEs.
    pub config: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    fn new(kind: CheckpointKind, config: serde_json::Value, named: Vec<(String, Tensor)>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind,
            config,
            tensors: named
                .into_iter()
                .map(|(name, t)| NamedTensor { name, shape: t.shape().to_vec(), data: t.into_data() })
                .collect(),
        }
    }

    fn check(&self, kind: CheckpointKind, path: &Path) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("{}: not a checkpoint (format {:?})", path.display(), self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("{}: unsupported checkpoint version {}", path.display(), self.version)));
        }
        if self.kind != kind {
            return Err(Error::Format(format!("{}: expected a {kind:?} checkpoint, found {:?}", path.display(), self.kind)));
        }
        Ok(())
    }

    /// Tensors in file order, checked against expected names and shapes.
    fn take(self, expected: &[(String, Vec<usize>)], path: &Path) -> Result<Vec<Tensor>> {
        if self.tensors.len() != expected.len() {
            return Err(Error::Format(format!(
                "{}: {} tensors, expected {}",
                path.display(),
                self.tensors.len(),
                expected.len()
            )));
        }
        self.tensors
            .into_iter()
            .zip(expected)
            .map(|(t, (name, shape))| {
                if &t.name != name || &t.shape != shape {
                    return Err(Error::Format(format!(
                        "{}: tensor {} {:?} where {name} {shape:?} was expected",
                        path.display(),
                        t.name,
                        t.shape
                    )));
                }
                Tensor::new(t.shape, t.data)
            })
            .collect()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn model_names(model: &SplitModel) -> Vec<String> {
    let mut names: Vec<String> = model.theta1.names().into_iter().map(|n| format!("theta1.{n}")).collect();
    names.extend(model.theta2.names(model.config.split_layer).into_iter().map(|n| format!("theta2.{n}")));
    names
}

pub fn save_model(path: &Path, model: &SplitModel) -> Result<()> {
    let mut tensors = model.theta1.to_vec();
    tensors.extend(model.theta2.to_vec());
    let named = model_names(model).into_iter().zip(tensors).collect();
    write_json(path, &Checkpoint::new(CheckpointKind::Model, serde_json::to_value(&model.config)?, named))
}

pub fn load_model(path: &Path) -> Result<SplitModel> {
    let ck: Checkpoint = read_json(path)?;
    ck.check(CheckpointKind::Model, path)?;
    let config: ModelConfig =
        serde_json::from_value(ck.config.clone()).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let template = SplitModel::init(config.clone(), 0)?;
    let mut shapes: Vec<Vec<usize>> = template.theta1.to_vec().iter().map(|t| t.shape().to_vec()).collect();
    shapes.extend(template.theta2.to_vec().iter().map(|t| t.shape().to_vec()));
    let expected: Vec<(String, Vec<usize>)> = model_names(&template).into_iter().zip(shapes).collect();
    let mut tensors = ck.take(&expected, path)?;
    let n1 = template.theta1.to_vec().len();
    let theta2 = tensors.split_off(n1);
    Ok(SplitModel {
        theta1: Upstream::from_vec(tensors, config.split_layer),
        theta2: Downstream::from_vec(theta2, config.num_blocks - config.split_layer),
        config,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct SaeHeader {
    k: usize,
    input_dim: usize,
    latents: usize,
    insert_layer: usize,
}

/// Saves an SAE together with the split layer it was trained at.
pub fn save_sae(path: &Path, sae: &SaeParams, insert_layer: usize) -> Result<()> {
    sae.validate()?;
    let header = SaeHeader { k: sae.k, input_dim: sae.input_dim(), latents: sae.latents(), insert_layer };
    write_json(path, &Checkpoint::new(CheckpointKind::Sae, serde_json::to_value(header)?, sae.named_tensors()))
}

/// Loads an SAE and its insert layer.
pub fn load_sae(path: &Path) -> Result<(SaeParams, usize)> {
    let ck: Checkpoint = read_json(path)?;
    ck.check(CheckpointKind::Sae, path)?;
    let h: SaeHeader =
        serde_json::from_value(ck.config.clone()).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (d, n) = (h.input_dim, h.latents);
    let expected = [("w_enc", vec![n, d]), ("b_enc", vec![1, n]), ("w_dec", vec![d, n]), ("b_pre", vec![1, d])]
        .map(|(a, s)| (a.to_string(), s));
    let sae = SaeParams::from_vec(ck.take(&expected, path)?, h.k);
    sae.validate()?;
    Ok((sae, h.insert_layer))
}

// ── IFR ─────────────────────────────────────────────────────────────────

/// Solver and method settings recorded next to an IFR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IfrSidecar {
    pub version: u32,
    pub test_id: usize,
    pub row_ids: Vec<usize>,
    pub features: usize,
    pub method: Method,
    pub damping: f64,
    pub cg_iters: usize,
    pub iterations_used: usize,
    pub escalations: usize,
    pub residual_norm: f64,
    pub tolerance: f64,
    pub path_steps: usize,
    pub values_file: String,
    pub positions_file: String,
}

/// Paths of the three files making up one persisted IFR.
#[derive(Clone, Debug, PartialEq)]
pub struct IfrPaths {
    pub values: PathBuf,
    pub positions: PathBuf,
    pub sidecar: PathBuf,
}

impl IfrPaths {
    /// `<dir>/<stem>.bin`, `<dir>/<stem>.positions.bin`, `<dir>/<stem>.json`.
    pub fn new(dir: &Path, stem: &str) -> Self {
        IfrPaths {
            values: dir.join(format!("{stem}.bin")),
            positions: dir.join(format!("{stem}.positions.bin")),
            sidecar: dir.join(format!("{stem}.json")),
        }
    }
}

fn header(magic: &[u8; 4], dims: &[u64]) -> Vec<u8> {
    let mut out = magic.to_vec();
    out.extend(IFR_VERSION.to_le_bytes());
    for d in dims {
        out.extend(d.to_le_bytes());
    }
    out
}

fn push_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend(x.to_le_bytes());
    }
}

/// Encodes the `N x H` values as `LIFR`, version, N, H, then row-major data.
pub fn encode_ifr_values(values: &Tensor) -> Vec<u8> {
    let (n, h) = values.dims2();
    let mut out = header(IFR_MAGIC, &[n as u64, h as u64]);
    push_f64s(&mut out, values.data());
    out
}

/// Encodes position-resolved rows as `LIFP`, version, row count, then per
/// row `T`, `H` and the data.
pub fn encode_ifr_positions(positions: &[Tensor]) -> Vec<u8> {
    let mut out = header(POSITIONS_MAGIC, &[positions.len() as u64]);
    for p in positions {
        let (t, h) = p.dims2();
        out.extend((t as u64).to_le_bytes());
        out.extend((h as u64).to_le_bytes());
        push_f64s(&mut out, p.data());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path, magic: &[u8; 4]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0, path };
        if r.take(4)? != magic {
            return Err(r.err("bad magic"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != IFR_VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        Ok(r)
    }

    fn err(&self, msg: &str) -> Error {
        Error::Format(format!("{}: {msg}", self.path.display()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| self.err("truncated"))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| self.err("dimension overflow"))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let n = rows.checked_mul(cols).ok_or_else(|| self.err("dimension overflow"))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.err("dimension overflow"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Tensor::matrix(rows, cols, data))
    }

    fn finish(&self) -> Result<()> {
        if self.at == self.bytes.len() { Ok(()) } else { Err(self.err("trailing bytes")) }
    }
}

pub fn decode_ifr_values(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = Reader::new(bytes, path, IFR_MAGIC)?;
    let (n, h) = (r.u64()?, r.u64()?);
    let m = r.matrix(n, h)?;
    r.finish()?;
    Ok(m)
}

pub fn decode_ifr_positions(bytes: &[u8], path: &Path) -> Result<Vec<Tensor>> {
    let mut r = Reader::new(bytes, path, POSITIONS_MAGIC)?;
    let count = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let (t, h) = (r.u64()?, r.u64()?);
        out.push(r.matrix(t, h)?);
    }
    r.finish()?;
    Ok(out)
}

pub fn write_ifr(paths: &IfrPaths, ifr: &InfluenceMatrix, sidecar: &IfrSidecar) -> Result<()> {
    if sidecar.row_ids != ifr.row_ids || sidecar.features != ifr.features() || sidecar.method != ifr.method {
        return Err(Error::Invalid("IFR sidecar does not describe the matrix".into()));
    }
    write_file(&paths.values, &encode_ifr_values(&ifr.values))?;
    write_file(&paths.positions, &encode_ifr_positions(&ifr.positions))?;
    write_json(&paths.sidecar, sidecar)
}

pub fn read_ifr(paths: &IfrPaths) -> Result<(InfluenceMatrix, IfrSidecar)> {
    let sidecar: IfrSidecar = read_json(&paths.sidecar)?;
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    let values = decode_ifr_values(&read(&paths.values)?, &paths.values)?;
    let positions = decode_ifr_positions(&read(&paths.positions)?, &paths.positions)?;
    if values.rows() != sidecar.row_ids.len() || values.cols() != sidecar.features || positions.len() != values.rows() {
        return Err(Error::Format(format!("{}: sidecar disagrees with IFR arrays", paths.sidecar.display())));
    }
    let ifr = InfluenceMatrix { row_ids: sidecar.row_ids.clone(), values, positions, method: sidecar.method };
    Ok((ifr, sidecar))
}

pub fn write_prefilter(path: &Path, result: &PrefilterResult) -> Result<()> {
    write_json(path, result)
}

pub fn read_prefilter(path: &Path) -> Result<PrefilterResult> {
    read_json(path)
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}

pub fn read_json_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    read_json(path)
}
