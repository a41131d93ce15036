//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"VSCCCKPT" | u32 format version | u64 header length | JSON header | f32 blob
//! ```
//!
//! The header holds the architecture, training metadata, optional resume
//! state and a table of named arrays with their offsets into the blob.
//! Arrays are grouped as `param` (network weights), `adam_m` and `adam_v`.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::layers::Param;
use super::optim::Adam;
use super::{ArchitectureConfig, Network};
use crate::coding::Method;
use crate::error::{Error, Result};
use crate::fingerprint::sha256_hex;
use crate::serde_ext;
use crate::tensor::Scalar;
use crate::trainer::TrainState;

pub const MAGIC: &[u8; 8] = b"VSCCCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub method: Method,
    #[serde(with = "serde_ext::float")]
    pub snr_db: f64,
    pub cmc: f64,
    pub reconstruction_weight: f64,
    pub normalize_power: bool,
    pub epoch: usize,
    pub seed: u64,
    pub dataset_fingerprint: String,
    pub config_fingerprint: String,
    pub code_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<NamedArray>,
    pub second: Vec<NamedArray>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub architecture: ArchitectureConfig,
    pub metadata: TrainingMetadata,
    pub parameters: Vec<NamedArray>,
    pub optimizer: Option<OptimizerState>,
    pub train_state: Option<TrainState>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    architecture: ArchitectureConfig,
    metadata: TrainingMetadata,
    optimizer_step: Option<u64>,
    train_state: Option<TrainState>,
    arrays: Vec<ArrayEntry>,
}

fn collect<T: Scalar>(net: &Network<T>) -> Vec<NamedArray> {
    let mut out = Vec::new();
    net.visit(&mut |name, p| {
        out.push(NamedArray {
            name: name.to_string(),
            shape: p.shape().to_vec(),
            data: p.value.iter().map(|v| v.f64() as f32).collect(),
        })
    });
    out
}

impl Checkpoint {
    pub fn new<T: Scalar>(network: &Network<T>, metadata: TrainingMetadata) -> Self {
        Checkpoint {
            architecture: network.config().clone(),
            metadata,
            parameters: collect(network),
            optimizer: None,
            train_state: None,
        }
    }

    pub fn with_optimizer<T: Scalar>(mut self, network: &Network<T>, adam: &Adam<T>) -> Self {
        let (step, first, second) = adam.state();
        if first.is_empty() {
            return self;
        }
        let mut names = Vec::new();
        network.visit(&mut |n, p| names.push((n.to_string(), p.shape().to_vec())));
        let pack = |bufs: &[Vec<T>]| {
            names
                .iter()
                .zip(bufs)
                .map(|((n, s), b)| NamedArray {
                    name: n.clone(),
                    shape: s.clone(),
                    data: b.iter().map(|v| v.f64() as f32).collect(),
                })
                .collect()
        };
        self.optimizer = Some(OptimizerState {
            step,
            first: pack(first),
            second: pack(second),
        });
        self
    }

    pub fn with_train_state(mut self, state: TrainState) -> Self {
        self.train_state = Some(state);
        self
    }

    /// Builds a fresh network from the stored architecture and loads the weights.
    pub fn build_network<T: Scalar>(&self) -> Result<Network<T>> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = Network::new(&self.architecture, &mut rng)?;
        self.load_into(&mut net)?;
        Ok(net)
    }

    /// Copies the stored weights into `net`, which must have the same layout.
    pub fn load_into<T: Scalar>(&self, net: &mut Network<T>) -> Result<()> {
        let mut expected = Vec::new();
        net.visit(&mut |n, p| expected.push((n.to_string(), p.shape().to_vec())));
        check_layout(&expected, &self.parameters)?;
        let mut it = self.parameters.iter();
        net.visit_mut(&mut |_, p: &mut Param<T>| {
            let a = it.next().expect("layout checked");
            for (w, &v) in p.value.iter_mut().zip(&a.data) {
                *w = T::of(v as f64);
            }
        });
        Ok(())
    }

    /// Restores Adam moments saved with [`Self::with_optimizer`].
    pub fn restore_optimizer<T: Scalar>(&self, net: &Network<T>, adam: &mut Adam<T>) -> Result<()> {
        let Some(state) = &self.optimizer else {
            return Ok(());
        };
        let mut expected = Vec::new();
        net.visit(&mut |n, p| expected.push((n.to_string(), p.shape().to_vec())));
        check_layout(&expected, &state.first)?;
        check_layout(&expected, &state.second)?;
        let unpack = |arrays: &[NamedArray]| {
            arrays
                .iter()
                .map(|a| a.data.iter().map(|&v| T::of(v as f64)).collect())
                .collect()
        };
        adam.restore(state.step, unpack(&state.first), unpack(&state.second))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::new();
        let mut blob: Vec<f32> = Vec::new();
        let mut add = |group: &str, list: &[NamedArray]| {
            for a in list {
                arrays.push(ArrayEntry {
                    group: group.to_string(),
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    offset: blob.len(),
                    len: a.data.len(),
                });
                blob.extend_from_slice(&a.data);
            }
        };
        add("param", &self.parameters);
        if let Some(opt) = &self.optimizer {
            add("adam_m", &opt.first);
            add("adam_v", &opt.second);
        }
        let header = Header {
            architecture: self.architecture.clone(),
            metadata: self.metadata.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            train_state: self.train_state.clone(),
            arrays,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 4 * blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |m: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message: m,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(err(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(err(format!(
                "header length {hlen} exceeds file size {}",
                bytes.len()
            )));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| err(format!("corrupt header: {e}")))?;
        let blob = &body[hlen..];
        if blob.len() % 4 != 0 {
            return Err(err("parameter blob is not a whole number of f32 values".into()));
        }
        let floats: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let expected: usize = header.arrays.iter().map(|a| a.len).sum();
        if expected != floats.len() {
            return Err(err(format!(
                "blob holds {} values but the header describes {expected}",
                floats.len()
            )));
        }
        let (mut params, mut first, mut second) = (Vec::new(), Vec::new(), Vec::new());
        for a in header.arrays {
            if a.shape.iter().product::<usize>() != a.len || a.offset + a.len > floats.len() {
                return Err(err(format!("array {} has an inconsistent extent", a.name)));
            }
            let arr = NamedArray {
                name: a.name,
                shape: a.shape,
                data: floats[a.offset..a.offset + a.len].to_vec(),
            };
            match a.group.as_str() {
                "param" => params.push(arr),
                "adam_m" => first.push(arr),
                "adam_v" => second.push(arr),
                g => return Err(err(format!("unknown array group {g:?}"))),
            }
        }
        let optimizer = header.optimizer_step.map(|step| OptimizerState {
            step,
            first,
            second,
        });
        Ok(Checkpoint {
            architecture: header.architecture,
            metadata: header.metadata,
            parameters: params,
            optimizer,
            train_state: header.train_state,
        })
    }

    /// SHA-256 of the serialized form.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    /// SHA-256 over the parameter values only.
    pub fn parameter_fingerprint(&self) -> String {
        let mut h = crate::fingerprint::Fingerprinter::new();
        for a in &self.parameters {
            h.update(a.name.as_bytes());
            let bytes: Vec<u8> = a.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            h.update(&bytes);
        }
        h.finish()
    }
}

fn check_layout(expected: &[(String, Vec<usize>)], stored: &[NamedArray]) -> Result<()> {
    if expected.len() != stored.len() {
        return Err(Error::ShapeMismatch(format!(
            "network has {} parameter tensors, checkpoint has {}",
            expected.len(),
            stored.len()
        )));
    }
    for ((name, shape), a) in expected.iter().zip(stored) {
        if *name != a.name || *shape != a.shape {
            return Err(Error::ShapeMismatch(format!(
                "parameter {name} {shape:?} does not match stored {} {:?}",
                a.name, a.shape
            )));
        }
    }
    Ok(())
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = PathBuf::from(path);
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    tmp.set_file_name(format!(".{name}.tmp{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::network::optim::AdamConfig;
    use crate::tensor::Tensor;

    fn small() -> ArchitectureConfig {
        ArchitectureConfig {
            image_size: 8,
            stage_widths: vec![8],
            latent_channels: 2,
            groupnorm_group_size: 4,
            ..ArchitectureConfig::default()
        }
    }

    fn meta() -> TrainingMetadata {
        TrainingMetadata {
            method: Method::Vscc,
            snr_db: -5.0,
            cmc: 10.0,
            reconstruction_weight: 100.0,
            normalize_power: true,
            epoch: 3,
            seed: 42,
            dataset_fingerprint: "d".repeat(64),
            config_fingerprint: "c".repeat(64),
            code_version: crate::fingerprint::code_version().into(),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let net = Network::<f32>::new(&small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let ck = Checkpoint::new(&net, meta());
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.metadata.method, Method::Vscc);
        assert_eq!(back.metadata.snr_db, -5.0);
        assert_eq!(back.metadata.cmc, 10.0);
        assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());

        let restored: Network<f32> = back.build_network().unwrap();
        let x = Tensor::full([1, 3, 8, 8], 0.3f32);
        let a = net.encoder.encode(x.clone()).unwrap();
        let b = restored.encoder.encode(x).unwrap();
        assert_eq!(a.mean(), b.mean());
    }

    #[test]
    fn noiseless_snr_survives() {
        let net = Network::<f32>::new(&small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut m = meta();
        m.snr_db = f64::INFINITY;
        let ck = Checkpoint::new(&net, m);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), Path::new("x")).unwrap();
        assert_eq!(back.metadata.snr_db, f64::INFINITY);
    }

    #[test]
    fn mismatched_architecture_is_a_shape_error() {
        let net = Network::<f32>::new(&small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let ck = Checkpoint::new(&net, meta());
        let other = ArchitectureConfig {
            latent_channels: 3,
            ..small()
        };
        let mut wrong = Network::<f32>::new(&other, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(matches!(ck.load_into(&mut wrong), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn corrupt_files_are_diagnosed() {
        let net = Network::<f32>::new(&small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bytes = Checkpoint::new(&net, meta()).to_bytes().unwrap();
        let p = Path::new("x.ckpt");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, p).unwrap_err().to_string().contains("magic"));

        let mut bad = bytes.clone();
        bad[8] = 99;
        assert!(Checkpoint::from_bytes(&bad, p).unwrap_err().to_string().contains("version"));

        let truncated = &bytes[..bytes.len() - 6];
        assert!(Checkpoint::from_bytes(truncated, p).is_err());
    }

    #[test]
    fn optimizer_state_round_trips() {
        let mut net = Network::<f32>::new(&small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut adam = Adam::new(AdamConfig::with_learning_rate(1e-3));
        net.visit_mut(&mut |_, p| p.grad.fill(0.1));
        adam.step(|f| net.visit_mut(f));
        let ck = Checkpoint::new(&net, meta()).with_optimizer(&net, &adam);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), Path::new("x")).unwrap();
        let mut adam2 = Adam::new(AdamConfig::with_learning_rate(1e-3));
        back.restore_optimizer(&net, &mut adam2).unwrap();
        assert_eq!(adam2.steps(), 1);
        assert_eq!(adam2.state().1, adam.state().1);
        assert_eq!(adam2.state().2, adam.state().2);
    }
}
