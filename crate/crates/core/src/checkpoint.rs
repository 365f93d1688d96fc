//! Weight checkpoints: a versioned container of named f32 arrays plus the
//! network configuration that produced them.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, JSON header,
//! then every array's values as little-endian f32 in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};

const MAGIC: &[u8; 8] = b"CMCNETW\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    arrays: Vec<ArrayEntry>,
}

/// Raw checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub arrays: Vec<(ArrayEntry, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_network(net: &Network<f32>) -> Self {
        let arrays = net.named_arrays().into_iter().map(|(name, shape, data)| (ArrayEntry { name, shape }, data.to_vec())).collect();
        Self { config: net.config().clone(), arrays }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = Header { config: self.config.clone(), arrays: self.arrays.iter().map(|(e, _)| e.clone()).collect() };
        let json = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u64::<LittleEndian>(json.len() as u64)?;
        w.write_all(&json)?;
        for (_, data) in &self.arrays {
            for &v in data {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut r = BufReader::new(File::open(path)?);
        let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let len = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in header.arrays {
            let n: usize = entry.shape.iter().product();
            let mut data = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(|_| bad(&format!("truncated data for {}", entry.name)))?;
            arrays.push((entry, data));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes after array data"));
        }
        Ok(Self { config: header.config, arrays })
    }
}

pub fn save(net: &Network<f32>, path: &Path) -> Result<()> {
    Checkpoint::from_network(net).write(path)
}

/// Rebuilds the network stored at `path`.
pub fn load(path: &Path) -> Result<Network<f32>> {
    let ck = Checkpoint::read(path)?;
    let mut net = Network::build(ck.config.clone(), 0)?;
    copy_into(&mut net, &ck, true)?;
    Ok(net)
}

/// Loads `path` after checking it was written for exactly `expected`.
pub fn load_matching(path: &Path, expected: &NetworkConfig) -> Result<Network<f32>> {
    let ck = Checkpoint::read(path)?;
    if &ck.config != expected {
        return Err(Error::Checkpoint(format!("{} was written for a different network configuration", path.display())));
    }
    let mut net = Network::build(ck.config.clone(), 0)?;
    copy_into(&mut net, &ck, true)?;
    Ok(net)
}

/// Outcome of a partial weight import.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImportReport {
    pub copied: Vec<String>,
    /// Present in both but with different shapes.
    pub shape_mismatch: Vec<String>,
    /// Present in the network but absent from the checkpoint.
    pub missing: Vec<String>,
}

/// Initialization from another checkpoint: copies every array whose name and
/// shape agree and leaves the rest at their current values. The source
/// configuration is not required to match.
pub fn import_weights(net: &mut Network<f32>, source: &Checkpoint) -> ImportReport {
    let shapes: Vec<(String, Vec<usize>)> = net.named_arrays().into_iter().map(|(n, s, _)| (n, s)).collect();
    let mut report = ImportReport::default();
    for ((name, dst), (_, shape)) in net.named_arrays_mut().into_iter().zip(shapes) {
        match source.arrays.iter().find(|(e, _)| e.name == name) {
            Some((e, data)) if e.shape == shape => {
                dst.copy_from_slice(data);
                report.copied.push(name);
            }
            Some(_) => report.shape_mismatch.push(name),
            None => report.missing.push(name),
        }
    }
    info!("imported {} arrays ({} shape mismatches, {} missing)", report.copied.len(), report.shape_mismatch.len(), report.missing.len());
    report
}

fn copy_into(net: &mut Network<f32>, ck: &Checkpoint, strict: bool) -> Result<()> {
    let report = import_weights(net, ck);
    if strict && (!report.shape_mismatch.is_empty() || !report.missing.is_empty() || report.copied.len() != ck.arrays.len()) {
        return Err(Error::Checkpoint("array set does not match the network".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::HeadMode;
    use crate::nn::Tensor;

    fn cfg() -> NetworkConfig {
        NetworkConfig { input_size: 64, width_multiplier: 0.0625, ..Default::default() }
    }

    #[test]
    fn round_trip_reproduces_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = Network::<f32>::build(cfg(), 7).unwrap();
        save(&net, &path).unwrap();
        let back = load(&path).unwrap();
        let x = Tensor::from_vec(1, 3, 64, 64, (0..3 * 64 * 64).map(|i| (i % 13) as f32 / 13.0).collect());
        assert_eq!(net.forward(&x).unwrap(), back.forward(&x).unwrap());
        assert!(load_matching(&path, &cfg()).is_ok());
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save(&Network::<f32>::build(cfg(), 7).unwrap(), &path).unwrap();
        let other = NetworkConfig { head_mode: HeadMode::Softmax, ..cfg() };
        assert!(matches!(load_matching(&path, &other), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save(&Network::<f32>::build(cfg(), 7).unwrap(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
        std::fs::write(&path, b"garbage!garbage!").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
        assert!(matches!(load(&dir.path().join("absent")), Err(Error::MissingFile(_))));
    }

    #[test]
    fn import_copies_compatible_arrays_only() {
        let source = Checkpoint::from_network(&Network::<f32>::build(cfg(), 1).unwrap());
        // Three classes change only the output kernels.
        let mut net = Network::<f32>::build(NetworkConfig { num_classes: 3, ..cfg() }, 2).unwrap();
        let report = import_weights(&mut net, &source);
        assert_eq!(report.shape_mismatch.len(), 6);
        assert!(report.missing.is_empty());
        assert!(report.shape_mismatch.iter().all(|n| n.contains(".out.")));
        let (_, _, w) = net.named_arrays().into_iter().next().unwrap();
        assert_eq!(w, &source.arrays[0].1[..]);
    }
}
