//! Checkpoint directories: a `manifest.txt` of `key=value` lines plus one
//! `PCRT` tensor file per named parameter and batch-norm statistic.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pcr::Network;
use crate::tensor::{read_tensor, write_tensor, Real, Tensor};

pub const MANIFEST: &str = "manifest.txt";

/// Ordered `key=value` pairs.
pub type Manifest = Vec<(String, String)>;

fn tensor_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.pcrt"))
}

pub fn save_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensor(t, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(BufReader::new(file))
}

pub fn format_manifest(m: &[(String, String)]) -> String {
    m.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Input(format!("manifest line {}: expected key=value, got `{line}`", no + 1)));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Writes every parameter and running statistic of `net` into `dir`.
pub fn save_checkpoint<T: Real>(dir: &Path, net: &Network<T>, manifest: &[(String, String)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for p in net.params() {
        save_tensor(&tensor_path(dir, &p.name), &p.value)?;
    }
    for (name, bn) in net.batchnorms() {
        let c = bn.channels();
        save_tensor(&tensor_path(dir, &format!("{name}.running_mean")), &Tensor::new(&[c], bn.running_mean.clone())?)?;
        save_tensor(&tensor_path(dir, &format!("{name}.running_var")), &Tensor::new(&[c], bn.running_var.clone())?)?;
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, format_manifest(manifest)).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_manifest(&text)
}

fn load_matching<T: Real>(dir: &Path, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
    let t = load_tensor(&tensor_path(dir, name))?;
    if t.shape() != shape {
        return Err(Error::Shape(format!(
            "checkpoint tensor `{name}` has shape {:?}, network expects {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}

/// Overwrites the parameters and running statistics of `net`, which must
/// have been built from the same configuration, with the stored tensors.
pub fn load_checkpoint<T: Real>(dir: &Path, net: &mut Network<T>) -> Result<()> {
    for p in net.params_mut() {
        p.value = load_matching(dir, &p.name, p.value.shape())?;
    }
    for (name, bn) in net.batchnorms_mut() {
        let c = [bn.channels()];
        bn.running_mean = load_matching(dir, &format!("{name}.running_mean"), &c)?.into_data();
        bn.running_var = load_matching(dir, &format!("{name}.running_var"), &c)?.into_data();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcr::NetworkConfig;

    #[test]
    fn round_trip_restores_every_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = Network::<f64>::new(NetworkConfig::tiny(), 3).unwrap();
        net.batchnorms_mut()[0].1.running_mean[2] = 0.25;
        let manifest = vec![("checkpoint.epoch".to_string(), "4".to_string())];
        save_checkpoint(dir.path(), &net, &manifest).unwrap();
        let mut fresh = Network::<f64>::new(NetworkConfig::tiny(), 9).unwrap();
        assert_ne!(fresh.params(), net.params());
        load_checkpoint(dir.path(), &mut fresh).unwrap();
        assert_eq!(fresh.params(), net.params());
        assert_eq!(fresh.batchnorms(), net.batchnorms());
        assert_eq!(read_manifest(dir.path()).unwrap(), manifest);
    }

    #[test]
    fn incompatible_network_is_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::<f64>::new(NetworkConfig::tiny(), 3).unwrap();
        save_checkpoint(dir.path(), &net, &[]).unwrap();
        let mut wide = NetworkConfig::tiny();
        wide.classes = 5;
        let mut other = Network::<f64>::new(wide, 3).unwrap();
        assert!(matches!(load_checkpoint(dir.path(), &mut other), Err(Error::Shape(_))));
    }

    #[test]
    fn manifest_rejects_lines_without_equals() {
        assert!(parse_manifest("a=1\n# note\n\nb = x y\n").is_ok());
        assert!(parse_manifest("broken\n").is_err());
    }
}
