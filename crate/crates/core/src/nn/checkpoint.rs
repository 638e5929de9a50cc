//! `ckpt-v1` checkpoint format.
//!
//! A checkpoint is a JSON manifest (`<base>.json`) listing the layer
//! descriptors and parameter entries, plus a binary blob (`<base>.bin`) of
//! named parameter tensors: for each tensor, a little-endian u32 name length,
//! the UTF-8 name, a little-endian u32 rank, `rank` little-endian u64 dims,
//! then the row-major values as little-endian 64-bit floats.

use super::{LayerSpec, Network};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const CKPT_VERSION: &str = "ckpt-v1";

/// Optional metadata carried by controller checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// One of `task_specific`, `task_agnostic`, `shaped`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    /// Reward-shaping weight the controller was trained with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: String,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<ParamEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    role: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phi: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    dims: Vec<usize>,
}

fn paths(base: &Path) -> (PathBuf, PathBuf) {
    let mut json = base.as_os_str().to_owned();
    json.push(".json");
    let mut bin = base.as_os_str().to_owned();
    bin.push(".bin");
    (PathBuf::from(json), PathBuf::from(bin))
}

/// Writes `<base>.json` and `<base>.bin`.
pub fn save_network<F: Real>(base: &Path, net: &Network<F>, meta: &CheckpointMeta) -> Result<()> {
    let named = net.named_params();
    let manifest = Manifest {
        version: CKPT_VERSION.to_string(),
        input_shape: net.input_shape().to_vec(),
        output_shape: net.output_shape().to_vec(),
        layers: net.layers().to_vec(),
        params: named
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                dims: t.shape().to_vec(),
            })
            .collect(),
        role: meta.role.clone(),
        phi: meta.phi,
    };
    let (json_path, bin_path) = paths(base);
    if let Some(dir) = json_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    std::fs::write(&json_path, json)?;

    let mut blob = Vec::new();
    for (name, t) in &named {
        blob.write_all(&(name.len() as u32).to_le_bytes())?;
        blob.write_all(name.as_bytes())?;
        blob.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            blob.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            blob.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    std::fs::write(&bin_path, blob)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Loads a checkpoint written by [`save_network`].
pub fn load_network<F: Real>(base: &Path) -> Result<(Network<F>, CheckpointMeta)> {
    let (json_path, bin_path) = paths(base);
    if !json_path.exists() || !bin_path.exists() {
        return Err(Error::MissingArtifact(format!(
            "checkpoint {} (.json/.bin)",
            base.display()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(&json_path)?)?;
    if manifest.version != CKPT_VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported version `{}`",
            manifest.version
        )));
    }

    // rebuild the network skeleton, re-deriving shapes from the descriptors
    let mut layers = manifest.layers.clone();
    let mut shape = manifest.input_shape.clone();
    let mut skip_stack = Vec::new();
    for (idx, layer) in layers.iter_mut().enumerate() {
        shape = super::infer_shape(idx, layer, &shape, &mut skip_stack)?;
    }
    if shape != manifest.output_shape {
        return Err(Error::CheckpointFormat(format!(
            "derived output shape {:?} does not match manifest {:?}",
            shape, manifest.output_shape
        )));
    }
    let params: Vec<Vec<Tensor<F>>> = layers
        .iter()
        .map(|l| {
            super::param_shapes(l)
                .into_iter()
                .map(|s| Tensor::zeros(&s))
                .collect()
        })
        .collect();
    let mut net = Network::from_parts(manifest.input_shape.clone(), layers, params, shape);

    let blob = std::fs::read(&bin_path)?;
    let mut cursor = std::io::Cursor::new(blob);
    let expected: Vec<(String, Vec<usize>)> = net
        .named_params()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    if expected.len() != manifest.params.len() {
        return Err(Error::CheckpointFormat(format!(
            "manifest lists {} params, network has {}",
            manifest.params.len(),
            expected.len()
        )));
    }
    let mut values: Vec<Vec<F>> = Vec::with_capacity(expected.len());
    for ((exp_name, exp_dims), entry) in expected.iter().zip(&manifest.params) {
        if &entry.name != exp_name || &entry.dims != exp_dims {
            return Err(Error::CheckpointFormat(format!(
                "param `{}` {:?} does not match expected `{}` {:?}",
                entry.name, entry.dims, exp_name, exp_dims
            )));
        }
        let name_len = read_u32(&mut cursor)? as usize;
        let mut name_buf = vec![0u8; name_len];
        cursor.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| Error::CheckpointFormat(format!("bad name encoding: {e}")))?;
        if &name != exp_name {
            return Err(Error::CheckpointFormat(format!(
                "blob param `{name}` does not match manifest `{exp_name}`"
            )));
        }
        let rank = read_u32(&mut cursor)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(&mut cursor)? as usize);
        }
        if &dims != exp_dims {
            return Err(Error::CheckpointFormat(format!(
                "blob dims {dims:?} for `{name}` do not match manifest {exp_dims:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            cursor.read_exact(&mut b)?;
            let v = f64::from_le_bytes(b);
            if !v.is_finite() {
                return Err(Error::CheckpointFormat(format!(
                    "non-finite value in `{name}`"
                )));
            }
            data.push(F::real(v));
        }
        values.push(data);
    }
    if cursor.position() != cursor.get_ref().len() as u64 {
        return Err(Error::CheckpointFormat("trailing bytes in blob".into()));
    }
    let mut vi = 0;
    for ts in net.params_mut() {
        for t in ts.iter_mut() {
            let data = std::mem::take(&mut values[vi]);
            *t = Tensor::from_vec(t.shape(), data)?;
            vi += 1;
        }
    }
    Ok((
        net,
        CheckpointMeta {
            role: manifest.role,
            phi: manifest.phi,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkBuilder;
    use crate::rng::rng_for;

    #[test]
    fn round_trip_preserves_params_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rng_for(5, "ck");
        let net: Network = NetworkBuilder::new(&[1, 8, 8])
            .conv2d(3, 3)
            .relu()
            .max_pool2()
            .flatten()
            .dense(2)
            .build(&mut rng)
            .unwrap();
        let base = dir.path().join("model.ckpt");
        let meta = CheckpointMeta {
            role: Some("task_agnostic".into()),
            phi: Some(0.9),
        };
        save_network(&base, &net, &meta).unwrap();
        let (loaded, loaded_meta) = load_network::<f64>(&base).unwrap();
        assert_eq!(loaded, net);
        assert_eq!(loaded_meta, meta);
    }

    #[test]
    fn missing_checkpoint_is_reported() {
        let err = load_network::<f64>(Path::new("/nonexistent/model.ckpt")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rng_for(6, "ck");
        let net: Network = NetworkBuilder::new(&[4]).dense(2).build(&mut rng).unwrap();
        let base = dir.path().join("model.ckpt");
        save_network(&base, &net, &CheckpointMeta::default()).unwrap();
        let bin = dir.path().join("model.ckpt.bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&bin, bytes).unwrap();
        assert!(load_network::<f64>(&base).is_err());
    }
}
