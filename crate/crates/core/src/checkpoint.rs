//! Flat binary container for named parameter arrays, plus JSON sidecars
//! carrying the model dimensions and graphs needed to rebuild a model.
//!
//! Layout (all integers little-endian): 4 magic bytes, u32 format version,
//! u64 record count, then per record a u64 name length, the UTF-8 name,
//! u64 rank, u64 extents, u64 value count, and the values as f64 bits.
//! A checkpoint for a full model is the container at `<path>` and a
//! `<path>.meta.json` sidecar.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::client::{ClientDims, ClientModel};
use crate::error::{Error, Result};
use crate::graph::MultiGraph;
use crate::server::ServerModel;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FCPC";
const VERSION: u32 = 1;

/// One decoded container record.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serializes named tensors in iteration order.
pub fn encode_params(records: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut seen = BTreeMap::new();
    for (i, (name, _)) in records.iter().enumerate() {
        if seen.insert(name.as_str(), i).is_some() {
            return Err(Error::Data(format!("checkpoint: duplicate record name {name:?}")));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for (name, tensor) in records {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let shape = tensor.shape();
        out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let data = tensor.data_vec();
        out.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Data(format!("checkpoint: truncated while reading {what} at byte {}", self.pos))
        })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v)
            .map_err(|_| Error::Data(format!("checkpoint: {what} {v} exceeds address space")))
    }
}

/// Parses a container produced by [`encode_params`].
pub fn decode_params(bytes: &[u8]) -> Result<Vec<NamedArray>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Data("checkpoint: bad magic bytes, not a parameter container".into()));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "checkpoint: unsupported container version {version}, expected {VERSION}"
        )));
    }
    let count = cur.usize("record count")?;
    let mut names = BTreeMap::new();
    let mut records = Vec::with_capacity(count.min(1024));
    for idx in 0..count {
        let name_len = cur.usize("name length")?;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::Data(format!("checkpoint: record {idx} name is not UTF-8")))?
            .to_string();
        if names.insert(name.clone(), idx).is_some() {
            return Err(Error::Data(format!("checkpoint: duplicate record name {name:?}")));
        }
        let rank = cur.usize("rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.usize("extent")?);
        }
        let declared = cur.usize("value count")?;
        let numel: usize = shape.iter().product();
        if declared != numel {
            return Err(Error::Data(format!(
                "checkpoint: record {name:?} declares {declared} values but shape {shape:?} \
                 holds {numel}"
            )));
        }
        let raw = cur.take(declared.checked_mul(8).ok_or_else(|| {
            Error::Data(format!("checkpoint: record {name:?} value byte count overflows"))
        })?, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        records.push(NamedArray { name, shape, data });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Data(format!(
            "checkpoint: {} trailing bytes after the last record",
            bytes.len() - cur.pos
        )));
    }
    Ok(records)
}

pub fn save_params(path: &Path, records: &[(String, Tensor)]) -> Result<()> {
    Ok(fs::write(path, encode_params(records)?)?)
}

pub fn load_params(path: &Path) -> Result<Vec<NamedArray>> {
    decode_params(&fs::read(path)?)
}

/// Copies decoded arrays into live tensors, matched by name. The two sets
/// must agree exactly: any missing, extra, or reshaped record is an error.
pub fn apply_params(arrays: &[NamedArray], targets: &[(String, Tensor)]) -> Result<()> {
    let mut by_name: BTreeMap<&str, &NamedArray> = BTreeMap::new();
    for a in arrays {
        by_name.insert(a.name.as_str(), a);
    }
    if by_name.len() != arrays.len() {
        return Err(Error::Data("checkpoint: duplicate record names".into()));
    }
    for (name, tensor) in targets {
        let arr = by_name.remove(name.as_str()).ok_or_else(|| {
            Error::Data(format!("checkpoint: missing record {name:?} for a model parameter"))
        })?;
        if arr.shape != tensor.shape() {
            return Err(Error::Shape(format!(
                "checkpoint: record {name:?} has shape {:?}, model expects {:?}",
                arr.shape,
                tensor.shape()
            )));
        }
        tensor.set_data(&arr.data)?;
    }
    if let Some((name, _)) = by_name.pop_first() {
        return Err(Error::Data(format!(
            "checkpoint: record {name:?} matches no model parameter"
        )));
    }
    Ok(())
}

/// Sidecar path: `<container>.meta.json`.
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct ClientMeta {
    dims: ClientDims,
}

#[derive(Serialize, Deserialize)]
struct ServerMeta {
    hidden_dim: usize,
    mask_rate: f64,
    graphs: MultiGraph,
}

fn read_meta<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let meta = sidecar(path);
    let text = fs::read_to_string(&meta)
        .map_err(|e| Error::Data(format!("checkpoint: cannot read {}: {e}", meta.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("checkpoint: bad sidecar {}: {e}", meta.display())))
}

fn write_meta<T: Serialize>(path: &Path, meta: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(meta).expect("sidecar types serialize");
    Ok(fs::write(sidecar(path), text)?)
}

/// Writes the aggregated client model: parameters plus a dims sidecar.
pub fn save_client(path: &Path, model: &ClientModel) -> Result<()> {
    save_params(path, &model.named_params())?;
    write_meta(path, &ClientMeta { dims: model.dims })
}

pub fn load_client(path: &Path) -> Result<ClientModel> {
    let meta: ClientMeta = read_meta(path)?;
    let model = ClientModel::zeros(meta.dims);
    apply_params(&load_params(path)?, &model.named_params())?;
    Ok(model)
}

/// Writes the server model: parameters plus a sidecar with the dimensions,
/// mask rate, and the graphs message passing runs over.
pub fn save_server(path: &Path, model: &ServerModel) -> Result<()> {
    save_params(path, &model.named_params())?;
    write_meta(
        path,
        &ServerMeta {
            hidden_dim: model.hidden_dim,
            mask_rate: model.mask.mask_rate,
            graphs: model.graphs.clone(),
        },
    )
}

pub fn load_server(path: &Path) -> Result<ServerModel> {
    let meta: ServerMeta = read_meta(path)?;
    let model = ServerModel::zeros(meta.graphs, meta.hidden_dim, meta.mask_rate)?;
    apply_params(&load_params(path)?, &model.named_params())?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_client_graph, DistanceTable};
    use crate::tensor::init::seeded_rng;

    fn toy_records() -> Vec<(String, Tensor)> {
        vec![
            ("a.w".into(), Tensor::param(&[2, 3], vec![1.0, -2.5, 3.0, 0.0, 4.5, -6.0]).unwrap()),
            ("a.b".into(), Tensor::param(&[3], vec![0.125, -0.25, 1e-9]).unwrap()),
            ("s".into(), Tensor::param(&[], vec![42.0]).unwrap()),
        ]
    }

    #[test]
    fn round_trip_preserves_names_shapes_and_bits() {
        let records = toy_records();
        let decoded = decode_params(&encode_params(&records).unwrap()).unwrap();
        assert_eq!(decoded.len(), records.len());
        for (arr, (name, tensor)) in decoded.iter().zip(&records) {
            assert_eq!(&arr.name, name);
            assert_eq!(arr.shape, tensor.shape());
            let want = tensor.data_vec();
            assert_eq!(arr.data.len(), want.len());
            for (a, b) in arr.data.iter().zip(&want) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn apply_restores_into_fresh_tensors() {
        let records = toy_records();
        let decoded = decode_params(&encode_params(&records).unwrap()).unwrap();
        let fresh: Vec<(String, Tensor)> = records
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros_param(t.shape())))
            .collect();
        apply_params(&decoded, &fresh).unwrap();
        for ((_, a), (_, b)) in fresh.iter().zip(&records) {
            assert_eq!(a.data_vec(), b.data_vec());
        }
    }

    #[test]
    fn bad_magic_version_and_truncation_are_rejected() {
        let good = encode_params(&toy_records()).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_params(&bad_magic), Err(Error::Data(m)) if m.contains("magic")));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(
            matches!(decode_params(&bad_version), Err(Error::Data(m)) if m.contains("version"))
        );

        for cut in [3, 11, 20, good.len() - 1] {
            assert!(decode_params(&good[..cut]).is_err(), "cut at {cut} must fail");
        }

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(
            matches!(decode_params(&trailing), Err(Error::Data(m)) if m.contains("trailing"))
        );
    }

    #[test]
    fn apply_rejects_missing_extra_and_reshaped_records() {
        let records = toy_records();
        let decoded = decode_params(&encode_params(&records).unwrap()).unwrap();

        let missing: Vec<_> = records
            .iter()
            .map(|(n, t)| (format!("{n}.renamed"), t.clone()))
            .collect();
        assert!(apply_params(&decoded, &missing).is_err());

        let extra = &records[..2];
        assert!(matches!(
            apply_params(&decoded, extra),
            Err(Error::Data(m)) if m.contains("matches no model parameter")
        ));

        let reshaped: Vec<_> = records
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros_param(&[t.numel()])))
            .collect();
        assert!(apply_params(&decoded, &reshaped).is_err());
    }

    #[test]
    fn client_checkpoint_round_trips_through_disk() {
        let dir = std::env::temp_dir().join(format!("ckpt-client-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("client.params");

        let mut rng = seeded_rng(7);
        let model = ClientModel::new(&mut rng, ClientDims::new(1, 4, 4));
        save_client(&path, &model).unwrap();
        let loaded = load_client(&path).unwrap();

        assert_eq!(loaded.dims, model.dims);
        for ((na, a), (nb, b)) in loaded.named_params().iter().zip(model.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.data_vec(), b.data_vec());
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn server_checkpoint_round_trips_with_graphs() {
        let dir = std::env::temp_dir().join(format!("ckpt-server-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("server.params");

        let table = DistanceTable::from_records(&[
            ("a", "b", 1.0),
            ("a", "c", 1.2),
            ("b", "c", 0.9),
            ("c", "d", 9.0),
        ])
        .unwrap();
        let graph = build_client_graph(&table, 0.1).unwrap();
        let graphs = MultiGraph::build(graph, 2, 3).unwrap();

        let mut rng = seeded_rng(11);
        let model = ServerModel::new(&mut rng, graphs, 4, 0.25).unwrap();
        save_server(&path, &model).unwrap();
        let loaded = load_server(&path).unwrap();

        assert_eq!(loaded.hidden_dim, model.hidden_dim);
        assert_eq!(loaded.mask.mask_rate, model.mask.mask_rate);
        assert_eq!(loaded.graphs.assignment.label, model.graphs.assignment.label);
        for ((na, a), (nb, b)) in loaded.named_params().iter().zip(model.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.data_vec(), b.data_vec());
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn missing_sidecar_is_a_clear_error() {
        let dir = std::env::temp_dir().join(format!("ckpt-nometa-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("client.params");
        save_params(&path, &toy_records()).unwrap();
        let err = load_client(&path).unwrap_err();
        assert!(matches!(err, Error::Data(m) if m.contains("meta.json")));
        fs::remove_dir_all(&dir).unwrap();
    }
}
