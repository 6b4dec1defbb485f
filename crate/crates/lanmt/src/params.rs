//! Named parameter storage and the versioned binary checkpoint container.
//!
//! Parameters live in creation order, which is fixed by model construction,
//! so optimizer updates and checkpoint serialization are deterministic.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{LanmtError, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Array2<f64>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }

    /// Total scalar count, for logging.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Replace stored values with those from a checkpoint, matched by name.
    pub fn load_values(&mut self, named: &[(String, Array2<f64>)]) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(LanmtError::Checkpoint(format!(
                "parameter count mismatch: model has {}, checkpoint has {}",
                self.values.len(),
                named.len()
            )));
        }
        for (name, value) in named {
            let id = self.by_name.get(name).ok_or_else(|| {
                LanmtError::Checkpoint(format!("unknown parameter {name} in checkpoint"))
            })?;
            if self.values[id.0].dim() != value.dim() {
                return Err(LanmtError::Checkpoint(format!(
                    "shape mismatch for {name}: model {:?}, checkpoint {:?}",
                    self.values[id.0].dim(),
                    value.dim()
                )));
            }
            self.values[id.0] = value.clone();
        }
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Xavier-uniform init for a `rows x cols` weight.
pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Gaussian init with the given std.
pub fn gaussian_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = rand_distr::StandardNormal.sample(rng);
        z * std
    })
}

pub fn zeros(rows: usize, cols: usize) -> Array2<f64> {
    Array2::zeros((rows, cols))
}

pub fn ones(rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_elem((rows, cols), 1.0)
}

const MAGIC: &[u8; 8] = b"LNMTCKPT";
const VERSION: u32 = 1;

/// Serialized model container: kind tag, JSON config header, named arrays.
pub struct Checkpoint {
    pub kind: String,
    pub config_json: String,
    pub params: Vec<(String, Array2<f64>)>,
}

impl Checkpoint {
    pub fn from_store(kind: &str, config_json: String, store: &ParamStore) -> Self {
        let params = store
            .iter()
            .map(|(_, name, value)| (name.to_string(), value.clone()))
            .collect();
        Self {
            kind: kind.to_string(),
            config_json,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_bytes(&mut w, self.kind.as_bytes())?;
        write_bytes(&mut w, self.config_json.as_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, value) in &self.params {
            write_bytes(&mut w, name.as_bytes())?;
            w.write_all(&(value.nrows() as u32).to_le_bytes())?;
            w.write_all(&(value.ncols() as u32).to_le_bytes())?;
            for v in value.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(LanmtError::Checkpoint(format!(
                "{} is not a model checkpoint (bad magic)",
                path.display()
            )));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(LanmtError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let kind = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|e| LanmtError::Checkpoint(format!("bad kind field: {e}")))?;
        let config_json = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|e| LanmtError::Checkpoint(format!("bad config field: {e}")))?;
        let n = read_u32(&mut r)? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = String::from_utf8(read_bytes(&mut r)?)
                .map_err(|e| LanmtError::Checkpoint(format!("bad param name: {e}")))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut data = vec![0f64; rows * cols];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            let arr = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| LanmtError::Checkpoint(e.to_string()))?;
            params.push((name, arr));
        }
        Ok(Self {
            kind,
            config_json,
            params,
        })
    }

    pub fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(LanmtError::Checkpoint(format!(
                "{} holds a '{}' model, expected '{kind}'",
                path.display(),
                self.kind
            )));
        }
        Ok(())
    }
}

fn write_bytes(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.register("enc/w", xavier(&mut rng, 4, 6));
        store.register("enc/b", zeros(1, 6));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");

        let ckpt = Checkpoint::from_store("teacher", "{\"hidden\":4}".into(), &store);
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.kind, "teacher");
        assert_eq!(loaded.config_json, "{\"hidden\":4}");
        assert_eq!(loaded.params.len(), 2);
        assert_eq!(loaded.params[0].0, "enc/w");
        assert_eq!(loaded.params[0].1, *store.value(ParamId(0)));

        let mut store2 = ParamStore::new();
        store2.register("enc/w", zeros(4, 6));
        store2.register("enc/b", ones(1, 6));
        store2.load_values(&loaded.params).unwrap();
        assert_eq!(store2.value(ParamId(0)), store.value(ParamId(0)));
        assert_eq!(store2.value(ParamId(1)), store.value(ParamId(1)));
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPT____").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(LanmtError::Checkpoint(_))
        ));
    }

    #[test]
    fn load_values_rejects_shape_mismatch() {
        let mut store = ParamStore::new();
        store.register("w", zeros(2, 2));
        let named = vec![("w".to_string(), zeros(3, 2))];
        assert!(store.load_values(&named).is_err());
    }
}
