//! Named parameter collections and the checkpoint format.
//!
//! A checkpoint is two files: the data file holds the parameters as
//! back-to-back LGDT records in name order, and `<data>.index.csv` lists
//! `name,offset,length` for each record.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{read_lgdt, Tensor};
use crate::error::{LgdError, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct IndexRow {
    name: String,
    offset: u64,
    length: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter. Names must be unique.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(LgdError::InvalidArgument(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        self.params
            .insert(name.to_string(), tensor.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.params.keys().any(|k| k.starts_with(prefix))
    }

    /// Marks every parameter under `prefix` as (non-)trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (k, v) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                v.set_requires_grad(trainable);
            }
        }
    }

    pub fn remove_prefix(&mut self, prefix: &str) -> usize {
        let before = self.params.len();
        self.params.retain(|k, _| !k.starts_with(prefix));
        before - self.params.len()
    }

    /// Copies of all parameters under `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Moves every parameter of `other` in, replacing same-named entries.
    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn index_path(data_path: &Path) -> PathBuf {
        let mut s = data_path.as_os_str().to_owned();
        s.push(".index.csv");
        PathBuf::from(s)
    }

    /// Writes the checkpoint data file and its index.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut blob = Vec::new();
        let mut rows = Vec::with_capacity(self.params.len());
        for (name, t) in &self.params {
            let bytes = t.to_lgdt_bytes();
            rows.push(IndexRow {
                name: name.clone(),
                offset: blob.len() as u64,
                length: bytes.len() as u64,
            });
            blob.extend_from_slice(&bytes);
        }
        std::fs::write(path, &blob).map_err(|e| LgdError::io(path, e))?;
        let index = Self::index_path(path);
        let mut w = csv::Writer::from_path(&index).map_err(|e| LgdError::Csv {
            path: index.clone(),
            source: e,
        })?;
        for row in &rows {
            w.serialize(row).map_err(|e| LgdError::Csv {
                path: index.clone(),
                source: e,
            })?;
        }
        w.flush().map_err(|e| LgdError::io(&index, e))
    }

    /// Loads a checkpoint; every parameter comes back trainable.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let blob = std::fs::read(path).map_err(|e| LgdError::io(path, e))?;
        let index = Self::index_path(path);
        let mut rdr = csv::Reader::from_path(&index).map_err(|e| LgdError::Csv {
            path: index.clone(),
            source: e,
        })?;
        let mut store = ParamStore::new();
        for row in rdr.deserialize::<IndexRow>() {
            let row = row.map_err(|e| LgdError::Csv {
                path: index.clone(),
                source: e,
            })?;
            let (start, len) = (row.offset as usize, row.length as usize);
            let end = start
                .checked_add(len)
                .filter(|&e| e <= blob.len())
                .ok_or_else(|| {
                    LgdError::format(path, format!("record `{}` runs past end of file", row.name))
                })?;
            let source = format!("{}#{}", path.display(), row.name);
            let tensor = read_lgdt(&blob[start..end], &source)?;
            if tensor.to_lgdt_bytes().len() != len {
                return Err(LgdError::format(
                    path,
                    format!("record `{}` length mismatch", row.name),
                ));
            }
            store
                .insert(&row.name, tensor)
                .map_err(|_| LgdError::format(&index, format!("duplicate `{}`", row.name)))?;
        }
        Ok(store)
    }
}
