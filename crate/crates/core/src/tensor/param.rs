use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::io::{read_tensor_bin, read_u32, write_tensor_bin};
use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Named parameter tensors, iterated in identifier order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn with(mut self, name: impl Into<String>, t: Tensor) -> Self {
        self.insert(name, t);
        self
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Parameter(format!("missing parameter `{name}`")))
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        self.entries
            .remove(name)
            .ok_or_else(|| Error::Parameter(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Merges `other` in, prefixing its names with `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamSet) {
        for (k, v) in other.entries {
            self.entries.insert(format!("{prefix}{k}"), v);
        }
    }

    /// Extracts the entries starting with `prefix`, stripping it.
    pub fn sub_set(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// `self + s·other`, entry by entry. Both sets must hold the same names and shapes.
    pub fn add_scaled(&self, other: &ParamSet, s: f64) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (k, v) in &self.entries {
            let o = other.get(k)?;
            if o.shape() != v.shape() {
                return dim_err("add_scaled", v.shape(), o.shape());
            }
            out.insert(k.clone(), v.zip_map(o, "add_scaled", |a, b| a + s * b)?);
        }
        Ok(out)
    }

    pub fn dot(&self, other: &ParamSet) -> Result<f64> {
        let mut acc = 0.0;
        for (k, v) in &self.entries {
            let o = other.get(k)?;
            acc += v.mul(o)?.sum();
        }
        Ok(acc)
    }

    /// Copy with a single scalar replaced.
    pub fn perturbed(&self, name: &str, index: usize, delta: f64) -> Result<ParamSet> {
        let mut out = self.clone();
        let t = out.get(name)?;
        let mut data = t.data().to_vec();
        data[index] += delta;
        let t = Tensor::from_vec(t.shape(), data)?;
        out.insert(name, t);
        Ok(out)
    }

    pub fn write_bin(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (k, v) in &self.entries {
            w.write_all(&(k.len() as u32).to_le_bytes())?;
            w.write_all(k.as_bytes())?;
            write_tensor_bin(v, &mut w)?;
        }
        Ok(())
    }

    pub fn read_bin(mut r: impl Read) -> Result<ParamSet> {
        let n = read_u32(&mut r)? as usize;
        let mut out = ParamSet::new();
        for _ in 0..n {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| Error::Parse { line: 0, msg: format!("parameter name: {e}") })?;
            out.insert(name, read_tensor_bin(&mut r)?);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tensors serialize")
    }

    pub fn from_json(s: &str) -> Result<ParamSet> {
        serde_json::from_str(s).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })
    }
}
