//! Named parameter storage with deterministic iteration order.
//!
//! All learnable state lives in one `ParamSet` keyed by dotted path
//! (`"adapter.expert1.w1"`, `"cpc.audio.w0"`, ...). BTreeMap keeps
//! iteration — and therefore optimizer updates and serialization —
//! independent of creation order.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::mat::Mat;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: &str, value: Mat) {
        self.map.insert(path.to_string(), value);
    }

    pub fn contains(&self, path: &str) -> bool {
        self.map.contains_key(path)
    }

    pub fn get(&self, path: &str) -> Result<&Mat> {
        self.map
            .get(path)
            .ok_or_else(|| CoreError::MissingParameter(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Mat> {
        self.map
            .get_mut(path)
            .ok_or_else(|| CoreError::MissingParameter(path.to_string()))
    }

    pub fn remove(&mut self, path: &str) -> Option<Mat> {
        self.map.remove(path)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Paths in sorted order.
    pub fn paths(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.map.iter_mut()
    }

    /// Total scalar count across all parameters.
    pub fn n_scalars(&self) -> usize {
        self.map.values().map(|m| m.len()).sum()
    }

    /// Error if any stored value is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        for (path, m) in &self.map {
            if !m.all_finite() {
                return Err(CoreError::NonFinite(format!("parameter {path}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_order_is_sorted_not_insertion() {
        let mut p = ParamSet::new();
        p.insert("zeta", Mat::scalar(1.0));
        p.insert("alpha", Mat::scalar(2.0));
        p.insert("mid.x", Mat::scalar(3.0));
        assert_eq!(p.paths(), ["alpha", "mid.x", "zeta"]);
    }

    #[test]
    fn missing_parameter_is_an_error() {
        let p = ParamSet::new();
        assert!(matches!(
            p.get("nope"),
            Err(CoreError::MissingParameter(_))
        ));
    }

    #[test]
    fn check_finite_flags_nan() {
        let mut p = ParamSet::new();
        p.insert("ok", Mat::scalar(0.5));
        assert!(p.check_finite().is_ok());
        p.insert("bad", Mat::scalar(f64::NAN));
        assert!(matches!(p.check_finite(), Err(CoreError::NonFinite(_))));
    }
}
