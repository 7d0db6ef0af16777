use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameter name → gradient, one entry per trainable parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    entries: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn from_map(entries: BTreeMap<String, Tensor>) -> Self {
        GradientMap { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Tensor) {
        self.entries.insert(name.into(), g);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.entries
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// All entries concatenated in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    pub fn scaled(&self, c: f64) -> GradientMap {
        GradientMap {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.scale(c))).collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Serialize for GradientMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let m: BTreeMap<&String, Entry> = self
            .entries
            .iter()
            .map(|(k, v)| {
                (
                    k,
                    Entry {
                        shape: v.shape().to_vec(),
                        data: v.to_vec(),
                    },
                )
            })
            .collect();
        m.serialize(s)
    }
}

impl<'de> Deserialize<'de> for GradientMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m: BTreeMap<String, Entry> = BTreeMap::deserialize(d)?;
        let mut entries = BTreeMap::new();
        for (k, e) in m {
            let t = Tensor::new(e.shape, e.data).map_err(serde::de::Error::custom)?;
            entries.insert(k, t);
        }
        Ok(GradientMap { entries })
    }
}

/// Central-difference check of an analytic gradient.
///
/// Returns `max |analytic - (f(θ+h) - f(θ-h)) / 2h| / (|analytic| + 1e-8)` over
/// every coordinate of every parameter in `params`.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &BTreeMap<String, Tensor>,
    analytic: &GradientMap,
    h: f64,
) -> Result<f64>
where
    F: FnMut(&BTreeMap<String, Tensor>) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (name, value) in params {
        let grad = analytic.get(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        if grad.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                left: grad.shape().to_vec(),
                right: value.shape().to_vec(),
                context: "finite_diff_check",
            });
        }
        let base = value.to_vec();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            probe.insert(name.clone(), Tensor::new(value.shape().to_vec(), plus)?);
            let fp = f(&probe)?;
            let mut minus = base.clone();
            minus[i] -= h;
            probe.insert(name.clone(), Tensor::new(value.shape().to_vec(), minus)?);
            let fm = f(&probe)?;
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
        }
        probe.insert(name.clone(), value.clone());
    }
    Ok(worst)
}
