//! Flat parameter vectors with a named layout.
//!
//! Every federated algorithm in this crate trades in whole-model parameter
//! vectors: clients return them, the server averages them, the meta update
//! nudges them. Keeping them as one flat `Vec<f64>` plus a shared layout
//! makes aggregation trivial and deterministic; the layout maps named slices
//! (e.g. `dense1.weight`) back to tensors when a model forward pass needs
//! them.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One named tensor inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered list of named shapes; the order defines the flattening.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn new(entries: Vec<(&str, Vec<usize>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Empty("parameter layout".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::with_capacity(entries.len());
        let mut total = 0;
        for (name, shape) in entries {
            if !seen.insert(name.to_string()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate layout entry {name:?}"
                )));
            }
            let entry = LayoutEntry {
                name: name.to_string(),
                shape,
            };
            if entry.len() == 0 {
                return Err(Error::InvalidArgument(format!(
                    "layout entry {name:?} has zero elements"
                )));
            }
            total += entry.len();
            out.push(entry);
        }
        Ok(ParamLayout {
            entries: out,
            total,
        })
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    /// Total number of scalar parameters.
    pub fn total(&self) -> usize {
        self.total
    }

    /// Iterate `(entry, flat range)` pairs in flattening order.
    pub fn ranges(&self) -> impl Iterator<Item = (&LayoutEntry, std::ops::Range<usize>)> {
        let mut off = 0;
        self.entries.iter().map(move |e| {
            let r = off..off + e.len();
            off = r.end;
            (e, r)
        })
    }
}

/// A model's parameters (or a gradient, or any co-shaped vector) flattened in
/// layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let n = layout.total();
        ParamVector {
            layout,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::LayoutMismatch(format!(
                "{} values for a layout of {}",
                values.len(),
                layout.total()
            )));
        }
        Ok(ParamVector { layout, values })
    }

    /// Rebuild a flat vector from per-entry tensors (inverse of [`Self::to_tensors`]).
    pub fn from_tensors(layout: Arc<ParamLayout>, tensors: &[Tensor]) -> Result<Self> {
        if tensors.len() != layout.entries().len() {
            return Err(Error::LayoutMismatch(format!(
                "{} tensors for a layout of {} entries",
                tensors.len(),
                layout.entries().len()
            )));
        }
        let mut values = Vec::with_capacity(layout.total());
        for (entry, tensor) in layout.entries().iter().zip(tensors) {
            if tensor.shape() != entry.shape.as_slice() {
                return Err(Error::LayoutMismatch(format!(
                    "entry {:?} wants shape {:?}, got {:?}",
                    entry.name,
                    entry.shape,
                    tensor.shape()
                )));
            }
            values.extend_from_slice(tensor.data());
        }
        Ok(ParamVector { layout, values })
    }

    /// Split into per-entry tensors in layout order.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.layout
            .ranges()
            .map(|(e, r)| Tensor::from_parts(e.shape.clone(), self.values[r].to_vec()))
            .collect()
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_same_layout(&self, other: &ParamVector, what: &str) -> Result<()> {
        if Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(format!(
                "{what} between different parameter layouts"
            )))
        }
    }

    /// `self += alpha * other` (the only mutation the algorithms need).
    pub fn add_scaled(&mut self, other: &ParamVector, alpha: f64) -> Result<()> {
        self.check_same_layout(other, "add_scaled")?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        let mut out = self.clone();
        out.add_scaled(other, 1.0)?;
        Ok(out)
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        let mut out = self.clone();
        out.add_scaled(other, -1.0)?;
        Ok(out)
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_same_layout(other, "dot")?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// L∞ distance; the tolerance currency of the aggregation contracts.
    pub fn max_abs_diff(&self, other: &ParamVector) -> Result<f64> {
        self.check_same_layout(other, "max_abs_diff")?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}
