use crate::error::{Error, Result};

/// Labeled fixed-shape windows from one domain (one user/device condition).
///
/// Windows are stored contiguously as `[n, channels, length]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    domain_id: String,
    num_classes: usize,
    channels: usize,
    length: usize,
    data: Vec<f64>,
    labels: Vec<usize>,
}

/// Window-only view of a dataset. Code that must not see labels takes this.
#[derive(Clone, Copy, Debug)]
pub struct Unlabeled<'a> {
    channels: usize,
    length: usize,
    data: &'a [f64],
}

impl DomainDataset {
    pub fn new(
        domain_id: impl Into<String>,
        num_classes: usize,
        channels: usize,
        length: usize,
        data: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let domain_id = domain_id.into();
        if labels.is_empty() {
            return Err(Error::invalid(format!("domain {domain_id}: no instances")));
        }
        if channels == 0 || length == 0 || num_classes == 0 {
            return Err(Error::invalid(format!("domain {domain_id}: zero-sized window or class count")));
        }
        if data.len() != labels.len() * channels * length {
            return Err(Error::Shape {
                op: "domain_dataset",
                lhs: vec![labels.len(), channels, length],
                rhs: vec![data.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!(
                "domain {domain_id}: label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(DomainDataset {
            domain_id,
            num_classes,
            channels,
            length,
            data,
            labels,
        })
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn window_size(&self) -> usize {
        self.channels * self.length
    }

    pub fn window(&self, i: usize) -> &[f64] {
        let w = self.window_size();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    pub fn unlabeled(&self) -> Unlabeled<'_> {
        Unlabeled {
            channels: self.channels,
            length: self.length,
            data: &self.data,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        self.labels.iter().for_each(|&y| c[y] += 1);
        c
    }

    /// New dataset holding the given instances, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let w = self.window_size();
        let mut data = Vec::with_capacity(indices.len() * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("index {i} out of range for {} instances", self.len())));
            }
            data.extend_from_slice(self.window(i));
            labels.push(self.labels[i]);
        }
        DomainDataset::new(self.domain_id.clone(), self.num_classes, self.channels, self.length, data, labels)
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::invalid("relabel: label count differs from instance count"));
        }
        DomainDataset::new(
            self.domain_id.clone(),
            self.num_classes,
            self.channels,
            self.length,
            self.data.clone(),
            labels,
        )
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.domain_id = id.into();
        self
    }

    pub(crate) fn map_values(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        let l = self.length;
        let ch = self.channels;
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| f((i / l) % ch, v))
            .collect();
        DomainDataset {
            data,
            ..self.clone()
        }
    }

    /// Concatenates datasets with identical window shape and class count.
    pub fn concat(id: impl Into<String>, parts: &[&DomainDataset]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat: no datasets"))?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if (p.channels, p.length, p.num_classes) != (first.channels, first.length, first.num_classes) {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: vec![first.channels, first.length, first.num_classes],
                    rhs: vec![p.channels, p.length, p.num_classes],
                });
            }
            data.extend_from_slice(&p.data);
            labels.extend_from_slice(&p.labels);
        }
        DomainDataset::new(id, first.num_classes, first.channels, first.length, data, labels)
    }
}

impl<'a> Unlabeled<'a> {
    pub fn len(&self) -> usize {
        self.data.len() / (self.channels * self.length)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn window(&self, i: usize) -> &'a [f64] {
        let w = self.channels * self.length;
        &self.data[i * w..(i + 1) * w]
    }

    /// Gathers windows into a contiguous `[n, C, L]` buffer.
    pub fn gather(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.channels * self.length);
        for &i in indices {
            out.extend_from_slice(self.window(i));
        }
        out
    }
}
