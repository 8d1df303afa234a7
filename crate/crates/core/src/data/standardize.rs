use super::dataset::DomainDataset;
use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Pooled statistics over every timestep of every window. The std is the
    /// population std, floored at [`STD_FLOOR`].
    pub fn from_datasets(sources: &[&DomainDataset]) -> Result<Self> {
        let first = sources
            .iter()
            .find(|d| !d.is_empty())
            .ok_or_else(|| Error::invalid("standardize: empty statistics source"))?;
        let ch = first.channels();
        let l = first.length();
        let mut sum = vec![0.0; ch];
        let mut count = 0usize;
        for d in sources {
            if d.channels() != ch {
                return Err(Error::Shape {
                    op: "standardize",
                    lhs: vec![ch],
                    rhs: vec![d.channels()],
                });
            }
            for (i, v) in d.raw().iter().enumerate() {
                sum[(i / l) % ch] += v;
            }
            count += d.len() * d.length();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; ch];
        for d in sources {
            for (i, v) in d.raw().iter().enumerate() {
                let c = (i / d.length()) % ch;
                sq[c] += (v - mean[c]).powi(2);
            }
        }
        let std = sq
            .iter()
            .map(|s| (s / count as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(ChannelStats { mean, std })
    }

    pub fn apply(&self, d: &DomainDataset) -> Result<DomainDataset> {
        if d.channels() != self.mean.len() {
            return Err(Error::Shape {
                op: "standardize",
                lhs: vec![self.mean.len()],
                rhs: vec![d.channels()],
            });
        }
        Ok(d.map_values(|c, v| (v - self.mean[c]) / self.std[c]))
    }
}

/// Transforms every dataset with statistics computed from `stats_source` only.
pub fn standardize(datasets: &[DomainDataset], stats_source: &[&DomainDataset]) -> Result<(Vec<DomainDataset>, ChannelStats)> {
    let stats = ChannelStats::from_datasets(stats_source)?;
    let out = datasets.iter().map(|d| stats.apply(d)).collect::<Result<_>>()?;
    Ok((out, stats))
}
