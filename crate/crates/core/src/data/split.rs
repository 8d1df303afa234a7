use rand::seq::SliceRandom;

use super::dataset::DomainDataset;
use crate::error::{Error, Result};
use crate::rng::{stream, tag};

/// Per-class fraction of instances to drop.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DropSpec {
    pub rates: Vec<(usize, f64)>,
}

impl DropSpec {
    /// Drops `rate` of the instances of classes `0..num_classes / 2`.
    pub fn lower_half(num_classes: usize, rate: f64) -> Self {
        DropSpec {
            rates: (0..num_classes / 2).map(|c| (c, rate)).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rates.iter().all(|&(_, r)| r == 0.0)
    }

    fn validate(&self) -> Result<()> {
        for &(c, r) in &self.rates {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::invalid(format!("drop rate {r} for class {c} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Keeps the first `ceil((1 - rate) * count)` members of each affected
    /// class, preserving the order of `indices`.
    pub fn apply(&self, indices: &[usize], labels: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let mut budget: std::collections::HashMap<usize, usize> = Default::default();
        for &(c, r) in &self.rates {
            let count = indices.iter().filter(|&&i| labels[i] == c).count();
            budget.insert(c, ((1.0 - r) * count as f64 - 1e-9).ceil() as usize);
        }
        Ok(indices
            .iter()
            .copied()
            .filter(|&i| match budget.get_mut(&labels[i]) {
                Some(left) if *left > 0 => {
                    *left -= 1;
                    true
                }
                Some(_) => false,
                None => true,
            })
            .collect())
    }
}

/// Disjoint adaptation-train and validation index sets over one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

const VAL_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;

/// Draws a validation subset determined only by `(domain, seed, n_val)`,
/// then an adaptation-train subset from the remaining instances.
pub fn sample_target_sets(
    target: &DomainDataset,
    n_train: usize,
    n_val: usize,
    seed: u64,
    val_drop: Option<&DropSpec>,
) -> Result<TargetSplit> {
    let n = target.len();
    if n_train + n_val > n {
        return Err(Error::invalid(format!(
            "domain {}: need {} train + {} validation instances, have {n}",
            target.domain_id(),
            n_train,
            n_val
        )));
    }
    let dom = tag(target.domain_id());
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream(seed, &[dom, VAL_STREAM]));
    let mut val = perm[..n_val].to_vec();
    let mut rest = perm[n_val..].to_vec();
    rest.shuffle(&mut stream(seed, &[dom, TRAIN_STREAM, n_train as u64]));
    let train = rest[..n_train].to_vec();
    if let Some(spec) = val_drop {
        val = spec.apply(&val, target.labels())?;
    }
    Ok(TargetSplit { train, val })
}

/// Splits each source domain into a training part and a hold-out part that
/// no training procedure sees.
pub fn holdout_split(d: &DomainDataset, holdout_fraction: f64, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::invalid(format!("hold-out fraction {holdout_fraction} outside (0, 1)")));
    }
    let n = d.len();
    let n_hold = ((n as f64 * holdout_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    if n < 2 {
        return Err(Error::invalid(format!("domain {}: too small to hold out", d.domain_id())));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream(seed, &[tag(d.domain_id()), 3]));
    let (hold, train) = perm.split_at(n_hold);
    Ok((d.subset(train)?, d.subset(hold)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn domain(n: usize, k: usize) -> DomainDataset {
        DomainDataset::new("t", k, 1, 2, vec![0.0; n * 2], (0..n).map(|i| i % k).collect()).unwrap()
    }

    #[test]
    fn disjoint_subsets_of_exact_size() {
        let d = domain(1000, 6);
        let s = sample_target_sets(&d, 50, 500, 4, None).unwrap();
        assert_eq!(s.train.len(), 50);
        assert_eq!(s.val.len(), 500);
        let v: std::collections::HashSet<_> = s.val.iter().collect();
        assert!(s.train.iter().all(|i| !v.contains(i)));
    }

    #[test]
    fn same_seed_same_sets_and_val_independent_of_train_size() {
        let d = domain(1000, 6);
        let a = sample_target_sets(&d, 50, 300, 9, None).unwrap();
        let b = sample_target_sets(&d, 50, 300, 9, None).unwrap();
        let c = sample_target_sets(&d, 400, 300, 9, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.val, c.val);
    }

    #[test]
    fn insufficient_instances_reports_counts() {
        let d = domain(100, 2);
        let msg = sample_target_sets(&d, 60, 50, 0, None).unwrap_err().to_string();
        assert!(msg.contains("60") && msg.contains("50") && msg.contains("100"), "{msg}");
    }

    #[test]
    fn drop_keeps_ceiling_of_remaining_fraction() {
        let d = domain(1200, 6);
        let base = sample_target_sets(&d, 0, 500, 1, None).unwrap();
        let spec = DropSpec::lower_half(6, 0.8);
        let s = sample_target_sets(&d, 0, 500, 1, Some(&spec)).unwrap();
        for c in 0..6 {
            let before = base.val.iter().filter(|&&i| d.label(i) == c).count();
            let after = s.val.iter().filter(|&&i| d.label(i) == c).count();
            if c < 3 {
                assert_eq!(after, (2 * before).div_ceil(10));
            } else {
                assert_eq!(after, before);
            }
        }
    }
}
