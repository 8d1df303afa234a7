//! Synthetic multi-domain sensing data.
//!
//! Every class owns a template per channel (a sum of sinusoids). A domain
//! distorts all templates the same way: per-channel gain and offset, a
//! rotation mixing channels (device orientation), a time-warp factor (pace),
//! zero-order-hold decimation (sampling rate) and its own noise level.
//! Instances add jitter on top.

use std::f64::consts::TAU;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::dataset::DomainDataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

/// Strength of each per-domain distortion; zero disables it.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Heterogeneity {
    pub gain: f64,
    pub offset: f64,
    pub rotation: f64,
    pub warp: f64,
    pub decimation: f64,
    pub noise: f64,
}

impl Heterogeneity {
    pub fn uniform(s: f64) -> Self {
        Heterogeneity {
            gain: s,
            offset: s,
            rotation: s,
            warp: s,
            decimation: s,
            noise: s,
        }
    }

    pub fn none() -> Self {
        Self::uniform(0.0)
    }
}

impl Default for Heterogeneity {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub domains: usize,
    pub num_classes: usize,
    pub channels: usize,
    pub length: usize,
    pub instances_per_domain: usize,
    pub seed: u64,
    pub heterogeneity: Heterogeneity,
    /// Base observation noise shared by all domains.
    pub base_noise: f64,
    /// Per-instance fraction of a random other class's template mixed in.
    pub class_overlap: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            domains: 8,
            num_classes: 6,
            channels: 3,
            length: 128,
            instances_per_domain: 1200,
            seed: 0,
            heterogeneity: Heterogeneity::uniform(1.0),
            base_noise: 0.3,
            class_overlap: 0.35,
        }
    }
}

struct Component {
    freq: f64,
    amp: f64,
    phase: f64,
}

struct DomainTransform {
    gain: Vec<f64>,
    offset: Vec<f64>,
    mix: Vec<f64>,
    warp: f64,
    decimation: usize,
    noise: f64,
}

fn normal(rng: &mut Rng, sd: f64) -> f64 {
    if sd == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sd).unwrap().sample(rng)
}

/// Row-major `c x c` rotation built from Givens rotations on adjacent
/// channel pairs, each with angle `N(0, scale)`.
fn random_rotation(rng: &mut Rng, c: usize, scale: f64) -> Vec<f64> {
    let mut m = vec![0.0; c * c];
    (0..c).for_each(|i| m[i * c + i] = 1.0);
    for p in 0..c.saturating_sub(1) {
        for q in p + 1..c {
            let a = normal(rng, scale);
            let (s, co) = a.sin_cos();
            for r in 0..c {
                let (x, y) = (m[r * c + p], m[r * c + q]);
                m[r * c + p] = co * x - s * y;
                m[r * c + q] = s * x + co * y;
            }
        }
    }
    m
}

fn domain_transform(rng: &mut Rng, cfg: &SyntheticConfig) -> DomainTransform {
    let h = cfg.heterogeneity;
    let c = cfg.channels;
    let gain = (0..c).map(|_| normal(rng, 0.35 * h.gain).exp()).collect();
    let offset = (0..c).map(|_| normal(rng, 0.8 * h.offset)).collect();
    let mix = random_rotation(rng, c, 0.6 * h.rotation);
    let warp = normal(rng, 0.2 * h.warp).exp();
    let decimation = if rng.random::<f64>() < (0.5 * h.decimation).min(1.0) {
        rng.random_range(2..=4)
    } else {
        1
    };
    let noise = cfg.base_noise * (1.0 + h.noise * rng.random::<f64>());
    DomainTransform {
        gain,
        offset,
        mix,
        warp,
        decimation,
        noise,
    }
}

fn eval_template(comps: &[Component], t: f64, phase_jitter: f64) -> f64 {
    comps
        .iter()
        .map(|k| k.amp * (TAU * k.freq * t + k.phase + phase_jitter).sin())
        .sum()
}

/// Generates `cfg.domains` datasets named `d0`, `d1`, ...
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<DomainDataset>> {
    if cfg.num_classes < 2 || cfg.channels < 1 || cfg.length < 8 {
        return Err(Error::invalid("synthetic data needs K >= 2, C >= 1, L >= 8"));
    }
    if cfg.domains == 0 {
        return Err(Error::invalid("synthetic data needs at least one domain"));
    }
    if cfg.num_classes > cfg.instances_per_domain {
        return Err(Error::invalid(format!(
            "{} classes cannot be covered by {} instances per domain",
            cfg.num_classes, cfg.instances_per_domain
        )));
    }
    let (k, c, l) = (cfg.num_classes, cfg.channels, cfg.length);
    let mut rng = stream(cfg.seed, &[0]);
    let templates: Vec<Vec<Vec<Component>>> = (0..k)
        .map(|_| {
            (0..c)
                .map(|_| {
                    (0..3)
                        .map(|_| Component {
                            freq: rng.random_range(1.0..6.0),
                            amp: rng.random_range(0.3..1.0),
                            phase: rng.random_range(0.0..TAU),
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut out = Vec::with_capacity(cfg.domains);
    for d in 0..cfg.domains {
        let mut drng = stream(cfg.seed, &[1, d as u64]);
        let tf = domain_transform(&mut drng, cfg);
        let n = cfg.instances_per_domain;
        let mut data = Vec::with_capacity(n * c * l);
        let mut labels = Vec::with_capacity(n);
        let mut raw = vec![0.0; c * l];
        for i in 0..n {
            let y = i % k;
            let other = (y + 1 + drng.random_range(0..k - 1)) % k;
            let blend = cfg.class_overlap * drng.random::<f64>();
            let shift = drng.random_range(-0.03..0.03);
            let scale = 1.0 + normal(&mut drng, 0.1);
            let pace = tf.warp * (1.0 + normal(&mut drng, 0.03));
            for ch in 0..c {
                let pj = normal(&mut drng, 0.25);
                for t in 0..l {
                    let held = t - t % tf.decimation;
                    let tt = (held as f64 / l as f64 + shift) * pace;
                    let v = (1.0 - blend) * eval_template(&templates[y][ch], tt, pj)
                        + blend * eval_template(&templates[other][ch], tt, pj);
                    raw[ch * l + t] = scale * v;
                }
            }
            for ch in 0..c {
                for t in 0..l {
                    let mixed: f64 = (0..c).map(|j| tf.mix[ch * c + j] * raw[j * l + t]).sum();
                    let noise = normal(&mut drng, tf.noise);
                    data.push(tf.gain[ch] * mixed + tf.offset[ch] + noise);
                }
            }
            labels.push(y);
        }
        out.push(DomainDataset::new(format!("d{d}"), k, c, l, data, labels)?);
    }
    Ok(out)
}
