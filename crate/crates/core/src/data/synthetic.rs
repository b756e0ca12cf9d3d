//! Planted-signal generator.
//!
//! Every informative stream carries a per-sample latent amplitude. The target
//! is a fixed readout of one summary statistic per informative stream,
//! computed from the generated series itself, so it is a function of the
//! planted streams alone. Noise streams are white.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{MtsDataset, TaskKind, Targets};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SignalFamily {
    /// `z · sin(2πt / period + φ)` with a per-stream phase φ.
    Sinusoid { period: f64 },
    /// Level `z` plus stationary AR(1) noise.
    Ar1 { phi: f64, innovation: f64 },
    /// `z · (2t / (T - 1) - 1)`.
    Trend,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetRule {
    /// Signed sum of the per-stream statistics.
    Linear,
    /// Sum of products of consecutive informative statistics.
    Interaction,
}

/// A noise-corrupted copy of another stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RedundantStream {
    pub stream: usize,
    pub source: usize,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub seq_len: usize,
    pub streams: usize,
    /// Planted stream indices.
    pub informative: Vec<usize>,
    /// Assigned to informative streams in turn.
    pub families: Vec<SignalFamily>,
    pub rule: TargetRule,
    pub task: TaskKind,
    /// Standard deviation of noise added to the (unit-scale) target.
    pub target_noise: f64,
    /// White noise added to informative streams.
    pub observation_noise: f64,
    pub redundant: Vec<RedundantStream>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            samples: 2000,
            seq_len: 24,
            streams: 16,
            informative: vec![2, 5, 9],
            families: vec![
                SignalFamily::Sinusoid { period: 8.0 },
                SignalFamily::Ar1 { phi: 0.7, innovation: 0.3 },
                SignalFamily::Trend,
            ],
            rule: TargetRule::Linear,
            task: TaskKind::Regression,
            target_noise: 0.1,
            observation_noise: 0.1,
            redundant: Vec::new(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let d = self.streams;
        if self.samples == 0 || self.seq_len == 0 || d == 0 {
            return Err(Error::Config("samples, seq_len and streams must be positive".into()));
        }
        if self.informative.is_empty() {
            return Err(Error::Config("at least one informative stream is required".into()));
        }
        if self.informative.len() > d {
            return Err(Error::Config(format!("{} informative streams exceed d = {d}", self.informative.len())));
        }
        let mut s = self.informative.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.informative.len() || s.iter().any(|&j| j >= d) {
            return Err(Error::Config(format!("informative set {:?} must be unique indices below {d}", self.informative)));
        }
        if self.families.is_empty() {
            return Err(Error::Config("no signal families given".into()));
        }
        for f in &self.families {
            match *f {
                SignalFamily::Sinusoid { period } if period <= 0.0 => {
                    return Err(Error::Config("sinusoid period must be positive".into()));
                }
                SignalFamily::Ar1 { phi, innovation } if phi.abs() >= 1.0 || innovation < 0.0 => {
                    return Err(Error::Config("AR(1) needs |phi| < 1 and a non-negative innovation".into()));
                }
                _ => {}
            }
        }
        if self.target_noise < 0.0 || self.observation_noise < 0.0 {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        let mut copies = Vec::new();
        for r in &self.redundant {
            if r.stream >= d || r.source >= d || r.stream == r.source || r.noise < 0.0 {
                return Err(Error::Config(format!("invalid redundant stream {r:?}")));
            }
            if s.contains(&r.stream) || copies.contains(&r.stream) {
                return Err(Error::Config(format!("redundant stream {} collides with another stream role", r.stream)));
            }
            copies.push(r.stream);
        }
        if self.redundant.iter().any(|r| copies.contains(&r.source)) {
            return Err(Error::Config("a redundant stream cannot copy another copy".into()));
        }
        Ok(())
    }

    /// Planted indices, ascending.
    pub fn planted(&self) -> Vec<usize> {
        let mut s = self.informative.clone();
        s.sort_unstable();
        s
    }
}

fn pattern(family: SignalFamily, len: usize, phase: f64) -> Option<Vec<f64>> {
    match family {
        SignalFamily::Sinusoid { period } => {
            Some((0..len).map(|t| (2.0 * PI * t as f64 / period + phase).sin()).collect())
        }
        SignalFamily::Trend if len > 1 => Some((0..len).map(|t| 2.0 * t as f64 / (len - 1) as f64 - 1.0).collect()),
        SignalFamily::Trend => Some(vec![1.0]),
        SignalFamily::Ar1 { .. } => None,
    }
}

/// Summary statistic the target reads from one informative stream: the
/// least-squares amplitude along the stream's pattern, or the mean level for
/// AR(1) streams.
pub(crate) fn summary_statistic(series: &[f64], pattern: Option<&[f64]>) -> f64 {
    match pattern {
        Some(p) => {
            let pp: f64 = p.iter().map(|v| v * v).sum();
            if pp > 0.0 {
                series.iter().zip(p).map(|(x, p)| x * p).sum::<f64>() / pp
            } else {
                series.iter().sum::<f64>() / series.len() as f64
            }
        }
        None => series.iter().sum::<f64>() / series.len() as f64,
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Per-stream constants drawn before any sample.
struct Planted {
    stream: usize,
    family: SignalFamily,
    pattern: Option<Vec<f64>>,
    weight: f64,
}

fn draw_planted(spec: &SyntheticSpec) -> (Vec<Planted>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let planted = spec
        .informative
        .iter()
        .enumerate()
        .map(|(i, &stream)| {
            let family = spec.families[i % spec.families.len()];
            let phase = rng.random_range(0.0..2.0 * PI);
            let weight = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            Planted { stream, family, pattern: pattern(family, spec.seq_len, phase), weight }
        })
        .collect();
    (planted, rng)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<MtsDataset> {
    spec.validate()?;
    let (n, len, d) = (spec.samples, spec.seq_len, spec.streams);
    let (planted, mut rng) = draw_planted(spec);

    let mut data = vec![0.0; n * len * d];
    let mut y = Vec::with_capacity(n);
    let mut series = vec![0.0; len];
    let mut stats = Vec::with_capacity(planted.len());
    for sample in 0..n {
        let block = &mut data[sample * len * d..(sample + 1) * len * d];
        // Noise first for every stream, then informative streams overwrite.
        for v in block.iter_mut() {
            *v = normal(&mut rng);
        }
        stats.clear();
        for p in &planted {
            let z = normal(&mut rng);
            match p.family {
                SignalFamily::Ar1 { phi, innovation } => {
                    let mut e = innovation / (1.0 - phi * phi).sqrt() * normal(&mut rng);
                    for s in series.iter_mut() {
                        *s = z + e;
                        e = phi * e + innovation * normal(&mut rng);
                    }
                }
                _ => {
                    let pat = p.pattern.as_ref().expect("patterned family");
                    series.iter_mut().zip(pat).for_each(|(s, q)| *s = z * q);
                }
            }
            for s in series.iter_mut() {
                *s += spec.observation_noise * normal(&mut rng);
            }
            for (t, &s) in series.iter().enumerate() {
                block[t * d + p.stream] = s;
            }
            stats.push(summary_statistic(&series, p.pattern.as_deref()));
        }
        for r in &spec.redundant {
            for t in 0..len {
                block[t * d + r.stream] = block[t * d + r.source] + r.noise * normal(&mut rng);
            }
        }
        let clean = readout(spec.rule, &planted, &stats);
        y.push(clean + spec.target_noise * normal(&mut rng));
    }

    let x = Tensor::new(vec![n, len, d], data)?;
    let targets = match spec.task {
        TaskKind::Regression => Targets::Regression(y),
        TaskKind::Classification => {
            Targets::Classes { labels: y.iter().map(|&v| usize::from(v > 0.0)).collect(), classes: 2 }
        }
    };
    let mut ds = MtsDataset::new(x, targets, MtsDataset::default_names(d))?;
    ds.planted = Some(spec.planted());
    Ok(ds)
}

fn readout(rule: TargetRule, planted: &[Planted], stats: &[f64]) -> f64 {
    let m = stats.len();
    match rule {
        TargetRule::Linear => {
            planted.iter().zip(stats).map(|(p, s)| p.weight * s).sum::<f64>() / (m as f64).sqrt()
        }
        TargetRule::Interaction if m == 1 => stats[0],
        TargetRule::Interaction => {
            stats.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / ((m - 1) as f64).sqrt()
        }
    }
}

/// The noiseless target of each sample, recomputed from the planted streams
/// of a generated dataset.
pub fn planted_readout(spec: &SyntheticSpec, dataset: &MtsDataset) -> Result<Vec<f64>> {
    spec.validate()?;
    let (planted, _) = draw_planted(spec);
    let len = dataset.seq_len();
    Ok((0..dataset.len())
        .map(|i| {
            let stats: Vec<f64> = planted
                .iter()
                .map(|p| {
                    let series: Vec<f64> = (0..len).map(|t| dataset.value(i, t, p.stream)).collect();
                    summary_statistic(&series, p.pattern.as_deref())
                })
                .collect();
            readout(spec.rule, &planted, &stats)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec { samples: 50, seq_len: 10, streams: 6, informative: vec![1, 4], seed, ..Default::default() }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_synthetic(&small(3)).unwrap();
        assert_eq!(a, generate_synthetic(&small(3)).unwrap());
        assert_ne!(a, generate_synthetic(&small(4)).unwrap());
        assert_eq!(a.planted, Some(vec![1, 4]));
    }

    #[test]
    fn noiseless_target_is_reproducible_from_planted_streams() {
        for rule in [TargetRule::Linear, TargetRule::Interaction] {
            let spec = SyntheticSpec { target_noise: 0.0, rule, informative: vec![0, 2, 5], ..small(8) };
            let ds = generate_synthetic(&spec).unwrap();
            let expected = planted_readout(&spec, &ds).unwrap();
            assert_eq!(ds.targets().as_f64(), expected);
        }
    }

    #[test]
    fn target_ignores_noise_streams() {
        let spec = SyntheticSpec { target_noise: 0.0, ..small(2) };
        let mut ds = generate_synthetic(&spec).unwrap();
        let before = planted_readout(&spec, &ds).unwrap();
        let x = ds.x.data_mut();
        for (i, v) in x.iter_mut().enumerate() {
            let j = i % 6;
            if j != 1 && j != 4 {
                *v = 1e6;
            }
        }
        assert_eq!(planted_readout(&spec, &ds).unwrap(), before);
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_synthetic(&SyntheticSpec { informative: vec![0; 7], ..small(0) }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { informative: vec![6], ..small(0) }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { informative: vec![], ..small(0) }).is_err());
        let r = RedundantStream { stream: 1, source: 4, noise: 0.1 };
        assert!(generate_synthetic(&SyntheticSpec { redundant: vec![r], ..small(0) }).is_err());
    }

    #[test]
    fn redundant_stream_tracks_its_source() {
        let r = RedundantStream { stream: 3, source: 4, noise: 0.0 };
        let ds = generate_synthetic(&SyntheticSpec { redundant: vec![r], ..small(1) }).unwrap();
        for t in 0..10 {
            assert_eq!(ds.value(7, t, 3), ds.value(7, t, 4));
        }
    }

    #[test]
    fn classification_labels_are_binary() {
        let ds = generate_synthetic(&SyntheticSpec { task: TaskKind::Classification, ..small(5) }).unwrap();
        let counts = ds.class_counts().unwrap();
        assert_eq!(counts.len(), 2);
        assert!(counts.iter().all(|&c| c > 5));
    }
}
