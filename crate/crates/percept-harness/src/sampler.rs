//! I.i.d. categorical sampling over the configured data mix, with a
//! checkpointable random stream.

use crate::config::{ConfigError, Source};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Draws training-data sources i.i.d. from a categorical distribution. The
/// stream is an owned ChaCha generator so its exact position can be saved
/// and restored across checkpoints.
#[derive(Debug, Clone)]
pub struct MixSampler {
    entries: Vec<(Source, f64)>,
    /// Cumulative probabilities; the last entry is forced to exactly 1.0 so
    /// a unit draw can never fall off the end.
    cumulative: Vec<f64>,
    rng: ChaCha8Rng,
}

impl MixSampler {
    pub fn new(mix: &[(Source, f64)], seed: u64) -> Result<Self, ConfigError> {
        Self::with_rng(mix, ChaCha8Rng::seed_from_u64(seed))
    }

    /// Builds from an existing stream (used when restoring a checkpoint).
    pub fn with_rng(mix: &[(Source, f64)], rng: ChaCha8Rng) -> Result<Self, ConfigError> {
        if mix.is_empty() {
            return Err(ConfigError::EmptyMix);
        }
        let mut sum = 0.0;
        for &(source, p) in mix {
            if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                return Err(ConfigError::BadMixEntry { source, value: p });
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ConfigError::BadMixSum { sum });
        }
        let mut cumulative = Vec::with_capacity(mix.len());
        let mut acc = 0.0;
        for &(_, p) in mix {
            acc += p;
            cumulative.push(acc);
        }
        *cumulative.last_mut().expect("non-empty") = 1.0;
        Ok(Self { entries: mix.to_vec(), cumulative, rng })
    }

    /// One categorical draw. Zero-probability sources are never returned.
    pub fn draw(&mut self) -> Source {
        let u: f64 = self.rng.gen(); // [0, 1)
        for (i, &c) in self.cumulative.iter().enumerate() {
            if u < c {
                return self.entries[i].0;
            }
        }
        self.entries.last().expect("non-empty").0
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

impl Iterator for MixSampler {
    type Item = Source;
    fn next(&mut self) -> Option<Source> {
        Some(self.draw())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::stage2_mix;
    use std::collections::BTreeMap;

    #[test]
    fn single_source_every_step() {
        let mut s = MixSampler::new(&[(Source::Captions, 1.0)], 7).unwrap();
        assert!((0..500).all(|_| s.draw() == Source::Captions));
    }

    #[test]
    fn frequencies_converge_to_the_mix() {
        let mix = stage2_mix();
        let mut s = MixSampler::new(&mix, 1234).unwrap();
        let mut counts: BTreeMap<Source, usize> = BTreeMap::new();
        let n = 10_000;
        for _ in 0..n {
            *counts.entry(s.draw()).or_default() += 1;
        }
        for (source, p) in mix {
            let freq = *counts.get(&source).unwrap_or(&0) as f64 / n as f64;
            assert!(
                (freq - p).abs() <= 0.02,
                "{source}: frequency {freq:.4} vs target {p:.4} beyond ±2%"
            );
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let mix = stage2_mix();
        let a: Vec<Source> = MixSampler::new(&mix, 99).unwrap().take(300).collect();
        let b: Vec<Source> = MixSampler::new(&mix, 99).unwrap().take(300).collect();
        assert_eq!(a, b);
        let c: Vec<Source> = MixSampler::new(&mix, 100).unwrap().take(300).collect();
        assert_ne!(a, c, "different seeds should differ somewhere in 300 draws");
    }

    #[test]
    fn zero_probability_sources_never_drawn() {
        let mix = vec![(Source::Panoptic, 0.0), (Source::Referring, 1.0)];
        let mut s = MixSampler::new(&mix, 3).unwrap();
        assert!((0..2000).all(|_| s.draw() == Source::Referring));
    }

    #[test]
    fn empty_and_invalid_mixes_are_rejected() {
        assert!(matches!(MixSampler::new(&[], 0), Err(ConfigError::EmptyMix)));
        let bad = vec![(Source::Captions, 0.7)];
        assert!(matches!(MixSampler::new(&bad, 0), Err(ConfigError::BadMixSum { .. })));
        let nan = vec![(Source::Captions, f64::NAN), (Source::Panoptic, 1.0)];
        assert!(matches!(MixSampler::new(&nan, 0), Err(ConfigError::BadMixEntry { .. })));
    }

    #[test]
    fn stream_position_survives_a_snapshot() {
        let mix = stage2_mix();
        let mut s = MixSampler::new(&mix, 5).unwrap();
        for _ in 0..137 {
            s.draw();
        }
        let snapshot = s.rng().clone();
        let tail: Vec<Source> = (0..50).map(|_| s.draw()).collect();
        let mut restored = MixSampler::with_rng(&mix, snapshot).unwrap();
        let replay: Vec<Source> = (0..50).map(|_| restored.draw()).collect();
        assert_eq!(tail, replay);
    }
}
