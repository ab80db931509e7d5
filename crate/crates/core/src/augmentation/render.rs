//! Deterministic synthetic "speech": each phoneme owns a spectral prototype
//! and a transition vector; a rendering repeats prototypes for sampled
//! durations, then adds a per-rendering speaker offset and per-frame noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, PhonemeSequence, DEFAULT_FRAME_RATE_HZ};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderProfile {
    /// Std of i.i.d. Gaussian noise added to every bin of every frame.
    pub noise_std: f64,
    /// Std of one Gaussian offset vector shared by all frames of a rendering.
    pub speaker_std: f64,
    pub min_duration: usize,
    pub max_duration: usize,
    /// Overrides sampled durations when set.
    pub fixed_duration: Option<usize>,
    /// Weight of the within-phoneme transition ramp, from `+c` at the first
    /// frame of a phoneme to `-c` at its last.
    pub coarticulation: f64,
}

impl Default for RenderProfile {
    fn default() -> Self {
        Self {
            noise_std: 0.5,
            speaker_std: 0.3,
            min_duration: 3,
            max_duration: 8,
            fixed_duration: None,
            coarticulation: 0.5,
        }
    }
}

impl RenderProfile {
    /// No noise, no speaker offset, no transition ramp.
    pub fn clean(fixed_duration: Option<usize>) -> Self {
        Self { noise_std: 0.0, speaker_std: 0.0, coarticulation: 0.0, fixed_duration, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.min_duration >= 1
            && self.min_duration <= self.max_duration
            && self.fixed_duration != Some(0)
            && self.noise_std >= 0.0
            && self.speaker_std >= 0.0
            && self.coarticulation.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid render profile {self:?}")))
        }
    }
}

/// Per-phoneme prototypes and transition vectors, `N(0, 1)` draws from the
/// corpus seed.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    feat_dim: usize,
    prototypes: Vec<Vec<f64>>,
    transitions: Vec<Vec<f64>>,
}

impl PrototypeBank {
    pub fn new(inventory_size: usize, feat_dim: usize, corpus_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(corpus_seed);
        let mut draw = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..feat_dim).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
        };
        let prototypes = draw(inventory_size);
        let transitions = draw(inventory_size);
        Self { feat_dim, prototypes, transitions }
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn inventory_size(&self) -> usize {
        self.prototypes.len()
    }

    pub fn prototype(&self, id: usize) -> &[f64] {
        &self.prototypes[id]
    }

    /// Durations drawn for `p` under `seed`: the first values drawn from the
    /// rendering's generator.
    pub fn durations(&self, p: &PhonemeSequence, seed: u64, profile: &RenderProfile) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_durations(&mut rng, p.len(), profile)
    }

    pub fn render<S: Scalar>(&self, p: &PhonemeSequence, seed: u64, profile: &RenderProfile) -> Result<FeatureMatrix<S>> {
        profile.validate()?;
        PhonemeSequence::new(p.ids.clone(), self.inventory_size())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let durations = sample_durations(&mut rng, p.len(), profile);
        let speaker: Vec<f64> =
            (0..self.feat_dim).map(|_| profile.speaker_std * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        let total: usize = durations.iter().sum();
        let mut data = Vec::with_capacity(total * self.feat_dim);
        for (&id, &dur) in p.ids.iter().zip(&durations) {
            for j in 0..dur {
                let ramp = if dur == 1 { 0.0 } else { 1.0 - 2.0 * j as f64 / (dur - 1) as f64 };
                for b in 0..self.feat_dim {
                    let mut v = self.prototypes[id][b];
                    if profile.coarticulation != 0.0 {
                        v += profile.coarticulation * ramp * self.transitions[id][b];
                    }
                    if profile.speaker_std != 0.0 {
                        v += speaker[b];
                    }
                    if profile.noise_std != 0.0 {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        v += profile.noise_std * n;
                    }
                    data.push(S::of(v));
                }
            }
        }
        FeatureMatrix::new(Tensor::matrix(total, self.feat_dim, data)?, DEFAULT_FRAME_RATE_HZ)
    }
}

fn sample_durations<R: Rng>(rng: &mut R, n: usize, profile: &RenderProfile) -> Vec<usize> {
    match profile.fixed_duration {
        Some(d) => vec![d; n],
        None => (0..n).map(|_| rng.random_range(profile.min_duration..=profile.max_duration)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::edit_distance::edit_distance;
    use proptest::prelude::{prop_assert_ne, prop_assume, proptest, ProptestConfig};

    fn seq(ids: &[usize]) -> PhonemeSequence {
        PhonemeSequence { ids: ids.to_vec() }
    }

    #[test]
    fn same_seed_same_matrix() {
        let bank = PrototypeBank::new(39, 40, 1);
        let p = seq(&[3, 7, 7, 12]);
        let profile = RenderProfile::default();
        let a = bank.render::<f64>(&p, 99, &profile).unwrap();
        let b = bank.render::<f64>(&p, 99, &profile).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, bank.render::<f64>(&p, 100, &profile).unwrap());
    }

    #[test]
    fn clean_rendering_repeats_prototypes() {
        let bank = PrototypeBank::new(39, 8, 2);
        let p = seq(&[5, 1]);
        let m = bank.render::<f64>(&p, 3, &RenderProfile::clean(Some(4))).unwrap();
        assert_eq!(m.num_frames(), 8);
        for t in 0..8 {
            let id = if t < 4 { 5 } else { 1 };
            assert_eq!(m.frames().row(t), bank.prototype(id));
        }
    }

    #[test]
    fn frame_count_is_sum_of_drawn_durations() {
        let bank = PrototypeBank::new(39, 4, 2);
        let p = seq(&[0, 1, 2, 3, 4, 5]);
        let profile = RenderProfile::default();
        for seed in 0..20 {
            // the generator draws durations first
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let expected: usize = (0..p.len()).map(|_| rng.random_range(3..=8usize)).sum();
            let m = bank.render::<f64>(&p, seed, &profile).unwrap();
            assert_eq!(m.num_frames(), expected);
            assert_eq!(bank.durations(&p, seed, &profile).iter().sum::<usize>(), expected);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let bank = PrototypeBank::new(39, 4, 2);
        assert!(bank.render::<f64>(&seq(&[40]), 0, &RenderProfile::default()).is_err());
        let bad = RenderProfile { min_duration: 5, max_duration: 2, ..RenderProfile::default() };
        assert!(bank.render::<f64>(&seq(&[1]), 0, &bad).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn distinct_sequences_render_differently(
            a in proptest::collection::vec(0usize..6, 1..5),
            b in proptest::collection::vec(0usize..6, 1..5),
            seed in 0u64..1000,
        ) {
            prop_assume!(edit_distance(&a, &b) >= 1);
            let bank = PrototypeBank::new(39, 6, 4);
            let profile = RenderProfile { noise_std: 0.0, speaker_std: 0.0, ..RenderProfile::default() };
            let ma = bank.render::<f64>(&seq(&a), seed, &profile).unwrap();
            let mb = bank.render::<f64>(&seq(&b), seed, &profile).unwrap();
            prop_assert_ne!(ma, mb);
        }
    }
}
