//! Record-and-replay augmentation for vector samples.
//!
//! A policy is drawn once per sample during candidate selection; every random
//! choice is written into the policy so the exact same transform can be
//! replayed later without any hidden randomness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One recorded transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    /// Additive Gaussian noise (family-wide per-dimension std) from a seed.
    Jitter { seed: u64 },
    /// Zero a contiguous window of `mask_width` coordinates starting here.
    CropMask { offset: u64 },
    /// Reverse coordinate order.
    Flip,
    /// Multiply every coordinate.
    Scale { factor: f64 },
}

impl Transform {
    fn kind(&self) -> u8 {
        match self {
            Transform::Jitter { .. } => 0,
            Transform::CropMask { .. } => 1,
            Transform::Flip => 2,
            Transform::Scale { .. } => 3,
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Transform::Flip => 0,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub transform: Transform,
    pub apply: bool,
}

/// Ordered transform records for one sample. Empty means identity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugPolicy {
    pub records: Vec<TransformRecord>,
}

impl AugPolicy {
    pub fn identity() -> Self {
        AugPolicy::default()
    }

    pub fn is_identity(&self) -> bool {
        self.records.iter().all(|r| !r.apply)
    }

    /// Recorded scalars: one apply flag per record plus its parameters.
    pub fn scalar_count(&self) -> usize {
        self.records.iter().map(|r| 1 + r.transform.param_count()).sum()
    }

    /// Byte length of [`AugPolicy::encode`].
    pub fn encoded_len(&self) -> usize {
        1 + self
            .records
            .iter()
            .map(|r| 2 + 8 * r.transform.param_count())
            .sum::<usize>()
    }

    /// `u8 count`, then per record `u8 kind, u8 apply, params (8 bytes LE each)`.
    pub fn encode(&self, out: &mut Vec<u8>) {
        out.push(self.records.len() as u8);
        for r in &self.records {
            out.push(r.transform.kind());
            out.push(u8::from(r.apply));
            match &r.transform {
                Transform::Jitter { seed } => out.extend_from_slice(&seed.to_le_bytes()),
                Transform::CropMask { offset } => out.extend_from_slice(&offset.to_le_bytes()),
                Transform::Flip => {}
                Transform::Scale { factor } => out.extend_from_slice(&factor.to_le_bytes()),
            }
        }
    }

    /// Decodes one policy from the front of `bytes`; returns it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(AugPolicy, usize)> {
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or_else(|| Error::Decode("truncated augmentation policy".into()))?;
            pos += n;
            Ok(s)
        };
        let count = take(1)?[0] as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let head = take(2)?;
            let (kind, apply) = (head[0], head[1]);
            let apply = match apply {
                0 => false,
                1 => true,
                other => return Err(Error::Decode(format!("apply flag {other}"))),
            };
            let mut word = || -> Result<[u8; 8]> { Ok(take(8)?.try_into().expect("8 bytes")) };
            let transform = match kind {
                0 => Transform::Jitter {
                    seed: u64::from_le_bytes(word()?),
                },
                1 => Transform::CropMask {
                    offset: u64::from_le_bytes(word()?),
                },
                2 => Transform::Flip,
                3 => {
                    let factor = f64::from_le_bytes(word()?);
                    if !factor.is_finite() {
                        return Err(Error::Decode("non-finite scale factor".into()));
                    }
                    Transform::Scale { factor }
                }
                other => return Err(Error::Decode(format!("unknown transform kind {other}"))),
            };
            records.push(TransformRecord { transform, apply });
        }
        Ok((AugPolicy { records }, pos))
    }
}

/// The family policies are drawn from, plus the fixed (unrecorded) settings
/// needed to replay them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugFamily {
    pub enabled: bool,
    pub jitter_prob: f64,
    /// Per-dimension jitter std.
    pub jitter_std: f64,
    pub mask_prob: f64,
    pub mask_width: usize,
    pub flip_prob: f64,
    pub scale_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugFamily {
    fn default() -> Self {
        AugFamily {
            enabled: true,
            jitter_prob: 0.5,
            jitter_std: 0.1,
            mask_prob: 0.5,
            mask_width: 4,
            flip_prob: 0.5,
            scale_prob: 1.0,
            scale_min: 0.9,
            scale_max: 1.1,
        }
    }
}

impl AugFamily {
    pub fn disabled() -> Self {
        AugFamily {
            enabled: false,
            ..AugFamily::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.jitter_prob, self.mask_prob, self.flip_prob, self.scale_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("augmentation probabilities must lie in [0, 1]"));
        }
        if !(self.jitter_std >= 0.0) || !(self.scale_min > 0.0) || self.scale_min > self.scale_max {
            return Err(Error::config("bad augmentation jitter/scale settings"));
        }
        Ok(())
    }

    /// Scalars recorded per policy by this family.
    pub fn scalars_per_policy(&self) -> usize {
        if self.enabled {
            7
        } else {
            0
        }
    }

    /// Encoded bytes per policy.
    pub fn bytes_per_policy(&self) -> usize {
        if self.enabled {
            1 + (2 + 8) + (2 + 8) + 2 + (2 + 8)
        } else {
            1
        }
    }

    /// Draws a policy for a sample of width `dim`.
    pub fn sample_policy(&self, dim: usize, rng: &mut impl Rng) -> AugPolicy {
        if !self.enabled {
            return AugPolicy::identity();
        }
        let jitter = TransformRecord {
            apply: rng.random_bool(self.jitter_prob),
            transform: Transform::Jitter { seed: rng.random() },
        };
        let width = self.mask_width.min(dim);
        let mask = TransformRecord {
            apply: width > 0 && rng.random_bool(self.mask_prob),
            transform: Transform::CropMask {
                offset: rng.random_range(0..=(dim - width) as u64),
            },
        };
        let flip = TransformRecord {
            apply: rng.random_bool(self.flip_prob),
            transform: Transform::Flip,
        };
        let scale = TransformRecord {
            apply: rng.random_bool(self.scale_prob),
            transform: Transform::Scale {
                factor: if self.scale_max > self.scale_min {
                    rng.random_range(self.scale_min..=self.scale_max)
                } else {
                    self.scale_min
                },
            },
        };
        AugPolicy {
            records: vec![flip, mask, scale, jitter],
        }
    }

    /// Replays `policy` on one sample. Pure in `(x, policy)`.
    pub fn apply_policy(&self, x: &[f64], policy: &AugPolicy) -> Result<Vec<f64>> {
        let mut out = x.to_vec();
        for rec in policy.records.iter().filter(|r| r.apply) {
            match &rec.transform {
                Transform::Jitter { seed } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                    for v in &mut out {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v += self.jitter_std * z;
                    }
                }
                Transform::CropMask { offset } => {
                    let start = usize::try_from(*offset)
                        .map_err(|_| Error::Decode("mask offset overflow".into()))?;
                    let end = start + self.mask_width;
                    if end > out.len() {
                        return Err(Error::Decode(format!(
                            "mask window {start}..{end} exceeds width {}",
                            out.len()
                        )));
                    }
                    out[start..end].iter_mut().for_each(|v| *v = 0.0);
                }
                Transform::Flip => out.reverse(),
                Transform::Scale { factor } => out.iter_mut().for_each(|v| *v *= factor),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn x() -> Vec<f64> {
        (0..12).map(|i| i as f64 * 0.5 - 2.0).collect()
    }

    #[test]
    fn disabled_family_yields_identity() {
        let fam = AugFamily::disabled();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = fam.sample_policy(12, &mut rng);
        assert!(p.records.is_empty());
        assert_eq!(fam.apply_policy(&x(), &p).unwrap(), x());
    }

    #[test]
    fn same_rng_state_same_policy() {
        let fam = AugFamily::default();
        let a = fam.sample_policy(12, &mut ChaCha8Rng::seed_from_u64(9));
        let b = fam.sample_policy(12, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn default_family_records_seven_scalars() {
        let fam = AugFamily::default();
        let p = fam.sample_policy(12, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(p.scalar_count(), 7);
        assert_eq!(fam.scalars_per_policy(), 7);
        assert!(p.scalar_count() <= 30);
        assert_eq!(p.encoded_len(), fam.bytes_per_policy());
    }

    #[test]
    fn flip_twice_is_identity() {
        let fam = AugFamily::default();
        let flip = TransformRecord {
            transform: Transform::Flip,
            apply: true,
        };
        let p = AugPolicy {
            records: vec![flip.clone(), flip],
        };
        assert_eq!(fam.apply_policy(&x(), &p).unwrap(), x());
    }

    #[test]
    fn mask_outside_width_is_decode_error() {
        let fam = AugFamily::default();
        let p = AugPolicy {
            records: vec![TransformRecord {
                transform: Transform::CropMask { offset: 10 },
                apply: true,
            }],
        };
        assert!(matches!(fam.apply_policy(&x(), &p), Err(Error::Decode(_))));
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(AugPolicy::decode(&[]).is_err());
        assert!(AugPolicy::decode(&[1, 9, 1]).is_err());
        assert!(AugPolicy::decode(&[1, 0, 1, 0, 0]).is_err());
        assert!(AugPolicy::decode(&[1, 2, 7]).is_err());
    }

    #[test]
    fn replay_is_bit_identical_over_many_draws() {
        let fam = AugFamily::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..1000 {
            let sample: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
            let p = fam.sample_policy(sample.len(), &mut rng);
            let first = fam.apply_policy(&sample, &p).unwrap();
            let mut buf = Vec::new();
            p.encode(&mut buf);
            let (decoded, used) = AugPolicy::decode(&buf).unwrap();
            assert_eq!(used, buf.len());
            let replay = fam.apply_policy(&sample, &decoded).unwrap();
            assert!(first.iter().zip(&replay).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(seed in any::<u64>(), dim in 4usize..40) {
            let fam = AugFamily::default();
            let p = fam.sample_policy(dim, &mut ChaCha8Rng::seed_from_u64(seed));
            let mut buf = Vec::new();
            p.encode(&mut buf);
            prop_assert_eq!(buf.len(), p.encoded_len());
            let (q, _) = AugPolicy::decode(&buf).unwrap();
            prop_assert_eq!(q, p);
        }
    }
}
