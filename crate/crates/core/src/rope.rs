//! Rotary position embedding over interleaved pairs `(2k, 2k + 1)`.

use crate::error::{Error, Result};
use crate::tensor::{dot, Real};

pub const DEFAULT_BASE: f64 = 10_000.0;

/// Per-pair inverse frequencies plus a cos/sin cache for integer positions.
///
/// Fractional positions (position interpolation) and integers past the
/// cache are evaluated directly; both routes use the same f64 angle.
#[derive(Clone, Debug)]
pub struct RotaryTable {
    head_dim: usize,
    base: f64,
    inv_freq: Vec<f64>,
    max_pos: usize,
    // [pos][pair] -> (cos, sin)
    cache: Vec<(f64, f64)>,
}

impl RotaryTable {
    pub fn new(head_dim: usize, base: f64, max_pos: usize) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::DimensionMismatch(format!(
                "rotary head_dim must be even and positive, got {head_dim}"
            )));
        }
        if !(base.is_finite() && base > 0.0) {
            return Err(Error::InvalidArgument(format!("rotary base {base}")));
        }
        let pairs = head_dim / 2;
        let inv_freq: Vec<f64> = (0..pairs)
            .map(|k| base.powf(-(2.0 * k as f64) / head_dim as f64))
            .collect();
        let mut cache = Vec::with_capacity(max_pos * pairs);
        for pos in 0..max_pos {
            for f in &inv_freq {
                let (sin, cos) = (pos as f64 * f).sin_cos();
                cache.push((cos, sin));
            }
        }
        Ok(Self {
            head_dim,
            base,
            inv_freq,
            max_pos,
            cache,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn inv_freq(&self) -> &[f64] {
        &self.inv_freq
    }

    #[inline]
    fn cos_sin(&self, pos: f64, pair: usize) -> (f64, f64) {
        if pos >= 0.0 && pos.fract() == 0.0 && (pos as usize) < self.max_pos {
            self.cache[pos as usize * self.inv_freq.len() + pair]
        } else {
            let (sin, cos) = (pos * self.inv_freq[pair]).sin_cos();
            (cos, sin)
        }
    }

    /// Rotates `v` in place by `pos`; `sign = -1` applies the inverse rotation.
    #[inline]
    pub(crate) fn rotate_in_place<T: Real>(&self, v: &mut [T], pos: f64, sign: f64) {
        debug_assert_eq!(v.len(), self.head_dim);
        for pair in 0..self.inv_freq.len() {
            let (cos, sin) = self.cos_sin(pos, pair);
            let (cos, sin) = (T::of(cos), T::of(sign * sin));
            let (a, b) = (v[2 * pair], v[2 * pair + 1]);
            v[2 * pair] = a * cos - b * sin;
            v[2 * pair + 1] = a * sin + b * cos;
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.head_dim {
            return Err(Error::DimensionMismatch(format!(
                "vector of length {len} against rotary head_dim {}",
                self.head_dim
            )));
        }
        Ok(())
    }
}

/// `f(v, pos)`: each pair `(v[2k], v[2k+1])` rotated by `pos · base^(−2k/d)`.
pub fn apply_rotary<T: Real>(v: &[T], pos: f64, table: &RotaryTable) -> Result<Vec<T>> {
    table.check_len(v.len())?;
    let mut out = v.to_vec();
    table.rotate_in_place(&mut out, pos, 1.0);
    Ok(out)
}

/// `⟨f(q, pq), f(k, pk)⟩`; depends on the positions only through `pq − pk`.
pub fn rotary_inner<T: Real>(q: &[T], k: &[T], pq: f64, pk: f64, table: &RotaryTable) -> Result<T> {
    if q.len() != k.len() {
        return Err(Error::DimensionMismatch(format!(
            "query length {} vs key length {}",
            q.len(),
            k.len()
        )));
    }
    let q = apply_rotary(q, pq, table)?;
    let k = apply_rotary(k, pk, table)?;
    Ok(dot(&q, &k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn norm(v: &[f64]) -> f64 {
        dot(v, v).sqrt()
    }

    #[test]
    fn zero_position_is_identity() {
        let table = RotaryTable::new(8, DEFAULT_BASE, 16).unwrap();
        let v = vec![0.3, -1.2, 2.0, 0.1, 0.0, 5.0, -0.7, 1.1];
        assert_eq!(apply_rotary(&v, 0.0, &table).unwrap(), v);
    }

    #[test]
    fn quarter_turn_in_two_dimensions() {
        let table = RotaryTable::new(2, DEFAULT_BASE, 0).unwrap();
        let out = apply_rotary(&[1.0f64, 0.0], std::f64::consts::FRAC_PI_2, &table).unwrap();
        assert!(out[0].abs() < 1e-15);
        assert!((out[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cached_and_direct_angles_agree() {
        let cached = RotaryTable::new(16, DEFAULT_BASE, 64).unwrap();
        let direct = RotaryTable::new(16, DEFAULT_BASE, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_vec(&mut rng, 16);
        for pos in [0.0, 1.0, 17.0, 63.0] {
            assert_eq!(
                apply_rotary(&v, pos, &cached).unwrap(),
                apply_rotary(&v, pos, &direct).unwrap()
            );
        }
    }

    #[test]
    fn shift_invariance_example() {
        let table = RotaryTable::new(32, DEFAULT_BASE, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = random_vec(&mut rng, 32);
        let k = random_vec(&mut rng, 32);
        let a = rotary_inner(&q, &k, 5.0, 2.0, &table).unwrap();
        let b = rotary_inner(&q, &k, 13.0, 10.0, &table).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn equal_positions_give_plain_dot() {
        let table = RotaryTable::new(32, DEFAULT_BASE, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = random_vec(&mut rng, 32);
        let k = random_vec(&mut rng, 32);
        for p in [0.0, 7.0, 1234.5] {
            let r = rotary_inner(&q, &k, p, p, &table).unwrap();
            assert!((r - dot(&q, &k)).abs() < 1e-12);
        }
    }

    #[test]
    fn fractional_positions_are_distinct() {
        let table = RotaryTable::new(4, DEFAULT_BASE, 4).unwrap();
        let q = [1.0f64, 0.5, -0.25, 2.0];
        let k = [0.5, 1.0, 1.5, -1.0];
        let half = rotary_inner(&q, &k, 0.5, 0.0, &table).unwrap();
        let one = rotary_inner(&q, &k, 1.0, 0.0, &table).unwrap();
        assert!(half.is_finite());
        assert!((half - one).abs() > 1e-6);
    }

    #[test]
    fn rejects_odd_and_mismatched_lengths() {
        assert!(RotaryTable::new(3, DEFAULT_BASE, 0).is_err());
        let table = RotaryTable::new(4, DEFAULT_BASE, 0).unwrap();
        assert!(matches!(
            apply_rotary(&[1.0f64, 2.0], 1.0, &table),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            rotary_inner(&[1.0f64; 4], &[1.0; 2], 0.0, 0.0, &table),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn frequencies_follow_base_power() {
        let table = RotaryTable::new(8, DEFAULT_BASE, 0).unwrap();
        for (k, f) in table.inv_freq().iter().enumerate() {
            let want = DEFAULT_BASE.powf(-(2.0 * k as f64) / 8.0);
            assert!((f - want).abs() <= 1e-15 * want);
        }
    }

    proptest! {
        #[test]
        fn norm_preserved(seed in any::<u64>(), pos in -5000.0f64..5000.0) {
            let table = RotaryTable::new(16, DEFAULT_BASE, 0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = random_vec(&mut rng, 16);
            let r = apply_rotary(&v, pos, &table).unwrap();
            prop_assert!((norm(&r) - norm(&v)).abs() < 1e-12);
        }

        #[test]
        fn relative_only(seed in any::<u64>(), pq in 0.0f64..600.0, pk in 0.0f64..600.0, delta in -300.0f64..300.0) {
            let table = RotaryTable::new(16, DEFAULT_BASE, 256).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_vec(&mut rng, 16);
            let k = random_vec(&mut rng, 16);
            let a = rotary_inner(&q, &k, pq, pk, &table).unwrap();
            let b = rotary_inner(&q, &k, pq + delta, pk + delta, &table).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn linear_in_vector(seed in any::<u64>(), alpha in -4.0f64..4.0, pos in 0.0f64..1000.0) {
            let table = RotaryTable::new(8, DEFAULT_BASE, 0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = random_vec(&mut rng, 8);
            let scaled: Vec<f64> = v.iter().map(|x| alpha * x).collect();
            let a = apply_rotary(&scaled, pos, &table).unwrap();
            let b = apply_rotary(&v, pos, &table).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - alpha * y).abs() < 1e-12);
            }
        }
    }
}
