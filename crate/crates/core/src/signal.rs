//! Fixed-rate waveforms and the signal arithmetic shared by every module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::SAMPLE_RATE;

/// Single-channel time-domain signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn from_samples(samples: Vec<f64>) -> Self {
        Self::new(samples, SAMPLE_RATE)
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self::new(self.samples.iter().map(|v| v * gain).collect(), self.sample_rate)
    }

    /// Sample-wise sum. Both operands must share length and rate.
    pub fn add(&self, other: &Waveform) -> Result<Self> {
        check_compatible(self, other)?;
        let samples = self.samples.iter().zip(&other.samples).map(|(a, b)| a + b).collect();
        Ok(Self::new(samples, self.sample_rate))
    }

    pub fn sub(&self, other: &Waveform) -> Result<Self> {
        check_compatible(self, other)?;
        let samples = self.samples.iter().zip(&other.samples).map(|(a, b)| a - b).collect();
        Ok(Self::new(samples, self.sample_rate))
    }

    pub fn is_silent(&self) -> bool {
        self.samples.iter().all(|&v| v == 0.0)
    }
}

pub(crate) fn check_compatible(a: &Waveform, b: &Waveform) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.sample_rate != b.sample_rate {
        return Err(Error::Shape(format!(
            "sample rates differ: {} vs {}",
            a.sample_rate, b.sample_rate
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sum of squared samples.
pub fn energy(w: &Waveform) -> f64 {
    dot(&w.samples, &w.samples)
}

/// Energy ratio in dB between two signals, `10 log10(E_a / E_b)`.
pub fn snr_db(a: &Waveform, b: &Waveform) -> f64 {
    10.0 * (energy(a) / energy(b)).log10()
}

/// Gain `g` such that `10 log10(E(reference) / E(g * other)) = snr_db`.
pub fn snr_gain(reference: &Waveform, other: &Waveform, snr_db: f64) -> Result<f64> {
    let e_ref = energy(reference);
    let e_other = energy(other);
    if e_ref <= 0.0 {
        return Err(Error::ZeroEnergy("reference has zero energy".into()));
    }
    if e_other <= 0.0 {
        return Err(Error::ZeroEnergy("interferer has zero energy".into()));
    }
    Ok((e_ref / (e_other * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// Rescale `other` so that `reference` sits `snr_db` above it.
pub fn rescale_to_snr(reference: &Waveform, other: &Waveform, snr_db: f64) -> Result<Waveform> {
    Ok(other.scaled(snr_gain(reference, other, snr_db)?))
}

/// Scale-invariant signal-to-distortion ratio in dB.
///
/// The reference is scaled by `alpha = <estimate, reference> / ||reference||^2`
/// and compared against the residual. An exactly zero residual yields
/// `f64::INFINITY`.
pub fn si_sdr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::Shape(format!(
            "estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    si_sdr_slices(&estimate.samples, &reference.samples)
}

pub fn si_sdr_slices(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    let ref_energy = dot(reference, reference);
    if ref_energy <= 0.0 {
        return Err(Error::ZeroEnergy("SI-SDR reference has zero energy".into()));
    }
    let alpha = dot(estimate, reference) / ref_energy;
    let mut target = 0.0;
    let mut residual = 0.0;
    for (e, r) in estimate.iter().zip(reference) {
        let t = alpha * r;
        target += t * t;
        let d = t - e;
        residual += d * d;
    }
    if residual == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (target / residual).log10())
}

/// Project an estimate pair onto the set of pairs that sum to `x`, splitting
/// the residual equally between the two slots.
pub fn mixture_consistency_project(
    est_t: &Waveform,
    est_o: &Waveform,
    x: &Waveform,
) -> Result<(Waveform, Waveform)> {
    check_compatible(est_t, x)?;
    check_compatible(est_o, x)?;
    let mut t = Vec::with_capacity(x.len());
    let mut o = Vec::with_capacity(x.len());
    for ((a, b), m) in est_t.samples.iter().zip(&est_o.samples).zip(&x.samples) {
        let half = 0.5 * (m - (a + b));
        t.push(a + half);
        o.push(b + half);
    }
    Ok((Waveform::new(t, x.sample_rate), Waveform::new(o, x.sample_rate)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn w(v: &[f64]) -> Waveform {
        Waveform::from_samples(v.to_vec())
    }

    #[test]
    fn energy_examples() {
        assert_eq!(energy(&Waveform::zeros(16, 8000)), 0.0);
        assert_eq!(energy(&w(&[1.0, -1.0, 1.0, -1.0])), 4.0);
        let a = w(&[0.3, -0.7, 1.1]);
        assert_abs_diff_eq!(energy(&a.scaled(2.0)), 4.0 * energy(&a), epsilon = 1e-12);
    }

    #[test]
    fn snr_gain_examples() {
        let a = w(&[1.0, 0.0, -1.0]);
        assert_abs_diff_eq!(snr_gain(&a, &a, 0.0).unwrap(), 1.0, epsilon = 1e-12);
        let r = w(&[2.0, 0.0]);
        let o = w(&[0.0, 1.0]);
        assert_abs_diff_eq!(snr_gain(&r, &o, 0.0).unwrap(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(snr_gain(&a, &a, 10.0).unwrap(), 10f64.powf(-0.5), epsilon = 1e-12);
    }

    #[test]
    fn zero_energy_clip_is_rejected() {
        let z = Waveform::zeros(4, 8000);
        let a = w(&[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(rescale_to_snr(&z, &a, 0.0), Err(Error::ZeroEnergy(_))));
        assert!(matches!(rescale_to_snr(&a, &z, 0.0), Err(Error::ZeroEnergy(_))));
    }

    #[test]
    fn si_sdr_examples() {
        let s = w(&[0.5, -1.0, 2.0, 0.25]);
        assert_eq!(si_sdr(&s, &s).unwrap(), f64::INFINITY);
        assert_eq!(si_sdr(&s.scaled(2.0), &s).unwrap(), f64::INFINITY);
        assert_abs_diff_eq!(si_sdr(&w(&[1.0, 1.0]), &w(&[1.0, 0.0])).unwrap(), 0.0, epsilon = 1e-12);
        assert!(si_sdr(&w(&[0.0, 1.0]), &w(&[1.0, 0.0])).unwrap() < -100.0);
        assert!(matches!(si_sdr(&s, &Waveform::zeros(4, 8000)), Err(Error::ZeroEnergy(_))));
    }

    #[test]
    fn consistency_examples() {
        let (t, o) = mixture_consistency_project(&w(&[0.5]), &w(&[0.5]), &w(&[2.0])).unwrap();
        assert_eq!((t.samples[0], o.samples[0]), (1.0, 1.0));
        let x = w(&[1.0, -2.0, 0.5]);
        let (t, o) = mixture_consistency_project(&x, &Waveform::zeros(3, 8000), &x).unwrap();
        assert_eq!(t, x);
        assert!(o.is_silent());
        let a = w(&[0.25, 0.5, -1.0]);
        let b = x.sub(&a).unwrap();
        let (t, o) = mixture_consistency_project(&a, &b, &x).unwrap();
        assert_eq!(t, a);
        assert_eq!(o, b);
    }

    #[test]
    fn mismatched_lengths_error() {
        assert!(mixture_consistency_project(&w(&[1.0]), &w(&[1.0, 2.0]), &w(&[1.0])).is_err());
        assert!(si_sdr(&w(&[1.0]), &w(&[1.0, 2.0])).is_err());
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-1.0f64..1.0, n)
    }

    proptest! {
        #[test]
        fn rescale_recovers_snr(a in vec_strategy(64), b in vec_strategy(64), snr in -20.0f64..30.0) {
            let (a, b) = (w(&a), w(&b));
            prop_assume!(energy(&a) > 1e-6 && energy(&b) > 1e-6);
            let scaled = rescale_to_snr(&a, &b, snr).unwrap();
            prop_assert!((snr_db(&a, &scaled) - snr).abs() < 1e-6);
        }

        #[test]
        fn consistency_sums_and_is_idempotent(a in vec_strategy(32), b in vec_strategy(32), x in vec_strategy(32)) {
            let (a, b, x) = (w(&a), w(&b), w(&x));
            let (t, o) = mixture_consistency_project(&a, &b, &x).unwrap();
            let sum = t.add(&o).unwrap();
            for (s, m) in sum.samples.iter().zip(&x.samples) {
                prop_assert!((s - m).abs() <= 1e-12 * (1.0 + m.abs()));
            }
            let (t2, o2) = mixture_consistency_project(&t, &o, &x).unwrap();
            for (p, q) in t.samples.iter().zip(&t2.samples).chain(o.samples.iter().zip(&o2.samples)) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }

        #[test]
        fn si_sdr_scale_invariant(e in vec_strategy(48), r in vec_strategy(48), gain in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0]) {
            let (e, r) = (w(&e), w(&r));
            prop_assume!(energy(&r) > 1e-6);
            let base = si_sdr(&e, &r).unwrap();
            let scaled = si_sdr(&e.scaled(gain), &r).unwrap();
            prop_assert!((base - scaled).abs() < 1e-9);
        }
    }
}
