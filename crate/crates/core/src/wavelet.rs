//! Multilevel discrete wavelet decomposition through an iterated two-channel
//! filter bank.
//!
//! A level splits its input into an approximation (low-pass, decimated by 2)
//! and a detail (high-pass, decimated by 2); the next level splits the
//! approximation again. After `L` levels a signal becomes the ordered set
//! `S_1 = D_1, ..., S_L = D_L, S_{L+1} = A_L`, each subsignal running at
//! `rate / 2^j`.
//!
//! Odd-length inputs are extended by one mirrored sample before filtering,
//! so every level emits `ceil(n / 2)` coefficients. Filter taps that overhang
//! the (even) extended input wrap around periodically, which keeps the
//! transform orthonormal for any orthonormal filter pair: energy is
//! preserved and the inverse is exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A uniformly sampled, named signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub name: String,
    pub values: Vec<f64>,
    /// Samples per unit time.
    pub rate: f64,
}

impl Signal {
    pub fn new(name: impl Into<String>, values: Vec<f64>, rate: f64) -> Result<Self> {
        let name = name.into();
        if values.len() < 2 {
            return Err(Error::invalid(format!("signal `{name}` needs at least 2 samples")));
        }
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::invalid(format!("signal `{name}` has non-positive rate {rate}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("signal `{name}` contains non-finite samples")));
        }
        Ok(Signal { name, values, rate })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.values.len() as f64 / self.rate
    }
}

/// Decomposition and reconstruction filters of an orthonormal wavelet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveletFilters {
    pub name: String,
    pub lowpass_dec: Vec<f64>,
    pub highpass_dec: Vec<f64>,
    pub lowpass_rec: Vec<f64>,
    pub highpass_rec: Vec<f64>,
}

impl WaveletFilters {
    pub fn haar() -> Self {
        let c = std::f64::consts::FRAC_1_SQRT_2;
        Self::from_lowpass("haar", vec![c, c]).expect("haar filters are orthonormal")
    }

    /// Daubechies 2 (four taps).
    pub fn db2() -> Self {
        let s3 = 3f64.sqrt();
        let d = 4.0 * 2f64.sqrt();
        let lo = vec![(1.0 + s3) / d, (3.0 + s3) / d, (3.0 - s3) / d, (1.0 - s3) / d];
        Self::from_lowpass("db2", lo).expect("db2 filters are orthonormal")
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "haar" | "db1" => Ok(Self::haar()),
            "db2" => Ok(Self::db2()),
            other => Err(Error::invalid(format!("unknown wavelet `{other}` (known: haar, db2)"))),
        }
    }

    /// Builds the full filter bank from orthonormal low-pass decomposition
    /// coefficients; the high-pass filter is the quadrature mirror
    /// `h[n] = (-1)^n g[N-1-n]` and reconstruction filters are time reversals.
    pub fn from_lowpass(name: impl Into<String>, lowpass: Vec<f64>) -> Result<Self> {
        let n = lowpass.len();
        if n < 2 || n % 2 != 0 {
            return Err(Error::invalid(format!("wavelet filter length must be even and >= 2, got {n}")));
        }
        let sum: f64 = lowpass.iter().sum();
        if (sum - std::f64::consts::SQRT_2).abs() > 1e-8 {
            return Err(Error::invalid(format!("low-pass taps must sum to sqrt(2), got {sum}")));
        }
        for shift in (0..n).step_by(2) {
            let dot: f64 = (0..n - shift).map(|i| lowpass[i] * lowpass[i + shift]).sum();
            let expected = if shift == 0 { 1.0 } else { 0.0 };
            if (dot - expected).abs() > 1e-8 {
                return Err(Error::invalid(format!(
                    "low-pass taps are not orthonormal at even shift {shift} (inner product {dot})"
                )));
            }
        }
        let highpass: Vec<f64> = (0..n)
            .map(|i| if i % 2 == 0 { lowpass[n - 1 - i] } else { -lowpass[n - 1 - i] })
            .collect();
        let lowpass_rec = lowpass.iter().rev().copied().collect();
        let highpass_rec = highpass.iter().rev().copied().collect();
        Ok(WaveletFilters {
            name: name.into(),
            lowpass_dec: lowpass,
            highpass_dec: highpass,
            lowpass_rec,
            highpass_rec,
        })
    }

    pub fn taps(&self) -> usize {
        self.lowpass_dec.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandKind {
    Detail,
    Approx,
}

/// Frequency interval `[low_hz, high_hz)` attached to a subsignal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub low_hz: f64,
    pub high_hz: f64,
}

impl Band {
    pub fn contains(&self, hz: f64) -> bool {
        hz >= self.low_hz && hz < self.high_hz
    }
}

impl std::fmt::Display for Band {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} - {} Hz", self.low_hz, self.high_hz)
    }
}

/// Band of detail level `level` (or of the level-`level` approximation).
///
/// Detail level `j` is labelled `(rate / 2^j, rate / 2^(j-1))` and the
/// approximation after `L` levels `(0, rate / 2^L)`. The top detail band is
/// labelled up to the sampling rate, not Nyquist.
pub fn band_label(rate: f64, level: usize, is_approx: bool) -> Band {
    let level = level.max(1) as i32;
    let high = rate / 2f64.powi(level - 1);
    if is_approx {
        Band { low_hz: 0.0, high_hz: high / 2.0 }
    } else {
        Band { low_hz: high / 2.0, high_hz: high }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subsignal {
    pub kind: BandKind,
    pub level: usize,
    /// Implied sampling rate of the coefficients, `source_rate / 2^level`.
    pub rate: f64,
    pub band: Band,
    pub values: Vec<f64>,
}

impl Subsignal {
    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// `S_1 ..= S_{L+1}` of one signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub name: String,
    pub rate: f64,
    pub levels: usize,
    pub wavelet: String,
    /// Input length at each level, `input_lengths[0]` being the signal length.
    pub input_lengths: Vec<usize>,
    pub subsignals: Vec<Subsignal>,
}

impl Decomposition {
    /// `S_j` with 1-based `j`; `S_{L+1}` is the approximation.
    pub fn subsignal(&self, j: usize) -> Option<&Subsignal> {
        j.checked_sub(1).and_then(|i| self.subsignals.get(i))
    }

    pub fn details(&self) -> &[Subsignal] {
        &self.subsignals[..self.levels]
    }

    pub fn approx(&self) -> &Subsignal {
        &self.subsignals[self.levels]
    }

    pub fn original_len(&self) -> usize {
        self.input_lengths[0]
    }
}

/// Largest level a signal of `len` samples admits: `floor(log2(len))`.
pub fn max_level(len: usize) -> usize {
    if len < 2 {
        0
    } else {
        (usize::BITS - 1 - len.leading_zeros()) as usize
    }
}

/// One analysis level: returns `(approximation, detail)`, each of length
/// `ceil(len / 2)`.
pub fn dwt_step(values: &[f64], filters: &WaveletFilters) -> Result<(Vec<f64>, Vec<f64>)> {
    if values.len() < 2 {
        return Err(Error::invalid(format!(
            "dwt_step needs at least 2 samples, got {}",
            values.len()
        )));
    }
    let mut ext = values.to_vec();
    if ext.len() % 2 == 1 {
        ext.push(*values.last().unwrap());
    }
    let n = ext.len();
    let half = n / 2;
    let mut approx = vec![0.0; half];
    let mut detail = vec![0.0; half];
    for k in 0..half {
        let (mut a, mut d) = (0.0, 0.0);
        for (i, (lo, hi)) in filters.lowpass_dec.iter().zip(&filters.highpass_dec).enumerate() {
            let x = ext[(2 * k + i) % n];
            a += lo * x;
            d += hi * x;
        }
        approx[k] = a;
        detail[k] = d;
    }
    Ok((approx, detail))
}

/// One synthesis level, the inverse of [`dwt_step`], truncated to `out_len`.
pub fn idwt_step(approx: &[f64], detail: &[f64], filters: &WaveletFilters, out_len: usize) -> Result<Vec<f64>> {
    if approx.len() != detail.len() {
        return Err(Error::shape("idwt_step", &[approx.len()], &[detail.len()]));
    }
    let n = approx.len() * 2;
    if out_len > n || out_len + 1 < n {
        return Err(Error::invalid(format!(
            "idwt_step: cannot produce {out_len} samples from {} coefficient pairs",
            approx.len()
        )));
    }
    let taps = filters.taps();
    let mut out = vec![0.0; n];
    for k in 0..approx.len() {
        for i in 0..taps {
            // dec[i] == rec[taps - 1 - i]
            let r = taps - 1 - i;
            out[(2 * k + i) % n] += approx[k] * filters.lowpass_rec[r] + detail[k] * filters.highpass_rec[r];
        }
    }
    out.truncate(out_len);
    Ok(out)
}

/// Decomposes `signal` into `levels` detail bands plus the final approximation.
pub fn decompose(signal: &Signal, filters: &WaveletFilters, levels: usize) -> Result<Decomposition> {
    let max = max_level(signal.len());
    if levels < 1 || levels > max {
        return Err(Error::Level { requested: levels, max });
    }
    let mut subsignals = Vec::with_capacity(levels + 1);
    let mut input_lengths = Vec::with_capacity(levels);
    let mut current = signal.values.clone();
    for level in 1..=levels {
        input_lengths.push(current.len());
        let (approx, detail) = dwt_step(&current, filters)?;
        subsignals.push(Subsignal {
            kind: BandKind::Detail,
            level,
            rate: signal.rate / 2f64.powi(level as i32),
            band: band_label(signal.rate, level, false),
            values: detail,
        });
        current = approx;
    }
    subsignals.push(Subsignal {
        kind: BandKind::Approx,
        level: levels,
        rate: signal.rate / 2f64.powi(levels as i32),
        band: band_label(signal.rate, levels, true),
        values: current,
    });
    Ok(Decomposition {
        name: signal.name.clone(),
        rate: signal.rate,
        levels,
        wavelet: filters.name.clone(),
        input_lengths,
        subsignals,
    })
}

/// Inverts [`decompose`].
pub fn reconstruct(decomposition: &Decomposition, filters: &WaveletFilters) -> Result<Vec<f64>> {
    let levels = decomposition.levels;
    if decomposition.subsignals.len() != levels + 1 || decomposition.input_lengths.len() != levels {
        return Err(Error::invalid("decomposition bookkeeping is inconsistent"));
    }
    let mut current = decomposition.approx().values.clone();
    for level in (1..=levels).rev() {
        let detail = &decomposition.subsignals[level - 1].values;
        current = idwt_step(&current, detail, filters, decomposition.input_lengths[level - 1])?;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const R2: f64 = std::f64::consts::SQRT_2;

    #[test]
    fn haar_constant_has_zero_detail() {
        let (_, d) = dwt_step(&[3.5; 4], &WaveletFilters::haar()).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
    }

    #[test]
    fn haar_hand_values() {
        let (a, d) = dwt_step(&[1.0, 2.0, 3.0, 4.0], &WaveletFilters::haar()).unwrap();
        // (1+2)/√2, (3+4)/√2 ; (1-2)/√2, (3-4)/√2
        assert_abs_diff_eq!(a[0], 3.0 / R2, epsilon = 1e-12);
        assert_abs_diff_eq!(a[1], 7.0 / R2, epsilon = 1e-12);
        assert_abs_diff_eq!(a[0], 2.1213, epsilon = 1e-4);
        assert_abs_diff_eq!(a[1], 4.9497, epsilon = 1e-4);
        assert_abs_diff_eq!(d[0], -0.7071, epsilon = 1e-4);
        assert_abs_diff_eq!(d[1], -0.7071, epsilon = 1e-4);

        let (a, d) = dwt_step(&[1.0, -1.0, 1.0, -1.0], &WaveletFilters::haar()).unwrap();
        assert_eq!(a, vec![0.0, 0.0]);
        assert_abs_diff_eq!(d[0].abs(), R2, epsilon = 1e-12);
        assert_abs_diff_eq!(d[1].abs(), R2, epsilon = 1e-12);
    }

    #[test]
    fn too_short_errors() {
        assert!(dwt_step(&[1.0], &WaveletFilters::haar()).is_err());
    }

    #[test]
    fn odd_length_pads_symmetric() {
        let (a, d) = dwt_step(&[1.0, 2.0, 3.0], &WaveletFilters::haar()).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(d[1], 0.0);
    }

    #[test]
    fn level_out_of_range_names_max() {
        let s = Signal::new("x", vec![0.0; 100], 10.0).unwrap();
        let err = decompose(&s, &WaveletFilters::haar(), 7).unwrap_err();
        assert!(matches!(err, Error::Level { requested: 7, max: 6 }));
        assert!(err.to_string().contains('6'));
        assert!(decompose(&s, &WaveletFilters::haar(), 0).is_err());
    }

    #[test]
    fn single_level_is_one_step() {
        let x = vec![1.0, 5.0, -2.0, 0.5, 3.0, 3.0];
        let s = Signal::new("x", x.clone(), 8.0).unwrap();
        let dec = decompose(&s, &WaveletFilters::haar(), 1).unwrap();
        let (a, d) = dwt_step(&x, &WaveletFilters::haar()).unwrap();
        assert_eq!(dec.subsignal(1).unwrap().values, d);
        assert_eq!(dec.subsignal(2).unwrap().values, a);
    }

    #[test]
    fn constant_signal_details_vanish() {
        let s = Signal::new("c", vec![2.0; 64], 64.0).unwrap();
        let dec = decompose(&s, &WaveletFilters::haar(), 5).unwrap();
        for d in dec.details() {
            assert!(d.values.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn single_level_roundtrip() {
        let s = Signal::new("x", vec![1.0, 2.0, 3.0, 4.0], 4.0).unwrap();
        let h = WaveletFilters::haar();
        let y = reconstruct(&decompose(&s, &h, 1).unwrap(), &h).unwrap();
        for (a, b) in y.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_decomposition_reconstructs_zero() {
        let s = Signal::new("x", vec![1.0; 32], 4.0).unwrap();
        let h = WaveletFilters::haar();
        let mut dec = decompose(&s, &h, 3).unwrap();
        dec.subsignals.iter_mut().for_each(|b| b.values.iter_mut().for_each(|v| *v = 0.0));
        assert!(reconstruct(&dec, &h).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn band_labels() {
        assert_eq!(band_label(50.0, 1, false), Band { low_hz: 25.0, high_hz: 50.0 });
        assert_eq!(band_label(50.0, 4, true), Band { low_hz: 0.0, high_hz: 3.125 });
        assert_eq!(band_label(64.0, 4, false), Band { low_hz: 4.0, high_hz: 8.0 });
    }

    #[test]
    fn subsignal_rates_halve() {
        let s = Signal::new("x", vec![0.5; 50], 50.0).unwrap();
        let dec = decompose(&s, &WaveletFilters::haar(), 4).unwrap();
        let rates: Vec<f64> = dec.subsignals.iter().map(|b| b.rate).collect();
        assert_eq!(rates, vec![25.0, 12.5, 6.25, 3.125, 3.125]);
        let lens: Vec<usize> = dec.subsignals.iter().map(|b| b.values.len()).collect();
        assert_eq!(lens, vec![25, 13, 7, 4, 4]);
    }

    #[test]
    fn rejects_non_orthonormal_filters() {
        assert!(WaveletFilters::from_lowpass("bad", vec![0.5, 0.5]).is_err());
        assert!(WaveletFilters::from_lowpass("bad", vec![1.0, 0.0, 0.0]).is_err());
        assert!(WaveletFilters::by_name("morlet").is_err());
    }

    #[test]
    fn db2_roundtrip_and_energy() {
        let x: Vec<f64> = (0..64).map(|i| ((i * 37 % 17) as f64).sin()).collect();
        let s = Signal::new("x", x.clone(), 64.0).unwrap();
        let f = WaveletFilters::db2();
        let dec = decompose(&s, &f, 4).unwrap();
        let e: f64 = dec.subsignals.iter().map(Subsignal::energy).sum();
        let e0: f64 = x.iter().map(|v| v * v).sum();
        assert_abs_diff_eq!(e, e0, epsilon = 1e-9 * e0);
        let y = reconstruct(&dec, &f).unwrap();
        for (a, b) in y.iter().zip(&x) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn mismatched_filters_break_reconstruction() {
        let x: Vec<f64> = (0..32).map(|i| (i as f64 * 0.7).cos()).collect();
        let s = Signal::new("x", x.clone(), 32.0).unwrap();
        let dec = decompose(&s, &WaveletFilters::db2(), 3).unwrap();
        let y = reconstruct(&dec, &WaveletFilters::haar()).unwrap();
        let err = y.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err > 1e-3);
    }

    proptest! {
        #[test]
        fn linearity(
            xs in proptest::collection::vec(-10.0..10.0f64, 37),
            ys in proptest::collection::vec(-10.0..10.0f64, 37),
            a in -3.0..3.0f64,
            b in -3.0..3.0f64,
        ) {
            let h = WaveletFilters::haar();
            let mix: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| a * x + b * y).collect();
            let dx = decompose(&Signal::new("x", xs, 1.0).unwrap(), &h, 4).unwrap();
            let dy = decompose(&Signal::new("y", ys, 1.0).unwrap(), &h, 4).unwrap();
            let dm = decompose(&Signal::new("m", mix, 1.0).unwrap(), &h, 4).unwrap();
            for j in 0..5 {
                for i in 0..dm.subsignals[j].values.len() {
                    let expect = a * dx.subsignals[j].values[i] + b * dy.subsignals[j].values[i];
                    prop_assert!((dm.subsignals[j].values[i] - expect).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn energy_is_conserved(k in 1usize..7, xs in proptest::collection::vec(-50.0..50.0f64, 256)) {
            let x = xs[..1 << (k + 1)].to_vec();
            let levels = 1 + k % max_level(x.len());
            let dec = decompose(&Signal::new("x", x.clone(), 1.0).unwrap(), &WaveletFilters::haar(), levels).unwrap();
            let total: f64 = x.iter().map(|v| v * v).sum();
            let parts: f64 = dec.subsignals.iter().map(Subsignal::energy).sum();
            prop_assert!((parts - total).abs() <= 1e-9 * total.max(1e-300));
        }

        #[test]
        fn length_bookkeeping(len in 2usize..300, pick in 0usize..100) {
            let s = Signal::new("x", vec![1.0; len], 1.0).unwrap();
            let levels = 1 + pick % max_level(len);
            let dec = decompose(&s, &WaveletFilters::haar(), levels).unwrap();
            for (j, sub) in dec.details().iter().enumerate() {
                prop_assert_eq!(sub.values.len(), len.div_ceil(1 << (j + 1)));
            }
            prop_assert_eq!(dec.approx().values.len(), dec.details()[levels - 1].values.len());
            let y = reconstruct(&dec, &WaveletFilters::haar()).unwrap();
            prop_assert_eq!(y.len(), len);
        }
    }
}
