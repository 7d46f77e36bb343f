//! Raw-signal ingestion: band-pass filtering, five-band decomposition,
//! 1-second windowing and differential-entropy features.
//!
//! All filtering and statistics run in f64; only the emitted feature
//! matrices are converted to the model scalar.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::data_model::Sample;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A multichannel raw recording (C channels × T samples, microvolts).
#[derive(Debug, Clone)]
pub struct RawRecording {
    pub data: Tensor<f64>,
    pub sample_rate_hz: f64,
    pub subject_id: u32,
    pub label: usize,
    pub dataset_id: String,
}

impl RawRecording {
    pub fn channels(&self) -> usize {
        self.data.rows()
    }

    pub fn samples(&self) -> usize {
        self.data.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate_hz <= 0.0 {
            return Err(Error::config("sample rate must be positive"));
        }
        if (self.samples() as f64) < self.sample_rate_hz {
            return Err(Error::config(format!(
                "recording too short: {} samples at {} Hz leaves no 1-s window",
                self.samples(),
                self.sample_rate_hz
            )));
        }
        if !self.data.all_finite() {
            return Err(Error::numeric("recording contains non-finite samples"));
        }
        Ok(())
    }
}

/// One frequency band of the five-band decomposition.
#[derive(Debug, Clone)]
pub struct BandSpec {
    pub name: String,
    pub low_hz: f64,
    pub high_hz: f64,
}

impl BandSpec {
    pub fn new(name: &str, low_hz: f64, high_hz: f64) -> Self {
        BandSpec {
            name: name.to_string(),
            low_hz,
            high_hz,
        }
    }

    pub fn validate(&self, fs: f64) -> Result<()> {
        if !(0.0 < self.low_hz && self.low_hz < self.high_hz && self.high_hz < fs / 2.0) {
            return Err(Error::config(format!(
                "band {} ({}-{} Hz) invalid for fs={} Hz",
                self.name, self.low_hz, self.high_hz, fs
            )));
        }
        Ok(())
    }
}

/// The delta/theta/alpha/beta/gamma split.
pub fn default_bands() -> Vec<BandSpec> {
    vec![
        BandSpec::new("delta", 1.0, 4.0),
        BandSpec::new("theta", 4.0, 8.0),
        BandSpec::new("alpha", 8.0, 14.0),
        BandSpec::new("beta", 14.0, 30.0),
        BandSpec::new("gamma", 30.0, 50.0),
    ]
}

/// Second-order section, denominator normalized to a0 = 1.
#[derive(Debug, Clone, Copy)]
pub struct Sos {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

/// Design a digital Butterworth band-pass of the given analog prototype
/// order as a cascade of second-order sections (bilinear transform with
/// frequency prewarping; unity gain at the warped center frequency).
pub fn design_butterworth_bandpass(
    low_hz: f64,
    high_hz: f64,
    order: usize,
    fs: f64,
) -> Result<Vec<Sos>> {
    if order < 1 {
        return Err(Error::config("filter order must be >= 1"));
    }
    if !(0.0 < low_hz && low_hz < high_hz && high_hz < fs / 2.0) {
        return Err(Error::config(format!(
            "band edges {low_hz}-{high_hz} Hz invalid for fs={fs} Hz"
        )));
    }

    // Analog prototype poles on the unit circle, left half-plane.
    let n = order;
    let proto: Vec<Complex64> = (0..n)
        .map(|k| {
            let theta = PI * (2.0 * k as f64 + n as f64 + 1.0) / (2.0 * n as f64);
            Complex64::new(theta.cos(), theta.sin())
        })
        .collect();

    // Prewarped band edges.
    let k2 = 2.0 * fs;
    let w1 = k2 * (PI * low_hz / fs).tan();
    let w2 = k2 * (PI * high_hz / fs).tan();
    let bw = w2 - w1;
    let w0 = (w1 * w2).sqrt();

    // Lowpass -> bandpass: each prototype pole yields two analog poles.
    let mut analog_poles = Vec::with_capacity(2 * n);
    for p in &proto {
        let half = p * (bw / 2.0);
        let disc = (half * half - Complex64::new(w0 * w0, 0.0)).sqrt();
        analog_poles.push(half + disc);
        analog_poles.push(half - disc);
    }

    // Bilinear transform.
    let digital_poles: Vec<Complex64> = analog_poles
        .iter()
        .map(|s| (Complex64::new(k2, 0.0) + s) / (Complex64::new(k2, 0.0) - s))
        .collect();
    for p in &digital_poles {
        if p.norm() >= 1.0 {
            return Err(Error::numeric(format!(
                "unstable filter design: pole magnitude {:.6} >= 1 for band {}-{} Hz at fs={} Hz",
                p.norm(),
                low_hz,
                high_hz,
                fs
            )));
        }
    }

    // Group into conjugate pairs (and leftover real poles pairwise).
    let tol = 1e-9;
    let mut complex_up: Vec<Complex64> = digital_poles
        .iter()
        .copied()
        .filter(|p| p.im > tol)
        .collect();
    let mut reals: Vec<f64> = digital_poles
        .iter()
        .filter(|p| p.im.abs() <= tol)
        .map(|p| p.re)
        .collect();
    complex_up.sort_by(|x, y| x.re.partial_cmp(&y.re).unwrap().then(x.im.partial_cmp(&y.im).unwrap()));
    reals.sort_by(|x, y| x.partial_cmp(y).unwrap());

    let mut sections = Vec::with_capacity(n);
    for p in complex_up {
        // (z - p)(z - conj(p)) = z^2 - 2 Re(p) z + |p|^2
        sections.push(Sos {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -2.0 * p.re, p.norm_sqr()],
        });
    }
    let mut i = 0;
    while i + 1 < reals.len() {
        let (r1, r2) = (reals[i], reals[i + 1]);
        sections.push(Sos {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -(r1 + r2), r1 * r2],
        });
        i += 2;
    }
    debug_assert_eq!(sections.len(), n, "bandpass of order n has n sections");

    // Normalize gain to 1 at the digital center frequency.
    let wc = 2.0 * (w0 / k2).atan();
    let resp = frequency_response(&sections, wc);
    let gain = resp.norm();
    if !(gain.is_finite() && gain > 0.0) {
        return Err(Error::numeric("degenerate center-frequency gain"));
    }
    let per_section = (1.0 / gain).powf(1.0 / n as f64);
    for s in &mut sections {
        for b in &mut s.b {
            *b *= per_section;
        }
    }
    Ok(sections)
}

/// Complex response of an SOS cascade at angular frequency `w` (rad/sample).
pub fn frequency_response(sections: &[Sos], w: f64) -> Complex64 {
    let z1 = Complex64::new(w.cos(), -w.sin()); // z^-1
    let z2 = z1 * z1;
    let mut h = Complex64::new(1.0, 0.0);
    for s in sections {
        let num = Complex64::new(s.b[0], 0.0) + z1 * s.b[1] + z2 * s.b[2];
        let den = Complex64::new(s.a[0], 0.0) + z1 * s.a[1] + z2 * s.a[2];
        h *= num / den;
    }
    h
}

fn sos_filter_in_place(sections: &[Sos], x: &mut [f64]) {
    for s in sections {
        let (b0, b1, b2) = (s.b[0], s.b[1], s.b[2]);
        let (a1, a2) = (s.a[1], s.a[2]);
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for v in x.iter_mut() {
            let y = b0 * *v + s1;
            s1 = b1 * *v - a1 * y + s2;
            s2 = b2 * *v - a2 * y;
            *v = y;
        }
    }
}

/// Zero-phase (forward-backward) application of an SOS cascade.
pub fn filtfilt(sections: &[Sos], x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    sos_filter_in_place(sections, &mut y);
    y.reverse();
    sos_filter_in_place(sections, &mut y);
    y.reverse();
    y
}

/// Zero-phase Butterworth band-pass of one signal.
pub fn butterworth_bandpass(
    x: &[f64],
    low_hz: f64,
    high_hz: f64,
    order: usize,
    fs: f64,
) -> Result<Vec<f64>> {
    let sections = design_butterworth_bandpass(low_hz, high_hz, order, fs)?;
    Ok(filtfilt(&sections, x))
}

/// Filter order used throughout ingestion.
pub const BANDPASS_ORDER: usize = 5;

/// One zero-phase filtered copy of the recording per band.
pub fn decompose_bands(rec: &RawRecording, bands: &[BandSpec]) -> Result<Vec<Tensor<f64>>> {
    rec.validate()?;
    if bands.is_empty() {
        return Err(Error::config("band list must not be empty"));
    }
    for b in bands {
        b.validate(rec.sample_rate_hz)?;
    }
    let (c, t) = (rec.channels(), rec.samples());
    let mut out = Vec::with_capacity(bands.len());
    for band in bands {
        let sections =
            design_butterworth_bandpass(band.low_hz, band.high_hz, BANDPASS_ORDER, rec.sample_rate_hz)?;
        let mut filtered = Tensor::zeros(&[c, t]);
        for ch in 0..c {
            let row: Vec<f64> = (0..t).map(|i| rec.data.at2(ch, i)).collect();
            let y = filtfilt(&sections, &row);
            for (i, v) in y.into_iter().enumerate() {
                filtered.set2(ch, i, v);
            }
        }
        out.push(filtered);
    }
    Ok(out)
}

/// Split a C×T matrix into floor(T/fs) non-overlapping C×fs segments.
pub fn window_1s_matrix(data: &Tensor<f64>, fs: f64) -> Result<Vec<Tensor<f64>>> {
    let win = fs.floor() as usize;
    let (c, t) = (data.rows(), data.cols());
    if win == 0 || t < win {
        return Err(Error::config(format!(
            "need at least one 1-s window: T={t}, fs={fs}"
        )));
    }
    let count = t / win;
    let mut segs = Vec::with_capacity(count);
    for k in 0..count {
        let mut seg = Tensor::zeros(&[c, win]);
        for ch in 0..c {
            for i in 0..win {
                seg.set2(ch, i, data.at2(ch, k * win + i));
            }
        }
        segs.push(seg);
    }
    Ok(segs)
}

/// Non-overlapping 1-second segments of a recording, in temporal order.
pub fn window_1s(rec: &RawRecording) -> Result<Vec<Tensor<f64>>> {
    rec.validate()?;
    window_1s_matrix(&rec.data, rec.sample_rate_hz)
}

/// Differential entropy of a segment under the Gaussian closed form:
/// 0.5·ln(2πe·v) with v the unbiased sample variance.
pub fn de_feature(segment: &[f64]) -> Result<f64> {
    if segment.len() < 2 {
        return Err(Error::config("DE needs at least 2 samples"));
    }
    let n = segment.len() as f64;
    let mean = segment.iter().sum::<f64>() / n;
    let var = segment.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Err(Error::numeric(
            "degenerate constant segment: zero variance",
        ));
    }
    Ok(0.5 * (2.0 * PI * std::f64::consts::E * var).ln())
}

/// Full ingestion: five-band decomposition, 1-s windows, DE per
/// channel/band. One sample per window.
pub fn extract_features<T: Scalar>(rec: &RawRecording, bands: &[BandSpec]) -> Result<Vec<Sample<T>>> {
    let per_band = decompose_bands(rec, bands)?;
    let win = rec.sample_rate_hz.floor() as usize;
    let count = rec.samples() / win;
    let c = rec.channels();
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mut feats = Tensor::zeros(&[c, bands.len()]);
        for (b, banded) in per_band.iter().enumerate() {
            for ch in 0..c {
                let seg: Vec<f64> = (0..win).map(|i| banded.at2(ch, k * win + i)).collect();
                let de = de_feature(&seg)?;
                feats.set2(ch, b, T::from_f64(de));
            }
        }
        out.push(Sample {
            features: feats,
            label: rec.label,
            subject_id: rec.subject_id,
            dataset_id: rec.dataset_id.clone(),
        });
    }
    Ok(out)
}
