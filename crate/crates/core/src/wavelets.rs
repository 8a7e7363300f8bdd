//! Wavelet kernels, causal boundary extension, Morlet scalograms and the
//! decimated orthogonal DWT used as an energy-preservation oracle.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::NdArray;
use crate::error::{Error, Result};
use crate::padding::{source_index, PadMode};
use crate::scalar::Scalar;

/// Minimum `ω₀·σ` for which a sampled Morlet is treated as zero-mean.
pub const ADMISSIBILITY: f64 = 5.0;

/// Half-width of the truncated Gaussian envelope, in units of `σ`.
pub const MORLET_SUPPORT_SIGMAS: f64 = 4.0;

/// Centre frequency (rad/sample) of the unit scale of the scalogram bank.
/// Kept below Nyquist so the finest scale does not alias.
pub const CWT_OMEGA0: f64 = 0.9 * std::f64::consts::PI;

/// Envelope half-width of the scalogram bank, in units of `σ`. Wider than
/// the gate kernels so truncation leaves no measurable DC response.
pub const CWT_SUPPORT_SIGMAS: f64 = 6.0;

/// `ω₀·σ` held fixed across the scalogram bank.
pub const CWT_PRODUCT: f64 = 6.0;

pub const CWT_DEFAULT_SCALES: usize = 64;
pub const CWT_MIN_SCALE: f64 = 1.0;
pub const CWT_MAX_SCALE: f64 = 316.0;

/// Returns `(ω₀, σ, clamped)` with `σ` raised to `ADMISSIBILITY / ω₀` when
/// the product falls short.
pub fn clamp_admissible(omega0: f64, sigma: f64) -> (f64, f64, bool) {
    if omega0 * sigma < ADMISSIBILITY {
        (omega0, ADMISSIBILITY / omega0, true)
    } else {
        (omega0, sigma, false)
    }
}

/// Sampled complex Morlet `ψ(n) = e^{iω₀n} e^{-n²/2σ²}` on
/// `n ∈ [-⌈4σ⌉, ⌈4σ⌉]`, scaled to unit L2 norm.
#[derive(Clone, Debug)]
pub struct MorletKernel {
    pub omega0: f64,
    pub sigma: f64,
    pub taps: Vec<Complex64>,
    /// The requested parameters violated admissibility and were clamped.
    pub clamped: bool,
}

impl MorletKernel {
    pub fn half_width(&self) -> usize {
        self.taps.len() / 2
    }

    /// `|Σ taps|`, the response to a constant signal.
    pub fn mean_magnitude(&self) -> f64 {
        self.taps.iter().sum::<Complex64>().norm()
    }

    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|c| c.norm_sqr()).sum()
    }
}

pub fn morlet_kernel(omega0: f64, sigma: f64) -> Result<MorletKernel> {
    morlet_kernel_with_support(omega0, sigma, MORLET_SUPPORT_SIGMAS)
}

/// As [`morlet_kernel`] with the envelope cut at `±⌈support·σ⌉`.
pub fn morlet_kernel_with_support(omega0: f64, sigma: f64, support: f64) -> Result<MorletKernel> {
    if !(omega0 > 0.0 && sigma > 0.0) || !omega0.is_finite() || !sigma.is_finite() {
        return Err(Error::contract(format!("Morlet needs ω₀ > 0 and σ > 0, got ({omega0}, {sigma})")));
    }
    let (omega0, sigma, clamped) = clamp_admissible(omega0, sigma);
    let (taps, _, _) = morlet_taps(omega0, sigma, support);
    Ok(MorletKernel {
        omega0,
        sigma,
        taps,
        clamped,
    })
}

/// Unit-norm taps together with their derivatives with respect to `ω₀`
/// and `σ`. The support is treated as fixed when differentiating.
pub fn morlet_taps_with_grad(omega0: f64, sigma: f64) -> (Vec<Complex64>, Vec<Complex64>, Vec<Complex64>) {
    morlet_taps(omega0, sigma, MORLET_SUPPORT_SIGMAS)
}

fn morlet_taps(omega0: f64, sigma: f64, support: f64) -> (Vec<Complex64>, Vec<Complex64>, Vec<Complex64>) {
    let hw = (support * sigma).ceil() as i64;
    let ns: Vec<f64> = (-hw..=hw).map(|n| n as f64).collect();
    let env: Vec<f64> = ns.iter().map(|n| (-n * n / (2.0 * sigma * sigma)).exp()).collect();
    let norm_sq: f64 = env.iter().map(|e| e * e).sum();
    let norm = norm_sq.sqrt();
    // d(log norm)/dσ = Σ n² e^{-n²/σ²} / (σ³ Σ e^{-n²/σ²})
    let dlog_norm: f64 = ns.iter().zip(&env).map(|(n, e)| n * n * e * e).sum::<f64>() / (sigma.powi(3) * norm_sq);
    let mut taps = Vec::with_capacity(ns.len());
    let mut d_omega = Vec::with_capacity(ns.len());
    let mut d_sigma = Vec::with_capacity(ns.len());
    for (n, e) in ns.iter().zip(&env) {
        let tap = Complex64::from_polar(e / norm, omega0 * n);
        taps.push(tap);
        d_omega.push(tap * Complex64::new(0.0, *n));
        d_sigma.push(tap * (n * n / sigma.powi(3) - dlog_norm));
    }
    (taps, d_omega, d_sigma)
}

/// Causal complex response `y[t] = Σ_k h[k]·x[t-k]` of one real signal.
pub fn complex_causal_response(signal: &[f64], taps: &[Complex64], pad: PadMode) -> Vec<Complex64> {
    let len = signal.len();
    (0..len)
        .map(|t| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (k, h) in taps.iter().enumerate() {
                if let Some(src) = source_index(t as isize - k as isize, len, pad) {
                    acc += h * signal[src];
                }
            }
            acc
        })
        .collect()
}

/// Orthogonal Daubechies filter pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DaubechiesFilter {
    pub order: usize,
    pub lowpass: Vec<f64>,
    pub highpass: Vec<f64>,
}

const DB2: [f64; 4] = {
    // [(1+√3), (3+√3), (3−√3), (1−√3)] / (4√2)
    const S3: f64 = 1.732_050_807_568_877_2;
    const D: f64 = 5.656_854_249_492_381;
    [(1.0 + S3) / D, (3.0 + S3) / D, (3.0 - S3) / D, (1.0 - S3) / D]
};

const DB4: [f64; 8] = [
    0.230_377_813_308_896_5,
    0.714_846_570_552_915_6,
    0.630_880_767_929_858_9,
    -0.027_983_769_416_859_854,
    -0.187_034_811_719_093_08,
    0.030_841_381_835_560_764,
    0.032_883_011_666_885_2,
    -0.010_597_401_785_069_032,
];

/// `order` 1 (Haar), 2 or 4.
pub fn daubechies_coefficients(order: usize) -> Result<DaubechiesFilter> {
    let lowpass: Vec<f64> = match order {
        1 => vec![std::f64::consts::FRAC_1_SQRT_2; 2],
        2 => DB2.to_vec(),
        4 => DB4.to_vec(),
        _ => return Err(Error::contract(format!("Daubechies order {order} unsupported (use 1, 2 or 4)"))),
    };
    let l = lowpass.len();
    let highpass = (0..l)
        .map(|k| if k % 2 == 0 { 1.0 } else { -1.0 } * lowpass[l - 1 - k])
        .collect();
    Ok(DaubechiesFilter {
        order,
        lowpass,
        highpass,
    })
}

/// Single-pass causal filters producing the undecimated detail signal at
/// each level: level 1 is the highpass, level `j` is the highpass dilated by
/// `2^{j-1}` applied after `j-1` dilated lowpass stages.
pub fn undecimated_detail_filters(filter: &DaubechiesFilter, levels: usize) -> Vec<Vec<f64>> {
    fn dilate(taps: &[f64], step: usize) -> Vec<f64> {
        let mut out = vec![0.0; (taps.len() - 1) * step + 1];
        for (i, &t) in taps.iter().enumerate() {
            out[i * step] = t;
        }
        out
    }
    fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; a.len() + b.len() - 1];
        for (i, &x) in a.iter().enumerate() {
            for (j, &y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        out
    }
    let mut approx = vec![1.0];
    let mut out = Vec::with_capacity(levels);
    for level in 0..levels {
        let step = 1 << level;
        out.push(convolve(&approx, &dilate(&filter.highpass, step)));
        approx = convolve(&approx, &dilate(&filter.lowpass, step));
    }
    out
}

/// Left-extends the last axis by `p` mirrored samples (edge excluded).
pub fn causal_reflect_pad<T: Scalar>(signal: &NdArray<T>, p: usize) -> Result<NdArray<T>> {
    let t = signal.last_dim();
    if p >= t {
        return Err(Error::contract(format!(
            "reflect padding of {p} needs a signal longer than {p} samples, got {t}"
        )));
    }
    let mut data = Vec::with_capacity(signal.len() / t * (t + p));
    for row in signal.data().chunks(t) {
        for i in (1..=p).rev() {
            data.push(row[i]);
        }
        data.extend_from_slice(row);
    }
    let mut shape = signal.shape().to_vec();
    *shape.last_mut().unwrap() = t + p;
    NdArray::new(&shape, data)
}

/// Time-scale energy map: rows are scales, columns positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scalogram {
    pub scales: Vec<f64>,
    pub len: usize,
    /// Row-major `[scales, len]`.
    pub values: Vec<f64>,
}

impl Scalogram {
    pub fn zeros(scales: Vec<f64>, len: usize) -> Self {
        let n = scales.len() * len;
        Self {
            scales,
            len,
            values: vec![0.0; n],
        }
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.len..(s + 1) * self.len]
    }

    pub fn get(&self, s: usize, t: usize) -> f64 {
        self.values[s * self.len + t]
    }

    pub fn n_scales(&self) -> usize {
        self.scales.len()
    }

    /// Entry-wise `self += weight · other`.
    pub fn accumulate(&mut self, other: &Scalogram, weight: f64) {
        assert_eq!(self.values.len(), other.values.len(), "scalogram shapes differ");
        self.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a += weight * b);
    }

    /// CSV with one row per scale; the first column holds the scale.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scale");
        for t in 0..self.len {
            out.push_str(&format!(",t{t}"));
        }
        out.push('\n');
        for (s, scale) in self.scales.iter().enumerate() {
            out.push_str(&format!("{scale:.6}"));
            for v in self.row(s) {
                out.push_str(&format!(",{v:.9e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// `n` log-spaced scales from `lo` to `hi` inclusive.
pub fn log_scales(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

pub fn default_scales() -> Vec<f64> {
    log_scales(CWT_MIN_SCALE, CWT_MAX_SCALE, CWT_DEFAULT_SCALES)
}

/// Kernel used for scale `a` of the scalogram bank.
pub fn scalogram_kernel(scale: f64) -> Result<MorletKernel> {
    let omega = CWT_OMEGA0 / scale;
    morlet_kernel_with_support(omega, CWT_PRODUCT / omega, CWT_SUPPORT_SIGMAS)
}

/// Centre frequency (rad/sample) of scale `a`.
pub fn scale_center_frequency(scale: f64) -> f64 {
    CWT_OMEGA0 / scale
}

/// Squared magnitude of the causal Morlet response at every scale.
///
/// The kernel is centred, so features appear delayed by its half-width
/// ([`MorletKernel::half_width`]).
pub fn cwt_scalogram(signal: &[f64], scales: &[f64]) -> Result<Scalogram> {
    if scales.is_empty() {
        return Err(Error::contract("scalogram needs at least one scale"));
    }
    if signal.is_empty() {
        return Err(Error::contract("scalogram of an empty signal"));
    }
    let mut out = Scalogram::zeros(scales.to_vec(), signal.len());
    for (s, &a) in scales.iter().enumerate() {
        let kernel = scalogram_kernel(a)?;
        let y = complex_causal_response(signal, &kernel.taps, PadMode::Reflect);
        for (t, c) in y.iter().enumerate() {
            out.values[s * signal.len() + t] = c.norm_sqr();
        }
    }
    Ok(out)
}

pub fn parseval_energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// One periodised analysis step: `(approximation, detail)`, each half length.
pub fn dwt_step(x: &[f64], filter: &DaubechiesFilter) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let half = n / 2;
    let mut approx = vec![0.0; half];
    let mut detail = vec![0.0; half];
    for i in 0..half {
        for (k, (&h, &g)) in filter.lowpass.iter().zip(&filter.highpass).enumerate() {
            let v = x[(2 * i + k) % n];
            approx[i] += h * v;
            detail[i] += g * v;
        }
    }
    (approx, detail)
}

/// Multi-level decimated DWT: final approximation plus details, finest first.
pub fn dwt(x: &[f64], filter: &DaubechiesFilter, levels: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if levels == 0 || !x.len().is_multiple_of(1 << levels) {
        return Err(Error::contract(format!(
            "a {levels}-level decimated DWT needs a length divisible by {}, got {}",
            1usize << levels.min(63),
            x.len()
        )));
    }
    let mut approx = x.to_vec();
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (a, d) = dwt_step(&approx, filter);
        details.push(d);
        approx = a;
    }
    Ok((approx, details))
}

/// `|Σx² − (Σa² + Σd²)| / Σx²` for the decimated transform; zero for a zero
/// signal.
pub fn dwt_parseval_check(x: &[f64], filter: &DaubechiesFilter, levels: usize) -> Result<f64> {
    let (approx, details) = dwt(x, filter, levels)?;
    let direct = parseval_energy(x);
    let transformed = parseval_energy(&approx) + details.iter().map(|d| parseval_energy(d)).sum::<f64>();
    if direct == 0.0 {
        return Ok(transformed.abs());
    }
    Ok((direct - transformed).abs() / direct)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn morlet_support_and_norm() {
        let k = morlet_kernel(5.0, 1.0).unwrap();
        assert_eq!(k.taps.len(), 9);
        assert!((k.energy() - 1.0).abs() < 1e-10);
        assert!(!k.clamped);
    }

    #[test]
    fn morlet_is_near_zero_mean_at_admissibility() {
        // frequencies below Nyquist, so the sampled kernel does not alias
        for (w, s) in [(1.0, 5.0), (0.5, 10.0), (2.5, 2.0)] {
            let k = morlet_kernel(w, s).unwrap();
            assert!(k.mean_magnitude() < 0.02, "({w},{s}) {}", k.mean_magnitude());
        }
        // ±4σ truncation leaks about e^{-8} of the peak, so the untruncated
        // sum is the reference at ω₀σ = 10
        for (w, s) in [(1.0, 10.0), (0.5, 20.0), (2.5, 4.0)] {
            let wide = morlet_kernel_with_support(w, s, 12.0).unwrap();
            assert!(wide.mean_magnitude() < 1e-6, "({w},{s}) {}", wide.mean_magnitude());
            let k = morlet_kernel(w, s).unwrap();
            assert!(k.mean_magnitude() < 3e-4, "({w},{s}) {}", k.mean_magnitude());
        }
    }

    #[test]
    fn inadmissible_parameters_are_clamped() {
        let k = morlet_kernel(1.0, 4.9).unwrap();
        assert!(k.clamped);
        assert!((k.omega0 * k.sigma - 5.0).abs() < 1e-12);
        assert!(morlet_kernel(0.0, 1.0).is_err());
        assert!(morlet_kernel(1.0, -1.0).is_err());
    }

    /// Width of the spectral main lobe at half power, by brute-force DTFT.
    fn half_power_width(k: &MorletKernel) -> f64 {
        let n = 20_000;
        let grid: Vec<f64> = (0..n).map(|i| std::f64::consts::PI * i as f64 / n as f64).collect();
        let power: Vec<f64> = grid
            .iter()
            .map(|&w| {
                k.taps
                    .iter()
                    .enumerate()
                    .map(|(j, c)| c * Complex64::from_polar(1.0, -w * (j as f64 - k.half_width() as f64)))
                    .sum::<Complex64>()
                    .norm_sqr()
            })
            .collect();
        let peak = power.iter().cloned().fold(0.0, f64::max);
        let above: Vec<usize> = (0..n).filter(|&i| power[i] >= peak / 2.0).collect();
        grid[*above.last().unwrap()] - grid[above[0]]
    }

    #[test]
    fn doubling_sigma_halves_bandwidth() {
        let narrow = morlet_kernel(1.0, 6.0).unwrap();
        let wide = morlet_kernel(0.5, 12.0).unwrap();
        let ratio = half_power_width(&narrow) / half_power_width(&wide);
        assert!((ratio - 2.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn analytic_tap_derivatives_match_differences() {
        let (w, s, h) = (1.3, 4.2, 1e-6);
        let (_, dw, ds) = morlet_taps_with_grad(w, s);
        let (up, _, _) = morlet_taps_with_grad(w + h, s);
        let (dn, _, _) = morlet_taps_with_grad(w - h, s);
        for i in 0..dw.len() {
            assert!(((up[i] - dn[i]) / (2.0 * h) - dw[i]).norm() < 1e-7);
        }
        let (up, _, _) = morlet_taps_with_grad(w, s + h);
        let (dn, _, _) = morlet_taps_with_grad(w, s - h);
        for i in 0..ds.len() {
            assert!(((up[i] - dn[i]) / (2.0 * h) - ds[i]).norm() < 1e-7);
        }
    }

    #[test]
    fn haar_and_db2_taps() {
        let h = daubechies_coefficients(1).unwrap();
        assert_eq!(h.lowpass, vec![std::f64::consts::FRAC_1_SQRT_2; 2]);
        let d = daubechies_coefficients(2).unwrap();
        let s3 = 3f64.sqrt();
        let want = [1.0 + s3, 3.0 + s3, 3.0 - s3, 1.0 - s3].map(|v| v / (4.0 * 2f64.sqrt()));
        for (a, b) in d.lowpass.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(daubechies_coefficients(3).is_err());
    }

    #[test]
    fn daubechies_identities() {
        for order in [1, 2, 4] {
            let f = daubechies_coefficients(order).unwrap();
            let h = &f.lowpass;
            assert!((h.iter().sum::<f64>() - 2f64.sqrt()).abs() < 1e-12, "order {order}");
            for m in 0..h.len() / 2 {
                let dot: f64 = (0..h.len() - 2 * m).map(|k| h[k] * h[k + 2 * m]).sum();
                let want = if m == 0 { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12, "order {order} shift {m}: {dot}");
            }
            for moment in 0..order {
                let v: f64 = f.highpass.iter().enumerate().map(|(k, g)| (k as f64).powi(moment as i32) * g).sum();
                assert!(v.abs() < 1e-9, "order {order} moment {moment}: {v}");
            }
        }
    }

    #[test]
    fn reflect_pad_examples() {
        let x = NdArray::<f64>::from_f64(&[3], &[1., 2., 3.]).unwrap();
        assert_eq!(causal_reflect_pad(&x, 0).unwrap(), x);
        assert_eq!(causal_reflect_pad(&x, 2).unwrap().data(), &[3., 2., 1., 2., 3.]);
        let x4 = NdArray::<f64>::from_f64(&[4], &[1., 2., 3., 4.]).unwrap();
        assert_eq!(causal_reflect_pad(&x4, 1).unwrap().data(), &[2., 1., 2., 3., 4.]);
        let err = causal_reflect_pad(&x, 3).unwrap_err().to_string();
        assert!(err.contains('3'), "{err}");
    }

    #[test]
    fn parseval_holds_for_decimated_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for order in [1, 2, 4] {
            let f = daubechies_coefficients(order).unwrap();
            assert_eq!(dwt_parseval_check(&[0.0; 64], &f, 3).unwrap(), 0.0);
            for _ in 0..100 {
                let x: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
                let err = dwt_parseval_check(&x, &f, 3).unwrap();
                assert!(err < 1e-10, "order {order}: {err}");
            }
        }
        let f = daubechies_coefficients(2).unwrap();
        assert!(dwt(&[0.0; 12], &f, 3).is_err());
    }

    #[test]
    fn undecimated_details_annihilate_constants() {
        for order in [2, 4] {
            let f = daubechies_coefficients(order).unwrap();
            for taps in undecimated_detail_filters(&f, 2) {
                assert!(taps.iter().sum::<f64>().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scalogram_of_constant_is_negligible() {
        let x = vec![0.7; 64];
        let power = parseval_energy(&x) / 64.0;
        let s = cwt_scalogram(&x, &default_scales()).unwrap();
        assert_eq!(s.values.len(), 64 * 64);
        assert!(s.values.iter().all(|&v| v >= 0.0 && v < 1e-6 * power));
    }

    #[test]
    fn impulse_peaks_after_the_kernel_delay() {
        let (n, t0) = (256, 100);
        let mut x = vec![0.0; n];
        x[t0] = 1.0;
        let scales = log_scales(1.0, 4.0, 6);
        let s = cwt_scalogram(&x, &scales).unwrap();
        for (i, &a) in scales.iter().enumerate() {
            let k = scalogram_kernel(a).unwrap();
            // direct oracle: |h[t - t0]|² is largest at the kernel centre
            let row = s.row(i);
            let argmax = (0..n).max_by(|&p, &q| row[p].total_cmp(&row[q])).unwrap();
            assert_eq!(argmax, t0 + k.half_width(), "scale {a}");
            assert!((row[argmax] - k.taps[k.half_width()].norm_sqr()).abs() < 1e-15);
        }
    }

    #[test]
    fn sinusoid_selects_the_matching_scale() {
        let n = 512;
        let period = 8.0;
        let w = 2.0 * std::f64::consts::PI / period;
        let x: Vec<f64> = (0..n).map(|t| (w * t as f64).sin()).collect();
        let scales = default_scales();
        let s = cwt_scalogram(&x, &scales).unwrap();
        // interior columns, away from the padded start
        let energy: Vec<f64> = (0..scales.len()).map(|i| s.row(i)[256..].iter().sum()).collect();
        let best = (0..scales.len()).max_by(|&p, &q| energy[p].total_cmp(&energy[q])).unwrap();
        let ratio = scale_center_frequency(scales[best]) / w;
        let step = scales[1] / scales[0];
        assert!(ratio > 1.0 / step && ratio < step, "ratio {ratio}");
    }

    #[test]
    fn scalogram_is_shift_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..96).map(|_| rng.random_range(-1.0..1.0)).collect();
        let shifted: Vec<f64> = std::iter::repeat_n(0.0, 3).chain(x[..93].iter().copied()).collect();
        let scales = log_scales(1.0, 3.0, 4);
        let a = cwt_scalogram(&x, &scales).unwrap();
        let b = cwt_scalogram(&shifted, &scales).unwrap();
        for i in 0..scales.len() {
            let hw = scalogram_kernel(scales[i]).unwrap().half_width();
            for t in (hw + 3 + hw)..93 {
                assert!((b.get(i, t + 3) - a.get(i, t)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_scale_list_is_rejected() {
        assert!(cwt_scalogram(&[1.0, 2.0], &[]).is_err());
    }
}
