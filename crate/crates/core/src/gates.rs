//! Energy gates.
//!
//! Every variant follows the same pipeline per head and scale: a causal
//! per-position energy `e`, normalisation to `ẽ`, a sigmoid gate
//! `g = σ(α(ẽ − τ))`, a convex combination over scales, and finally the
//! column reweighting `Â = A·g / (A·g)·1` of the attention matrix.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Backward, NdArray, Tape, Var};
use crate::error::{Error, Result};
use crate::padding::{source_index, PadMode};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::wavelets::{self, ADMISSIBILITY};

pub const ZNORM_EPS: f64 = 1e-5;
pub const RENORM_EPS: f64 = 1e-8;
pub const CONV_FILTER_LENGTHS: [usize; 4] = [3, 7, 15, 31];
pub const DWT_LEVELS: usize = 2;
/// Envelope widths of the four Morlet scales at initialisation.
pub const MORLET_INIT_SIGMAS: [f64; 4] = [1.5, 3.0, 6.0, 12.0];
/// `ω₀·σ` at initialisation, inside the admissible region.
pub const MORLET_INIT_PRODUCT: f64 = 6.0;
/// Lower bound on `ω₀` enforced together with admissibility.
pub const MORLET_MIN_OMEGA: f64 = 0.05;
pub const GATE_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateVariant {
    Base,
    Ega1,
    Ega2,
    Ega4,
    Egac,
    Egam,
    Egadb2,
    Egadb4,
}

impl GateVariant {
    pub const ALL: [GateVariant; 8] = [
        GateVariant::Base,
        GateVariant::Ega1,
        GateVariant::Ega2,
        GateVariant::Ega4,
        GateVariant::Egac,
        GateVariant::Egam,
        GateVariant::Egadb2,
        GateVariant::Egadb4,
    ];

    /// Command-line spelling.
    pub fn name(self) -> &'static str {
        match self {
            GateVariant::Base => "base",
            GateVariant::Ega1 => "ega1",
            GateVariant::Ega2 => "ega2",
            GateVariant::Ega4 => "ega4",
            GateVariant::Egac => "egac",
            GateVariant::Egam => "egam",
            GateVariant::Egadb2 => "egadb2",
            GateVariant::Egadb4 => "egadb4",
        }
    }

    /// Table label.
    pub fn label(self) -> &'static str {
        match self {
            GateVariant::Base => "BASE",
            GateVariant::Ega1 => "EGA-1",
            GateVariant::Ega2 => "EGA-2",
            GateVariant::Ega4 => "EGA-4",
            GateVariant::Egac => "EGA-C",
            GateVariant::Egam => "EGA-M",
            GateVariant::Egadb2 => "EGA-DB2",
            GateVariant::Egadb4 => "EGA-DB4",
        }
    }

    pub fn is_gated(self) -> bool {
        self != GateVariant::Base
    }

    /// Number of energy scales; zero for the ungated baseline.
    pub fn n_scales(self) -> usize {
        match self {
            GateVariant::Base => 0,
            GateVariant::Ega1 | GateVariant::Egadb2 | GateVariant::Egadb4 => 1,
            GateVariant::Ega2 => 2,
            GateVariant::Ega4 | GateVariant::Egac | GateVariant::Egam => 4,
        }
    }

    /// Scale weights are learned (softmax of logits) rather than uniform.
    pub fn learned_mix(self) -> bool {
        matches!(self, GateVariant::Egac | GateVariant::Egam)
    }

    pub fn daubechies_order(self) -> Option<usize> {
        match self {
            GateVariant::Egadb2 => Some(2),
            GateVariant::Egadb4 => Some(4),
            _ => None,
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.iter().map(|v| v.name()).collect::<Vec<_>>().join("|")
    }
}

impl fmt::Display for GateVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GateVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| *c != '-' && *c != '_').collect::<String>().to_lowercase();
        Self::ALL.into_iter().find(|v| v.name() == key).ok_or_else(|| Error::Parse {
            what: "gate variant".into(),
            detail: format!("unknown variant `{s}`; expected one of {}", Self::valid_names()),
        })
    }
}

/// Statistics used to normalise energies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZNormMode {
    /// Mean and deviation over the whole sequence.
    Paper,
    /// Mean and deviation over positions `0..=t`.
    Causal,
}

impl ZNormMode {
    pub fn name(self) -> &'static str {
        match self {
            ZNormMode::Paper => "paper",
            ZNormMode::Causal => "causal",
        }
    }

    /// Left boundary handling of the energy filters. Reflection reads later
    /// samples, so the causal mode repeats the first sample instead.
    pub fn padding(self) -> PadMode {
        match self {
            ZNormMode::Paper => PadMode::Reflect,
            ZNormMode::Causal => PadMode::Edge,
        }
    }
}

impl fmt::Display for ZNormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ZNormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "paper" | "paper-literal" => Ok(ZNormMode::Paper),
            "causal" | "causal-prefix" => Ok(ZNormMode::Causal),
            _ => Err(Error::Parse {
                what: "znorm mode".into(),
                detail: format!("unknown mode `{s}`; expected paper|causal"),
            }),
        }
    }
}

/// Initial gate threshold and sharpness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateInit {
    pub tau: f64,
    pub alpha: f64,
}

impl Default for GateInit {
    fn default() -> Self {
        Self { tau: 0.0, alpha: 2.0 }
    }
}

// ---------------------------------------------------------------------------
// energies

/// `e[b, j, t] = x[b, t]·w[j] + bias[j]` for `w: [J, d]`, returned as
/// `[B, J, T]`.
pub fn energy_linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, bias: Var) -> Result<Var> {
    let proj = tape.linear(x, w, true)?;
    let proj = tape.add_bias(proj, bias)?;
    tape.permute(proj, &[0, 2, 1])
}

fn batch_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, t, d] => Ok((b, t, d)),
        _ => Err(Error::shape(op, shape, &[0, 0, 0])),
    }
}

/// `x[b]` as `[d, T]` so that filters run over contiguous memory.
fn channels_first<T: Scalar>(x: &[T], t_len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; t_len * d];
    for t in 0..t_len {
        for c in 0..d {
            out[c * t_len + t] = x[t * d + c].as_f64();
        }
    }
    out
}

/// Source positions of every causal tap, `None` for zero padding.
fn tap_sources(t_len: usize, taps: usize, pad: PadMode) -> Vec<Option<usize>> {
    let mut out = Vec::with_capacity(t_len * taps);
    for t in 0..t_len {
        for k in 0..taps {
            out.push(source_index(t as isize - k as isize, t_len, pad));
        }
    }
    out
}

struct ComplexConvRule {
    pad: PadMode,
    taps: usize,
}

fn complex_conv_row(
    xc: &[f64],
    t_len: usize,
    re: &[f64],
    im: &[f64],
    taps: usize,
    sources: &[Option<usize>],
    t: usize,
    c: usize,
) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    let sig = &xc[c * t_len..(c + 1) * t_len];
    let (fr, fi) = (&re[c * taps..(c + 1) * taps], &im[c * taps..(c + 1) * taps]);
    for k in 0..taps {
        if let Some(src) = sources[t * taps + k] {
            acc.re += fr[k] * sig[src];
            acc.im += fi[k] * sig[src];
        }
    }
    acc
}

impl<T: Scalar> Backward<T> for ComplexConvRule {
    fn name(&self) -> &'static str {
        "energy_conv"
    }

    fn backward(&self, inputs: &[&NdArray<T>], _output: &NdArray<T>, grad_out: &[T], grads: &mut [Option<Vec<T>>]) {
        let (b_len, t_len, d) = batch_dims("energy_conv", inputs[0].shape()).expect("checked in forward");
        let heads = inputs[1].shape()[0];
        let k = self.taps;
        let re: Vec<f64> = inputs[1].data().iter().map(|v| v.as_f64()).collect();
        let im: Vec<f64> = inputs[2].data().iter().map(|v| v.as_f64()).collect();
        let br: Vec<f64> = inputs[3].data().iter().map(|v| v.as_f64()).collect();
        let bi: Vec<f64> = inputs[4].data().iter().map(|v| v.as_f64()).collect();
        let sources = tap_sources(t_len, k, self.pad);
        let scale = 2.0 / d as f64;
        // one task per sequence: disjoint input gradients, filter partials
        // reduced afterwards in sequence order
        let partials: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = (0..b_len)
            .into_par_iter()
            .map(|b| {
                let xc = channels_first(&inputs[0].data()[b * t_len * d..(b + 1) * t_len * d], t_len, d);
                let mut dxc = vec![0.0; t_len * d];
                let mut dre = vec![0.0; heads * d * k];
                let mut dim = vec![0.0; heads * d * k];
                let mut dbr = vec![0.0; heads];
                let mut dbi = vec![0.0; heads];
                for h in 0..heads {
                    let fr = &re[h * d * k..(h + 1) * d * k];
                    let fi = &im[h * d * k..(h + 1) * d * k];
                    for t in 0..t_len {
                        let go = grad_out[(b * heads + h) * t_len + t].as_f64() * scale;
                        if go == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            let y = complex_conv_row(&xc, t_len, fr, fi, k, &sources, t, c) + Complex64::new(br[h], bi[h]);
                            dbr[h] += go * y.re;
                            dbi[h] += go * y.im;
                            let base = (h * d + c) * k;
                            for kk in 0..k {
                                if let Some(src) = sources[t * k + kk] {
                                    let xv = xc[c * t_len + src];
                                    dre[base + kk] += go * y.re * xv;
                                    dim[base + kk] += go * y.im * xv;
                                    dxc[c * t_len + src] += go * (y.re * fr[c * k + kk] + y.im * fi[c * k + kk]);
                                }
                            }
                        }
                    }
                }
                (dxc, dre, dim, dbr, dbi)
            })
            .collect();
        for (b, (dxc, dre, dim, dbr, dbi)) in partials.into_iter().enumerate() {
            if let Some(g) = grads[0].as_mut() {
                let out = &mut g[b * t_len * d..(b + 1) * t_len * d];
                for t in 0..t_len {
                    for c in 0..d {
                        out[t * d + c] += T::lit(dxc[c * t_len + t]);
                    }
                }
            }
            for (slot, part) in [(1, &dre), (2, &dim), (3, &dbr), (4, &dbi)] {
                if let Some(g) = grads[slot].as_mut() {
                    g.iter_mut().zip(part.iter()).for_each(|(a, &v)| *a += T::lit(v));
                }
            }
        }
    }
}

/// Complex causal filter bank: for each head `h`,
/// `e[b,h,t] = mean_c |Σ_j (re + i·im)[h,c,j]·x[b,t−j,c] + (bias_re + i·bias_im)[h]|²`.
/// Filters have shape `[H, d, k]`, biases `[H]`; output `[B, H, T]`.
pub fn energy_conv<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    re: Var,
    im: Var,
    bias_re: Var,
    bias_im: Var,
    pad: PadMode,
) -> Result<Var> {
    let (b_len, t_len, d) = batch_dims("energy_conv", tape.shape(x))?;
    let fshape = tape.shape(re).to_vec();
    if fshape.len() != 3 || fshape[1] != d || tape.shape(im) != fshape.as_slice() {
        return Err(Error::shape("energy_conv", tape.shape(x), &fshape));
    }
    let (heads, k) = (fshape[0], fshape[2]);
    if tape.shape(bias_re) != [heads] || tape.shape(bias_im) != [heads] {
        return Err(Error::shape("energy_conv", &fshape, tape.shape(bias_re)));
    }
    let fr: Vec<f64> = tape.value(re).data().iter().map(|v| v.as_f64()).collect();
    let fi: Vec<f64> = tape.value(im).data().iter().map(|v| v.as_f64()).collect();
    let br: Vec<f64> = tape.value(bias_re).data().iter().map(|v| v.as_f64()).collect();
    let bi: Vec<f64> = tape.value(bias_im).data().iter().map(|v| v.as_f64()).collect();
    let sources = tap_sources(t_len, k, pad);
    let xv = tape.value(x).data();
    let mut data = vec![T::zero(); b_len * heads * t_len];
    data.par_chunks_mut(heads * t_len).enumerate().for_each(|(b, out)| {
        let xc = channels_first(&xv[b * t_len * d..(b + 1) * t_len * d], t_len, d);
        for h in 0..heads {
            let (hr, hi) = (&fr[h * d * k..(h + 1) * d * k], &fi[h * d * k..(h + 1) * d * k]);
            for t in 0..t_len {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += (complex_conv_row(&xc, t_len, hr, hi, k, &sources, t, c) + Complex64::new(br[h], bi[h])).norm_sqr();
                }
                out[h * t_len + t] = T::lit(acc / d as f64);
            }
        }
    });
    let out = NdArray::new(&[b_len, heads, t_len], data)?;
    Ok(tape.push(out, &[x, re, im, bias_re, bias_im], ComplexConvRule { pad, taps: k }))
}

struct MorletRule {
    pad: PadMode,
    heads: usize,
    scales: usize,
}

type TapSet = (Vec<Complex64>, Vec<Complex64>, Vec<Complex64>);

fn morlet_bank<T: Scalar>(omega: &NdArray<T>, sigma: &NdArray<T>) -> Vec<TapSet> {
    omega
        .data()
        .iter()
        .zip(sigma.data())
        .map(|(w, s)| wavelets::morlet_taps_with_grad(w.as_f64(), s.as_f64()))
        .collect()
}

fn complex_response(sig: &[f64], taps: &[Complex64], sources: &[Option<usize>], t: usize) -> Complex64 {
    let k = taps.len();
    let mut acc = Complex64::new(0.0, 0.0);
    for (j, h) in taps.iter().enumerate() {
        if let Some(src) = sources[t * k + j] {
            acc += h * sig[src];
        }
    }
    acc
}

impl<T: Scalar> Backward<T> for MorletRule {
    fn name(&self) -> &'static str {
        "energy_morlet"
    }

    fn backward(&self, inputs: &[&NdArray<T>], _output: &NdArray<T>, grad_out: &[T], grads: &mut [Option<Vec<T>>]) {
        let (b_len, t_len, d) = batch_dims("energy_morlet", inputs[0].shape()).expect("checked in forward");
        let bank = morlet_bank(inputs[1], inputs[2]);
        let sources: Vec<Vec<Option<usize>>> = bank.iter().map(|(t, _, _)| tap_sources(t_len, t.len(), self.pad)).collect();
        let hs = self.heads * self.scales;
        let scale = 2.0 / d as f64;
        let partials: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..b_len)
            .into_par_iter()
            .map(|b| {
                let xc = channels_first(&inputs[0].data()[b * t_len * d..(b + 1) * t_len * d], t_len, d);
                let mut dxc = vec![0.0; t_len * d];
                let mut dw = vec![0.0; hs];
                let mut ds = vec![0.0; hs];
                for (j, (taps, tw, ts)) in bank.iter().enumerate() {
                    let src = &sources[j];
                    let k = taps.len();
                    for t in 0..t_len {
                        let go = grad_out[(b * hs + j) * t_len + t].as_f64() * scale;
                        if go == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            let sig = &xc[c * t_len..(c + 1) * t_len];
                            let y = complex_response(sig, taps, src, t);
                            let yc = y.conj();
                            dw[j] += go * (yc * complex_response(sig, tw, src, t)).re;
                            ds[j] += go * (yc * complex_response(sig, ts, src, t)).re;
                            for (kk, h) in taps.iter().enumerate() {
                                if let Some(s) = src[t * k + kk] {
                                    dxc[c * t_len + s] += go * (yc * h).re;
                                }
                            }
                        }
                    }
                }
                (dxc, dw, ds)
            })
            .collect();
        for (b, (dxc, dw, ds)) in partials.into_iter().enumerate() {
            if let Some(g) = grads[0].as_mut() {
                let out = &mut g[b * t_len * d..(b + 1) * t_len * d];
                for t in 0..t_len {
                    for c in 0..d {
                        out[t * d + c] += T::lit(dxc[c * t_len + t]);
                    }
                }
            }
            for (slot, part) in [(1, &dw), (2, &ds)] {
                if let Some(g) = grads[slot].as_mut() {
                    g.iter_mut().zip(part.iter()).for_each(|(a, &v)| *a += T::lit(v));
                }
            }
        }
    }
}

/// Squared magnitude of the causal complex Morlet response, averaged over
/// channels. `omega` and `sigma` hold one value per (head, scale) in
/// head-major order; output `[B, H, S, T]`.
pub fn energy_morlet<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    omega: Var,
    sigma: Var,
    heads: usize,
    pad: PadMode,
) -> Result<Var> {
    let (b_len, t_len, d) = batch_dims("energy_morlet", tape.shape(x))?;
    let n = tape.value(omega).len();
    if heads == 0 || !n.is_multiple_of(heads) || tape.value(sigma).len() != n {
        return Err(Error::shape("energy_morlet", tape.shape(omega), tape.shape(sigma)));
    }
    let scales = n / heads;
    let (vw, vs) = (tape.value(omega), tape.value(sigma));
    if vw.data().iter().chain(vs.data()).any(|v| !(v.as_f64() > 0.0)) {
        return Err(Error::contract("Morlet ω₀ and σ must be positive"));
    }
    let bank = morlet_bank(vw, vs);
    let sources: Vec<Vec<Option<usize>>> = bank.iter().map(|(t, _, _)| tap_sources(t_len, t.len(), pad)).collect();
    let xv = tape.value(x).data();
    let mut data = vec![T::zero(); b_len * n * t_len];
    data.par_chunks_mut(n * t_len).enumerate().for_each(|(b, out)| {
        let xc = channels_first(&xv[b * t_len * d..(b + 1) * t_len * d], t_len, d);
        for (j, (taps, _, _)) in bank.iter().enumerate() {
            for t in 0..t_len {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += complex_response(&xc[c * t_len..(c + 1) * t_len], taps, &sources[j], t).norm_sqr();
                }
                out[j * t_len + t] = T::lit(acc / d as f64);
            }
        }
    });
    let out = NdArray::new(&[b_len, heads, scales, t_len], data)?;
    Ok(tape.push(out, &[x, omega, sigma], MorletRule { pad, heads, scales }))
}

struct DwtRule {
    filters: Vec<Vec<f64>>,
    pad: PadMode,
    heads: usize,
}

fn detail_energy(sig: &[f64], filters: &[Vec<f64>], sources: &[Vec<Option<usize>>], t: usize) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut details = Vec::with_capacity(filters.len());
    for (f, src) in filters.iter().zip(sources) {
        let k = f.len();
        let mut y = 0.0;
        for (j, &w) in f.iter().enumerate() {
            if let Some(s) = src[t * k + j] {
                y += w * sig[s];
            }
        }
        total += y * y;
        details.push(y);
    }
    (total, details)
}

impl<T: Scalar> Backward<T> for DwtRule {
    fn name(&self) -> &'static str {
        "energy_dwt"
    }

    fn backward(&self, inputs: &[&NdArray<T>], _output: &NdArray<T>, grad_out: &[T], grads: &mut [Option<Vec<T>>]) {
        let Some(gx) = grads[0].as_mut() else { return };
        let (_, t_len, d) = batch_dims("energy_dwt", inputs[0].shape()).expect("checked in forward");
        let sources: Vec<Vec<Option<usize>>> = self.filters.iter().map(|f| tap_sources(t_len, f.len(), self.pad)).collect();
        let scale = 2.0 / d as f64;
        gx.par_chunks_mut(t_len * d).enumerate().for_each(|(b, out)| {
            let xc = channels_first(&inputs[0].data()[b * t_len * d..(b + 1) * t_len * d], t_len, d);
            let mut dxc = vec![0.0; t_len * d];
            for t in 0..t_len {
                let go: f64 = (0..self.heads).map(|h| grad_out[(b * self.heads + h) * t_len + t].as_f64()).sum::<f64>() * scale;
                if go == 0.0 {
                    continue;
                }
                for c in 0..d {
                    let sig = &xc[c * t_len..(c + 1) * t_len];
                    let (_, details) = detail_energy(sig, &self.filters, &sources, t);
                    for ((f, src), y) in self.filters.iter().zip(&sources).zip(details) {
                        let k = f.len();
                        for (j, &w) in f.iter().enumerate() {
                            if let Some(s) = src[t * k + j] {
                                dxc[c * t_len + s] += go * y * w;
                            }
                        }
                    }
                }
            }
            for t in 0..t_len {
                for c in 0..d {
                    out[t * d + c] += T::lit(dxc[c * t_len + t]);
                }
            }
        });
    }
}

/// Undecimated detail energy `Σ_levels detail²`, averaged over channels and
/// repeated for each of `heads`; output `[B, H, 1, T]`. The filters are
/// constants.
pub fn energy_dwt<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    filter: &wavelets::DaubechiesFilter,
    levels: usize,
    heads: usize,
    pad: PadMode,
) -> Result<Var> {
    let (b_len, t_len, d) = batch_dims("energy_dwt", tape.shape(x))?;
    let filters = wavelets::undecimated_detail_filters(filter, levels);
    let sources: Vec<Vec<Option<usize>>> = filters.iter().map(|f| tap_sources(t_len, f.len(), pad)).collect();
    let xv = tape.value(x).data();
    let mut data = vec![T::zero(); b_len * heads * t_len];
    data.par_chunks_mut(heads * t_len).enumerate().for_each(|(b, out)| {
        let xc = channels_first(&xv[b * t_len * d..(b + 1) * t_len * d], t_len, d);
        for t in 0..t_len {
            let e: f64 = (0..d).map(|c| detail_energy(&xc[c * t_len..(c + 1) * t_len], &filters, &sources, t).0).sum::<f64>() / d as f64;
            for h in 0..heads {
                out[h * t_len + t] = T::lit(e);
            }
        }
    });
    let out = NdArray::new(&[b_len, heads, 1, t_len], data)?;
    Ok(tape.push(out, &[x], DwtRule { filters, pad, heads }))
}

// ---------------------------------------------------------------------------
// normalisation, gate, combination, renormalisation

struct ZNormRule<T> {
    mode: ZNormMode,
    /// Per position: mean and `1/sqrt(var + ε)` of the statistics window.
    mean: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> Backward<T> for ZNormRule<T> {
    fn name(&self) -> &'static str {
        "z_normalize"
    }

    fn backward(&self, inputs: &[&NdArray<T>], _output: &NdArray<T>, grad_out: &[T], grads: &mut [Option<Vec<T>>]) {
        let Some(ge) = grads[0].as_mut() else { return };
        let e = inputs[0];
        let n = e.last_dim();
        for (r, xs) in e.data().chunks(n).enumerate() {
            let base = r * n;
            let gs = &grad_out[base..base + n];
            let mu = &self.mean[base..base + n];
            let inv = &self.inv_std[base..base + n];
            // centre on the row mean so the suffix sums below do not cancel
            let shift = xs.iter().copied().sum::<T>() / T::lit(n as f64);
            match self.mode {
                ZNormMode::Paper => {
                    let cnt = T::lit(n as f64);
                    let (m, iv) = (mu[0], inv[0]);
                    let sum_g: T = gs.iter().copied().sum();
                    let sum_gr: T = gs.iter().zip(xs).map(|(&g, &x)| g * (x - m)).sum();
                    for s in 0..n {
                        ge[base + s] += gs[s] * iv - sum_g * iv / cnt - (xs[s] - m) * sum_gr * iv * iv * iv / cnt;
                    }
                }
                ZNormMode::Causal => {
                    // suffix sums over t ≥ s of the window terms
                    let (mut a, mut bsum, mut csum) = (T::zero(), T::zero(), T::zero());
                    for s in (0..n).rev() {
                        let cnt = T::lit((s + 1) as f64);
                        let r = xs[s] - mu[s];
                        let w = gs[s] * r * inv[s] * inv[s] * inv[s] / cnt;
                        a += gs[s] * inv[s] / cnt;
                        bsum += w;
                        csum += w * (mu[s] - shift);
                        ge[base + s] += gs[s] * inv[s] - a - ((xs[s] - shift) * bsum - csum);
                    }
                }
            }
        }
    }
}

/// Normalises the last axis to zero mean and unit deviation:
/// `ẽ = (e − μ) / sqrt(var + ε)` with population variance. The causal mode
/// uses the statistics of each prefix, so `ẽ[0] = 0`.
pub fn z_normalize<T: Scalar>(tape: &mut Tape<T>, e: Var, mode: ZNormMode) -> Result<Var> {
    let v = tape.value(e);
    let n = v.last_dim();
    let eps = T::lit(ZNORM_EPS);
    let mut mean = Vec::with_capacity(v.len());
    let mut inv_std = Vec::with_capacity(v.len());
    let mut data = Vec::with_capacity(v.len());
    for xs in v.data().chunks(n) {
        match mode {
            ZNormMode::Paper => {
                let m = xs.iter().copied().sum::<T>() / T::lit(n as f64);
                let var = xs.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / T::lit(n as f64);
                let iv = T::one() / (var + eps).sqrt();
                for &x in xs {
                    mean.push(m);
                    inv_std.push(iv);
                    data.push((x - m) * iv);
                }
            }
            ZNormMode::Causal => {
                // Welford running statistics
                let (mut m, mut m2) = (T::zero(), T::zero());
                for (i, &x) in xs.iter().enumerate() {
                    let cnt = T::lit((i + 1) as f64);
                    let delta = x - m;
                    m += delta / cnt;
                    m2 += delta * (x - m);
                    let iv = T::one() / (m2 / cnt + eps).sqrt();
                    mean.push(m);
                    inv_std.push(iv);
                    data.push(if i == 0 { T::zero() } else { (x - m) * iv });
                }
            }
        }
    }
    let out = NdArray::new(v.shape(), data)?;
    Ok(tape.push(out, &[e], ZNormRule { mode, mean, inv_std }))
}

struct SigmoidGateRule;

impl<T: Scalar> Backward<T> for SigmoidGateRule {
    fn name(&self) -> &'static str {
        "gate_from_energy"
    }

    fn backward(&self, inputs: &[&NdArray<T>], output: &NdArray<T>, grad_out: &[T], grads: &mut [Option<Vec<T>>]) {
        let (e, tau, alpha) = (inputs[0], inputs[1].data(), inputs[2].data());
        let n = e.last_dim();
        let groups = tau.len();
        for (r, (xs, gs)) in e.data().chunks(n).zip(output.data().chunks(n)).enumerate() {
            let j = r % groups;
            for t in 0..n {
                let s = grad_out[r * n + t] * gs[t] * (T::one() - gs[t]);
                if let Some(g) = grads[0].as_mut() {
                    g[r * n + t] += s * alpha[j];
                }
                if let Some(g) = grads[1].as_mut() {
                    g[j] -= s * alpha[j];
                }
                if let Some(g) = grads[2].as_mut() {
                    g[j] += s * (xs[t] - tau[j]);
                }
            }
        }
    }
}

/// `g = σ(α(ẽ − τ))`. `tau` and `alpha` hold one value per group; rows of
/// `ẽ` (all axes but the last) cycle through the groups, so `ẽ: [B, H, S, T]`
/// pairs with `τ, α: [H·S]`.
pub fn gate_from_energy<T: Scalar>(tape: &mut Tape<T>, e: Var, tau: Var, alpha: Var) -> Result<Var> {
    let (ve, vt, va) = (tape.value(e), tape.value(tau), tape.value(alpha));
    let groups = vt.len();
    let n = ve.last_dim();
    let rows = ve.len() / n;
    if va.len() != groups || rows % groups != 0 {
        return Err(Error::shape("gate_from_energy", ve.shape(), vt.shape()));
    }
    let (td, ad) = (vt.data(), va.data());
    let data = ve
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let j = (i / n) % groups;
            sigmoid(ad[j] * (x - td[j]))
        })
        .collect();
    let out = NdArray::new(ve.shape(), data)?;
    Ok(tape.push(out, &[e, tau, alpha], SigmoidGateRule))
}

struct CombineRule;

impl<T: Scalar> Backward<T> for CombineRule {
    fn name(&self) -> &'static str {
        "combine_scale_gates"
    }

    fn backward(&self, inputs: &[&NdArray<T>], _output: &NdArray<T>, grad_out: &[T], grads: &mut [Option<Vec<T>>]) {
        let (g, w) = (inputs[0], inputs[1].data());
        let shape = g.shape();
        let (heads, scales, n) = (shape[1], shape[2], shape[3]);
        for b in 0..shape[0] {
            for h in 0..heads {
                for s in 0..scales {
                    let wi = h * scales + s;
                    let gi = ((b * heads + h) * scales + s) * n;
                    let oi = (b * heads + h) * n;
                    for t in 0..n {
                        let go = grad_out[oi + t];
                        if let Some(dg) = grads[0].as_mut() {
                            dg[gi + t] += w[wi] * go;
                        }
                        if let Some(dw) = grads[1].as_mut() {
                            dw[wi] += g.data()[gi + t] * go;
                        }
                    }
                }
            }
        }
    }
}

/// `g[b,h,t] = Σ_s w[h,s]·g_s[b,h,s,t]` for gates `[B, H, S, T]` and
/// simplex weights `[H, S]`.
pub fn combine_scale_gates<T: Scalar>(tape: &mut Tape<T>, gates: Var, weights: Var) -> Result<Var> {
    let (vg, vw) = (tape.value(gates), tape.value(weights));
    let shape = vg.shape().to_vec();
    if shape.len() != 4 || vw.shape() != [shape[1], shape[2]] {
        return Err(Error::contract(format!(
            "scale weights of shape {:?} do not match gates of shape {:?}",
            vw.shape(),
            shape
        )));
    }
    let (bl, heads, scales, n) = (shape[0], shape[1], shape[2], shape[3]);
    let mut data = vec![T::zero(); bl * heads * n];
    for b in 0..bl {
        for h in 0..heads {
            for s in 0..scales {
                let w = vw.data()[h * scales + s];
                let gi = ((b * heads + h) * scales + s) * n;
                let oi = (b * heads + h) * n;
                for t in 0..n {
                    data[oi + t] += w * vg.data()[gi + t];
                }
            }
        }
    }
    let out = NdArray::new(&[bl, heads, n], data)?;
    Ok(tape.push(out, &[gates, weights], CombineRule))
}

struct ApplyGateRule;

impl<T: Scalar> Backward<T> for ApplyGateRule {
    fn name(&self) -> &'static str {
        "apply_gate"
    }

    fn backward(&self, inputs: &[&NdArray<T>], output: &NdArray<T>, grad_out: &[T], grads: &mut [Option<Vec<T>>]) {
        let (a, g) = (inputs[0], inputs[1].data());
        let n = a.last_dim();
        let eps = T::lit(RENORM_EPS);
        for (r, row) in a.data().chunks(n).enumerate() {
            let gb = (r / n) * n;
            let gr = &g[gb..gb + n];
            let denom = row.iter().zip(gr).map(|(&x, &y)| x * y).sum::<T>() + eps;
            let go = &grad_out[r * n..(r + 1) * n];
            let hat = &output.data()[r * n..(r + 1) * n];
            let s: T = go.iter().zip(hat).map(|(&x, &y)| x * y).sum();
            for j in 0..n {
                let common = (go[j] - s) / denom;
                if let Some(da) = grads[0].as_mut() {
                    da[r * n + j] += gr[j] * common;
                }
                if let Some(dg) = grads[1].as_mut() {
                    dg[gb + j] += row[j] * common;
                }
            }
        }
    }
}

/// `Â[i,j] = A[i,j]·g[j] / (Σ_k A[i,k]·g[k] + ε)` for attention `[.., T, T]`
/// and gates `[.., T]`.
pub fn apply_gate<T: Scalar>(tape: &mut Tape<T>, attn: Var, gate: Var) -> Result<Var> {
    let (va, vg) = (tape.value(attn), tape.value(gate));
    let nd = va.ndim();
    if nd < 2 || vg.ndim() != nd - 1 || va.shape()[..nd - 1] != *vg.shape() || va.shape()[nd - 2] != va.shape()[nd - 1] {
        return Err(Error::shape("apply_gate", va.shape(), vg.shape()));
    }
    let n = va.last_dim();
    let eps = T::lit(RENORM_EPS);
    let mut data = Vec::with_capacity(va.len());
    for (r, row) in va.data().chunks(n).enumerate() {
        let gb = (r / n) * n;
        let gr = &vg.data()[gb..gb + n];
        let denom = row.iter().zip(gr).map(|(&x, &y)| x * y).sum::<T>() + eps;
        data.extend(row.iter().zip(gr).map(|(&x, &y)| x * y / denom));
    }
    let out = NdArray::new(va.shape(), data)?;
    Ok(tape.push(out, &[attn, gate], ApplyGateRule))
}

// ---------------------------------------------------------------------------
// per-layer gate

#[derive(Clone, Debug)]
pub struct ConvScale {
    pub taps: usize,
    pub re: ParamId,
    pub im: ParamId,
    pub bias_re: ParamId,
    pub bias_im: ParamId,
}

#[derive(Clone, Debug)]
pub enum EnergyParams {
    /// `w: [H·S, d]`, `b: [H·S]`.
    Linear { w: ParamId, b: ParamId },
    Conv(Vec<ConvScale>),
    /// `ω₀, σ: [H·S]`.
    Morlet { omega: ParamId, sigma: ParamId },
    Daubechies(wavelets::DaubechiesFilter),
}

/// Gate state of one attention layer.
#[derive(Clone, Debug)]
pub struct GateLayer {
    pub variant: GateVariant,
    pub heads: usize,
    pub scales: usize,
    pub energy: EnergyParams,
    /// `[H·S]`.
    pub tau: ParamId,
    /// `[H·S]`.
    pub alpha: ParamId,
    /// Scale logits `[H, S]` for learned mixing.
    pub mix: Option<ParamId>,
}

/// Intermediate values of one gate evaluation.
#[derive(Clone, Copy, Debug)]
pub struct GateTrace {
    /// Raw energies `[B, H, S, T]`.
    pub energy: Var,
    /// Normalised energies `[B, H, S, T]`.
    pub normalized: Var,
    /// Per-scale gates `[B, H, S, T]`.
    pub per_scale: Var,
    /// Combined gate `[B, H, T]`.
    pub gate: Var,
}

/// Gate parameters of one (head, scale), as recorded in snapshots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateScaleState {
    pub head: usize,
    pub scale: usize,
    pub tau: f64,
    pub alpha: f64,
    pub omega_sigma: Option<f64>,
    pub scale_weight: f64,
}

/// Per-head summary of one gate evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDiagnostics {
    pub head: usize,
    pub energy_mean: f64,
    pub energy_std: f64,
    pub tau: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Fraction of positions with combined gate above one half.
    pub active_fraction: f64,
    pub scale_weights: Vec<f64>,
}

fn normal_array<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> NdArray<T> {
    let dist = Normal::new(0.0, std).expect("positive deviation");
    let n = shape.iter().product();
    NdArray::new(shape, (0..n).map(|_| T::lit(dist.sample(rng))).collect()).expect("shape and length agree")
}

fn softmax_rows(logits: &[f64], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(width) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = ex.iter().sum();
        out.extend(ex.iter().map(|v| v / s));
    }
    out
}

impl GateLayer {
    /// Creates the gate parameters of one layer under `prefix`. Returns
    /// `None` for the ungated baseline.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        variant: GateVariant,
        heads: usize,
        d_model: usize,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut R,
        init: GateInit,
    ) -> Result<Option<GateLayer>> {
        if !variant.is_gated() {
            return Ok(None);
        }
        let scales = variant.n_scales();
        let hs = heads * scales;
        let gate = ParamKind::Gate;
        let energy = match variant {
            GateVariant::Ega1 | GateVariant::Ega2 | GateVariant::Ega4 => EnergyParams::Linear {
                w: store.add(format!("{prefix}.w_proj"), normal_array(&[hs, d_model], GATE_INIT_STD, rng), gate, true),
                b: store.add(format!("{prefix}.b"), NdArray::zeros(&[hs]), gate, false),
            },
            GateVariant::Egac => EnergyParams::Conv(
                CONV_FILTER_LENGTHS
                    .iter()
                    .enumerate()
                    .map(|(s, &k)| ConvScale {
                        taps: k,
                        re: store.add(format!("{prefix}.conv{s}.re"), normal_array(&[heads, d_model, k], GATE_INIT_STD, rng), gate, true),
                        im: store.add(format!("{prefix}.conv{s}.im"), normal_array(&[heads, d_model, k], GATE_INIT_STD, rng), gate, true),
                        bias_re: store.add(format!("{prefix}.conv{s}.bias_re"), NdArray::zeros(&[heads]), gate, false),
                        bias_im: store.add(format!("{prefix}.conv{s}.bias_im"), NdArray::zeros(&[heads]), gate, false),
                    })
                    .collect(),
            ),
            GateVariant::Egam => {
                let mut omega = Vec::with_capacity(hs);
                let mut sigma = Vec::with_capacity(hs);
                for _ in 0..heads {
                    for base in MORLET_INIT_SIGMAS {
                        let s = base * (1.0 + rng.random_range(-0.05..0.05));
                        sigma.push(T::lit(s));
                        omega.push(T::lit(MORLET_INIT_PRODUCT / s));
                    }
                }
                EnergyParams::Morlet {
                    omega: store.add(format!("{prefix}.omega0"), NdArray::new(&[hs], omega)?, gate, false),
                    sigma: store.add(format!("{prefix}.sigma"), NdArray::new(&[hs], sigma)?, gate, false),
                }
            }
            GateVariant::Egadb2 | GateVariant::Egadb4 => {
                EnergyParams::Daubechies(wavelets::daubechies_coefficients(variant.daubechies_order().expect("db variant"))?)
            }
            GateVariant::Base => unreachable!("handled above"),
        };
        let tau = store.add(format!("{prefix}.tau"), NdArray::full(&[hs], T::lit(init.tau)), gate, false);
        let alpha = store.add(format!("{prefix}.alpha"), NdArray::full(&[hs], T::lit(init.alpha)), gate, false);
        let mix = variant
            .learned_mix()
            .then(|| store.add(format!("{prefix}.scale_logits"), NdArray::zeros(&[heads, scales]), gate, false));
        Ok(Some(GateLayer {
            variant,
            heads,
            scales,
            energy,
            tau,
            alpha,
            mix,
        }))
    }

    /// Raw energies `[B, H, S, T]` of the layer input `x: [B, T, d]`.
    pub fn energies<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, mode: ZNormMode) -> Result<Var> {
        let (b_len, t_len, _) = batch_dims("gate", tape.shape(x))?;
        let pad = mode.padding();
        match &self.energy {
            EnergyParams::Linear { w, b } => {
                let e = energy_linear(tape, x, vars[w.0], vars[b.0])?;
                tape.reshape(e, &[b_len, self.heads, self.scales, t_len])
            }
            EnergyParams::Conv(bank) => {
                let mut parts = Vec::with_capacity(bank.len());
                for cs in bank {
                    let e = energy_conv(tape, x, vars[cs.re.0], vars[cs.im.0], vars[cs.bias_re.0], vars[cs.bias_im.0], pad)?;
                    parts.push(tape.reshape(e, &[b_len, self.heads, 1, t_len])?);
                }
                tape.concat(&parts, 2)
            }
            EnergyParams::Morlet { omega, sigma } => energy_morlet(tape, x, vars[omega.0], vars[sigma.0], self.heads, pad),
            EnergyParams::Daubechies(filter) => energy_dwt(tape, x, filter, DWT_LEVELS, self.heads, pad),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, mode: ZNormMode) -> Result<GateTrace> {
        let energy = self.energies(tape, vars, x, mode)?;
        let normalized = z_normalize(tape, energy, mode)?;
        let per_scale = gate_from_energy(tape, normalized, vars[self.tau.0], vars[self.alpha.0])?;
        let shape = tape.shape(per_scale).to_vec();
        let gate = if self.scales == 1 {
            tape.reshape(per_scale, &[shape[0], shape[1], shape[3]])?
        } else {
            let weights = match self.mix {
                Some(id) => tape.softmax_lastdim(vars[id.0], None)?,
                None => tape.constant(NdArray::full(&[self.heads, self.scales], T::lit(1.0 / self.scales as f64))),
            };
            combine_scale_gates(tape, per_scale, weights)?
        };
        Ok(GateTrace {
            energy,
            normalized,
            per_scale,
            gate,
        })
    }

    /// Scale weights `[H·S]` currently in effect.
    pub fn scale_weights<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<f64> {
        match self.mix {
            Some(id) => {
                let logits: Vec<f64> = store.value(id).data().iter().map(|v| v.as_f64()).collect();
                softmax_rows(&logits, self.scales)
            }
            None => vec![1.0 / self.scales as f64; self.heads * self.scales],
        }
    }

    pub fn omega_sigma<T: Scalar>(&self, store: &ParamStore<T>) -> Option<Vec<f64>> {
        match &self.energy {
            EnergyParams::Morlet { omega, sigma } => Some(
                store
                    .value(*omega)
                    .data()
                    .iter()
                    .zip(store.value(*sigma).data())
                    .map(|(w, s)| w.as_f64() * s.as_f64())
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Projects Morlet parameters back into the admissible region
    /// (`ω₀ ≥ MORLET_MIN_OMEGA`, `ω₀σ ≥ 5`). Returns how many entries moved.
    pub fn enforce_admissibility<T: Scalar>(&self, store: &mut ParamStore<T>) -> usize {
        let EnergyParams::Morlet { omega, sigma } = &self.energy else {
            return 0;
        };
        let mut clamped = 0;
        for i in 0..self.heads * self.scales {
            let mut moved = false;
            let mut w = store.value(*omega).data()[i].as_f64();
            if !(w >= MORLET_MIN_OMEGA) {
                w = MORLET_MIN_OMEGA;
                store.value_mut(*omega).data_mut()[i] = T::lit(w);
                moved = true;
            }
            let w = store.value(*omega).data()[i].as_f64();
            let s = store.value(*sigma).data()[i].as_f64();
            if !(s * w >= ADMISSIBILITY) {
                // round up so the stored product clears the bound
                let mut v = T::lit(ADMISSIBILITY / w);
                while v.as_f64() * w < ADMISSIBILITY {
                    v = v + v * T::epsilon();
                }
                store.value_mut(*sigma).data_mut()[i] = v;
                moved = true;
            }
            clamped += moved as usize;
        }
        clamped
    }

    pub fn snapshot<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<GateScaleState> {
        let tau = store.value(self.tau).data();
        let alpha = store.value(self.alpha).data();
        let weights = self.scale_weights(store);
        let products = self.omega_sigma(store);
        (0..self.heads * self.scales)
            .map(|i| GateScaleState {
                head: i / self.scales,
                scale: i % self.scales,
                tau: tau[i].as_f64(),
                alpha: alpha[i].as_f64(),
                omega_sigma: products.as_ref().map(|p| p[i]),
                scale_weight: weights[i],
            })
            .collect()
    }

    /// Summaries of an evaluated trace.
    pub fn diagnostics<T: Scalar>(&self, tape: &Tape<T>, trace: &GateTrace, store: &ParamStore<T>) -> Vec<GateDiagnostics> {
        let energy = tape.value(trace.energy);
        let gate = tape.value(trace.gate);
        let es = energy.shape();
        let (bl, t_len) = (es[0], es[3]);
        let tau = store.value(self.tau).data();
        let alpha = store.value(self.alpha).data();
        let weights = self.scale_weights(store);
        (0..self.heads)
            .map(|h| {
                let mut vals = Vec::with_capacity(bl * self.scales * t_len);
                let mut active = 0usize;
                for b in 0..bl {
                    for s in 0..self.scales {
                        let base = ((b * self.heads + h) * self.scales + s) * t_len;
                        vals.extend(energy.data()[base..base + t_len].iter().map(|v| v.as_f64()));
                    }
                    let base = (b * self.heads + h) * t_len;
                    active += gate.data()[base..base + t_len].iter().filter(|g| g.as_f64() > 0.5).count();
                }
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let r = h * self.scales..(h + 1) * self.scales;
                GateDiagnostics {
                    head: h,
                    energy_mean: mean,
                    energy_std: var.sqrt(),
                    tau: tau[r.clone()].iter().map(|v| v.as_f64()).collect(),
                    alpha: alpha[r.clone()].iter().map(|v| v.as_f64()).collect(),
                    active_fraction: active as f64 / (bl * t_len) as f64,
                    scale_weights: weights[r].to_vec(),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use proptest::prelude::prop;
    use proptest::{prop_assert, prop_assume, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arr(shape: &[usize], data: &[f64]) -> NdArray<f64> {
        NdArray::from_f64(shape, data).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> NdArray<f64> {
        let n = shape.iter().product();
        NdArray::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn eval<F: FnOnce(&mut Tape<f64>) -> Result<Var>>(f: F) -> NdArray<f64> {
        let mut tape = Tape::inference();
        let v = f(&mut tape).unwrap();
        tape.value(v).clone()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in GateVariant::ALL {
            assert_eq!(v.name().parse::<GateVariant>().unwrap(), v);
            assert_eq!(v.label().parse::<GateVariant>().unwrap(), v);
        }
        let err = "bogus".parse::<GateVariant>().unwrap_err().to_string();
        assert!(err.contains("egadb4"), "{err}");
        let scales: Vec<usize> = GateVariant::ALL.iter().map(|v| v.n_scales()).collect();
        assert_eq!(scales, vec![0, 1, 2, 4, 4, 4, 1, 1]);
    }

    #[test]
    fn linear_energy_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 4], &mut rng);
        let e = eval(|t| {
            let (x, w, b) = (t.constant(x.clone()), t.constant(NdArray::zeros(&[1, 4])), t.constant(arr(&[1], &[0.7])));
            energy_linear(t, x, w, b)
        });
        assert!(e.data().iter().all(|&v| v == 0.7));

        let basis = arr(&[1, 4, 4], &[1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.]);
        let w = arr(&[1, 4], &[0.5, -1.0, 2.0, 3.5]);
        let e = eval(|t| {
            let (x, w, b) = (t.constant(basis.clone()), t.constant(w.clone()), t.constant(arr(&[1], &[0.0])));
            energy_linear(t, x, w, b)
        });
        assert_eq!(e.data(), w.data());

        let w = random(&[1, 4], &mut rng);
        let e = eval(|t| {
            let (xv, wv, b) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(arr(&[1], &[0.25])));
            energy_linear(t, xv, wv, b)
        });
        for b in 0..2 {
            for s in 0..3 {
                let naive: f64 = (0..4).map(|c| x.get(&[b, s, c]) * w.data()[c]).sum::<f64>() + 0.25;
                assert!((e.get(&[b, 0, s]) - naive).abs() < 1e-12);
            }
        }
    }

    fn znorm(data: &[f64], mode: ZNormMode) -> Vec<f64> {
        eval(|t| {
            let e = t.constant(arr(&[1, data.len()], data));
            z_normalize(t, e, mode)
        })
        .into_data()
    }

    #[test]
    fn znorm_examples() {
        for mode in [ZNormMode::Paper, ZNormMode::Causal] {
            assert!(znorm(&[2.5; 6], mode).iter().all(|&v| v == 0.0));
        }
        let p = znorm(&[1.0, -1.0], ZNormMode::Paper);
        let want = 1.0 / (1.0 + ZNORM_EPS).sqrt();
        assert!((p[0] - want).abs() < 1e-15 && (p[1] + want).abs() < 1e-15);
        // prefix [1]: zero; prefix [1,-1]: μ=0, var=1
        let c = znorm(&[1.0, -1.0], ZNormMode::Causal);
        assert_eq!(c[0], 0.0);
        assert!((c[1] + want).abs() < 1e-15);
    }

    #[test]
    fn causal_znorm_matches_direct_prefix_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e: Vec<f64> = (0..20).map(|_| rng.random_range(-3.0..5.0)).collect();
        let c = znorm(&e, ZNormMode::Causal);
        for t in 1..e.len() {
            let w = &e[..=t];
            let m = w.iter().sum::<f64>() / w.len() as f64;
            let v = w.iter().map(|x| (x - m).powi(2)).sum::<f64>() / w.len() as f64;
            assert!((c[t] - (e[t] - m) / (v + ZNORM_EPS).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_examples() {
        let g = |e: f64, tau: f64, alpha: f64| {
            eval(|t| {
                let (ev, tv, av) = (t.constant(arr(&[1], &[e])), t.constant(arr(&[1], &[tau])), t.constant(arr(&[1], &[alpha])));
                gate_from_energy(t, ev, tv, av)
            })
            .item()
        };
        assert_eq!(g(0.3, 0.3, 2.0), 0.5);
        assert_eq!(g(7.0, 0.3, 0.0), 0.5);
        let want = 1.0 / (1.0 + (-1.43f64).exp());
        assert!((g(1.0, 0.35, 2.2) - want).abs() < 1e-15);
        assert!((g(1.0, 0.35, 2.2) - 0.8069).abs() < 1e-4);
    }

    fn gated(a: &NdArray<f64>, g: &NdArray<f64>) -> NdArray<f64> {
        eval(|t| {
            let (av, gv) = (t.constant(a.clone()), t.constant(g.clone()));
            apply_gate(t, av, gv)
        })
    }

    #[test]
    fn apply_gate_examples() {
        let a = arr(&[2, 2], &[0.5, 0.5, 0.3, 0.7]);
        let out = gated(&a, &arr(&[2], &[1.0, 0.25]));
        assert!((out.data()[0] - 0.8).abs() < 1e-7 && (out.data()[1] - 0.2).abs() < 1e-7);
        let same = gated(&a, &arr(&[2], &[0.4, 0.4]));
        assert!(same.max_abs_diff(&a) < 1e-6);
        assert!((gated(&arr(&[1, 1], &[1.0]), &arr(&[1], &[0.3])).item() - 1.0).abs() < 1e-6);
    }

    /// Causal softmax rows with random logits.
    fn random_attention(rows: usize, n: usize, rng: &mut ChaCha8Rng) -> NdArray<f64> {
        let mut data = Vec::with_capacity(rows * n * n);
        for _ in 0..rows {
            for i in 0..n {
                let logits: Vec<f64> = (0..=i).map(|_| rng.random_range(-4.0..4.0)).collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                for j in 0..n {
                    data.push(if j <= i { (logits[j] - mx).exp() / s } else { 0.0 });
                }
            }
        }
        arr(&[rows, n, n], &data)
    }

    #[test]
    fn renormalised_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..1000 {
            let n = 1 + trial % 12;
            let a = random_attention(2, n, &mut rng);
            // rows sum to S/(S + ε) with S = Σ A·g, so the tolerance needs S ≥ 1e-2
            let g = NdArray::new(&[2, n], (0..2 * n).map(|_| rng.random_range(0.05..1.0)).collect()).unwrap();
            let out = gated(&a, &g);
            for (row, arow) in out.data().chunks(n).zip(a.data().chunks(n)) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                for (x, y) in row.iter().zip(arow) {
                    assert_eq!(*y == 0.0, *x == 0.0, "mask pattern changed");
                }
            }
        }
    }

    #[test]
    fn constant_gate_preserves_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_attention(3, 9, &mut rng);
        let out = gated(&a, &NdArray::full(&[3, 9], 0.37));
        let argmax = |r: &[f64]| (0..r.len()).max_by(|&p, &q| r[p].total_cmp(&r[q])).unwrap();
        for (x, y) in out.data().chunks(9).zip(a.data().chunks(9)) {
            assert_eq!(argmax(x), argmax(y));
        }
    }

    #[test]
    fn combine_examples() {
        let comb = |g: &[f64], w: &[f64], s: usize| {
            eval(|t| {
                let (gv, wv) = (t.constant(arr(&[1, 1, s, g.len() / s], g)), t.constant(arr(&[1, s], w)));
                combine_scale_gates(t, gv, wv)
            })
        };
        assert!((comb(&[0.2, 0.8], &[0.5, 0.5], 2).item() - 0.5).abs() < 1e-15);
        let same = comb(&[0.3, 0.6, 0.3, 0.6], &[0.25, 0.75], 2);
        assert!(same.max_abs_diff(&arr(&[1, 1, 2], &[0.3, 0.6])) < 1e-15);
        assert_eq!(comb(&[0.1, 0.9, 0.4, 0.5], &[0.0, 1.0], 2).data(), &[0.4, 0.5]);
        let mut tape = Tape::<f64>::inference();
        let g = tape.constant(NdArray::zeros(&[1, 1, 2, 3]));
        let w = tape.constant(NdArray::zeros(&[1, 3]));
        assert!(matches!(combine_scale_gates(&mut tape, g, w), Err(Error::Contract(_))));
    }

    fn conv_energy(x: &NdArray<f64>, re: &NdArray<f64>, im: &NdArray<f64>, bias: f64, pad: PadMode) -> NdArray<f64> {
        let heads = re.shape()[0];
        eval(|t| {
            let (xv, r, i) = (t.constant(x.clone()), t.constant(re.clone()), t.constant(im.clone()));
            let br = t.constant(NdArray::full(&[heads], bias));
            let bi = t.constant(NdArray::zeros(&[heads]));
            energy_conv(t, xv, r, i, br, bi, pad)
        })
    }

    #[test]
    fn conv_energy_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (re, im) = (random(&[2, 3, 3], &mut rng), random(&[2, 3, 3], &mut rng));
        let zero = conv_energy(&NdArray::zeros(&[1, 6, 3]), &re, &im, 0.0, PadMode::Reflect);
        assert!(zero.data().iter().all(|&v| v == 0.0));

        // unit impulse at t=2 on every channel, zero padding: hand-unrolled k=3
        let mut x = NdArray::zeros(&[1, 6, 3]);
        for c in 0..3 {
            x.data_mut()[2 * 3 + c] = 1.0;
        }
        let e = conv_energy(&x, &re, &im, 0.0, PadMode::Zero);
        for h in 0..2 {
            for t in 0..6 {
                let mut want = 0.0;
                if (2..5).contains(&t) {
                    let j = t - 2;
                    for c in 0..3 {
                        want += re.get(&[h, c, j]).powi(2) + im.get(&[h, c, j]).powi(2);
                    }
                }
                assert!((e.get(&[0, h, t]) - want / 3.0).abs() < 1e-14);
            }
        }
    }

    fn perturbed_prefix_unchanged(f: impl Fn(&NdArray<f64>) -> NdArray<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(&[2, 10, 3], &mut rng);
        let base = f(&x);
        let n = base.last_dim();
        for t in 0..9 {
            let mut y = x.clone();
            for b in 0..2 {
                for c in 0..3 {
                    y.data_mut()[(b * 10 + t + 1) * 3 + c] += 0.9;
                }
            }
            let out = f(&y);
            for (p, q) in base.data().chunks(n).zip(out.data().chunks(n)) {
                for i in 0..=t {
                    assert!((p[i] - q[i]).abs() < 1e-12, "position {i} moved after change at {}", t + 1);
                }
            }
        }
    }

    #[test]
    fn energies_are_causal_with_edge_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (re, im) = (random(&[2, 3, 7], &mut rng), random(&[2, 3, 7], &mut rng));
        perturbed_prefix_unchanged(|x| conv_energy(x, &re, &im, 0.1, PadMode::Edge));
        perturbed_prefix_unchanged(|x| {
            eval(|t| {
                let xv = t.constant(x.clone());
                let w = t.constant(arr(&[2], &[2.0, 0.8]));
                let s = t.constant(arr(&[2], &[3.1, 6.7]));
                energy_morlet(t, xv, w, s, 1, PadMode::Edge)
            })
        });
        for order in [2, 4] {
            let f = wavelets::daubechies_coefficients(order).unwrap();
            perturbed_prefix_unchanged(|x| {
                eval(|t| {
                    let xv = t.constant(x.clone());
                    energy_dwt(t, xv, &f, DWT_LEVELS, 2, PadMode::Edge)
                })
            });
        }
    }

    #[test]
    fn reflect_padding_is_not_causal() {
        let f = wavelets::daubechies_coefficients(2).unwrap();
        let run = |x: &NdArray<f64>| {
            eval(|t| {
                let xv = t.constant(x.clone());
                energy_dwt(t, xv, &f, 1, 1, PadMode::Reflect)
            })
        };
        let x = arr(&[1, 6, 1], &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let mut y = x.clone();
        y.data_mut()[1] = 1.0;
        assert_ne!(run(&x).data()[0], run(&y).data()[0]);
    }

    fn morlet_energy(x: &NdArray<f64>, w: f64, s: f64) -> NdArray<f64> {
        eval(|t| {
            let xv = t.constant(x.clone());
            let (wv, sv) = (t.constant(arr(&[1], &[w])), t.constant(arr(&[1], &[s])));
            energy_morlet(t, xv, wv, sv, 1, PadMode::Reflect)
        })
    }

    #[test]
    fn morlet_energy_of_constant_is_small() {
        let x = NdArray::full(&[1, 64, 2], 1.0);
        for (w, s) in [(2.0, 2.6), (1.0, 5.3), (0.5, 12.0)] {
            let e = morlet_energy(&x, w, s);
            assert!(e.data().iter().all(|&v| v < 4e-4), "({w},{s}) {:?}", e.data().iter().cloned().fold(0.0, f64::max));
        }
    }

    #[test]
    fn morlet_energy_peaks_at_centre_frequency() {
        let (w0, s) = (1.2, 6.3);
        let n = 160;
        let probe = |w: f64| {
            let data: Vec<f64> = (0..n).map(|t| (w * t as f64).cos()).collect();
            let e = morlet_energy(&arr(&[1, n, 1], &data), w0, s);
            e.data()[80..].iter().sum::<f64>()
        };
        let freqs: Vec<f64> = [0.4, 0.6, 0.8, 0.9, 1.0, 1.1, 1.3, 1.6].iter().map(|f| f * w0).collect();
        let energies: Vec<f64> = freqs.iter().map(|&w| probe(w)).collect();
        let best = (0..8).max_by(|&p, &q| energies[p].total_cmp(&energies[q])).unwrap();
        assert_eq!(freqs[best], w0, "{energies:?}");
    }

    #[test]
    fn dwt_energy_oracles() {
        for order in [2, 4] {
            let f = wavelets::daubechies_coefficients(order).unwrap();
            let run = |x: &NdArray<f64>, pad| {
                eval(|t| {
                    let xv = t.constant(x.clone());
                    energy_dwt(t, xv, &f, DWT_LEVELS, 1, pad)
                })
            };
            let flat = run(&NdArray::full(&[1, 8, 2], 3.0), PadMode::Reflect);
            assert!(flat.data().iter().all(|&v| v < 1e-20));
            let step = arr(&[1, 8, 1], &[0., 0., 0., 0., 1., 1., 1., 1.]);
            let e = run(&step, PadMode::Edge);
            assert!(e.data()[..4].iter().all(|&v| v < 1e-20));
            assert!(e.data()[4..].iter().sum::<f64>() > 1e-2, "{:?}", e.data());
        }
    }

    #[test]
    fn admissibility_is_restored_after_adversarial_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let layer = GateLayer::init(GateVariant::Egam, 3, 4, "g", &mut store, &mut rng, GateInit::default())
            .unwrap()
            .unwrap();
        assert_eq!(layer.enforce_admissibility(&mut store), 0);
        let EnergyParams::Morlet { omega, sigma } = layer.energy.clone() else { panic!() };
        for trial in 0..200 {
            for i in 0..12 {
                let w = rng.random_range(-0.5..4.0);
                store.value_mut(omega).data_mut()[i] = w;
                let target = if trial == 0 { 4.9 } else { rng.random_range(-2.0..8.0) };
                store.value_mut(sigma).data_mut()[i] = target / w;
            }
            layer.enforce_admissibility(&mut store);
            for p in layer.omega_sigma(&store).unwrap() {
                assert!(p >= 5.0 - 1e-9, "{p}");
            }
        }
        store.value_mut(omega).data_mut()[0] = 1.0;
        store.value_mut(sigma).data_mut()[0] = 4.9;
        assert!(layer.enforce_admissibility(&mut store) >= 1);
        assert!((layer.omega_sigma(&store).unwrap()[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn dwt_filters_are_not_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        GateLayer::init(GateVariant::Egadb4, 8, 256, "g", &mut store, &mut rng, GateInit::default()).unwrap();
        assert_eq!(store.count(ParamKind::Gate), 16);
    }

    #[test]
    fn gate_parameter_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut count = |v| {
            let mut store = ParamStore::<f64>::new();
            GateLayer::init(v, 8, 256, "g", &mut store, &mut rng, GateInit::default()).unwrap();
            store.count(ParamKind::Gate)
        };
        assert_eq!(count(GateVariant::Base), 0);
        assert_eq!(count(GateVariant::Ega1), 8 * 259);
        assert_eq!(count(GateVariant::Ega2), 2 * 8 * 259);
        assert_eq!(count(GateVariant::Ega4), 4 * 8 * 259);
        assert_eq!(count(GateVariant::Egam), 8 * 20);
        assert_eq!(count(GateVariant::Egac), 8 * (2 * 256 * 56 + 4 * 4 + 4));
    }

    fn check(f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>, params: Vec<(&str, NdArray<f64>)>) {
        let params: Vec<(String, NdArray<f64>)> = params.into_iter().map(|(n, v)| (n.to_string(), v)).collect();
        let report = grad_check(f, &params, 1e-6).unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    /// Random linear read-out so every output element matters.
    fn readout(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = t.shape(y).to_vec();
        let w = t.constant(random(&shape, &mut rng));
        let p = t.mul(y, w)?;
        Ok(t.sum(p))
    }

    #[test]
    fn znorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for mode in [ZNormMode::Paper, ZNormMode::Causal] {
            let e = random(&[2, 3, 7], &mut rng).map(|v| 4.0 + 2.0 * v);
            check(
                |t, v| {
                    let z = z_normalize(t, v[0], mode)?;
                    readout(t, z, 1)
                },
                vec![("e", e)],
            );
        }
    }

    #[test]
    fn gate_pipeline_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let e = random(&[2, 2, 3, 5], &mut rng);
        check(
            |t, v| {
                let g = gate_from_energy(t, v[0], v[1], v[2])?;
                let w = t.softmax_lastdim(v[3], None)?;
                let c = combine_scale_gates(t, g, w)?;
                readout(t, c, 2)
            },
            vec![
                ("e", e),
                ("tau", random(&[6], &mut rng)),
                ("alpha", random(&[6], &mut rng).map(|v| 2.0 + v)),
                ("logits", random(&[2, 3], &mut rng)),
            ],
        );
        // dense rows: a single-entry row has a gradient of order ε
        let a = random(&[3, 5, 5], &mut rng).map(|v| 1.0 + v);
        let g = NdArray::new(&[3, 5], (0..15).map(|_| rng.random_range(0.05..1.0)).collect()).unwrap();
        check(
            |t, v| {
                let out = apply_gate(t, v[0], v[1])?;
                readout(t, out, 3)
            },
            vec![("A", a), ("g", g)],
        );
    }

    #[test]
    fn energy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for pad in [PadMode::Reflect, PadMode::Edge, PadMode::Zero] {
            check(
                |t, v| {
                    let e = energy_conv(t, v[0], v[1], v[2], v[3], v[4], pad)?;
                    readout(t, e, 4)
                },
                vec![
                    ("x", random(&[2, 5, 3], &mut rng)),
                    ("re", random(&[2, 3, 7], &mut rng)),
                    ("im", random(&[2, 3, 7], &mut rng)),
                    ("bias_re", random(&[2], &mut rng)),
                    ("bias_im", random(&[2], &mut rng)),
                ],
            );
            check(
                |t, v| {
                    let e = energy_morlet(t, v[0], v[1], v[2], 2, pad)?;
                    readout(t, e, 5)
                },
                vec![
                    ("x", random(&[2, 6, 3], &mut rng)),
                    ("omega", arr(&[4], &[2.1, 1.3, 0.9, 2.8])),
                    ("sigma", arr(&[4], &[2.6, 4.3, 6.1, 1.9])),
                ],
            );
            let f = wavelets::daubechies_coefficients(2).unwrap();
            check(
                |t, v| {
                    let e = energy_dwt(t, v[0], &f, DWT_LEVELS, 3, pad)?;
                    readout(t, e, 6)
                },
                vec![("x", random(&[2, 6, 3], &mut rng))],
            );
        }
    }

    proptest! {
        #[test]
        fn gate_is_monotone_and_bounded(
            e in prop::collection::vec(-6.0f64..6.0, 2..20),
            tau in -1.0f64..1.0,
            alpha in 0.01f64..5.0,
            bump in 0.0f64..3.0,
            idx in 0usize..20,
        ) {
            let n = e.len();
            let idx = idx % n;
            let gates = |e: &[f64]| eval(|t| {
                let (ev, tv, av) = (t.constant(arr(&[n], e)), t.constant(arr(&[1], &[tau])), t.constant(arr(&[1], &[alpha])));
                gate_from_energy(t, ev, tv, av)
            });
            let g = gates(&e);
            prop_assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
            let mut up = e.clone();
            up[idx] += bump;
            prop_assert!(gates(&up).data()[idx] >= g.data()[idx]);
        }

        #[test]
        fn paper_znorm_standardises(e in prop::collection::vec(-50.0f64..50.0, 3..40)) {
            let m = e.iter().sum::<f64>() / e.len() as f64;
            let var = e.iter().map(|x| (x - m).powi(2)).sum::<f64>() / e.len() as f64;
            prop_assume!(var > 1.0);
            let z = znorm(&e, ZNormMode::Paper);
            let zm = z.iter().sum::<f64>() / z.len() as f64;
            let zs = (z.iter().map(|x| (x - zm).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
            prop_assert!(zm.abs() < 1e-6);
            prop_assert!((zs - 1.0).abs() < 1e-4);
        }
    }
}
