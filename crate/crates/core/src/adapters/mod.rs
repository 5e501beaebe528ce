//! Low-rank adapters over frozen convolution kernels.
//!
//! Six methods are supported. Three factorize the weight update directly:
//!
//! * **LoRA-C**: `ΔW[o,i,h,w] = Σ_r B[o,h,r]·A[r,i,w]`
//! * **convLoRA**: `ΔW[o,i,h,w] = Σ_r B[o,r]·A[r,i,h,w]`
//! * **CP-LoRA**: `ΔW = Σ_r a1_r ∘ a2_r ∘ a3_r ∘ a4_r`
//!
//! and the effective kernel is `W0 + (α/R)·ΔW`. The DoRA variants apply the
//! same update to the direction of the kernel and learn a per-output-channel
//! magnitude:
//!
//! ```text
//! V = W0 + (α/R)·ΔW
//! W[o] = m[o] · V[o] / (‖V[o]‖_F + ε)
//! ```
//!
//! where `V[o]` is the (c_in, k_h, k_w) slice of output channel `o`.

mod factors;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, Array4, ArrayView4, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use factors::{
    delta_convlora, delta_cp, delta_lorac, ConvLoraFactors, CpFactors, Factors, LoraCFactors,
};

/// A frozen convolution kernel `(c_out, c_in, k_h, k_w)` with optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeight {
    pub data: Array4<f64>,
    pub bias: Option<Array1<f64>>,
}

impl ConvWeight {
    pub fn new(data: Array4<f64>, bias: Option<Array1<f64>>) -> Result<Self> {
        let (c_out, c_in, kh, kw) = data.dim();
        if c_out == 0 || c_in == 0 || kh == 0 || kw == 0 {
            return Err(Error::Shape(format!(
                "kernel dims must be positive, got {:?}",
                data.dim()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != c_out {
                return Err(Error::Shape(format!(
                    "bias has {} entries for {c_out} output channels",
                    b.len()
                )));
            }
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
            bias,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self
                .bias
                .as_ref()
                .is_none_or(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// The six adapter flavours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterMethod {
    LoraC,
    ConvLora,
    CpLora,
    DoraC,
    ConvDora,
    CpDora,
}

/// How the update tensor is factorized, independent of DoRA.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factorization {
    LoraC,
    ConvLora,
    Cp,
}

impl AdapterMethod {
    pub const ALL: [AdapterMethod; 6] = [
        AdapterMethod::LoraC,
        AdapterMethod::ConvLora,
        AdapterMethod::CpLora,
        AdapterMethod::DoraC,
        AdapterMethod::ConvDora,
        AdapterMethod::CpDora,
    ];

    pub fn is_dora(self) -> bool {
        matches!(
            self,
            AdapterMethod::DoraC | AdapterMethod::ConvDora | AdapterMethod::CpDora
        )
    }

    pub fn factorization(self) -> Factorization {
        match self {
            AdapterMethod::LoraC | AdapterMethod::DoraC => Factorization::LoraC,
            AdapterMethod::ConvLora | AdapterMethod::ConvDora => Factorization::ConvLora,
            AdapterMethod::CpLora | AdapterMethod::CpDora => Factorization::Cp,
        }
    }

    /// Short lowercase key used on the command line and in manifests.
    pub fn key(self) -> &'static str {
        match self {
            AdapterMethod::LoraC => "lorac",
            AdapterMethod::ConvLora => "convlora",
            AdapterMethod::CpLora => "cplora",
            AdapterMethod::DoraC => "dorac",
            AdapterMethod::ConvDora => "convdora",
            AdapterMethod::CpDora => "cpdora",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            AdapterMethod::LoraC => "LoRA-C",
            AdapterMethod::ConvLora => "convLoRA",
            AdapterMethod::CpLora => "CP-LoRA",
            AdapterMethod::DoraC => "DoRA-C",
            AdapterMethod::ConvDora => "convDoRA",
            AdapterMethod::CpDora => "CP-DoRA",
        }
    }
}

impl fmt::Display for AdapterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for AdapterMethod {
    type Err = Error;

    /// Accepts the short keys and the display names, ignoring case and `-`/`_`.
    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| *c != '-' && *c != '_')
            .collect::<String>()
            .to_ascii_lowercase();
        AdapterMethod::ALL
            .into_iter()
            .find(|m| m.key() == norm)
            .ok_or_else(|| Error::Config(format!("unknown adapter method `{s}`")))
    }
}

/// Hyper-parameters of one adapter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub method: AdapterMethod,
    pub rank: usize,
    pub alpha: f64,
    pub epsilon: f64,
    /// Treat the DoRA column norm as a constant in the backward pass.
    #[serde(default)]
    pub detach_norm: bool,
}

impl AdapterConfig {
    pub const DEFAULT_EPSILON: f64 = 1e-8;

    /// Config with `α = 2R` and the default ε.
    pub fn new(method: AdapterMethod, rank: usize) -> Self {
        Self {
            method,
            rank,
            alpha: 2.0 * rank as f64,
            epsilon: Self::DEFAULT_EPSILON,
            detach_norm: false,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    /// `α / R`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        let s = self.scaling();
        if !(self.alpha > 0.0 && s.is_finite() && s > 0.0) {
            return Err(Error::Config(format!(
                "adapter alpha must give a finite positive scale, got alpha={}",
                self.alpha
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Trainable state attached to one frozen kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub config: AdapterConfig,
    pub factors: Factors,
    /// Per-output-channel magnitude, present exactly for DoRA methods.
    pub magnitude: Option<Array1<f64>>,
    /// Name of the wrapped layer.
    pub base_ref: String,
}

/// Gradient buffers mirroring an [`AdapterState`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub factors: Factors,
    pub magnitude: Option<Array1<f64>>,
}

impl AdapterGrads {
    pub fn zeros_like(state: &AdapterState) -> Self {
        Self {
            factors: state.factors.zeros_like(),
            magnitude: state.magnitude.as_ref().map(|m| Array1::zeros(m.len())),
        }
    }

    pub fn accumulate(&mut self, other: &AdapterGrads) {
        for ((_, dst), (_, _, src)) in self
            .factors
            .tensors_mut()
            .into_iter()
            .zip(other.factors.tensors())
        {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
        if let (Some(d), Some(s)) = (self.magnitude.as_mut(), other.magnitude.as_ref()) {
            *d += s;
        }
    }

    pub fn fill_zero(&mut self) {
        for (_, t) in self.factors.tensors_mut() {
            t.fill(0.0);
        }
        if let Some(m) = self.magnitude.as_mut() {
            m.fill(0.0);
        }
    }

    /// Flat gradient slices in the same order as [`AdapterState::tensors`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.factors.tensors().into_iter().map(|t| t.2).collect();
        if let Some(m) = &self.magnitude {
            out.push(m.as_slice().expect("contiguous"));
        }
        out
    }
}

impl AdapterState {
    pub fn method(&self) -> AdapterMethod {
        self.config.method
    }

    /// Named trainable tensors: factors first, then `magnitude` for DoRA.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let mut out = self.factors.tensors();
        if let Some(m) = &self.magnitude {
            out.push(("magnitude", vec![m.len()], m.as_slice().expect("contiguous")));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = self.factors.tensors_mut();
        if let Some(m) = &mut self.magnitude {
            out.push(("magnitude", m.as_slice_mut().expect("contiguous")));
        }
        out
    }

    /// Number of trainable scalars held by this adapter.
    pub fn num_params(&self) -> usize {
        self.factors.num_params() + self.magnitude.as_ref().map_or(0, |m| m.len())
    }

    fn check_wraps(&self, base: &ConvWeight) -> Result<()> {
        let dims = self.factors.weight_dims()?;
        if dims != base.dims() {
            return Err(Error::Shape(format!(
                "adapter `{}` expects a {:?} kernel, base is {:?}",
                self.base_ref,
                dims,
                base.dims()
            )));
        }
        if let Some(m) = &self.magnitude {
            if m.len() != dims.0 {
                return Err(Error::Shape(format!(
                    "magnitude has {} entries for {} output channels",
                    m.len(),
                    dims.0
                )));
            }
        }
        if self.config.method.is_dora() != self.magnitude.is_some() {
            return Err(Error::Config(format!(
                "{} adapter {} a magnitude vector",
                self.config.method,
                if self.magnitude.is_some() {
                    "must not carry"
                } else {
                    "requires"
                }
            )));
        }
        Ok(())
    }
}

/// Frobenius norm of every output-channel slice of a kernel.
pub fn channel_norms(w: ArrayView4<f64>) -> Array1<f64> {
    w.outer_iter()
        .map(|slice| slice.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    rng.random_range(-bound..bound)
}

/// Builds a fresh adapter whose update is exactly zero.
///
/// The B side (and `a1` for CP) is zero, the other factors are drawn from
/// `U(-1/√fan_in, 1/√fan_in)`, and DoRA magnitudes start at the per-channel
/// norms of the base kernel. Deterministic in `seed`.
pub fn init_adapter(base: &ConvWeight, config: &AdapterConfig, seed: u64) -> Result<AdapterState> {
    config.validate()?;
    if !base.is_finite() {
        return Err(Error::Numerical(
            "base kernel contains non-finite values".into(),
        ));
    }
    let (c_out, c_in, kh, kw) = base.dims();
    let r = config.rank;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors = match config.method.factorization() {
        Factorization::LoraC => {
            let bound = 1.0 / ((c_in * kw) as f64).sqrt();
            Factors::LoraC(LoraCFactors {
                a: Array3::from_shape_simple_fn((r, c_in, kw), || uniform(&mut rng, bound)),
                b: Array3::zeros((c_out, kh, r)),
            })
        }
        Factorization::ConvLora => {
            let bound = 1.0 / ((c_in * kh * kw) as f64).sqrt();
            Factors::ConvLora(ConvLoraFactors {
                a: Array4::from_shape_simple_fn((r, c_in, kh, kw), || uniform(&mut rng, bound)),
                b: Array2::zeros((c_out, r)),
            })
        }
        Factorization::Cp => {
            let mut draw = |d: usize| {
                let bound = 1.0 / (d as f64).sqrt();
                Array2::from_shape_simple_fn((r, d), || uniform(&mut rng, bound))
            };
            let a2 = draw(c_in);
            let a3 = draw(kh);
            let a4 = draw(kw);
            Factors::Cp(CpFactors {
                a1: Array2::zeros((r, c_out)),
                a2,
                a3,
                a4,
            })
        }
    };
    let magnitude = config
        .method
        .is_dora()
        .then(|| channel_norms(base.data.view()));
    Ok(AdapterState {
        config: *config,
        factors,
        magnitude,
        base_ref: String::new(),
    })
}

/// Effective kernel plus the intermediates the backward pass needs.
#[derive(Debug, Clone)]
pub struct Composition {
    pub weight: Array4<f64>,
    /// `W0 + s·ΔW`, kept only for DoRA methods.
    pub direction: Option<Array4<f64>>,
    /// `‖V[o]‖_F` per output channel, DoRA only.
    pub norms: Option<Array1<f64>>,
    /// Output channels whose direction norm fell below ε.
    pub degenerate_channels: Vec<usize>,
}

/// Composes the adapter with its base kernel, keeping intermediates.
pub fn compose(base: &ConvWeight, state: &AdapterState) -> Result<Composition> {
    state.check_wraps(base)?;
    let s = state.config.scaling();
    let delta = state.factors.delta()?;
    let mut v = base.data.clone();
    v.scaled_add(s, &delta);
    let Some(m) = &state.magnitude else {
        return Ok(Composition {
            weight: v,
            direction: None,
            norms: None,
            degenerate_channels: Vec::new(),
        });
    };
    let eps = state.config.epsilon;
    let norms = channel_norms(v.view());
    let degenerate: Vec<usize> = norms
        .iter()
        .enumerate()
        .filter(|(_, &n)| n < eps)
        .map(|(o, _)| o)
        .collect();
    if !degenerate.is_empty() {
        log::warn!(
            "adapter `{}`: {} output channel(s) with near-zero direction norm",
            state.base_ref,
            degenerate.len()
        );
    }
    let mut weight = v.clone();
    for (o, mut slice) in weight.outer_iter_mut().enumerate() {
        slice *= m[o] / (norms[o] + eps);
    }
    Ok(Composition {
        weight,
        direction: Some(v),
        norms: Some(norms),
        degenerate_channels: degenerate,
    })
}

/// The kernel seen by the convolution when the adapter is active.
pub fn compose_effective_weight(base: &ConvWeight, state: &AdapterState) -> Result<Array4<f64>> {
    Ok(compose(base, state)?.weight)
}

/// Back-propagates a gradient on the effective kernel into the adapter.
pub fn adapter_backward(
    state: &AdapterState,
    comp: &Composition,
    grad_weight: ArrayView4<f64>,
) -> Result<AdapterGrads> {
    let s = state.config.scaling();
    let (grad_direction, grad_magnitude) = match (&state.magnitude, &comp.direction, &comp.norms) {
        (Some(m), Some(v), Some(norms)) => {
            let eps = state.config.epsilon;
            let mut gv = Array4::<f64>::zeros(v.raw_dim());
            let mut gm = Array1::<f64>::zeros(m.len());
            for o in 0..m.len() {
                let vo = v.index_axis(Axis(0), o);
                let go = grad_weight.index_axis(Axis(0), o);
                let c = norms[o] + eps;
                let dot = Zip::from(&vo).and(&go).fold(0.0, |acc, a, b| acc + a * b);
                gm[o] = dot / c;
                let mut out = gv.index_axis_mut(Axis(0), o);
                out.assign(&go);
                out *= m[o] / c;
                if !state.config.detach_norm && norms[o] > 0.0 {
                    // d‖V‖/dV = V/‖V‖
                    out.scaled_add(-m[o] * dot / (c * c * norms[o]), &vo);
                }
            }
            (gv, Some(gm))
        }
        _ => (grad_weight.to_owned(), None),
    };
    let factors = state.factors.backward((grad_direction * s).view())?;
    Ok(AdapterGrads {
        factors,
        magnitude: grad_magnitude,
    })
}

/// Folds the adapter into a plain kernel. The base bias is carried over.
pub fn merge(base: &ConvWeight, state: &AdapterState) -> Result<ConvWeight> {
    let weight = compose_effective_weight(base, state)?;
    ConvWeight::new(weight, base.bias.clone())
}

/// Trainable scalars one adapter adds to a `k_h × k_w` convolution.
pub fn param_count_kernel(
    method: AdapterMethod,
    c_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    rank: usize,
) -> usize {
    let factors = match method.factorization() {
        Factorization::LoraC => (c_in * kw + c_out * kh) * rank,
        Factorization::ConvLora => (c_in * kh * kw + c_out) * rank,
        Factorization::Cp => (c_in + c_out + kh + kw) * rank,
    };
    factors + if method.is_dora() { c_out } else { 0 }
}

/// Trainable scalars for a square `k × k` kernel:
/// LoRA-C `(c_in+c_out)kR`, convLoRA `(c_in k²+c_out)R`, CP `(c_in+c_out+2k)R`,
/// plus `c_out` for the DoRA magnitude.
pub fn param_count(method: AdapterMethod, c_in: usize, c_out: usize, k: usize, rank: usize) -> usize {
    param_count_kernel(method, c_in, c_out, k, k, rank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn random_base(dims: (usize, usize, usize, usize), seed: u64) -> ConvWeight {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ConvWeight::new(
            Array::from_shape_simple_fn(dims, || rng.random_range(-1.0..1.0)),
            Some(Array1::zeros(dims.0)),
        )
        .unwrap()
    }

    fn perturb(state: &mut AdapterState, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in state.tensors_mut() {
            t.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
    }

    #[test]
    fn fresh_lora_is_identity() {
        let base = random_base((4, 3, 3, 3), 1);
        for method in [AdapterMethod::LoraC, AdapterMethod::ConvLora, AdapterMethod::CpLora] {
            let st = init_adapter(&base, &AdapterConfig::new(method, 2), 7).unwrap();
            assert!(st.factors.delta().unwrap().iter().all(|&v| v == 0.0));
            assert_eq!(compose_effective_weight(&base, &st).unwrap(), base.data);
        }
    }

    #[test]
    fn dora_magnitude_is_channel_norm() {
        let mut base = random_base((4, 3, 3, 3), 2);
        base.data.index_axis_mut(Axis(0), 0).fill(1.0);
        let st = init_adapter(&base, &AdapterConfig::new(AdapterMethod::DoraC, 2), 0).unwrap();
        let m = st.magnitude.as_ref().unwrap();
        assert!((m[0] - 27f64.sqrt()).abs() < 1e-12);
        assert!((m[0] - 5.19615).abs() < 1e-5);
        let w = compose_effective_weight(&base, &st).unwrap();
        let rel = (&w - &base.data).mapv(f64::abs).sum() / base.data.mapv(f64::abs).sum();
        assert!(rel <= 1e-6);
    }

    #[test]
    fn init_is_deterministic() {
        let base = random_base((4, 3, 3, 3), 3);
        for method in AdapterMethod::ALL {
            let cfg = AdapterConfig::new(method, 3);
            assert_eq!(
                init_adapter(&base, &cfg, 42).unwrap(),
                init_adapter(&base, &cfg, 42).unwrap()
            );
        }
    }

    #[test]
    fn init_rejects_bad_input() {
        let base = random_base((2, 2, 3, 3), 4);
        assert!(init_adapter(&base, &AdapterConfig::new(AdapterMethod::LoraC, 0), 0).is_err());
        let mut bad = base.clone();
        bad.data[[0, 0, 0, 0]] = f64::NAN;
        assert!(matches!(
            init_adapter(&bad, &AdapterConfig::new(AdapterMethod::LoraC, 1), 0),
            Err(Error::Numerical(_))
        ));
        let cfg = AdapterConfig::new(AdapterMethod::CpLora, 2).with_alpha(0.0);
        assert!(init_adapter(&base, &cfg, 0).is_err());
    }

    #[test]
    fn lorac_alpha_two_r_doubles_update() {
        let base = random_base((3, 2, 3, 3), 5);
        let mut st = init_adapter(&base, &AdapterConfig::new(AdapterMethod::LoraC, 4), 1).unwrap();
        perturb(&mut st, 9);
        let want = &base.data + &(st.factors.delta().unwrap() * 2.0);
        let got = compose_effective_weight(&base, &st).unwrap();
        assert!((&got - &want).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b)) < 1e-12);
    }

    #[test]
    fn dora_channels_carry_magnitude() {
        let base = random_base((5, 3, 3, 3), 6);
        for method in [AdapterMethod::DoraC, AdapterMethod::ConvDora, AdapterMethod::CpDora] {
            let mut st = init_adapter(&base, &AdapterConfig::new(method, 2), 3).unwrap();
            perturb(&mut st, 4);
            let comp = compose(&base, &st).unwrap();
            let norms = channel_norms(comp.weight.view());
            let v_norms = comp.norms.as_ref().unwrap();
            let m = st.magnitude.as_ref().unwrap();
            for o in 0..5 {
                let expected = m[o].abs() * v_norms[o] / (v_norms[o] + 1e-8);
                assert!((norms[o] - expected).abs() < 1e-12);
                assert!((norms[o] - m[o].abs()).abs() < 1e-6 * m[o].abs().max(1.0));
            }
        }
    }

    #[test]
    fn degenerate_channel_is_flagged_and_finite() {
        let mut base = random_base((2, 2, 3, 3), 8);
        base.data.index_axis_mut(Axis(0), 1).fill(0.0);
        let st = init_adapter(&base, &AdapterConfig::new(AdapterMethod::ConvDora, 1), 0).unwrap();
        let comp = compose(&base, &st).unwrap();
        assert_eq!(comp.degenerate_channels, vec![1]);
        assert!(comp.weight.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn merge_keeps_bias_and_zero_delta_bits() {
        let base = random_base((3, 2, 3, 3), 10);
        let st = init_adapter(&base, &AdapterConfig::new(AdapterMethod::CpLora, 2), 0).unwrap();
        let merged = merge(&base, &st).unwrap();
        assert_eq!(merged, base);
        let again = merge(
            &merged,
            &init_adapter(&merged, &AdapterConfig::new(AdapterMethod::CpLora, 2), 0).unwrap(),
        )
        .unwrap();
        assert_eq!(again, merged);
    }

    #[test]
    fn mismatched_adapter_is_rejected() {
        let base = random_base((3, 2, 3, 3), 11);
        let other = random_base((4, 2, 3, 3), 11);
        let st = init_adapter(&other, &AdapterConfig::new(AdapterMethod::LoraC, 2), 0).unwrap();
        assert!(matches!(compose(&base, &st), Err(Error::Shape(_))));
    }

    #[test]
    fn parameter_formulas() {
        assert_eq!(param_count(AdapterMethod::LoraC, 64, 128, 3, 8), 4608);
        assert_eq!(param_count(AdapterMethod::ConvLora, 64, 128, 3, 2), 1408);
        assert_eq!(param_count(AdapterMethod::CpDora, 64, 128, 3, 8), 1712);
        for method in AdapterMethod::ALL {
            for (dims, r) in [((4, 3, 3, 3), 2), ((2, 5, 1, 1), 7)] {
                let base = random_base(dims, 0);
                let st = init_adapter(&base, &AdapterConfig::new(method, r), 0).unwrap();
                assert_eq!(st.num_params(), param_count(method, dims.1, dims.0, dims.2, r));
            }
        }
    }

    #[test]
    fn method_names_parse() {
        for m in AdapterMethod::ALL {
            assert_eq!(m.key().parse::<AdapterMethod>().unwrap(), m);
            assert_eq!(m.display_name().parse::<AdapterMethod>().unwrap(), m);
        }
        assert!("lora".parse::<AdapterMethod>().is_err());
    }

    #[test]
    fn detached_norm_drops_the_projection_term() {
        let base = random_base((2, 2, 3, 3), 12);
        let mut cfg = AdapterConfig::new(AdapterMethod::DoraC, 2);
        let mut st = init_adapter(&base, &cfg, 0).unwrap();
        perturb(&mut st, 1);
        let comp = compose(&base, &st).unwrap();
        let g = Array4::from_elem(base.dims(), 1.0);
        let full = adapter_backward(&st, &comp, g.view()).unwrap();
        cfg.detach_norm = true;
        st.config = cfg;
        let detached = adapter_backward(&st, &comp, g.view()).unwrap();
        assert_eq!(full.magnitude, detached.magnitude);
        assert_ne!(full.factors, detached.factors);
    }
}
