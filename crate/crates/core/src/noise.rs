//! Q-Wiener noise: truncated Karhunen-Loève sampling, multi-resolution
//! coupling of increments, and the additive diffusion map B(t).
//!
//! The driving process is W(t) = Σ_i √λ_i e_i(x) β_i(t) with trace-class
//! spectrum Σλ_i < ∞. A [`NoisePath`] stores the per-step coefficient
//! increments ξ[n][i] ~ N(0, λ_i τ). Sampling is counter-based: the
//! ChaCha stream is addressed by (seed, replica), so Monte Carlo workers
//! produce identical paths regardless of scheduling.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldLayout, FieldState};

/// How the KL basis functions e_i are realized on a layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModeFamily {
    /// e_i(x) = √(2/L)·sin(iπx/L) on [0, L], evaluated at slot
    /// coordinates (grid backends).
    SineOnInterval { length: f64 },
    /// Mode i acts directly on coefficient slot i of each field block
    /// (spectral backend, whose slots are already modal).
    SpectralCoeff,
}

/// Truncated covariance operator: J modes with eigenvalues λ_1..λ_J.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub lambdas: Vec<f64>,
    pub modes: ModeFamily,
}

impl CovarianceSpec {
    pub fn new(lambdas: Vec<f64>, modes: ModeFamily) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(Error::InvalidConfig("covariance needs at least one mode".into()));
        }
        if lambdas.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidConfig("covariance eigenvalues must be positive".into()));
        }
        Ok(Self { lambdas, modes })
    }

    /// Default smooth spectrum λ_i = i⁻² with J sine modes.
    pub fn default_smooth(j: usize, length: f64) -> Result<Self> {
        Self::new(
            (1..=j).map(|i| 1.0 / (i as f64 * i as f64)).collect(),
            ModeFamily::SineOnInterval { length },
        )
    }

    pub fn truncation(&self) -> usize {
        self.lambdas.len()
    }

    /// Evaluates w(x) = Σ_i coeffs_i e_i(x) on every slot of a layout.
    fn superpose(&self, coeffs: &DVector<f64>, layout: &FieldLayout) -> DVector<f64> {
        let dim = layout.dim();
        match &self.modes {
            ModeFamily::SineOnInterval { length } => {
                let mut w = DVector::zeros(dim);
                for (i, &c) in coeffs.iter().enumerate() {
                    if c == 0.0 {
                        continue;
                    }
                    let k = (i as f64 + 1.0) * std::f64::consts::PI / length;
                    let scale = (2.0 / length).sqrt();
                    for (slot_idx, slot) in layout.slots.iter().enumerate() {
                        w[slot_idx] += c * scale * (k * slot.x).sin();
                    }
                }
                w
            }
            ModeFamily::SpectralCoeff => {
                let mut w = DVector::zeros(dim);
                for (i, &c) in coeffs.iter().enumerate() {
                    if i < layout.e_len {
                        w[i] = c;
                    }
                    if i < layout.h_len {
                        w[layout.e_len + i] = c;
                    }
                }
                w
            }
        }
    }
}

/// A bounded spatial(-temporal) profile factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    Zero,
    Constant { amplitude: f64 },
    /// amplitude·sin(πx/length).
    SineX { amplitude: f64, length: f64 },
    /// amplitude·cos(omega·t), spatially uniform.
    CosineT { amplitude: f64, omega: f64 },
}

impl Profile {
    pub fn eval(&self, t: f64, x: f64) -> f64 {
        match *self {
            Profile::Zero => 0.0,
            Profile::Constant { amplitude } => amplitude,
            Profile::SineX { amplitude, length } => {
                amplitude * (std::f64::consts::PI * x / length).sin()
            }
            Profile::CosineT { amplitude, omega } => amplitude * (omega * t).cos(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Profile::Zero)
            || matches!(
                self,
                Profile::Constant { amplitude } | Profile::SineX { amplitude, .. } | Profile::CosineT { amplitude, .. }
                if *amplitude == 0.0
            )
    }
}

/// Spatial current-density profiles multiplying the noise, one for each
/// field block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub je_r: Profile,
    pub jm_r: Profile,
}

impl NoiseProfile {
    pub fn zero() -> Self {
        Self { je_r: Profile::Zero, jm_r: Profile::Zero }
    }

    pub fn is_zero(&self) -> bool {
        self.je_r.is_zero() && self.jm_r.is_zero()
    }
}

/// One sampled realization of the coefficient increments.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    pub n: usize,
    pub tau: f64,
    /// n × J matrix; row n holds the step-n increments ξ[n][i].
    pub xi: DMatrix<f64>,
    pub seed: u64,
    pub stream: u64,
}

/// Samples a whole path for one replica. The (seed, stream) pair
/// addresses an independent ChaCha stream; draws are made step-major so
/// the layout of randomness is part of the reproducibility contract.
pub fn sample_path(seed: u64, stream: u64, n: usize, tau: f64, spec: &CovarianceSpec) -> NoisePath {
    let j = spec.truncation();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let scales: Vec<f64> = spec.lambdas.iter().map(|&l| (l * tau).sqrt()).collect();
    let mut xi = DMatrix::zeros(n, j);
    for step in 0..n {
        for mode in 0..j {
            let z: f64 = StandardNormal.sample(&mut rng);
            xi[(step, mode)] = scales[mode] * z;
        }
    }
    NoisePath { n, tau, xi, seed, stream }
}

/// Sums blocks of `r` consecutive increments, producing the same
/// Brownian path observed at step r·τ (strong coupling device).
pub fn coarsen(path: &NoisePath, r: usize) -> Result<NoisePath> {
    if r == 0 || path.n % r != 0 {
        return Err(Error::BadCoarsening { r, n: path.n });
    }
    let n_coarse = path.n / r;
    let j = path.xi.ncols();
    let mut xi = DMatrix::zeros(n_coarse, j);
    for nc in 0..n_coarse {
        for mode in 0..j {
            let mut acc = 0.0;
            for k in 0..r {
                acc += path.xi[(nc * r + k, mode)];
            }
            xi[(nc, mode)] = acc;
        }
    }
    Ok(NoisePath {
        n: n_coarse,
        tau: path.tau * r as f64,
        xi,
        seed: path.seed,
        stream: path.stream,
    })
}

/// The diffusion map: B(t)w = (−ε⁻¹J_e^r(t,x)·w(x), −μ⁻¹J_m^r(t,x)·w(x))
/// for w = Σ_i coeffs_i e_i.
pub fn apply_b(
    t: f64,
    coeffs: &DVector<f64>,
    profile: &NoiseProfile,
    spec: &CovarianceSpec,
    layout: &Arc<FieldLayout>,
) -> FieldState {
    let w = spec.superpose(coeffs, layout);
    let mut data = DVector::zeros(layout.dim());
    for k in layout.e_range() {
        data[k] = -profile.je_r.eval(t, layout.slots[k].x) * w[k] / layout.material[k];
    }
    for k in layout.h_range() {
        data[k] = -profile.jm_r.eval(t, layout.slots[k].x) * w[k] / layout.material[k];
    }
    FieldState { layout: Arc::clone(layout), data }
}

/// Squared Hilbert-Schmidt norm Σ_i λ_i‖B(t)e_i‖²_H.
pub fn hs_norm_sq(
    t: f64,
    profile: &NoiseProfile,
    spec: &CovarianceSpec,
    layout: &Arc<FieldLayout>,
) -> f64 {
    let j = spec.truncation();
    let mut total = 0.0;
    let mut unit = DVector::zeros(j);
    for i in 0..j {
        unit[i] = 1.0;
        let bi = apply_b(t, &unit, profile, spec, layout);
        total += spec.lambdas[i] * bi.energy();
        unit[i] = 0.0;
    }
    total
}

#[derive(Serialize, Deserialize)]
struct PathHeader {
    seed: u64,
    stream: u64,
    n: usize,
    j: usize,
    tau: f64,
    lambdas: Vec<f64>,
}

/// Exports a path as flat little-endian f64 (row-major over steps) plus a
/// JSON header at `<path>.json`.
pub fn write_path(path: &NoisePath, spec: &CovarianceSpec, file: &Path) -> Result<()> {
    use std::io::Write as _;
    let mut w = std::io::BufWriter::new(std::fs::File::create(file)?);
    for step in 0..path.n {
        for mode in 0..path.xi.ncols() {
            w.write_all(&path.xi[(step, mode)].to_le_bytes())?;
        }
    }
    w.flush()?;
    let header = PathHeader {
        seed: path.seed,
        stream: path.stream,
        n: path.n,
        j: path.xi.ncols(),
        tau: path.tau,
        lambdas: spec.lambdas.clone(),
    };
    let side = file.with_extension(match file.extension() {
        Some(ext) => format!("{}.json", ext.to_string_lossy()),
        None => "json".into(),
    });
    serde_json::to_writer_pretty(std::fs::File::create(side)?, &header)
        .map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

/// Reads back a path written by [`write_path`].
pub fn read_path(file: &Path) -> Result<NoisePath> {
    let side = file.with_extension(match file.extension() {
        Some(ext) => format!("{}.json", ext.to_string_lossy()),
        None => "json".into(),
    });
    let header: PathHeader = serde_json::from_str(&std::fs::read_to_string(side)?)
        .map_err(|e| Error::Parse(e.to_string()))?;
    let raw = crate::io::read_flat_binary(file)?;
    if raw.len() != header.n * header.j {
        return Err(Error::Parse(format!(
            "path binary holds {} values, header says {}×{}",
            raw.len(),
            header.n,
            header.j
        )));
    }
    let xi = DMatrix::from_fn(header.n, header.j, |s, m| raw[s * header.j + m]);
    Ok(NoisePath {
        n: header.n,
        tau: header.tau,
        xi,
        seed: header.seed,
        stream: header.stream,
    })
}
