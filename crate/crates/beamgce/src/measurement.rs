//! Hybrid-beamforming pilot transmission and least-squares channel estimation.
//!
//! A pilot transmission applies a phase-quantized precoder `F`, pilot symbols
//! `S` and combiner `W`, receiving `Y = W^H H F S + W^H N`. Vectorized, the
//! sensing matrix is the Kronecker product `A = S^T F^T ⊗ W^H`, whose rank is
//! bounded by `n_s^2`. Stacking `K` transmissions with independent triplets
//! yields a full-rank system whose least-squares inverse carries shaped noise
//! with covariance square root
//! `Σ^{1/2} = (A_T^T ⊗ A_R^H) A[1:K]^† diag(I_{n_p} ⊗ W[i]^H)`.

use ndarray::prelude::*;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use crate::channel::{to_beamspace, ArrayConfig};
use crate::error::{Error, Result};
use crate::linalg::{
    hermitian, kron, matrix_rank, pinv, standard_complex_gaussian, unvec_mat, vec_mat, C64,
};

/// Relative singular-value threshold below which directions count as null.
pub const RANK_TOL: f64 = 1e-9;

/// Attempts at redrawing triplets before a full-rank request fails.
pub const FULL_RANK_ATTEMPTS: usize = 20;

/// Pilot transmission configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PilotConfig {
    /// Data streams per transmission.
    pub n_s: usize,
    /// Pilot symbols per transmission.
    pub n_p: usize,
    /// Transmitter phase-shifter quantization bits.
    pub n_bit_t: u32,
    /// Receiver phase-shifter quantization bits.
    pub n_bit_r: u32,
    /// Number of stacked transmissions.
    pub k: usize,
    /// Per-transmission SNR in dB (`f64::INFINITY` for noiseless).
    pub snr_db: f64,
    pub seed: u64,
}

impl PilotConfig {
    /// Paper-scale default: 16 streams, 25 pilots, 6/2 quantization bits.
    pub fn paper() -> Self {
        Self {
            n_s: 16,
            n_p: 25,
            n_bit_t: 6,
            n_bit_r: 2,
            k: 4,
            snr_db: f64::INFINITY,
            seed: 0,
        }
    }

    /// Desk-scale full-rank configuration for 16x4 arrays.
    pub fn desk() -> Self {
        Self {
            n_s: 4,
            n_p: 4,
            n_bit_t: 6,
            n_bit_r: 2,
            k: 4,
            snr_db: f64::INFINITY,
            seed: 0,
        }
    }

    pub fn validate(&self, arrays: &ArrayConfig) -> Result<()> {
        if self.n_s == 0 || self.n_p == 0 || self.k == 0 {
            return Err(Error::Config("n_s, n_p, k must be >= 1".into()));
        }
        if self.n_s > arrays.n_t.min(arrays.n_r) {
            return Err(Error::Config(format!(
                "n_s = {} exceeds min(n_t, n_r) = {}",
                self.n_s,
                arrays.n_t.min(arrays.n_r)
            )));
        }
        Ok(())
    }

    /// Noise standard deviation for this SNR under the convention that the
    /// combined signal power per received entry is `n_s`:
    /// `sigma^2 = n_s * 10^(-snr_db/10)`.
    pub fn sigma(&self) -> f64 {
        if self.snr_db.is_infinite() {
            0.0
        } else {
            (self.n_s as f64 * 10f64.powf(-self.snr_db / 10.0)).sqrt()
        }
    }
}

/// One `(F, S, W)` precoder/pilot/combiner set.
#[derive(Debug, Clone)]
pub struct PilotTriplet {
    /// `n_t x n_s` precoder, constant modulus `1/sqrt(n_t)`, quantized phases.
    pub f: Array2<C64>,
    /// `n_s x n_p` unit-modulus pilot symbols (QPSK).
    pub s: Array2<C64>,
    /// `n_r x n_s` combiner, constant modulus `1/sqrt(n_r)`, quantized phases.
    pub w: Array2<C64>,
}

impl PilotTriplet {
    pub fn n_t(&self) -> usize {
        self.f.nrows()
    }
    pub fn n_r(&self) -> usize {
        self.w.nrows()
    }
    pub fn n_s(&self) -> usize {
        self.f.ncols()
    }
    pub fn n_p(&self) -> usize {
        self.s.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SensingDomain {
    Spatial,
    Beamspace,
}

/// A sensing matrix with lazily computed rank and mutual-coherence caches.
#[derive(Debug)]
pub struct SensingMatrix {
    pub a: Array2<C64>,
    pub domain: SensingDomain,
    rank: OnceLock<usize>,
    coherence: OnceLock<f64>,
}

impl Clone for SensingMatrix {
    fn clone(&self) -> Self {
        let rank = OnceLock::new();
        if let Some(&r) = self.rank.get() {
            let _ = rank.set(r);
        }
        let coherence = OnceLock::new();
        if let Some(&c) = self.coherence.get() {
            let _ = coherence.set(c);
        }
        Self {
            a: self.a.clone(),
            domain: self.domain,
            rank,
            coherence,
        }
    }
}

impl SensingMatrix {
    pub fn new(a: Array2<C64>, domain: SensingDomain) -> Self {
        Self {
            a,
            domain,
            rank: OnceLock::new(),
            coherence: OnceLock::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn cols(&self) -> usize {
        self.a.ncols()
    }

    /// Numerical rank; computed on first use and cached.
    pub fn rank(&self) -> Result<usize> {
        if let Some(&r) = self.rank.get() {
            return Ok(r);
        }
        let r = matrix_rank(&self.a, RANK_TOL)?;
        let _ = self.rank.set(r);
        Ok(r)
    }

    /// Mutual coherence; computed on first use and cached.
    pub fn coherence(&self) -> Result<f64> {
        if let Some(&c) = self.coherence.get() {
            return Ok(c);
        }
        let c = mutual_coherence(&self.a)?;
        let _ = self.coherence.set(c);
        Ok(c)
    }
}

/// Full-rank stacked LS estimate together with its noise-covariance square
/// root.
#[derive(Debug, Clone)]
pub struct LsEstimate {
    /// `n_r x n_t` beamspace LS channel estimate.
    pub hv_ls: Array2<C64>,
    /// `n_t n_r x k n_r n_p` covariance square root of the estimate noise.
    pub sigma_half: Array2<C64>,
    /// SNR at which the measurement was taken.
    pub snr_db: f64,
}

/// The quantized phase set `{0, 2pi/2^bits, ..., (2^bits - 1) 2pi/2^bits}`.
pub fn quantized_phase_set(bits: u32) -> Vec<f64> {
    let n = 1usize << bits;
    (0..n)
        .map(|i| 2.0 * std::f64::consts::PI * i as f64 / n as f64)
        .collect()
}

const QPSK: [C64; 4] = [
    C64::new(1.0, 0.0),
    C64::new(0.0, 1.0),
    C64::new(-1.0, 0.0),
    C64::new(0.0, -1.0),
];

/// Draw a pilot triplet: quantized uniform phases for `F` and `W`, QPSK
/// symbols for `S`.
pub fn sample_triplet<R: Rng + ?Sized>(
    cfg: &PilotConfig,
    arrays: &ArrayConfig,
    rng: &mut R,
) -> Result<PilotTriplet> {
    cfg.validate(arrays)?;
    let phases_t = quantized_phase_set(cfg.n_bit_t);
    let phases_r = quantized_phase_set(cfg.n_bit_r);
    let f_mag = 1.0 / (arrays.n_t as f64).sqrt();
    let w_mag = 1.0 / (arrays.n_r as f64).sqrt();
    let f = Array2::from_shape_fn((arrays.n_t, cfg.n_s), |_| {
        C64::from_polar(f_mag, phases_t[rng.random_range(0..phases_t.len())])
    });
    let w = Array2::from_shape_fn((arrays.n_r, cfg.n_s), |_| {
        C64::from_polar(w_mag, phases_r[rng.random_range(0..phases_r.len())])
    });
    let s = Array2::from_shape_fn((cfg.n_s, cfg.n_p), |_| QPSK[rng.random_range(0..4)]);
    Ok(PilotTriplet { f, s, w })
}

/// One pilot transmission: `W^H H F S + W^H N` with `N` i.i.d. complex
/// Gaussian of per-entry variance `sigma^2`.
pub fn pilot_measure<R: Rng + ?Sized>(
    h: &Array2<C64>,
    triplet: &PilotTriplet,
    sigma: f64,
    rng: &mut R,
) -> Result<Array2<C64>> {
    if h.nrows() != triplet.n_r() || h.ncols() != triplet.n_t() {
        return Err(Error::ShapeMismatch {
            expected: format!("channel ({}, {})", triplet.n_r(), triplet.n_t()),
            got: format!("{:?}", h.dim()),
        });
    }
    let wh = hermitian(&triplet.w);
    let mut y = wh.dot(h).dot(&triplet.f).dot(&triplet.s);
    if sigma > 0.0 {
        let n = crate::linalg::complex_gaussian_matrix(rng, triplet.n_r(), triplet.n_p())
            .mapv(|z| z * sigma);
        y += &wh.dot(&n);
    }
    Ok(y)
}

/// Spatial-domain sensing matrix `A = S^T F^T ⊗ W^H` for one triplet.
pub fn sensing_matrix(triplet: &PilotTriplet) -> SensingMatrix {
    let fs = triplet.f.dot(&triplet.s); // n_t x n_p
    let left = fs.t().to_owned(); // S^T F^T = (F S)^T
    let a = kron(&left, &hermitian(&triplet.w));
    SensingMatrix::new(a, SensingDomain::Spatial)
}

/// Beamspace sensing matrix `A_sp = (A_T^H F S)^T ⊗ (W^H A_R)`.
pub fn beamspace_sensing_matrix(
    triplet: &PilotTriplet,
    arrays: &ArrayConfig,
) -> Result<SensingMatrix> {
    if triplet.n_t() != arrays.n_t || triplet.n_r() != arrays.n_r {
        return Err(Error::ShapeMismatch {
            expected: format!("triplet for ({}, {})", arrays.n_r, arrays.n_t),
            got: format!("({}, {})", triplet.n_r(), triplet.n_t()),
        });
    }
    let a_t = crate::channel::dft_codebook(arrays.n_t)?;
    let a_r = crate::channel::dft_codebook(arrays.n_r)?;
    let left = hermitian(&a_t).dot(&triplet.f).dot(&triplet.s); // n_t x n_p
    let right = hermitian(&triplet.w).dot(&a_r); // n_s x n_r
    let a = kron(&left.t().to_owned(), &right);
    Ok(SensingMatrix::new(a, SensingDomain::Beamspace))
}

/// Mutual coherence: the maximum normalized inner-product magnitude over
/// distinct column pairs. Zero columns are skipped rather than treated as an
/// error; quantized constant-modulus constructions cannot produce them, but a
/// caller-supplied matrix might.
pub fn mutual_coherence(a: &Array2<C64>) -> Result<f64> {
    if a.ncols() < 2 {
        return Err(Error::InvalidDimension(
            "mutual coherence needs at least 2 columns".into(),
        ));
    }
    let gram = hermitian(a).dot(a);
    let norms: Vec<f64> = (0..a.ncols()).map(|j| gram[[j, j]].re.sqrt()).collect();
    let mut mu = 0.0f64;
    for i in 0..a.ncols() {
        if norms[i] <= 0.0 {
            continue;
        }
        for j in (i + 1)..a.ncols() {
            if norms[j] <= 0.0 {
                continue;
            }
            mu = mu.max(gram[[i, j]].norm() / (norms[i] * norms[j]));
        }
    }
    Ok(mu.min(1.0))
}

/// `K` stacked pilot measurements of one channel realization.
#[derive(Debug, Clone)]
pub struct StackedMeasurement {
    /// Received vector of length `k * n_s * n_p`.
    pub y: Array1<C64>,
    /// Stacked spatial sensing matrix `A[1:K]`.
    pub a: SensingMatrix,
    pub triplets: Vec<PilotTriplet>,
    /// Block-diagonal noise shaping `diag(I_{n_p} ⊗ W[i]^H)`,
    /// `k n_s n_p x k n_r n_p`.
    pub noise_shaper: Array2<C64>,
}

fn stack_sensing(triplets: &[PilotTriplet]) -> Array2<C64> {
    let per = triplets[0].n_s() * triplets[0].n_p();
    let cols = triplets[0].n_t() * triplets[0].n_r();
    let mut a = Array2::zeros((per * triplets.len(), cols));
    for (i, t) in triplets.iter().enumerate() {
        let block = sensing_matrix(t);
        a.slice_mut(s![i * per..(i + 1) * per, ..]).assign(&block.a);
    }
    a
}

fn stack_noise_shaper(triplets: &[PilotTriplet]) -> Array2<C64> {
    let n_p = triplets[0].n_p();
    let n_s = triplets[0].n_s();
    let n_r = triplets[0].n_r();
    let rows_per = n_s * n_p;
    let cols_per = n_r * n_p;
    let k = triplets.len();
    let eye = Array2::from_shape_fn((n_p, n_p), |(i, j)| {
        C64::new(if i == j { 1.0 } else { 0.0 }, 0.0)
    });
    let mut out = Array2::zeros((k * rows_per, k * cols_per));
    for (i, t) in triplets.iter().enumerate() {
        let block = kron(&eye, &hermitian(&t.w));
        out.slice_mut(s![
            i * rows_per..(i + 1) * rows_per,
            i * cols_per..(i + 1) * cols_per
        ])
        .assign(&block);
    }
    out
}

/// Stack `cfg.k` pilot transmissions of a constant channel. With
/// `require_full_rank`, triplets are redrawn (up to [`FULL_RANK_ATTEMPTS`]
/// times) until the stacked sensing matrix reaches rank `n_t * n_r`.
pub fn stack_measurements<R: Rng + ?Sized>(
    h: &Array2<C64>,
    cfg: &PilotConfig,
    rng: &mut R,
    require_full_rank: bool,
) -> Result<StackedMeasurement> {
    let (n_r, n_t) = h.dim();
    let arrays = ArrayConfig::new(n_t, n_r);
    cfg.validate(&arrays)?;
    let full = n_t * n_r;

    let mut triplets = None;
    for attempt in 0..FULL_RANK_ATTEMPTS {
        let draw: Vec<PilotTriplet> = (0..cfg.k)
            .map(|_| sample_triplet(cfg, &arrays, rng))
            .collect::<Result<_>>()?;
        if !require_full_rank {
            triplets = Some(draw);
            break;
        }
        let a = stack_sensing(&draw);
        let rank = matrix_rank(&a, RANK_TOL)?;
        if rank == full {
            triplets = Some(draw);
            break;
        }
        if attempt + 1 == FULL_RANK_ATTEMPTS {
            return Err(Error::RankDeficient {
                rank,
                required: full,
            });
        }
    }
    let triplets = triplets.expect("triplet draw loop always assigns or errors");
    measure_with_triplets(h, &triplets, cfg.sigma(), rng)
}

/// Stack measurements using a fixed, pre-agreed set of triplets.
pub fn measure_with_triplets<R: Rng + ?Sized>(
    h: &Array2<C64>,
    triplets: &[PilotTriplet],
    sigma: f64,
    rng: &mut R,
) -> Result<StackedMeasurement> {
    if triplets.is_empty() {
        return Err(Error::Config("need at least one triplet".into()));
    }
    let (n_r, n_t) = h.dim();
    if triplets[0].n_r() != n_r || triplets[0].n_t() != n_t {
        return Err(Error::ShapeMismatch {
            expected: format!("triplets for ({n_r}, {n_t})"),
            got: format!("({}, {})", triplets[0].n_r(), triplets[0].n_t()),
        });
    }
    let a = stack_sensing(triplets);
    let shaper = stack_noise_shaper(triplets);
    let hv = vec_mat(h);
    let mut y = a.dot(&hv);
    if sigma > 0.0 {
        let n = standard_complex_gaussian(rng, shaper.ncols()).mapv(|z| z * sigma);
        y += &shaper.dot(&n);
    }
    Ok(StackedMeasurement {
        y,
        a: SensingMatrix::new(a, SensingDomain::Spatial),
        triplets: triplets.to_vec(),
        noise_shaper: shaper,
    })
}

/// Precomputed least-squares inverse for a fixed set of stacked triplets:
/// amortizes the pseudo-inverse when many channels share one pilot schedule.
#[derive(Debug, Clone)]
pub struct LsSolver {
    pub triplets: Vec<PilotTriplet>,
    pub arrays: ArrayConfig,
    a_pinv: Array2<C64>,
    /// Covariance square root of the beamspace estimate noise.
    pub sigma_half: Array2<C64>,
}

impl LsSolver {
    pub fn new(triplets: &[PilotTriplet], arrays: &ArrayConfig) -> Result<Self> {
        if triplets.is_empty() {
            return Err(Error::Config("need at least one triplet".into()));
        }
        let a = stack_sensing(triplets);
        let full = arrays.n_t * arrays.n_r;
        let rank = matrix_rank(&a, RANK_TOL)?;
        if rank < full {
            // Compressive measurements admit no LS inverse; this is a hard
            // precondition of the training pipelines built on the estimates.
            return Err(Error::RankDeficient {
                rank,
                required: full,
            });
        }
        let a_pinv = pinv(&a, RANK_TOL)?;
        let a_t = crate::channel::dft_codebook(arrays.n_t)?;
        let a_r = crate::channel::dft_codebook(arrays.n_r)?;
        let beam = kron(&a_t.t().to_owned(), &hermitian(&a_r));
        let shaper = stack_noise_shaper(triplets);
        let sigma_half = beam.dot(&a_pinv).dot(&shaper);
        Ok(Self {
            triplets: triplets.to_vec(),
            arrays: *arrays,
            a_pinv,
            sigma_half,
        })
    }

    /// Beamspace LS estimate from a stacked measurement vector.
    pub fn solve(&self, y: &Array1<C64>) -> Result<Array2<C64>> {
        if y.len() != self.a_pinv.ncols() {
            return Err(Error::ShapeMismatch {
                expected: format!("y of length {}", self.a_pinv.ncols()),
                got: format!("length {}", y.len()),
            });
        }
        let h_ls = unvec_mat(&self.a_pinv.dot(y), self.arrays.n_r, self.arrays.n_t)?;
        to_beamspace(&h_ls)
    }
}

/// Beamspace least-squares estimate from full-rank stacked measurements,
/// with the covariance square root of its noise.
pub fn ls_estimate(
    y: &Array1<C64>,
    a_stacked: &SensingMatrix,
    triplets: &[PilotTriplet],
    arrays: &ArrayConfig,
    snr_db: f64,
) -> Result<LsEstimate> {
    let full = arrays.n_t * arrays.n_r;
    let rank = a_stacked.rank()?;
    if rank < full {
        return Err(Error::RankDeficient {
            rank,
            required: full,
        });
    }
    if y.len() != a_stacked.rows() {
        return Err(Error::ShapeMismatch {
            expected: format!("y of length {}", a_stacked.rows()),
            got: format!("length {}", y.len()),
        });
    }
    let solver = LsSolver::new(triplets, arrays)?;
    let hv_ls = solver.solve(y)?;
    Ok(LsEstimate {
        hv_ls,
        sigma_half: solver.sigma_half,
        snr_db,
    })
}

/// Draw correlated noise `sigma * Sigma^{1/2} g` with `g` standard complex
/// Gaussian — distributed exactly like the LS estimate's error term.
/// With `sigma == 0` no randomness is consumed.
pub fn sample_ls_noise<R: Rng + ?Sized>(
    sigma_half: &Array2<C64>,
    sigma: f64,
    rng: &mut R,
) -> Array1<C64> {
    if sigma == 0.0 {
        return Array1::zeros(sigma_half.nrows());
    }
    let g = standard_complex_gaussian(rng, sigma_half.ncols());
    sigma_half.dot(&g).mapv(|z| z * sigma)
}
