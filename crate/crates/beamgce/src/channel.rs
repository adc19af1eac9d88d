//! Synthetic narrowband MIMO channels with controllable LOS/NLOS cluster
//! structure, the unitary DFT beamspace transform, and dataset normalization.
//!
//! Channels are sums of steering-vector outer products. Each cluster carries a
//! mean departure/arrival angle pair and a power that decays with the cluster
//! index; rays inside a cluster jitter around the mean with Laplacian spread.
//! LOS profiles add a dominant specular ray whose power is set by a Rician
//! K-factor. Every profile produces unit average element power,
//! `E|H[i,j]|^2 = 1`.

use ndarray::prelude::*;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{hermitian, C64};

/// Floor applied to normalization standard deviations so that beamspace
/// entries that are never excited do not blow up the normalized data.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Cluster-channel profile. The five `analog_*` constructors are loose
/// analogues of standard delay profiles: cluster counts preserve their
/// relative ordering and the two LOS profiles differ in K-factor and spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub name: String,
    pub n_clusters: usize,
    pub rays_per_cluster: usize,
    pub los: bool,
    /// LOS power over diffuse power in dB; ignored when `los` is false.
    pub rician_k_db: f64,
    /// Laplacian per-ray angle jitter scale, in degrees.
    pub angle_spread_deg: f64,
    /// Power decay per cluster index, in dB.
    pub per_cluster_power_decay_db: f64,
}

impl ChannelProfile {
    pub fn analog_a() -> Self {
        Self {
            name: "A".into(),
            n_clusters: 23,
            rays_per_cluster: 20,
            los: false,
            rician_k_db: 0.0,
            angle_spread_deg: 3.0,
            per_cluster_power_decay_db: 2.0,
        }
    }

    pub fn analog_b() -> Self {
        Self {
            name: "B".into(),
            n_clusters: 40,
            rays_per_cluster: 20,
            los: false,
            rician_k_db: 0.0,
            angle_spread_deg: 8.0,
            per_cluster_power_decay_db: 0.25,
        }
    }

    pub fn analog_c() -> Self {
        Self {
            name: "C".into(),
            n_clusters: 24,
            rays_per_cluster: 20,
            los: false,
            rician_k_db: 0.0,
            angle_spread_deg: 5.0,
            per_cluster_power_decay_db: 1.0,
        }
    }

    pub fn analog_d() -> Self {
        Self {
            name: "D".into(),
            n_clusters: 13,
            rays_per_cluster: 20,
            los: true,
            rician_k_db: 22.0,
            angle_spread_deg: 1.5,
            per_cluster_power_decay_db: 3.0,
        }
    }

    pub fn analog_e() -> Self {
        Self {
            name: "E".into(),
            n_clusters: 14,
            rays_per_cluster: 20,
            los: true,
            rician_k_db: 13.0,
            angle_spread_deg: 4.0,
            per_cluster_power_decay_db: 1.5,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_uppercase().as_str() {
            "A" => Some(Self::analog_a()),
            "B" => Some(Self::analog_b()),
            "C" => Some(Self::analog_c()),
            "D" => Some(Self::analog_d()),
            "E" => Some(Self::analog_e()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 {
            return Err(Error::Config("n_clusters must be >= 1".into()));
        }
        if self.rays_per_cluster == 0 {
            return Err(Error::Config("rays_per_cluster must be >= 1".into()));
        }
        if self.angle_spread_deg < 0.0 {
            return Err(Error::Config("angle_spread_deg must be >= 0".into()));
        }
        Ok(())
    }
}

/// Uniform linear array geometry at both ends of the link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub n_t: usize,
    pub n_r: usize,
    /// Element spacing in carrier wavelengths; half-wavelength by default.
    pub spacing_wavelengths: f64,
}

impl ArrayConfig {
    pub fn new(n_t: usize, n_r: usize) -> Self {
        Self {
            n_t,
            n_r,
            spacing_wavelengths: 0.5,
        }
    }

    /// Paper-scale array: 64 transmit, 16 receive antennas.
    pub fn paper() -> Self {
        Self::new(64, 16)
    }

    /// Desk-scale array for fast runs: 16 transmit, 4 receive antennas.
    pub fn desk() -> Self {
        Self::new(16, 4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_t == 0 || self.n_r == 0 {
            return Err(Error::InvalidDimension(
                "antenna counts must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One channel draw: spatial matrix, its beamspace image and the LOS label.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    /// `n_r x n_t` spatial channel.
    pub h_spatial: Array2<C64>,
    /// `n_r x n_t` beamspace channel, `A_R^H H A_T`.
    pub h_beamspace: Array2<C64>,
    /// 1 for LOS, 0 for NLOS.
    pub los_label: u8,
}

/// Element-wise normalization statistics over a training dataset.
///
/// Statistics are indexed `(n_t, n_r)`, matching the stacked tensor layout,
/// while channel matrices are `(n_r, n_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mu: Array2<C64>,
    pub sigma_re: Array2<f64>,
    pub sigma_im: Array2<f64>,
}

impl NormStats {
    /// Identity statistics: zero mean, unit deviations.
    pub fn identity(n_t: usize, n_r: usize) -> Self {
        Self {
            mu: Array2::zeros((n_t, n_r)),
            sigma_re: Array2::ones((n_t, n_r)),
            sigma_im: Array2::ones((n_t, n_r)),
        }
    }

    pub fn n_t(&self) -> usize {
        self.mu.nrows()
    }

    pub fn n_r(&self) -> usize {
        self.mu.ncols()
    }

    fn check_channel_shape(&self, hv: &Array2<C64>) -> Result<()> {
        if hv.nrows() != self.n_r() || hv.ncols() != self.n_t() {
            return Err(Error::ShapeMismatch {
                expected: format!("channel ({}, {})", self.n_r(), self.n_t()),
                got: format!("({}, {})", hv.nrows(), hv.ncols()),
            });
        }
        Ok(())
    }

    /// Stack real/imaginary parts and normalize: output `(2, n_t, n_r)`.
    pub fn normalize(&self, hv: &Array2<C64>) -> Result<Array3<f64>> {
        self.check_channel_shape(hv)?;
        let (n_t, n_r) = (self.n_t(), self.n_r());
        let mut out = Array3::zeros((2, n_t, n_r));
        for i in 0..n_t {
            for j in 0..n_r {
                let z = hv[[j, i]] - self.mu[[i, j]];
                out[[0, i, j]] = z.re / self.sigma_re[[i, j]];
                out[[1, i, j]] = z.im / self.sigma_im[[i, j]];
            }
        }
        Ok(out)
    }

    /// Exact inverse of [`NormStats::normalize`].
    pub fn denormalize(&self, t: &Array3<f64>) -> Result<Array2<C64>> {
        let (n_t, n_r) = (self.n_t(), self.n_r());
        if t.dim() != (2, n_t, n_r) {
            return Err(Error::ShapeMismatch {
                expected: format!("tensor (2, {n_t}, {n_r})"),
                got: format!("{:?}", t.dim()),
            });
        }
        let mut hv = Array2::zeros((n_r, n_t));
        for i in 0..n_t {
            for j in 0..n_r {
                hv[[j, i]] = self.mu[[i, j]]
                    + C64::new(
                        t[[0, i, j]] * self.sigma_re[[i, j]],
                        t[[1, i, j]] * self.sigma_im[[i, j]],
                    );
            }
        }
        Ok(hv)
    }

    /// Normalize a zero-mean complex perturbation (no mean subtraction).
    /// Used when additive noise rides on top of an already-normalized sample.
    pub fn normalize_delta(&self, delta: &Array2<C64>) -> Result<Array3<f64>> {
        self.check_channel_shape(delta)?;
        let (n_t, n_r) = (self.n_t(), self.n_r());
        let mut out = Array3::zeros((2, n_t, n_r));
        for i in 0..n_t {
            for j in 0..n_r {
                out[[0, i, j]] = delta[[j, i]].re / self.sigma_re[[i, j]];
                out[[1, i, j]] = delta[[j, i]].im / self.sigma_im[[i, j]];
            }
        }
        Ok(out)
    }

    /// Chain rule through [`NormStats::denormalize`]: given the loss gradient
    /// with respect to the complex output (packed `grad[j,i] = dL/dRe + i dL/dIm`),
    /// return the gradient with respect to the normalized tensor.
    pub fn backprop_denormalize(&self, grad: &Array2<C64>) -> Result<Array3<f64>> {
        self.check_channel_shape(grad)?;
        let (n_t, n_r) = (self.n_t(), self.n_r());
        let mut out = Array3::zeros((2, n_t, n_r));
        for i in 0..n_t {
            for j in 0..n_r {
                out[[0, i, j]] = grad[[j, i]].re * self.sigma_re[[i, j]];
                out[[1, i, j]] = grad[[j, i]].im * self.sigma_im[[i, j]];
            }
        }
        Ok(out)
    }
}

/// Unitary DFT codebook: `U[p,q] = exp(-2 pi i p q / n) / sqrt(n)`.
pub fn dft_codebook(n: usize) -> Result<Array2<C64>> {
    if n == 0 {
        return Err(Error::InvalidDimension("DFT codebook size must be >= 1".into()));
    }
    let scale = 1.0 / (n as f64).sqrt();
    let base = -2.0 * std::f64::consts::PI / n as f64;
    Ok(Array2::from_shape_fn((n, n), |(p, q)| {
        // Reduce the phase index modulo n to keep precision for large p*q.
        let k = ((p * q) % n) as f64;
        C64::from_polar(scale, base * k)
    }))
}

/// Transmit-side steering vector sampled at spatial frequency `nu` (cycles per
/// element). Entries have unit magnitude so ensemble element power is exact.
fn steering(n: usize, nu: f64) -> Array1<C64> {
    Array1::from_shape_fn(n, |k| {
        C64::from_polar(1.0, -2.0 * std::f64::consts::PI * nu * k as f64)
    })
}

fn laplace<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    let u: f64 = rng.random::<f64>() - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
}

/// Draw one channel realization from a cluster profile.
pub fn sample_channel<R: Rng + ?Sized>(
    profile: &ChannelProfile,
    arrays: &ArrayConfig,
    rng: &mut R,
) -> Result<ChannelRealization> {
    profile.validate()?;
    arrays.validate()?;

    let (n_r, n_t) = (arrays.n_r, arrays.n_t);
    let spread_rad = profile.angle_spread_deg.to_radians();
    let spacing = arrays.spacing_wavelengths;
    // Mean angles stay off endfire so spatial frequencies remain spread out.
    let angle_range = 80f64.to_radians();

    // Per-cluster powers decay geometrically with the cluster index.
    let mut powers: Vec<f64> = (0..profile.n_clusters)
        .map(|c| 10f64.powf(-profile.per_cluster_power_decay_db * c as f64 / 10.0))
        .collect();
    let total: f64 = powers.iter().sum();
    powers.iter_mut().for_each(|p| *p /= total);

    let k_lin = if profile.los {
        10f64.powf(profile.rician_k_db / 10.0)
    } else {
        0.0
    };
    let diffuse_scale = 1.0 / (1.0 + k_lin);

    let mut h = Array2::<C64>::zeros((n_r, n_t));
    let gain_scale = std::f64::consts::FRAC_1_SQRT_2;
    for (c, &p_c) in powers.iter().enumerate() {
        let _ = c;
        let aod = rng.random_range(-angle_range..angle_range);
        let aoa = rng.random_range(-angle_range..angle_range);
        let ray_sigma = (p_c * diffuse_scale / profile.rays_per_cluster as f64).sqrt();
        for _ in 0..profile.rays_per_cluster {
            let nu_t = spacing * (aod + laplace(rng, spread_rad)).sin();
            let nu_r = spacing * (aoa + laplace(rng, spread_rad)).sin();
            let gain = C64::new(
                gain_scale * rng.sample::<f64, _>(rand_distr::StandardNormal),
                gain_scale * rng.sample::<f64, _>(rand_distr::StandardNormal),
            ) * ray_sigma;
            let a_r = steering(n_r, nu_r);
            let a_t = steering(n_t, nu_t);
            for i in 0..n_r {
                for j in 0..n_t {
                    h[[i, j]] += gain * a_r[i] * a_t[j].conj();
                }
            }
        }
    }

    if profile.los {
        let aod = rng.random_range(-angle_range..angle_range);
        let aoa = rng.random_range(-angle_range..angle_range);
        let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        let amp = (k_lin / (1.0 + k_lin)).sqrt();
        let gain = C64::from_polar(amp, phase);
        let a_r = steering(n_r, spacing * aoa.sin());
        let a_t = steering(n_t, spacing * aod.sin());
        for i in 0..n_r {
            for j in 0..n_t {
                h[[i, j]] += gain * a_r[i] * a_t[j].conj();
            }
        }
    }

    let hv = to_beamspace(&h)?;
    Ok(ChannelRealization {
        h_spatial: h,
        h_beamspace: hv,
        los_label: profile.los as u8,
    })
}

/// Beamspace image `A_R^H H A_T` of a spatial channel.
pub fn to_beamspace(h: &Array2<C64>) -> Result<Array2<C64>> {
    let (n_r, n_t) = h.dim();
    let a_r = dft_codebook(n_r)?;
    let a_t = dft_codebook(n_t)?;
    Ok(hermitian(&a_r).dot(h).dot(&a_t))
}

/// Inverse beamspace transform `A_R Hv A_T^H`.
pub fn from_beamspace(hv: &Array2<C64>) -> Result<Array2<C64>> {
    let (n_r, n_t) = hv.dim();
    let a_r = dft_codebook(n_r)?;
    let a_t = dft_codebook(n_t)?;
    Ok(a_r.dot(hv).dot(&hermitian(&a_t)))
}

/// Element-wise complex mean and real/imag standard deviations over a dataset
/// of beamspace channels, with deviations floored at [`SIGMA_FLOOR`].
pub fn compute_norm_stats(dataset: &[Array2<C64>]) -> Result<NormStats> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (n_r, n_t) = dataset[0].dim();
    for m in dataset {
        if m.dim() != (n_r, n_t) {
            return Err(Error::ShapeMismatch {
                expected: format!("({n_r}, {n_t})"),
                got: format!("{:?}", m.dim()),
            });
        }
    }
    let n = dataset.len() as f64;
    let mut mu = Array2::<C64>::zeros((n_t, n_r));
    for m in dataset {
        for i in 0..n_t {
            for j in 0..n_r {
                mu[[i, j]] += m[[j, i]];
            }
        }
    }
    mu.mapv_inplace(|z| z / n);
    let mut var_re = Array2::<f64>::zeros((n_t, n_r));
    let mut var_im = Array2::<f64>::zeros((n_t, n_r));
    for m in dataset {
        for i in 0..n_t {
            for j in 0..n_r {
                let d = m[[j, i]] - mu[[i, j]];
                var_re[[i, j]] += d.re * d.re;
                var_im[[i, j]] += d.im * d.im;
            }
        }
    }
    let sigma_re = var_re.mapv(|v| (v / n).sqrt().max(SIGMA_FLOOR));
    let sigma_im = var_im.mapv(|v| (v / n).sqrt().max(SIGMA_FLOOR));
    Ok(NormStats { mu, sigma_re, sigma_im })
}

/// Stack real/imag parts of a beamspace channel and normalize; see
/// [`NormStats::normalize`].
pub fn stack_normalize(hv: &Array2<C64>, stats: &NormStats) -> Result<Array3<f64>> {
    stats.normalize(hv)
}

/// Inverse of [`stack_normalize`].
pub fn unstack_unnormalize(t: &Array3<f64>, stats: &NormStats) -> Result<Array2<C64>> {
    stats.denormalize(t)
}

/// Fraction of total energy carried by the largest-magnitude beamspace entry.
pub fn top_entry_energy_share(hv: &Array2<C64>) -> f64 {
    let total: f64 = hv.iter().map(|z| z.norm_sqr()).sum();
    if total == 0.0 {
        return 0.0;
    }
    let top = hv.iter().map(|z| z.norm_sqr()).fold(0.0f64, f64::max);
    top / total
}

/// Gini coefficient of the entry magnitudes; 0 for uniform magnitudes, near 1
/// when a single entry dominates.
pub fn beamspace_gini(hv: &Array2<C64>) -> f64 {
    let mut mags: Vec<f64> = hv.iter().map(|z| z.norm()).collect();
    mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = mags.len() as f64;
    let sum: f64 = mags.iter().sum();
    if sum == 0.0 {
        return 0.0;
    }
    let weighted: f64 = mags
        .iter()
        .enumerate()
        .map(|(i, x)| (i as f64 + 1.0) * x)
        .sum();
    (2.0 * weighted) / (n * sum) - (n + 1.0) / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{complex_gaussian_matrix, frob};
    use approx::assert_relative_eq;
    use ndarray_linalg::SVD;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn max_abs_offdiag_err(u: &Array2<C64>) -> f64 {
        let g = hermitian(u).dot(u);
        let mut worst = 0.0f64;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[[i, j]] - C64::new(want, 0.0)).norm());
            }
        }
        worst
    }

    #[test]
    fn dft_rejects_zero_size() {
        assert!(matches!(dft_codebook(0), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn dft_size_one_is_identity() {
        let u = dft_codebook(1).unwrap();
        assert_eq!(u[[0, 0]], C64::new(1.0, 0.0));
    }

    #[test]
    fn dft_size_two_matches_analytic() {
        let u = dft_codebook(2).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert_relative_eq!(u[[0, 0]].re, s, epsilon = 1e-15);
        assert_relative_eq!(u[[0, 1]].re, s, epsilon = 1e-15);
        assert_relative_eq!(u[[1, 0]].re, s, epsilon = 1e-15);
        assert_relative_eq!(u[[1, 1]].re, -s, epsilon = 1e-12);
        assert!(u.iter().all(|z| z.im.abs() < 1e-12));
    }

    #[test]
    fn dft_unitary_at_64() {
        let u = dft_codebook(64).unwrap();
        assert!(max_abs_offdiag_err(&u) < 1e-12);
        for z in u.iter() {
            assert_relative_eq!(z.norm(), 1.0 / 8.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn single_ray_channel_is_rank_one() {
        let profile = ChannelProfile {
            name: "single".into(),
            n_clusters: 1,
            rays_per_cluster: 1,
            los: false,
            rician_k_db: 0.0,
            angle_spread_deg: 0.0,
            per_cluster_power_decay_db: 0.0,
        };
        let arrays = ArrayConfig::desk();
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let ch = sample_channel(&profile, &arrays, &mut rng).unwrap();
        let (_, s, _) = ch.h_spatial.svd(false, false).unwrap();
        assert!(s[1] < 1e-10 * s[0], "second singular value {} vs {}", s[1], s[0]);
    }

    #[test]
    fn ensemble_element_power_is_unit() {
        let profile = ChannelProfile::analog_a();
        let arrays = ArrayConfig::desk();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let draws = 10_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let ch = sample_channel(&profile, &arrays, &mut rng).unwrap();
            acc += ch
                .h_spatial
                .iter()
                .map(|z| z.norm_sqr())
                .sum::<f64>()
                / (arrays.n_t * arrays.n_r) as f64;
        }
        let mean_power = acc / draws as f64;
        assert!(
            (mean_power - 1.0).abs() < 0.05,
            "mean element power {mean_power}"
        );
    }

    #[test]
    fn strong_los_concentrates_beamspace_energy() {
        // Dominant specular ray at K = +20 dB: the top beamspace entry holds
        // most of the energy on average.
        let mut profile = ChannelProfile::analog_d();
        profile.rician_k_db = 20.0;
        let arrays = ArrayConfig::desk();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let draws = 1_000;
        let mean_share: f64 = (0..draws)
            .map(|_| {
                let ch = sample_channel(&profile, &arrays, &mut rng).unwrap();
                top_entry_energy_share(&ch.h_beamspace)
            })
            .sum::<f64>()
            / draws as f64;
        assert!(mean_share > 0.5, "mean top-entry share {mean_share}");
    }

    #[test]
    fn diffuse_profile_has_lower_gini_than_los_profile() {
        let arrays = ArrayConfig::desk();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let draws = 1_000;
        let mean_gini = |profile: &ChannelProfile, rng: &mut ChaCha12Rng| -> f64 {
            (0..draws)
                .map(|_| {
                    let ch = sample_channel(profile, &arrays, rng).unwrap();
                    beamspace_gini(&ch.h_beamspace)
                })
                .sum::<f64>()
                / draws as f64
        };
        let gini_b = mean_gini(&ChannelProfile::analog_b(), &mut rng);
        let gini_d = mean_gini(&ChannelProfile::analog_d(), &mut rng);
        assert!(
            gini_b < gini_d,
            "expected B gini {gini_b} < D gini {gini_d}"
        );
    }

    #[test]
    fn profile_concentration_ordering() {
        // Mean top-entry energy share must be monotone B < C < A < E < D.
        let arrays = ArrayConfig::desk();
        let draws = 1_000;
        let share = |profile: &ChannelProfile, seed: u64| -> f64 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            (0..draws)
                .map(|_| {
                    let ch = sample_channel(profile, &arrays, &mut rng).unwrap();
                    top_entry_energy_share(&ch.h_beamspace)
                })
                .sum::<f64>()
                / draws as f64
        };
        let b = share(&ChannelProfile::analog_b(), 100);
        let c = share(&ChannelProfile::analog_c(), 101);
        let a = share(&ChannelProfile::analog_a(), 102);
        let e = share(&ChannelProfile::analog_e(), 103);
        let d = share(&ChannelProfile::analog_d(), 104);
        assert!(
            b < c && c < a && a < e && e < d,
            "ordering violated: B={b:.4} C={c:.4} A={a:.4} E={e:.4} D={d:.4}"
        );
    }

    #[test]
    fn beamspace_roundtrip_and_norm_preservation() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let h = complex_gaussian_matrix(&mut rng, 4, 16);
        let hv = to_beamspace(&h).unwrap();
        let back = from_beamspace(&hv).unwrap();
        let mut err = Array2::<C64>::zeros(h.dim());
        err.assign(&back);
        err -= &h;
        assert!(frob(&err) / frob(&h) < 1e-10);
        assert!((frob(&hv) - frob(&h)).abs() / frob(&h) < 1e-10);

        let zero = Array2::<C64>::zeros((4, 16));
        assert_eq!(frob(&to_beamspace(&zero).unwrap()), 0.0);
    }

    #[test]
    fn beamspace_inverts_synthesis() {
        // h assembled as A_R X A_T^H maps back to X.
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let x = complex_gaussian_matrix(&mut rng, 4, 8);
        let h = from_beamspace(&x).unwrap();
        let got = to_beamspace(&h).unwrap();
        let mut err = got.clone();
        err -= &x;
        assert!(frob(&err) / frob(&x) < 1e-10);
    }

    #[test]
    fn single_beam_maps_to_dft_outer_product() {
        let (n_r, n_t) = (4usize, 8usize);
        let mut hv = Array2::<C64>::zeros((n_r, n_t));
        let (bi, bj) = (2usize, 5usize);
        hv[[bi, bj]] = C64::new(1.0, 0.0);
        let h = from_beamspace(&hv).unwrap();
        let a_r = dft_codebook(n_r).unwrap();
        let a_t = dft_codebook(n_t).unwrap();
        for r in 0..n_r {
            for c in 0..n_t {
                let want = a_r[[r, bi]] * a_t[[c, bj]].conj();
                assert_relative_eq!(h[[r, c]].re, want.re, epsilon = 1e-12);
                assert_relative_eq!(h[[r, c]].im, want.im, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn norm_stats_degenerate_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let m = complex_gaussian_matrix(&mut rng, 4, 6);

        // Single sample: mean is the sample, sigma hits the floor.
        let stats = compute_norm_stats(std::slice::from_ref(&m)).unwrap();
        for i in 0..6 {
            for j in 0..4 {
                assert_eq!(stats.mu[[i, j]], m[[j, i]]);
                assert_eq!(stats.sigma_re[[i, j]], SIGMA_FLOOR);
                assert_eq!(stats.sigma_im[[i, j]], SIGMA_FLOOR);
            }
        }

        // Symmetric pair {M, -M}: zero mean, sigma_re = |Re M|.
        let neg = m.mapv(|z| -z);
        let stats = compute_norm_stats(&[m.clone(), neg]).unwrap();
        for i in 0..6 {
            for j in 0..4 {
                assert!(stats.mu[[i, j]].norm() < 1e-14);
                assert_relative_eq!(
                    stats.sigma_re[[i, j]],
                    m[[j, i]].re.abs(),
                    epsilon = 1e-12
                );
            }
        }

        assert!(matches!(compute_norm_stats(&[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn norm_stats_monte_carlo_sigma() {
        // i.i.d. standard complex Gaussians: sigma_re approaches 1/sqrt(2).
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let dataset: Vec<Array2<C64>> = (0..10_000)
            .map(|_| complex_gaussian_matrix(&mut rng, 2, 3))
            .collect();
        let stats = compute_norm_stats(&dataset).unwrap();
        let want = std::f64::consts::FRAC_1_SQRT_2;
        for v in stats.sigma_re.iter().chain(stats.sigma_im.iter()) {
            assert!((v - want).abs() / want < 0.03, "sigma {v}");
        }
    }

    #[test]
    fn stack_normalize_centering_and_roundtrip() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let dataset: Vec<Array2<C64>> = (0..50)
            .map(|_| complex_gaussian_matrix(&mut rng, 4, 6))
            .collect();
        let stats = compute_norm_stats(&dataset).unwrap();

        // Normalizing the mean gives identically zero output.
        let mu_channel = Array2::from_shape_fn((4, 6), |(j, i)| stats.mu[[i, j]]);
        let t = stack_normalize(&mu_channel, &stats).unwrap();
        assert!(t.iter().all(|v| v.abs() < 1e-12));

        // Round trip.
        let hv = complex_gaussian_matrix(&mut rng, 4, 6);
        let t = stack_normalize(&hv, &stats).unwrap();
        let back = unstack_unnormalize(&t, &stats).unwrap();
        for (x, y) in hv.iter().zip(back.iter()) {
            assert!((x - y).norm() < 1e-10 * x.norm().max(1.0));
        }

        // Identity stats reduce to a raw transposed stack.
        let id = NormStats::identity(6, 4);
        let t = stack_normalize(&hv, &id).unwrap();
        for i in 0..6 {
            for j in 0..4 {
                assert_eq!(t[[0, i, j]], hv[[j, i]].re);
                assert_eq!(t[[1, i, j]], hv[[j, i]].im);
            }
        }
    }

    #[test]
    fn stack_normalize_shape_mismatch_errors() {
        let stats = NormStats::identity(6, 4);
        let wrong = Array2::<C64>::zeros((4, 5));
        assert!(stack_normalize(&wrong, &stats).is_err());
        let wrong_t = Array3::<f64>::zeros((2, 5, 4));
        assert!(unstack_unnormalize(&wrong_t, &stats).is_err());
    }
}
