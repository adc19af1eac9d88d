//! On-disk containers for channel datasets, LS-estimate datasets and network
//! checkpoints.
//!
//! All files share one layout: the magic `BGCE`, a format version, a JSON
//! header describing the payload sections, then the raw little-endian
//! sections in header order. Channel data is stored as float32 planes
//! (`(N, n_r, n_t)` real and imaginary parts); covariance factors and
//! network parameters are stored as float64.

use ndarray::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::channel::{sample_channel, ArrayConfig, ChannelProfile, ChannelRealization, NormStats};
use crate::error::{Error, Result};
use crate::linalg::C64;
use crate::measurement::{
    measure_with_triplets, sample_triplet, LsSolver, PilotConfig, PilotTriplet,
    FULL_RANK_ATTEMPTS,
};
use crate::nn::{
    Critic, CriticSpec, Generator, GeneratorSpec, LosPredictor, NetParams, NormalizedGenerator,
};

const MAGIC: &[u8; 4] = b"BGCE";
const FORMAT_VERSION: u16 = 1;

/// Version string recorded in dataset metadata.
pub const GENERATOR_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct SectionDesc {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileHeader {
    kind: String,
    format_version: u16,
    generator_version: String,
    meta: serde_json::Value,
    sections: Vec<SectionDesc>,
}

fn write_container(
    path: &Path,
    kind: &str,
    meta: serde_json::Value,
    sections: Vec<(SectionDesc, Vec<u8>)>,
) -> Result<()> {
    let header = FileHeader {
        kind: kind.to_string(),
        format_version: FORMAT_VERSION,
        generator_version: GENERATOR_VERSION.to_string(),
        meta,
        sections: sections.iter().map(|(d, _)| d.clone()).collect(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&FORMAT_VERSION.to_le_bytes())?;
    f.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    for (_, bytes) in &sections {
        f.write_all(bytes)?;
    }
    f.flush()?;
    Ok(())
}

fn read_container(path: &Path, expect_kind: &str) -> Result<(FileHeader, Vec<Vec<u8>>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a dataset container".into()));
    }
    let mut ver = [0u8; 2];
    f.read_exact(&mut ver)?;
    let version = u16::from_le_bytes(ver);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let mut len = [0u8; 4];
    f.read_exact(&mut len)?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len) as usize];
    f.read_exact(&mut header_bytes)?;
    let header: FileHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::Format(e.to_string()))?;
    if header.kind != expect_kind {
        return Err(Error::Format(format!(
            "expected a {expect_kind} file, found {}",
            header.kind
        )));
    }
    let mut payloads = Vec::with_capacity(header.sections.len());
    for s in &header.sections {
        let elem_size = match s.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            "u8" => 1,
            other => return Err(Error::Format(format!("unknown dtype {other}"))),
        };
        let n: usize = s.shape.iter().product();
        let mut bytes = vec![0u8; n * elem_size];
        f.read_exact(&mut bytes)?;
        payloads.push(bytes);
    }
    Ok((header, payloads))
}

fn complex_to_planes_f32(mats: &[Array2<C64>]) -> (Vec<u8>, Vec<u8>) {
    let mut re = Vec::with_capacity(mats.len() * mats[0].len() * 4);
    let mut im = Vec::with_capacity(re.capacity());
    for m in mats {
        for v in m.iter() {
            re.extend_from_slice(&(v.re as f32).to_le_bytes());
            im.extend_from_slice(&(v.im as f32).to_le_bytes());
        }
    }
    (re, im)
}

fn planes_f32_to_complex(
    re: &[u8],
    im: &[u8],
    n: usize,
    rows: usize,
    cols: usize,
) -> Result<Vec<Array2<C64>>> {
    let per = rows * cols;
    if re.len() != n * per * 4 || im.len() != n * per * 4 {
        return Err(Error::Format("section size mismatch".into()));
    }
    let rd = |b: &[u8], i: usize| f32::from_le_bytes(b[4 * i..4 * i + 4].try_into().unwrap());
    Ok((0..n)
        .map(|s| {
            Array2::from_shape_fn((rows, cols), |(r, c)| {
                let i = s * per + r * cols + c;
                C64::new(rd(re, i) as f64, rd(im, i) as f64)
            })
        })
        .collect())
}

fn f64_matrix_bytes(m: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.len() * 8);
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_to_f64_matrix(b: &[u8], rows: usize, cols: usize) -> Result<Array2<f64>> {
    if b.len() != rows * cols * 8 {
        return Err(Error::Format("f64 section size mismatch".into()));
    }
    Ok(Array2::from_shape_fn((rows, cols), |(r, c)| {
        let i = (r * cols + c) * 8;
        f64::from_le_bytes(b[i..i + 8].try_into().unwrap())
    }))
}

fn complex_matrix_sections(name: &str, m: &Array2<C64>) -> Vec<(SectionDesc, Vec<u8>)> {
    let (rows, cols) = m.dim();
    let re = Array2::from_shape_fn((rows, cols), |(r, c)| m[[r, c]].re);
    let im = Array2::from_shape_fn((rows, cols), |(r, c)| m[[r, c]].im);
    vec![
        (
            SectionDesc {
                name: format!("{name}_re"),
                dtype: "f64".into(),
                shape: vec![rows, cols],
            },
            f64_matrix_bytes(&re),
        ),
        (
            SectionDesc {
                name: format!("{name}_im"),
                dtype: "f64".into(),
                shape: vec![rows, cols],
            },
            f64_matrix_bytes(&im),
        ),
    ]
}

/// A dataset of channel realizations with spatial and beamspace planes,
/// LOS labels and per-sample profile indices.
#[derive(Debug, Clone)]
pub struct ChannelDataset {
    pub arrays: ArrayConfig,
    pub spatial: Vec<Array2<C64>>,
    pub beamspace: Vec<Array2<C64>>,
    pub los_labels: Vec<u8>,
    pub profile_idx: Vec<u8>,
    pub profile_names: Vec<String>,
    pub seed: u64,
}

impl ChannelDataset {
    /// Draw `n_per_profile` realizations of each profile, in profile order.
    pub fn generate(
        profiles: &[ChannelProfile],
        arrays: &ArrayConfig,
        n_per_profile: usize,
        seed: u64,
    ) -> Result<Self> {
        if profiles.is_empty() || n_per_profile == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut spatial = Vec::with_capacity(profiles.len() * n_per_profile);
        let mut beamspace = Vec::with_capacity(spatial.capacity());
        let mut los_labels = Vec::with_capacity(spatial.capacity());
        let mut profile_idx = Vec::with_capacity(spatial.capacity());
        for (pi, profile) in profiles.iter().enumerate() {
            for _ in 0..n_per_profile {
                let ch = sample_channel(profile, arrays, &mut rng)?;
                spatial.push(ch.h_spatial);
                beamspace.push(ch.h_beamspace);
                los_labels.push(ch.los_label);
                profile_idx.push(pi as u8);
            }
        }
        Ok(Self {
            arrays: *arrays,
            spatial,
            beamspace,
            los_labels,
            profile_idx,
            profile_names: profiles.iter().map(|p| p.name.clone()).collect(),
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.spatial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spatial.is_empty()
    }

    pub fn realization(&self, i: usize) -> ChannelRealization {
        ChannelRealization {
            h_spatial: self.spatial[i].clone(),
            h_beamspace: self.beamspace[i].clone(),
            los_label: self.los_labels[i],
        }
    }

    /// Indices belonging to one profile.
    pub fn profile_indices(&self, profile: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.profile_idx[i] as usize == profile)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let n = self.len();
        let (n_r, n_t) = (self.arrays.n_r, self.arrays.n_t);
        let (sp_re, sp_im) = complex_to_planes_f32(&self.spatial);
        let (bm_re, bm_im) = complex_to_planes_f32(&self.beamspace);
        let shape = vec![n, n_r, n_t];
        let sec = |name: &str, dtype: &str, shape: Vec<usize>, data: Vec<u8>| {
            (
                SectionDesc {
                    name: name.into(),
                    dtype: dtype.into(),
                    shape,
                },
                data,
            )
        };
        let meta = serde_json::json!({
            "profiles": self.profile_names,
            "arrays": self.arrays,
            "seed": self.seed,
        });
        write_container(
            path,
            "channels",
            meta,
            vec![
                sec("spatial_re", "f32", shape.clone(), sp_re),
                sec("spatial_im", "f32", shape.clone(), sp_im),
                sec("beamspace_re", "f32", shape.clone(), bm_re),
                sec("beamspace_im", "f32", shape.clone(), bm_im),
                sec("los", "u8", vec![n], self.los_labels.clone()),
                sec("profile", "u8", vec![n], self.profile_idx.clone()),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, payloads) = read_container(path, "channels")?;
        let arrays: ArrayConfig = serde_json::from_value(header.meta["arrays"].clone())
            .map_err(|e| Error::Format(e.to_string()))?;
        let profile_names: Vec<String> = serde_json::from_value(header.meta["profiles"].clone())
            .map_err(|e| Error::Format(e.to_string()))?;
        let seed = header.meta["seed"].as_u64().unwrap_or(0);
        let n = header.sections[0].shape[0];
        let (n_r, n_t) = (arrays.n_r, arrays.n_t);
        let spatial = planes_f32_to_complex(&payloads[0], &payloads[1], n, n_r, n_t)?;
        let beamspace = planes_f32_to_complex(&payloads[2], &payloads[3], n, n_r, n_t)?;
        Ok(Self {
            arrays,
            spatial,
            beamspace,
            los_labels: payloads[4].clone(),
            profile_idx: payloads[5].clone(),
            profile_names,
            seed,
        })
    }
}

/// A dataset of beamspace LS channel estimates from full-rank stacked pilot
/// measurements, with the shaped-noise covariance factor and the simulator's
/// ground truth (used for validation and evaluation metrics only).
#[derive(Debug, Clone)]
pub struct LsDataset {
    pub arrays: ArrayConfig,
    pub pilot: PilotConfig,
    pub hv_ls: Vec<Array2<C64>>,
    pub hv_true: Vec<Array2<C64>>,
    pub los_labels: Vec<u8>,
    /// Shared covariance square root when the pilot triplets are fixed
    /// across the dataset.
    pub sigma_half: Array2<C64>,
    /// Per-sample covariance square roots when triplets are redrawn per
    /// realization.
    pub sigma_half_per_sample: Option<Vec<Array2<C64>>>,
    pub full_rank: bool,
    pub triplet_seed: u64,
}

impl LsDataset {
    pub fn sigma(&self) -> f64 {
        self.pilot.sigma()
    }

    pub fn len(&self) -> usize {
        self.hv_ls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hv_ls.is_empty()
    }

    /// Build LS estimates for every channel. With `redraw_per_sample` the
    /// `K` triplets (and therefore the noise covariance) are redrawn per
    /// realization; by default one agreed schedule is shared, which matches
    /// a pilot protocol the transmitter and receiver fixed in advance.
    pub fn build(
        channels: &[ChannelRealization],
        pilot: &PilotConfig,
        arrays: &ArrayConfig,
        redraw_per_sample: bool,
        seed: u64,
    ) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let sigma = pilot.sigma();

        let draw_solver = |rng: &mut ChaCha12Rng| -> Result<LsSolver> {
            for _ in 0..FULL_RANK_ATTEMPTS {
                let triplets: Vec<PilotTriplet> = (0..pilot.k)
                    .map(|_| sample_triplet(pilot, arrays, rng))
                    .collect::<Result<_>>()?;
                match LsSolver::new(&triplets, arrays) {
                    Ok(s) => return Ok(s),
                    Err(Error::RankDeficient { .. }) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(Error::RankDeficient {
                rank: 0,
                required: arrays.n_t * arrays.n_r,
            })
        };

        let mut hv_ls = Vec::with_capacity(channels.len());
        let mut hv_true = Vec::with_capacity(channels.len());
        let mut los_labels = Vec::with_capacity(channels.len());

        if redraw_per_sample {
            let mut halves = Vec::with_capacity(channels.len());
            let mut shared = None;
            for ch in channels {
                let solver = draw_solver(&mut rng)?;
                let m = measure_with_triplets(&ch.h_spatial, &solver.triplets, sigma, &mut rng)?;
                hv_ls.push(solver.solve(&m.y)?);
                hv_true.push(ch.h_beamspace.clone());
                los_labels.push(ch.los_label);
                if shared.is_none() {
                    shared = Some(solver.sigma_half.clone());
                }
                halves.push(solver.sigma_half);
            }
            Ok(Self {
                arrays: *arrays,
                pilot: *pilot,
                hv_ls,
                hv_true,
                los_labels,
                sigma_half: shared.expect("nonempty"),
                sigma_half_per_sample: Some(halves),
                full_rank: true,
                triplet_seed: seed,
            })
        } else {
            let solver = draw_solver(&mut rng)?;
            for ch in channels {
                let m = measure_with_triplets(&ch.h_spatial, &solver.triplets, sigma, &mut rng)?;
                hv_ls.push(solver.solve(&m.y)?);
                hv_true.push(ch.h_beamspace.clone());
                los_labels.push(ch.los_label);
            }
            Ok(Self {
                arrays: *arrays,
                pilot: *pilot,
                hv_ls,
                hv_true,
                los_labels,
                sigma_half: solver.sigma_half,
                sigma_half_per_sample: None,
                full_rank: true,
                triplet_seed: seed,
            })
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let n = self.len();
        let (n_r, n_t) = (self.arrays.n_r, self.arrays.n_t);
        let (ls_re, ls_im) = complex_to_planes_f32(&self.hv_ls);
        let (tr_re, tr_im) = complex_to_planes_f32(&self.hv_true);
        let shape = vec![n, n_r, n_t];
        let sec = |name: &str, dtype: &str, shape: Vec<usize>, data: Vec<u8>| {
            (
                SectionDesc {
                    name: name.into(),
                    dtype: dtype.into(),
                    shape,
                },
                data,
            )
        };
        let mut sections = vec![
            sec("hvls_re", "f32", shape.clone(), ls_re),
            sec("hvls_im", "f32", shape.clone(), ls_im),
            sec("hvtrue_re", "f32", shape.clone(), tr_re),
            sec("hvtrue_im", "f32", shape.clone(), tr_im),
            sec("los", "u8", vec![n], self.los_labels.clone()),
        ];
        sections.extend(complex_matrix_sections("sigma_half", &self.sigma_half));
        if let Some(halves) = &self.sigma_half_per_sample {
            for (i, h) in halves.iter().enumerate() {
                sections.extend(complex_matrix_sections(&format!("sigma_half_{i}"), h));
            }
        }
        let meta = serde_json::json!({
            "arrays": self.arrays,
            "pilot": self.pilot,
            "full_rank": self.full_rank,
            "triplet_seed": self.triplet_seed,
            "per_sample_sigma": self.sigma_half_per_sample.is_some(),
        });
        write_container(path, "ls-estimates", meta, sections)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, payloads) = read_container(path, "ls-estimates")?;
        let arrays: ArrayConfig = serde_json::from_value(header.meta["arrays"].clone())
            .map_err(|e| Error::Format(e.to_string()))?;
        let pilot: PilotConfig = serde_json::from_value(header.meta["pilot"].clone())
            .map_err(|e| Error::Format(e.to_string()))?;
        let full_rank = header.meta["full_rank"].as_bool().unwrap_or(false);
        let triplet_seed = header.meta["triplet_seed"].as_u64().unwrap_or(0);
        let per_sample = header.meta["per_sample_sigma"].as_bool().unwrap_or(false);
        let n = header.sections[0].shape[0];
        let (n_r, n_t) = (arrays.n_r, arrays.n_t);
        let hv_ls = planes_f32_to_complex(&payloads[0], &payloads[1], n, n_r, n_t)?;
        let hv_true = planes_f32_to_complex(&payloads[2], &payloads[3], n, n_r, n_t)?;
        let los_labels = payloads[4].clone();

        let read_complex = |idx: usize| -> Result<Array2<C64>> {
            let d = &header.sections[idx];
            let re = bytes_to_f64_matrix(&payloads[idx], d.shape[0], d.shape[1])?;
            let im = bytes_to_f64_matrix(&payloads[idx + 1], d.shape[0], d.shape[1])?;
            Ok(Array2::from_shape_fn((d.shape[0], d.shape[1]), |(r, c)| {
                C64::new(re[[r, c]], im[[r, c]])
            }))
        };
        let sigma_half = read_complex(5)?;
        let sigma_half_per_sample = if per_sample {
            let mut halves = Vec::with_capacity(n);
            for i in 0..n {
                halves.push(read_complex(7 + 2 * i)?);
            }
            Some(halves)
        } else {
            None
        };
        Ok(Self {
            arrays,
            pilot,
            hv_ls,
            hv_true,
            los_labels,
            sigma_half,
            sigma_half_per_sample,
            full_rank,
            triplet_seed,
        })
    }
}

fn stats_sections(stats: &NormStats) -> Vec<(SectionDesc, Vec<u8>)> {
    let mut out = complex_matrix_sections("stats_mu", &stats.mu);
    out.push((
        SectionDesc {
            name: "stats_sigma_re".into(),
            dtype: "f64".into(),
            shape: vec![stats.n_t(), stats.n_r()],
        },
        f64_matrix_bytes(&stats.sigma_re),
    ));
    out.push((
        SectionDesc {
            name: "stats_sigma_im".into(),
            dtype: "f64".into(),
            shape: vec![stats.n_t(), stats.n_r()],
        },
        f64_matrix_bytes(&stats.sigma_im),
    ));
    out
}

fn net_param_sections(params: &NetParams) -> Vec<(SectionDesc, Vec<u8>)> {
    let mut out = Vec::new();
    for (prefix, entries) in [("param", &params.params), ("buffer", &params.buffers)] {
        for (name, arr) in entries {
            let mut bytes = Vec::with_capacity(arr.len() * 8);
            for v in arr.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            out.push((
                SectionDesc {
                    name: format!("{prefix}:{name}"),
                    dtype: "f64".into(),
                    shape: arr.shape().to_vec(),
                },
                bytes,
            ));
        }
    }
    out
}

fn read_net_params(
    header: &FileHeader,
    payloads: &[Vec<u8>],
    start: usize,
) -> Result<NetParams> {
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    for (desc, bytes) in header.sections[start..]
        .iter()
        .zip(payloads[start..].iter())
    {
        let n: usize = desc.shape.iter().product();
        if bytes.len() != n * 8 {
            return Err(Error::Format("parameter section size mismatch".into()));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(f64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().unwrap()));
        }
        let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&desc.shape), data)
            .map_err(|e| Error::Format(e.to_string()))?;
        if let Some(name) = desc.name.strip_prefix("param:") {
            params.push((name.to_string(), arr));
        } else if let Some(name) = desc.name.strip_prefix("buffer:") {
            buffers.push((name.to_string(), arr));
        }
    }
    Ok(NetParams { params, buffers })
}

fn read_stats(header: &FileHeader, payloads: &[Vec<u8>]) -> Result<(NormStats, usize)> {
    let d = &header.sections[0];
    let (n_t, n_r) = (d.shape[0], d.shape[1]);
    let mu_re = bytes_to_f64_matrix(&payloads[0], n_t, n_r)?;
    let mu_im = bytes_to_f64_matrix(&payloads[1], n_t, n_r)?;
    let sigma_re = bytes_to_f64_matrix(&payloads[2], n_t, n_r)?;
    let sigma_im = bytes_to_f64_matrix(&payloads[3], n_t, n_r)?;
    let mu = Array2::from_shape_fn((n_t, n_r), |(i, j)| C64::new(mu_re[[i, j]], mu_im[[i, j]]));
    Ok((
        NormStats {
            mu,
            sigma_re,
            sigma_im,
        },
        4,
    ))
}

/// Checkpoint metadata shared by all network kinds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub iteration: usize,
}

/// Save a generator (with its normalization statistics) to one file.
pub fn save_generator_checkpoint(
    path: &Path,
    gen: &NormalizedGenerator,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut sections = stats_sections(&gen.stats);
    sections.extend(net_param_sections(&NetParams::of_generator(&gen.net)));
    let meta_json = serde_json::json!({
        "spec": gen.net.spec,
        "config_hash": meta.config_hash,
        "iteration": meta.iteration,
    });
    write_container(path, "generator-checkpoint", meta_json, sections)
}

pub fn load_generator_checkpoint(path: &Path) -> Result<(NormalizedGenerator, CheckpointMeta)> {
    let (header, payloads) = read_container(path, "generator-checkpoint")?;
    let spec: GeneratorSpec = serde_json::from_value(header.meta["spec"].clone())
        .map_err(|e| Error::Format(e.to_string()))?;
    let (stats, skip) = read_stats(&header, &payloads)?;
    let params = read_net_params(&header, &payloads, skip)?;
    let mut net = Generator::init(spec, &mut ChaCha12Rng::seed_from_u64(0))?;
    params.load_into_generator(&mut net)?;
    let meta = CheckpointMeta {
        config_hash: header.meta["config_hash"].as_str().unwrap_or("").to_string(),
        iteration: header.meta["iteration"].as_u64().unwrap_or(0) as usize,
    };
    Ok((NormalizedGenerator { net, stats }, meta))
}

/// Save a trained LOS predictor (with its normalization statistics).
pub fn save_los_checkpoint(
    path: &Path,
    predictor: &LosPredictor,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut sections = stats_sections(&predictor.stats);
    sections.extend(net_param_sections(&NetParams::of_critic(&predictor.net)));
    let meta_json = serde_json::json!({
        "spec": predictor.net.spec,
        "config_hash": meta.config_hash,
        "iteration": meta.iteration,
    });
    write_container(path, "los-checkpoint", meta_json, sections)
}

pub fn load_los_checkpoint(path: &Path) -> Result<(LosPredictor, CheckpointMeta)> {
    let (header, payloads) = read_container(path, "los-checkpoint")?;
    let spec: CriticSpec = serde_json::from_value(header.meta["spec"].clone())
        .map_err(|e| Error::Format(e.to_string()))?;
    let (stats, skip) = read_stats(&header, &payloads)?;
    let params = read_net_params(&header, &payloads, skip)?;
    let mut net = Critic::init(spec, &mut ChaCha12Rng::seed_from_u64(0))?;
    params.load_into_critic(&mut net)?;
    let meta = CheckpointMeta {
        config_hash: header.meta["config_hash"].as_str().unwrap_or("").to_string(),
        iteration: header.meta["iteration"].as_u64().unwrap_or(0) as usize,
    };
    Ok((LosPredictor { net, stats }, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn channel_dataset_roundtrip_and_determinism() {
        let profiles = vec![ChannelProfile::analog_a(), ChannelProfile::analog_d()];
        let arrays = ArrayConfig::desk();
        let ds = ChannelDataset::generate(&profiles, &arrays, 5, 42).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.profile_idx[7], 1);
        assert_eq!(ds.los_labels[7], 1);

        let dir = std::env::temp_dir().join("beamgce-test-ds");
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.bgce");
        let p2 = dir.join("b.bgce");
        ds.save(&p1).unwrap();
        let ds2 = ChannelDataset::generate(&profiles, &arrays, 5, 42).unwrap();
        ds2.save(&p2).unwrap();
        // Same seed, byte-identical files.
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let loaded = ChannelDataset::load(&p1).unwrap();
        assert_eq!(loaded.len(), 10);
        assert_eq!(loaded.profile_names, vec!["A", "D"]);
        // f32 round trip is lossy only below the f32 resolution.
        for (a, b) in ds.beamspace.iter().zip(&loaded.beamspace) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).norm() < 1e-6);
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn ls_dataset_roundtrip() {
        let profiles = vec![ChannelProfile::analog_a()];
        let arrays = ArrayConfig::desk();
        let channels = ChannelDataset::generate(&profiles, &arrays, 6, 1).unwrap();
        let realizations: Vec<_> = (0..channels.len()).map(|i| channels.realization(i)).collect();
        let pilot = PilotConfig {
            snr_db: 20.0,
            ..PilotConfig::desk()
        };
        let ls = LsDataset::build(&realizations, &pilot, &arrays, false, 7).unwrap();
        assert!(ls.full_rank);
        assert_eq!(ls.len(), 6);

        let dir = std::env::temp_dir().join("beamgce-test-ls");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("ls.bgce");
        ls.save(&p).unwrap();
        let loaded = LsDataset::load(&p).unwrap();
        assert_eq!(loaded.len(), 6);
        assert_eq!(loaded.pilot, ls.pilot);
        assert!(loaded.full_rank);
        for (a, b) in ls.sigma_half.iter().zip(loaded.sigma_half.iter()) {
            assert!((a - b).norm() < 1e-15);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn ls_dataset_noiseless_estimates_equal_truth() {
        let profiles = vec![ChannelProfile::analog_d()];
        let arrays = ArrayConfig::desk();
        let channels = ChannelDataset::generate(&profiles, &arrays, 4, 3).unwrap();
        let realizations: Vec<_> = (0..channels.len()).map(|i| channels.realization(i)).collect();
        let ls = LsDataset::build(&realizations, &PilotConfig::desk(), &arrays, false, 9).unwrap();
        for (est, truth) in ls.hv_ls.iter().zip(&ls.hv_true) {
            let num: f64 = est
                .iter()
                .zip(truth.iter())
                .map(|(a, b)| (a - b).norm_sqr())
                .sum();
            let den: f64 = truth.iter().map(|z| z.norm_sqr()).sum();
            assert!(num / den < 1e-16);
        }
    }

    #[test]
    fn generator_checkpoint_roundtrip() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let net = Generator::init(GeneratorSpec::desk(true), &mut rng).unwrap();
        let stats = NormStats::identity(16, 4);
        let gen = NormalizedGenerator { net, stats };
        let dir = std::env::temp_dir().join("beamgce-test-ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("g.bgce");
        save_generator_checkpoint(
            &p,
            &gen,
            &CheckpointMeta {
                config_hash: "abc123".into(),
                iteration: 99,
            },
        )
        .unwrap();
        let (loaded, meta) = load_generator_checkpoint(&p).unwrap();
        assert_eq!(meta.iteration, 99);
        assert_eq!(meta.config_hash, "abc123");
        let z = Array2::from_shape_fn((3, 24), |_| rng.random::<f64>());
        let (a, _) = gen.net.forward_eval(&z, Some(&[0, 1, 1])).unwrap();
        let (b, _) = loaded.net.forward_eval(&z, Some(&[0, 1, 1])).unwrap();
        assert_eq!(a, b);
        std::fs::remove_dir_all(&dir).ok();
    }
}
