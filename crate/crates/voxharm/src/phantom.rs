//! Synthetic multi-site "brain" phantoms: nested-ellipsoid anatomies with
//! ground-truth tissue labels, plus parametric per-site intensity transforms
//! (tone curve, gamma, multiplicative bias field, additive noise).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::volume::{self, NormalizationRecord, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("site profile {site_id}: base intensities must be strictly increasing in [0, 1)")]
    NonMonotoneBase { site_id: String },
    #[error("site profile {site_id}: gamma must be positive, got {gamma}")]
    BadGamma { site_id: String, gamma: f32 },
    #[error("site profile {site_id}: global_scale must be positive, got {scale}")]
    BadScale { site_id: String, scale: f32 },
    #[error("site profile {site_id}: bias coefficients too large (sum of magnitudes {sum} >= 1)")]
    BiasNotPositive { site_id: String, sum: f32 },
    #[error("site profile {site_id}: noise sigma must be non-negative, got {sigma}")]
    BadSigma { site_id: String, sigma: f32 },
    #[error("canonical volume must be normalized before applying a site profile")]
    CanonicalNotNormalized,
    #[error("n_per_site must be at least 1")]
    EmptyDataset,
    #[error("label map dims {label:?} do not match volume dims {volume:?}")]
    LabelDimsMismatch {
        label: (usize, usize, usize),
        volume: (usize, usize, usize),
    },
    #[error("manifest line {line} is malformed: {reason}")]
    BadManifestLine { line: usize, reason: String },
}

/// Tissue classes, ordered by canonical brightness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum TissueClass {
    Background = 0,
    CsfLike = 1,
    GmLike = 2,
    WmLike = 3,
    Lesion = 4,
}

impl TissueClass {
    pub const ALL: [TissueClass; 5] = [
        TissueClass::Background,
        TissueClass::CsfLike,
        TissueClass::GmLike,
        TissueClass::WmLike,
        TissueClass::Lesion,
    ];

    pub fn from_index(i: u8) -> Option<TissueClass> {
        TissueClass::ALL.get(i as usize).copied()
    }
}

/// Reference intensity of each class in the canonical (site-free) rendering.
pub const CANONICAL_LEVELS: [f32; 5] = [0.0, 0.25, 0.55, 0.80, 0.92];

/// Per-voxel tissue classes aligned with a volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub dims: (usize, usize, usize),
    pub classes: Vec<u8>,
}

impl LabelMap {
    pub fn count(&self, class: TissueClass) -> usize {
        self.classes.iter().filter(|&&c| c == class as u8).count()
    }

    /// Encodes classes as whole-number f32 voxels in the volume container.
    pub fn to_volume(&self, spacing: (f32, f32, f32), site_id: &str) -> Volume {
        let data = self.classes.iter().map(|&c| c as f32).collect();
        Volume::new(self.dims, spacing, data, site_id).expect("dims match by construction")
    }

    pub fn from_volume(v: &Volume) -> LabelMap {
        LabelMap {
            dims: v.dims,
            classes: v.data().iter().map(|&x| x as u8).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f32; 3],
    radii: [f32; 3],
    class: TissueClass,
}

impl Ellipsoid {
    fn contains(&self, p: [f32; 3]) -> bool {
        let mut acc = 0.0f32;
        for a in 0..3 {
            let t = (p[a] - self.center[a]) / self.radii[a];
            acc += t * t;
        }
        acc <= 1.0
    }
}

/// Randomized anatomy: nested head/GM/WM ellipsoids, one small bright lesion,
/// and a smooth sinusoidal warp. Deterministic in `seed`.
#[derive(Clone, Debug)]
pub struct PhantomAnatomy {
    pub seed: u64,
    pub deformation_amplitude: f32,
    structures: Vec<Ellipsoid>,
    warp_phases: [[f32; 3]; 3],
}

impl PhantomAnatomy {
    pub fn sample(seed: u64, edge: usize) -> PhantomAnatomy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = edge as f32;
        let jitter = |rng: &mut ChaCha8Rng, base: f32, frac: f32| -> f32 {
            base * (1.0 + rng.random_range(-frac..frac))
        };

        let center = [
            n * 0.5 + rng.random_range(-0.02..0.02) * n,
            n * 0.5 + rng.random_range(-0.02..0.02) * n,
            n * 0.5 + rng.random_range(-0.02..0.02) * n,
        ];
        let head_radii = [
            jitter(&mut rng, 0.42 * n, 0.05),
            jitter(&mut rng, 0.40 * n, 0.05),
            jitter(&mut rng, 0.38 * n, 0.05),
        ];
        let gm_radii = [
            head_radii[0] * jitter(&mut rng, 0.84, 0.03),
            head_radii[1] * jitter(&mut rng, 0.84, 0.03),
            head_radii[2] * jitter(&mut rng, 0.84, 0.03),
        ];
        let wm_radii = [
            gm_radii[0] * jitter(&mut rng, 0.70, 0.04),
            gm_radii[1] * jitter(&mut rng, 0.70, 0.04),
            gm_radii[2] * jitter(&mut rng, 0.70, 0.04),
        ];

        // lesion sits strictly inside the white-matter core
        let lesion_r = jitter(&mut rng, 0.055 * n, 0.25);
        let lesion_center = loop {
            let p = [
                center[0] + rng.random_range(-0.6..0.6) * wm_radii[0],
                center[1] + rng.random_range(-0.6..0.6) * wm_radii[1],
                center[2] + rng.random_range(-0.6..0.6) * wm_radii[2],
            ];
            let mut acc = 0.0f32;
            for a in 0..3 {
                let t = (p[a] - center[a]) / (wm_radii[a] - lesion_r);
                acc += t * t;
            }
            if acc <= 1.0 {
                break p;
            }
        };

        let mut warp_phases = [[0.0f32; 3]; 3];
        for row in &mut warp_phases {
            for phase in row.iter_mut() {
                *phase = rng.random_range(0.0..std::f32::consts::TAU);
            }
        }

        PhantomAnatomy {
            seed,
            deformation_amplitude: 0.02 * n,
            structures: vec![
                Ellipsoid {
                    center,
                    radii: head_radii,
                    class: TissueClass::CsfLike,
                },
                Ellipsoid {
                    center,
                    radii: gm_radii,
                    class: TissueClass::GmLike,
                },
                Ellipsoid {
                    center,
                    radii: wm_radii,
                    class: TissueClass::WmLike,
                },
                Ellipsoid {
                    center: lesion_center,
                    radii: [lesion_r, lesion_r, lesion_r],
                    class: TissueClass::Lesion,
                },
            ],
            warp_phases,
        }
    }

    /// Smooth displacement sampled at a voxel position, in voxels.
    fn warp(&self, p: [f32; 3], edge: usize) -> [f32; 3] {
        let n = edge as f32;
        let mut out = [0.0f32; 3];
        for (axis, phases) in self.warp_phases.iter().enumerate() {
            let s = (std::f32::consts::TAU * p[0] / n + phases[0]).sin()
                * (std::f32::consts::TAU * p[1] / n + phases[1]).sin()
                * (std::f32::consts::TAU * p[2] / n + phases[2]).sin();
            out[axis] = self.deformation_amplitude * s;
        }
        out
    }

    fn classify(&self, p: [f32; 3], edge: usize) -> TissueClass {
        let w = self.warp(p, edge);
        let q = [p[0] + w[0], p[1] + w[1], p[2] + w[2]];
        // innermost structure wins
        for e in self.structures.iter().rev() {
            if e.contains(q) {
                return e.class;
            }
        }
        TissueClass::Background
    }
}

/// Renders the canonical (site-free) volume and its label map.
///
/// Every voxel of one class carries exactly that class's canonical level;
/// the volume is already in `[0, 1]` and carries a unit normalization record.
pub fn generate_anatomy(seed: u64, edge: usize) -> (Volume, LabelMap) {
    let anatomy = PhantomAnatomy::sample(seed, edge);
    let n = edge * edge * edge;
    let mut data = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);
    for z in 0..edge {
        for y in 0..edge {
            for x in 0..edge {
                let class = anatomy.classify([z as f32, y as f32, x as f32], edge);
                classes.push(class as u8);
                data.push(CANONICAL_LEVELS[class as usize]);
            }
        }
    }
    let volume = Volume::new((edge, edge, edge), (1.0, 1.0, 1.0), data, "canonical")
        .expect("valid dims")
        .with_norm(NormalizationRecord::new(0.0, 1.0).expect("unit range"));
    let labels = LabelMap {
        dims: (edge, edge, edge),
        classes,
    };
    (volume, labels)
}

/// Low-order multiplicative bias field with unit mean over the volume.
///
/// `bias(x̂, ŷ, ẑ) = 1 + Σ cᵢ·Pᵢ` with coordinates in `[-1, 1]` and the pure
/// quadratic terms centred (`x̂² - 1/3`) so the field keeps mean 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiasField {
    pub coeffs: [f32; 9],
}

impl BiasField {
    pub fn flat() -> BiasField {
        BiasField { coeffs: [0.0; 9] }
    }

    pub fn magnitude(&self) -> f32 {
        self.coeffs.iter().map(|c| c.abs()).sum()
    }

    pub fn eval(&self, xh: f32, yh: f32, zh: f32) -> f32 {
        let c = &self.coeffs;
        1.0 + c[0] * xh
            + c[1] * yh
            + c[2] * zh
            + c[3] * xh * yh
            + c[4] * yh * zh
            + c[5] * xh * zh
            + c[6] * (xh * xh - 1.0 / 3.0)
            + c[7] * (yh * yh - 1.0 / 3.0)
            + c[8] * (zh * zh - 1.0 / 3.0)
    }
}

/// Parametric acquisition model for one site: a strictly monotone tone curve
/// (piecewise-linear remap of the canonical class levels, then gamma, scale
/// and offset), a multiplicative bias field, and additive Gaussian noise.
#[derive(Clone, Debug)]
pub struct SiteProfile {
    pub site_id: String,
    base_intensities: [f32; 5],
    gamma: f32,
    bias: BiasField,
    noise_sigma: f32,
    global_scale: f32,
    global_offset: f32,
    /// Simulated scanner intensity range stamped into the normalization
    /// record of rendered volumes.
    clinical_range: (f32, f32),
}

impl SiteProfile {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        site_id: impl Into<String>,
        base_intensities: [f32; 5],
        gamma: f32,
        bias: BiasField,
        noise_sigma: f32,
        global_scale: f32,
        global_offset: f32,
        clinical_range: (f32, f32),
    ) -> Result<SiteProfile, PhantomError> {
        let site_id = site_id.into();
        let increasing = base_intensities.windows(2).all(|w| w[0] < w[1]);
        if !increasing || base_intensities[0] < 0.0 || base_intensities[4] >= 1.0 {
            return Err(PhantomError::NonMonotoneBase { site_id });
        }
        if gamma <= 0.0 {
            return Err(PhantomError::BadGamma { site_id, gamma });
        }
        if global_scale <= 0.0 {
            return Err(PhantomError::BadScale {
                site_id,
                scale: global_scale,
            });
        }
        let sum = bias.magnitude();
        if sum >= 1.0 {
            return Err(PhantomError::BiasNotPositive { site_id, sum });
        }
        if noise_sigma < 0.0 {
            return Err(PhantomError::BadSigma {
                site_id,
                sigma: noise_sigma,
            });
        }
        Ok(SiteProfile {
            site_id,
            base_intensities,
            gamma,
            bias,
            noise_sigma,
            global_scale,
            global_offset,
            clinical_range,
        })
    }

    /// Identity transform: output voxels equal input voxels exactly.
    pub fn identity(site_id: impl Into<String>) -> SiteProfile {
        SiteProfile {
            site_id: site_id.into(),
            base_intensities: CANONICAL_LEVELS,
            gamma: 1.0,
            bias: BiasField::flat(),
            noise_sigma: 0.0,
            global_scale: 1.0,
            global_offset: 0.0,
            clinical_range: (0.0, 1.0),
        }
    }

    pub fn gamma(&self) -> f32 {
        self.gamma
    }

    pub fn noise_sigma(&self) -> f32 {
        self.noise_sigma
    }

    pub fn clinical_range(&self) -> (f32, f32) {
        self.clinical_range
    }

    pub fn without_noise(&self) -> SiteProfile {
        let mut p = self.clone();
        p.noise_sigma = 0.0;
        p
    }

    /// Piecewise-linear remap through (canonical level, site level) control
    /// points, extended by (1, 1). Strictly increasing on [0, 1].
    fn remap(&self, v: f32) -> f32 {
        let mut xs = [0.0f32; 6];
        let mut ys = [0.0f32; 6];
        xs[..5].copy_from_slice(&CANONICAL_LEVELS);
        ys[..5].copy_from_slice(&self.base_intensities);
        xs[5] = 1.0;
        ys[5] = 1.0;
        let v = v.clamp(0.0, 1.0);
        for i in 0..5 {
            if v <= xs[i + 1] {
                let t = if xs[i + 1] > xs[i] {
                    (v - xs[i]) / (xs[i + 1] - xs[i])
                } else {
                    0.0
                };
                return ys[i] + t * (ys[i + 1] - ys[i]);
            }
        }
        ys[5]
    }

    /// The deterministic part of the transform at a normalized coordinate.
    fn transfer(&self, v: f32, xh: f32, yh: f32, zh: f32) -> f32 {
        let u = self.remap(v);
        let powed = if self.gamma == 1.0 { u } else { u.powf(self.gamma) };
        self.global_scale * self.bias.eval(xh, yh, zh) * powed + self.global_offset
    }
}

/// Renders a canonical volume through a site's acquisition model:
/// `clamp(scale · bias(x,y,z) · remap(v)^gamma + offset + noise, 0, 1)`.
pub fn apply_site_profile(
    canonical: &Volume,
    profile: &SiteProfile,
    noise_seed: u64,
) -> Result<Volume, PhantomError> {
    if canonical.norm.is_none() {
        return Err(PhantomError::CanonicalNotNormalized);
    }
    let (nz, ny, nx) = canonical.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let normal = Normal::new(0.0f32, 1.0f32).expect("unit normal");
    let mut data = Vec::with_capacity(canonical.numel());
    let norm_coord = |i: usize, n: usize| 2.0 * (i as f32 + 0.5) / n as f32 - 1.0;
    for z in 0..nz {
        let zh = norm_coord(z, nz);
        for y in 0..ny {
            let yh = norm_coord(y, ny);
            for x in 0..nx {
                let xh = norm_coord(x, nx);
                let v = canonical.data()[canonical.index(z, y, x)];
                let mut out = profile.transfer(v, xh, yh, zh);
                if profile.noise_sigma > 0.0 {
                    out += profile.noise_sigma * normal.sample(&mut rng);
                }
                data.push(out.clamp(0.0, 1.0));
            }
        }
    }
    let (cmin, cmax) = profile.clinical_range;
    Ok(
        Volume::new(canonical.dims, canonical.spacing, data, profile.site_id.clone())?
            .with_norm(NormalizationRecord::new(cmin, cmax)?),
    )
}

/// Three built-in site profiles with clearly distinct tone curves, bias
/// patterns and noise levels. Values are fixtures, not scanner claims.
pub fn default_profiles() -> Vec<SiteProfile> {
    vec![
        SiteProfile::new(
            "site_a",
            [0.0, 0.30, 0.60, 0.83, 0.94],
            0.9,
            BiasField {
                coeffs: [0.02, 0.0, 0.015, 0.0, 0.0, 0.01, 0.015, 0.0, 0.0],
            },
            0.010,
            1.0,
            0.0,
            (0.0, 1500.0),
        )
        .expect("fixture"),
        SiteProfile::new(
            "site_b",
            [0.0, 0.17, 0.42, 0.70, 0.86],
            1.6,
            BiasField {
                coeffs: [0.0, -0.025, 0.0, 0.01, 0.0, 0.0, 0.0, 0.015, -0.01],
            },
            0.015,
            0.95,
            0.005,
            (0.0, 2600.0),
        )
        .expect("fixture"),
        SiteProfile::new(
            "site_c",
            [0.0, 0.38, 0.66, 0.86, 0.955],
            0.62,
            BiasField {
                coeffs: [-0.015, 0.01, -0.02, 0.0, 0.005, 0.0, 0.0, 0.0, 0.01],
            },
            0.020,
            0.90,
            0.01,
            (12.0, 880.0),
        )
        .expect("fixture"),
    ]
}

// ── dataset generation ──────────────────────────────────────────────────

/// One dataset row: a rendered site volume plus its ground-truth labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub site_id: String,
    pub subject_seed: u64,
    pub volume_path: PathBuf,
    pub labels_path: PathBuf,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Seed for subject `index` of site `site_index`; subjects never repeat
/// across sites.
pub fn subject_seed(master_seed: u64, site_index: usize, index: usize, n_per_site: usize) -> u64 {
    splitmix64(master_seed ^ splitmix64((site_index * n_per_site + index + 1) as u64))
}

/// Writes `n_per_site` rendered volumes and label maps per site and returns
/// the manifest. Fully deterministic in `(master_seed, profiles, n_per_site)`.
pub fn generate_dataset(
    n_per_site: usize,
    profiles: &[SiteProfile],
    out_dir: impl AsRef<Path>,
    master_seed: u64,
    edge: usize,
) -> Result<Vec<ManifestEntry>, PhantomError> {
    if n_per_site == 0 {
        return Err(PhantomError::EmptyDataset);
    }
    let out_dir = out_dir.as_ref();
    let mut manifest = Vec::new();
    for (site_index, profile) in profiles.iter().enumerate() {
        let site_dir = out_dir.join(&profile.site_id);
        fs::create_dir_all(&site_dir)?;
        for j in 0..n_per_site {
            let seed = subject_seed(master_seed, site_index, j, n_per_site);
            let (canonical, labels) = generate_anatomy(seed, edge);
            let rendered = apply_site_profile(&canonical, profile, splitmix64(seed ^ 1))?;
            let vol_rel = PathBuf::from(&profile.site_id).join(format!("subj_{j:03}.hvol"));
            let lab_rel = PathBuf::from(&profile.site_id).join(format!("subj_{j:03}_labels.hvol"));
            volume::write_volume(&rendered, out_dir.join(&vol_rel))?;
            volume::write_volume(
                &labels.to_volume(rendered.spacing, &profile.site_id),
                out_dir.join(&lab_rel),
            )?;
            manifest.push(ManifestEntry {
                site_id: profile.site_id.clone(),
                subject_seed: seed,
                volume_path: vol_rel,
                labels_path: lab_rel,
            });
        }
    }
    write_manifest(&manifest, out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// One record per line: `site_id<TAB>subject_seed<TAB>volume_path<TAB>labels_path`.
pub fn write_manifest(
    entries: &[ManifestEntry],
    path: impl AsRef<Path>,
) -> Result<(), PhantomError> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.site_id,
            e.subject_seed,
            e.volume_path.display(),
            e.labels_path.display()
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a manifest; relative paths stay relative to the manifest location.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, PhantomError> {
    let text = fs::read_to_string(&path)?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(PhantomError::BadManifestLine {
                line: i + 1,
                reason: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let subject_seed = fields[1].parse().map_err(|_| PhantomError::BadManifestLine {
            line: i + 1,
            reason: format!("bad subject seed {:?}", fields[1]),
        })?;
        entries.push(ManifestEntry {
            site_id: fields[0].to_string(),
            subject_seed,
            volume_path: PathBuf::from(fields[2]),
            labels_path: PathBuf::from(fields[3]),
        });
    }
    Ok(entries)
}

/// Resolves a manifest-relative path against the manifest's directory.
pub fn resolve_path(manifest_path: &Path, entry_path: &Path) -> PathBuf {
    if entry_path.is_absolute() {
        entry_path.to_path_buf()
    } else {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(entry_path)
    }
}
