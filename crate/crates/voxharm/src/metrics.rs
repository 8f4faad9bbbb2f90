//! Harmonization metrics: 1-D Wasserstein distance between masked intensity
//! histograms with input/target normalization, plus anatomy preservation via
//! a two-threshold Otsu proxy segmenter and relative absolute volume
//! difference.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::model::{harmonize_volume, Model, ModelError};
use crate::phantom::{LabelMap, TissueClass};
use crate::volume::Volume;

pub const DEFAULT_BINS: usize = 256;
/// Input intensities above this threshold count as foreground under
/// [`MaskPolicy::Foreground`].
pub const FOREGROUND_THRESHOLD: f32 = 0.01;
/// Below this the input/target distance counts as degenerate and normalized
/// distances are undefined.
pub const DEGENERATE_WD: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("volume must be normalized before histogramming")]
    NotNormalized,
    #[error("mask length {mask} does not match volume size {volume}")]
    MaskLengthMismatch { mask: usize, volume: usize },
    #[error("mask selects no voxels")]
    EmptyMask,
    #[error("histogram needs at least one bin")]
    NoBins,
    #[error("histograms use different binnings: {0} vs {1} bins")]
    BinningMismatch(usize, usize),
    #[error("volumes have different dims: {0:?} vs {1:?}")]
    DimsMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("input and target are already identical in distribution; normalized distances are undefined")]
    DegenerateReference,
    #[error("degenerate intensity distribution: {0}")]
    DegenerateIntensities(String),
    #[error("structure {0:?} has zero volume in the reference segmentation")]
    ZeroReferenceVolume(TissueClass),
    #[error("label maps have different dims: {0:?} vs {1:?}")]
    LabelDimsMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("exemplar site {0} matches the input site; pick a cross-site exemplar")]
    ExemplarFromSameSite(String),
}

/// Which voxels enter the intensity histograms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskPolicy {
    /// Voxels where the *input* volume exceeds the threshold; the same mask
    /// applies to input, target and prediction.
    Foreground { threshold: f32 },
    AllVoxels,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy::Foreground {
            threshold: FOREGROUND_THRESHOLD,
        }
    }
}

impl MaskPolicy {
    pub fn build(&self, reference: &Volume) -> Vec<bool> {
        match *self {
            MaskPolicy::Foreground { threshold } => {
                reference.data().iter().map(|&v| v > threshold).collect()
            }
            MaskPolicy::AllVoxels => vec![true; reference.numel()],
        }
    }
}

/// Equal-width histogram over `[0, 1]`; values of exactly 1 land in the
/// last bin.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    counts: Vec<u64>,
    total: u64,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

pub fn histogram(volume: &Volume, mask: &[bool], bins: usize) -> Result<Histogram, MetricsError> {
    if bins == 0 {
        return Err(MetricsError::NoBins);
    }
    if volume.norm.is_none() {
        return Err(MetricsError::NotNormalized);
    }
    if mask.len() != volume.numel() {
        return Err(MetricsError::MaskLengthMismatch {
            mask: mask.len(),
            volume: volume.numel(),
        });
    }
    let mut counts = vec![0u64; bins];
    let mut total = 0u64;
    for (&v, &m) in volume.data().iter().zip(mask) {
        if m {
            let bin = ((v as f64 * bins as f64) as usize).min(bins - 1);
            counts[bin] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok(Histogram { counts, total })
}

/// First Wasserstein distance between two normalized histograms on the same
/// binning: the L1 distance between their CDFs times the bin width, in
/// intensity units.
pub fn wasserstein_1d(a: &Histogram, b: &Histogram) -> Result<f64, MetricsError> {
    if a.bins() != b.bins() {
        return Err(MetricsError::BinningMismatch(a.bins(), b.bins()));
    }
    let bin_width = 1.0 / a.bins() as f64;
    let mut cdf_a = 0.0f64;
    let mut cdf_b = 0.0f64;
    let mut distance = 0.0f64;
    for (&ca, &cb) in a.counts.iter().zip(&b.counts) {
        cdf_a += ca as f64 / a.total as f64;
        cdf_b += cb as f64 / b.total as f64;
        distance += (cdf_a - cdf_b).abs() * bin_width;
    }
    Ok(distance)
}

/// Raw and normalized Wasserstein distances for one (input, target,
/// prediction) triple.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NwdResult {
    pub wd_it: f64,
    pub wd_ip: f64,
    pub wd_tp: f64,
    pub nwd_ip_pct: f64,
    pub nwd_tp_pct: f64,
}

/// Normalized Wasserstein distances in percent:
/// `nWD(i,p) = 100·WD(i,p)/WD(i,t)` and `nWD(t,p) = 100·WD(t,p)/WD(i,t)`.
pub fn nwd_full(
    input: &Volume,
    target: &Volume,
    prediction: &Volume,
    policy: MaskPolicy,
    bins: usize,
) -> Result<NwdResult, MetricsError> {
    if input.dims != target.dims {
        return Err(MetricsError::DimsMismatch(input.dims, target.dims));
    }
    if input.dims != prediction.dims {
        return Err(MetricsError::DimsMismatch(input.dims, prediction.dims));
    }
    let mask = policy.build(input);
    let hi = histogram(input, &mask, bins)?;
    let ht = histogram(target, &mask, bins)?;
    let hp = histogram(prediction, &mask, bins)?;
    let wd_it = wasserstein_1d(&hi, &ht)?;
    let wd_ip = wasserstein_1d(&hi, &hp)?;
    let wd_tp = wasserstein_1d(&ht, &hp)?;
    if wd_it < DEGENERATE_WD {
        return Err(MetricsError::DegenerateReference);
    }
    Ok(NwdResult {
        wd_it,
        wd_ip,
        wd_tp,
        nwd_ip_pct: 100.0 * wd_ip / wd_it,
        nwd_tp_pct: 100.0 * wd_tp / wd_it,
    })
}

pub fn nwd(
    input: &Volume,
    target: &Volume,
    prediction: &Volume,
    policy: MaskPolicy,
) -> Result<(f64, f64), MetricsError> {
    let r = nwd_full(input, target, prediction, policy, DEFAULT_BINS)?;
    Ok((r.nwd_ip_pct, r.nwd_tp_pct))
}

// ── proxy segmentation ──────────────────────────────────────────────────

/// Exhaustive two-threshold Otsu: maximizes the between-class variance of a
/// three-way split of the histogram.
fn otsu_three_class(counts: &[u64]) -> Option<(usize, usize)> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return None;
    }
    let n = counts.len();
    let total_f = total as f64;
    // prefix mass and first moment
    let mut mass = vec![0.0f64; n + 1];
    let mut moment = vec![0.0f64; n + 1];
    for i in 0..n {
        mass[i + 1] = mass[i] + counts[i] as f64 / total_f;
        moment[i + 1] = moment[i] + i as f64 * counts[i] as f64 / total_f;
    }
    let class = |lo: usize, hi: usize| -> Option<(f64, f64)> {
        let w = mass[hi] - mass[lo];
        if w <= 0.0 {
            return None;
        }
        Some((w, (moment[hi] - moment[lo]) / w))
    };
    let mut best: Option<(f64, usize, usize)> = None;
    for t1 in 0..n - 2 {
        let Some((w0, mu0)) = class(0, t1 + 1) else { continue };
        for t2 in t1 + 1..n - 1 {
            let Some((w1, mu1)) = class(t1 + 1, t2 + 1) else { continue };
            let Some((w2, mu2)) = class(t2 + 1, n) else { continue };
            let score = w0 * mu0 * mu0 + w1 * mu1 * mu1 + w2 * mu2 * mu2;
            if best.map_or(true, |(s, _, _)| score > s) {
                best = Some((score, t1, t2));
            }
        }
    }
    best.map(|(_, t1, t2)| (t1, t2))
}

/// Mean and standard deviation of the six border faces. The scanned object
/// never touches the volume border, so the shell samples pure background.
fn border_shell_stats(volume: &Volume) -> (f64, f64) {
    let (nz, ny, nx) = volume.dims;
    let data = volume.data();
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    let mut count = 0u64;
    let mut visit = |z: usize, y: usize, x: usize| {
        let v = data[(z * ny + y) * nx + x] as f64;
        sum += v;
        sum_sq += v * v;
        count += 1;
    };
    for y in 0..ny {
        for x in 0..nx {
            visit(0, y, x);
            if nz > 1 {
                visit(nz - 1, y, x);
            }
        }
    }
    for z in 1..nz.saturating_sub(1) {
        for x in 0..nx {
            visit(z, 0, x);
            if ny > 1 {
                visit(z, ny - 1, x);
            }
        }
        for y in 1..ny.saturating_sub(1) {
            visit(z, y, 0);
            if nx > 1 {
                visit(z, y, nx - 1);
            }
        }
    }
    let mean = sum / count as f64;
    let var = (sum_sq / count as f64 - mean * mean).max(0.0);
    (mean, var.sqrt())
}

/// Three-class proxy segmentation (background / GM-like / WM-like) by
/// intensity clustering, standing in for an anatomical segmenter.
///
/// Background level and spread come from the volume's border shell (the
/// object never touches the border); everything brighter is foreground. A
/// two-threshold Otsu within the foreground then separates dark tissue
/// (counted as background), GM-like and WM-like. Thresholds are re-derived
/// per volume, so any site's intensity scale works.
pub fn segment_proxy(volume: &Volume) -> Result<LabelMap, MetricsError> {
    if volume.norm.is_none() {
        return Err(MetricsError::NotNormalized);
    }
    let bins = DEFAULT_BINS;
    let all = vec![true; volume.numel()];
    let hist = histogram(volume, &all, bins)?;
    let occupied = hist.counts.iter().filter(|&&c| c > 0).count();
    if occupied < 2 {
        return Err(MetricsError::DegenerateIntensities(
            "volume is constant".into(),
        ));
    }
    let (shell_mean, shell_std) = border_shell_stats(volume);
    let bg_threshold = (shell_mean + (4.0 * shell_std).max(1.0 / bins as f64)) as f32;

    let fg_mask: Vec<bool> = volume.data().iter().map(|&v| v >= bg_threshold).collect();
    if !fg_mask.iter().any(|&m| m) {
        return Err(MetricsError::DegenerateIntensities("empty foreground".into()));
    }
    let fg_hist = histogram(volume, &fg_mask, bins)?;
    let fg_occupied = fg_hist.counts.iter().filter(|&&c| c > 0).count();
    if fg_occupied < 3 {
        return Err(MetricsError::DegenerateIntensities(format!(
            "foreground occupies only {fg_occupied} intensity bins"
        )));
    }
    let (t1, t2) = otsu_three_class(&fg_hist.counts).ok_or_else(|| {
        MetricsError::DegenerateIntensities("foreground forms a single cluster".into())
    })?;
    let gm_lo = (t1 as f32 + 1.0) / bins as f32;
    let wm_lo = (t2 as f32 + 1.0) / bins as f32;

    let classes = volume
        .data()
        .iter()
        .map(|&v| {
            if v < bg_threshold || v < gm_lo {
                TissueClass::Background as u8
            } else if v < wm_lo {
                TissueClass::GmLike as u8
            } else {
                TissueClass::WmLike as u8
            }
        })
        .collect();
    Ok(LabelMap {
        dims: volume.dims,
        classes,
    })
}

/// Relative absolute volume difference in percent:
/// `100·|vol(p) − vol(i)| / vol(i)` with volumes in voxel count times voxel
/// volume.
pub fn ravd(
    seg_input: &LabelMap,
    seg_prediction: &LabelMap,
    structure: TissueClass,
    voxel_volume_mm3: f64,
) -> Result<f64, MetricsError> {
    if seg_input.dims != seg_prediction.dims {
        return Err(MetricsError::LabelDimsMismatch(
            seg_input.dims,
            seg_prediction.dims,
        ));
    }
    let vol_i = seg_input.count(structure) as f64 * voxel_volume_mm3;
    let vol_p = seg_prediction.count(structure) as f64 * voxel_volume_mm3;
    if vol_i == 0.0 {
        return Err(MetricsError::ZeroReferenceVolume(structure));
    }
    Ok(100.0 * (vol_p - vol_i).abs() / vol_i)
}

// ── direction evaluation and reports ────────────────────────────────────

#[derive(Clone, Debug)]
pub struct CaseMetrics {
    pub case_id: String,
    pub direction: String,
    pub wd_it: f64,
    pub wd_ip: f64,
    pub wd_tp: f64,
    pub nwd_ip_pct: f64,
    pub nwd_tp_pct: f64,
    pub ravd_gm_pct: f64,
    pub ravd_wm_pct: f64,
}

impl CaseMetrics {
    fn values(&self) -> [f64; 7] {
        [
            self.wd_it,
            self.wd_ip,
            self.wd_tp,
            self.nwd_ip_pct,
            self.nwd_tp_pct,
            self.ravd_gm_pct,
            self.ravd_wm_pct,
        ]
    }
}

/// Mean and population standard deviation per metric for one direction.
#[derive(Clone, Debug)]
pub struct DirectionAggregate {
    pub direction: String,
    pub mean: [f64; 7],
    pub std: [f64; 7],
}

#[derive(Clone, Debug, Default)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    pub aggregates: Vec<DirectionAggregate>,
}

impl MetricsReport {
    pub fn aggregate(&self, direction: &str) -> Option<&DirectionAggregate> {
        self.aggregates.iter().find(|a| a.direction == direction)
    }

    /// Combines per-direction reports into one, keeping each direction's
    /// aggregate block.
    pub fn merge(reports: Vec<MetricsReport>) -> MetricsReport {
        let mut out = MetricsReport::default();
        for r in reports {
            out.cases.extend(r.cases);
            out.aggregates.extend(r.aggregates);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(
            "case_id,direction,wd_it,wd_ip,wd_tp,nwd_ip_pct,nwd_tp_pct,ravd_gm_pct,ravd_wm_pct\n",
        );
        let fmt = |vals: &[f64]| -> String {
            vals.iter()
                .map(|v| format!("{v:.6}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        for c in &self.cases {
            out.push_str(&format!("{},{},{}\n", c.case_id, c.direction, fmt(&c.values())));
        }
        for a in &self.aggregates {
            out.push_str(&format!("mean,{},{}\n", a.direction, fmt(&a.mean)));
            out.push_str(&format!("std,{},{}\n", a.direction, fmt(&a.std)));
        }
        out
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<(), MetricsError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn aggregate_cases(direction: &str, cases: &[CaseMetrics]) -> DirectionAggregate {
    let n = cases.len() as f64;
    let mut mean = [0.0f64; 7];
    for c in cases {
        for (m, v) in mean.iter_mut().zip(c.values()) {
            *m += v / n;
        }
    }
    let mut std = [0.0f64; 7];
    for c in cases {
        for ((s, v), m) in std.iter_mut().zip(c.values()).zip(mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in &mut std {
        *s = s.sqrt();
    }
    DirectionAggregate {
        direction: direction.to_string(),
        mean,
        std,
    }
}

/// Harmonizes every test input against the one exemplar and scores intensity
/// movement (normalized Wasserstein) plus anatomy preservation (rAVD of the
/// proxy segmentations of input and prediction).
///
/// `harmonizer` maps (input, exemplar) to the prediction, so the identity
/// map and model-backed inference share this code path.
pub fn evaluate_direction_with<F>(
    mut harmonizer: F,
    inputs: &[(String, Volume)],
    exemplar: &Volume,
    policy: MaskPolicy,
    bins: usize,
) -> Result<MetricsReport, MetricsError>
where
    F: FnMut(&Volume, &Volume) -> Result<Volume, ModelError>,
{
    let mut cases = Vec::with_capacity(inputs.len());
    let mut direction = String::new();
    for (case_id, input) in inputs {
        if input.site_id == exemplar.site_id {
            return Err(MetricsError::ExemplarFromSameSite(exemplar.site_id.clone()));
        }
        direction = format!("{}->{}", input.site_id, exemplar.site_id);
        let prediction = harmonizer(input, exemplar)?;
        let wd = nwd_full(input, exemplar, &prediction, policy, bins)?;
        let seg_i = segment_proxy(input)?;
        let seg_p = segment_proxy(&prediction)?;
        let voxel = input.voxel_volume_mm3();
        cases.push(CaseMetrics {
            case_id: case_id.clone(),
            direction: direction.clone(),
            wd_it: wd.wd_it,
            wd_ip: wd.wd_ip,
            wd_tp: wd.wd_tp,
            nwd_ip_pct: wd.nwd_ip_pct,
            nwd_tp_pct: wd.nwd_tp_pct,
            ravd_gm_pct: ravd(&seg_i, &seg_p, TissueClass::GmLike, voxel)?,
            ravd_wm_pct: ravd(&seg_i, &seg_p, TissueClass::WmLike, voxel)?,
        });
    }
    let aggregates = if cases.is_empty() {
        Vec::new()
    } else {
        vec![aggregate_cases(&direction, &cases)]
    };
    Ok(MetricsReport { cases, aggregates })
}

/// Model-backed direction evaluation using sliding-window inference.
pub fn evaluate_direction(
    model: &Model,
    patch: usize,
    overlap: usize,
    inputs: &[(String, Volume)],
    exemplar: &Volume,
    policy: MaskPolicy,
    bins: usize,
) -> Result<MetricsReport, MetricsError> {
    evaluate_direction_with(
        |input, ex| harmonize_volume(input, ex, model, patch, overlap),
        inputs,
        exemplar,
        policy,
        bins,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{
        apply_site_profile, default_profiles, generate_anatomy, SiteProfile, CANONICAL_LEVELS,
    };
    use crate::volume::NormalizationRecord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn normalized(data: Vec<f32>, dims: (usize, usize, usize)) -> Volume {
        Volume::new(dims, (1.0, 1.0, 1.0), data, "site_t")
            .unwrap()
            .with_norm(NormalizationRecord::new(0.0, 1.0).unwrap())
    }

    #[test]
    fn histogram_all_zeros_mass_in_first_bin() {
        let v = normalized(vec![0.0; 8], (2, 2, 2));
        let h = histogram(&v, &vec![true; 8], 16).unwrap();
        assert_eq!(h.counts()[0], 8);
        assert_eq!(h.total(), 8);
    }

    #[test]
    fn histogram_uniform_ramp_is_flat() {
        let n = 4096;
        let data: Vec<f32> = (0..n).map(|i| i as f32 / n as f32).collect();
        let v = normalized(data, (16, 16, 16));
        let h = histogram(&v, &vec![true; n], 256).unwrap();
        for &c in h.counts() {
            assert!((c as i64 - 16).abs() <= 1, "bin count {c}");
        }
    }

    #[test]
    fn histogram_mask_excludes_voxels_and_one_lands_in_last_bin() {
        let v = normalized(vec![0.0, 0.5, 1.0, 1.0], (1, 2, 2));
        let mask = vec![false, true, true, true];
        let h = histogram(&v, &mask, 4).unwrap();
        assert_eq!(h.total(), 3);
        assert_eq!(h.counts()[3], 2); // both 1.0 voxels in the last bin
        assert!(matches!(
            histogram(&v, &vec![false; 4], 4),
            Err(MetricsError::EmptyMask)
        ));
    }

    #[test]
    fn wasserstein_identical_is_zero() {
        let v = normalized((0..64).map(|i| i as f32 / 64.0).collect(), (4, 4, 4));
        let h = histogram(&v, &vec![true; 64], 64).unwrap();
        assert_eq!(wasserstein_1d(&h, &h).unwrap(), 0.0);
    }

    #[test]
    fn wasserstein_point_masses_transport_distance() {
        let bins = 256;
        let a = normalized(vec![0.25; 27], (3, 3, 3));
        let b = normalized(vec![0.75; 27], (3, 3, 3));
        let ha = histogram(&a, &vec![true; 27], bins).unwrap();
        let hb = histogram(&b, &vec![true; 27], bins).unwrap();
        let wd = wasserstein_1d(&ha, &hb).unwrap();
        assert!((wd - 0.5).abs() <= 1.0 / bins as f64, "{wd}");
    }

    /// Independent oracle: transport between sorted per-voxel samples
    /// (quantile coupling), quantized to bin centers.
    fn quantile_oracle(a: &[f32], b: &[f32], bins: usize) -> f64 {
        let q = |v: f32| (((v as f64 * bins as f64) as usize).min(bins - 1) as f64 + 0.5) / bins as f64;
        let mut sa: Vec<f64> = a.iter().map(|&v| q(v)).collect();
        let mut sb: Vec<f64> = b.iter().map(|&v| q(v)).collect();
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / sa.len() as f64
    }

    #[test]
    fn wasserstein_matches_quantile_coupling_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let n = 512;
            let da: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let db: Vec<f32> = (0..n).map(|_| rng.random_range(0.0f32..1.0).powi(2)).collect();
            let a = normalized(da.clone(), (8, 8, 8));
            let b = normalized(db.clone(), (8, 8, 8));
            let bins = 256;
            let ha = histogram(&a, &vec![true; n], bins).unwrap();
            let hb = histogram(&b, &vec![true; n], bins).unwrap();
            let wd = wasserstein_1d(&ha, &hb).unwrap();
            let oracle = quantile_oracle(&da, &db, bins);
            assert!(
                (wd - oracle).abs() <= 1.0 / bins as f64,
                "wd {wd} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn wasserstein_is_a_metric_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bins = 128;
        let mk = |rng: &mut ChaCha8Rng, pow: i32| {
            let data: Vec<f32> = (0..512)
                .map(|_| rng.random_range(0.0f32..1.0).powi(pow))
                .collect();
            let v = normalized(data, (8, 8, 8));
            histogram(&v, &vec![true; 512], bins).unwrap()
        };
        for _ in 0..10 {
            let a = mk(&mut rng, 1);
            let b = mk(&mut rng, 2);
            let c = mk(&mut rng, 3);
            let ab = wasserstein_1d(&a, &b).unwrap();
            let ba = wasserstein_1d(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12, "symmetry");
            let ac = wasserstein_1d(&a, &c).unwrap();
            let cb = wasserstein_1d(&c, &b).unwrap();
            assert!(ab <= ac + cb + 1e-12, "triangle inequality");
            assert_eq!(wasserstein_1d(&a, &a).unwrap(), 0.0, "identity");
        }
    }

    #[test]
    fn wasserstein_rejects_binning_mismatch() {
        let v = normalized(vec![0.5; 8], (2, 2, 2));
        let h1 = histogram(&v, &vec![true; 8], 16).unwrap();
        let h2 = histogram(&v, &vec![true; 8], 32).unwrap();
        assert!(matches!(
            wasserstein_1d(&h1, &h2),
            Err(MetricsError::BinningMismatch(16, 32))
        ));
    }

    fn distinct_volumes() -> (Volume, Volume) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 512;
        let a: Vec<f32> = (0..n).map(|_| rng.random_range(0.1..0.5)).collect();
        let b: Vec<f32> = (0..n).map(|_| rng.random_range(0.5..0.9)).collect();
        (normalized(a, (8, 8, 8)), normalized(b, (8, 8, 8)))
    }

    #[test]
    fn nwd_trivial_cases() {
        let (i, t) = distinct_volumes();
        // prediction == input
        let (ip, tp) = nwd(&i, &t, &i, MaskPolicy::AllVoxels).unwrap();
        assert_eq!(ip, 0.0);
        assert!((tp - 100.0).abs() < 1e-9);
        // prediction == target
        let (ip, tp) = nwd(&i, &t, &t, MaskPolicy::AllVoxels).unwrap();
        assert!((ip - 100.0).abs() < 1e-9);
        assert_eq!(tp, 0.0);
    }

    #[test]
    fn nwd_degenerate_reference_is_undefined() {
        let (i, _) = distinct_volumes();
        let err = nwd(&i, &i, &i, MaskPolicy::AllVoxels).unwrap_err();
        assert!(matches!(err, MetricsError::DegenerateReference));
    }

    #[test]
    fn two_sites_move_the_histogram() {
        let (canonical, _) = generate_anatomy(3, 32);
        let profiles = default_profiles();
        let va = apply_site_profile(&canonical, &profiles[0], 1).unwrap();
        let vb = apply_site_profile(&canonical, &profiles[1], 2).unwrap();
        let mask = MaskPolicy::default().build(&va);
        let ha = histogram(&va, &mask, DEFAULT_BINS).unwrap();
        let hb = histogram(&vb, &mask, DEFAULT_BINS).unwrap();
        let wd = wasserstein_1d(&ha, &hb).unwrap();
        assert!(wd > 0.01, "sites should differ, wd = {wd}");
    }

    #[test]
    fn proxy_matches_ground_truth_on_noiseless_phantom() {
        let (canonical, labels) = generate_anatomy(17, 48);
        for profile in default_profiles() {
            let v = apply_site_profile(&canonical, &profile.without_noise(), 0).unwrap();
            let seg = segment_proxy(&v).unwrap();

            // ground truth mapped onto the proxy's three classes: dark tissue
            // folds into background, the bright lesion into white matter
            let expected: Vec<u8> = labels
                .classes
                .iter()
                .map(|&c| match TissueClass::from_index(c).unwrap() {
                    TissueClass::Background | TissueClass::CsfLike => TissueClass::Background as u8,
                    TissueClass::GmLike => TissueClass::GmLike as u8,
                    TissueClass::WmLike | TissueClass::Lesion => TissueClass::WmLike as u8,
                })
                .collect();

            // compare away from class boundaries (6-neighbourhood erosion)
            let (nz, ny, nx) = labels.dims;
            let idx = |z: usize, y: usize, x: usize| (z * ny + y) * nx + x;
            let mut total = 0usize;
            let mut agree = 0usize;
            for z in 1..nz - 1 {
                for y in 1..ny - 1 {
                    for x in 1..nx - 1 {
                        let c = expected[idx(z, y, x)];
                        let interior = [
                            expected[idx(z - 1, y, x)],
                            expected[idx(z + 1, y, x)],
                            expected[idx(z, y - 1, x)],
                            expected[idx(z, y + 1, x)],
                            expected[idx(z, y, x - 1)],
                            expected[idx(z, y, x + 1)],
                        ]
                        .iter()
                        .all(|&n| n == c);
                        if interior {
                            total += 1;
                            if seg.classes[idx(z, y, x)] == c {
                                agree += 1;
                            }
                        }
                    }
                }
            }
            let frac = agree as f64 / total as f64;
            assert!(
                frac >= 0.99,
                "{}: proxy agrees on {frac:.4} of non-boundary voxels",
                profile.site_id
            );
        }
    }

    #[test]
    fn proxy_rejects_constant_foreground() {
        let v = normalized(vec![0.5; 512], (8, 8, 8));
        assert!(matches!(
            segment_proxy(&v),
            Err(MetricsError::DegenerateIntensities(_))
        ));
    }

    #[test]
    fn proxy_is_deterministic() {
        let (canonical, _) = generate_anatomy(23, 32);
        let v = apply_site_profile(&canonical, &default_profiles()[0], 5).unwrap();
        let s1 = segment_proxy(&v).unwrap();
        let s2 = segment_proxy(&v).unwrap();
        assert_eq!(s1.classes, s2.classes);
    }

    #[test]
    fn proxy_is_invariant_under_monotone_intensity_maps() {
        let (canonical, _) = generate_anatomy(29, 48);
        let base = apply_site_profile(&canonical, &SiteProfile::identity("m"), 0).unwrap();
        let reference = segment_proxy(&base).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..8 {
            // random monotone map: gamma plus increasing affine
            let gamma: f32 = rng.random_range(0.5..2.5);
            let scale: f32 = rng.random_range(0.6..1.0);
            let offset: f32 = rng.random_range(0.0..0.3);
            let data: Vec<f32> = base
                .data()
                .iter()
                .map(|&v| (scale * v.powf(gamma) + offset * v).clamp(0.0, 1.0))
                .collect();
            let mapped = normalized(data, base.dims);
            let seg = segment_proxy(&mapped).unwrap();
            let mismatches = seg
                .classes
                .iter()
                .zip(&reference.classes)
                .filter(|(a, b)| a != b)
                .count();
            assert_eq!(
                mismatches, 0,
                "gamma {gamma} scale {scale} offset {offset}: {mismatches} voxels moved"
            );
        }
    }

    #[test]
    fn ravd_cases() {
        let mk = |gm: usize, wm: usize| LabelMap {
            dims: (1, 1, 200),
            classes: (0..200)
                .map(|i| {
                    if i < gm {
                        TissueClass::GmLike as u8
                    } else if i < gm + wm {
                        TissueClass::WmLike as u8
                    } else {
                        0
                    }
                })
                .collect(),
        };
        let a = mk(100, 50);
        assert_eq!(ravd(&a, &a, TissueClass::GmLike, 1.0).unwrap(), 0.0);
        let b = mk(110, 50);
        assert_eq!(ravd(&a, &b, TissueClass::GmLike, 1.0).unwrap(), 10.0);
        // doubling the voxel volume leaves the ratio unchanged
        assert_eq!(ravd(&a, &b, TissueClass::GmLike, 2.0).unwrap(), 10.0);
        // zero reference volume is an error
        let none = mk(0, 50);
        assert!(matches!(
            ravd(&none, &a, TissueClass::GmLike, 1.0),
            Err(MetricsError::ZeroReferenceVolume(_))
        ));
    }

    #[test]
    fn identity_harmonizer_gives_zero_nwd_ip() {
        let (canonical, _) = generate_anatomy(37, 32);
        let profiles = default_profiles();
        let input = apply_site_profile(&canonical, &profiles[0], 1).unwrap();
        let (c2, _) = generate_anatomy(38, 32);
        let exemplar = apply_site_profile(&c2, &profiles[1], 2).unwrap();
        let inputs = vec![("case0".to_string(), input)];
        let report = evaluate_direction_with(
            |i, _| Ok(i.clone()),
            &inputs,
            &exemplar,
            MaskPolicy::default(),
            DEFAULT_BINS,
        )
        .unwrap();
        assert_eq!(report.cases.len(), 1);
        assert_eq!(report.cases[0].nwd_ip_pct, 0.0);
        assert!((report.cases[0].nwd_tp_pct - 100.0).abs() < 1e-9);
        assert_eq!(report.cases[0].direction, "site_a->site_b");
        let agg = report.aggregate("site_a->site_b").unwrap();
        assert_eq!(agg.mean[3], 0.0);
    }

    #[test]
    fn exemplar_from_same_site_is_rejected() {
        let (canonical, _) = generate_anatomy(41, 32);
        let profiles = default_profiles();
        let input = apply_site_profile(&canonical, &profiles[0], 1).unwrap();
        let exemplar = apply_site_profile(&canonical, &profiles[0], 2).unwrap();
        let inputs = vec![("case0".to_string(), input)];
        let err = evaluate_direction_with(
            |i, _| Ok(i.clone()),
            &inputs,
            &exemplar,
            MaskPolicy::default(),
            DEFAULT_BINS,
        )
        .unwrap_err();
        assert!(matches!(err, MetricsError::ExemplarFromSameSite(_)));
    }

    #[test]
    fn report_text_has_header_rows_and_aggregates() {
        let case = CaseMetrics {
            case_id: "c0".into(),
            direction: "site_a->site_b".into(),
            wd_it: 0.1,
            wd_ip: 0.09,
            wd_tp: 0.01,
            nwd_ip_pct: 90.0,
            nwd_tp_pct: 10.0,
            ravd_gm_pct: 5.0,
            ravd_wm_pct: 7.0,
        };
        let report = MetricsReport {
            aggregates: vec![aggregate_cases("site_a->site_b", &[case.clone()])],
            cases: vec![case],
        };
        let text = report.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "case_id,direction,wd_it,wd_ip,wd_tp,nwd_ip_pct,nwd_tp_pct,ravd_gm_pct,ravd_wm_pct"
        );
        assert!(lines[1].starts_with("c0,site_a->site_b,"));
        assert!(lines[2].starts_with("mean,site_a->site_b,"));
        assert!(lines[3].starts_with("std,site_a->site_b,"));
    }

    #[test]
    fn canonical_levels_are_strictly_increasing() {
        for w in CANONICAL_LEVELS.windows(2) {
            assert!(w[0] < w[1]);
        }
    }
}
