//! Synthetic longitudinal cohorts with known lesion trajectories.
//!
//! Each participant has an ellipsoidal brain (white matter core, gray
//! matter shell, central ventricle) and a few spherical lesions whose radius
//! changes linearly in time. Four pseudo-modalities are fixed affine maps of
//! the tissue value inside the brain, lesions overwrite them with their own
//! per-modality intensity, and seeded Gaussian noise is added last.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_pipeline::{normalize_to_signed_unit, write_manifest, Modality, Sample, StudyRecord};
use crate::error::{Error, Result};
use crate::time_conditioning::{class_from_time_lag, DAYS_PER_YEAR};
use crate::volume::{write_volume, Volume};

pub const TISSUE_WM: f64 = 1.0;
pub const TISSUE_GM: f64 = 0.6;
pub const TISSUE_CSF: f64 = 0.15;

/// `(slope, intercept)` applied to the tissue value, in [`Modality::ALL`] order.
pub const MODALITY_AFFINE: [(f64, f64); 4] = [(0.7, 0.1), (-0.7, 1.05), (0.25, 0.55), (0.45, 0.05)];

/// Hyperintense on FLAIR, T2 and PD; hypointense on MPRAGE.
pub const LESION_INTENSITY: [f64; 4] = [0.3, 0.85, 0.85, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionKind {
    Growth,
    Remission,
    /// Expanding region of tissue loss rendered with CSF intensities.
    Atrophy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub center: [f64; 3],
    pub r0: f64,
    /// Voxels per year, negative for remission.
    pub rate: f64,
    pub kind: LesionKind,
    pub intensity_per_modality: [f64; 4],
}

impl LesionSpec {
    pub fn radius_at(&self, years: f64) -> f64 {
        (self.r0 + self.rate * years).max(0.0)
    }

    /// Partial-volume membership of a voxel center.
    fn membership(&self, p: [f64; 3], years: f64) -> f64 {
        let r = self.radius_at(years);
        if r == 0.0 {
            return 0.0;
        }
        let d = ((p[0] - self.center[0]).powi(2) + (p[1] - self.center[1]).powi(2) + (p[2] - self.center[2]).powi(2)).sqrt();
        (r - d + 0.5).clamp(0.0, 1.0)
    }
}

/// `count` participants with `timepoints` examinations each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileGroup {
    pub count: usize,
    pub timepoints: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub profile: Vec<ProfileGroup>,
    pub side: usize,
    /// Brain ellipsoid semi-axes as fractions of the side.
    pub semi_axes: [f64; 3],
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub lesions_min: usize,
    pub lesions_max: usize,
    /// Relative odds of growth, remission and atrophy lesions.
    pub kind_weights: [f64; 3],
    pub interval_days: i64,
    pub interval_jitter_days: i64,
    pub seed: u64,
    /// File extension for written volumes: `nii`, `nii.gz` or `vol`.
    pub extension: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomPreset {
    /// 14 participants with 4 timepoints, 4 with 5, 1 with 6.
    IsbiShape,
    Desk,
}

impl PhantomPreset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "isbi-shape" => Ok(PhantomPreset::IsbiShape),
            "desk" => Ok(PhantomPreset::Desk),
            _ => Err(Error::Config(format!("unknown phantom preset {s:?} (valid: isbi-shape, desk)"))),
        }
    }
}

impl PhantomConfig {
    pub fn preset(p: PhantomPreset) -> Self {
        let profile = match p {
            PhantomPreset::IsbiShape => vec![
                ProfileGroup { count: 14, timepoints: 4 },
                ProfileGroup { count: 4, timepoints: 5 },
                ProfileGroup { count: 1, timepoints: 6 },
            ],
            PhantomPreset::Desk => vec![ProfileGroup { count: 12, timepoints: 4 }],
        };
        PhantomConfig {
            profile,
            side: 32,
            semi_axes: [0.42, 0.45, 0.4],
            noise: 0.01,
            lesions_min: 1,
            lesions_max: 3,
            kind_weights: [0.7, 0.2, 0.1],
            interval_days: 365,
            interval_jitter_days: 30,
            seed: 0,
            extension: default_extension().into(),
        }
    }

    pub fn n_participants(&self) -> usize {
        self.profile.iter().map(|g| g.count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.side < 8 {
            return bad(format!("phantom side {} is below 8", self.side));
        }
        if self.semi_axes.iter().any(|&a| !(0.1..=0.5).contains(&a)) {
            return bad(format!("semi-axes {:?} must lie in [0.1, 0.5]", self.semi_axes));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be finite and >= 0", self.noise));
        }
        if self.lesions_min > self.lesions_max {
            return bad("lesions_min exceeds lesions_max".into());
        }
        if self.kind_weights.iter().any(|&w| w < 0.0) || self.kind_weights.iter().sum::<f64>() <= 0.0 {
            return bad(format!("kind weights {:?} must be >= 0 with a positive sum", self.kind_weights));
        }
        if self.interval_days <= self.interval_jitter_days.abs() {
            return bad("interval jitter must be smaller than the interval".into());
        }
        if self.profile.iter().any(|g| g.timepoints == 0) || self.n_participants() == 0 {
            return bad("profile needs participants with at least one timepoint".into());
        }
        if !["nii", "nii.gz", "vol"].contains(&self.extension.as_str()) {
            return bad(format!("unsupported volume extension {:?}", self.extension));
        }
        Ok(())
    }
}

fn default_extension() -> &'static str {
    if cfg!(feature = "io") {
        "nii"
    } else {
        "vol"
    }
}

/// Voxelwise brain membership shared by all timepoints of a participant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrainMask {
    pub shape: [usize; 3],
    pub mask: Vec<bool>,
}

impl BrainMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Everything needed to regenerate one participant's examinations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantSpec {
    pub id: String,
    pub index: usize,
    pub days: Vec<i64>,
    /// Ellipsoid semi-axes in voxels.
    pub semi_axes: [f64; 3],
    pub lesions: Vec<LesionSpec>,
}

impl ParticipantSpec {
    /// True when every lesion grows.
    pub fn is_growth_ruled(&self) -> bool {
        !self.lesions.is_empty() && self.lesions.iter().all(|l| l.kind == LesionKind::Growth)
    }
}

fn center(side: usize) -> [f64; 3] {
    let c = (side as f64 - 1.0) / 2.0;
    [c; 3]
}

fn ellipsoid_norm(p: [f64; 3], c: [f64; 3], axes: [f64; 3]) -> f64 {
    (0..3).map(|a| ((p[a] - c[a]) / axes[a]).powi(2)).sum::<f64>().sqrt()
}

/// Tissue value of the static anatomy at a voxel; 0 outside the brain.
fn tissue(p: [f64; 3], c: [f64; 3], axes: [f64; 3]) -> f64 {
    let n = ellipsoid_norm(p, c, axes);
    if n > 1.0 {
        0.0
    } else if n > 0.8 {
        TISSUE_GM
    } else if ellipsoid_norm(p, c, axes.map(|a| a * 0.22)) <= 1.0 {
        TISSUE_CSF
    } else {
        TISSUE_WM
    }
}

fn modality_value(m: usize, t: f64) -> f64 {
    let (a, b) = MODALITY_AFFINE[m];
    a * t + b
}

#[derive(Debug)]
pub struct Phantom {
    cfg: PhantomConfig,
    participants: Vec<ParticipantSpec>,
}

impl Phantom {
    pub fn new(cfg: PhantomConfig) -> Result<Self> {
        cfg.validate()?;
        let mut participants = Vec::with_capacity(cfg.n_participants());
        let width = cfg.n_participants().to_string().len().max(2);
        for g in &cfg.profile {
            for _ in 0..g.count {
                let index = participants.len();
                let id = format!("P{:0width$}", index + 1);
                participants.push(plan_participant(&cfg, index, id, g.timepoints)?);
            }
        }
        Ok(Phantom { cfg, participants })
    }

    pub fn config(&self) -> &PhantomConfig {
        &self.cfg
    }

    pub fn participants(&self) -> &[ParticipantSpec] {
        &self.participants
    }

    pub fn participant(&self, id: &str) -> Option<&ParticipantSpec> {
        self.participants.iter().find(|p| p.id == id)
    }

    pub fn brain_mask(&self, p: &ParticipantSpec) -> BrainMask {
        let side = self.cfg.side;
        let c = center(side);
        let v = Volume::from_fn([side; 3], |x, y, z| {
            (ellipsoid_norm([x as f64, y as f64, z as f64], c, p.semi_axes) <= 1.0) as u8 as f32
        });
        BrainMask {
            shape: [side; 3],
            mask: v.data().iter().map(|&m| m > 0.0).collect(),
        }
    }

    /// Noise-free modality volume at an arbitrary number of days from baseline.
    pub fn render_clean(&self, p: &ParticipantSpec, days: f64, m: Modality) -> Volume {
        let side = self.cfg.side;
        let c = center(side);
        let years = days / DAYS_PER_YEAR;
        let ch = m.channel();
        Volume::from_fn([side; 3], |x, y, z| {
            let q = [x as f64, y as f64, z as f64];
            let t = tissue(q, c, p.semi_axes);
            if t == 0.0 {
                return 0.0;
            }
            let mut v = modality_value(ch, t);
            for l in &p.lesions {
                let w = l.membership(q, years);
                if w > 0.0 {
                    v = (1.0 - w) * v + w * l.intensity_per_modality[ch];
                }
            }
            v as f32
        })
    }

    /// The stored examination: clean render plus noise seeded by
    /// (participant, timepoint, modality).
    pub fn render(&self, p: &ParticipantSpec, timepoint: usize, m: Modality) -> Result<Volume> {
        let days = *p.days.get(timepoint).ok_or_else(|| {
            Error::invalid(format!("participant {} has no timepoint index {}", p.id, timepoint))
        })?;
        let mut v = self.render_clean(p, days as f64, m);
        if self.cfg.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            rng.set_stream(((p.index as u64) << 20) | ((timepoint as u64) << 4) | m.channel() as u64 | 1 << 62);
            let normal = Normal::new(0.0, self.cfg.noise).expect("validated noise");
            for x in v.data_mut() {
                *x += normal.sample(&mut rng) as f32;
            }
        }
        Ok(v)
    }
}

impl Phantom {
    /// Preprocessed source volumes of one examination, normalized to `[-1, 1]`.
    pub fn study(&self, p: &ParticipantSpec, timepoint: usize) -> Result<Vec<Volume>> {
        Modality::ALL
            .iter()
            .map(|&m| normalize_to_signed_unit(&self.render(p, timepoint, m)?))
            .collect()
    }

    /// Every forward pair of the given participants, rendered in memory
    /// exactly as loading the written cohort would produce at full size.
    pub fn samples(&self, participants: &[&ParticipantSpec], n_classes: Option<usize>) -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for p in participants {
            let studies: Vec<Vec<Volume>> = (0..p.days.len()).map(|t| self.study(p, t)).collect::<Result<_>>()?;
            for i in 0..p.days.len() {
                for j in i + 1..p.days.len() {
                    let lag = p.days[j] - p.days[i];
                    let class = n_classes.map(|k| class_from_time_lag(lag, k)).transpose()?;
                    out.push(Sample::new(
                        format!("{}_t{}_t{}", p.id, i + 1, j + 1),
                        p.id.clone(),
                        studies[i].clone(),
                        studies[j][Modality::Flair.channel()].clone(),
                        lag,
                        class,
                    )?);
                }
            }
        }
        Ok(out)
    }
}

fn plan_participant(cfg: &PhantomConfig, index: usize, id: String, timepoints: usize) -> Result<ParticipantSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let side = cfg.side as f64;
    let semi_axes = [0, 1, 2].map(|a| cfg.semi_axes[a] * side * rng.gen_range(0.95..1.05));
    let mut days = vec![0i64];
    for _ in 1..timepoints {
        let j = cfg.interval_jitter_days;
        let step = cfg.interval_days + if j > 0 { rng.gen_range(-j..=j) } else { 0 };
        days.push(days.last().unwrap() + step);
    }
    let horizon = *days.last().unwrap() as f64 / DAYS_PER_YEAR;
    let n_lesions = rng.gen_range(cfg.lesions_min..=cfg.lesions_max);
    let total: f64 = cfg.kind_weights.iter().sum();
    let c = center(cfg.side);
    let mut lesions = Vec::with_capacity(n_lesions);
    for li in 0..n_lesions {
        let u = rng.gen_range(0.0..total);
        let kind = if u < cfg.kind_weights[0] {
            LesionKind::Growth
        } else if u < cfg.kind_weights[0] + cfg.kind_weights[1] {
            LesionKind::Remission
        } else {
            LesionKind::Atrophy
        };
        let (r0, rate, intensity): (f64, f64, [f64; 4]) = match kind {
            LesionKind::Growth => (rng.gen_range(1.5..2.5), rng.gen_range(0.7..1.1), LESION_INTENSITY),
            LesionKind::Remission => (rng.gen_range(2.5..4.0), -rng.gen_range(0.6..1.0), LESION_INTENSITY),
            LesionKind::Atrophy => (
                rng.gen_range(1.0..2.0),
                rng.gen_range(0.3..0.6),
                [0, 1, 2, 3].map(|m| modality_value(m, TISSUE_CSF)),
            ),
        };
        let r_max = r0.max(r0 + rate * horizon) + 1.0;
        // rejection-sample a center whose largest sphere stays in the brain
        let mut placed = None;
        for _ in 0..200 {
            let q = [0, 1, 2].map(|a| c[a] + rng.gen_range(-1.0..1.0) * semi_axes[a]);
            let inside = (0..3).all(|a| semi_axes[a] > r_max)
                && ellipsoid_norm(q, c, semi_axes.map(|s| s - r_max)) <= 1.0;
            if inside {
                placed = Some(q);
                break;
            }
        }
        let center = placed.ok_or_else(|| {
            Error::Config(format!(
                "lesion overflow: lesion {li} of {id} (max radius {r_max:.1}) does not fit in the brain"
            ))
        })?;
        lesions.push(LesionSpec {
            center,
            r0,
            rate,
            kind,
            intensity_per_modality: intensity,
        });
    }
    Ok(ParticipantSpec {
        id,
        index,
        days,
        semi_axes,
        lesions,
    })
}

/// Count of voxels above `threshold` inside the brain mask.
pub fn lesion_volume(v: &Volume, threshold: f32, mask: &BrainMask) -> Result<usize> {
    if v.shape() != mask.shape {
        return Err(Error::shape(format!(
            "volume {:?} does not match mask {:?}",
            v.shape(),
            mask.shape
        )));
    }
    Ok(v.data().iter().zip(&mask.mask).filter(|(&x, &m)| m && x > threshold).count())
}

/// Where `generate_cohort` put things.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CohortSummary {
    pub manifest: PathBuf,
    pub config: PhantomConfig,
    pub participants: Vec<ParticipantSpec>,
}

pub const COHORT_SIDECAR: &str = "cohort.json";

/// Writes every examination and a manifest into an existing directory.
pub fn generate_cohort(cfg: &PhantomConfig, out_dir: &Path) -> Result<CohortSummary> {
    if !out_dir.is_dir() {
        return Err(Error::io(
            out_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }
    let ph = Phantom::new(cfg.clone())?;
    let mut records = Vec::new();
    for p in ph.participants() {
        for (tp, &days) in p.days.iter().enumerate() {
            let mut modality_paths = std::collections::BTreeMap::new();
            for m in Modality::ALL {
                let path = out_dir.join(format!("{}_t{}_{}.{}", p.id, tp + 1, m.name().to_lowercase(), cfg.extension));
                write_volume(&path, &ph.render(p, tp, m)?)?;
                modality_paths.insert(m, path);
            }
            records.push(StudyRecord {
                participant_id: p.id.clone(),
                timepoint_index: tp as u32 + 1,
                days_from_baseline: days,
                modality_paths,
            });
        }
    }
    let manifest = out_dir.join("manifest.csv");
    write_manifest(&manifest, &records)?;
    let summary = CohortSummary {
        manifest,
        config: cfg.clone(),
        participants: ph.participants().to_vec(),
    };
    let sidecar = out_dir.join(COHORT_SIDECAR);
    std::fs::write(&sidecar, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&sidecar, e))?;
    Ok(summary)
}

pub fn read_cohort_summary(dir: &Path) -> Result<CohortSummary> {
    let p = dir.join(COHORT_SIDECAR);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_pipeline::{build_sample_pairs, load_manifest};

    fn single_lesion(r0: f64, rate: f64) -> (Phantom, ParticipantSpec) {
        let mut cfg = PhantomConfig::preset(PhantomPreset::Desk);
        cfg.noise = 0.0;
        let ph = Phantom::new(cfg).unwrap();
        let mut p = ph.participants()[0].clone();
        p.lesions = vec![LesionSpec {
            center: [16.0, 15.5, 15.0],
            r0,
            rate,
            kind: LesionKind::Growth,
            intensity_per_modality: LESION_INTENSITY,
        }];
        (ph, p)
    }

    #[test]
    fn rendered_radius_follows_rule() {
        let (ph, p) = single_lesion(3.0, 1.0);
        let v = ph.render_clean(&p, 2.0 * DAYS_PER_YEAR, Modality::Flair);
        // lesion voxels along +x from the center row
        let lit = (0..16).filter(|&d| v.get(16 + d, 15, 15) > 0.75).count() as f64;
        assert!((lit - 5.0).abs() <= 0.5 + 1e-9, "radius {lit}");
    }

    #[test]
    fn sphere_count_matches_analytic_volume() {
        let (ph, p) = single_lesion(4.0, 0.0);
        let v = ph.render_clean(&p, 0.0, Modality::Flair);
        let n = lesion_volume(&v, 0.75, &ph.brain_mask(&p)).unwrap() as f64;
        let expected = 4.0 / 3.0 * std::f64::consts::PI * 64.0;
        assert!((n - expected).abs() / expected < 0.15, "{n} vs {expected}");
        assert_eq!(lesion_volume(&v, 2.0, &ph.brain_mask(&p)).unwrap(), 0);
    }

    #[test]
    fn growth_is_monotone() {
        let (ph, p) = single_lesion(2.0, 0.8);
        let mask = ph.brain_mask(&p);
        let counts: Vec<usize> = [0.0, 365.0, 730.0, 1095.0]
            .iter()
            .map(|&d| lesion_volume(&ph.render_clean(&p, d, Modality::Flair), 0.75, &mask).unwrap())
            .collect();
        assert!(counts.windows(2).all(|w| w[1] > w[0]), "{counts:?}");
    }

    #[test]
    fn isbi_shape_profile_yields_139_pairs() {
        let ph = Phantom::new(PhantomConfig::preset(PhantomPreset::IsbiShape)).unwrap();
        let n_records: usize = ph.participants().iter().map(|p| p.days.len()).sum();
        assert_eq!(n_records, 82);
        let pairs: usize = ph.participants().iter().map(|p| p.days.len() * (p.days.len() - 1) / 2).sum();
        assert_eq!(pairs, 139);
        for p in ph.participants() {
            assert!(p.days.windows(2).all(|w| (335..=395).contains(&(w[1] - w[0]))));
        }
    }

    #[test]
    fn cohort_is_deterministic_and_consistent() {
        let mut cfg = PhantomConfig::preset(PhantomPreset::Desk);
        cfg.profile = vec![ProfileGroup { count: 2, timepoints: 3 }];
        cfg.side = 16;
        cfg.lesions_max = 1;
        cfg.seed = 9;
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let sa = generate_cohort(&cfg, a.path()).unwrap();
        generate_cohort(&cfg, b.path()).unwrap();
        let recs = load_manifest(&sa.manifest).unwrap();
        assert_eq!(recs.len(), 6);
        assert_eq!(build_sample_pairs(&recs).len(), 6);
        let ph = Phantom::new(cfg.clone()).unwrap();
        for r in &recs {
            let other = b.path().join(r.path(Modality::Flair).file_name().unwrap());
            let va = crate::volume::read_volume(r.path(Modality::Flair)).unwrap();
            assert_eq!(va, crate::volume::read_volume(&other).unwrap());
            let p = ph.participant(&r.participant_id).unwrap();
            let regen = ph.render(p, r.timepoint_index as usize - 1, Modality::Flair).unwrap();
            assert_eq!(va, regen);
        }
        assert!(generate_cohort(&cfg, &a.path().join("missing")).unwrap_err().to_string().contains("missing"));
    }

    #[test]
    fn lesion_signal_dominates_noise() {
        let cfg = PhantomConfig::preset(PhantomPreset::Desk);
        let ph = Phantom::new(cfg.clone()).unwrap();
        for p in ph.participants().iter().take(4) {
            let src = ph.render(p, 0, Modality::Flair).unwrap();
            let last = p.days.len() - 1;
            let tgt = ph.render(p, last, Modality::Flair).unwrap();
            let clean_src = ph.render_clean(p, 0.0, Modality::Flair);
            let clean_tgt = ph.render_clean(p, p.days[last] as f64, Modality::Flair);
            let changed: Vec<usize> = (0..src.len())
                .filter(|&i| (clean_tgt.data()[i] - clean_src.data()[i]).abs() > 0.05)
                .collect();
            assert!(!changed.is_empty());
            let mad = changed.iter().map(|&i| (tgt.data()[i] - src.data()[i]).abs() as f64).sum::<f64>() / changed.len() as f64;
            assert!(mad > 5.0 * cfg.noise, "{} mean change {mad}", p.id);
        }
    }

    #[test]
    fn overflow_is_reported() {
        let mut cfg = PhantomConfig::preset(PhantomPreset::Desk);
        cfg.side = 8;
        cfg.semi_axes = [0.1; 3];
        cfg.profile = vec![ProfileGroup { count: 1, timepoints: 6 }];
        cfg.kind_weights = [1.0, 0.0, 0.0];
        assert!(Phantom::new(cfg).unwrap_err().to_string().contains("lesion overflow"));
    }
}
