//! Study manifests, volume preprocessing, longitudinal pairing, fold
//! assignment, patch decomposition and augmentation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time_conditioning::{class_from_time_lag, normalize_time_lag, ClassLabel, TimeLag};
use crate::volume::{read_volume, Volume};

/// Value written into voxels that an augmentation pulls in from outside
/// the field of view.
pub const BACKGROUND: f32 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "MPRAGE")]
    Mprage,
    T2,
    #[serde(rename = "PD")]
    Pd,
    #[serde(rename = "FLAIR")]
    Flair,
}

impl Modality {
    /// Generator input channel order.
    pub const ALL: [Modality; 4] = [Modality::Mprage, Modality::T2, Modality::Pd, Modality::Flair];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Mprage => "MPRAGE",
            Modality::T2 => "T2",
            Modality::Pd => "PD",
            Modality::Flair => "FLAIR",
        }
    }

    pub fn channel(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One examination of one participant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub participant_id: String,
    pub timepoint_index: u32,
    pub days_from_baseline: i64,
    pub modality_paths: BTreeMap<Modality, PathBuf>,
}

impl StudyRecord {
    pub fn path(&self, m: Modality) -> &Path {
        &self.modality_paths[&m]
    }
}

pub const MANIFEST_HEADER: [&str; 7] = [
    "participant_id",
    "timepoint_index",
    "days_from_baseline",
    "mprage_path",
    "t2_path",
    "pd_path",
    "flair_path",
];

/// Reads and validates a manifest CSV. Relative volume paths are resolved
/// against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<StudyRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, &path.display().to_string(), base)
}

pub fn parse_manifest(text: &str, name: &str, base: &Path) -> Result<Vec<StudyRecord>> {
    let err = |row: usize, message: String| Error::Manifest {
        path: name.to_string(),
        row,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(err(1, format!("expected header {}", MANIFEST_HEADER.join(","))));
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(usize, StudyRecord)>> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| err(row, e.to_string()))?;
        if rec.len() != MANIFEST_HEADER.len() {
            return Err(err(row, format!("expected {} fields, found {}", MANIFEST_HEADER.len(), rec.len())));
        }
        let pid = rec[0].to_string();
        if pid.is_empty() {
            return Err(err(row, "empty participant_id".into()));
        }
        let tp: u32 = rec[1]
            .parse()
            .map_err(|_| err(row, format!("bad timepoint_index {:?}", &rec[1])))?;
        if tp < 1 {
            return Err(err(row, "timepoint_index must be >= 1".into()));
        }
        let days: i64 = rec[2]
            .parse()
            .map_err(|_| err(row, format!("bad days_from_baseline {:?}", &rec[2])))?;
        if days < 0 {
            return Err(err(row, "days_from_baseline must be >= 0".into()));
        }
        let mut modality_paths = BTreeMap::new();
        for (m, field) in Modality::ALL.iter().zip(3..7) {
            if rec[field].is_empty() {
                return Err(err(row, format!("empty {} path", m)));
            }
            let p = PathBuf::from(&rec[field]);
            modality_paths.insert(*m, if p.is_absolute() { p } else { base.join(p) });
        }
        let record = StudyRecord {
            participant_id: pid.clone(),
            timepoint_index: tp,
            days_from_baseline: days,
            modality_paths,
        };
        let group = groups.entry(pid.clone()).or_insert_with(|| {
            order.push(pid.clone());
            Vec::new()
        });
        if group.iter().any(|(_, r)| r.timepoint_index == tp) {
            return Err(err(row, format!("duplicate timepoint {tp} for participant {pid}")));
        }
        group.push((row, record));
    }
    let mut out = Vec::new();
    for pid in order {
        let mut group = groups.remove(&pid).unwrap();
        group.sort_by_key(|(_, r)| r.timepoint_index);
        for w in group.windows(2) {
            if w[1].1.days_from_baseline <= w[0].1.days_from_baseline {
                return Err(err(
                    w[1].0,
                    format!(
                        "non-increasing days_from_baseline for participant {} (timepoint {} has {} days, timepoint {} has {})",
                        pid, w[0].1.timepoint_index, w[0].1.days_from_baseline, w[1].1.timepoint_index, w[1].1.days_from_baseline
                    ),
                ));
            }
        }
        out.extend(group.into_iter().map(|(_, r)| r));
    }
    Ok(out)
}

/// Writes a manifest; paths under `base` are stored relative to it.
pub fn write_manifest(path: &Path, records: &[StudyRecord]) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(MANIFEST_HEADER).map_err(io)?;
    for r in records {
        let mut row = vec![r.participant_id.clone(), r.timepoint_index.to_string(), r.days_from_baseline.to_string()];
        for m in Modality::ALL {
            let p = r.path(m);
            let rel = p.strip_prefix(base).unwrap_or(p);
            row.push(rel.to_string_lossy().into_owned());
        }
        w.write_record(&row).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `floor((full - target) / 2)` per axis.
pub fn center_crop_start(full: [usize; 3], target: [usize; 3]) -> Result<[usize; 3]> {
    let mut start = [0; 3];
    for a in 0..3 {
        if target[a] == 0 || target[a] > full[a] {
            return Err(Error::shape(format!(
                "crop target {:?} exceeds volume shape {:?}",
                target, full
            )));
        }
        start[a] = (full[a] - target[a]) / 2;
    }
    Ok(start)
}

pub fn crop_at(v: &Volume, start: [usize; 3], target: [usize; 3]) -> Result<Volume> {
    let full = v.shape();
    for a in 0..3 {
        if target[a] == 0 || start[a] + target[a] > full[a] {
            return Err(Error::shape(format!(
                "crop window start {:?} size {:?} exceeds volume shape {:?}",
                start, target, full
            )));
        }
    }
    let mut data = Vec::with_capacity(target.iter().product());
    for x in 0..target[0] {
        for y in 0..target[1] {
            let off = v.index(start[0] + x, start[1] + y, start[2]);
            data.extend_from_slice(&v.data()[off..off + target[2]]);
        }
    }
    Volume::new(target, v.spacing(), data)
}

pub fn center_crop(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    let start = center_crop_start(v.shape(), target)?;
    crop_at(v, start, target)
}

/// Affine map of the intensity range onto `[-1, 1]`.
pub fn normalize_to_signed_unit(v: &Volume) -> Result<Volume> {
    let (lo, hi) = v.intensity_range();
    if hi <= lo {
        return Err(Error::DegenerateRange(lo as f64));
    }
    let (lo, span) = (lo as f64, hi as f64 - lo as f64);
    Ok(v.map(|x| (2.0 * ((x as f64 - lo) / span) - 1.0) as f32))
}

/// An ordered (earlier, later) pair of examinations of one participant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePair {
    pub participant_id: String,
    pub source: StudyRecord,
    pub target: StudyRecord,
    pub time_lag_days: i64,
}

impl SamplePair {
    pub fn time_lag(&self) -> Result<TimeLag> {
        normalize_time_lag(self.time_lag_days)
    }

    /// Stable identifier, e.g. `P03_t1_t4`.
    pub fn id(&self) -> String {
        format!(
            "{}_t{}_t{}",
            self.participant_id, self.source.timepoint_index, self.target.timepoint_index
        )
    }
}

/// All `n(n-1)/2` forward pairs per participant.
pub fn build_sample_pairs(records: &[StudyRecord]) -> Vec<SamplePair> {
    let mut by_pid: Vec<(&str, Vec<&StudyRecord>)> = Vec::new();
    for r in records {
        match by_pid.iter_mut().find(|(p, _)| *p == r.participant_id) {
            Some((_, v)) => v.push(r),
            None => by_pid.push((&r.participant_id, vec![r])),
        }
    }
    let mut out = Vec::new();
    for (pid, mut recs) in by_pid {
        recs.sort_by_key(|r| r.timepoint_index);
        if recs.len() < 2 {
            log::warn!("participant {pid} has {} timepoint(s); contributes no samples", recs.len());
            continue;
        }
        for i in 0..recs.len() {
            for j in i + 1..recs.len() {
                out.push(SamplePair {
                    participant_id: pid.to_string(),
                    source: recs[i].clone(),
                    target: recs[j].clone(),
                    time_lag_days: recs[j].days_from_baseline - recs[i].days_from_baseline,
                });
            }
        }
    }
    out
}

/// A training instance with its volumes loaded and preprocessed.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub participant_id: String,
    /// Source modalities in [`Modality::ALL`] order.
    pub source: Vec<Volume>,
    pub target: Volume,
    pub time_lag_days: i64,
    pub class_label: Option<ClassLabel>,
}

impl Sample {
    pub fn new(
        id: String,
        participant_id: String,
        source: Vec<Volume>,
        target: Volume,
        time_lag_days: i64,
        class_label: Option<ClassLabel>,
    ) -> Result<Self> {
        if source.len() != Modality::ALL.len() {
            return Err(Error::shape(format!("sample needs 4 source volumes, got {}", source.len())));
        }
        if source.iter().any(|v| v.shape() != target.shape() || v.spacing() != target.spacing()) {
            return Err(Error::shape("sample volumes do not share shape and spacing"));
        }
        normalize_time_lag(time_lag_days)?;
        Ok(Sample {
            id,
            participant_id,
            source,
            target,
            time_lag_days,
            class_label,
        })
    }

    pub fn time_lag(&self) -> TimeLag {
        normalize_time_lag(self.time_lag_days).expect("validated at construction")
    }

    pub fn shape(&self) -> [usize; 3] {
        self.target.shape()
    }
}

/// Crop placement used when preparing volumes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub shape: Option<[usize; 3]>,
    /// Explicit start indices; centered when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<[usize; 3]>,
}

impl CropSpec {
    pub fn apply(&self, v: &Volume) -> Result<Volume> {
        match (self.shape, self.start) {
            (None, _) => Ok(v.clone()),
            (Some(shape), None) => center_crop(v, shape),
            (Some(shape), Some(start)) => crop_at(v, start, shape),
        }
    }
}

/// Loads, crops and normalizes study volumes, memoizing the results.
#[derive(Debug, Default)]
pub struct StudyLoader {
    crop: CropSpec,
    n_classes: Option<usize>,
    cache: HashMap<PathBuf, Arc<Volume>>,
    caching: bool,
}

impl StudyLoader {
    pub fn new(crop: CropSpec, n_classes: Option<usize>, caching: bool) -> Self {
        StudyLoader {
            crop,
            n_classes,
            cache: HashMap::new(),
            caching,
        }
    }

    pub fn crop(&self) -> &CropSpec {
        &self.crop
    }

    pub fn load(&mut self, path: &Path) -> Result<Arc<Volume>> {
        if let Some(v) = self.cache.get(path) {
            return Ok(v.clone());
        }
        let raw = read_volume(path)?;
        let v = Arc::new(normalize_to_signed_unit(&self.crop.apply(&raw)?)?);
        if self.caching {
            self.cache.insert(path.to_path_buf(), v.clone());
        }
        Ok(v)
    }

    pub fn load_study(&mut self, r: &StudyRecord) -> Result<Vec<Volume>> {
        Modality::ALL.iter().map(|&m| self.load(r.path(m)).map(|v| (*v).clone())).collect()
    }

    pub fn load_sample(&mut self, p: &SamplePair) -> Result<Sample> {
        let source = self.load_study(&p.source)?;
        let target = (*self.load(p.target.path(Modality::Flair))?).clone();
        let class_label = self.n_classes.map(|k| class_from_time_lag(p.time_lag_days, k)).transpose()?;
        Sample::new(p.id(), p.participant_id.clone(), source, target, p.time_lag_days, class_label)
    }
}

/// Participant-level assignment to `k` folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, participant: &str) -> Option<usize> {
        self.assignment.get(participant).copied()
    }

    pub fn participants_in(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    /// Splits pairs into (train, validation) for one held-out fold.
    pub fn split_pairs<'a>(&self, pairs: &'a [SamplePair], fold: usize) -> (Vec<&'a SamplePair>, Vec<&'a SamplePair>) {
        pairs.iter().partition(|p| self.fold_of(&p.participant_id) != Some(fold))
    }
}

/// `(participant_id, number of timepoints)` for each participant.
pub fn participant_counts(records: &[StudyRecord]) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for r in records {
        match out.iter_mut().find(|(p, _)| *p == r.participant_id) {
            Some((_, n)) => *n += 1,
            None => out.push((r.participant_id.clone(), 1)),
        }
    }
    out
}

/// Deterministic fold assignment. Participants are grouped by timepoint
/// count, shuffled within each group, and dealt round-robin so every fold
/// receives a similar mix. An explicit `override_map` is used verbatim after
/// validation.
pub fn assign_folds(
    participants: &[(String, usize)],
    k: usize,
    seed: u64,
    override_map: Option<&BTreeMap<String, usize>>,
) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    if participants.len() < k {
        return Err(Error::invalid(format!(
            "{} participants cannot fill {} folds",
            participants.len(),
            k
        )));
    }
    if let Some(map) = override_map {
        for (pid, _) in participants {
            match map.get(pid) {
                None => return Err(Error::invalid(format!("fold override has no entry for participant {pid}"))),
                Some(&f) if f >= k => {
                    return Err(Error::invalid(format!("fold override puts {pid} in fold {f} but k = {k}")))
                }
                _ => {}
            }
        }
        if let Some(extra) = map.keys().find(|p| !participants.iter().any(|(q, _)| q == *p)) {
            return Err(Error::invalid(format!("fold override names unknown participant {extra}")));
        }
        return Ok(FoldSplit {
            k,
            assignment: map.clone(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (pid, n) in participants {
        groups.entry(*n).or_default().push(pid);
    }
    let mut assignment = BTreeMap::new();
    let mut next = 0;
    for (_, mut group) in groups {
        group.sort_unstable();
        group.shuffle(&mut rng);
        for pid in group {
            assignment.insert(pid.to_string(), next);
            next = (next + 1) % k;
        }
    }
    Ok(FoldSplit { k, assignment })
}

/// Reads a fold override: either a bare `{"participant": fold}` object or a
/// serialized [`FoldSplit`].
pub fn parse_fold_override(text: &str) -> Result<BTreeMap<String, usize>> {
    if let Ok(split) = serde_json::from_str::<FoldSplit>(text) {
        return Ok(split.assignment);
    }
    Ok(serde_json::from_str(text)?)
}

pub fn load_fold_override(path: &Path) -> Result<BTreeMap<String, usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_fold_override(&text).map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))
}

/// Five-fold split of the 19-participant ISBI-shaped cohort whose per-fold
/// composition by timepoint count (4/5/6) is 4/0/0, 4/0/0, 3/1/0, 2/1/0
/// and 1/2/1, keyed by the phantom's participant ids.
pub fn isbi_reference_folds() -> BTreeMap<String, usize> {
    parse_fold_override(include_str!("../fixtures/isbi_folds.json")).expect("bundled fixture parses")
}

/// Patch grid: per-axis offsets whose Cartesian product enumerates patches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLayout {
    pub full_shape: [usize; 3],
    pub patch_shape: [usize; 3],
    pub offsets: [Vec<usize>; 3],
}

impl PatchLayout {
    pub fn len(&self) -> usize {
        self.offsets.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Offset triples in lexicographic (x, y, z) order.
    pub fn origins(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::with_capacity(self.len());
        for &x in &self.offsets[0] {
            for &y in &self.offsets[1] {
                for &z in &self.offsets[2] {
                    out.push([x, y, z]);
                }
            }
        }
        out
    }
}

/// Offsets `{0, full - patch}` per axis (a single `0` when they are equal).
pub fn plan_patch_layout(full_shape: [usize; 3], patch_shape: [usize; 3]) -> Result<PatchLayout> {
    let mut offsets: [Vec<usize>; 3] = Default::default();
    for a in 0..3 {
        let (f, p) = (full_shape[a], patch_shape[a]);
        if p == 0 || p > f {
            return Err(Error::shape(format!(
                "patch {:?} does not fit in volume {:?}",
                patch_shape, full_shape
            )));
        }
        offsets[a] = if p == f { vec![0] } else { vec![0, f - p] };
        if 2 * p < f {
            return Err(Error::shape(format!(
                "two patches of side {} cannot cover axis of length {}",
                p, f
            )));
        }
    }
    Ok(PatchLayout {
        full_shape,
        patch_shape,
        offsets,
    })
}

pub fn extract_patches(v: &Volume, layout: &PatchLayout) -> Result<Vec<Volume>> {
    if v.shape() != layout.full_shape {
        return Err(Error::shape(format!(
            "volume shape {:?} does not match layout {:?}",
            v.shape(),
            layout.full_shape
        )));
    }
    layout
        .origins()
        .into_iter()
        .map(|o| crop_at(v, o, layout.patch_shape))
        .collect()
}

/// Averages overlapping patches back into a full volume.
pub fn aggregate_patches(patches: &[Volume], layout: &PatchLayout) -> Result<Volume> {
    let origins = layout.origins();
    if patches.len() != origins.len() {
        return Err(Error::shape(format!(
            "layout has {} patches, got {}",
            origins.len(),
            patches.len()
        )));
    }
    let full = layout.full_shape;
    let ps = layout.patch_shape;
    let mut sum = vec![0.0f64; full.iter().product()];
    let mut count = vec![0u32; sum.len()];
    for (patch, o) in patches.iter().zip(&origins) {
        if patch.shape() != ps {
            return Err(Error::shape(format!("patch shape {:?} != {:?}", patch.shape(), ps)));
        }
        for x in 0..ps[0] {
            for y in 0..ps[1] {
                let dst = ((o[0] + x) * full[1] + o[1] + y) * full[2] + o[2];
                let src = patch.index(x, y, 0);
                for z in 0..ps[2] {
                    sum[dst + z] += patch.data()[src + z] as f64;
                    count[dst + z] += 1;
                }
            }
        }
    }
    let data = sum.iter().zip(&count).map(|(&s, &c)| (s / c as f64) as f32).collect();
    Volume::new(full, patches[0].spacing(), data)
}

/// Parameters of one spatial augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Euler angles in degrees about x, y and z.
    pub angles_deg: [f64; 3],
    pub scale: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        angles_deg: [0.0; 3],
        scale: 1.0,
    };

    pub const MAX_ANGLE_DEG: f64 = 12.0;
    pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);

    pub fn sample(rng: &mut impl Rng) -> Self {
        let a = Self::MAX_ANGLE_DEG;
        AugmentParams {
            angles_deg: [rng.gen_range(-a..=a), rng.gen_range(-a..=a), rng.gen_range(-a..=a)],
            scale: rng.gen_range(Self::SCALE_RANGE.0..=Self::SCALE_RANGE.1),
        }
    }

    /// `R = Rz · Ry · Rx`.
    fn rotation(&self) -> [[f64; 3]; 3] {
        let [a, b, c] = self.angles_deg.map(f64::to_radians);
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sc, cc) = c.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
        let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
        let rz = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
        matmul3(&rz, &matmul3(&ry, &rx))
    }
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Rotates about the volume center, then scales isotropically. Trilinear
/// sampling; voxels mapped from outside the input are set to `fill`.
pub fn transform_volume(v: &Volume, params: &AugmentParams, fill: f32) -> Volume {
    let r = params.rotation();
    let shape = v.shape();
    let c = shape.map(|n| (n as f64 - 1.0) / 2.0);
    let inv_s = 1.0 / params.scale;
    let mut out = Vec::with_capacity(v.len());
    for x in 0..shape[0] {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                let d = [
                    (x as f64 - c[0]) * inv_s,
                    (y as f64 - c[1]) * inv_s,
                    (z as f64 - c[2]) * inv_s,
                ];
                // inverse rotation is the transpose
                let q = [
                    c[0] + r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
                    c[1] + r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
                    c[2] + r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
                ];
                out.push(trilinear(v, q, fill));
            }
        }
    }
    Volume::new(shape, v.spacing(), out).expect("same shape")
}

fn trilinear(v: &Volume, q: [f64; 3], fill: f32) -> f32 {
    let shape = v.shape();
    const TOL: f64 = 1e-9;
    let mut lo = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let max = (shape[a] - 1) as f64;
        if q[a] < -TOL || q[a] > max + TOL {
            return fill;
        }
        let qa = q[a].clamp(0.0, max);
        let f = qa.floor();
        lo[a] = (f as usize).min(shape[a].saturating_sub(2));
        frac[a] = qa - lo[a] as f64;
        if shape[a] == 1 {
            lo[a] = 0;
            frac[a] = 0.0;
        }
    }
    let at = |dx: usize, dy: usize, dz: usize| -> f64 {
        let x = (lo[0] + dx).min(shape[0] - 1);
        let y = (lo[1] + dy).min(shape[1] - 1);
        let z = (lo[2] + dz).min(shape[2] - 1);
        v.get(x, y, z) as f64
    };
    let mut acc = 0.0;
    for dx in 0..2 {
        let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
        if wx == 0.0 {
            continue;
        }
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
            if wy == 0.0 {
                continue;
            }
            for dz in 0..2 {
                let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
                if wz == 0.0 {
                    continue;
                }
                acc += wx * wy * wz * at(dx, dy, dz);
            }
        }
    }
    acc as f32
}

/// Applies one shared random transform to all five volumes of a sample.
pub fn augment_sample(s: &Sample, rng: &mut impl Rng) -> Sample {
    augment_sample_with(s, &AugmentParams::sample(rng))
}

pub fn augment_sample_with(s: &Sample, params: &AugmentParams) -> Sample {
    Sample {
        id: s.id.clone(),
        participant_id: s.participant_id.clone(),
        source: s.source.iter().map(|v| transform_volume(v, params, BACKGROUND)).collect(),
        target: transform_volume(&s.target, params, BACKGROUND),
        time_lag_days: s.time_lag_days,
        class_label: s.class_label,
    }
}
