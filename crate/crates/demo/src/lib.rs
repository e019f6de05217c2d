//! Browser bindings: render a phantom participant at any day count, show how
//! the patch layout tiles a volume, and score one timepoint against another.

use wasm_bindgen::prelude::*;

use longflair::data_pipeline::{plan_patch_layout, Modality};
use longflair::metrics::{evaluate_pair, MetricReport};
use longflair::phantom::{Phantom, PhantomConfig, PhantomPreset};
use longflair::volume::Volume;

/// An RGBA image ready for `ImageData`.
#[wasm_bindgen]
pub struct Slice {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl Slice {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

#[wasm_bindgen]
pub struct Scores {
    psnr_db: f64,
    nmse: f64,
    ssim: f64,
}

#[wasm_bindgen]
impl Scores {
    #[wasm_bindgen(getter)]
    pub fn psnr_db(&self) -> f64 {
        self.psnr_db
    }

    #[wasm_bindgen(getter)]
    pub fn nmse(&self) -> f64 {
        self.nmse
    }

    #[wasm_bindgen(getter)]
    pub fn ssim(&self) -> f64 {
        self.ssim
    }
}

impl From<MetricReport> for Scores {
    fn from(r: MetricReport) -> Self {
        Scores {
            psnr_db: r.psnr_db,
            nmse: r.nmse,
            ssim: r.ssim,
        }
    }
}

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn parse_modality(name: &str) -> Result<Modality, String> {
    Modality::ALL
        .into_iter()
        .find(|m| m.name().eq_ignore_ascii_case(name))
        .ok_or_else(|| format!("unknown modality {name:?}"))
}

/// Axial slice `z` as gray levels, windowed to `[lo, hi]`.
fn axial(v: &Volume, z: usize, lo: f32, hi: f32) -> Result<Slice, String> {
    let [w, h, d] = v.shape();
    if z >= d {
        return Err(format!("slice {z} is outside 0..{d}"));
    }
    let span = (hi - lo).max(f32::EPSILON);
    let mut rgba = Vec::with_capacity(w * h * 4);
    for y in 0..h {
        for x in 0..w {
            let g = (((v.get(x, y, z) - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
            rgba.extend_from_slice(&[g, g, g, 255]);
        }
    }
    Ok(Slice { width: w, height: h, rgba })
}

/// A synthetic cohort whose participants can be rendered at any day count.
#[wasm_bindgen]
pub struct Cohort {
    phantom: Phantom,
}

impl Cohort {
    pub fn build(seed: u32, side: usize) -> Result<Cohort, String> {
        let mut cfg = PhantomConfig::preset(PhantomPreset::Desk);
        cfg.seed = seed.into();
        cfg.side = side;
        let phantom = Phantom::new(cfg).map_err(|e| e.to_string())?;
        Ok(Cohort { phantom })
    }

    fn render(&self, participant: usize, modality: &str, days: f64) -> Result<Volume, String> {
        let p = self
            .phantom
            .participants()
            .get(participant)
            .ok_or_else(|| format!("participant {participant} out of range"))?;
        Ok(self.phantom.render_clean(p, days, parse_modality(modality)?))
    }

    pub fn slice_at(&self, participant: usize, modality: &str, days: f64, z: usize) -> Result<Slice, String> {
        let v = self.render(participant, modality, days)?;
        let hi = v.data().iter().copied().fold(f32::MIN, f32::max);
        axial(&v, z, 0.0, hi)
    }

    pub fn compare_days(&self, participant: usize, days_a: f64, days_b: f64) -> Result<Scores, String> {
        let a = self.render(participant, "FLAIR", days_a)?;
        let b = self.render(participant, "FLAIR", days_b)?;
        evaluate_pair("demo", &a, &b).map(Scores::from).map_err(|e| e.to_string())
    }
}

#[wasm_bindgen]
impl Cohort {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, side: usize) -> Result<Cohort, JsError> {
        Cohort::build(seed, side).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn participants(&self) -> usize {
        self.phantom.participants().len()
    }

    #[wasm_bindgen(getter)]
    pub fn side(&self) -> usize {
        self.phantom.config().side
    }

    /// One line per lesion: kind, baseline radius and rate per year.
    pub fn describe(&self, participant: usize) -> String {
        let Some(p) = self.phantom.participants().get(participant) else {
            return String::new();
        };
        let days: Vec<String> = p.days.iter().map(i64::to_string).collect();
        let mut out = format!("{}  exams at days {}\n", p.id, days.join(", "));
        for l in &p.lesions {
            out += &format!("{:?}: r0 {:.1} vox, {:+.2} vox/yr\n", l.kind, l.r0, l.rate);
        }
        out
    }

    pub fn slice(&self, participant: usize, modality: &str, days: f64, z: usize) -> Result<Slice, JsError> {
        self.slice_at(participant, modality, days, z).map_err(js)
    }

    pub fn compare(&self, participant: usize, days_a: f64, days_b: f64) -> Result<Scores, JsError> {
        self.compare_days(participant, days_a, days_b).map_err(js)
    }
}

/// Number of patches covering each voxel, per axis origin.
pub fn coverage(shape: [usize; 3], patch: usize) -> Result<Volume, String> {
    let layout = plan_patch_layout(shape, [patch; 3]).map_err(|e| e.to_string())?;
    let origins = layout.origins();
    Ok(Volume::from_fn(shape, |x, y, z| {
        origins
            .iter()
            .filter(|o| [x, y, z].iter().zip(o.iter()).all(|(&i, &s)| i >= s && i < s + patch))
            .count() as f32
    }))
}

/// Mid-axial slice of the patch overlap count; 1 patch is dark, 8 is white.
#[wasm_bindgen]
pub fn patch_coverage(x: usize, y: usize, z: usize, patch: usize) -> Result<Slice, JsError> {
    let v = coverage([x, y, z], patch).map_err(js)?;
    axial(&v, z / 2, 0.0, 8.0).map_err(js)
}
