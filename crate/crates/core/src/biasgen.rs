//! Synthetic spurious-correlation image datasets.
//!
//! Each image shows one warm-coloured glyph on a two-tone cool textured
//! background, separated from the texture by a thin plain ring. The glyph
//! shape alone determines the label. The background
//! texture agrees with the label ("aligned") with a configurable probability,
//! which is the spurious channel a biased classifier can latch onto.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::encoders::Prompt;
use crate::error::{Error, Result};
use crate::mapio;
use crate::seed;

/// Glyph shapes, indexed by class.
pub const GLYPH_NAMES: [&str; 4] = ["square", "cross", "triangle", "diamond"];
/// Background textures; texture `c` is the one aligned with class `c`.
pub const TEXTURE_NAMES: [&str; 4] = ["hstripes", "checker", "vstripes", "diagonal"];

const GLYPH_RGB: [f64; 3] = [0.92, 0.52, 0.12];
const TONE_DARK: [f64; 3] = [0.12, 0.30, 0.55];
const TONE_LIGHT: [f64; 3] = [0.55, 0.78, 0.80];
const COLOR_JITTER: f64 = 0.05;
const PIXEL_NOISE: f64 = 0.02;
/// Width of the untextured ring drawn around the glyph in the dark tone.
pub const HALO: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Probability that a train/val background is the class-aligned texture.
    pub correlation: f64,
    /// Same probability for the test split.
    pub test_correlation: f64,
    /// Label marginals; uniform when absent.
    pub class_priors: Option<Vec<f64>>,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub seed: u64,
    /// Persist foreground masks alongside images.
    pub mask_included: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 2,
            height: 32,
            width: 32,
            correlation: 1.0,
            test_correlation: 0.0,
            class_priors: None,
            train_count: 1000,
            val_count: 200,
            test_count: 500,
            seed: 0,
            mask_included: true,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=GLYPH_NAMES.len()).contains(&self.num_classes) {
            return Err(Error::config(
                "num_classes",
                format!("must be in 2..={}", GLYPH_NAMES.len()),
            ));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::config("height/width", "images must be at least 16x16"));
        }
        for (name, v) in [("correlation", self.correlation), ("test_correlation", self.test_correlation)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, format!("{v} is outside [0, 1]")));
            }
        }
        if let Some(p) = &self.class_priors {
            if p.len() != self.num_classes {
                return Err(Error::config(
                    "class_priors",
                    format!("{} entries for {} classes", p.len(), self.num_classes),
                ));
            }
            if p.iter().any(|&x| !(x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::config("class_priors", "must be non-negative and sum to 1"));
            }
        }
        for (name, n) in [
            ("train_count", self.train_count),
            ("val_count", self.val_count),
            ("test_count", self.test_count),
        ] {
            if n == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn priors(&self) -> Vec<f64> {
        self.class_priors
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.num_classes as f64; self.num_classes])
    }

    pub fn class_names(&self) -> Vec<String> {
        GLYPH_NAMES[..self.num_classes].iter().map(|s| s.to_string()).collect()
    }

    /// Range of glyph radii for this image size.
    fn radius_range(&self) -> (usize, usize) {
        let s = self.height.min(self.width);
        ((s * 3 / 16).max(3), (s / 4).max(4))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Integer glyph placement: centre and radius in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlyphPose {
    pub cx: i64,
    pub cy: i64,
    pub r: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[H, W, 3]` in [0, 1].
    pub image: Tensor,
    pub label: usize,
    pub background_id: usize,
    /// `[H, W]` with 1 on glyph pixels and 0 elsewhere.
    pub mask: Tensor,
    pub prompt: Prompt,
    pub pose: GlyphPose,
}

impl Sample {
    pub fn aligned(&self) -> bool {
        self.label == self.background_id
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub class_names: Vec<String>,
    pub prompts: Vec<Prompt>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Half-width of the square glyph: area `(2·0.7071)² = 2`.
const SQUARE_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;
/// Arm half-width of the cross: `8a − 4a² = 2`.
const CROSS_ARM: f64 = 1.0 - std::f64::consts::FRAC_1_SQRT_2;

/// Whether normalised glyph coordinates `(u, v)` (v pointing down) fall
/// inside the shape of `class`. Every glyph has area 2 in these units, so
/// foreground size carries no label information.
pub fn glyph_contains(class: usize, u: f64, v: f64) -> bool {
    match class {
        0 => u.abs() <= SQUARE_HALF && v.abs() <= SQUARE_HALF,
        1 => (u.abs() <= CROSS_ARM && v.abs() <= 1.0) || (v.abs() <= CROSS_ARM && u.abs() <= 1.0),
        2 => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) / 2.0,
        3 => u.abs() + v.abs() <= 1.0,
        _ => false,
    }
}

/// Rasterises a glyph mask by pixel centres.
pub fn render_mask(class: usize, pose: GlyphPose, height: usize, width: usize) -> Vec<bool> {
    let mut mask = vec![false; height * width];
    let r = pose.r as f64;
    for y in 0..height {
        let v = (y as f64 + 0.5 - pose.cy as f64) / r;
        for x in 0..width {
            let u = (x as f64 + 0.5 - pose.cx as f64) / r;
            mask[y * width + x] = glyph_contains(class, u, v);
        }
    }
    mask
}

/// Pixels within Chebyshev distance `radius` of a set pixel.
fn dilate(mask: &[bool], height: usize, width: usize, radius: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            let ys = y.saturating_sub(radius)..=(y + radius).min(height - 1);
            out[y * width + x] = ys.into_iter().any(|yy| {
                (x.saturating_sub(radius)..=(x + radius).min(width - 1)).any(|xx| mask[yy * width + xx])
            });
        }
    }
    out
}

/// Two-tone texture pattern: `true` selects the light tone.
pub fn texture_bit(texture: usize, x: usize, y: usize, phase: (usize, usize)) -> bool {
    let (px, py) = phase;
    let (x, y) = (x + px, y + py);
    match texture {
        0 => (y / 2) % 2 == 1,
        1 => (x / 2 + y / 2) % 2 == 1,
        2 => (x / 2) % 2 == 1,
        _ => ((x + y) / 2) % 2 == 1,
    }
}

fn jittered<R: Rng + ?Sized>(rng: &mut R, base: [f64; 3]) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-COLOR_JITTER..=COLOR_JITTER)).clamp(0.0, 1.0))
}

fn sample_label<R: Rng + ?Sized>(rng: &mut R, priors: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, &p) in priors.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    // Rounding slack: fall back to the last class with positive mass.
    priors.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Generates one sample from its own derived random stream.
pub fn generate_sample(spec: &DatasetSpec, split: Split, index: usize, prompts: &[Prompt]) -> Sample {
    let rho = match split {
        Split::Test => spec.test_correlation,
        _ => spec.correlation,
    };
    let mut rng = seed::stream(spec.seed, split.name(), index as u64);
    let label = sample_label(&mut rng, &spec.priors());
    let background_id = if rng.random::<f64>() < rho {
        label
    } else {
        let k = rng.random_range(0..spec.num_classes - 1);
        if k >= label {
            k + 1
        } else {
            k
        }
    };

    let (h, w) = (spec.height, spec.width);
    let (rmin, rmax) = spec.radius_range();
    let r = rng.random_range(rmin..=rmax) as i64;
    let cx = rng.random_range(r + 1..=w as i64 - r - 1);
    let cy = rng.random_range(r + 1..=h as i64 - r - 1);
    let pose = GlyphPose { cx, cy, r };
    let phase = (rng.random_range(0..4), rng.random_range(0..4));

    let dark = jittered(&mut rng, TONE_DARK);
    let light = jittered(&mut rng, TONE_LIGHT);
    let glyph = jittered(&mut rng, GLYPH_RGB);
    let mask = render_mask(label, pose, h, w);
    let halo = dilate(&mask, h, w, HALO);

    let mut img = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let base = if mask[y * w + x] {
                glyph
            } else if !halo[y * w + x] && texture_bit(background_id, x, y, phase) {
                light
            } else {
                dark
            };
            for c in base {
                img.push((c + rng.random_range(-PIXEL_NOISE..=PIXEL_NOISE)).clamp(0.0, 1.0));
            }
        }
    }

    Sample {
        image: Tensor::new(vec![h, w, 3], img).expect("image shape"),
        label,
        background_id,
        mask: Tensor::new(vec![h, w], mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())
            .expect("mask shape"),
        prompt: prompts[label].clone(),
        pose,
    }
}

/// Generates all three splits. Deterministic given the spec.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let class_names = spec.class_names();
    let prompts = class_names
        .iter()
        .map(|n| Prompt::for_category(n))
        .collect::<Result<Vec<_>>>()?;
    let make = |split: Split, n: usize| -> Vec<Sample> {
        (0..n).map(|i| generate_sample(spec, split, i, &prompts)).collect()
    };
    Ok(Dataset {
        train: make(Split::Train, spec.train_count),
        val: make(Split::Val, spec.val_count),
        test: make(Split::Test, spec.test_count),
        spec: spec.clone(),
        class_names,
        prompts,
    })
}

/// Fraction of attention mass inside the mask, `Σ(A·mask) / Σ A`; 0 when
/// the attention has no mass. The map is resized to the mask resolution
/// first when shapes differ.
pub fn localization_score(attention: &Tensor, mask: &Tensor) -> Result<f64> {
    let a = if attention.shape() == mask.shape() {
        attention.clone()
    } else {
        let (mh, mw) = match *mask.shape() {
            [h, w] => (h, w),
            ref s => return Err(Error::contract("localization_score", format!("mask must be [H, W], got {s:?}"))),
        };
        crate::saliency::resize_map(attention, mh, mw)?
    };
    let total = a.sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let inside: f64 = a.data().iter().zip(mask.data()).map(|(x, m)| x * m).sum();
    Ok(inside / total)
}

pub mod oracle {
    //! Reference classifiers that read only one of the two signals.

    use super::*;

    /// Predicts the class whose rendered glyph best matches the mask (IoU),
    /// searching poses near the mask's bounding-box centre.
    pub fn glyph_class(mask: &Tensor, num_classes: usize, spec: &DatasetSpec) -> usize {
        let (h, w) = (spec.height, spec.width);
        let m: Vec<bool> = mask.data().iter().map(|&v| v > 0.5).collect();
        let (mut x0, mut x1, mut y0, mut y1) = (w, 0, h, 0);
        for y in 0..h {
            for x in 0..w {
                if m[y * w + x] {
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                }
            }
        }
        if x0 > x1 {
            return 0;
        }
        let ccx = ((x0 + x1 + 1) / 2) as i64;
        let ccy = ((y0 + y1 + 1) / 2) as i64;
        let (rmin, rmax) = spec.radius_range();
        let mut best = (f64::NEG_INFINITY, 0);
        for class in 0..num_classes {
            for r in rmin as i64..=rmax as i64 {
                for dy in -2..=2 {
                    for dx in -2..=2 {
                        let pose = GlyphPose { cx: ccx + dx, cy: ccy + dy, r };
                        let t = render_mask(class, pose, h, w);
                        let inter = t.iter().zip(&m).filter(|(a, b)| **a && **b).count();
                        let union = t.iter().zip(&m).filter(|(a, b)| **a || **b).count();
                        let iou = inter as f64 / union.max(1) as f64;
                        if iou > best.0 {
                            best = (iou, class);
                        }
                    }
                }
            }
        }
        best.1
    }

    /// Identifies the background texture from tone changes between
    /// neighbouring background pixels along four directions.
    pub fn background_texture(image: &Tensor, mask: &Tensor, num_textures: usize) -> usize {
        let s = image.shape();
        let (h, w) = (s[0], s[1]);
        let px = |x: usize, y: usize| &image.data()[(y * w + x) * 3..(y * w + x + 1) * 3];
        let bg = |x: usize, y: usize| mask.data()[y * w + x] < 0.5;
        let dirs: [(i64, i64); 4] = [(1, 0), (0, 1), (1, 1), (1, -1)];
        let mut profile = [0.0; 4];
        for (k, &(dx, dy)) in dirs.iter().enumerate() {
            let (mut changes, mut pairs) = (0usize, 0usize);
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let (x2, y2) = (x + dx, y + dy);
                    if x2 < 0 || y2 < 0 || x2 >= w as i64 || y2 >= h as i64 {
                        continue;
                    }
                    let (a, b) = ((x as usize, y as usize), (x2 as usize, y2 as usize));
                    if !bg(a.0, a.1) || !bg(b.0, b.1) {
                        continue;
                    }
                    let d: f64 = px(a.0, a.1).iter().zip(px(b.0, b.1)).map(|(p, q)| (p - q).abs()).sum();
                    pairs += 1;
                    if d > 0.4 {
                        changes += 1;
                    }
                }
            }
            profile[k] = changes as f64 / pairs.max(1) as f64;
        }
        // Expected change rates along (x, y, diagonal, anti-diagonal).
        let prototypes = [
            [0.0, 0.5, 0.5, 0.5],
            [0.5, 0.5, 0.5, 0.5],
            [0.5, 0.0, 0.5, 0.5],
            [0.5, 0.5, 1.0, 0.0],
        ];
        let mut best = (f64::INFINITY, 0);
        for (t, proto) in prototypes.iter().enumerate().take(num_textures) {
            let d: f64 = proto.iter().zip(&profile).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best.0 {
                best = (d, t);
            }
        }
        best.1
    }
}

// ---- persistence ---------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    index: usize,
    label: usize,
    background_id: usize,
    pose: GlyphPose,
    image: String,
    mask: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    spec: DatasetSpec,
    class_names: Vec<String>,
    prompts: Vec<Prompt>,
    train: Vec<SampleRecord>,
    val: Vec<SampleRecord>,
    test: Vec<SampleRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `manifest.json` plus one PMAP dump per image (and mask, when the
/// spec asks for masks) under `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut records = Vec::new();
    for split in Split::ALL {
        let mut recs = Vec::new();
        for (i, s) in ds.split(split).iter().enumerate() {
            let image = format!("images/{}_{i:05}.pmap", split.name());
            mapio::write_pmap(&dir.join(&image), &s.image)?;
            let mask = if ds.spec.mask_included {
                let m = format!("masks/{}_{i:05}.pmap", split.name());
                mapio::write_pmap(&dir.join(&m), &s.mask)?;
                Some(m)
            } else {
                None
            };
            recs.push(SampleRecord {
                index: i,
                label: s.label,
                background_id: s.background_id,
                pose: s.pose,
                image,
                mask,
            });
        }
        records.push(recs);
    }
    let test = records.pop().expect("three splits");
    let val = records.pop().expect("three splits");
    let train = records.pop().expect("three splits");
    let manifest = Manifest {
        spec: ds.spec.clone(),
        class_names: ds.class_names.clone(),
        prompts: ds.prompts.clone(),
        train,
        val,
        test,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Loads a dataset directory written by [`save_dataset`]. Masks that were
/// not persisted are re-rendered from the recorded glyph pose.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path: PathBuf = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    m.spec.validate()?;
    let (h, w) = (m.spec.height, m.spec.width);
    let load = |recs: &[SampleRecord]| -> Result<Vec<Sample>> {
        recs.iter()
            .map(|r| {
                let image = mapio::read_pmap(&dir.join(&r.image))?;
                if image.shape() != [h, w, 3] {
                    return Err(Error::Format(format!("{}: unexpected shape {:?}", r.image, image.shape())));
                }
                let mask = match &r.mask {
                    Some(p) => mapio::read_pmap(&dir.join(p))?,
                    None => {
                        let bits = render_mask(r.label, r.pose, h, w);
                        Tensor::new(vec![h, w], bits.iter().map(|&b| f64::from(u8::from(b))).collect())?
                    }
                };
                let prompt = m
                    .prompts
                    .get(r.label)
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("label {} has no prompt", r.label)))?;
                Ok(Sample {
                    image,
                    label: r.label,
                    background_id: r.background_id,
                    mask,
                    prompt,
                    pose: r.pose,
                })
            })
            .collect()
    };
    Ok(Dataset {
        train: load(&m.train)?,
        val: load(&m.val)?,
        test: load(&m.test)?,
        spec: m.spec,
        class_names: m.class_names,
        prompts: m.prompts,
    })
}
