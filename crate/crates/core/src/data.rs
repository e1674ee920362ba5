//! Procedural lesion corpus: single images with optional elliptical lesions
//! and masks, and longitudinal pairs with a labelled progression.
//!
//! Each split is stored as `<name>.bin` next to a `manifest.json`. Record
//! layout (little-endian):
//!
//! ```text
//! header   b"LSNC", version u32 (= 1), count u32, height u16, width u16
//! index    count x u64 absolute record offsets
//! record   seed u64, n_images u8, label u8 (0 normal, 1 abnormal),
//!          progression u8 (0 worsened, 1 improved, 2 no change, 255 none),
//!          brightness f32, dx i8, dy i8,
//!          n_images x (height*width f32 pixels),
//!          n_images x (height*width u8 mask),
//!          question (u32 length + utf-8), answer (u32 length + utf-8)
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::image::{ImageTensor, Mask};

pub const SINGLE_QUESTION: &str = "Is there any abnormality in this image?";
pub const PAIR_QUESTION: &str =
    "How has the lesion changed between the two images? A: Unchanged, B: Improved, C: Worsened.";

const MAGIC: &[u8; 4] = b"LSNC";
const VERSION: u32 = 1;
const SEMI_AXIS: (f64, f64) = (3.0, 6.0);
const WORSEN_SCALE: (f64, f64) = (1.3, 2.0);
const IMPROVE_SCALE: (f64, f64) = (0.4, 0.8);
const BACKGROUND: (f64, f64) = (0.15, 0.55);
/// Seeds reserved per split; split `k` of master seed `s` starts at
/// `s * SEED_BLOCK * 10 + k * SEED_BLOCK`.
pub const SEED_BLOCK: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Abnormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Progression {
    Worsened,
    Improved,
    NoChange,
}

impl Progression {
    pub const ALL: [Progression; 3] = [Progression::Worsened, Progression::Improved, Progression::NoChange];

    /// Option letter in the pair question.
    pub fn letter(self) -> char {
        match self {
            Progression::NoChange => 'A',
            Progression::Improved => 'B',
            Progression::Worsened => 'C',
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Progression::NoChange => "Unchanged",
            Progression::Improved => "Improved",
            Progression::Worsened => "Worsened",
        }
    }

    pub fn gold_answer(self) -> String {
        format!("{}: {}", self.letter(), self.word())
    }

    fn code(self) -> u8 {
        match self {
            Progression::Worsened => 0,
            Progression::Improved => 1,
            Progression::NoChange => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Progression::Worsened),
            1 => Some(Progression::Improved),
            2 => Some(Progression::NoChange),
            _ => None,
        }
    }
}

/// Label-preserving perturbation applied to the second image of a pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    /// Relative brightness change: pixels are multiplied by `1 + brightness`.
    pub brightness: f32,
    pub dx: i8,
    pub dy: i8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub seed: u64,
    pub images: Vec<ImageTensor>,
    pub masks: Vec<Mask>,
    pub label: Label,
    pub progression: Option<Progression>,
    pub nuisance: Nuisance,
    pub qa: QaPair,
}

impl SyntheticSample {
    pub fn is_pair(&self) -> bool {
        self.images.len() == 2
    }
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
    contrast: f64,
}

impl Blob {
    fn contains(&self, y: usize, x: usize) -> bool {
        let (dy, dx) = (y as f64 + 0.5 - self.cy, x as f64 + 0.5 - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn scaled(&self, area_factor: f64) -> Blob {
        let k = area_factor.sqrt();
        Blob { a: self.a * k, b: self.b * k, ..*self }
    }
}

/// Sum of bilinearly interpolated random lattices plus fine noise, mapped
/// into the background intensity band.
fn background(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let mut acc = vec![0.0; size * size];
    let octaves = [(4usize, 0.5), (8, 0.3), (16, 0.2)];
    for (cells, amp) in octaves {
        let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random::<f64>()).collect();
        for y in 0..size {
            let fy = y as f64 * cells as f64 / size as f64;
            let (y0, ty) = (fy.floor() as usize, fy.fract());
            for x in 0..size {
                let fx = x as f64 * cells as f64 / size as f64;
                let (x0, tx) = (fx.floor() as usize, fx.fract());
                let at = |j: usize, i: usize| lattice[j * (cells + 1) + i];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                acc[y * size + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
    }
    let fine = Normal::new(0.0, 0.02).expect("valid std");
    acc.iter()
        .map(|v| (BACKGROUND.0 + (BACKGROUND.1 - BACKGROUND.0) * v + fine.sample(rng)).clamp(0.0, 1.0))
        .collect()
}

fn sample_blobs(rng: &mut ChaCha8Rng, cfg: &DataConfig, size: usize, count: usize) -> Vec<Blob> {
    // Keep room for the largest worsening and the translation.
    let margin = (SEMI_AXIS.1 * WORSEN_SCALE.1.sqrt()).ceil() + cfg.max_shift as f64 + 1.0;
    (0..count)
        .map(|_| Blob {
            cy: rng.random_range(margin..size as f64 - margin),
            cx: rng.random_range(margin..size as f64 - margin),
            a: rng.random_range(SEMI_AXIS.0..SEMI_AXIS.1),
            b: rng.random_range(SEMI_AXIS.0..SEMI_AXIS.1),
            theta: rng.random_range(0.0..std::f64::consts::PI),
            contrast: rng.random_range(cfg.contrast_min..=cfg.contrast_max),
        })
        .collect()
}

fn render(bg: &[f64], blobs: &[Blob], size: usize) -> (ImageTensor, Mask) {
    let mut pixels = Vec::with_capacity(size * size);
    let mut bits = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let lift = blobs.iter().filter(|b| b.contains(y, x)).map(|b| b.contrast).fold(0.0, f64::max);
            pixels.push((bg[y * size + x] + lift).clamp(0.0, 1.0) as f32);
            bits.push(u8::from(lift > 0.0));
        }
    }
    (ImageTensor::new(size, size, pixels).expect("clamped pixels"), Mask::new(size, size, bits).expect("binary mask"))
}

/// Translates by `(dx, dy)` with edge clamping, then scales brightness.
fn apply_nuisance(img: &ImageTensor, mask: &Mask, n: Nuisance) -> (ImageTensor, Mask) {
    let (h, w) = (img.height(), img.width());
    let mut pixels = Vec::with_capacity(h * w);
    let mut bits = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let sy = (y as i64 - n.dy as i64).clamp(0, h as i64 - 1) as usize;
            let sx = (x as i64 - n.dx as i64).clamp(0, w as i64 - 1) as usize;
            pixels.push((img.at(sy, sx) * (1.0 + n.brightness)).clamp(0.0, 1.0));
            bits.push(u8::from(mask.at(sy, sx)));
        }
    }
    (ImageTensor::new(h, w, pixels).expect("clamped pixels"), Mask::new(h, w, bits).expect("binary mask"))
}

/// One image; abnormal with probability `abnormal_prob`.
pub fn gen_single(seed: u64, abnormal_prob: f64, cfg: &DataConfig, size: usize) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = background(&mut rng, size);
    let abnormal = rng.random_bool(abnormal_prob.clamp(0.0, 1.0));
    let blobs = if abnormal {
        let n = rng.random_range(1..=cfg.max_blobs);
        sample_blobs(&mut rng, cfg, size, n)
    } else {
        Vec::new()
    };
    let (image, mask) = render(&bg, &blobs, size);
    SyntheticSample {
        seed,
        images: vec![image],
        masks: vec![mask],
        label: if abnormal { Label::Abnormal } else { Label::Normal },
        progression: None,
        nuisance: Nuisance::default(),
        qa: QaPair { question: SINGLE_QUESTION.into(), answer: if abnormal { "Yes" } else { "No" }.into() },
    }
}

/// A study pair whose second image shows the requested progression plus an
/// independent nuisance perturbation (when `nuisance` is set).
pub fn gen_pair(seed: u64, progression: Progression, cfg: &DataConfig, size: usize, nuisance: bool) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = background(&mut rng, size);
    loop {
        let n = rng.random_range(1..=cfg.max_blobs);
        let blobs = sample_blobs(&mut rng, cfg, size, n);
        let (img1, mask1) = render(&bg, &blobs, size);
        let mut second = None;
        for _ in 0..16 {
            let factor = match progression {
                Progression::Worsened => rng.random_range(WORSEN_SCALE.0..=WORSEN_SCALE.1),
                Progression::Improved => rng.random_range(IMPROVE_SCALE.0..=IMPROVE_SCALE.1),
                Progression::NoChange => 1.0,
            };
            let scaled: Vec<Blob> = blobs.iter().map(|b| b.scaled(factor)).collect();
            let (img2, mask2) = render(&bg, &scaled, size);
            let ok = match progression {
                Progression::Worsened => mask2.area() > mask1.area(),
                Progression::Improved => mask2.area() < mask1.area() && !mask2.is_empty(),
                Progression::NoChange => true,
            };
            if ok {
                second = Some((img2, mask2));
                break;
            }
        }
        let Some((img2, mask2)) = second else { continue };
        let nz = if nuisance {
            Nuisance {
                brightness: rng.random_range(-cfg.brightness_shift..=cfg.brightness_shift) as f32,
                dx: rng.random_range(-cfg.max_shift..=cfg.max_shift) as i8,
                dy: rng.random_range(-cfg.max_shift..=cfg.max_shift) as i8,
            }
        } else {
            Nuisance::default()
        };
        let (img2, mask2) = if nuisance { apply_nuisance(&img2, &mask2, nz) } else { (img2, mask2) };
        return SyntheticSample {
            seed,
            images: vec![img1, img2],
            masks: vec![mask1, mask2],
            label: Label::Abnormal,
            progression: Some(progression),
            nuisance: nz,
            qa: QaPair { question: PAIR_QUESTION.into(), answer: progression.gold_answer() },
        };
    }
}

/// What a split contains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitKind {
    Singles { abnormal_prob: f64 },
    /// Pairs stratified over the progression classes in a fixed cycle.
    Pairs,
    /// `singles` single images followed by pairs.
    Mixed { singles: usize, abnormal_prob: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: String,
    pub kind: SplitKind,
    pub seed_start: u64,
    pub count: usize,
}

impl SplitSpec {
    pub fn seed_range(&self) -> std::ops::Range<u64> {
        self.seed_start..self.seed_start + self.count as u64
    }
}

pub const SPLIT_NAMES: [&str; 5] = ["backbone-pretrain", "stage1", "stage2", "stage3", "test"];

/// The five standard splits with disjoint seed ranges derived from `seed`.
pub fn default_splits(seed: u64, cfg: &DataConfig) -> Vec<SplitSpec> {
    let base = seed.wrapping_mul(SEED_BLOCK * 10);
    let kinds = [
        (SplitKind::Singles { abnormal_prob: cfg.abnormal_prob }, cfg.backbone_pretrain),
        (SplitKind::Singles { abnormal_prob: cfg.abnormal_prob }, cfg.stage1),
        (SplitKind::Pairs, cfg.stage2),
        (SplitKind::Singles { abnormal_prob: cfg.stage3_abnormal_prob }, cfg.stage3),
        (
            SplitKind::Mixed { singles: cfg.test_singles, abnormal_prob: cfg.abnormal_prob },
            cfg.test_singles + cfg.test_pairs,
        ),
    ];
    SPLIT_NAMES
        .iter()
        .zip(kinds)
        .enumerate()
        .map(|(k, (name, (kind, count)))| SplitSpec {
            name: name.to_string(),
            kind,
            seed_start: base.wrapping_add(k as u64 * SEED_BLOCK),
            count,
        })
        .collect()
}

/// Rejects duplicate names and overlapping seed ranges.
pub fn validate_splits(splits: &[SplitSpec]) -> Result<()> {
    for (i, a) in splits.iter().enumerate() {
        if let SplitKind::Mixed { singles, .. } = a.kind {
            if singles > a.count {
                return Err(Error::Config(format!("split `{}` has more singles than samples", a.name)));
            }
        }
        for b in &splits[i + 1..] {
            if a.name == b.name {
                return Err(Error::Config(format!("split `{}` listed twice", a.name)));
            }
            let (ra, rb) = (a.seed_range(), b.seed_range());
            if ra.start < rb.end && rb.start < ra.end {
                return Err(Error::Config(format!(
                    "seed ranges of splits `{}` ({}..{}) and `{}` ({}..{}) overlap",
                    a.name, ra.start, ra.end, b.name, rb.start, rb.end
                )));
            }
        }
    }
    Ok(())
}

pub fn generate_split(spec: &SplitSpec, cfg: &DataConfig, size: usize) -> Vec<SyntheticSample> {
    (0..spec.count)
        .map(|i| {
            let seed = spec.seed_start + i as u64;
            match spec.kind {
                SplitKind::Singles { abnormal_prob } => gen_single(seed, abnormal_prob, cfg, size),
                SplitKind::Pairs => gen_pair(seed, Progression::ALL[i % 3], cfg, size, true),
                SplitKind::Mixed { singles, abnormal_prob } => {
                    if i < singles {
                        gen_single(seed, abnormal_prob, cfg, size)
                    } else {
                        gen_pair(seed, Progression::ALL[(i - singles) % 3], cfg, size, true)
                    }
                }
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub file: String,
    pub kind: SplitKind,
    pub count: usize,
    pub seed_start: u64,
    pub seed_end: u64,
    pub singles: usize,
    pub pairs: usize,
    pub abnormal: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub image_size: usize,
    pub data: DataConfig,
    pub splits: Vec<SplitEntry>,
}

/// An in-memory corpus keyed by split name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub splits: BTreeMap<String, Vec<SyntheticSample>>,
}

impl Corpus {
    pub fn generate(specs: &[SplitSpec], cfg: &DataConfig, size: usize) -> Result<Self> {
        validate_splits(specs)?;
        let splits = specs.iter().map(|s| (s.name.clone(), generate_split(s, cfg, size))).collect();
        Ok(Self { splits })
    }

    pub fn split(&self, name: &str) -> Result<&[SyntheticSample]> {
        self.splits
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::MissingPrerequisite(format!("corpus has no `{name}` split")))
    }
}

pub fn encode_split(samples: &[SyntheticSample], size: usize) -> Vec<u8> {
    let mut records: Vec<Vec<u8>> = Vec::with_capacity(samples.len());
    for s in samples {
        let mut r = Vec::new();
        r.extend_from_slice(&s.seed.to_le_bytes());
        r.push(s.images.len() as u8);
        r.push(u8::from(s.label == Label::Abnormal));
        r.push(s.progression.map_or(255, |p| p.code()));
        r.extend_from_slice(&s.nuisance.brightness.to_le_bytes());
        r.push(s.nuisance.dx as u8);
        r.push(s.nuisance.dy as u8);
        for img in &s.images {
            for v in img.pixels() {
                r.extend_from_slice(&v.to_le_bytes());
            }
        }
        for m in &s.masks {
            r.extend_from_slice(m.bits());
        }
        for text in [&s.qa.question, &s.qa.answer] {
            r.extend_from_slice(&(text.len() as u32).to_le_bytes());
            r.extend_from_slice(text.as_bytes());
        }
        records.push(r);
    }
    let header_len = 4 + 4 + 4 + 2 + 2 + 8 * samples.len();
    let mut out = Vec::with_capacity(header_len + records.iter().map(Vec::len).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    out.extend_from_slice(&(size as u16).to_le_bytes());
    out.extend_from_slice(&(size as u16).to_le_bytes());
    let mut offset = header_len as u64;
    for r in &records {
        out.extend_from_slice(&offset.to_le_bytes());
        offset += r.len() as u64;
    }
    for r in records {
        out.extend_from_slice(&r);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated record")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> std::result::Result<f32, String> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn text(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "non utf-8 text".to_string())
    }
}

pub fn decode_split(bytes: &[u8]) -> std::result::Result<Vec<SyntheticSample>, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = r.u32()? as usize;
    let (h, w) = (r.u16()? as usize, r.u16()? as usize);
    let offsets: Vec<u64> = (0..count).map(|_| r.u64()).collect::<std::result::Result<_, _>>()?;
    let mut samples = Vec::with_capacity(count);
    for off in offsets {
        let mut r = Reader { buf: bytes, pos: usize::try_from(off).map_err(|_| "offset overflow")? };
        let seed = r.u64()?;
        let n = r.u8()? as usize;
        if n != 1 && n != 2 {
            return Err(format!("record with {n} images"));
        }
        let label = if r.u8()? == 1 { Label::Abnormal } else { Label::Normal };
        let prog_code = r.u8()?;
        let progression = if prog_code == 255 {
            None
        } else {
            Some(Progression::from_code(prog_code).ok_or("bad progression code")?)
        };
        let nuisance = Nuisance { brightness: r.f32()?, dx: r.u8()? as i8, dy: r.u8()? as i8 };
        let mut images = Vec::with_capacity(n);
        for _ in 0..n {
            let px: Vec<f32> = (0..h * w).map(|_| r.f32()).collect::<std::result::Result<_, _>>()?;
            images.push(ImageTensor::new(h, w, px).map_err(|e| e.to_string())?);
        }
        let mut masks = Vec::with_capacity(n);
        for _ in 0..n {
            masks.push(Mask::new(h, w, r.take(h * w)?.to_vec()).map_err(|e| e.to_string())?);
        }
        let qa = QaPair { question: r.text()?, answer: r.text()? };
        samples.push(SyntheticSample { seed, images, masks, label, progression, nuisance, qa });
    }
    Ok(samples)
}

/// Writes every split plus `manifest.json` into `dir` (created if missing).
pub fn write_corpus(
    dir: &Path,
    seed: u64,
    specs: &[SplitSpec],
    cfg: &DataConfig,
    size: usize,
    overwrite: bool,
) -> Result<Manifest> {
    validate_splits(specs)?;
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() && !overwrite {
        return Err(Error::Exists(manifest_path.display().to_string()));
    }
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for spec in specs {
        let samples = generate_split(spec, cfg, size);
        let bytes = encode_split(&samples, size);
        let file = format!("{}.bin", spec.name);
        let mut f = std::fs::File::create(dir.join(&file))?;
        f.write_all(&bytes)?;
        entries.push(SplitEntry {
            name: spec.name.clone(),
            file,
            kind: spec.kind,
            count: samples.len(),
            seed_start: spec.seed_start,
            seed_end: spec.seed_start + spec.count as u64,
            singles: samples.iter().filter(|s| !s.is_pair()).count(),
            pairs: samples.iter().filter(|s| s.is_pair()).count(),
            abnormal: samples.iter().filter(|s| s.label == Label::Abnormal).count(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let manifest = Manifest { format_version: VERSION, seed, image_size: size, data: cfg.clone(), splits: entries };
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Loads a corpus written by [`write_corpus`], verifying split hashes.
pub fn read_corpus(dir: &Path) -> Result<(Manifest, Corpus)> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingPrerequisite(format!("no corpus manifest at {}", manifest_path.display())));
    }
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    let mut corpus = Corpus::default();
    for e in &manifest.splits {
        let path = dir.join(&e.file);
        let bytes = std::fs::read(&path)?;
        let fmt_err = |reason: String| Error::Format { path: path.display().to_string(), reason };
        if hex::encode(Sha256::digest(&bytes)) != e.sha256 {
            return Err(fmt_err("hash does not match manifest".into()));
        }
        corpus.splits.insert(e.name.clone(), decode_split(&bytes).map_err(fmt_err)?);
    }
    Ok((manifest, corpus))
}
