//! Dataset handling: the seeded synthetic corpus generator, JSONL
//! ingestion, and split logic.
//!
//! The generator reproduces the data pathologies the model is built for:
//! near-identical normal images with one formulaic shared report, rarer
//! abnormal classes marked by a geometric blob plus a class-specific
//! report, and partially redundant tag bits.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::TagVector;
use crate::encoder::ImageGrid;
use crate::error::{Error, Result};

/// One training triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageGrid,
    pub report: String,
    pub tags: TagVector,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassTemplate {
    /// word that must appear in every report of this class
    pub keyword: String,
    /// report text with a `{size}` placeholder
    pub template: String,
    /// sets the shared redundant marker bit
    pub marker: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TemplateBank {
    pub normal: String,
    pub classes: Vec<ClassTemplate>,
}

impl Default for TemplateBank {
    fn default() -> Self {
        TemplateBank {
            normal: "the lungs are clear and the heart size is normal . no acute abnormality is seen .".into(),
            classes: vec![
                ClassTemplate {
                    keyword: "opacity".into(),
                    template: "there is a {size} round opacity in the left upper zone . the remaining lung fields are clear .".into(),
                    marker: false,
                },
                ClassTemplate {
                    keyword: "band".into(),
                    template: "a {size} linear band projects over the midline . the heart border is preserved .".into(),
                    marker: false,
                },
                ClassTemplate {
                    keyword: "ring".into(),
                    template: "a {size} ring shadow is present in the right lower zone . degenerative changes are noted .".into(),
                    marker: true,
                },
                ClassTemplate {
                    keyword: "calcification".into(),
                    template: "a {size} stellate calcification overlies the right upper zone . the lungs are otherwise grossly clear .".into(),
                    marker: true,
                },
            ],
        }
    }
}

impl TemplateBank {
    /// Tag layout: [normal, one bit per class, shared marker if any class
    /// sets it].
    pub fn tag_count(&self) -> usize {
        1 + self.classes.len() + usize::from(self.classes.iter().any(|c| c.marker))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_samples: usize,
    #[serde(default = "default_abnormal_fraction")]
    pub abnormal_fraction: f64,
    /// tag vector length C
    #[serde(default = "default_tag_classes")]
    pub tag_classes: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub templates: Option<TemplateBank>,
}

fn default_abnormal_fraction() -> f64 {
    0.2
}
fn default_tag_classes() -> usize {
    6
}
fn default_image_size() -> usize {
    32
}
fn default_noise() -> f64 {
    0.02
}
fn default_split() -> [f64; 3] {
    [0.7, 0.1, 0.2]
}

impl CorpusSpec {
    pub fn bank(&self) -> TemplateBank {
        self.templates.clone().unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.abnormal_fraction) {
            return Err(Error::Config(format!(
                "abnormal_fraction must be in [0, 1], got {}",
                self.abnormal_fraction
            )));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size {} too small", self.image_size)));
        }
        let bank = self.bank();
        if self.tag_classes != bank.tag_count() {
            return Err(Error::Config(format!(
                "tag_classes {} does not match template bank layout ({} needed)",
                self.tag_classes,
                bank.tag_count()
            )));
        }
        if (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios must sum to 1, got {:?}", self.split)));
        }
        if self.split.iter().any(|&r| r < 0.0) {
            return Err(Error::Config("split ratios must be nonnegative".into()));
        }
        Ok(())
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn paint_background(size: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = size as f64;
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let base = 0.25 + 0.20 * (x as f64 / s) + 0.15 * (y as f64 / s);
            let n = noise * rng.gen_range(-1.0..1.0);
            px.push((base + n).clamp(0.0, 1.0));
        }
    }
    px
}

fn paint_blob(px: &mut [f64], size: usize, class: usize, large: bool) {
    let s = size as f64;
    let add = |px: &mut [f64], x: usize, y: usize| {
        let v = &mut px[y * size + x];
        *v = (*v + 0.55).min(1.0);
    };
    match class {
        // filled disc, upper left
        0 => {
            let (cx, cy) = (0.30 * s, 0.30 * s);
            let r = if large { 0.16 * s } else { 0.08 * s };
            for y in 0..size {
                for x in 0..size {
                    let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    if d <= r {
                        add(px, x, y);
                    }
                }
            }
        }
        // vertical band over the midline
        1 => {
            let half = if large { 0.06 * s } else { 0.03 * s };
            let cx = 0.5 * s;
            for y in 0..size {
                for x in 0..size {
                    if (x as f64 - cx).abs() <= half {
                        add(px, x, y);
                    }
                }
            }
        }
        // ring, lower right
        2 => {
            let (cx, cy) = (0.68 * s, 0.68 * s);
            let r = if large { 0.18 * s } else { 0.10 * s };
            let thickness = 0.045 * s;
            for y in 0..size {
                for x in 0..size {
                    let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    if (d - r).abs() <= thickness {
                        add(px, x, y);
                    }
                }
            }
        }
        // cross, upper right
        _ => {
            let (cx, cy) = (0.70 * s, 0.30 * s);
            let arm = if large { 0.18 * s } else { 0.10 * s };
            let half = 0.04 * s;
            for y in 0..size {
                for x in 0..size {
                    let dx = (x as f64 - cx).abs();
                    let dy = (y as f64 - cy).abs();
                    if (dx <= half && dy <= arm) || (dy <= half && dx <= arm) {
                        add(px, x, y);
                    }
                }
            }
        }
    }
}

/// Deterministic synthetic corpus: byte-identical across runs with the
/// same spec and seed.
pub fn generate(spec: &CorpusSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let bank = spec.bank();
    let n_classes = bank.classes.len();
    let marker_idx = spec.tag_classes - 1;
    let mut samples = Vec::with_capacity(spec.num_samples);
    for i in 0..spec.num_samples {
        let mut rng = sample_rng(spec.seed, i);
        let abnormal = rng.gen_bool(spec.abnormal_fraction);
        let mut px = paint_background(spec.image_size, spec.noise, &mut rng);
        let mut tags = vec![0u8; spec.tag_classes];
        let report;
        if abnormal {
            let class = rng.gen_range(0..n_classes);
            let large = rng.gen_bool(0.5);
            paint_blob(&mut px, spec.image_size, class, large);
            let tpl = &bank.classes[class];
            report = tpl.template.replace("{size}", if large { "large" } else { "small" });
            tags[1 + class] = 1;
            if tpl.marker {
                tags[marker_idx] = 1;
            }
        } else {
            report = bank.normal.clone();
            tags[0] = 1;
        }
        samples.push(Sample {
            id: format!("s{i:05}"),
            image: ImageGrid::new(spec.image_size, spec.image_size, px)?,
            report,
            tags: TagVector(tags),
        });
    }
    Ok(samples)
}

// ── JSONL dataset format ─────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct RawImage {
    h: usize,
    w: usize,
    px: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawRow {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    image: Option<RawImage>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    image_path: Option<String>,
    report: String,
    tags: Vec<u8>,
}

pub fn save_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        let row = RawRow {
            id: s.id.clone(),
            image: Some(RawImage {
                h: s.image.height,
                w: s.image.width,
                px: s.image.pixels.clone(),
            }),
            image_path: None,
            report: s.report.clone(),
            tags: s.tags.0.clone(),
        };
        let _ = writeln!(out, "{}", serde_json::to_string(&row)?);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parses and validates a dataset file. Row-level problems are aggregated
/// into one error listing every offending line.
pub fn load_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::new();
    let mut problems: Vec<String> = Vec::new();
    let mut tag_len: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row: RawRow = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("line {line_no}: {e}"));
                continue;
            }
        };
        if row.report.trim().is_empty() {
            problems.push(format!("line {line_no}: empty report"));
            continue;
        }
        let expected = *tag_len.get_or_insert(row.tags.len());
        let tags = TagVector(row.tags);
        if let Err(e) = tags.validate(expected) {
            problems.push(format!("line {line_no}: {e}"));
            continue;
        }
        let image = if let Some(rel) = &row.image_path {
            match ImageGrid::from_pgm(&dir.join(rel)) {
                Ok(img) => img,
                Err(e) => {
                    problems.push(format!("line {line_no}: {e}"));
                    continue;
                }
            }
        } else if let Some(raw) = row.image {
            match ImageGrid::new(raw.h, raw.w, raw.px) {
                Ok(img) => img,
                Err(e) => {
                    problems.push(format!("line {line_no}: {e}"));
                    continue;
                }
            }
        } else {
            problems.push(format!("line {line_no}: neither image nor image_path present"));
            continue;
        };
        samples.push(Sample {
            id: row.id,
            image,
            report: row.report,
            tags,
        });
    }
    if !problems.is_empty() {
        return Err(Error::Parse(format!("{}: {}", path.display(), problems.join("; "))));
    }
    Ok(samples)
}

/// Seeded shuffle followed by a contiguous split. The first two ratios
/// floor; the test split takes the remainder.
pub fn split(samples: &[Sample], ratios: [f64; 3], seed: u64) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must sum to 1, got {ratios:?}")));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n = samples.len();
    let n_train = (n as f64 * ratios[0]).floor() as usize;
    let n_val = (n as f64 * ratios[1]).floor() as usize;
    let take = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok((train, val, test))
}

#[cfg(test)]
mod tests;
