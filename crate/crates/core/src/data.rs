//! Two-domain synthetic cardiac-like benchmark and the on-disk dataset format.
//!
//! Layout: `<root>/<split>/manifest.json`, `<root>/<split>/images/<id>.png`
//! (16-bit grayscale) and `<root>/<split>/labels/<id>.png` (8-bit class
//! indices). See `docs/dataset-format.md`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::{io_err, Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u64 = 1;

/// Number of distinct anatomy layouts the generator can draw.
pub const MAX_VARIANTS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SourceTrain,
    SourceVal,
    TargetTrain,
    TargetVal,
    TargetTest,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::SourceTrain,
        Split::SourceVal,
        Split::TargetTrain,
        Split::TargetVal,
        Split::TargetTest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::SourceVal => "source_val",
            Split::TargetTrain => "target_train",
            Split::TargetVal => "target_val",
            Split::TargetTest => "target_test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::SourceTrain | Split::SourceVal => Domain::Source,
            _ => Domain::Target,
        }
    }

    /// Target training images are written without labels.
    pub fn labelled(self) -> bool {
        self != Split::TargetTrain
    }
}

/// One 2-D slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    pub domain: Domain,
    pub height: usize,
    pub width: usize,
    /// Row-major intensities in `[0, 1]`.
    pub image: Vec<f32>,
    /// Row-major class indices, absent for unlabelled images.
    pub label: Option<Vec<u8>>,
    /// `(row, column)` pixel spacing in mm.
    pub spacing: (f64, f64),
}

/// Per-domain intensity model. Tissue intensities are mapped through
/// `t -> t^gamma`, optionally inverted (`1 - t`), then multiplied by a smooth
/// bias field and corrupted by Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityMap {
    pub gamma: f64,
    pub invert: bool,
    pub noise_std: f64,
    pub bias_amplitude: f64,
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub size: usize,
    pub num_classes: usize,
    pub variants: usize,
    pub source: IntensityMap,
    pub target: IntensityMap,
    /// Peak elastic displacement as a fraction of the image side.
    pub elastic_amplitude: f64,
    pub spacing_mm: f64,
    pub source_train: usize,
    pub source_val: usize,
    pub target_train: usize,
    pub target_val: usize,
    pub target_test: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            size: 64,
            num_classes: 3,
            variants: 4,
            source: IntensityMap {
                gamma: 1.0,
                invert: false,
                noise_std: 0.03,
                bias_amplitude: 0.1,
            },
            target: IntensityMap {
                gamma: 1.6,
                invert: true,
                noise_std: 0.05,
                bias_amplitude: 0.25,
            },
            elastic_amplitude: 0.03,
            spacing_mm: 1.5,
            source_train: 200,
            source_val: 25,
            target_train: 200,
            target_val: 25,
            target_test: 50,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::SourceTrain => self.source_train,
            Split::SourceVal => self.source_val,
            Split::TargetTrain => self.target_train,
            Split::TargetVal => self.target_val,
            Split::TargetTest => self.target_test,
        }
    }

    pub fn intensity(&self, domain: Domain) -> &IntensityMap {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.size < 8 {
            v.push(format!("generator size {} must be >= 8", self.size));
        }
        if self.num_classes != 3 {
            v.push(format!("the synthetic anatomy has exactly 3 foreground classes, got {}", self.num_classes));
        }
        if self.variants == 0 || self.variants > MAX_VARIANTS {
            v.push(format!("variants = {} must be in 1..={MAX_VARIANTS}", self.variants));
        }
        for s in Split::ALL {
            if self.count(s) == 0 {
                v.push(format!("{} count must be >= 1", s.name()));
            }
        }
        for (name, m) in [("source", &self.source), ("target", &self.target)] {
            if !(m.gamma > 0.0) {
                v.push(format!("{name} gamma must be > 0"));
            }
            if !(m.noise_std >= 0.0) || !(m.bias_amplitude >= 0.0) || m.bias_amplitude >= 1.0 {
                v.push(format!("{name} noise must be >= 0 and bias amplitude in [0, 1)"));
            }
        }
        if !(self.elastic_amplitude >= 0.0) || !(self.spacing_mm > 0.0) {
            v.push("elastic amplitude must be >= 0 and spacing > 0".into());
        }
        v
    }
}

/// Geometric description of one synthetic slice, in normalized coordinates
/// `[-1, 1]^2` (x to the right, y downward).
#[derive(Clone, Debug, PartialEq)]
pub struct Anatomy {
    pub variant: usize,
    pub center: (f64, f64),
    pub rotation: f64,
    pub lv_radii: (f64, f64),
    pub myo_thickness: f64,
    pub rv_scale: f64,
    pub torso_radii: (f64, f64),
    /// Low-frequency elastic field: `(kx, ky, phase, amp_x, amp_y)` terms.
    pub elastic: Vec<(f64, f64, f64, f64, f64)>,
}

/// Tissue classes rendered into the image (background and torso are both
/// label 0).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tissue {
    Air,
    Torso,
    Lv,
    Myo,
    Rv,
}

impl Tissue {
    fn label(self) -> u8 {
        match self {
            Tissue::Air | Tissue::Torso => 0,
            Tissue::Lv => 1,
            Tissue::Myo => 2,
            Tissue::Rv => 3,
        }
    }

    fn intensity(self) -> f64 {
        match self {
            Tissue::Air => 0.05,
            Tissue::Torso => 0.3,
            Tissue::Lv => 0.9,
            Tissue::Myo => 0.5,
            Tissue::Rv => 0.75,
        }
    }
}

pub fn sample_anatomy<R: Rng>(cfg: &GeneratorConfig, rng: &mut R) -> Anatomy {
    let variant = rng.random_range(0..cfg.variants);
    let amp = cfg.elastic_amplitude * 2.0;
    let elastic = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..2.0) * std::f64::consts::PI,
                rng.random_range(0.5..2.0) * std::f64::consts::PI,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(-amp..amp),
                rng.random_range(-amp..amp),
            )
        })
        .collect();
    Anatomy {
        variant,
        center: (rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06)),
        rotation: rng.random_range(-0.35..0.35),
        lv_radii: (rng.random_range(0.25..0.32), rng.random_range(0.25..0.32)),
        myo_thickness: rng.random_range(0.13..0.17),
        rv_scale: rng.random_range(0.9..1.1),
        torso_radii: (rng.random_range(0.9..0.98), rng.random_range(0.82..0.95)),
        elastic,
    }
}

fn ellipse(p: (f64, f64), c: (f64, f64), r: (f64, f64), rot: f64) -> f64 {
    let (dx, dy) = (p.0 - c.0, p.1 - c.1);
    let (s, co) = rot.sin_cos();
    let u = co * dx + s * dy;
    let v = -s * dx + co * dy;
    (u / r.0).powi(2) + (v / r.1).powi(2)
}

impl Anatomy {
    /// Tissue at normalized position `p` (before elastic deformation).
    fn tissue(&self, p: (f64, f64)) -> Tissue {
        let c = self.center;
        let rot = self.rotation;
        let (a, b) = self.lv_radii;
        let t = self.myo_thickness;
        let lv = ellipse(p, c, (a, b), rot);
        if lv <= 1.0 {
            return Tissue::Lv;
        }
        if ellipse(p, c, (a + t, b + t), rot) <= 1.0 {
            return Tissue::Myo;
        }
        // RV: an ellipse beside the heart, minus the dilated LV/myo region.
        let (dir, rv_r) = match self.variant {
            0 => ((-1.0, 0.0), (0.24, 0.44)),
            1 => ((1.0, 0.0), (0.24, 0.44)),
            2 => ((0.0, -1.0), (0.44, 0.24)),
            3 => ((-0.7, -0.7), (0.3, 0.5)),
            _ => ((0.0, 1.0), (0.44, 0.24)),
        };
        let (s, co) = rot.sin_cos();
        let off = a.max(b) + t + 0.1;
        let d = (co * dir.0 - s * dir.1, s * dir.0 + co * dir.1);
        let rc = (c.0 + d.0 * off, c.1 + d.1 * off);
        let rv_r = (rv_r.0 * self.rv_scale, rv_r.1 * self.rv_scale);
        let rv = ellipse(p, rc, rv_r, rot);
        let gap = 0.02;
        if rv <= 1.0 && ellipse(p, c, (a + t + gap, b + t + gap), rot) > 1.0 {
            return Tissue::Rv;
        }
        if ellipse(p, (0.0, 0.0), self.torso_radii, 0.0) <= 1.0 {
            Tissue::Torso
        } else {
            Tissue::Air
        }
    }

    fn warped_tissue(&self, p: (f64, f64)) -> Tissue {
        let (mut ux, mut uy) = (0.0, 0.0);
        for &(kx, ky, ph, ax, ay) in &self.elastic {
            let s = (kx * p.0 + ky * p.1 + ph).sin();
            ux += ax * s;
            uy += ay * s;
        }
        self.tissue((p.0 + ux, p.1 + uy))
    }

    fn tissue_map(&self, size: usize) -> Vec<Tissue> {
        let mut out = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                let x = (j as f64 + 0.5) / size as f64 * 2.0 - 1.0;
                let y = (i as f64 + 0.5) / size as f64 * 2.0 - 1.0;
                out.push(self.warped_tissue((x, y)));
            }
        }
        out
    }

    pub fn label_map(&self, size: usize) -> Vec<u8> {
        self.tissue_map(size).into_iter().map(Tissue::label).collect()
    }
}

/// Renders the anatomy under a domain's intensity model, min-max normalized
/// and quantized to 16 bits.
pub fn render_image<R: Rng>(anatomy: &Anatomy, size: usize, map: &IntensityMap, rng: &mut R) -> Vec<f32> {
    let tissues = anatomy.tissue_map(size);
    let bias_dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let bias_curv: f64 = rng.random_range(-1.0..1.0);
    let noise = Normal::new(0.0, map.noise_std.max(0.0)).expect("valid noise");
    let mut img: Vec<f64> = Vec::with_capacity(size * size);
    for (k, t) in tissues.iter().enumerate() {
        let (i, j) = (k / size, k % size);
        let x = (j as f64 + 0.5) / size as f64 * 2.0 - 1.0;
        let y = (i as f64 + 0.5) / size as f64 * 2.0 - 1.0;
        let mut v = t.intensity().powf(map.gamma);
        if map.invert {
            v = 1.0 - v;
        }
        let ramp = bias_dir.cos() * x + bias_dir.sin() * y;
        let bias = 1.0 + map.bias_amplitude * (0.7 * ramp + 0.3 * bias_curv * (x * x + y * y - 0.5));
        v *= bias;
        if map.noise_std > 0.0 {
            v += noise.sample(rng);
        }
        img.push(v);
    }
    quantize(&normalize_min_max(&img))
}

fn normalize_min_max(img: &[f64]) -> Vec<f64> {
    let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-12) {
        return vec![0.0; img.len()];
    }
    img.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn quantize(img: &[f64]) -> Vec<f32> {
    img.iter()
        .map(|&v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16) as f32 / 65535.0)
        .collect()
}

fn split_rng(seed: u64, split: Split) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split as u64 + 1);
    rng
}

/// Samples of one split, in memory.
pub fn generate_split(cfg: &GeneratorConfig, split: Split) -> Vec<Sample> {
    let mut rng = split_rng(cfg.seed, split);
    let domain = split.domain();
    let spacing = cfg.spacing_mm * 64.0 / cfg.size as f64;
    (0..cfg.count(split))
        .map(|i| {
            let anatomy = sample_anatomy(cfg, &mut rng);
            let image = render_image(&anatomy, cfg.size, cfg.intensity(domain), &mut rng);
            Sample {
                subject_id: format!("{}_{i:04}", split.name()),
                domain,
                height: cfg.size,
                width: cfg.size,
                image,
                label: split.labelled().then(|| anatomy.label_map(cfg.size)),
                spacing: (spacing, spacing),
            }
        })
        .collect()
}

#[derive(Serialize)]
struct ManifestOut<'a> {
    version: u64,
    split: &'a str,
    samples: Vec<EntryOut<'a>>,
}

#[derive(Serialize)]
struct EntryOut<'a> {
    subject_id: &'a str,
    domain: Domain,
    split: &'a str,
    spacing_mm: [f64; 2],
    height: usize,
    width: usize,
    image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

/// Writes every split of the benchmark below `root`.
pub fn generate(cfg: &GeneratorConfig, root: &Path) -> Result<()> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Validation(v));
    }
    for split in Split::ALL {
        write_split(&root.join(split.name()), split.name(), &generate_split(cfg, split))?;
    }
    Ok(())
}

/// Writes samples plus a manifest into `dir`.
pub fn write_split(dir: &Path, split: &str, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir.join("images")).map_err(io_err(dir))?;
    if samples.iter().any(|s| s.label.is_some()) {
        fs::create_dir_all(dir.join("labels")).map_err(io_err(dir))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let image = format!("images/{}.png", s.subject_id);
        let pixels: Vec<u16> = s.image.iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
        write_png16(&dir.join(&image), s.width, s.height, &pixels)?;
        let label = match &s.label {
            Some(l) => {
                let name = format!("labels/{}.png", s.subject_id);
                write_png8(&dir.join(&name), s.width, s.height, l)?;
                Some(name)
            }
            None => None,
        };
        entries.push(EntryOut {
            subject_id: &s.subject_id,
            domain: s.domain,
            split,
            spacing_mm: [s.spacing.0, s.spacing.1],
            height: s.height,
            width: s.width,
            image,
            label,
        });
    }
    let m = ManifestOut {
        version: MANIFEST_VERSION,
        split,
        samples: entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

fn png_err(path: &Path) -> impl Fn(png::EncodingError) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

fn write_png16(path: &Path, w: usize, h: usize, px: &[u16]) -> Result<()> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(f), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut wr = enc.write_header().map_err(png_err(path))?;
    let bytes: Vec<u8> = px.iter().flat_map(|v| v.to_be_bytes()).collect();
    wr.write_image_data(&bytes).map_err(png_err(path))
}

pub fn write_png8(path: &Path, w: usize, h: usize, px: &[u8]) -> Result<()> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(f), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut wr = enc.write_header().map_err(png_err(path))?;
    wr.write_image_data(px).map_err(png_err(path))
}

/// Decoded grayscale PNG: `(width, height, bit depth, samples)`.
fn read_png(path: &Path) -> Result<(usize, usize, u8, Vec<u16>)> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let dec = png::Decoder::new(std::io::BufReader::new(f));
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::Data(format!("{}: expected a grayscale PNG", path.display())));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let (depth, px) = match info.bit_depth {
        png::BitDepth::Eight => (8, bytes.iter().map(|&b| b as u16).collect()),
        png::BitDepth::Sixteen => (16, bytes.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()),
        other => return Err(Error::Data(format!("{}: unsupported bit depth {other:?}", path.display()))),
    };
    Ok((w, h, depth, px))
}

fn schema(path: &Path, field: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        field: field.to_string(),
        message: message.into(),
    }
}

fn field<'a>(obj: &'a Value, path: &Path, name: &str) -> Result<&'a Value> {
    obj.get(name).ok_or_else(|| schema(path, name, "missing"))
}

fn entry_str<'a>(e: &'a Value, path: &Path, i: usize, name: &str) -> Result<&'a str> {
    e.get(name)
        .and_then(Value::as_str)
        .ok_or_else(|| schema(path, &format!("samples[{i}].{name}"), "missing or not a string"))
}

/// Loads and validates one split directory.
pub fn load_split(dir: &Path) -> Result<Vec<Sample>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let root: Value = serde_json::from_str(&text).map_err(|e| schema(&path, "<document>", e.to_string()))?;
    let version = field(&root, &path, "version")?
        .as_u64()
        .ok_or_else(|| schema(&path, "version", "expected an integer"))?;
    if version != MANIFEST_VERSION {
        return Err(schema(&path, "version", format!("unsupported version {version}")));
    }
    let entries = field(&root, &path, "samples")?
        .as_array()
        .ok_or_else(|| schema(&path, "samples", "expected an array"))?;
    let mut out = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let at = |f: &str| format!("samples[{i}].{f}");
        let subject_id = entry_str(e, &path, i, "subject_id")?.to_string();
        let domain = match entry_str(e, &path, i, "domain")? {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => return Err(schema(&path, &at("domain"), format!("unknown domain `{other}`"))),
        };
        entry_str(e, &path, i, "split")?;
        let spacing = e
            .get("spacing_mm")
            .and_then(Value::as_array)
            .filter(|a| a.len() == 2)
            .and_then(|a| Some((a[0].as_f64()?, a[1].as_f64()?)))
            .filter(|s| s.0 > 0.0 && s.1 > 0.0)
            .ok_or_else(|| schema(&path, &at("spacing_mm"), "expected two positive numbers"))?;
        let dim = |f: &str| {
            e.get(f)
                .and_then(Value::as_u64)
                .filter(|&v| v > 0)
                .map(|v| v as usize)
                .ok_or_else(|| schema(&path, &at(f), "expected a positive integer"))
        };
        let (height, width) = (dim("height")?, dim("width")?);
        let image_rel = entry_str(e, &path, i, "image")?;
        let (w, h, depth, px) = read_png(&dir.join(image_rel))?;
        if (w, h) != (width, height) {
            return Err(Error::Data(format!("{image_rel}: size {w}x{h}, manifest says {width}x{height}")));
        }
        let max = if depth == 16 { 65535.0 } else { 255.0 };
        let image = px.iter().map(|&v| v as f32 / max).collect();
        let label = match e.get("label") {
            None | Some(Value::Null) => None,
            Some(Value::String(rel)) => {
                let (lw, lh, ld, lp) = read_png(&dir.join(rel))?;
                if (lw, lh) != (width, height) || ld != 8 {
                    return Err(Error::Data(format!("{rel}: label map must be 8-bit {width}x{height}")));
                }
                Some(lp.into_iter().map(|v| v as u8).collect())
            }
            Some(_) => return Err(schema(&path, &at("label"), "expected a string")),
        };
        if domain == Domain::Source && label.is_none() {
            return Err(Error::Data(format!("source sample `{subject_id}` has no label")));
        }
        out.push(Sample {
            subject_id,
            domain,
            height,
            width,
            image,
            label,
            spacing,
        });
    }
    Ok(out)
}

/// All splits found below `root`, keyed by directory name. A directory
/// without any manifest yields an empty map and a warning.
pub fn load_dataset(root: &Path) -> Result<BTreeMap<String, Vec<Sample>>> {
    let mut out = BTreeMap::new();
    if root.join(MANIFEST).is_file() {
        let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        out.insert(name, load_split(root)?);
        return Ok(out);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        log::warn!("no dataset manifests found under {}", root.display());
    }
    for d in dirs {
        let name = d.file_name().expect("directory entry").to_string_lossy().into_owned();
        out.insert(name, load_split(&d)?);
    }
    Ok(out)
}

/// SHA-256 over every file inside the split directories below `root`, in
/// sorted path order. Files at the top level (run manifests) are ignored.
pub fn dataset_checksum(root: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for e in walkdir::WalkDir::new(root).min_depth(2).sort_by_file_name() {
        let e = e.map_err(|e| Error::Data(format!("walking {}: {e}", root.display())))?;
        if !e.file_type().is_file() {
            continue;
        }
        let f = e.path();
        h.update(f.strip_prefix(root).unwrap_or(f).to_string_lossy().as_bytes());
        h.update(fs::read(f).map_err(io_err(f))?);
    }
    Ok(hex::encode(h.finalize()))
}

/// Resamples `image` (`h x w`, spacing `(sy, sx)` mm) to `target` spacing,
/// center-crops or zero-pads to `crop x crop`, and min-max normalizes.
pub fn preprocess(
    image: &[f32],
    h: usize,
    w: usize,
    spacing: (f64, f64),
    target: (f64, f64),
    crop: usize,
) -> Result<Vec<f32>> {
    if !(spacing.0 > 0.0 && spacing.1 > 0.0 && target.0 > 0.0 && target.1 > 0.0) {
        return Err(Error::Domain("pixel spacings must be positive".into()));
    }
    if image.len() != h * w {
        return Err(Error::Dimension(format!("{} pixels for {h}x{w}", image.len())));
    }
    let nh = ((h as f64 * spacing.0 / target.0).round() as usize).max(1);
    let nw = ((w as f64 * spacing.1 / target.1).round() as usize).max(1);
    let src = anatomix_tensor::Tensor::<f32>::new(image.to_vec(), &[1, 1, h, w]);
    let res = src.resize_bilinear(nh, nw);
    let r = res.data();
    let mut out = vec![0.0f64; crop * crop];
    let (oy, ox) = (nh as isize - crop as isize, nw as isize - crop as isize);
    let (sy, sx) = (oy.div_euclid(2), ox.div_euclid(2));
    for i in 0..crop {
        for j in 0..crop {
            let (y, x) = (i as isize + sy, j as isize + sx);
            if y >= 0 && x >= 0 && (y as usize) < nh && (x as usize) < nw {
                out[i * crop + j] = r[y as usize * nw + x as usize] as f64;
            }
        }
    }
    let lo = out.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-12) {
        log::warn!("constant image normalized to zeros");
        return Ok(vec![0.0; crop * crop]);
    }
    Ok(out.iter().map(|v| ((v - lo) / (hi - lo)) as f32).collect())
}
