//! Image decoding, padding, and dataset manifests.
//!
//! Binary PPM (P6, 8-bit) is the normative dependency-free image format;
//! PNG is available behind the `png` feature. Manifests are JSON-lines with
//! paths resolved relative to the manifest file.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::container::pad_dim;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: not a P6 ppm (offset 0)")]
    BadMagic { path: String },
    #[error("{path}: malformed header field at offset {offset}")]
    BadHeader { path: String, offset: usize },
    #[error("{path}: unsupported max value {maxval} (only 255)")]
    BadMaxval { path: String, maxval: u32 },
    #[error("{path}: truncated pixel data at offset {offset} (need {needed} bytes)")]
    Truncated {
        path: String,
        offset: usize,
        needed: usize,
    },
    #[error("{path}: zero dimension")]
    ZeroDim { path: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("unsupported image extension {0:?} (use .ppm{png_hint})", png_hint = if cfg!(feature = "png") { " or .png" } else { "; build with the png feature for .png" })]
    UnsupportedExtension(String),
}

/// 8-bit-sourced RGB image with samples as reals in [0,1], interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), (3 * width * height) as usize);
        Self { width, height, data }
    }

    /// Planar [3, H, W] tensor.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut out = vec![0.0; 3 * w * h];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[c * h * w + y * w + x] = self.data[(y * w + x) * 3 + c];
                }
            }
        }
        Tensor::new(vec![3, h, w], out).expect("sized")
    }

    /// From a planar [3, H, W] tensor, clamping into [0,1].
    pub fn from_tensor(t: &Tensor) -> Self {
        let (h, w) = (t.shape[1], t.shape[2]);
        let mut data = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data[(y * w + x) * 3 + c] = t.data[c * h * w + y * w + x].clamp(0.0, 1.0);
                }
            }
        }
        Self::new(w as u32, h as u32, data)
    }
}

/// Loads an image by extension (.ppm natively, .png behind the feature).
pub fn load_image(path: &Path) -> Result<ImageBuffer, DataError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => load_ppm(path),
        #[cfg(feature = "png")]
        Some("png") => load_png(path),
        other => Err(DataError::UnsupportedExtension(
            other.unwrap_or("").to_string(),
        )),
    }
}

pub fn load_ppm(path: &Path) -> Result<ImageBuffer, DataError> {
    let bytes = std::fs::read(path)?;
    parse_ppm(&bytes, &path.display().to_string())
}

pub fn parse_ppm(bytes: &[u8], path: &str) -> Result<ImageBuffer, DataError> {
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(DataError::BadMagic { path: path.into() });
    }
    let mut pos = 2usize;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // skip whitespace and '#' comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err(DataError::BadHeader { path: path.into(), offset: start });
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits");
        *field = text
            .parse()
            .map_err(|_| DataError::BadHeader { path: path.into(), offset: start })?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(DataError::BadMaxval { path: path.into(), maxval });
    }
    if width == 0 || height == 0 {
        return Err(DataError::ZeroDim { path: path.into() });
    }
    // exactly one whitespace byte separates header from pixels
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(DataError::BadHeader { path: path.into(), offset: pos });
    }
    pos += 1;
    let needed = 3 * width as usize * height as usize;
    if bytes.len() < pos + needed {
        return Err(DataError::Truncated {
            path: path.into(),
            offset: bytes.len(),
            needed: pos + needed - bytes.len(),
        });
    }
    let data = bytes[pos..pos + needed].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(ImageBuffer::new(width, height, data))
}

pub fn save_ppm(path: &Path, img: &ImageBuffer) -> Result<(), DataError> {
    let mut out = std::fs::File::create(path)?;
    write!(out, "P6\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    Ok(())
}

#[cfg(feature = "png")]
fn load_png(path: &Path) -> Result<ImageBuffer, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::Manifest { line: 0, msg: format!("{}: {e}", path.display()) })?
        .to_rgb8();
    let (width, height) = (img.width(), img.height());
    let data = img.into_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Ok(ImageBuffer::new(width, height, data))
}

/// Replicate-pads right/bottom so both extents are multiples of `m`.
/// Returns the padded planar tensor and the original (width, height).
pub fn pad_to_multiple(img: &ImageBuffer, m: u32) -> (Tensor, (u32, u32)) {
    debug_assert_eq!(m, crate::container::PAD_MULTIPLE);
    let (w, h) = (img.width as usize, img.height as usize);
    let (pw, ph) = (pad_dim(img.width) as usize, pad_dim(img.height) as usize);
    let src = img.to_tensor();
    let mut out = vec![0.0; 3 * pw * ph];
    for c in 0..3 {
        for y in 0..ph {
            let sy = y.min(h - 1);
            for x in 0..pw {
                let sx = x.min(w - 1);
                out[c * ph * pw + y * pw + x] = src.data[c * h * w + sy * w + sx];
            }
        }
    }
    (
        Tensor::new(vec![3, ph, pw], out).expect("sized"),
        (img.width, img.height),
    )
}

/// Crops a planar [C,H,W] tensor to its top-left [C, h, w] region.
pub fn crop(t: &Tensor, h: usize, w: usize) -> Tensor {
    let (c, th, tw) = (t.shape[0], t.shape[1], t.shape[2]);
    debug_assert!(h <= th && w <= tw);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let src = &t.data[ch * th * tw + y * tw..ch * th * tw + y * tw + w];
            out[ch * h * w + y * w..ch * h * w + (y + 1) * w].copy_from_slice(src);
        }
    }
    Tensor::new(vec![c, h, w], out).expect("sized")
}

/// Random square crop (falls back to replicate-padding smaller images).
pub fn random_crop(t: &Tensor, size: usize, rng: &mut impl Rng) -> Tensor {
    let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
    if h < size || w < size {
        // grow via edge replication, then crop
        let mut grown = vec![0.0; c * size.max(h) * size.max(w)];
        let (gh, gw) = (size.max(h), size.max(w));
        for ch in 0..c {
            for y in 0..gh {
                let sy = y.min(h - 1);
                for x in 0..gw {
                    let sx = x.min(w - 1);
                    grown[ch * gh * gw + y * gw + x] = t.data[ch * h * w + sy * w + sx];
                }
            }
        }
        return random_crop(&Tensor::new(vec![c, gh, gw], grown).expect("sized"), size, rng);
    }
    let y0 = rng.gen_range(0..=h - size);
    let x0 = rng.gen_range(0..=w - size);
    let mut out = vec![0.0; c * size * size];
    for ch in 0..c {
        for y in 0..size {
            let src = &t.data[ch * h * w + (y0 + y) * w + x0..ch * h * w + (y0 + y) * w + x0 + size];
            out[ch * size * size + y * size..ch * size * size + (y + 1) * size].copy_from_slice(src);
        }
    }
    Tensor::new(vec![c, size, size], out).expect("sized")
}

pub fn hflip(t: &Tensor) -> Tensor {
    let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[ch * h * w + y * w + x] = t.data[ch * h * w + y * w + (w - 1 - x)];
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("sized")
}

// --- manifests -------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ClassRecord {
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct JudgmentPaths {
    pub reference: PathBuf,
    pub p0: PathBuf,
    pub p1: PathBuf,
    /// Fraction of humans preferring p1.
    pub h: f64,
    pub subset: Option<String>,
}

#[derive(Deserialize)]
struct ClassLine {
    path: String,
    label: i64,
}

#[derive(Deserialize)]
struct JudgmentLine {
    #[serde(rename = "ref")]
    reference: String,
    p0: String,
    p1: String,
    h: f64,
    #[serde(default)]
    subset: Option<String>,
}

fn manifest_root(path: &Path) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).to_path_buf()
}

/// Loads a classification manifest ({"path", "label"} per line), validating
/// labels and file existence. Record order is the file order.
pub fn load_class_manifest(
    path: &Path,
    num_classes: usize,
) -> Result<Vec<ClassRecord>, DataError> {
    let root = manifest_root(path);
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ClassLine = serde_json::from_str(line)
            .map_err(|e| DataError::Manifest { line: lineno, msg: e.to_string() })?;
        if rec.label < 0 || rec.label as usize >= num_classes {
            return Err(DataError::Manifest {
                line: lineno,
                msg: format!("label {} outside 0..{num_classes}", rec.label),
            });
        }
        let p = root.join(&rec.path);
        if !p.is_file() {
            return Err(DataError::Manifest {
                line: lineno,
                msg: format!("missing file {}", p.display()),
            });
        }
        records.push(ClassRecord { path: p, label: rec.label as usize });
    }
    Ok(records)
}

/// Loads a 2AFC judgment manifest ({"ref","p0","p1","h","subset"?} per line).
pub fn load_judgment_manifest(path: &Path) -> Result<Vec<JudgmentPaths>, DataError> {
    let root = manifest_root(path);
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JudgmentLine = serde_json::from_str(line)
            .map_err(|e| DataError::Manifest { line: lineno, msg: e.to_string() })?;
        if !(0.0..=1.0).contains(&rec.h) || !rec.h.is_finite() {
            return Err(DataError::Manifest {
                line: lineno,
                msg: format!("h = {} outside [0,1]", rec.h),
            });
        }
        let resolve = |s: &str, lineno: usize| -> Result<PathBuf, DataError> {
            let p = root.join(s);
            if !p.is_file() {
                return Err(DataError::Manifest {
                    line: lineno,
                    msg: format!("missing file {}", p.display()),
                });
            }
            Ok(p)
        };
        records.push(JudgmentPaths {
            reference: resolve(&rec.reference, lineno)?,
            p0: resolve(&rec.p0, lineno)?,
            p1: resolve(&rec.p1, lineno)?,
            h: rec.h,
            subset: rec.subset,
        });
    }
    Ok(records)
}
