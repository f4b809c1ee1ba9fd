//! Synthetic desk-scale datasets: a 10-class texture/color classification
//! set and 2AFC judgment triplets with known noise-level ground truth.
//! Both are written as PPM files plus a JSON-lines manifest, the same layout
//! real datasets use.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::data::{save_ppm, DataError, ImageBuffer};

/// Class-dependent colored texture with additive noise. Classes differ in
/// base hue, stripe frequency and orientation, so a small network separates
/// them while per-image noise keeps the task non-trivial.
fn class_image(class: usize, size: u32, rng: &mut ChaCha20Rng) -> ImageBuffer {
    let n = size as usize;
    let mut data = vec![0.0; 3 * n * n];
    let hue = class as f64 / 10.0;
    let base = [
        0.5 + 0.45 * (std::f64::consts::TAU * hue).sin(),
        0.5 + 0.45 * (std::f64::consts::TAU * (hue + 1.0 / 3.0)).sin(),
        0.5 + 0.45 * (std::f64::consts::TAU * (hue + 2.0 / 3.0)).sin(),
    ];
    let freq = 1.0 + (class % 5) as f64;
    let vertical = class % 2 == 0;
    let phase = rng.gen::<f64>() * std::f64::consts::TAU;
    let amp = 0.18 + 0.05 * rng.gen::<f64>();
    for y in 0..n {
        for x in 0..n {
            let t = if vertical { x } else { y } as f64 / n as f64;
            let stripe = amp * (std::f64::consts::TAU * freq * t + phase).sin();
            for c in 0..3 {
                let noise = 0.08 * (rng.gen::<f64>() - 0.5);
                data[(y * n + x) * 3 + c] = (base[c] + stripe + noise).clamp(0.0, 1.0);
            }
        }
    }
    ImageBuffer::new(size, size, data)
}

/// Writes `count` images over `classes` classes plus `manifest.jsonl`;
/// returns the manifest path. Deterministic given the seed.
pub fn gen_classification_set(
    dir: &Path,
    count: usize,
    classes: usize,
    size: u32,
    seed: u64,
) -> Result<PathBuf, DataError> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let manifest = dir.join("manifest.jsonl");
    let mut out = std::fs::File::create(&manifest)?;
    for i in 0..count {
        let class = i % classes;
        let img = class_image(class, size, &mut rng);
        let name = format!("img_{i:05}.ppm");
        save_ppm(&dir.join(&name), &img)?;
        writeln!(out, r#"{{"path": "{name}", "label": {class}}}"#)?;
    }
    Ok(manifest)
}

fn noisy_copy(img: &ImageBuffer, sigma: f64, rng: &mut ChaCha20Rng) -> ImageBuffer {
    let data = img
        .data
        .iter()
        .map(|&v| (v + sigma * gauss(rng)).clamp(0.0, 1.0))
        .collect();
    ImageBuffer::new(img.width, img.height, data)
}

fn gauss(rng: &mut ChaCha20Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// 2AFC triplets with constructed ground truth: one patch carries weak noise,
/// the other strong noise, and h marks the strong-noise side (humans prefer
/// the cleaner patch). Sides are swapped on odd records to balance labels.
pub fn gen_judgment_set(
    dir: &Path,
    count: usize,
    patch_size: u32,
    seed: u64,
) -> Result<PathBuf, DataError> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let manifest = dir.join("judgments.jsonl");
    let mut out = std::fs::File::create(&manifest)?;
    for i in 0..count {
        let reference = class_image(i % 10, patch_size, &mut rng);
        let weak_sigma = rng.gen_range(0.01..0.05);
        let strong_sigma = rng.gen_range(0.15..0.30);
        let weak = noisy_copy(&reference, weak_sigma, &mut rng);
        let strong = noisy_copy(&reference, strong_sigma, &mut rng);
        let (p0, p1, h) = if i % 2 == 0 {
            // p1 is the strong-noise patch; no human prefers it
            (weak, strong, 0.0)
        } else {
            (strong, weak, 1.0)
        };
        let (rn, p0n, p1n) = (
            format!("ref_{i:05}.ppm"),
            format!("p0_{i:05}.ppm"),
            format!("p1_{i:05}.ppm"),
        );
        save_ppm(&dir.join(&rn), &reference)?;
        save_ppm(&dir.join(&p0n), &p0)?;
        save_ppm(&dir.join(&p1n), &p1)?;
        let subset = if i % 2 == 0 { "noise-p1" } else { "noise-p0" };
        writeln!(
            out,
            r#"{{"ref": "{rn}", "p0": "{p0n}", "p1": "{p1n}", "h": {h:.1}, "subset": "{subset}"}}"#
        )?;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_class_manifest, load_judgment_manifest};

    #[test]
    fn classification_set_is_deterministic_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let m = gen_classification_set(dir.path(), 20, 10, 32, 7).unwrap();
        let records = load_class_manifest(&m, 10).unwrap();
        assert_eq!(records.len(), 20);

        let dir2 = tempfile::tempdir().unwrap();
        gen_classification_set(dir2.path(), 20, 10, 32, 7).unwrap();
        let a = std::fs::read(dir.path().join("img_00003.ppm")).unwrap();
        let b = std::fs::read(dir2.path().join("img_00003.ppm")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn judgment_set_has_balanced_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        let m = gen_judgment_set(dir.path(), 10, 64, 3).unwrap();
        let records = load_judgment_manifest(&m).unwrap();
        assert_eq!(records.len(), 10);
        let zeros = records.iter().filter(|r| r.h == 0.0).count();
        assert_eq!(zeros, 5);
        assert!(records.iter().all(|r| r.subset.is_some()));
    }
}
