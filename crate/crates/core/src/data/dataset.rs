//! Labeled image datasets: in-memory layout, disk formats, channel
//! statistics, and a synthetic generator for desk-scale experiments.
//!
//! Two on-disk forms are supported:
//!
//! * an index directory: `index.txt` with one `relative/path label` line
//!   per sample plus the image files it names;
//! * a packed binary file: little-endian header `count, h, w, c,
//!   num_classes` (five u32), then per sample `h*w*c` raw `u8` pixels
//!   (row-major HWC) followed by a `u32` label.
//!
//! Pixels are held as `f32` in `[0,1]`, HWC per image.

use crate::error::{Result, TorsdError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use std::io::{Read, Write};
use std::path::Path;

/// In-memory dataset of equally sized images.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pixels: Vec<f32>,
    labels: Vec<u32>,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        pixels: Vec<f32>,
        labels: Vec<u32>,
        h: usize,
        w: usize,
        c: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let ds = LabeledDataset {
            pixels,
            labels,
            h,
            w,
            c,
            num_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.h * self.w * self.c
    }

    /// Raw HWC pixels of sample `i`.
    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().map(|l| *l as usize)
    }

    /// Checks the structural invariants: consistent lengths, labels in
    /// range, at least two classes present with one of them holding two or
    /// more samples, and finite pixels.
    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.labels.len() * self.image_len() {
            return Err(TorsdError::shape(
                format!("{} images x {} values", self.labels.len(), self.image_len()),
                format!("{} pixel values", self.pixels.len()),
            ));
        }
        if let Some(bad) = self.labels.iter().find(|l| **l as usize >= self.num_classes) {
            return Err(TorsdError::Argument(format!(
                "label {} out of range for {} classes",
                bad, self.num_classes
            )));
        }
        let mut counts = vec![0usize; self.num_classes];
        for l in &self.labels {
            counts[*l as usize] += 1;
        }
        let present = counts.iter().filter(|c| **c > 0).count();
        if present < 2 {
            return Err(TorsdError::SamplingInfeasible(format!(
                "dataset needs at least 2 classes present, found {}",
                present
            )));
        }
        if !counts.iter().any(|c| *c >= 2) {
            return Err(TorsdError::SamplingInfeasible(
                "no class holds 2 or more samples; positive pairs are impossible".into(),
            ));
        }
        if !self.pixels.iter().all(|v| v.is_finite()) {
            return Err(TorsdError::InvalidImage(
                "dataset contains non-finite pixel values".into(),
            ));
        }
        Ok(())
    }

    /// Samples per class (length `num_classes`).
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for l in &self.labels {
            counts[*l as usize] += 1;
        }
        counts
    }

    /// Splits off the first `n` samples of every class into one dataset
    /// and the rest into another (train/test splits of one generation).
    pub fn split_per_class(&self, n: usize) -> Result<(LabeledDataset, LabeledDataset)> {
        let mut taken = vec![0usize; self.num_classes];
        let mut a_px = Vec::new();
        let mut a_lb = Vec::new();
        let mut b_px = Vec::new();
        let mut b_lb = Vec::new();
        for i in 0..self.len() {
            let label = self.label(i);
            if taken[label] < n {
                taken[label] += 1;
                a_px.extend_from_slice(self.image(i));
                a_lb.push(label as u32);
            } else {
                b_px.extend_from_slice(self.image(i));
                b_lb.push(label as u32);
            }
        }
        Ok((
            LabeledDataset::new(a_px, a_lb, self.h, self.w, self.c, self.num_classes)?,
            LabeledDataset::new(b_px, b_lb, self.h, self.w, self.c, self.num_classes)?,
        ))
    }

    /// Keeps only the listed classes, remapping labels to `0..classes.len()`.
    pub fn subset_classes(&self, classes: &[usize]) -> Result<LabeledDataset> {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..self.len() {
            if let Some(new) = classes.iter().position(|c| *c == self.label(i)) {
                pixels.extend_from_slice(self.image(i));
                labels.push(new as u32);
            }
        }
        LabeledDataset::new(pixels, labels, self.h, self.w, self.c, classes.len())
    }
}

/// Per-channel normalization statistics computed from a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    /// No-op normalization (tests and raw-pixel paths).
    pub fn identity(c: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; c],
            std: vec![1.0; c],
        }
    }
}

/// Computes per-channel mean and standard deviation over every pixel of
/// the dataset. Degenerate channels (zero spread) get std 1 so
/// normalization stays finite.
pub fn channel_stats(ds: &LabeledDataset) -> ChannelStats {
    let c = ds.c;
    let mut sum = vec![0.0f64; c];
    let mut sumsq = vec![0.0f64; c];
    let per_image = ds.h * ds.w;
    for i in 0..ds.len() {
        let img = ds.image(i);
        for p in 0..per_image {
            for ch in 0..c {
                let v = img[p * c + ch] as f64;
                sum[ch] += v;
                sumsq[ch] += v * v;
            }
        }
    }
    let n = (ds.len() * per_image) as f64;
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for ch in 0..c {
        let m = sum[ch] / n;
        let var = (sumsq[ch] / n - m * m).max(0.0);
        let s = var.sqrt();
        mean.push(m as f32);
        std.push(if s < 1e-6 { 1.0 } else { s as f32 });
    }
    ChannelStats { mean, std }
}

// ---- packed binary format --------------------------------------------

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| TorsdError::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

/// Writes the packed binary format.
pub fn save_packed(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| TorsdError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let header = [
        ds.len() as u32,
        ds.h as u32,
        ds.w as u32,
        ds.c as u32,
        ds.num_classes as u32,
    ];
    for v in header {
        w.write_all(&v.to_le_bytes()).map_err(|e| TorsdError::io(path, e))?;
    }
    for i in 0..ds.len() {
        let bytes: Vec<u8> = ds
            .image(i)
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes).map_err(|e| TorsdError::io(path, e))?;
        w.write_all(&(ds.labels[i]).to_le_bytes())
            .map_err(|e| TorsdError::io(path, e))?;
    }
    w.flush().map_err(|e| TorsdError::io(path, e))
}

/// Reads the packed binary format.
pub fn load_packed(path: &Path) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path).map_err(|e| TorsdError::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let count = read_u32(&mut r, path)? as usize;
    let h = read_u32(&mut r, path)? as usize;
    let w = read_u32(&mut r, path)? as usize;
    let c = read_u32(&mut r, path)? as usize;
    let num_classes = read_u32(&mut r, path)? as usize;
    if h == 0 || w == 0 || c == 0 || num_classes == 0 {
        return Err(TorsdError::InvalidImage(format!(
            "packed header has zero dimension: {}x{}x{} / {} classes",
            h, w, c, num_classes
        )));
    }
    let per = h * w * c;
    let mut pixels = Vec::with_capacity(count * per);
    let mut labels = Vec::with_capacity(count);
    let mut img = vec![0u8; per];
    for _ in 0..count {
        r.read_exact(&mut img).map_err(|e| TorsdError::io(path, e))?;
        pixels.extend(img.iter().map(|b| *b as f32 / 255.0));
        labels.push(read_u32(&mut r, path)?);
    }
    LabeledDataset::new(pixels, labels, h, w, c, num_classes)
}

// ---- index directory format --------------------------------------------

/// Loads a directory with `index.txt` (`relative/path label` per line).
/// Images are decoded to RGB; every file must share the first image's
/// dimensions. `num_classes` is the largest label plus one.
pub fn load_index_dir(dir: &Path) -> Result<LabeledDataset> {
    let index = dir.join("index.txt");
    let text = std::fs::read_to_string(&index).map_err(|e| TorsdError::io(&index, e))?;
    let mut pixels = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (rel, label) = line.rsplit_once(char::is_whitespace).ok_or_else(|| {
            TorsdError::ConfigSyntax(format!(
                "index.txt line {}: expected `path label`",
                lineno + 1
            ))
        })?;
        let label: u32 = label.trim().parse().map_err(|_| {
            TorsdError::ConfigSyntax(format!(
                "index.txt line {}: bad label `{}`",
                lineno + 1,
                label
            ))
        })?;
        let path = dir.join(rel.trim());
        let img = image::open(&path)
            .map_err(|e| {
                TorsdError::InvalidImage(format!("{}: {}", path.display(), e))
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(TorsdError::shape(
                    format!("{}x{}", d.0, d.1),
                    format!("{}x{} ({})", h, w, path.display()),
                ))
            }
            _ => {}
        }
        pixels.extend(img.into_raw().into_iter().map(|b| b as f32 / 255.0));
        labels.push(label);
    }
    let (h, w) = dims.ok_or_else(|| {
        TorsdError::SamplingInfeasible("index.txt lists no samples".into())
    })?;
    let num_classes = labels.iter().max().map(|m| *m as usize + 1).unwrap_or(0);
    LabeledDataset::new(pixels, labels, h, w, 3, num_classes)
}

/// Loads either on-disk form: directories are index datasets, files are
/// packed binaries.
pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let meta = std::fs::metadata(path).map_err(|e| TorsdError::io(path, e))?;
    if meta.is_dir() {
        load_index_dir(path)
    } else {
        load_packed(path)
    }
}

// ---- synthetic data --------------------------------------------------

/// Synthetic class-blob images: each class is a smooth random prototype
/// pattern; samples add per-pixel noise and a random brightness shift.
/// Harder (higher `noise`) datasets leave headroom for training-recipe
/// comparisons without real data.
pub fn make_synthetic(
    num_classes: usize,
    per_class: usize,
    h: usize,
    w: usize,
    c: usize,
    noise: f64,
    seed: u64,
) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = 4usize;
    // Coarse prototype grids, bilinearly upsampled per pixel.
    let mut protos = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let field: Vec<f64> = (0..grid * grid * c)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        protos.push(field);
    }
    let sample_proto = |proto: &[f64], y: usize, x: usize, ch: usize| -> f64 {
        let fy = y as f64 / h as f64 * (grid - 1) as f64;
        let fx = x as f64 / w as f64 * (grid - 1) as f64;
        let (y0, x0) = (fy as usize, fx as usize);
        let (y1, x1) = ((y0 + 1).min(grid - 1), (x0 + 1).min(grid - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let at = |yy: usize, xx: usize| proto[(yy * grid + xx) * c + ch];
        at(y0, x0) * (1.0 - ty) * (1.0 - tx)
            + at(y0, x1) * (1.0 - ty) * tx
            + at(y1, x0) * ty * (1.0 - tx)
            + at(y1, x1) * ty * tx
    };
    let n = num_classes * per_class;
    let mut pixels = Vec::with_capacity(n * h * w * c);
    let mut labels = Vec::with_capacity(n);
    for class in 0..num_classes {
        for _ in 0..per_class {
            let brightness: f64 = rng.gen_range(-0.15..0.15);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        let signal = sample_proto(&protos[class], y, x, ch);
                        let eps: f64 = rng.gen_range(-1.0..1.0);
                        let v = 0.5 + 0.25 * signal + brightness + noise * eps;
                        pixels.push(v.clamp(0.0, 1.0) as f32);
                    }
                }
            }
            labels.push(class as u32);
        }
    }
    LabeledDataset::new(pixels, labels, h, w, c, num_classes)
        .expect("synthetic construction is structurally valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_dataset_is_valid() {
        let ds = make_synthetic(3, 10, 8, 8, 3, 0.2, 0);
        assert_eq!(ds.len(), 30);
        assert_eq!(ds.class_counts(), vec![10, 10, 10]);
        ds.validate().unwrap();
    }

    #[test]
    fn single_class_dataset_rejected() {
        let err = LabeledDataset::new(vec![0.5; 3 * 4], vec![0, 0, 0], 2, 2, 1, 1).unwrap_err();
        assert!(matches!(err, TorsdError::SamplingInfeasible(_)));
    }

    #[test]
    fn nonfinite_pixels_rejected() {
        let mut px = vec![0.5f32; 3 * 4];
        px[3] = f32::NAN;
        let err = LabeledDataset::new(px, vec![0, 0, 1], 2, 2, 1, 2).unwrap_err();
        assert!(matches!(err, TorsdError::InvalidImage(_)));
    }

    #[test]
    fn packed_round_trip() {
        let ds = make_synthetic(2, 5, 6, 6, 3, 0.1, 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        save_packed(&ds, &path).unwrap();
        let ds2 = load_packed(&path).unwrap();
        assert_eq!(ds.len(), ds2.len());
        assert_eq!((ds.h, ds.w, ds.c, ds.num_classes), (ds2.h, ds2.w, ds2.c, ds2.num_classes));
        for i in 0..ds.len() {
            assert_eq!(ds.label(i), ds2.label(i));
            for (a, b) in ds.image(i).iter().zip(ds2.image(i)) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn channel_stats_of_constant_channel_guard_std() {
        let ds = LabeledDataset::new(vec![0.25; 3 * 4], vec![0, 0, 1], 2, 2, 1, 2).unwrap();
        let stats = channel_stats(&ds);
        assert!((stats.mean[0] - 0.25).abs() < 1e-6);
        assert_eq!(stats.std[0], 1.0);
    }

    #[test]
    fn subset_classes_remaps_labels() {
        let ds = make_synthetic(4, 3, 4, 4, 1, 0.1, 3);
        let sub = ds.subset_classes(&[1, 3]).unwrap();
        assert_eq!(sub.len(), 6);
        assert_eq!(sub.num_classes, 2);
        assert!(sub.labels().all(|l| l < 2));
    }
}
