//! Procedural source/target segmentation benchmark with a documented style shift.
//!
//! A sample is a background (class 0) plus one shape per foreground class,
//! painted in the domain's palette. Class `k ≥ 1` always uses the same shape
//! kind (rectangle, disk, triangle, cycling), so geometry is a domain-invariant
//! cue while colour is not. The label map depends only on the sample seed;
//! the domain changes the rendering alone.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::IGNORE_INDEX;
use crate::rng::{sub_rng, sub_seed_u64};
use crate::tensor::Tensor;

/// Base colours; class `k` takes entry `k mod len`.
const BASE_PALETTE: [[f64; 3]; 8] = [
    [0.30, 0.30, 0.30],
    [0.85, 0.20, 0.15],
    [0.20, 0.75, 0.25],
    [0.20, 0.30, 0.85],
    [0.85, 0.80, 0.20],
    [0.80, 0.25, 0.80],
    [0.20, 0.80, 0.80],
    [0.95, 0.95, 0.95],
];

/// Hue rotation of the target palette, in degrees. 120° would be a pure
/// channel cycle, which maps every class colour onto another class's.
pub const TARGET_PALETTE_ROTATION: f64 = 30.0;

/// Rotates an RGB colour about the grey diagonal (Rodrigues' formula), then clamps to `[0, 1]`.
pub fn rotate_about_grey(rgb: [f64; 3], degrees: f64) -> [f64; 3] {
    let (s, c) = degrees.to_radians().sin_cos();
    let k = 1.0 / 3.0_f64.sqrt();
    let v = rgb;
    let dot = k * (v[0] + v[1] + v[2]);
    let cross = [k * (v[2] - v[1]), k * (v[0] - v[2]), k * (v[1] - v[0])];
    std::array::from_fn(|i| (v[i] * c + cross[i] * s + k * dot * (1.0 - c)).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Config(format!("domain must be \"source\" or \"target\", got {other:?}"))),
        }
    }

    pub fn style(self, num_classes: usize) -> DomainStyle {
        match self {
            Domain::Source => DomainStyle::source(num_classes),
            Domain::Target => DomainStyle::target(num_classes),
        }
    }
}

/// Rendering parameters of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainStyle {
    pub domain: Domain,
    pub palette: Vec<[f64; 3]>,
    pub noise_sigma: f64,
    pub blur_radius: usize,
    pub gamma: f64,
    pub illumination_gradient: bool,
}

impl DomainStyle {
    pub fn source(num_classes: usize) -> Self {
        Self {
            domain: Domain::Source,
            palette: (0..num_classes).map(|k| BASE_PALETTE[k % BASE_PALETTE.len()]).collect(),
            noise_sigma: 0.02,
            blur_radius: 0,
            gamma: 1.0,
            illumination_gradient: false,
        }
    }

    /// Source palette rotated about the grey axis by [`TARGET_PALETTE_ROTATION`]
    /// degrees, gamma 1.6, σ = 0.05 and a horizontal illumination ramp.
    pub fn target(num_classes: usize) -> Self {
        Self::target_with_rotation(num_classes, TARGET_PALETTE_ROTATION)
    }

    pub fn target_with_rotation(num_classes: usize, degrees: f64) -> Self {
        let palette = DomainStyle::source(num_classes).palette.iter().map(|&c| rotate_about_grey(c, degrees)).collect();
        Self {
            domain: Domain::Target,
            palette,
            noise_sigma: 0.05,
            blur_radius: 1,
            gamma: 1.6,
            illumination_gradient: true,
        }
    }
}

/// An image `[3×H×W]` in `[0, 1]` (multiples of 1/255) and its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySegSample {
    pub id: String,
    pub image: Tensor,
    pub labels: Vec<usize>,
}

impl ToySegSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Rect,
    Disk,
    Triangle,
}

fn shape_kind(class: usize) -> ShapeKind {
    match (class - 1) % 3 {
        0 => ShapeKind::Rect,
        1 => ShapeKind::Disk,
        _ => ShapeKind::Triangle,
    }
}

fn sign(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (p.0 - b.0) * (a.1 - b.1) - (a.0 - b.0) * (p.1 - b.1)
}

/// Label map from the layout stream: each foreground class painted once, in
/// random order, so later shapes may occlude earlier ones.
fn layout(seed: u64, k: usize, h: usize, w: usize) -> Vec<usize> {
    let mut rng = sub_rng(seed, "sample.layout");
    let mut labels = vec![0usize; h * w];
    let mut order: Vec<usize> = (1..k).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let side = h.min(w) as f64;
    for class in order {
        let size = rng.gen_range(0.22..0.42) * side;
        let cx = rng.gen_range(size * 0.5..(w as f64 - size * 0.5).max(size * 0.5 + 1.0));
        let cy = rng.gen_range(size * 0.5..(h as f64 - size * 0.5).max(size * 0.5 + 1.0));
        let aspect = rng.gen_range(0.6..1.4);
        let kind = shape_kind(class);
        let tri = [
            (cx + rng.gen_range(-0.2..0.2) * size, cy - 0.55 * size),
            (cx - 0.55 * size, cy + 0.45 * size),
            (cx + 0.55 * size, cy + 0.45 * size),
        ];
        for y in 0..h {
            for x in 0..w {
                let p = (x as f64 + 0.5, y as f64 + 0.5);
                let (dx, dy) = (p.0 - cx, p.1 - cy);
                let inside = match kind {
                    ShapeKind::Rect => dx.abs() <= 0.5 * size * aspect && dy.abs() <= 0.5 * size / aspect,
                    ShapeKind::Disk => dx * dx + dy * dy <= (0.5 * size) * (0.5 * size),
                    ShapeKind::Triangle => {
                        let d1 = sign(p, tri[0], tri[1]);
                        let d2 = sign(p, tri[1], tri[2]);
                        let d3 = sign(p, tri[2], tri[0]);
                        let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                        let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                        !(neg && pos)
                    }
                };
                if inside {
                    labels[y * w + x] = class;
                }
            }
        }
    }
    labels
}

fn box_blur(img: &mut [f64], h: usize, w: usize, r: usize) {
    if r == 0 {
        return;
    }
    let src = img.to_vec();
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut n) = (0.0, 0.0);
                for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                    for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                        acc += plane[yy * w + xx];
                        n += 1.0;
                    }
                }
                img[c * h * w + y * w + x] = acc / n;
            }
        }
    }
}

/// Deterministic sample for `(seed, style)`. Labels depend on `seed` only.
pub fn gen_sample(seed: u64, style: &DomainStyle, k: usize, h: usize, w: usize) -> Result<ToySegSample> {
    if k < 2 || k >= IGNORE_INDEX {
        return Err(Error::Config(format!("number of classes must be in [2, {IGNORE_INDEX}), got {k}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("image size {h}x{w} must be positive")));
    }
    if style.palette.len() < k {
        return Err(Error::Config(format!("palette has {} colours for {k} classes", style.palette.len())));
    }
    let labels = layout(seed, k, h, w);
    let n = h * w;
    let mut img = vec![0.0; 3 * n];
    for (p, &l) in labels.iter().enumerate() {
        for c in 0..3 {
            img[c * n + p] = style.palette[l][c];
        }
    }
    box_blur(&mut img, h, w, style.blur_radius);
    let mut rng = sub_rng(seed, &format!("sample.style.{}", style.domain.name()));
    let noise = Normal::new(0.0, style.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let i = c * n + y * w + x;
                let mut v = img[i].powf(style.gamma);
                if style.illumination_gradient {
                    v *= 0.55 + 0.45 * (x as f64 + 0.5) / w as f64;
                }
                v += noise.sample(&mut rng);
                img[i] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    Ok(ToySegSample { id: String::new(), image: Tensor::new([3, h, w], img)?, labels })
}

/// `count` samples of one split; sample `i` has id `{split}_{i:05}` and seed
/// derived from `(seed, split, i)`.
pub fn gen_split(seed: u64, split: &str, domain: Domain, k: usize, size: usize, count: usize) -> Result<Vec<ToySegSample>> {
    gen_split_styled(seed, split, &domain.style(k), k, size, count)
}

pub fn gen_split_styled(seed: u64, split: &str, style: &DomainStyle, k: usize, size: usize, count: usize) -> Result<Vec<ToySegSample>> {
    (0..count)
        .map(|i| {
            let s = sub_seed_u64(seed, &format!("data.{split}.{i}"));
            let mut sample = gen_sample(s, style, k, size, size)?;
            sample.id = format!("{split}_{i:05}");
            Ok(sample)
        })
        .collect()
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("PPM needs 3 channels, got {c}")));
    }
    let n = h * w;
    let d = image.data();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * n);
    for p in 0..n {
        for ch in 0..3 {
            out.push((d[ch * n + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let bad = |why: &str| Error::Data(format!("{}: {why}", path.display()));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric PPM header field"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 || w == 0 || h == 0 {
        return Err(bad("PPM must be non-empty with maxval 255"));
    }
    let n = w * h;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != 3 * n {
        return Err(bad(&format!("PPM payload has {} bytes, expected {}", body.len(), 3 * n)));
    }
    let mut data = vec![0.0; 3 * n];
    for p in 0..n {
        for ch in 0..3 {
            data[ch * n + p] = body[3 * p + ch] as f64 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let bytes = labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::Data(format!("label {l} does not fit in a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_labels(path: &Path, expected_len: usize) -> Result<Vec<usize>> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if bytes.len() != expected_len {
        return Err(Error::Data(format!(
            "{}: {} label bytes, image implies {expected_len}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes.into_iter().map(usize::from).collect())
}

/// Writes `<id>.ppm` and `<id>.lbl` for every sample.
pub fn write_dataset(dir: &Path, samples: &[ToySegSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))?;
    for s in samples {
        write_ppm(&dir.join(format!("{}.ppm", s.id)), &s.image)?;
        write_labels(&dir.join(format!("{}.lbl", s.id)), &s.labels)?;
    }
    Ok(())
}

/// Reads every `*.ppm` in `dir` (sorted by name) with its paired `.lbl`.
pub fn read_dataset(dir: &Path) -> Result<Vec<ToySegSample>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Data(format!("cannot read dataset dir {}: {e}", dir.display())))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no .ppm images in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let image = read_ppm(p)?;
            let labels = read_labels(&p.with_extension("lbl"), image.shape()[1] * image.shape()[2])?;
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(ToySegSample { id, image, labels })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_are_deterministic() {
        let st = DomainStyle::source(4);
        let a = gen_sample(5, &st, 4, 32, 32).unwrap();
        let b = gen_sample(5, &st, 4, 32, 32).unwrap();
        assert!(a.image.bit_eq(&b.image));
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn labels_are_style_invariant() {
        let a = gen_sample(8, &DomainStyle::source(4), 4, 32, 32).unwrap();
        let b = gen_sample(8, &DomainStyle::target(4), 4, 32, 32).unwrap();
        assert_eq!(a.labels, b.labels);
        assert!(!a.image.bit_eq(&b.image));
    }

    #[test]
    fn grey_axis_rotation() {
        let red = [0.8, 0.2, 0.2];
        let cyc = rotate_about_grey(red, 120.0);
        for (a, b) in cyc.iter().zip([0.2, 0.8, 0.2]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(rotate_about_grey([0.3; 3], 47.0).map(|v| (v * 1e12).round()), [0.3e12; 3]);
    }

    #[test]
    fn palettes_differ_between_domains() {
        assert_ne!(DomainStyle::source(4).palette, DomainStyle::target(4).palette);
    }

    #[test]
    fn every_class_appears_in_a_corpus() {
        let st = DomainStyle::source(3);
        let mut seen = [false; 3];
        for s in 0..1000 {
            for &l in &gen_sample(s, &st, 3, 16, 16).unwrap().labels {
                seen[l] = true;
            }
        }
        assert_eq!(seen, [true; 3]);
    }

    #[test]
    fn images_are_quantized_and_bounded() {
        let s = gen_sample(1, &DomainStyle::target(4), 4, 32, 32).unwrap();
        for &v in s.image.data() {
            assert!((0.0..=1.0).contains(&v));
            assert_eq!((v * 255.0).round() / 255.0, v);
        }
    }

    #[test]
    fn rejects_degenerate_class_counts() {
        assert!(gen_sample(0, &DomainStyle::source(4), 1, 8, 8).is_err());
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = gen_split(3, "source", Domain::Source, 4, 32, 3).unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn truncated_label_file_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let samples = gen_split(3, "x", Domain::Source, 4, 32, 1).unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        fs::write(dir.path().join("x_00000.lbl"), [0u8; 10]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Data(_))));
    }
}
