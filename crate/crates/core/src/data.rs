//! Datasets on disk (binary PPM images, PGM label maps, text manifests),
//! the synthetic shapes generator and inference-time padding.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{data_err, Error, Result};
use crate::graph::mix_seed;
use crate::sdn::IGNORE_INDEX;
use crate::tensor::{LabelMap, Scalar, Shape4, Tensor4};

/// One image `(1, 3, h, w)` in `[0, 1]` with its `(1, h, w)` label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor4<f32>,
    pub labels: LabelMap,
}

impl Sample {
    pub fn new(image: Tensor4<f32>, labels: LabelMap) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 || s.c != 3 || labels.n != 1 || (labels.h, labels.w) != (s.h, s.w) {
            return Err(data_err!(
                "image {s} and labels {}x{} do not form one aligned sample",
                labels.h,
                labels.w
            ));
        }
        Ok(Self { image, labels })
    }
}

/// Samples plus the metadata stored in a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    /// Per-channel mean pixel in `[0, 1]`, used for padding.
    pub mean: [f64; 3],
    pub samples: Vec<Sample>,
}

/// Per-channel mean over every pixel of every sample.
pub fn mean_pixel(samples: &[Sample]) -> [f64; 3] {
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for s in samples {
        let plane = s.image.shape().plane();
        for (c, acc) in sum.iter_mut().enumerate() {
            *acc += s.image.data()[c * plane..(c + 1) * plane]
                .iter()
                .map(|&v| f64::from(v))
                .sum::<f64>();
        }
        count += plane;
    }
    if count == 0 {
        return [0.5; 3];
    }
    sum.map(|v| v / count as f64)
}

/// Pad right and bottom with `mean` (one value per channel) so both
/// spatial dims become multiples of 16. Returns the padded tensor and the
/// original `(h, w)`.
pub fn pad_to_16<T: Scalar>(
    image: &Tensor4<T>,
    mean: &[f64],
) -> Result<(Tensor4<T>, (usize, usize))> {
    let s = image.shape();
    if mean.len() != s.c {
        return Err(data_err!(
            "mean pixel has {} channels, image has {}",
            mean.len(),
            s.c
        ));
    }
    let ph = s.h.div_ceil(16) * 16;
    let pw = s.w.div_ceil(16) * 16;
    if (ph, pw) == (s.h, s.w) {
        return Ok((image.clone(), (s.h, s.w)));
    }
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, ph, pw));
    for n in 0..s.n {
        for c in 0..s.c {
            let fill = T::of(mean[c]);
            for y in 0..ph {
                for x in 0..pw {
                    let v = if y < s.h && x < s.w {
                        image.at(n, c, y, x)
                    } else {
                        fill
                    };
                    out.set(n, c, y, x, v);
                }
            }
        }
    }
    Ok((out, (s.h, s.w)))
}

// --- PPM / PGM -----------------------------------------------------------

struct Header {
    width: usize,
    height: usize,
    body: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!(
            "expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("truncated or non-numeric header".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("missing whitespace after header".into()));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "only 8-bit files are supported, maxval {maxval}"
        )));
    }
    Ok(Header {
        width,
        height,
        body: pos + 1,
    })
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode a `(1, 3, h, w)` image in `[0, 1]` as binary PPM.
pub fn encode_ppm(image: &Tensor4<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(data_err!("PPM needs a (1, 3, h, w) image, got {s}"));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                out.push(quantize(image.at(0, c, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor4<f32>> {
    let h = parse_header(bytes, b"P6")?;
    let body = &bytes[h.body..];
    if body.len() < h.width * h.height * 3 {
        return Err(Error::Format("PPM pixel data truncated".into()));
    }
    let plane = h.width * h.height;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in body[..3 * plane].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor4::from_vec(Shape4::new(1, 3, h.height, h.width), data)
}

/// Encode a single label map as binary PGM.
pub fn encode_pgm(labels: &LabelMap) -> Result<Vec<u8>> {
    if labels.n != 1 {
        return Err(data_err!("PGM holds one label map, got {}", labels.n));
    }
    let mut out = format!("P5\n{} {}\n255\n", labels.w, labels.h).into_bytes();
    out.extend_from_slice(&labels.data);
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let h = parse_header(bytes, b"P5")?;
    let body = &bytes[h.body..];
    if body.len() < h.width * h.height {
        return Err(Error::Format("PGM pixel data truncated".into()));
    }
    LabelMap::new(1, h.height, h.width, body[..h.width * h.height].to_vec())
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn read_ppm(path: &Path) -> Result<Tensor4<f32>> {
    with_path(path, decode_ppm(&fs::read(path)?))
}

pub fn write_ppm(path: &Path, image: &Tensor4<f32>) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    with_path(path, decode_pgm(&fs::read(path)?))
}

pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    fs::write(path, encode_pgm(labels)?)?;
    Ok(())
}

// --- manifests -----------------------------------------------------------

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Dataset listing: `key = value` metadata lines (`classes`, `mean`) and
/// `image<TAB>label` lines with paths relative to the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub classes: usize,
    pub mean: [f64; 3],
    pub entries: Vec<(PathBuf, PathBuf)>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut classes = None;
        let mut mean = None;
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let at = |msg: String| data_err!("manifest line {}: {msg}", lineno + 1);
            if let Some((img, lbl)) = line.split_once('\t') {
                entries.push((PathBuf::from(img.trim()), PathBuf::from(lbl.trim())));
            } else if let Some((k, v)) = line.split_once('=') {
                match k.trim() {
                    "classes" => {
                        classes = Some(
                            v.trim()
                                .parse::<usize>()
                                .map_err(|e| at(format!("classes: {e}")))?,
                        );
                    }
                    "mean" => {
                        let vals: Vec<f64> = v
                            .split(',')
                            .map(|p| p.trim().parse::<f64>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|e| at(format!("mean: {e}")))?;
                        let arr: [f64; 3] = vals
                            .try_into()
                            .map_err(|_| at("mean needs 3 values".into()))?;
                        mean = Some(arr);
                    }
                    other => return Err(at(format!("unknown key '{other}'"))),
                }
            } else {
                return Err(at(format!(
                    "expected 'key = value' or 'image<TAB>label', got '{line}'"
                )));
            }
        }
        let classes = classes.ok_or_else(|| data_err!("manifest lacks 'classes'"))?;
        let mean = mean.ok_or_else(|| data_err!("manifest lacks 'mean'"))?;
        Ok(Self {
            classes,
            mean,
            entries,
        })
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "classes = {}\nmean = {}, {}, {}\n",
            self.classes, self.mean[0], self.mean[1], self.mean[2]
        );
        for (img, lbl) in &self.entries {
            s.push_str(&format!("{}\t{}\n", img.display(), lbl.display()));
        }
        s
    }
}

/// Load a manifest file (or `dir/manifest.txt` when given a directory)
/// and every sample it lists. Labels outside `[0, classes)` other than the
/// ignore index are rejected.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file)
        .map_err(|e| data_err!("cannot read manifest {}: {e}", file.display()))?;
    let manifest = with_path(&file, Manifest::parse(&text))?;
    let root = file.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for (img, lbl) in &manifest.entries {
        let image = read_ppm(&root.join(img))?;
        let labels = read_pgm(&root.join(lbl))?;
        if let Some(&bad) = labels
            .data
            .iter()
            .find(|&&v| v != IGNORE_INDEX && usize::from(v) >= manifest.classes)
        {
            return Err(data_err!(
                "{}: label {bad} outside 0..{}",
                lbl.display(),
                manifest.classes
            ));
        }
        samples.push(with_path(&root.join(img), Sample::new(image, labels))?);
    }
    Ok(Dataset {
        classes: manifest.classes,
        mean: manifest.mean,
        samples,
    })
}

/// Write samples as `image_NNNN.ppm` / `label_NNNN.pgm` plus a manifest.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let img = PathBuf::from(format!("image_{i:04}.ppm"));
        let lbl = PathBuf::from(format!("label_{i:04}.pgm"));
        write_ppm(&dir.join(&img), &s.image)?;
        write_pgm(&dir.join(&lbl), &s.labels)?;
        entries.push((img, lbl));
    }
    let manifest = Manifest {
        classes: dataset.classes,
        mean: dataset.mean,
        entries,
    };
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest.render())?;
    Ok(path)
}

// --- synthetic shapes ----------------------------------------------------

/// Parameters of the synthetic shapes dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    /// Number of classes including background (class 0).
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub max_shapes: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(count: usize, classes: usize, size: usize, seed: u64) -> Self {
        Self {
            count,
            classes,
            height: size,
            width: size,
            max_shapes: 3,
            seed,
        }
    }
}

/// A filled shape in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Axis-aligned rectangle `[x0, x1) x [y0, y1)` over pixel centers.
    Rect {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
    Disk {
        cx: f64,
        cy: f64,
        r: f64,
    },
}

impl Shape {
    /// Whether pixel `(x, y)` (its center at `x + 0.5, y + 0.5`) is inside.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => px >= x0 && px < x1 && py >= y0 && py < y1,
            Shape::Disk { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
        }
    }

    /// Pixel rows/columns that may contain the shape, clipped to the image.
    fn bounds(&self, h: usize, w: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (x0, y0, x1, y1) = match *self {
            Shape::Rect { x0, y0, x1, y1 } => (x0, y0, x1, y1),
            Shape::Disk { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
        };
        let clip = |lo: f64, hi: f64, n: usize| {
            let a = lo.floor().max(0.0) as usize;
            let b = (hi.ceil() + 1.0).clamp(0.0, n as f64) as usize;
            a.min(n)..b
        };
        (clip(y0, y1, h), clip(x0, x1, w))
    }

    /// Write `class` into every covered pixel.
    pub fn rasterize(&self, labels: &mut LabelMap, class: u8) {
        let (rows, cols) = self.bounds(labels.h, labels.w);
        for y in rows {
            for x in cols.clone() {
                if self.contains(x, y) {
                    labels.data[y * labels.w + x] = class;
                }
            }
        }
    }
}

/// Display color of a foreground class; background is textured gray.
pub fn class_color(class: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [128, 128, 128],
        [210, 50, 40],
        [40, 90, 215],
        [45, 185, 70],
        [225, 200, 40],
        [170, 60, 200],
        [40, 200, 200],
        [240, 130, 30],
    ];
    PALETTE[class % PALETTE.len()]
}

fn draw_shapes(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<(Shape, u8)> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let side = h.min(w);
    let n_shapes = rng.random_range(1..=spec.max_shapes.max(1));
    (0..n_shapes)
        .map(|k| {
            let class = rng.random_range(1..spec.classes) as u8;
            // The first shape is kept well inside so every image has
            // foreground; later ones may spill over the border.
            let (lo, hi) = if k == 0 { (0.3, 0.7) } else { (-0.1, 1.1) };
            let cx = rng.random_range(lo..hi) * w;
            let cy = rng.random_range(lo..hi) * h;
            let shape = if rng.random_bool(0.5) {
                Shape::Disk {
                    cx,
                    cy,
                    r: rng.random_range(0.1..0.25) * side,
                }
            } else {
                let hw = rng.random_range(0.08..0.22) * side;
                let hh = rng.random_range(0.08..0.22) * side;
                Shape::Rect {
                    x0: cx - hw,
                    y0: cy - hh,
                    x1: cx + hw,
                    y1: cy + hh,
                }
            };
            (shape, class)
        })
        .collect()
}

fn sample_rng(spec: &SynthSpec, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, index as u64))
}

/// Shapes of sample `index`, in paint order (later shapes cover earlier).
pub fn synth_shapes(spec: &SynthSpec, index: usize) -> Vec<(Shape, u8)> {
    draw_shapes(spec, &mut sample_rng(spec, index))
}

fn synth_one(spec: &SynthSpec, index: usize) -> Sample {
    let mut rng = sample_rng(spec, index);
    let (h, w) = (spec.height, spec.width);
    let mut labels = LabelMap::filled(1, h, w, 0);
    for (shape, class) in draw_shapes(spec, &mut rng) {
        shape.rasterize(&mut labels, class);
    }

    let base: f64 = rng.random_range(90.0..150.0);
    let (fx, fy): (f64, f64) = (rng.random_range(0.1..0.5), rng.random_range(0.1..0.5));
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut image = Tensor4::zeros(Shape4::new(1, 3, h, w));
    for y in 0..h {
        for x in 0..w {
            let class = usize::from(labels.data[y * w + x]);
            for c in 0..3 {
                let noise: f64 = rng.random_range(-12.0..12.0);
                let v = if class == 0 {
                    base + 18.0 * (fx * x as f64 + fy * y as f64 + phase + c as f64).sin() + noise
                } else {
                    f64::from(class_color(class)[c]) + noise
                };
                image.set(
                    0,
                    c,
                    y,
                    x,
                    (v.round().clamp(0.0, 255.0) as u8) as f32 / 255.0,
                );
            }
        }
    }
    Sample { image, labels }
}

/// Images of colored rectangles and disks on a textured background, with
/// pixel-exact labels. Deterministic per seed; sample `i` only depends on
/// `(seed, i)`.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.classes > 255 {
        return Err(Error::Config(format!(
            "synthetic data needs 2..=255 classes, got {}",
            spec.classes
        )));
    }
    if spec.height == 0 || spec.width == 0 {
        return Err(Error::Config("synthetic images need positive size".into()));
    }
    let samples: Vec<Sample> = (0..spec.count).map(|i| synth_one(spec, i)).collect();
    Ok(Dataset {
        classes: spec.classes,
        mean: mean_pixel(&samples),
        samples,
    })
}
