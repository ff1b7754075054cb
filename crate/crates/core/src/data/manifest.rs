//! CSV manifests pointing at 8-bit PNG images.
//!
//! | kind      | header              | row example           |
//! |-----------|---------------------|-----------------------|
//! | labeled   | `path,label`        | `imgs/a.png,3`        |
//! | triplet   | `a,b,c,similar_pair`| `a.png,b.png,c.png,13`|
//! | unlabeled | `path`              | `imgs/u.png`          |
//!
//! Paths are relative to the manifest's directory. Pixel values decode to `v / 255`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{ImageShape, LabeledDataset, TripletDataset, UnlabeledDataset, NUM_CLASSES};
use crate::error::{FeverError, Result};
use crate::losses::SimilarPair;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManifestKind {
    Labeled,
    Triplet,
    Unlabeled,
}

impl ManifestKind {
    fn header(self) -> &'static str {
        match self {
            ManifestKind::Labeled => "path,label",
            ManifestKind::Triplet => "a,b,c,similar_pair",
            ManifestKind::Unlabeled => "path",
        }
    }

    fn columns(self) -> usize {
        self.header().split(',').count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Labeled(LabeledDataset),
    Triplet(TripletDataset),
    Unlabeled(UnlabeledDataset),
}

struct Loader {
    path: PathBuf,
    base: PathBuf,
    shape: Option<ImageShape>,
    pixels: Vec<f32>,
}

impl Loader {
    fn new(path: &Path) -> Self {
        Loader {
            path: path.to_path_buf(),
            base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            shape: None,
            pixels: Vec::new(),
        }
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> FeverError {
        FeverError::Manifest {
            path: self.path.clone(),
            line,
            msg: msg.into(),
        }
    }

    fn push_image(&mut self, line: usize, rel: &str) -> Result<()> {
        if rel.is_empty() {
            return Err(self.err(line, "empty image path"));
        }
        let (shape, data) = read_png(&self.base.join(rel)).map_err(|e| self.err(line, format!("{rel}: {e}")))?;
        match self.shape {
            None => self.shape = Some(shape),
            Some(s) if s != shape => {
                return Err(self.err(line, format!("{rel}: shape {shape:?} differs from {s:?}")));
            }
            Some(_) => {}
        }
        self.pixels.extend(data);
        Ok(())
    }

    fn shape(&self) -> Result<ImageShape> {
        self.shape.ok_or_else(|| self.err(1, "manifest has no rows"))
    }
}

/// Rows of a manifest as `(1-based line number, fields)`, header checked.
fn rows(path: &Path, kind: ManifestKind) -> Result<Vec<(usize, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| FeverError::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let manifest_err = |line: usize, msg: String| FeverError::Manifest {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let (hline, header) = lines.next().ok_or_else(|| manifest_err(1, "empty manifest".into()))?;
    let ncols = kind.columns();
    if header.split(',').count() != ncols {
        return Err(manifest_err(
            hline + 1,
            format!("header `{}` should have the {ncols} columns `{}`", header.trim(), kind.header()),
        ));
    }
    lines
        .map(|(i, l)| {
            let fields: Vec<String> = l.split(',').map(|f| f.trim().to_string()).collect();
            if fields.len() != ncols {
                return Err(manifest_err(i + 1, format!("expected {ncols} fields, found {}", fields.len())));
            }
            Ok((i + 1, fields))
        })
        .collect()
}

pub fn load_labeled_manifest(path: &Path, num_classes: usize) -> Result<LabeledDataset> {
    let mut loader = Loader::new(path);
    let mut labels = Vec::new();
    for (line, f) in rows(path, ManifestKind::Labeled)? {
        let label: usize = f[1]
            .parse()
            .map_err(|_| loader.err(line, format!("label `{}` is not a non-negative integer", f[1])))?;
        if label >= num_classes {
            return Err(loader.err(line, format!("label {label} out of range 0..{num_classes}")));
        }
        loader.push_image(line, &f[0])?;
        labels.push(label);
    }
    LabeledDataset::new(loader.shape()?, num_classes, loader.pixels, labels)
}

pub fn load_triplet_manifest(path: &Path) -> Result<TripletDataset> {
    let mut loader = Loader::new(path);
    let mut pairs = Vec::new();
    for (line, f) in rows(path, ManifestKind::Triplet)? {
        let pair = f[3]
            .parse::<u32>()
            .ok()
            .and_then(|c| SimilarPair::from_code(c).ok())
            .ok_or_else(|| loader.err(line, format!("similar_pair `{}` must be 12, 13 or 23", f[3])))?;
        for rel in &f[..3] {
            loader.push_image(line, rel)?;
        }
        pairs.push(pair);
    }
    TripletDataset::new(loader.shape()?, loader.pixels, pairs)
}

pub fn load_unlabeled_manifest(path: &Path) -> Result<UnlabeledDataset> {
    let mut loader = Loader::new(path);
    for (line, f) in rows(path, ManifestKind::Unlabeled)? {
        loader.push_image(line, &f[0])?;
    }
    UnlabeledDataset::new(loader.shape()?, loader.pixels)
}

/// Loads any manifest kind; labeled manifests use the 8-class label space.
pub fn load_manifest(path: &Path, kind: ManifestKind) -> Result<Dataset> {
    Ok(match kind {
        ManifestKind::Labeled => Dataset::Labeled(load_labeled_manifest(path, NUM_CLASSES)?),
        ManifestKind::Triplet => Dataset::Triplet(load_triplet_manifest(path)?),
        ManifestKind::Unlabeled => Dataset::Unlabeled(load_unlabeled_manifest(path)?),
    })
}

/// Decodes an 8-bit grayscale, RGB, RGBA or palette PNG into CHW floats.
/// Alpha is dropped.
fn read_png(path: &Path) -> std::result::Result<(ImageShape, Vec<f32>), String> {
    let file = File::open(path).map_err(|e| e.to_string())?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let size = reader.output_buffer_size().ok_or("image too large")?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format!("unsupported bit depth {:?}; expected 8-bit", info.bit_depth));
    }
    let (stride, channels) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(format!("unsupported color type {other:?}")),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let mut out = vec![0f32; channels * h * w];
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            for c in 0..channels {
                out[(c * h + y) * w + x] = row[x * stride + c] as f32 / 255.0;
            }
        }
    }
    Ok(([channels, h, w], out))
}

fn write_png(path: &Path, shape: &ImageShape, chw: &[f32]) -> Result<()> {
    let [c, h, w] = *shape;
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => {
            return Err(FeverError::InvalidArgument(format!(
                "PNG export needs 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut hwc = vec![0u8; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = chw[(ci * h + y) * w + x].clamp(0.0, 1.0);
                hwc[(y * w + x) * c + ci] = (v * 255.0).round() as u8;
            }
        }
    }
    let file = File::create(path).map_err(|e| FeverError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| FeverError::Data(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&hwc).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Writes `dir/<stem>.csv` plus one PNG per image under `dir/<stem>/`.
/// Returns every file written, manifest first.
fn write_manifest<'a>(
    dir: &Path,
    stem: &str,
    kind: ManifestKind,
    shape: &ImageShape,
    rows: impl Iterator<Item = (Vec<&'a [f32]>, Option<String>)>,
) -> Result<Vec<PathBuf>> {
    let img_dir = dir.join(stem);
    fs::create_dir_all(&img_dir).map_err(|e| FeverError::io(&img_dir, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut csv = String::from(kind.header());
    csv.push('\n');
    let mut written = vec![csv_path.clone()];
    let mut n = 0usize;
    for (images, tail) in rows {
        let mut fields = Vec::new();
        for img in images {
            let rel = format!("{stem}/{n:06}.png");
            let p = dir.join(&rel);
            write_png(&p, shape, img)?;
            written.push(p);
            fields.push(rel);
            n += 1;
        }
        fields.extend(tail);
        csv.push_str(&fields.join(","));
        csv.push('\n');
    }
    let mut f = File::create(&csv_path).map_err(|e| FeverError::io(&csv_path, e))?;
    f.write_all(csv.as_bytes()).map_err(|e| FeverError::io(&csv_path, e))?;
    Ok(written)
}

pub fn write_labeled_manifest(dir: &Path, stem: &str, d: &LabeledDataset) -> Result<Vec<PathBuf>> {
    let rows = (0..d.len()).map(|i| (vec![d.image(i)], Some(d.labels[i].to_string())));
    write_manifest(dir, stem, ManifestKind::Labeled, &d.image_shape, rows)
}

pub fn write_triplet_manifest(dir: &Path, stem: &str, d: &TripletDataset) -> Result<Vec<PathBuf>> {
    let rows = (0..d.len()).map(|t| {
        (
            vec![d.image(t, 0), d.image(t, 1), d.image(t, 2)],
            Some(d.pairs[t].code().to_string()),
        )
    });
    write_manifest(dir, stem, ManifestKind::Triplet, &d.image_shape, rows)
}

pub fn write_unlabeled_manifest(dir: &Path, stem: &str, d: &UnlabeledDataset) -> Result<Vec<PathBuf>> {
    let rows = (0..d.len()).map(|i| (vec![d.image(i)], None));
    write_manifest(dir, stem, ManifestKind::Unlabeled, &d.image_shape, rows)
}
