//! PNG and raw tensor files, mask files and the dataset index.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage, ExtendedColorType, ImageFormat};

use super::labels::{default_size_threshold, encode_labels, RawMask};
use super::Sample;
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, LabelMask};
use crate::tensor::{Shape, Tensor};

pub const INDEX_FILE: &str = "index.tsv";

/// One `id<TAB>image<TAB>mask` line of a dataset index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// How mask files of a dataset are stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskFormat {
    /// Class labels `0..4` directly.
    Labels,
    /// The raw annotation palette, encoded with the given nucleus size
    /// threshold (default when `None`).
    Raw { threshold: Option<usize> },
}

fn is_raw(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "raw")
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

fn save_png(path: &Path, buf: &[u8], w: usize, h: usize, color: ExtendedColorType) -> Result<()> {
    create_parent(path)?;
    image::save_buffer_with_format(path, buf, w as u32, h as u32, color, ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
}

/// Raw container: four little-endian `u32` dims `(n, c, h, w)` followed
/// by the values as little-endian `f64`.
pub fn write_raw_tensor(path: &Path, t: &Tensor<f64>) -> Result<()> {
    create_parent(path)?;
    let mut buf = Vec::with_capacity(16 + 8 * t.numel());
    for d in t.shape().dims() {
        let d = u32::try_from(d).map_err(|_| Error::format(path, "dimension exceeds u32"))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_raw_tensor(path: &Path) -> Result<Tensor<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::format(path, "truncated header"));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let b: [u8; 4] = bytes[4 * i..4 * i + 4].try_into().expect("4 bytes");
        *d = u32::from_le_bytes(b) as usize;
    }
    let shape = Shape::from_dims(dims);
    let body = &bytes[16..];
    if body.len() != 8 * shape.numel() {
        return Err(Error::format(
            path,
            format!("{} payload bytes for shape {shape}", body.len()),
        ));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Read a `(1, c, h, w)` image with intensities in `[0, 1]`. Gray PNGs
/// give one channel, everything else three; `.raw` files are read as the
/// raw container.
pub fn read_image(path: &Path) -> Result<Tensor<f64>> {
    if is_raw(path) {
        let t = read_raw_tensor(path)?;
        if t.shape().n != 1 {
            return Err(Error::format(path, format!("expected one image, got {}", t.shape())));
        }
        return Ok(t);
    }
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(
        img.color(),
        ColorType::L8 | ColorType::La8 | ColorType::L16 | ColorType::La16
    );
    let (c, data): (usize, Vec<f64>) = if gray {
        (1, img.to_luma16().into_raw().iter().map(|&v| v as f64 / 65535.0).collect())
    } else {
        (3, img.to_rgb16().into_raw().iter().map(|&v| v as f64 / 65535.0).collect())
    };
    let interleaved = Tensor::from_vec(Shape::new(1, h, w, c), data)?;
    Ok(Tensor::from_fn(Shape::new(1, c, h, w), |_, ch, y, x| {
        interleaved.at(0, y, x, ch)
    }))
}

/// Write a `(1, c, h, w)` image with `c` of 1 or 3 as an 8-bit PNG,
/// clamping to `[0, 1]`, or as the raw container for `.raw` paths.
pub fn write_image(path: &Path, image: &Tensor<f64>) -> Result<()> {
    if is_raw(path) {
        return write_raw_tensor(path, image);
    }
    let s = image.shape();
    let color = match (s.n, s.c) {
        (1, 1) => ExtendedColorType::L8,
        (1, 3) => ExtendedColorType::Rgb8,
        _ => {
            return Err(Error::invalid(
                "write_image",
                format!("expected a (1, 1|3, h, w) image, got {s}"),
            ))
        }
    };
    let mut buf = Vec::with_capacity(s.numel());
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..s.c {
                buf.push((image.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    save_png(path, &buf, s.w, s.h, color)
}

fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = decode(path)?;
    if !matches!(img.color(), ColorType::L8 | ColorType::La8) {
        return Err(Error::format(
            path,
            format!("expected an 8-bit gray mask, got {:?}", img.color()),
        ));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((h, w, img.to_luma8().into_raw()))
}

/// Read a gray PNG whose values are class labels `0..4`.
pub fn read_label_mask(path: &Path) -> Result<LabelMask> {
    let (h, w, data) = read_gray(path)?;
    LabelMask::new(h, w, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_label_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    save_png(path, mask.data(), mask.width(), mask.height(), ExtendedColorType::L8)
}

/// Read a gray PNG; zero is background, anything else foreground.
pub fn read_binary_mask(path: &Path) -> Result<BinaryMask> {
    let (h, w, data) = read_gray(path)?;
    BinaryMask::new(h, w, data.into_iter().map(|v| v != 0).collect())
}

/// Write a mask as a gray PNG of zeros and ones.
pub fn write_binary_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.dims();
    let buf: Vec<u8> = mask.data().iter().map(|&v| v as u8).collect();
    save_png(path, &buf, w, h, ExtendedColorType::L8)
}

/// Parse an index file. Relative paths are resolved against the index's
/// directory; blank lines and `#` comments are skipped.
pub fn read_index(path: &Path) -> Result<Vec<IndexEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, image, mask] = fields[..] else {
            return Err(Error::format(
                path,
                format!("line {}: expected 3 tab-separated fields, got {}", no + 1, fields.len()),
            ));
        };
        out.push(IndexEntry {
            id: id.to_string(),
            image: base.join(image),
            mask: base.join(mask),
        });
    }
    Ok(out)
}

/// Write an index, storing paths as given.
pub fn write_index(path: &Path, entries: &[IndexEntry]) -> Result<()> {
    create_parent(path)?;
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!(
            "{}\t{}\t{}\n",
            e.id,
            e.image.display(),
            e.mask.display()
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Load every sample listed in an index.
pub fn load_dataset(index: &Path, format: MaskFormat) -> Result<Vec<Sample>> {
    read_index(index)?
        .into_iter()
        .map(|e| {
            let image = read_image(&e.image)?;
            let mask = match format {
                MaskFormat::Labels => read_label_mask(&e.mask)?,
                MaskFormat::Raw { threshold } => {
                    let (h, w, data) = read_gray(&e.mask)?;
                    let t = threshold.unwrap_or_else(|| default_size_threshold(h, w));
                    encode_labels(&RawMask::new(h, w, data)?, t)
                        .map_err(|err| Error::format(&e.mask, err.to_string()))?
                }
            };
            Sample::new(e.id, image, mask)
        })
        .collect()
}

/// Write `images/<id>.png`, `masks/<id>.png` and the index into `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<Vec<IndexEntry>> {
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let e = IndexEntry {
            id: s.id.clone(),
            image: PathBuf::from("images").join(format!("{}.png", s.id)),
            mask: PathBuf::from("masks").join(format!("{}.png", s.id)),
        };
        write_image(&dir.join(&e.image), &s.image)?;
        write_label_mask(&dir.join(&e.mask), &s.mask)?;
        entries.push(e);
    }
    write_index(&dir.join(INDEX_FILE), &entries)?;
    Ok(entries)
}
