//! NPY tensors, PNG rasters, JSON manifests/configs and the batch archive layout.
//!
//! Archive directory layout:
//!
//! ```text
//! images.npy   float32 [N, C, H, W], little-endian, C order
//! labels.npy   uint8   [N, num_classes], multi-hot
//! plan.json    the BatchPlan that produced the batch
//! ```
//!
//! Rows `0..batch_size` are the regular images, the rest are mixed images in
//! plan order.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::augment::{AugConfig, BatchPlan, MultiHotLabel, SplicedBatch};
use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

const NPY_MAGIC: &[u8] = b"\x93NUMPY";
const NPY_ALIGN: usize = 64;

pub const ARCHIVE_IMAGES: &str = "images.npy";
pub const ARCHIVE_LABELS: &str = "labels.npy";
pub const ARCHIVE_PLAN: &str = "plan.json";

#[derive(Clone, Debug, PartialEq)]
pub enum NpyData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl NpyData {
    fn len(&self) -> usize {
        match self {
            NpyData::F32(v) => v.len(),
            NpyData::U8(v) => v.len(),
        }
    }

    fn descr(&self) -> &'static str {
        match self {
            NpyData::F32(_) => "<f4",
            NpyData::U8(_) => "|u1",
        }
    }
}

/// A C-ordered n-dimensional array as stored in an NPY file.
#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    shape: Vec<usize>,
    data: NpyData,
}

impl NpyArray {
    pub fn new(shape: Vec<usize>, data: NpyData) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "npy shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, NpyData::F32(data))
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(shape, NpyData::U8(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &NpyData {
        &self.data
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            NpyData::F32(v) => Ok(v),
            NpyData::U8(_) => Err(Error::Npy("expected float32 data, found uint8".into())),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            NpyData::U8(v) => Ok(v),
            NpyData::F32(_) => Err(Error::Npy("expected uint8 data, found float32".into())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let shape = match self.shape.len() {
            1 => format!("({},)", self.shape[0]),
            _ => format!(
                "({})",
                self.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
            ),
        };
        let mut header = format!(
            "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
            self.data.descr(),
            shape
        );
        let unpadded = NPY_MAGIC.len() + 2 + 2 + header.len() + 1;
        let pad = (NPY_ALIGN - unpadded % NPY_ALIGN) % NPY_ALIGN;
        header.push_str(&" ".repeat(pad));
        header.push('\n');

        let mut out = Vec::with_capacity(unpadded + pad + self.data.len() * 4);
        out.extend_from_slice(NPY_MAGIC);
        out.extend_from_slice(&[1, 0]);
        out.extend_from_slice(&(header.len() as u16).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        match &self.data {
            NpyData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            NpyData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
            return Err(Error::Npy("bad magic string".into()));
        }
        if bytes[6] != 1 || bytes[7] != 0 {
            return Err(Error::Npy(format!(
                "unsupported format version {}.{}",
                bytes[6], bytes[7]
            )));
        }
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        let body = 10 + hlen;
        if bytes.len() < body {
            return Err(Error::Npy("truncated header".into()));
        }
        let header = std::str::from_utf8(&bytes[10..body])
            .map_err(|_| Error::Npy("header is not ASCII".into()))?;
        let (descr, fortran, shape) = parse_header(header)?;
        if fortran {
            return Err(Error::Npy("fortran_order=True is not supported".into()));
        }
        let count: usize = shape.iter().product();
        let payload = &bytes[body..];
        let data = match descr.as_str() {
            "<f4" => {
                if payload.len() != count * 4 {
                    return Err(Error::Npy(format!(
                        "payload has {} bytes, shape needs {}",
                        payload.len(),
                        count * 4
                    )));
                }
                NpyData::F32(
                    payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            }
            "|u1" | "<u1" => {
                if payload.len() != count {
                    return Err(Error::Npy(format!(
                        "payload has {} bytes, shape needs {}",
                        payload.len(),
                        count
                    )));
                }
                NpyData::U8(payload.to_vec())
            }
            other => return Err(Error::Npy(format!("unsupported dtype '{other}'"))),
        };
        Self::new(shape, data)
    }
}

fn dict_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let tag = format!("'{key}':");
    let start = header
        .find(&tag)
        .ok_or_else(|| Error::Npy(format!("header has no '{key}' key")))?;
    Ok(header[start + tag.len()..].trim_start())
}

fn parse_header(header: &str) -> Result<(String, bool, Vec<usize>)> {
    let header = header.trim_end();
    if !header.starts_with('{') || !header.ends_with('}') {
        return Err(Error::Npy(format!("header is not a dict: {header}")));
    }

    let rest = dict_value(header, "descr")?;
    let descr = rest
        .strip_prefix('\'')
        .and_then(|r| r.split('\'').next())
        .ok_or_else(|| Error::Npy("descr is not a string".into()))?
        .to_string();

    let rest = dict_value(header, "fortran_order")?;
    let fortran = if rest.starts_with("False") {
        false
    } else if rest.starts_with("True") {
        true
    } else {
        return Err(Error::Npy("fortran_order is not a bool".into()));
    };

    let rest = dict_value(header, "shape")?;
    let inner = rest
        .strip_prefix('(')
        .and_then(|r| r.split(')').next())
        .ok_or_else(|| Error::Npy("shape is not a tuple".into()))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::Npy(format!("bad shape entry '{s}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((descr, fortran, shape))
}

pub fn write_npy(array: &NpyArray, path: &Path) -> Result<()> {
    fs::write(path, array.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_npy(path: &Path) -> Result<NpyArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    NpyArray::from_bytes(&bytes)
}

/// Stacks equally shaped images into a `[N, C, H, W]` float32 array.
pub fn images_to_npy(images: &[ImageTensor]) -> Result<NpyArray> {
    let Some(first) = images.first() else {
        return NpyArray::f32(vec![0, 0, 0, 0], Vec::new());
    };
    let (c, h, w) = first.shape();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for (i, img) in images.iter().enumerate() {
        if img.shape() != (c, h, w) {
            return Err(Error::Shape(format!(
                "image {i} is {:?}, expected {:?}",
                img.shape(),
                (c, h, w)
            )));
        }
        data.extend_from_slice(img.data());
    }
    NpyArray::f32(vec![images.len(), c, h, w], data)
}

pub fn npy_to_images(array: &NpyArray) -> Result<Vec<ImageTensor>> {
    let data = array.as_f32()?;
    let &[n, c, h, w] = array.shape() else {
        return Err(Error::Npy(format!("expected 4-d images, got {:?}", array.shape())));
    };
    let step = c * h * w;
    if step == 0 {
        return if n == 0 {
            Ok(Vec::new())
        } else {
            Err(Error::Npy(format!("zero-sized image shape {:?}", array.shape())))
        };
    }
    (0..n)
        .map(|i| ImageTensor::new(c, h, w, data[i * step..(i + 1) * step].to_vec()))
        .collect()
}

pub fn labels_to_npy(labels: &[MultiHotLabel], classes: usize) -> Result<NpyArray> {
    let mut data = Vec::with_capacity(labels.len() * classes);
    for (i, l) in labels.iter().enumerate() {
        if l.len() != classes {
            return Err(Error::Shape(format!(
                "label {i} has {} classes, expected {classes}",
                l.len()
            )));
        }
        data.extend(l.to_bytes());
    }
    NpyArray::u8(vec![labels.len(), classes], data)
}

pub fn npy_to_labels(array: &NpyArray) -> Result<Vec<MultiHotLabel>> {
    let data = array.as_u8()?;
    let &[n, c] = array.shape() else {
        return Err(Error::Npy(format!("expected 2-d labels, got {:?}", array.shape())));
    };
    (0..n)
        .map(|i| MultiHotLabel::from_bits(&data[i * c..(i + 1) * c]))
        .collect()
}

/// Reads an 8-bit grayscale or RGB PNG, mapping pixels to `[0, 1]`.
pub fn decode_image(path: &Path) -> Result<ImageTensor> {
    let bad = |msg: String| Error::Image {
        path: path.to_path_buf(),
        msg,
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| bad(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        other => {
            return Err(bad(format!(
                "unsupported pixel format {:?}; only 8-bit gray or RGB is accepted",
                other.color()
            )))
        }
    };
    // interleaved HWC -> planar CHW
    let mut data = vec![0f32; channels * h * w];
    for (i, &v) in raw.iter().enumerate() {
        let (pix, ch) = (i / channels, i % channels);
        data[ch * h * w + pix] = v as f32 / 255.0;
    }
    ImageTensor::new(channels, h, w, data)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1- or 3-channel image as an 8-bit PNG, clamping to `[0, 1]`.
pub fn encode_png(img: &ImageTensor, path: &Path) -> Result<()> {
    let (c, h, w) = img.shape();
    let bad = |msg: String| Error::Image {
        path: path.to_path_buf(),
        msg,
    };
    let mut raw = vec![0u8; c * h * w];
    for ch in 0..c {
        for (pix, &v) in img.channel(ch).iter().enumerate() {
            raw[pix * c + ch] = quantize(v);
        }
    }
    let dynimg = match c {
        1 => DynamicImage::ImageLuma8(
            GrayImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| bad("bad buffer".into()))?,
        ),
        3 => DynamicImage::ImageRgb8(
            RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| bad("bad buffer".into()))?,
        ),
        _ => return Err(bad(format!("cannot encode {c} channels as PNG"))),
    };
    dynimg
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| bad(e.to_string()))
}

/// Writes every mixed image of `batch` as `mixed_XXXX.png` under `dir`.
pub fn encode_preview(batch: &SplicedBatch, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    batch
        .mixed
        .iter()
        .enumerate()
        .map(|(i, (img, _))| {
            let path = dir.join(format!("mixed_{i:04}.png"));
            encode_png(img, &path)?;
            Ok(path)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn validate(&self, path: &Path) -> Result<()> {
        let schema = |msg: String| Error::Schema {
            path: path.to_path_buf(),
            msg,
        };
        if self.classes.is_empty() {
            return Err(schema("manifest lists no classes".into()));
        }
        let mut seen = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if let Some(&k) = e.labels.iter().find(|&&k| k >= self.classes.len()) {
                return Err(schema(format!(
                    "entry {i} ({}) has class index {k}, but only {} classes exist",
                    e.image.display(),
                    self.classes.len()
                )));
            }
            if !seen.insert(&e.image) {
                return Err(schema(format!(
                    "entry {i} repeats image path {}",
                    e.image.display()
                )));
            }
        }
        Ok(())
    }

    pub fn label(&self, i: usize) -> Result<MultiHotLabel> {
        MultiHotLabel::from_indices(self.classes.len(), &self.entries[i].labels)
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    manifest.validate(path)?;
    Ok(manifest)
}

pub fn load_aug_config(path: &Path) -> Result<AugConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: AugConfig = serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// One batch as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchArchive {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<MultiHotLabel>,
    pub plan: BatchPlan,
}

impl BatchArchive {
    pub fn from_spliced(batch: &SplicedBatch) -> Self {
        let (images, labels) = batch.iter().cloned().unzip();
        Self {
            images,
            labels,
            plan: batch.plan.clone(),
        }
    }

    pub fn regular_labels(&self) -> &[MultiHotLabel] {
        &self.labels[..self.plan.batch_size.min(self.labels.len())]
    }

    pub fn mixed_labels(&self) -> &[MultiHotLabel] {
        &self.labels[self.plan.batch_size.min(self.labels.len())..]
    }

    pub fn write(&self, dir: &Path, classes: usize) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_npy(&images_to_npy(&self.images)?, &dir.join(ARCHIVE_IMAGES))?;
        write_npy(&labels_to_npy(&self.labels, classes)?, &dir.join(ARCHIVE_LABELS))?;
        write_json(&self.plan, &dir.join(ARCHIVE_PLAN))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let images = npy_to_images(&read_npy(&dir.join(ARCHIVE_IMAGES))?)?;
        let labels = npy_to_labels(&read_npy(&dir.join(ARCHIVE_LABELS))?)?;
        let plan: BatchPlan = read_json(&dir.join(ARCHIVE_PLAN))?;
        let schema = |msg: String| Error::Schema {
            path: dir.to_path_buf(),
            msg,
        };
        if images.len() != labels.len() {
            return Err(schema(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if plan.batch_size + plan.n_mixed() != labels.len() {
            return Err(schema(format!(
                "plan describes {} rows, archive has {}",
                plan.batch_size + plan.n_mixed(),
                labels.len()
            )));
        }
        plan.validate()?;
        Ok(Self {
            images,
            labels,
            plan,
        })
    }
}
