//! Small image corpora: IDX binaries (`images.idx` + `labels.idx`) or a
//! directory of binary PPM/PGM files with a `labels.csv` of
//! `filename,label` rows.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::augment::InputLayout;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const IDX_IMAGES: &str = "images.idx";
pub const IDX_LABELS: &str = "labels.idx";
pub const LABELS_CSV: &str = "labels.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFormat {
    Idx,
    PpmDir,
}

pub fn load_image_dataset(dir: &Path, format: ImageFormat) -> Result<LabeledDataset> {
    match format {
        ImageFormat::Idx => load_idx(&dir.join(IDX_IMAGES), &dir.join(IDX_LABELS)),
        ImageFormat::PpmDir => load_ppm_dir(dir),
    }
}

fn corrupt(offset: usize, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        offset: offset as u64,
        reason: reason.into(),
    }
}

/// Parses an unsigned-byte IDX file into its dimensions and payload.
fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 {
        return Err(corrupt(0, "truncated IDX magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(corrupt(0, "bad IDX magic"));
    }
    if bytes[2] != 0x08 {
        return Err(corrupt(2, format!("unsupported IDX element type {:#04x}", bytes[2])));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(corrupt(bytes.len(), "truncated IDX dimensions"));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(corrupt(
            header + payload.len().min(expected),
            format!("IDX payload holds {} bytes, dimensions need {expected}", payload.len()),
        ));
    }
    Ok((dims, payload))
}

fn encode_idx(dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Images shaped `[N, H, W]` (one channel) or `[N, C, H, W]`, labels `[N]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let image_bytes = read(images)?;
    let (dims, pixels) = parse_idx(&image_bytes)?;
    let (n, c, h, w) = match dims[..] {
        [n, h, w] => (n, 1, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(corrupt(3, format!("IDX images need 3 or 4 dimensions, got {}", dims.len()))),
    };
    let label_bytes = read(labels)?;
    let (ldims, raw_labels) = parse_idx(&label_bytes)?;
    if ldims.len() != 1 {
        return Err(corrupt(3, "IDX labels must be one-dimensional"));
    }
    if ldims[0] != n {
        return Err(Error::MalformedRecord {
            index: ldims[0].min(n),
            reason: format!("{} labels for {n} images", ldims[0]),
        });
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let inputs = Tensor::matrix(n, c * h * w, pixels.iter().map(|&b| b as f64 / 255.0).collect())?;
    LabeledDataset::new(inputs, labels, num_classes, InputLayout::Image { channels: c, height: h, width: w })
}

fn image_dims(ds: &LabeledDataset) -> Result<(usize, usize, usize)> {
    match ds.layout {
        InputLayout::Image {
            channels,
            height,
            width,
        } => Ok((channels, height, width)),
        InputLayout::Vector => Err(Error::Invalid("dataset does not hold images".into())),
    }
}

fn to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn write_idx(ds: &LabeledDataset, images: &Path, labels: &Path) -> Result<()> {
    let (c, h, w) = image_dims(ds)?;
    let dims = if c == 1 { vec![ds.len(), h, w] } else { vec![ds.len(), c, h, w] };
    let label_bytes: Vec<u8> = ds
        .labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::Invalid(format!("label {l} does not fit a byte"))))
        .collect::<Result<_>>()?;
    fs::write(images, encode_idx(&dims, &to_bytes(ds.inputs.data()))).map_err(|e| Error::io(images, e))?;
    fs::write(labels, encode_idx(&[ds.len()], &label_bytes)).map_err(|e| Error::io(labels, e))
}

fn is_pnm(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm"))
}

/// Reads every `.ppm`/`.pgm` in `dir`, ordered by file name, labelled via
/// `labels.csv`.
pub fn load_ppm_dir(dir: &Path) -> Result<LabeledDataset> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| is_pnm(p))
        .collect();
    files.sort();

    let csv_path = dir.join(LABELS_CSV);
    let mut reader = csv::Reader::from_path(&csv_path).map_err(|e| Error::MalformedRecord {
        index: 0,
        reason: format!("{}: {e}", csv_path.display()),
    })?;
    let mut by_name = std::collections::BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::MalformedRecord {
            index: i,
            reason: e.to_string(),
        })?;
        let (Some(name), Some(label)) = (row.get(0), row.get(1)) else {
            return Err(Error::MalformedRecord {
                index: i,
                reason: "expected filename,label".into(),
            });
        };
        let label: usize = label.trim().parse().map_err(|_| Error::MalformedRecord {
            index: i,
            reason: format!("label {label:?} is not a non-negative integer"),
        })?;
        by_name.insert(name.trim().to_string(), label);
    }
    if by_name.len() != files.len() {
        return Err(Error::MalformedRecord {
            index: by_name.len().min(files.len()),
            reason: format!("{} label rows for {} images", by_name.len(), files.len()),
        });
    }

    let mut shape = None;
    let mut data = Vec::new();
    let mut labels = Vec::with_capacity(files.len());
    for (i, path) in files.iter().enumerate() {
        let malformed = |reason: String| Error::MalformedRecord { index: i, reason };
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let label = *by_name
            .get(&name)
            .ok_or_else(|| malformed(format!("{name} missing from {LABELS_CSV}")))?;
        let bytes = read(path)?;
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)
            .map_err(|e| malformed(format!("{name}: {e}")))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (c, interleaved) = if img.color().has_color() {
            (3, img.to_rgb8().into_raw())
        } else {
            (1, img.to_luma8().into_raw())
        };
        if *shape.get_or_insert((c, h, w)) != (c, h, w) {
            return Err(malformed(format!("{name} is {c}x{h}x{w}, expected {:?}", shape.unwrap())));
        }
        for ch in 0..c {
            data.extend((0..h * w).map(|p| interleaved[p * c + ch] as f64 / 255.0));
        }
        labels.push(label);
    }
    let (c, h, w) = shape.ok_or_else(|| Error::Invalid(format!("no images in {}", dir.display())))?;
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(
        Tensor::matrix(labels.len(), c * h * w, data)?,
        labels,
        num_classes,
        InputLayout::Image { channels: c, height: h, width: w },
    )
}

/// Writes `img_00000.ppm` (or `.pgm`) files plus `labels.csv`.
pub fn write_ppm_dir(ds: &LabeledDataset, dir: &Path) -> Result<()> {
    let (c, h, w) = image_dims(ds)?;
    if c != 1 && c != 3 {
        return Err(Error::Invalid(format!("PNM holds 1 or 3 channels, not {c}")));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(LABELS_CSV);
    let mut writer = csv::Writer::from_path(&csv_path).map_err(|e| Error::Invalid(e.to_string()))?;
    writer
        .write_record(["filename", "label"])
        .map_err(|e| Error::Invalid(e.to_string()))?;
    for i in 0..ds.len() {
        let planar = to_bytes(ds.inputs.row_slice(i));
        let interleaved: Vec<u8> = (0..h * w)
            .flat_map(|p| (0..c).map(move |ch| (ch, p)))
            .map(|(ch, p)| planar[ch * h * w + p])
            .collect();
        let name = format!("img_{i:05}.{}", if c == 3 { "ppm" } else { "pgm" });
        let color = if c == 3 { image::ExtendedColorType::Rgb8 } else { image::ExtendedColorType::L8 };
        let path = dir.join(&name);
        image::save_buffer_with_format(&path, &interleaved, w as u32, h as u32, color, image::ImageFormat::Pnm)
            .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        writer
            .write_record([name, ds.labels[i].to_string()])
            .map_err(|e| Error::Invalid(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(&csv_path, e))
}
