//! Dataset records, image loading, JSONL persistence and the stratified 8:1:1 split.

pub mod synthetic;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use base64::Engine;
use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::visual::ImageTensor;

pub const RECORDS_FILE: &str = "records.jsonl";
const DATA_URI_PREFIX: &str = "data:";

/// One line of a dataset file. `image` is a path relative to the dataset directory or a
/// `data:` URI carrying a base64 PNG/PPM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub text: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

/// A record with its image decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub image: ImageTensor,
    pub label: Option<u8>,
}

impl Sample {
    pub fn label_f64(&self) -> Result<f64> {
        self.label
            .map(f64::from)
            .ok_or_else(|| Error::Data(format!("record {} has no label", self.id)))
    }
}

fn records_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(RECORDS_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Parses JSONL records; errors carry the 1-based line number.
pub fn parse_records(reader: impl BufRead) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        if let Some(l) = rec.label {
            if l > 1 {
                return Err(Error::Data(format!("line {}: label {l} is not 0 or 1", i + 1)));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

/// Reads `records.jsonl` from a dataset directory (or the given file) and decodes every
/// image to `height x width`.
pub fn load_dataset(path: &Path, height: usize, width: usize) -> Result<Vec<Sample>> {
    let file = records_path(path);
    let base = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let reader = BufReader::new(fs::File::open(&file).map_err(|e| Error::io(&file, e))?);
    let records = parse_records(reader)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{} contains no records", file.display())));
    }
    records.into_iter().map(|r| decode_record(r, &base, height, width)).collect()
}

pub fn decode_record(rec: SampleRecord, base: &Path, height: usize, width: usize) -> Result<Sample> {
    let image = load_image(&rec.image, base, height, width)
        .map_err(|e| Error::Data(format!("record {}: {e}", rec.id)))?;
    Ok(Sample { id: rec.id, text: rec.text, image, label: rec.label })
}

/// Decodes a PNG/PPM path or `data:` URI into `[0, 1]` floats, nearest-neighbour resized.
pub fn load_image(spec: &str, base: &Path, height: usize, width: usize) -> Result<ImageTensor> {
    let decoded = if let Some(rest) = spec.strip_prefix(DATA_URI_PREFIX) {
        let payload = rest.split_once(',').map(|(_, p)| p).ok_or_else(|| Error::Data("malformed data URI".into()))?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(payload.trim())
            .map_err(|e| Error::Data(format!("bad base64 image: {e}")))?;
        image::load_from_memory(&bytes).map_err(|e| Error::Data(format!("undecodable inline image: {e}")))?
    } else {
        let path = base.join(spec);
        if !path.exists() {
            return Err(Error::Data(format!("missing image file {}", path.display())));
        }
        image::open(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
    };
    let rgb = decoded.to_rgb8();
    let rgb = if (rgb.height() as usize, rgb.width() as usize) != (height, width) {
        image::imageops::resize(&rgb, width as u32, height as u32, FilterType::Nearest)
    } else {
        rgb
    };
    to_tensor(&rgb)
}

fn to_tensor(rgb: &image::RgbImage) -> Result<ImageTensor> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    ImageTensor::new(h, w, data)
}

pub fn to_rgb8(img: &ImageTensor) -> image::RgbImage {
    image::RgbImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let p = img.pixel(y as usize, x as usize);
        image::Rgb(p.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
    })
}

/// Binary PPM (P6) bytes of an image.
pub fn encode_ppm(img: &ImageTensor) -> Vec<u8> {
    let rgb = to_rgb8(img);
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(rgb.as_raw());
    out
}

/// `data:` URI embedding the image as base64 PPM.
pub fn inline_ppm(img: &ImageTensor) -> String {
    let b64 = base64::engine::general_purpose::STANDARD.encode(encode_ppm(img));
    format!("data:image/x-portable-pixmap;base64,{b64}")
}

/// Writes `records.jsonl` plus one PNG per sample under `images/`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let file = dir.join(RECORDS_FILE);
    let mut out = std::io::BufWriter::new(fs::File::create(&file).map_err(|e| Error::io(&file, e))?);
    for s in samples {
        let rel = format!("images/{}.png", s.id);
        let path = dir.join(&rel);
        to_rgb8(&s.image).save(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let rec = SampleRecord { id: s.id.clone(), text: s.text.clone(), image: rel, label: s.label };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(&file, e))?;
    }
    out.flush().map_err(|e| Error::io(&file, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

impl<T> DatasetSplit<T> {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

/// Deterministic 8:1:1 split. Each label class is shuffled and spread evenly along the
/// ordering before cutting, so every part keeps the global class ratio to within a record.
pub fn split_8_1_1<T: Clone>(items: &[T], label: impl Fn(&T) -> Option<u8>, seed: u64) -> DatasetSplit<T> {
    let mut rng = Rng::new(seed).fork(0x5b1f);
    let mut groups: Vec<(Option<u8>, Vec<usize>)> = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let l = label(item);
        match groups.iter_mut().find(|(g, _)| *g == l) {
            Some((_, v)) => v.push(i),
            None => groups.push((l, vec![i])),
        }
    }
    groups.sort_by_key(|(l, _)| *l);
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(items.len());
    for (gi, (_, idx)) in groups.iter_mut().enumerate() {
        rng.shuffle(idx);
        let n = idx.len() as f64;
        keyed.extend(idx.iter().enumerate().map(|(r, &i)| ((r as f64 + 0.5) / n, gi, i)));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = items.len();
    let n_train = (n as f64 * 0.8).round() as usize;
    let n_val = ((n as f64 * 0.1).round() as usize).min(n - n_train);
    let pick = |range: std::ops::Range<usize>| keyed[range].iter().map(|&(_, _, i)| items[i].clone()).collect();
    DatasetSplit { train: pick(0..n_train), validation: pick(n_train..n_train + n_val), test: pick(n_train + n_val..n) }
}
