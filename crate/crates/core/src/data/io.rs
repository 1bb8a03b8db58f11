//! Dataset manifests and external image ingestion.
//!
//! A stored dataset is a directory with
//! - `dataset.csv`: `id,class,group_id,flipped,source`
//! - `images.bin`: container (magic `UATTRIMG`) of f32 images in id order;
//!   the header carries the spec and id list.
//!
//! External corpora are a directory of 8-bit grayscale PGM files plus a CSV
//! of `filename,class`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSpec, Example};
use crate::container::{decode, encode, read_file, write_atomic, Payload, IMAGES_MAGIC};
use crate::diffusion::schedule::ImageShape;
use crate::error::{Error, Result};

pub const MANIFEST_CSV: &str = "dataset.csv";
pub const IMAGES_BIN: &str = "images.bin";

#[derive(Serialize, Deserialize)]
struct ImagesHeader {
    spec: DatasetSpec,
    ids: Vec<u64>,
    classes: Vec<usize>,
    flipped: Vec<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: u64,
    class: usize,
    group_id: Option<u64>,
    flipped: bool,
    source: String,
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in &ds.examples {
        w.serialize(ManifestRow {
            id: e.id,
            class: e.class,
            group_id: ds.group_of.get(&e.id).copied(),
            flipped: e.flipped,
            source: ds.sources.get(&e.id).cloned().unwrap_or_else(|| "synthetic".into()),
        })?;
    }
    let csv_bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&dir.join(MANIFEST_CSV), &csv_bytes)?;

    let header = ImagesHeader {
        spec: ds.spec.clone(),
        ids: ds.ids().collect(),
        classes: ds.examples.iter().map(|e| e.class).collect(),
        flipped: ds.examples.iter().map(|e| e.flipped).collect(),
    };
    let pixels: Vec<f32> = ds.examples.iter().flat_map(|e| e.x.iter().copied()).collect();
    write_atomic(&dir.join(IMAGES_BIN), &encode(IMAGES_MAGIC, &header, &Payload::F32(pixels))?)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let bin = dir.join(IMAGES_BIN);
    let (header, payload): (ImagesHeader, _) = decode(IMAGES_MAGIC, &read_file(&bin)?, &bin)?;
    let Payload::F32(pixels) = payload else {
        return Err(Error::format(&bin, "image payload must be f32"));
    };
    let shape = header.spec.image_shape;
    let n = header.ids.len();
    if pixels.len() != n * shape.numel() || header.classes.len() != n || header.flipped.len() != n {
        return Err(Error::format(&bin, "image payload does not match id list"));
    }
    let examples: Vec<Example> = header
        .ids
        .iter()
        .enumerate()
        .map(|(i, &id)| Example {
            id,
            class: header.classes[i],
            shape,
            x: pixels[i * shape.numel()..(i + 1) * shape.numel()].to_vec(),
            flipped: header.flipped[i],
        })
        .collect();

    let csv_path = dir.join(MANIFEST_CSV);
    let csv_bytes = read_file(&csv_path)?;
    let mut rdr = csv::Reader::from_reader(csv_bytes.as_slice());
    let mut group_of = BTreeMap::new();
    let mut sources = BTreeMap::new();
    let mut rows = 0;
    for row in rdr.deserialize() {
        let row: ManifestRow = row?;
        if !header.ids.contains(&row.id) {
            return Err(Error::format(&csv_path, format!("id {} not in image blob", row.id)));
        }
        if let Some(g) = row.group_id {
            group_of.insert(row.id, g);
        }
        if row.source != "synthetic" {
            sources.insert(row.id, row.source);
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::format(&csv_path, format!("{rows} rows for {n} images")));
    }
    Ok(Dataset {
        examples,
        spec: header.spec,
        group_of,
        sources,
    })
}

/// Decodes a binary (P5) or ASCII (P2) 8-bit PGM into `(width, height, values in [0,1])`.
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut pos = 0;
    let mut token = || -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let bad = |why: &str| Error::format(path, why.to_string());
    let magic = token().ok_or_else(|| bad("empty file"))?;
    let mut num = |what: &str| -> Result<usize> {
        token()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(&format!("bad {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let count = width * height;
    let values: Vec<f64> = match magic.as_str() {
        "P5" => {
            // a single whitespace byte separates the header from the raster
            let start = pos + 1;
            if bytes.len() < start + count {
                return Err(bad("truncated raster"));
            }
            bytes[start..start + count].iter().map(|&b| b as f64 / maxval as f64).collect()
        }
        "P2" => {
            let mut v = Vec::with_capacity(count);
            for _ in 0..count {
                v.push(num("pixel")? as f64 / maxval as f64);
            }
            v
        }
        _ => return Err(bad("not a PGM file")),
    };
    Ok((width, height, values))
}

/// Nearest-neighbour resize of a grayscale raster to `shape`, rescaled to
/// [-1, 1] and replicated over channels.
pub fn resize_nearest(src_w: usize, src_h: usize, values: &[f64], shape: ImageShape) -> Vec<f32> {
    let mut out = vec![0.0f32; shape.numel()];
    for c in 0..shape.channels {
        for y in 0..shape.height {
            let sy = (y * src_h) / shape.height;
            for x in 0..shape.width {
                let sx = (x * src_w) / shape.width;
                out[(c * shape.height + y) * shape.width + x] = (values[sy * src_w + sx] * 2.0 - 1.0) as f32;
            }
        }
    }
    out
}

#[derive(Debug, Deserialize)]
struct IngestRow {
    filename: String,
    class: usize,
}

/// Reads `csv_path` (`filename,class`) and the PGM files it names under `dir`.
/// Ids follow CSV row order.
pub fn ingest_pgm(dir: &Path, csv_path: &Path, shape: ImageShape, num_classes: usize) -> Result<Dataset> {
    let csv_bytes = read_file(csv_path)?;
    let mut rdr = csv::Reader::from_reader(csv_bytes.as_slice());
    let mut examples = Vec::new();
    let mut sources = BTreeMap::new();
    for (i, row) in rdr.deserialize().enumerate() {
        let row: IngestRow = row?;
        if row.class >= num_classes {
            return Err(Error::format(csv_path, format!("class {} out of range", row.class)));
        }
        let path = dir.join(&row.filename);
        let (w, h, v) = parse_pgm(&read_file(&path)?, &path)?;
        let id = i as u64;
        examples.push(Example::with_shape(id, row.class, shape, resize_nearest(w, h, &v, shape)));
        sources.insert(id, row.filename);
    }
    let spec = DatasetSpec {
        n: examples.len(),
        num_classes,
        image_shape: shape,
        planted_groups: Vec::new(),
        seed: 0,
    };
    Ok(Dataset {
        examples,
        spec,
        group_of: BTreeMap::new(),
        sources,
    })
}
