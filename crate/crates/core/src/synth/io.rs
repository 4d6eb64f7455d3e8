//! On-disk corpus layout: `manifest.json`, `annotations.jsonl` and binary
//! PGM rasters under `images/`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BBoxAnnotation, Corpus, DefectImage, GrayImage, Manifest, PixelBox, Provenance};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationLine {
    id: String,
    file: String,
    class_id: u32,
    boxes: Vec<PixelBox>,
    provenance: Provenance,
}

pub fn manifest_bytes(manifest: &Manifest) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(manifest)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Hex SHA-256 of the serialized manifest.
pub fn manifest_hash(manifest: &Manifest) -> Result<String> {
    Ok(hex::encode(Sha256::digest(manifest_bytes(manifest)?)))
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|msg| Error::invalid(format!("{}: {msg}", path.display())))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
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
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?);
    }
    if fields[0] != "P5" {
        return Err(format!("expected P5, found {}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|e| format!("{s}: {e}"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported"));
    }
    // exactly one whitespace byte separates the header from the raster
    let data = bytes.get(pos + 1..).ok_or("missing raster")?;
    if data.len() != w * h {
        return Err(format!("raster has {} bytes, expected {}", data.len(), w * h));
    }
    GrayImage::new(w, h, data.to_vec()).map_err(|e| e.to_string())
}

fn image_file(id: &str) -> String {
    format!("images/{id}.pgm")
}

/// Write the corpus under `dir`, which is created if needed.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let manifest_path = dir.join("manifest.json");
    fs::write(&manifest_path, manifest_bytes(&corpus.manifest)?).map_err(|e| Error::io(&manifest_path, e))?;

    let ann_path = dir.join("annotations.jsonl");
    let file = fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut out = BufWriter::new(file);
    for im in &corpus.images {
        let file = image_file(&im.id);
        write_pgm(&dir.join(&file), &im.image)?;
        let line = AnnotationLine {
            id: im.id.clone(),
            file,
            class_id: im.class_id,
            boxes: im.boxes().collect(),
            provenance: im.provenance.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io(&ann_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&ann_path, e))
}

/// Load and validate a corpus written by [`write_corpus`].
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.json");
    let raw = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&raw)?;

    let ann_path = dir.join("annotations.jsonl");
    let file = fs::File::open(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut images = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&ann_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let a: AnnotationLine = serde_json::from_str(&line)?;
        if a.file.contains("..") {
            return Err(Error::invalid(format!("{}: file escapes corpus", a.id)));
        }
        let image = read_pgm(&dir.join(&a.file))?;
        images.push(DefectImage {
            annotations: a
                .boxes
                .into_iter()
                .map(|bbox| BBoxAnnotation {
                    class_id: a.class_id,
                    bbox,
                })
                .collect(),
            id: a.id,
            image,
            class_id: a.class_id,
            provenance: a.provenance,
        });
    }
    let corpus = Corpus { manifest, images };
    corpus.validate()?;
    Ok(corpus)
}
