//! On-disk data set: one directory per sequence holding binary frames, a
//! plain-text annotation file and a small metadata file, plus a manifest.
//!
//! Frame file layout (little endian): magic `MEFR`, version u8, dtype u8
//! (0 = u8), channels u16, height u32, width u32, then row-major samples,
//! channel-major.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval_metrics::{read_annotations, write_annotations};
use crate::modality::Modality;
use crate::synthetic_modalities::{Degradation, Sequence, Split, Splits};

const MAGIC: &[u8; 4] = b"MEFR";
const VERSION: u8 = 1;
const DTYPE_U8: u8 = 0;
const HEADER: usize = 4 + 1 + 1 + 2 + 4 + 4;
pub const MANIFEST: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawFrame {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

pub fn encode_frame(f: &RawFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + f.data.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_U8);
    out.extend_from_slice(&(f.channels as u16).to_le_bytes());
    out.extend_from_slice(&(f.height as u32).to_le_bytes());
    out.extend_from_slice(&(f.width as u32).to_le_bytes());
    out.extend_from_slice(&f.data);
    out
}

pub fn decode_frame(bytes: &[u8]) -> Result<RawFrame> {
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(Error::Data("not a frame file".into()));
    }
    if bytes[4] != VERSION || bytes[5] != DTYPE_U8 {
        return Err(Error::Data(format!("unsupported frame version {} / dtype {}", bytes[4], bytes[5])));
    }
    let channels = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let width = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let data = bytes[HEADER..].to_vec();
    if data.len() != channels * height * width {
        return Err(Error::Data(format!(
            "frame holds {} bytes, header says {channels}x{height}x{width}",
            data.len()
        )));
    }
    Ok(RawFrame {
        channels,
        height,
        width,
        data,
    })
}

fn read_frame(path: &Path) -> Result<RawFrame> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_frame(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SequenceMeta {
    id: String,
    degradation: Degradation,
    size: usize,
    length: usize,
}

fn frame_name(t: usize) -> String {
    format!("{t:05}.bin")
}

pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    for sub in ["rgb", "x"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let n = seq.size;
    for t in 0..seq.len() {
        let rgb = RawFrame {
            channels: 3,
            height: n,
            width: n,
            data: seq.rgb[t].clone(),
        };
        write_file(&dir.join("rgb").join(frame_name(t)), &encode_frame(&rgb))?;
        let x = RawFrame {
            channels: 1,
            height: n,
            width: n,
            data: seq.x[t].clone(),
        };
        write_file(&dir.join("x").join(frame_name(t)), &encode_frame(&x))?;
    }
    write_annotations(&dir.join("groundtruth.txt"), &seq.boxes)?;
    let meta = SequenceMeta {
        id: seq.id.clone(),
        degradation: seq.degradation,
        size: n,
        length: seq.len(),
    };
    write_file(&dir.join("sequence.json"), serde_json::to_string_pretty(&meta)?.as_bytes())
}

/// Reads a sequence; `modality` is the manifest label (never stored with
/// the frames).
pub fn read_sequence(dir: &Path, modality: Modality) -> Result<Sequence> {
    let meta_path = dir.join("sequence.json");
    let meta: SequenceMeta =
        serde_json::from_str(&fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
    let boxes = read_annotations(&dir.join("groundtruth.txt"))?;
    if boxes.len() != meta.length {
        return Err(Error::Data(format!("{}: {} annotations for {} frames", dir.display(), boxes.len(), meta.length)));
    }
    let mut rgb = Vec::with_capacity(meta.length);
    let mut x = Vec::with_capacity(meta.length);
    for t in 0..meta.length {
        let f = read_frame(&dir.join("rgb").join(frame_name(t)))?;
        if (f.channels, f.height, f.width) != (3, meta.size, meta.size) {
            return Err(Error::Data(format!("{}: rgb frame {t} has the wrong shape", dir.display())));
        }
        rgb.push(f.data);
        let f = read_frame(&dir.join("x").join(frame_name(t)))?;
        if (f.channels, f.height, f.width) != (1, meta.size, meta.size) {
            return Err(Error::Data(format!("{}: x frame {t} has the wrong shape", dir.display())));
        }
        x.push(f.data);
    }
    Ok(Sequence {
        id: meta.id,
        modality,
        degradation: meta.degradation,
        size: meta.size,
        rgb,
        x,
        boxes,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub modality: Modality,
    pub split: Split,
}

pub fn write_manifest(root: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut text = String::from("path,modality,split\n");
    for r in rows {
        text.push_str(&format!("{},{},{}\n", r.path.display(), r.modality, r.split));
    }
    write_file(&root.join(MANIFEST), text.as_bytes())
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::Data(format!("{}:{}: expected 3 fields", path.display(), i + 1)));
        }
        rows.push(ManifestRow {
            path: PathBuf::from(f[0]),
            modality: f[1].parse()?,
            split: f[2].parse()?,
        });
    }
    Ok(rows)
}

/// Renders and writes both splits under `root`.
pub fn write_dataset(root: &Path, splits: &Splits) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::new();
    for manifest in [&splits.train, &splits.test] {
        for (entry, seq) in manifest.entries.iter().zip(manifest.render()?) {
            let rel = PathBuf::from(entry.split.to_string()).join(&entry.id);
            write_sequence(&root.join(&rel), &seq)?;
            rows.push(ManifestRow {
                path: rel,
                modality: entry.modality,
                split: entry.split,
            });
        }
    }
    write_manifest(root, &rows)?;
    Ok(rows)
}

pub fn load_split(root: &Path, split: Split) -> Result<Vec<Sequence>> {
    read_manifest(root)?
        .iter()
        .filter(|r| r.split == split)
        .map(|r| read_sequence(&root.join(&r.path), r.modality))
        .collect()
}
