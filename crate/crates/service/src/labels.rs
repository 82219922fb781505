//! Human label records: validation, the append-only log and exports.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use terralabel::superpixels::SegmentMap;

pub const CSV_HEADER: [&str; 6] = ["timestamp", "level", "chip_id", "segment_id", "label", "session"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelLevel {
    Chip,
    Segment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub level: LabelLevel,
    pub chip_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segment_id: Option<usize>,
    pub label: String,
    pub session: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

fn field_error(field: impl Into<String>, message: impl Into<String>) -> FieldError {
    FieldError {
        field: field.into(),
        message: message.into(),
    }
}

/// Existence checks the service can answer; `None` means unknown chip.
pub trait ChipLookup {
    fn segment_count(&self, chip_id: &str) -> Option<usize>;
}

/// Validate one JSON object into a record. A missing `timestamp` is
/// filled with `now`. Every problem is reported, not just the first.
pub fn parse_record(value: &Value, now: u64, chips: &impl ChipLookup) -> Result<LabelRecord, Vec<FieldError>> {
    let mut errors = Vec::new();
    let Some(obj) = value.as_object() else {
        return Err(vec![field_error("", "expected a JSON object")]);
    };
    let known = ["timestamp", "level", "chip_id", "segment_id", "label", "session"];
    for key in obj.keys().filter(|k| !known.contains(&k.as_str())) {
        errors.push(field_error(key.clone(), "unknown field"));
    }
    let timestamp = match obj.get("timestamp") {
        None | Some(Value::Null) => Some(now),
        Some(v) => v.as_u64().or_else(|| {
            errors.push(field_error("timestamp", "must be a non-negative integer (ms since epoch)"));
            None
        }),
    };
    let level = match obj.get("level").and_then(Value::as_str) {
        Some("chip") => Some(LabelLevel::Chip),
        Some("segment") => Some(LabelLevel::Segment),
        _ => {
            errors.push(field_error("level", "must be \"chip\" or \"segment\""));
            None
        }
    };
    let chip_id = match obj.get("chip_id").and_then(Value::as_str) {
        Some(id) if chips.segment_count(id).is_some() => Some(id.to_string()),
        Some(id) => {
            errors.push(field_error("chip_id", format!("unknown chip {id:?}")));
            None
        }
        None => {
            errors.push(field_error("chip_id", "required string"));
            None
        }
    };
    let segment_id = match obj.get("segment_id") {
        None | Some(Value::Null) => None,
        Some(v) => match v.as_u64() {
            Some(s) => Some(s as usize),
            None => {
                errors.push(field_error("segment_id", "must be a non-negative integer"));
                None
            }
        },
    };
    match (level, segment_id) {
        (Some(LabelLevel::Segment), None) if !obj.contains_key("segment_id") || obj["segment_id"].is_null() => {
            errors.push(field_error("segment_id", "required when level is \"segment\""));
        }
        (Some(LabelLevel::Chip), Some(_)) => {
            errors.push(field_error("segment_id", "must be absent when level is \"chip\""));
        }
        _ => {}
    }
    if let (Some(LabelLevel::Segment), Some(id), Some(s)) = (level, chip_id.as_deref(), segment_id) {
        if let Some(count) = chips.segment_count(id) {
            if s >= count {
                errors.push(field_error("segment_id", format!("chip {id} has {count} segments")));
            }
        }
    }
    let label = match obj.get("label").and_then(Value::as_str) {
        Some(l) if !l.trim().is_empty() => Some(l.to_string()),
        _ => {
            errors.push(field_error("label", "required non-empty string"));
            None
        }
    };
    let session = match obj.get("session").and_then(Value::as_str) {
        Some(s) => Some(s.to_string()),
        None => {
            errors.push(field_error("session", "required string"));
            None
        }
    };
    if !errors.is_empty() {
        return Err(errors);
    }
    Ok(LabelRecord {
        timestamp: timestamp.unwrap(),
        level: level.unwrap(),
        chip_id: chip_id.unwrap(),
        segment_id,
        label: label.unwrap(),
        session: session.unwrap(),
    })
}

/// Line-delimited JSON log. Records are only ever appended; each batch is
/// flushed and synced before the call returns.
pub struct LabelLog {
    path: PathBuf,
}

impl LabelLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, records: &[LabelRecord]) -> Result<()> {
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        file.write_all(&buf)?;
        file.sync_data()?;
        Ok(())
    }

    /// Every intact record. A torn final line (crash mid-write) is skipped.
    pub fn read_all(&self) -> Result<Vec<LabelRecord>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for line in BufReader::new(File::open(&self.path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line) {
                Ok(r) => out.push(r),
                Err(e) => log::warn!("skipping unreadable label line in {}: {e}", self.path.display()),
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> Result<usize> {
        Ok(self.read_all()?.len())
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }
}

pub fn to_csv(records: &[LabelRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in records {
        let level = match r.level {
            LabelLevel::Chip => "chip",
            LabelLevel::Segment => "segment",
        };
        let seg = r.segment_id.map(|s| s.to_string()).unwrap_or_default();
        w.write_record([r.timestamp.to_string().as_str(), level, &r.chip_id, &seg, &r.label, &r.session])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Label names in first-seen order get ids 1, 2, ...; 0 is unlabelled.
pub fn label_ids(records: &[LabelRecord]) -> BTreeMap<String, u16> {
    let mut ids = BTreeMap::new();
    for r in records.iter().filter(|r| r.level == LabelLevel::Segment) {
        let next = ids.len() as u16 + 1;
        ids.entry(r.label.clone()).or_insert(next);
    }
    ids
}

/// Per-pixel label ids for one chip. Where a segment was labelled more than
/// once, the latest timestamp wins (file order breaks ties).
pub fn rasterize(chip_id: &str, seg: &SegmentMap, records: &[LabelRecord], ids: &BTreeMap<String, u16>) -> Vec<u16> {
    let mut latest: BTreeMap<usize, (u64, usize)> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if r.level != LabelLevel::Segment || r.chip_id != chip_id {
            continue;
        }
        let Some(s) = r.segment_id.filter(|&s| s < seg.len()) else { continue };
        let e = latest.entry(s).or_insert((r.timestamp, i));
        if r.timestamp >= e.0 {
            *e = (r.timestamp, i);
        }
    }
    let mut per_segment = vec![0u16; seg.len()];
    for (s, (_, i)) in latest {
        per_segment[s] = ids[&records[i].label];
    }
    seg.labels.iter().map(|&l| per_segment[l as usize]).collect()
}

/// Greyscale PNG, 8-bit when every id fits, otherwise 16-bit.
pub fn mask_png(mask: &[u16], height: usize, width: usize) -> Result<Vec<u8>> {
    use image::{ImageBuffer, ImageFormat, Luma};
    let mut out = std::io::Cursor::new(Vec::new());
    if mask.iter().all(|&v| v <= u8::MAX as u16) {
        let img: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(width as u32, height as u32, mask.iter().map(|&v| v as u8).collect())
                .expect("mask size matches");
        img.write_to(&mut out, ImageFormat::Png)?;
    } else {
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(width as u32, height as u32, mask.to_vec()).expect("mask size matches");
        img.write_to(&mut out, ImageFormat::Png)?;
    }
    Ok(out.into_inner())
}

pub fn write_masks(dir: &Path, masks: &[(String, Vec<u8>)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (chip, png) in masks {
        fs::write(dir.join(format!("{chip}.png")), png)?;
    }
    Ok(())
}
