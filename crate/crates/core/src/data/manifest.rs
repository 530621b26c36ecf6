//! Dataset manifests: one JSON object per line, one line per image.
//!
//! ```json
//! {"image":"rel/path.png","lot":"L","angle":"A1","date":"2017-01-05","time":"08:30:00",
//!  "spots":[{"id":"s1","quad":[[x,y],[x,y],[x,y],[x,y]],"label":"occupied"}]}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveTime, Timelike};
use serde::{Deserialize, Serialize};

use super::crop::quad_area;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Occupied,
    Empty,
    Unknown,
}

impl Label {
    /// Network class index: 0 = occupied, 1 = empty.
    pub fn class_index(self) -> Option<usize> {
        match self {
            Label::Occupied => Some(0),
            Label::Empty => Some(1),
            Label::Unknown => None,
        }
    }

    pub fn from_class_index(i: usize) -> Label {
        if i == 0 {
            Label::Occupied
        } else {
            Label::Empty
        }
    }

    pub fn is_known(self) -> bool {
        self != Label::Unknown
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Occupied => "occupied",
            Label::Empty => "empty",
            Label::Unknown => "unknown",
        })
    }
}

pub type Quad = [[f64; 2]; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotAnnotation {
    #[serde(rename = "id")]
    pub spot_id: String,
    /// Corners in pixels, clockwise from the corner that maps to the patch's
    /// top-left.
    pub quad: Quad,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    /// Relative to the manifest's directory.
    pub image_path: String,
    pub lot_id: String,
    pub angle_id: String,
    pub date: NaiveDate,
    /// Dense 0-based index of `date` within this record's (lot, angle) stream.
    pub day_index: usize,
    /// Seconds since midnight.
    pub capture_time: u32,
    pub spots: Vec<SpotAnnotation>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    image: String,
    lot: String,
    angle: String,
    date: String,
    time: String,
    spots: Vec<SpotAnnotation>,
}

impl ImageRecord {
    fn to_line(&self) -> ManifestLine {
        let t = self.capture_time;
        ManifestLine {
            image: self.image_path.clone(),
            lot: self.lot_id.clone(),
            angle: self.angle_id.clone(),
            date: self.date.format("%Y-%m-%d").to_string(),
            time: format!("{:02}:{:02}:{:02}", t / 3600, (t / 60) % 60, t % 60),
            spots: self.spots.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub records: Vec<ImageRecord>,
    /// Camera angles in order of first appearance.
    pub angles: Vec<String>,
    /// Directory image paths are relative to.
    pub root: PathBuf,
}

/// Result of [`parse_manifest`]: the manifest plus the number of
/// (lot, angle) streams whose calendar dates had gaps and were renumbered.
#[derive(Debug, Clone)]
pub struct ParsedManifest {
    pub manifest: DatasetManifest,
    pub warnings: usize,
}

impl DatasetManifest {
    /// Builds a manifest from records, deriving the angle list.
    pub fn from_records(name: &str, root: &Path, records: Vec<ImageRecord>) -> Self {
        let mut angles: Vec<String> = Vec::new();
        for r in &records {
            if !angles.contains(&r.angle_id) {
                angles.push(r.angle_id.clone());
            }
        }
        DatasetManifest {
            name: name.to_string(),
            records,
            angles,
            root: root.to_path_buf(),
        }
    }

    /// Same name and root, different records.
    pub fn with_records(&self, records: Vec<ImageRecord>) -> Self {
        let mut angles: Vec<String> = self
            .angles
            .iter()
            .filter(|a| records.iter().any(|r| &r.angle_id == *a))
            .cloned()
            .collect();
        for r in &records {
            if !angles.contains(&r.angle_id) {
                angles.push(r.angle_id.clone());
            }
        }
        DatasetManifest {
            name: self.name.clone(),
            records,
            angles,
            root: self.root.clone(),
        }
    }

    pub fn spot_count(&self) -> usize {
        self.records.iter().map(|r| r.spots.len()).sum()
    }

    /// Number of distinct day indices per (lot, angle) stream.
    pub fn days_per_stream(&self) -> BTreeMap<(String, String), usize> {
        let mut days: BTreeMap<(String, String), BTreeSet<usize>> = BTreeMap::new();
        for r in &self.records {
            days.entry((r.lot_id.clone(), r.angle_id.clone()))
                .or_default()
                .insert(r.day_index);
        }
        days.into_iter().map(|(k, v)| (k, v.len())).collect()
    }

    /// Smallest day count over all streams (0 when empty).
    pub fn min_days(&self) -> usize {
        self.days_per_stream().values().copied().min().unwrap_or(0)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(&r.to_line())?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn image_abs_path(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.image_path)
    }
}

/// Reads a JSON-lines manifest, validates it and assigns dense day indices
/// per (lot, angle).
pub fn parse_manifest(path: &Path) -> Result<ParsedManifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    // A file literally called manifest.jsonl takes its directory's name.
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("manifest");
    let dir_name = path
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|s| s.to_str());
    let name = match (stem, dir_name) {
        ("manifest", Some(d)) => d.to_string(),
        _ => stem.to_string(),
    };
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    let mut last_time: BTreeMap<(String, String, NaiveDate), u32> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Manifest { line: lineno, message };
        let raw: ManifestLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let date = NaiveDate::parse_from_str(&raw.date, "%Y-%m-%d")
            .map_err(|e| bad(format!("date {:?}: {e}", raw.date)))?;
        let time = NaiveTime::parse_from_str(&raw.time, "%H:%M:%S")
            .map_err(|e| bad(format!("time {:?}: {e}", raw.time)))?;
        let capture_time = time.num_seconds_from_midnight();
        for s in &raw.spots {
            if !(quad_area(&s.quad) > 0.0) {
                return Err(bad(format!("spot {:?} has a degenerate quad", s.spot_id)));
            }
        }
        let key = (raw.lot.clone(), raw.angle.clone(), date);
        if let Some(&prev) = last_time.get(&key) {
            if capture_time < prev {
                return Err(bad(format!(
                    "capture time {} precedes an earlier record of the same day",
                    raw.time
                )));
            }
        }
        last_time.insert(key, capture_time);
        records.push(ImageRecord {
            image_path: raw.image,
            lot_id: raw.lot,
            angle_id: raw.angle,
            date,
            day_index: 0,
            capture_time,
            spots: raw.spots,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyManifest(path.to_path_buf()));
    }
    let warnings = assign_day_indices(&mut records);
    Ok(ParsedManifest {
        manifest: DatasetManifest::from_records(&name, &root, records),
        warnings,
    })
}

/// Numbers distinct dates 0..D−1 per (lot, angle). Returns how many streams
/// skipped at least one calendar day.
pub fn assign_day_indices(records: &mut [ImageRecord]) -> usize {
    let mut dates: BTreeMap<(String, String), BTreeSet<NaiveDate>> = BTreeMap::new();
    for r in records.iter() {
        dates.entry((r.lot_id.clone(), r.angle_id.clone()))
            .or_default()
            .insert(r.date);
    }
    let mut warnings = 0;
    let mut index: BTreeMap<(String, String), BTreeMap<NaiveDate, usize>> = BTreeMap::new();
    for (key, set) in dates {
        let sorted: Vec<NaiveDate> = set.into_iter().collect();
        if sorted.windows(2).any(|w| (w[1] - w[0]).num_days() != 1) {
            warnings += 1;
        }
        index.insert(key, sorted.into_iter().enumerate().map(|(i, d)| (d, i)).collect());
    }
    for r in records.iter_mut() {
        r.day_index = index[&(r.lot_id.clone(), r.angle_id.clone())][&r.date];
    }
    warnings
}
