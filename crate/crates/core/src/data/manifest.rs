use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoreType {
    #[serde(rename = "MOS")]
    Mos,
    #[serde(rename = "DMOS")]
    Dmos,
}

impl fmt::Display for ScoreType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreType::Mos => "MOS",
            ScoreType::Dmos => "DMOS",
        })
    }
}

impl FromStr for ScoreType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "MOS" => Ok(ScoreType::Mos),
            "DMOS" => Ok(ScoreType::Dmos),
            other => Err(Error::InvalidArgument(format!("unknown score type {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Synthetic,
    Authentic,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Synthetic => "synthetic",
            Domain::Authentic => "authentic",
        })
    }
}

/// One labelled image. `path` is relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub raw_score: f64,
    pub score_type: ScoreType,
    pub score_range: (f64, f64),
    pub distortion_type: Option<String>,
    pub distortion_level: Option<u32>,
    pub domain: Domain,
}

impl ImageRecord {
    pub fn validate(&self) -> Result<(), String> {
        let (lo, hi) = self.score_range;
        if !self.raw_score.is_finite() || !lo.is_finite() || !hi.is_finite() {
            return Err("non-finite score".into());
        }
        if !(lo..=hi).contains(&self.raw_score) {
            return Err(format!(
                "raw_score {} outside declared range [{lo}, {hi}]",
                self.raw_score
            ));
        }
        if self.domain == Domain::Authentic && (self.distortion_type.is_some() || self.distortion_level.is_some()) {
            return Err("authentic record must not carry distortion type or level".into());
        }
        if self.distortion_level == Some(0) {
            return Err("distortion_level must be >= 1".into());
        }
        Ok(())
    }

    pub fn normalized_score(&self) -> Result<NormalizedScore> {
        normalize_score(self.raw_score, self.score_type, self.score_range)
    }

    /// Key that ties together all distorted versions of one pristine image.
    ///
    /// Synthetic sets store the distortions of a reference in one directory, so
    /// the parent directory is the group; authentic images are their own group.
    pub fn content_group(&self) -> String {
        match (self.domain, self.path.parent()) {
            (Domain::Synthetic, Some(parent)) if !parent.as_os_str().is_empty() => {
                parent.to_string_lossy().into_owned()
            }
            _ => self.path.to_string_lossy().into_owned(),
        }
    }
}

/// Quality on a common scale: [0, 1], higher is better.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct NormalizedScore(pub f64);

impl NormalizedScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Linear min-max map onto [0, 1]; DMOS is flipped so that lower DMOS maps higher.
pub fn normalize_score(raw: f64, score_type: ScoreType, (lo, hi): (f64, f64)) -> Result<NormalizedScore> {
    let width = hi - lo;
    if !(width > 0.0) {
        return Err(Error::InvalidArgument(format!("zero-width score range [{lo}, {hi}]")));
    }
    if !(lo..=hi).contains(&raw) {
        return Err(Error::InvalidArgument(format!("score {raw} outside [{lo}, {hi}]")));
    }
    let v = match score_type {
        ScoreType::Mos => (raw - lo) / width,
        ScoreType::Dmos => (hi - raw) / width,
    };
    Ok(NormalizedScore(v))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
    pub records: Vec<ImageRecord>,
    pub reference_paths: Option<Vec<PathBuf>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    path: String,
    raw_score: f64,
    score_type: String,
    score_lo: f64,
    score_hi: f64,
    distortion_type: Option<String>,
    distortion_level: Option<u32>,
    domain: String,
}

pub const MANIFEST_HEADER: [&str; 8] = [
    "path",
    "raw_score",
    "score_type",
    "score_lo",
    "score_hi",
    "distortion_type",
    "distortion_level",
    "domain",
];

/// Sidecar listing pristine references of a synthetic set, one path per line.
pub fn references_sidecar(manifest_path: &Path) -> PathBuf {
    let mut s = manifest_path.as_os_str().to_owned();
    s.push(".refs");
    PathBuf::from(s)
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, root: impl Into<PathBuf>, records: Vec<ImageRecord>) -> Self {
        Self {
            name: name.into(),
            root: root.into(),
            records,
            reference_paths: None,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    /// Same name/root, a subset of the records.
    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Self {
        Self {
            name: name.into(),
            root: self.root.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            reference_paths: self.reference_paths.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.records.is_empty() {
            return Err("empty manifest".into());
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.path) {
                return Err(format!("duplicate path {}", r.path.display()));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        for r in &self.records {
            w.serialize(Row {
                path: r.path.to_string_lossy().into_owned(),
                raw_score: r.raw_score,
                score_type: r.score_type.to_string(),
                score_lo: r.score_range.0,
                score_hi: r.score_range.1,
                distortion_type: r.distortion_type.clone(),
                distortion_level: r.distortion_level,
                domain: r.domain.to_string(),
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        if let Some(refs) = &self.reference_paths {
            let body: String = refs.iter().map(|p| format!("{}\n", p.display())).collect();
            let side = references_sidecar(path);
            std::fs::write(&side, body).map_err(|e| Error::io(&side, e))?;
        }
        Ok(())
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(e)
    }
}

/// Reads and validates a manifest CSV. The manifest name is the file stem.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.is_file() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found"),
        ));
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let header = rdr.headers()?.clone();
    if header.iter().ne(MANIFEST_HEADER.iter().copied()) {
        return Err(Error::Manifest {
            path: path.into(),
            msg: format!("expected header {}", MANIFEST_HEADER.join(",")),
        });
    }
    let row_err = |row: usize, msg: String| Error::ManifestRow {
        path: path.into(),
        row,
        msg,
    };
    let mut records = Vec::new();
    for (i, row) in rdr.deserialize::<Row>().enumerate() {
        let idx = i + 1;
        let row = row.map_err(|e| row_err(idx, e.to_string()))?;
        let domain = match row.domain.as_str() {
            "synthetic" => Domain::Synthetic,
            "authentic" => Domain::Authentic,
            other => return Err(row_err(idx, format!("unknown domain {other:?}"))),
        };
        let record = ImageRecord {
            path: PathBuf::from(&row.path),
            raw_score: row.raw_score,
            score_type: row.score_type.parse().map_err(|e: Error| row_err(idx, e.to_string()))?,
            score_range: (row.score_lo, row.score_hi),
            distortion_type: row.distortion_type.filter(|s| !s.is_empty()),
            distortion_level: row.distortion_level,
            domain,
        };
        record.validate().map_err(|msg| row_err(idx, msg))?;
        records.push(record);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let side = references_sidecar(path);
    let reference_paths = if side.is_file() {
        let body = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        Some(body.lines().filter(|l| !l.is_empty()).map(PathBuf::from).collect())
    } else {
        None
    };
    let manifest = DatasetManifest {
        name,
        root,
        records,
        reference_paths,
    };
    manifest
        .validate()
        .map_err(|msg| Error::Manifest { path: path.into(), msg })?;
    Ok(manifest)
}
