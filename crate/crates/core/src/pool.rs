//! Experience pool: record schema, manifest storage and fold partitioning.
//!
//! A pool lives in a directory holding a `pool.manifest` file and an
//! `images/` subdirectory. The manifest is UTF-8 JSON Lines: the first line
//! is a header object carrying the manifest version, every following line is
//! one [`ExperienceRecord`]. Image bytes are never interpreted.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "pool.manifest";
pub const IMAGES_DIR: &str = "images";
pub const MANIFEST_VERSION: u32 = 1;

/// Spacing of the force grid that ground-truth forces are reported on.
pub const FORCE_GRID_N: f64 = 0.25;
const GRID_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("no {MANIFEST_FILE} found in {0}")]
    MissingManifest(PathBuf),
    #[error("record {id}: invalid field `{field}`: {reason}")]
    SchemaViolation {
        id: String,
        field: &'static str,
        reason: String,
    },
    #[error("record {id}: image {path} is not a readable file")]
    DanglingImageRef { id: String, path: PathBuf },
    #[error("duplicate record id {0}")]
    DuplicateId(String),
    #[error("manifest line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("cannot split {records} records into {folds} folds")]
    TooFewRecords { records: usize, folds: usize },
    #[error("unknown record id {0}")]
    UnknownId(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> PoolError {
    let path = path.into();
    move |source| PoolError::Io { path, source }
}

/// The six semantic object categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Bottles,
    Cylinders,
    Cuboids,
    FragileHeavy,
    FragileLight,
    OddShapes,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Bottles,
        Category::Cylinders,
        Category::Cuboids,
        Category::FragileHeavy,
        Category::FragileLight,
        Category::OddShapes,
    ];

    /// Display label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Category::Bottles => "Bottles",
            Category::Cylinders => "Cylinders",
            Category::Cuboids => "Cuboids",
            Category::FragileHeavy => "Fragile-Heavy",
            Category::FragileLight => "Fragile-Light",
            Category::OddShapes => "Odd Shapes",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Category::ALL
            .into_iter()
            .find(|c| format!("{c:?}").to_ascii_lowercase() == norm)
            .ok_or_else(|| format!("unknown category `{s}`"))
    }
}

/// One prior grasp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceRecord {
    pub id: String,
    pub name: String,
    pub mass_kg: f64,
    pub description: String,
    /// Path of the image relative to the pool directory.
    pub image_ref: String,
    pub f_star_n: f64,
    pub category: Category,
}

/// True when `force` is at least one grid step and lies on the force grid.
pub fn is_on_force_grid(force: f64) -> bool {
    if !force.is_finite() || force < FORCE_GRID_N - GRID_TOLERANCE {
        return false;
    }
    let steps = force / FORCE_GRID_N;
    (steps - steps.round()).abs() <= GRID_TOLERANCE
}

impl ExperienceRecord {
    /// Checks every field invariant that does not need the filesystem.
    pub fn validate_fields(&self) -> Result<(), PoolError> {
        let violation = |field: &'static str, reason: String| PoolError::SchemaViolation {
            id: self.id.clone(),
            field,
            reason,
        };
        if self.id.trim().is_empty() {
            return Err(violation("id", "empty".into()));
        }
        if self.name.trim().is_empty() {
            return Err(violation("name", "empty".into()));
        }
        if !self.mass_kg.is_finite() || self.mass_kg < 0.0 {
            return Err(violation("mass_kg", format!("{} is not a non-negative mass", self.mass_kg)));
        }
        if !is_on_force_grid(self.f_star_n) {
            return Err(violation(
                "f_star_n",
                format!("{} is not a positive multiple of {FORCE_GRID_N} N", self.f_star_n),
            ));
        }
        let image = Path::new(&self.image_ref);
        if self.image_ref.is_empty() || image.is_absolute() {
            return Err(violation("image_ref", "must be a non-empty relative path".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    manifest_version: u32,
}

/// The experience pool. Immutable once loaded.
#[derive(Debug, Clone)]
pub struct Pool {
    pub manifest_version: u32,
    pub records: Vec<ExperienceRecord>,
    /// Directory image refs resolve against, if the pool is backed by disk.
    pub base_dir: Option<PathBuf>,
}

impl PartialEq for Pool {
    fn eq(&self, other: &Self) -> bool {
        self.manifest_version == other.manifest_version && self.records == other.records
    }
}

impl Pool {
    pub fn new(records: Vec<ExperienceRecord>) -> Self {
        Self {
            manifest_version: MANIFEST_VERSION,
            records,
            base_dir: None,
        }
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = Some(dir.into());
        self
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ExperienceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }

    pub fn image_path(&self, record: &ExperienceRecord) -> PathBuf {
        match &self.base_dir {
            Some(dir) => dir.join(&record.image_ref),
            None => PathBuf::from(&record.image_ref),
        }
    }

    pub fn read_image(&self, record: &ExperienceRecord) -> Result<Vec<u8>, PoolError> {
        let path = self.image_path(record);
        fs::read(&path).map_err(|_| PoolError::DanglingImageRef {
            id: record.id.clone(),
            path,
        })
    }

    /// First duplicated id, if any.
    pub fn duplicate_id(&self) -> Option<&str> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .map(|r| r.id.as_str())
            .find(|id| !seen.insert(*id))
    }

    /// Serialized manifest bytes. Stable for a given pool.
    pub fn manifest_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let header = ManifestHeader {
            manifest_version: self.manifest_version,
        };
        serde_json::to_writer(&mut out, &header).expect("header serializes");
        out.push(b'\n');
        for record in &self.records {
            serde_json::to_writer(&mut out, record).expect("record serializes");
            out.push(b'\n');
        }
        out
    }
}

fn parse_manifest(text: &str) -> Result<(u32, Vec<ExperienceRecord>), PoolError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header_line) = lines.next().ok_or(PoolError::Malformed {
        line: 1,
        reason: "missing header line".into(),
    })?;
    let header: ManifestHeader =
        serde_json::from_str(header_line).map_err(|e| PoolError::Malformed {
            line: 1,
            reason: e.to_string(),
        })?;
    let mut records = Vec::new();
    for (idx, line) in lines {
        let record: ExperienceRecord =
            serde_json::from_str(line).map_err(|e| PoolError::Malformed {
                line: idx + 1,
                reason: e.to_string(),
            })?;
        records.push(record);
    }
    Ok((header.manifest_version, records))
}

/// Loads and validates a pool directory.
pub fn load_pool(dir: &Path) -> Result<Pool, PoolError> {
    let manifest = dir.join(MANIFEST_FILE);
    if !manifest.is_file() {
        return Err(PoolError::MissingManifest(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&manifest).map_err(io_err(&manifest))?;
    let (manifest_version, records) = parse_manifest(&text)?;
    let pool = Pool {
        manifest_version,
        records,
        base_dir: Some(dir.to_path_buf()),
    };
    validate_pool(&pool)?;
    Ok(pool)
}

/// Validates field invariants, id uniqueness, and (for disk-backed pools)
/// that every image ref resolves to a readable file.
pub fn validate_pool(pool: &Pool) -> Result<(), PoolError> {
    let mut seen = HashSet::new();
    for record in &pool.records {
        record.validate_fields()?;
        if !seen.insert(record.id.as_str()) {
            return Err(PoolError::DuplicateId(record.id.clone()));
        }
        if pool.base_dir.is_some() {
            let path = pool.image_path(record);
            let readable = fs::File::open(&path)
                .and_then(|f| f.metadata())
                .map(|m| m.is_file())
                .unwrap_or(false);
            if !readable {
                return Err(PoolError::DanglingImageRef {
                    id: record.id.clone(),
                    path,
                });
            }
        }
    }
    Ok(())
}

/// Writes the manifest (whole-file replace) and copies images from the
/// pool's base directory when it differs from `dir`.
pub fn save_pool(pool: &Pool, dir: &Path) -> Result<(), PoolError> {
    if let Some(id) = pool.duplicate_id() {
        return Err(PoolError::DuplicateId(id.to_string()));
    }
    let images = dir.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(io_err(&images))?;

    let same_dir = match &pool.base_dir {
        Some(src) => same_path(src, dir),
        None => true,
    };
    if !same_dir {
        for record in &pool.records {
            let from = pool.image_path(record);
            let to = dir.join(&record.image_ref);
            if let Some(parent) = to.parent() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            fs::copy(&from, &to).map_err(io_err(&from))?;
        }
    }

    let manifest = dir.join(MANIFEST_FILE);
    let tmp = dir.join(format!(".{MANIFEST_FILE}.tmp"));
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&pool.manifest_bytes()).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, &manifest).map_err(io_err(&manifest))?;
    Ok(())
}

fn same_path(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => a == b,
    }
}

/// One cross-validation split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub query_ids: Vec<String>,
    pub pool_ids: Vec<String>,
}

/// Seeded shuffle followed by contiguous slicing. The first `len % n_folds`
/// folds receive one extra query. Both id lists of a fold keep manifest order.
pub fn partition_folds(pool: &Pool, n_folds: usize, seed: u64) -> Result<Vec<Fold>, PoolError> {
    let n = pool.len();
    if n_folds < 2 || n < n_folds {
        return Err(PoolError::TooFewRecords {
            records: n,
            folds: n_folds,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let base = n / n_folds;
    let extra = n % n_folds;
    let mut assignment = vec![0usize; n];
    let mut cursor = 0;
    for fold in 0..n_folds {
        let size = base + usize::from(fold < extra);
        for &idx in &order[cursor..cursor + size] {
            assignment[idx] = fold;
        }
        cursor += size;
    }

    Ok((0..n_folds)
        .map(|fold| {
            let (query, rest): (Vec<_>, Vec<_>) = pool
                .records
                .iter()
                .zip(&assignment)
                .partition(|(_, &f)| f == fold);
            Fold {
                query_ids: query.into_iter().map(|(r, _)| r.id.clone()).collect(),
                pool_ids: rest.into_iter().map(|(r, _)| r.id.clone()).collect(),
            }
        })
        .collect())
}
