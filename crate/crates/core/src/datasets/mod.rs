//! Feature banks, triplet files and dataset directories.
//!
//! A feature bank is an `AFB1` file:
//!
//! ```text
//! "AFB1" | version: u32 = 1 | rows: u32 | dim: u32 | rows*dim f32
//! ```
//!
//! all little-endian, with a sidecar `<path>.ids.jsonl` holding one
//! `{"row": i, "id": "..."}` object per line.

mod synth;

pub use synth::{generate_synthetic, LatentTable, SynthData, SynthSpec};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm, NORM_EPS};

pub const BANK_MAGIC: &[u8; 4] = b"AFB1";
const BANK_VERSION: u32 = 1;
const BANK_HEADER: usize = 16;

/// Dense `f32` embedding rows keyed by unique string ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
}

impl FeatureBank {
    pub fn new(dim: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::shape("feature bank dim must be positive"));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::shape(format!(
                "{} ids of dim {dim} need {} values, got {}",
                ids.len(),
                ids.len() * dim,
                data.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "bank row {} is not finite",
                i / dim
            )));
        }
        Ok(Self { dim, ids, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Binary payload of the `.afb` file (header plus rows).
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(BANK_HEADER + 4 * self.data.len());
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&BANK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct IdLine {
    row: usize,
    id: String,
}

/// Sidecar path holding a bank's ids.
pub fn ids_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids.jsonl");
    PathBuf::from(s)
}

pub fn write_feature_bank(bank: &FeatureBank, path: &Path) -> Result<()> {
    fs::write(path, bank.encode())?;
    let mut w = BufWriter::new(File::create(ids_sidecar(path))?);
    for (row, id) in bank.ids.iter().enumerate() {
        serde_json::to_writer(
            &mut w,
            &IdLine {
                row,
                id: id.clone(),
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_bank(path: &Path) -> Result<FeatureBank> {
    let bytes = fs::read(path)?;
    let truncated = |detail: String| Error::TruncatedFile {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 4 || &bytes[..4] != BANK_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "AFB1",
        });
    }
    if bytes.len() < BANK_HEADER {
        return Err(truncated(format!(
            "header needs {BANK_HEADER} bytes, file has {}",
            bytes.len()
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    let version = word(1);
    if version != BANK_VERSION {
        return Err(Error::BadVersion(version));
    }
    let (rows, dim) = (word(2) as usize, word(3) as usize);
    let expected = BANK_HEADER + 4 * rows * dim;
    if bytes.len() < expected {
        return Err(truncated(format!(
            "{rows}x{dim} payload needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::shape(format!(
            "{} trailing bytes in {}",
            bytes.len() - expected,
            path.display()
        )));
    }
    let data: Vec<f32> = bytes[BANK_HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();

    let sidecar = ids_sidecar(path);
    let reader = BufReader::new(File::open(&sidecar)?);
    let mut ids = Vec::with_capacity(rows);
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: IdLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: sidecar.clone(),
            line: n + 1,
            detail: e.to_string(),
        })?;
        if parsed.row != ids.len() {
            return Err(Error::Parse {
                path: sidecar.clone(),
                line: n + 1,
                detail: format!("expected row {}, found {}", ids.len(), parsed.row),
            });
        }
        ids.push(parsed.id);
    }
    if ids.len() != rows {
        return Err(truncated(format!("{} ids for {rows} rows", ids.len())));
    }
    FeatureBank::new(dim, ids, data)
}

/// A bank widened to `f64`, optionally L2-normalized, with an id index.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn from_bank(bank: &FeatureBank, normalize: bool) -> Result<Self> {
        let dim = bank.dim;
        let mut data: Vec<f64> = bank.data.iter().map(|&v| f64::from(v)).collect();
        if normalize {
            for row in data.chunks_exact_mut(dim) {
                let n = norm(row);
                if !(n > NORM_EPS) {
                    return Err(Error::NearZeroNorm { norm: n });
                }
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
        }
        let index = bank
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Ok(Self {
            dim,
            ids: bank.ids.clone(),
            index,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn require(&self, id: &str) -> Result<&[f64]> {
        self.get(id).ok_or_else(|| Error::UnknownId {
            id: id.to_string(),
            line: None,
        })
    }
}

/// Anything that can answer "does this id exist".
pub trait IdSet {
    fn contains_id(&self, id: &str) -> bool;
}

impl IdSet for FeatureBank {
    fn contains_id(&self, id: &str) -> bool {
        self.ids.iter().any(|x| x == id)
    }
}

impl IdSet for EmbeddingTable {
    fn contains_id(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }
}

impl IdSet for HashSet<String> {
    fn contains_id(&self, id: &str) -> bool {
        self.contains(id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::BadSplit {
                value: other.to_string(),
                line: 0,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRecord {
    #[serde(rename = "ref")]
    pub ref_id: String,
    #[serde(rename = "mod")]
    pub mod_id: String,
    #[serde(rename = "tgt")]
    pub tgt_id: String,
    pub split: Split,
    /// Optional grouping, e.g. garment category for per-category recalls.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

#[derive(Deserialize)]
struct RawRecord {
    #[serde(rename = "ref")]
    ref_id: String,
    #[serde(rename = "mod")]
    mod_id: String,
    #[serde(rename = "tgt")]
    tgt_id: String,
    split: String,
    #[serde(default)]
    category: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct SubsetLine {
    query: usize,
    members: Vec<String>,
}

/// Triplet records plus optional per-record candidate subsets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripletSet {
    pub records: Vec<TripletRecord>,
    /// Record index -> candidate ids.
    pub subsets: BTreeMap<usize, Vec<String>>,
}

impl TripletSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record indices of `split`, in file order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    pub fn has_split(&self, split: Split) -> bool {
        self.records.iter().any(|r| r.split == split)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_subsets(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (&query, members) in &self.subsets {
            serde_json::to_writer(
                &mut w,
                &SubsetLine {
                    query,
                    members: members.clone(),
                },
            )?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

fn nonblank_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push((n + 1, line));
        }
    }
    Ok(out)
}

/// Reads a triplet JSONL file, resolving reference/target ids against
/// `images` and modifier ids against `modifiers`.
pub fn load_triplets(
    path: &Path,
    images: &impl IdSet,
    modifiers: &impl IdSet,
) -> Result<TripletSet> {
    let mut records = Vec::new();
    for (line, text) in nonblank_lines(path)? {
        let raw: RawRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            detail: e.to_string(),
        })?;
        let split = raw.split.parse::<Split>().map_err(|_| Error::BadSplit {
            value: raw.split.clone(),
            line,
        })?;
        for (id, ok) in [
            (&raw.ref_id, images.contains_id(&raw.ref_id)),
            (&raw.mod_id, modifiers.contains_id(&raw.mod_id)),
            (&raw.tgt_id, images.contains_id(&raw.tgt_id)),
        ] {
            if !ok {
                return Err(Error::UnknownId {
                    id: id.clone(),
                    line: Some(line),
                });
            }
        }
        records.push(TripletRecord {
            ref_id: raw.ref_id,
            mod_id: raw.mod_id,
            tgt_id: raw.tgt_id,
            split,
            category: raw.category,
        });
    }
    Ok(TripletSet {
        records,
        subsets: BTreeMap::new(),
    })
}

/// Attaches a subsets JSONL file (`{"query": record_index, "members": [...]}`).
pub fn load_subsets(path: &Path, set: &mut TripletSet, images: &impl IdSet) -> Result<()> {
    for (line, text) in nonblank_lines(path)? {
        let parsed: SubsetLine = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            detail: e.to_string(),
        })?;
        let parse_err = |detail: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            detail,
        };
        let Some(record) = set.records.get(parsed.query) else {
            return Err(parse_err(format!(
                "query {} outside {} records",
                parsed.query,
                set.records.len()
            )));
        };
        if let Some(bad) = parsed.members.iter().find(|m| !images.contains_id(m)) {
            return Err(Error::UnknownId {
                id: bad.clone(),
                line: Some(line),
            });
        }
        if !parsed.members.contains(&record.tgt_id) {
            return Err(parse_err(format!(
                "subset of query {} does not contain its target",
                parsed.query
            )));
        }
        set.subsets.insert(parsed.query, parsed.members);
    }
    Ok(())
}

pub fn read_gallery(path: &Path) -> Result<Vec<String>> {
    Ok(nonblank_lines(path)?
        .into_iter()
        .map(|(_, l)| l.trim().to_string())
        .collect())
}

pub fn write_gallery(ids: &[String], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for id in ids {
        writeln!(w, "{id}")?;
    }
    w.flush()?;
    Ok(())
}

/// File locations of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPaths {
    pub images: PathBuf,
    pub modifiers: PathBuf,
    pub triplets: PathBuf,
    pub subsets: Option<PathBuf>,
    pub gallery: Option<PathBuf>,
}

impl DatasetPaths {
    /// Standard layout: `images.afb`, `modifiers.afb`, `triplets.jsonl`, and
    /// when present `subsets.jsonl` and `gallery.txt`.
    pub fn in_dir(dir: &Path) -> Self {
        let optional = |name: &str| Some(dir.join(name)).filter(|p| p.exists());
        Self {
            images: dir.join("images.afb"),
            modifiers: dir.join("modifiers.afb"),
            triplets: dir.join("triplets.jsonl"),
            subsets: optional("subsets.jsonl"),
            gallery: optional("gallery.txt"),
        }
    }
}

/// Everything needed to train and evaluate, held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: EmbeddingTable,
    pub modifiers: EmbeddingTable,
    pub triplets: TripletSet,
    /// Candidate image ids; every image when no gallery file is given.
    pub gallery: Vec<String>,
}

impl Dataset {
    pub fn from_banks(
        images: &FeatureBank,
        modifiers: &FeatureBank,
        triplets: TripletSet,
        gallery: Option<Vec<String>>,
    ) -> Result<Self> {
        let images = EmbeddingTable::from_bank(images, true)?;
        let modifiers = EmbeddingTable::from_bank(modifiers, true)?;
        let gallery = gallery.unwrap_or_else(|| images.ids().to_vec());
        let mut seen = HashSet::with_capacity(gallery.len());
        for id in &gallery {
            images.require(id)?;
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            images,
            modifiers,
            triplets,
            gallery,
        })
    }

    pub fn load(paths: &DatasetPaths) -> Result<Self> {
        let images = read_feature_bank(&paths.images)?;
        let modifiers = read_feature_bank(&paths.modifiers)?;
        let mut triplets = load_triplets(&paths.triplets, &images, &modifiers)?;
        if let Some(p) = &paths.subsets {
            load_subsets(p, &mut triplets, &images)?;
        }
        let gallery = paths.gallery.as_deref().map(read_gallery).transpose()?;
        Self::from_banks(&images, &modifiers, triplets, gallery)
    }
}
