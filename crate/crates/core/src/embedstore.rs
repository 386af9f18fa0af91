//! Precomputed segment embeddings.
//!
//! A manifest (JSON) names the embedding parts, their widths and tensor
//! files, and points at an index file of `video_id<TAB>t<TAB>row` lines.
//! Tensor files are raw little-endian float32, row-major, no header, all
//! sharing the same row count and index.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MANIFEST_VERSION: u32 = 1;
pub const DTYPE_F32LE: &str = "f32le";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("manifest {path} is invalid: {message}")]
    BadManifest { path: PathBuf, message: String },
    #[error("embedding part {0:?} is corrupt (size does not match the manifest)")]
    ManifestCorrupt(String),
    #[error("moment ({video_id}, {t}) has no embedding")]
    MomentNotEmbedded { video_id: String, t: i64 },
    #[error("unknown embedding part {0:?}")]
    UnknownPart(String),
    #[error("empty part selection")]
    EmptySelection,
    #[error("reference weights are degenerate: {0}")]
    DegenerateWeights(String),
    #[error("bad layout string {0:?}")]
    BadLayout(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> EmbedError + '_ {
    move |source| EmbedError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartSpec {
    pub name: String,
    pub dim: usize,
    /// Relative to the manifest's directory.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub version: u32,
    pub dtype: String,
    pub row_count: usize,
    pub index: String,
    pub parts: Vec<PartSpec>,
}

/// A validated manifest with its index and tensors loaded.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    pub manifest: ManifestFile,
    pub root: PathBuf,
    index: HashMap<(String, i64), usize>,
    data: HashMap<String, Vec<f32>>,
}

/// The ordered parts making up an assembled input vector, persisted with
/// every trained model as e.g. `transcript:32,slide:32`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub parts: Vec<(String, usize)>,
}

impl Layout {
    pub fn dim(&self) -> usize {
        self.parts.iter().map(|(_, d)| d).sum()
    }

    /// Coordinate range of a part inside the assembled vector.
    pub fn range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let mut off = 0;
        for (n, d) in &self.parts {
            if n == name {
                return Some(off..off + d);
            }
            off += d;
        }
        None
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.parts.iter().map(|(n, _)| n.as_str())
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: Vec<String> = self.parts.iter().map(|(n, d)| format!("{n}:{d}")).collect();
        f.write_str(&s.join(","))
    }
}

impl FromStr for Layout {
    type Err = EmbedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EmbedError::BadLayout(s.to_string());
        let parts = s
            .split(',')
            .map(|p| {
                let (n, d) = p.rsplit_once(':').ok_or_else(bad)?;
                let d: usize = d.parse().map_err(|_| bad())?;
                if n.is_empty() || d == 0 {
                    return Err(bad());
                }
                Ok((n.to_string(), d))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Layout { parts })
    }
}

/// Opens a manifest, checking every tensor file's byte length eagerly.
pub fn open_manifest(path: impl AsRef<Path>) -> Result<EmbeddingStore, EmbedError> {
    let path = path.as_ref();
    let bad = |message: String| EmbedError::BadManifest {
        path: path.to_path_buf(),
        message,
    };
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: ManifestFile = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(bad(format!("unsupported version {}", manifest.version)));
    }
    if manifest.dtype != DTYPE_F32LE {
        return Err(bad(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    if manifest.parts.is_empty() {
        return Err(bad("no parts".into()));
    }
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut data = HashMap::new();
    for part in &manifest.parts {
        if part.dim == 0 {
            return Err(bad(format!("part {:?} has zero width", part.name)));
        }
        if data.contains_key(&part.name) {
            return Err(bad(format!("part {:?} listed twice", part.name)));
        }
        let file = root.join(&part.file);
        let bytes = fs::read(&file).map_err(io_err(&file))?;
        if bytes.len() != manifest.row_count * part.dim * 4 {
            return Err(EmbedError::ManifestCorrupt(part.name.clone()));
        }
        let floats = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        data.insert(part.name.clone(), floats);
    }
    let index_path = root.join(&manifest.index);
    let index = read_index(&index_path, manifest.row_count)?;
    Ok(EmbeddingStore {
        manifest,
        root,
        index,
        data,
    })
}

fn read_index(path: &Path, row_count: usize) -> Result<HashMap<(String, i64), usize>, EmbedError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let bad = |line: usize, message: &str| EmbedError::BadManifest {
        path: path.to_path_buf(),
        message: format!("index line {line}: {message}"),
    };
    let mut index = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(v), Some(t), Some(r), None) = (cols.next(), cols.next(), cols.next(), cols.next())
        else {
            return Err(bad(i + 1, "expected three tab-separated columns"));
        };
        let t: i64 = t.parse().map_err(|_| bad(i + 1, "bad second"))?;
        let r: usize = r.parse().map_err(|_| bad(i + 1, "bad row"))?;
        if r >= row_count {
            return Err(bad(i + 1, "row out of range"));
        }
        if index.insert((v.to_string(), t), r).is_some() {
            return Err(bad(i + 1, "duplicate moment"));
        }
    }
    Ok(index)
}

impl EmbeddingStore {
    pub fn row_count(&self) -> usize {
        self.manifest.row_count
    }

    pub fn part(&self, name: &str) -> Option<&PartSpec> {
        self.manifest.parts.iter().find(|p| p.name == name)
    }

    pub fn row_of(&self, video_id: &str, t: i64) -> Option<usize> {
        self.index.get(&(video_id.to_string(), t)).copied()
    }

    /// Seconds of a video that have embeddings, ascending.
    pub fn moments_of(&self, video_id: &str) -> Vec<i64> {
        let mut ts: Vec<i64> = self
            .index
            .keys()
            .filter(|(v, _)| v == video_id)
            .map(|(_, t)| *t)
            .collect();
        ts.sort_unstable();
        ts
    }

    /// All indexed moments in `(video_id, t)` order.
    pub fn index_entries(&self) -> Vec<(String, i64, usize)> {
        let mut v: Vec<(String, i64, usize)> = self
            .index
            .iter()
            .map(|((vid, t), r)| (vid.clone(), *t, *r))
            .collect();
        v.sort();
        v
    }

    pub fn layout(&self, selection: &[impl AsRef<str>]) -> Result<Layout, EmbedError> {
        if selection.is_empty() {
            return Err(EmbedError::EmptySelection);
        }
        let parts = selection
            .iter()
            .map(|n| {
                let n = n.as_ref();
                self.part(n)
                    .map(|p| (p.name.clone(), p.dim))
                    .ok_or_else(|| EmbedError::UnknownPart(n.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Layout { parts })
    }

    /// The stored slice of one part for one row.
    pub fn part_row(&self, name: &str, row: usize) -> Result<&[f32], EmbedError> {
        let spec = self
            .part(name)
            .ok_or_else(|| EmbedError::UnknownPart(name.to_string()))?;
        let data = &self.data[name];
        Ok(&data[row * spec.dim..(row + 1) * spec.dim])
    }

    /// Concatenates the selected parts, in selection order, for a row.
    pub fn assemble_row(&self, layout: &Layout, row: usize, out: &mut Vec<f64>) -> Result<(), EmbedError> {
        for (name, _) in &layout.parts {
            out.extend(self.part_row(name, row)?.iter().map(|&x| f64::from(x)));
        }
        Ok(())
    }

    /// `e_x` for a moment: the selected parts concatenated in the given
    /// order, without normalization.
    pub fn assemble(
        &self,
        selection: &[impl AsRef<str>],
        video_id: &str,
        t: i64,
    ) -> Result<Vec<f64>, EmbedError> {
        let layout = self.layout(selection)?;
        let row = self
            .row_of(video_id, t)
            .ok_or_else(|| EmbedError::MomentNotEmbedded {
                video_id: video_id.to_string(),
                t,
            })?;
        let mut out = Vec::with_capacity(layout.dim());
        self.assemble_row(&layout, row, &mut out)?;
        Ok(out)
    }

    /// Weighted mean of a video's assembled embeddings,
    /// `sum_t w_t e_x(t) / sum_t w_t`.
    pub fn reference_embedding(
        &self,
        selection: &[impl AsRef<str>],
        video_id: &str,
        weights: &BTreeMap<i64, f64>,
    ) -> Result<Vec<f64>, EmbedError> {
        let layout = self.layout(selection)?;
        let rows = weights
            .iter()
            .map(|(&t, &w)| {
                let mut v = Vec::with_capacity(layout.dim());
                let row = self.row_of(video_id, t).ok_or_else(|| {
                    EmbedError::MomentNotEmbedded {
                        video_id: video_id.to_string(),
                        t,
                    }
                })?;
                self.assemble_row(&layout, row, &mut v)?;
                Ok((v, w))
            })
            .collect::<Result<Vec<_>, EmbedError>>()?;
        weighted_mean(rows.iter().map(|(v, w)| (v.as_slice(), *w)), layout.dim())
    }
}

/// Weighted mean of equally long rows.
pub fn weighted_mean<'a>(
    rows: impl IntoIterator<Item = (&'a [f64], f64)>,
    dim: usize,
) -> Result<Vec<f64>, EmbedError> {
    let mut acc = vec![0.0; dim];
    let mut total = 0.0;
    for (row, w) in rows {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(EmbedError::DegenerateWeights(format!("weight {w} is not a nonnegative number")));
        }
        total += w;
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += w * x;
        }
    }
    if total <= 0.0 {
        return Err(EmbedError::DegenerateWeights("total weight is zero".into()));
    }
    acc.iter_mut().for_each(|a| *a /= total);
    Ok(acc)
}

/// Writes a manifest, its index and one tensor file per part.
pub struct ManifestWriter {
    dir: PathBuf,
    parts: Vec<PartSpec>,
    writers: Vec<BufWriter<fs::File>>,
    index: Vec<(String, i64)>,
}

impl ManifestWriter {
    pub fn create(dir: impl AsRef<Path>, parts: &[(String, usize)]) -> Result<Self, EmbedError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut specs = Vec::new();
        let mut writers = Vec::new();
        for (name, dim) in parts {
            let file = format!("{name}.f32");
            let path = dir.join(&file);
            writers.push(BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?));
            specs.push(PartSpec {
                name: name.clone(),
                dim: *dim,
                file,
            });
        }
        Ok(Self {
            dir,
            parts: specs,
            writers,
            index: Vec::new(),
        })
    }

    /// Appends one row; `values` holds one slice per part in manifest order.
    pub fn push(&mut self, video_id: &str, t: i64, values: &[&[f32]]) -> Result<(), EmbedError> {
        assert_eq!(values.len(), self.parts.len());
        for ((spec, w), v) in self.parts.iter().zip(&mut self.writers).zip(values) {
            assert_eq!(v.len(), spec.dim, "part {} width", spec.name);
            for x in *v {
                w.write_all(&x.to_le_bytes()).map_err(io_err(&self.dir))?;
            }
        }
        self.index.push((video_id.to_string(), t));
        Ok(())
    }

    /// Flushes everything and returns the manifest path.
    pub fn finish(mut self) -> Result<PathBuf, EmbedError> {
        for w in &mut self.writers {
            w.flush().map_err(io_err(&self.dir))?;
        }
        let index_path = self.dir.join("index.tsv");
        let mut idx = BufWriter::new(fs::File::create(&index_path).map_err(io_err(&index_path))?);
        for (row, (v, t)) in self.index.iter().enumerate() {
            writeln!(idx, "{v}\t{t}\t{row}").map_err(io_err(&index_path))?;
        }
        idx.flush().map_err(io_err(&index_path))?;
        let manifest = ManifestFile {
            version: MANIFEST_VERSION,
            dtype: DTYPE_F32LE.into(),
            row_count: self.index.len(),
            index: "index.tsv".into(),
            parts: self.parts,
        };
        let path = self.dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(path)
    }
}
