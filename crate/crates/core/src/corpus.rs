//! Corpus data model and file I/O.
//!
//! A corpus is an ordered list of utterance records, each carrying either a
//! T x D frame matrix or a precomputed D-dimensional embedding. Corpora are
//! exchanged as JSON Lines manifests; feature matrices live in a binary
//! sidecar (`EMB1` format) referenced from the manifest, while embedding
//! vectors are inlined. Synthetic corpora with a controlled group imbalance
//! are generated from a [`GroupMixSpec`].
//!
//! Feature values are stored as `f32`, matching the on-disk format, so a
//! save/load round trip reproduces the corpus exactly. All arithmetic
//! downstream is carried out in `f64`.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Magic bytes opening every binary embedding section.
pub const EMB_MAGIC: &[u8; 4] = b"EMB1";

/// Feature payload of a record: exactly one of frames or embedding.
#[derive(Debug, Clone, PartialEq)]
pub enum Features {
    /// T x D frame matrix, one row per time step.
    Frames(Vec<Vec<f32>>),
    /// Precomputed D-dimensional vector.
    Embedding(Vec<f32>),
}

impl Features {
    /// Feature dimension D.
    pub fn dim(&self) -> usize {
        match self {
            Features::Frames(rows) => rows.first().map_or(0, |r| r.len()),
            Features::Embedding(v) => v.len(),
        }
    }
}

/// One utterance: identifier, optional group label, features.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub group: Option<String>,
    pub features: Features,
}

impl UtteranceRecord {
    fn validate(&self) -> Result<()> {
        if self.utt_id.is_empty() {
            return Err(Error::validation("utt_id must be non-empty"));
        }
        if self.utt_id.contains('\n') {
            return Err(Error::validation(format!(
                "utt_id {:?} must not contain a newline",
                self.utt_id
            )));
        }
        match &self.features {
            Features::Frames(rows) => {
                if rows.is_empty() {
                    return Err(Error::validation(format!(
                        "record {:?}: frames must have at least one row",
                        self.utt_id
                    )));
                }
                let dim = rows[0].len();
                if dim == 0 {
                    return Err(Error::validation(format!(
                        "record {:?}: frame rows must be non-empty",
                        self.utt_id
                    )));
                }
                for (t, row) in rows.iter().enumerate() {
                    if row.len() != dim {
                        return Err(Error::shape(format!(
                            "record {:?}: frame row {t} has {} entries, expected {dim}",
                            self.utt_id,
                            row.len()
                        )));
                    }
                    if let Some(c) = row.iter().position(|x| !x.is_finite()) {
                        return Err(Error::validation(format!(
                            "record {:?}: non-finite frame value at row {t}, col {c}",
                            self.utt_id
                        )));
                    }
                }
            }
            Features::Embedding(v) => {
                if v.is_empty() {
                    return Err(Error::validation(format!(
                        "record {:?}: embedding must be non-empty",
                        self.utt_id
                    )));
                }
                if let Some(c) = v.iter().position(|x| !x.is_finite()) {
                    return Err(Error::validation(format!(
                        "record {:?}: non-finite embedding value at index {c}",
                        self.utt_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Ordered record collection plus its group vocabulary.
///
/// The vocabulary is normally derived from the records in order of first
/// appearance, which makes the manifest round trip an identity. The class
/// index of a label is its position in `groups()`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCorpus {
    records: Vec<UtteranceRecord>,
    groups: Vec<String>,
}

impl LabeledCorpus {
    /// Builds a corpus, validating every record and deriving the group
    /// vocabulary in order of first appearance.
    pub fn new(records: Vec<UtteranceRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut groups: Vec<String> = Vec::new();
        for rec in &records {
            rec.validate()?;
            if !seen.insert(rec.utt_id.clone()) {
                return Err(Error::validation(format!(
                    "duplicate utt_id {:?}",
                    rec.utt_id
                )));
            }
            if let Some(g) = &rec.group {
                if !groups.iter().any(|x| x == g) {
                    groups.push(g.clone());
                }
            }
        }
        Ok(LabeledCorpus { records, groups })
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Class index of `label`, i.e. its position in the vocabulary.
    pub fn group_index(&self, label: &str) -> Option<usize> {
        self.groups.iter().position(|g| g == label)
    }

    /// True when every record carries a group label.
    pub fn fully_labeled(&self) -> bool {
        self.records.iter().all(|r| r.group.is_some())
    }

    /// Replaces the group vocabulary, keeping records untouched. Every
    /// record label must appear in `vocab`; `vocab` may list extra groups
    /// (e.g. a trained model's classes absent from this corpus).
    pub fn with_groups(&self, vocab: &[String]) -> Result<Self> {
        let mut seen = HashSet::new();
        for g in vocab {
            if !seen.insert(g) {
                return Err(Error::validation(format!(
                    "group vocabulary has duplicate label {g:?}"
                )));
            }
        }
        for rec in &self.records {
            if let Some(g) = &rec.group {
                if !vocab.iter().any(|x| x == g) {
                    return Err(Error::validation(format!(
                        "record {:?} has group {g:?} not in the vocabulary",
                        rec.utt_id
                    )));
                }
            }
        }
        Ok(LabeledCorpus {
            records: self.records.clone(),
            groups: vocab.to_vec(),
        })
    }

    /// Corpus without the records of `label`.
    pub fn without_group(&self, label: &str) -> LabeledCorpus {
        let records: Vec<UtteranceRecord> = self
            .records
            .iter()
            .filter(|r| r.group.as_deref() != Some(label))
            .cloned()
            .collect();
        LabeledCorpus::new(records).expect("subset of a valid corpus is valid")
    }

    /// Corpus restricted to the given record indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> LabeledCorpus {
        let records: Vec<UtteranceRecord> =
            indices.iter().map(|&i| self.records[i].clone()).collect();
        LabeledCorpus::new(records).expect("subset of a valid corpus is valid")
    }

    /// Count of records per vocabulary group, in vocabulary order.
    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.groups.len()];
        for rec in &self.records {
            if let Some(g) = &rec.group {
                if let Some(i) = self.group_index(g) {
                    counts[i] += 1;
                }
            }
        }
        counts
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Per-group sampling parameters for synthetic corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub label: String,
    pub count: usize,
    pub mean: Vec<f64>,
    pub stdev: f64,
}

/// Recipe for an imbalanced synthetic corpus: Gaussian groups with fixed
/// per-group counts, means, and spreads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMixSpec {
    pub dim: usize,
    pub frames_per_utt: usize,
    pub groups: Vec<GroupSpec>,
}

impl GroupMixSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::validation("dim must be positive"));
        }
        if self.frames_per_utt == 0 {
            return Err(Error::validation("frames_per_utt must be positive"));
        }
        if self.groups.len() < 2 {
            return Err(Error::validation("groups must list at least 2 groups"));
        }
        let mut seen = HashSet::new();
        for (i, g) in self.groups.iter().enumerate() {
            if g.label.is_empty() {
                return Err(Error::validation(format!(
                    "groups[{i}].label must be non-empty"
                )));
            }
            if !seen.insert(&g.label) {
                return Err(Error::validation(format!(
                    "groups[{i}].label {:?} is duplicated",
                    g.label
                )));
            }
            if g.count == 0 {
                return Err(Error::validation(format!(
                    "groups[{i}].count must be positive"
                )));
            }
            if g.mean.len() != self.dim {
                return Err(Error::validation(format!(
                    "groups[{i}].mean has length {}, expected dim {}",
                    g.mean.len(),
                    self.dim
                )));
            }
            if g.mean.iter().any(|x| !x.is_finite()) {
                return Err(Error::validation(format!(
                    "groups[{i}].mean has a non-finite entry"
                )));
            }
            if !(g.stdev > 0.0) || !g.stdev.is_finite() {
                return Err(Error::validation(format!(
                    "groups[{i}].stdev must be a positive finite number"
                )));
            }
        }
        Ok(())
    }
}

/// Scales a template of group counts so the largest becomes
/// `target_largest`, rounding to the nearest integer with a floor of 1.
pub fn scale_counts(template: &[u64], target_largest: u64) -> Vec<u64> {
    let max = template.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return template.iter().map(|_| 1).collect();
    }
    template
        .iter()
        .map(|&c| {
            let scaled = (c as f64 * target_largest as f64 / max as f64).round() as u64;
            scaled.max(1)
        })
        .collect()
}

/// Draws a corpus from `spec`: per group, `count` records of
/// `frames_per_utt` i.i.d. Gaussian rows. A pure function of (spec, seed):
/// each group reads an independent substream, so output is bitwise
/// reproducible.
pub fn generate_synthetic_corpus(spec: &GroupMixSpec, seed: u64) -> Result<LabeledCorpus> {
    spec.validate()?;
    let root = SeededRng::new(seed);
    let total: usize = spec.groups.iter().map(|g| g.count).sum();
    let mut records = Vec::with_capacity(total);
    for (gi, g) in spec.groups.iter().enumerate() {
        let mut rng = root.derive(gi as u64);
        for i in 0..g.count {
            let frames: Vec<Vec<f32>> = (0..spec.frames_per_utt)
                .map(|_| {
                    (0..spec.dim)
                        .map(|d| (g.mean[d] + g.stdev * rng.next_gaussian()) as f32)
                        .collect()
                })
                .collect();
            records.push(UtteranceRecord {
                utt_id: format!("{}-{:05}", g.label, i),
                group: Some(g.label.clone()),
                features: Features::Frames(frames),
            });
        }
    }
    LabeledCorpus::new(records)
}

// ---------------------------------------------------------------------------
// Binary embedding format (EMB1)
// ---------------------------------------------------------------------------
//
// One section: magic "EMB1", u32-le count, u32-le dim, count*dim f32-le
// row-major values, then count newline-terminated UTF-8 ids. Sections
// concatenate, which is how classifier parameters are stored.

/// Parsed contents of one embedding section.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub ids: Vec<String>,
    data: Vec<f32>,
}

impl EmbeddingFile {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Reads exactly one section from `reader`, which may be positioned inside a
/// multi-section file. `ctx` names the file in error messages.
pub fn read_embedding_section(reader: &mut impl Read, ctx: &Path) -> Result<EmbeddingFile> {
    let mut magic = [0u8; 4];
    read_exact_or(reader, &mut magic, ctx, "magic")?;
    if &magic != EMB_MAGIC {
        return Err(Error::data(format!(
            "{}: bad magic {:?}, expected {:?}",
            ctx.display(),
            magic,
            EMB_MAGIC
        )));
    }
    let mut word = [0u8; 4];
    read_exact_or(reader, &mut word, ctx, "count header")?;
    let count = u32::from_le_bytes(word) as usize;
    read_exact_or(reader, &mut word, ctx, "dim header")?;
    let dim = u32::from_le_bytes(word) as usize;

    let total = count
        .checked_mul(dim)
        .ok_or_else(|| Error::data(format!("{}: header overflows", ctx.display())))?;
    let mut data = Vec::with_capacity(total.min(1 << 20));
    let mut buf = [0u8; 4096];
    let mut remaining = total * 4;
    while remaining > 0 {
        let want = remaining.min(buf.len());
        read_exact_or(reader, &mut buf[..want], ctx, "float payload")?;
        for chunk in buf[..want].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        remaining -= want;
    }
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::data(format!(
            "{}: non-finite value at row {}, col {}",
            ctx.display(),
            i / dim.max(1),
            i % dim.max(1)
        )));
    }

    let mut ids = Vec::with_capacity(count);
    for i in 0..count {
        let mut bytes = Vec::new();
        loop {
            let mut b = [0u8; 1];
            read_exact_or(reader, &mut b, ctx, "id table")?;
            if b[0] == b'\n' {
                break;
            }
            bytes.push(b[0]);
        }
        let id = String::from_utf8(bytes).map_err(|_| {
            Error::data(format!("{}: id {} is not valid UTF-8", ctx.display(), i))
        })?;
        ids.push(id);
    }
    Ok(EmbeddingFile { dim, ids, data })
}

fn read_exact_or(reader: &mut impl Read, buf: &mut [u8], ctx: &Path, what: &str) -> Result<()> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::data(format!("{}: truncated {what}", ctx.display()))
        } else {
            Error::io(ctx, e)
        }
    })
}

/// Writes one section. Every row must have length `dim`, every value must be
/// finite, and ids must be non-empty and newline-free.
pub fn write_embedding_section<'a>(
    writer: &mut impl Write,
    dim: usize,
    rows: impl ExactSizeIterator<Item = (&'a str, &'a [f32])> + Clone,
    ctx: &Path,
) -> Result<()> {
    let count = rows.len();
    let count32 = u32::try_from(count)
        .map_err(|_| Error::validation(format!("{}: too many rows", ctx.display())))?;
    let dim32 = u32::try_from(dim)
        .map_err(|_| Error::validation(format!("{}: dim too large", ctx.display())))?;
    let io = |e| Error::io(ctx, e);
    writer.write_all(EMB_MAGIC).map_err(io)?;
    writer.write_all(&count32.to_le_bytes()).map_err(io)?;
    writer.write_all(&dim32.to_le_bytes()).map_err(io)?;
    for (id, row) in rows.clone() {
        if row.len() != dim {
            return Err(Error::shape(format!(
                "{}: row for {id:?} has {} values, expected {dim}",
                ctx.display(),
                row.len()
            )));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation(format!(
                "{}: non-finite value in row {id:?}",
                ctx.display()
            )));
        }
        for v in row {
            writer.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    for (id, _) in rows {
        if id.is_empty() || id.contains('\n') {
            return Err(Error::validation(format!(
                "{}: id {id:?} must be non-empty and newline-free",
                ctx.display()
            )));
        }
        writer.write_all(id.as_bytes()).map_err(io)?;
        writer.write_all(b"\n").map_err(io)?;
    }
    Ok(())
}

/// Loads a standalone single-section embedding file.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<f32>)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let section = read_embedding_section(&mut reader, path)?;
    let mut probe = [0u8; 1];
    match reader.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::data(format!(
                "{}: trailing data after section",
                path.display()
            )))
        }
        Err(e) => return Err(Error::io(path, e)),
    }
    Ok((0..section.len())
        .map(|i| (section.ids[i].clone(), section.row(i).to_vec()))
        .collect())
}

/// Writes a standalone single-section embedding file. The dimension is taken
/// from the first entry; an empty list writes a count=0, dim=0 header.
pub fn save_embeddings(path: impl AsRef<Path>, entries: &[(String, Vec<f32>)]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    let dim = entries.first().map_or(0, |(_, v)| v.len());
    write_embedding_section(
        &mut writer,
        dim,
        entries.iter().map(|(id, v)| (id.as_str(), v.as_slice())),
        path,
    )?;
    writer.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// JSON Lines manifest
// ---------------------------------------------------------------------------

/// Pointer from a manifest row into a frames file: the record's rows start
/// at `row` and extend while the per-row id matches the record's utt_id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FramesRef {
    pub path: String,
    pub row: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRow {
    utt_id: String,
    group: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    frames_ref: Option<FramesRef>,
}

fn frames_file_name(manifest: &Path) -> String {
    let stem = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    format!("{stem}.frames.emb")
}

/// Writes `corpus` as a JSON Lines manifest at `path`. Records with frame
/// matrices spill into a `<stem>.frames.emb` companion next to the manifest;
/// embedding records are inlined with round-trip decimal precision.
pub fn save_manifest(corpus: &LabeledCorpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();

    // collect frame rows first so every frames_ref row offset is known
    let mut frame_rows: Vec<(&str, &[f32])> = Vec::new();
    let mut frame_dim: Option<usize> = None;
    let mut start_rows: HashMap<&str, usize> = HashMap::new();
    for rec in corpus.records() {
        if let Features::Frames(rows) = &rec.features {
            let dim = rows[0].len();
            match frame_dim {
                None => frame_dim = Some(dim),
                Some(d) if d != dim => {
                    return Err(Error::shape(format!(
                        "record {:?} has frame dim {dim}, but the corpus started with {d}; \
                         one frames file holds a single dim",
                        rec.utt_id
                    )))
                }
                _ => {}
            }
            start_rows.insert(rec.utt_id.as_str(), frame_rows.len());
            for row in rows {
                frame_rows.push((rec.utt_id.as_str(), row.as_slice()));
            }
        }
    }

    let frames_name = frames_file_name(path);
    if !frame_rows.is_empty() {
        let frames_path = path.with_file_name(&frames_name);
        let file = File::create(&frames_path).map_err(|e| Error::io(&frames_path, e))?;
        let mut writer = BufWriter::new(file);
        write_embedding_section(
            &mut writer,
            frame_dim.unwrap(),
            frame_rows.iter().copied(),
            &frames_path,
        )?;
        writer.flush().map_err(|e| Error::io(&frames_path, e))?;
    }

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    for rec in corpus.records() {
        let row = match &rec.features {
            Features::Embedding(v) => ManifestRow {
                utt_id: rec.utt_id.clone(),
                group: rec.group.clone(),
                embedding: Some(v.clone()),
                frames_ref: None,
            },
            Features::Frames(_) => ManifestRow {
                utt_id: rec.utt_id.clone(),
                group: rec.group.clone(),
                embedding: None,
                frames_ref: Some(FramesRef {
                    path: frames_name.clone(),
                    row: start_rows[rec.utt_id.as_str()],
                }),
            },
        };
        let line = serde_json::to_string(&row)
            .map_err(|e| Error::data(format!("{}: serialize: {e}", path.display())))?;
        writer.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        writer.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Reads a JSON Lines manifest, resolving frames references relative to the
/// manifest's directory. Errors cite the 1-based line number.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<LabeledCorpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut frame_files: HashMap<String, EmbeddingFile> = HashMap::new();
    let mut seen_ids: HashSet<String> = HashSet::new();
    let mut records = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let row: ManifestRow = serde_json::from_str(&line).map_err(|e| {
            Error::data(format!("{}: line {lineno}: {e}", path.display()))
        })?;
        let features = match (row.embedding, row.frames_ref) {
            (Some(v), None) => Features::Embedding(v),
            (None, Some(fref)) => {
                if !frame_files.contains_key(&fref.path) {
                    let fpath = base.join(&fref.path);
                    let file = File::open(&fpath).map_err(|e| Error::io(&fpath, e))?;
                    let mut r = BufReader::new(file);
                    let section = read_embedding_section(&mut r, &fpath)?;
                    frame_files.insert(fref.path.clone(), section);
                }
                let section = &frame_files[&fref.path];
                if fref.row >= section.len() || section.ids[fref.row] != row.utt_id {
                    return Err(Error::data(format!(
                        "{}: line {lineno}: frames_ref row {} of {:?} does not carry utt_id {:?}",
                        path.display(),
                        fref.row,
                        fref.path,
                        row.utt_id
                    )));
                }
                let mut rows = Vec::new();
                let mut i = fref.row;
                while i < section.len() && section.ids[i] == row.utt_id {
                    rows.push(section.row(i).to_vec());
                    i += 1;
                }
                Features::Frames(rows)
            }
            (Some(_), Some(_)) => {
                return Err(Error::data(format!(
                    "{}: line {lineno}: exactly one of embedding or frames_ref allowed",
                    path.display()
                )))
            }
            (None, None) => {
                return Err(Error::data(format!(
                    "{}: line {lineno}: one of embedding or frames_ref required",
                    path.display()
                )))
            }
        };
        if !seen_ids.insert(row.utt_id.clone()) {
            return Err(Error::data(format!(
                "{}: line {lineno}: duplicate utt_id {:?}",
                path.display(),
                row.utt_id
            )));
        }
        let rec = UtteranceRecord {
            utt_id: row.utt_id,
            group: row.group,
            features,
        };
        rec.validate().map_err(|e| {
            Error::data(format!("{}: line {lineno}: {e}", path.display()))
        })?;
        records.push(rec);
    }
    Ok(LabeledCorpus::new(records).expect("records validated line by line"))
}
