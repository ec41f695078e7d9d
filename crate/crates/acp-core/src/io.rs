//! File formats: prior banks, partitions, checkpoints, embedding tables,
//! pair features, detections, and evaluation reports.
//!
//! JSON containers round-trip `f64` values bit-exactly (the serializer
//! emits shortest round-trippable decimals); the checkpoint and embedding
//! formats store raw little-endian 64-bit reals.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::PartitionFile;
use crate::error::{AcpError, Result};
use crate::eval::{DetectionRecord, EvalReport, EvalSetting};
use crate::model::{EmbeddingTable, PairExample, RawPairExample};
use crate::nn::Matrix;
use crate::priors::PriorBank;
use crate::space::{HoiSpace, RawAnnotationRecord};

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| AcpError::io(path.display().to_string(), e))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| AcpError::io(path.display().to_string(), e))
}

fn io_err(path: &Path, e: std::io::Error) -> AcpError {
    AcpError::io(path.display().to_string(), e)
}

// ---------------------------------------------------------------------------
// JSON containers
// ---------------------------------------------------------------------------

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    serde_json::to_writer(&mut w, value)
        .map_err(|e| AcpError::parse(path.display().to_string(), e.to_string()))?;
    w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let reader = BufReader::new(open(path)?);
    let mut de = serde_json::Deserializer::from_reader(reader);
    serde::Deserialize::deserialize(&mut de).map_err(|e| {
        AcpError::parse(
            format!("{} line {} column {}", path.display(), e.line(), e.column()),
            e.to_string(),
        )
    })
}

pub fn save_priors(path: &Path, bank: &PriorBank) -> Result<()> {
    save_json(path, bank)
}

pub fn load_priors(path: &Path) -> Result<PriorBank> {
    load_json(path)
}

pub fn save_partition(path: &Path, partition: &PartitionFile) -> Result<()> {
    save_json(path, partition)
}

pub fn load_partition(path: &Path) -> Result<PartitionFile> {
    load_json(path)
}

pub fn save_space(path: &Path, space: &HoiSpace) -> Result<()> {
    save_json(path, space)
}

pub fn load_space(path: &Path) -> Result<HoiSpace> {
    load_json(path)
}

pub fn save_annotations(path: &Path, records: &[RawAnnotationRecord]) -> Result<()> {
    save_json(path, &records.to_vec())
}

pub fn load_raw_annotations(path: &Path) -> Result<Vec<RawAnnotationRecord>> {
    crate::space::parse_annotations(BufReader::new(open(path)?)).map_err(|e| match e {
        AcpError::Parse { location, message } => {
            AcpError::parse(format!("{} {location}", path.display()), message)
        }
        other => other,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint: named-tensor container
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"ACPT0001";

pub fn save_checkpoint(path: &Path, tensors: &[(String, Matrix)]) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    let werr = |e| io_err(path, e);
    w.write_all(CHECKPOINT_MAGIC).map_err(werr)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(werr)?;
    for (name, m) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(werr)?;
        w.write_all(bytes).map_err(werr)?;
        w.write_all(&(m.rows as u64).to_le_bytes()).map_err(werr)?;
        w.write_all(&(m.cols as u64).to_le_bytes()).map_err(werr)?;
        for &v in &m.data {
            w.write_all(&v.to_le_bytes()).map_err(werr)?;
        }
    }
    w.flush().map_err(werr)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Matrix)>> {
    let mut r = BufReader::new(open(path)?);
    let rerr = |e| io_err(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(rerr)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(AcpError::parse(
            path.display().to_string(),
            "not a checkpoint file (bad magic)".to_string(),
        ));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(rerr)?;
    let count = u32::from_le_bytes(buf4) as usize;
    let mut out = Vec::with_capacity(count);
    let mut buf8 = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut buf4).map_err(rerr)?;
        let name_len = u32::from_le_bytes(buf4) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(rerr)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| AcpError::parse(path.display().to_string(), e.to_string()))?;
        r.read_exact(&mut buf8).map_err(rerr)?;
        let rows = u64::from_le_bytes(buf8) as usize;
        r.read_exact(&mut buf8).map_err(rerr)?;
        let cols = u64::from_le_bytes(buf8) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut buf8).map_err(rerr)?;
            data.push(f64::from_le_bytes(buf8));
        }
        // Bit-exact round trip matters more than finiteness here; build
        // without the finite check only if values are finite anyway.
        let m = Matrix::new(rows, cols, data)?;
        out.push((name, m));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Embedding table: (|O|, dim) header + row-major reals
// ---------------------------------------------------------------------------

pub fn save_embeddings(path: &Path, table: &EmbeddingTable) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    let werr = |e| io_err(path, e);
    w.write_all(&(table.rows.len() as u64).to_le_bytes()).map_err(werr)?;
    w.write_all(&(table.dim as u64).to_le_bytes()).map_err(werr)?;
    for row in &table.rows {
        for &v in row {
            w.write_all(&v.to_le_bytes()).map_err(werr)?;
        }
    }
    w.flush().map_err(werr)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let mut r = BufReader::new(open(path)?);
    let rerr = |e| io_err(path, e);
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8).map_err(rerr)?;
    let n_objects = u64::from_le_bytes(buf8) as usize;
    r.read_exact(&mut buf8).map_err(rerr)?;
    let dim = u64::from_le_bytes(buf8) as usize;
    let mut rows = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let mut row = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut buf8).map_err(rerr)?;
            row.push(f64::from_le_bytes(buf8));
        }
        rows.push(row);
    }
    EmbeddingTable::new(dim, rows)
}

// ---------------------------------------------------------------------------
// Pair features: JSON lines
// ---------------------------------------------------------------------------

pub fn save_pairs(path: &Path, pairs: &[PairExample], space: &HoiSpace) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    for pair in pairs {
        let raw = RawPairExample::from_pair(pair, space);
        serde_json::to_writer(&mut w, &raw)
            .map_err(|e| AcpError::parse(path.display().to_string(), e.to_string()))?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load_pairs(path: &Path, space: &HoiSpace, table: &EmbeddingTable) -> Result<Vec<PairExample>> {
    let r = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawPairExample = serde_json::from_str(&line).map_err(|e| {
            AcpError::parse(
                format!("{} line {}", path.display(), lineno + 1),
                e.to_string(),
            )
        })?;
        out.push(raw.resolve(space, table)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Detections CSV
// ---------------------------------------------------------------------------

const DETECTIONS_HEADER: [&str; 11] = [
    "image_id", "hoi_class", "score", "hx1", "hy1", "hx2", "hy2", "ox1", "oy1", "ox2", "oy2",
];

pub fn save_detections(path: &Path, dets: &[DetectionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let werr = |e: csv::Error| AcpError::parse(path.display().to_string(), e.to_string());
    w.write_record(DETECTIONS_HEADER).map_err(werr)?;
    for d in dets {
        w.write_record([
            d.image_id.as_str(),
            &d.hoi_class.to_string(),
            &format_f64(d.score),
            &format_f64(d.human_box[0]),
            &format_f64(d.human_box[1]),
            &format_f64(d.human_box[2]),
            &format_f64(d.human_box[3]),
            &format_f64(d.object_box[0]),
            &format_f64(d.object_box[1]),
            &format_f64(d.object_box[2]),
            &format_f64(d.object_box[3]),
        ])
        .map_err(werr)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let mut r = csv::Reader::from_reader(open(path)?);
    let headers = r
        .headers()
        .map_err(|e| AcpError::parse(path.display().to_string(), e.to_string()))?
        .clone();
    if headers.iter().ne(DETECTIONS_HEADER) {
        return Err(AcpError::parse(
            path.display().to_string(),
            format!("unexpected detections header {headers:?}"),
        ));
    }
    let mut out = Vec::new();
    for (lineno, record) in r.records().enumerate() {
        let record = record
            .map_err(|e| AcpError::parse(format!("{} record {}", path.display(), lineno + 2), e.to_string()))?;
        let field = |i: usize| -> Result<f64> {
            record[i].parse::<f64>().map_err(|e| {
                AcpError::parse(
                    format!("{} record {} field {}", path.display(), lineno + 2, i),
                    e.to_string(),
                )
            })
        };
        out.push(DetectionRecord {
            image_id: record[0].to_string(),
            hoi_class: record[1].parse::<usize>().map_err(|e| {
                AcpError::parse(
                    format!("{} record {}", path.display(), lineno + 2),
                    e.to_string(),
                )
            })?,
            score: field(2)?,
            human_box: [field(3)?, field(4)?, field(5)?, field(6)?],
            object_box: [field(7)?, field(8)?, field(9)?, field(10)?],
        });
    }
    Ok(out)
}

/// Shortest decimal that round-trips the exact f64.
pub fn format_f64(v: f64) -> String {
    let mut buf = ryu_format(v);
    if buf.ends_with(".0") {
        buf.truncate(buf.len() - 2);
    }
    buf
}

fn ryu_format(v: f64) -> String {
    // serde_json uses ryu internally; route through it for identical output.
    serde_json::to_string(&v).unwrap_or_else(|_| v.to_string())
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

/// Self-describing evaluation report for the JSON output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    pub setting: EvalSetting,
    pub map_full: Option<f64>,
    pub map_rare: Option<f64>,
    pub map_nonrare: Option<f64>,
    pub per_class: Vec<ReportClass>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportClass {
    pub hoi_class: usize,
    pub object: String,
    pub action: String,
    pub ap: Option<f64>,
    pub rare: bool,
}

impl ReportFile {
    pub fn new(report: &EvalReport, space: &HoiSpace) -> Self {
        let per_class = (0..space.n_hoi_classes())
            .map(|m| {
                let (o, a) = space.hoi_classes[m];
                ReportClass {
                    hoi_class: m,
                    object: space.objects[o].clone(),
                    action: space.actions[a].clone(),
                    ap: report.per_class_ap[m],
                    rare: report.rare_classes.contains(&m),
                }
            })
            .collect();
        ReportFile {
            setting: report.setting,
            map_full: report.map_full,
            map_rare: report.map_rare,
            map_nonrare: report.map_nonrare,
            per_class,
        }
    }
}

pub fn save_report(path: &Path, report: &ReportFile) -> Result<()> {
    save_json(path, report)
}

/// One-line aggregate CSV summary of a report.
pub fn save_report_csv(path: &Path, report: &ReportFile) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let werr = |e: csv::Error| AcpError::parse(path.display().to_string(), e.to_string());
    w.write_record(["setting", "map_full", "map_rare", "map_nonrare"])
        .map_err(werr)?;
    let fmt = |v: Option<f64>| v.map(format_f64).unwrap_or_default();
    let setting = match report.setting {
        EvalSetting::Default => "default",
        EvalSetting::KnownObject => "known_object",
    };
    w.write_record([
        setting.to_string(),
        fmt(report.map_full),
        fmt(report.map_rare),
        fmt(report.map_nonrare),
    ])
    .map_err(werr)?;
    w.flush().map_err(|e| io_err(path, e))
}

/// Before/after rows of a projection run.
pub fn save_projection_dump(
    path: &Path,
    rows: &[(String, usize, f64, f64)],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let werr = |e: csv::Error| AcpError::parse(path.display().to_string(), e.to_string());
    w.write_record(["image_id", "hoi_class", "score_before", "score_after"])
        .map_err(werr)?;
    for (image_id, class, before, after) in rows {
        w.write_record([
            image_id.clone(),
            class.to_string(),
            format_f64(*before),
            format_f64(*after),
        ])
        .map_err(werr)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}
