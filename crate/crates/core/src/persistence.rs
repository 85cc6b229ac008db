//! Checkpoints, embedding files and detection reports.
//!
//! # Checkpoint layout (version 1)
//!
//! All integers and floats are little-endian.
//!
//! | offset | field |
//! |---|---|
//! | 0 | magic `GODN` |
//! | 4 | `u32` format version |
//! | 8 | `u64` payload length `n` |
//! | 16 | payload (`n` bytes) |
//! | 16 + n | `u64` FNV-1a 64 of the payload |
//!
//! Payload, in order:
//!
//! 1. `u32` input dim, `u32` hidden layer count `H`, `H × u32` widths,
//!    `u32` feature dim `D`, `u32` class count `M`
//! 2. `u8` head variant (0 vanilla, 1 alpha_only, 2 beta_only, 3 alpha_beta),
//!    `u8` flags (bit 0: trained, bit 1: inputs L2-normalised)
//! 3. `u64` seed, `u32` provenance length, provenance UTF-8 bytes
//! 4. `f64` parameters: for each extractor layer its weights (row-major,
//!    `out × in`) then biases; the class weights `W` (row-major `M × D`);
//!    alpha weights (`D`), alpha bias, beta weights (`D`), beta bias.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::{DetectionReport, DetectionRow};
use crate::error::{GeodinError, Result};
use crate::head::{HeadParams, HeadVariant};
use crate::linalg::Matrix;
use crate::trainer::{ExtractorParams, Layer, Model, ModelMeta};

pub const MAGIC: &[u8; 4] = b"GODN";
pub const FORMAT_VERSION: u32 = 1;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn model_to_bytes(model: &Model) -> Vec<u8> {
    let mut p = Vec::new();
    let put_u32 = |p: &mut Vec<u8>, v: usize| p.extend_from_slice(&(v as u32).to_le_bytes());
    put_u32(&mut p, model.input_dim());
    let hidden = model.extractor.hidden_widths();
    put_u32(&mut p, hidden.len());
    for w in &hidden {
        put_u32(&mut p, *w);
    }
    put_u32(&mut p, model.feature_dim());
    put_u32(&mut p, model.n_classes());
    p.push(model.variant().tag());
    p.push(model.meta.trained as u8 | (model.extractor.normalize_input as u8) << 1);
    p.extend_from_slice(&model.meta.seed.to_le_bytes());
    put_u32(&mut p, model.meta.provenance.len());
    p.extend_from_slice(model.meta.provenance.as_bytes());
    for group in model.param_groups() {
        for v in group {
            p.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut out = Vec::with_capacity(p.len() + 24);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(p.len() as u64).to_le_bytes());
    out.extend_from_slice(&p);
    out.extend_from_slice(&fnv1a64(&p).to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(GeodinError::Format {
                line: 0,
                msg: format!("checkpoint payload ends inside {what} at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| format_err("parameter count overflows"))?,
            what,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn format_err(msg: &str) -> GeodinError {
    GeodinError::Format {
        line: 0,
        msg: msg.to_string(),
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(format_err("not a checkpoint (missing GODN magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(GeodinError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    if bytes.len() < 16 {
        return Err(format_err("checkpoint truncated inside the header"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let expected = 16u64.checked_add(len).and_then(|v| v.checked_add(8));
    if expected != Some(bytes.len() as u64) {
        return Err(format_err(&format!(
            "checkpoint is {} bytes but its header declares a {len}-byte payload",
            bytes.len()
        )));
    }
    let payload = &bytes[16..16 + len as usize];
    let stored = u64::from_le_bytes(bytes[16 + len as usize..].try_into().expect("8 bytes"));
    let actual = fnv1a64(payload);
    if stored != actual {
        return Err(GeodinError::Integrity(format!(
            "checksum mismatch (stored {stored:016x}, computed {actual:016x})"
        )));
    }

    let mut r = Reader { buf: payload, pos: 0 };
    let input_dim = r.u32("input dim")?;
    let n_hidden = r.u32("hidden layer count")?;
    let hidden = (0..n_hidden)
        .map(|_| r.u32("hidden width"))
        .collect::<Result<Vec<_>>>()?;
    let feature_dim = r.u32("feature dim")?;
    let n_classes = r.u32("class count")?;
    let tag = r.u8("variant")?;
    let variant = HeadVariant::from_tag(tag).ok_or_else(|| format_err(&format!("unknown variant tag {tag}")))?;
    let flags = r.u8("flags")?;
    let seed = r.u64("seed")?;
    let prov_len = r.u32("provenance length")?;
    let provenance = String::from_utf8(r.take(prov_len, "provenance")?.to_vec())
        .map_err(|_| format_err("provenance is not UTF-8"))?;

    let mut layers = Vec::with_capacity(n_hidden + 1);
    let mut fan_in = input_dim;
    for (i, &width) in hidden.iter().chain(std::iter::once(&feature_dim)).enumerate() {
        let w = r.f64s(width * fan_in, &format!("layer {i} weights"))?;
        let b = r.f64s(width, &format!("layer {i} biases"))?;
        layers.push(Layer {
            weights: Matrix::from_vec(width, fan_in, w)?,
            biases: b,
        });
        fan_in = width;
    }
    let w = Matrix::from_vec(
        n_classes,
        feature_dim,
        r.f64s(n_classes * feature_dim, "class weights")?,
    )?;
    let alpha_weights = r.f64s(feature_dim, "alpha weights")?;
    let alpha_bias = r.f64s(1, "alpha bias")?[0];
    let beta_weights = r.f64s(feature_dim, "beta weights")?;
    let beta_bias = r.f64s(1, "beta bias")?[0];
    if r.pos != payload.len() {
        return Err(format_err(&format!("{} trailing payload bytes", payload.len() - r.pos)));
    }
    Ok(Model {
        extractor: ExtractorParams {
            layers,
            normalize_input: flags & 2 == 2,
        },
        head: HeadParams {
            w,
            alpha_weights,
            alpha_bias,
            beta_weights,
            beta_bias,
            variant,
        },
        meta: ModelMeta {
            seed,
            trained: flags & 1 == 1,
            provenance,
        },
    })
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_bytes(model)).map_err(|e| GeodinError::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| GeodinError::io(path, e))?;
    model_from_bytes(&bytes)
}

/// Token → vector map with a uniform dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    /// Line (1-based) each token was read from.
    lines: HashMap<String, usize>,
}

impl Embeddings {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let mut text = String::new();
        for (t, v) in pairs {
            text.push_str(&t);
            for x in v {
                text.push(' ');
                text.push_str(&format!("{x:?}"));
            }
            text.push('\n');
        }
        parse_embeddings_str(&text)
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    pub fn line_of(&self, token: &str) -> Option<usize> {
        self.lines.get(token).copied()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// One record per line: a token then `D` whitespace-separated decimals, `D`
/// taken from the first record. The first occurrence of a duplicate token
/// wins. Blank lines are skipped.
pub fn parse_embeddings_str(text: &str) -> Result<Embeddings> {
    let mut dim = None;
    let mut vectors = HashMap::new();
    let mut lines = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(|p| {
                p.parse::<f64>().map_err(|_| GeodinError::Format {
                    line: line_no,
                    msg: format!("`{p}` is not a number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let d = *dim.get_or_insert(values.len());
        if d == 0 {
            return Err(GeodinError::Format {
                line: line_no,
                msg: "record has no vector components".into(),
            });
        }
        if values.len() != d {
            return Err(GeodinError::Format {
                line: line_no,
                msg: format!("expected {d} components, found {}", values.len()),
            });
        }
        if !vectors.contains_key(token) {
            lines.insert(token.to_string(), line_no);
            vectors.insert(token.to_string(), values);
        }
    }
    match dim {
        None => Err(GeodinError::Domain("embedding file has no records".into())),
        Some(dim) => Ok(Embeddings { dim, vectors, lines }),
    }
}

pub fn parse_embeddings(path: impl AsRef<Path>) -> Result<Embeddings> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| GeodinError::io(path, e))?;
    parse_embeddings_str(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const REPORT_HEADER: [&str; 8] = [
    "score",
    "shift_kind",
    "severity",
    "auroc",
    "tnr_at_tpr95",
    "n_id",
    "n_ood",
    "seed",
];

/// `x` rounded to 6 significant digits.
pub fn round_sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

/// Shortest decimal that reads back as `round_sig6(x)`.
pub fn fmt_sig6(x: f64) -> String {
    format!("{}", round_sig6(x))
}

fn rounded_report(report: &DetectionReport) -> DetectionReport {
    DetectionReport {
        rows: report
            .rows
            .iter()
            .map(|r| DetectionRow {
                auroc: round_sig6(r.auroc),
                tnr_at_tpr95: round_sig6(r.tnr_at_tpr95),
                ..r.clone()
            })
            .collect(),
        config: report.config.clone(),
    }
}

pub fn report_to_csv(report: &DetectionReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| GeodinError::Format {
        line: 0,
        msg: e.to_string(),
    };
    w.write_record(REPORT_HEADER).map_err(csv_err)?;
    for r in &report.rows {
        w.write_record([
            r.score.to_string(),
            r.shift_kind.to_string(),
            r.severity.to_string(),
            fmt_sig6(r.auroc),
            fmt_sig6(r.tnr_at_tpr95),
            r.n_id.to_string(),
            r.n_ood.to_string(),
            r.seed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| GeodinError::Format {
        line: 0,
        msg: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv writer emits UTF-8"))
}

pub fn report_from_csv(text: &str) -> Result<DetectionReport> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| GeodinError::Format {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.iter().ne(REPORT_HEADER) {
        return Err(GeodinError::Format {
            line: 1,
            msg: format!("unexpected header `{}`", header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| GeodinError::Format {
            line,
            msg: e.to_string(),
        })?;
        let field = |k: usize| -> &str { rec.get(k).unwrap_or("") };
        let bad = |what: &str| GeodinError::Format {
            line,
            msg: format!("invalid {what}"),
        };
        rows.push(DetectionRow {
            score: field(0).parse().map_err(|_| bad("score"))?,
            shift_kind: field(1).parse().map_err(|_| bad("shift_kind"))?,
            severity: field(2).parse().map_err(|_| bad("severity"))?,
            auroc: field(3).parse().map_err(|_| bad("auroc"))?,
            tnr_at_tpr95: field(4).parse().map_err(|_| bad("tnr_at_tpr95"))?,
            n_id: field(5).parse().map_err(|_| bad("n_id"))?,
            n_ood: field(6).parse().map_err(|_| bad("n_ood"))?,
            seed: field(7).parse().map_err(|_| bad("seed"))?,
        });
    }
    Ok(DetectionReport { rows, config: None })
}

pub fn report_to_json(report: &DetectionReport) -> Result<String> {
    serde_json::to_string_pretty(&rounded_report(report)).map_err(|e| GeodinError::Format {
        line: 0,
        msg: e.to_string(),
    })
}

pub fn report_from_json(text: &str) -> Result<DetectionReport> {
    serde_json::from_str(text).map_err(|e| GeodinError::Format {
        line: e.line(),
        msg: e.to_string(),
    })
}

pub fn write_report(report: &DetectionReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Csv => report_to_csv(report)?,
        ReportFormat::Json => report_to_json(report)?,
    };
    let mut file = fs::File::create(path).map_err(|e| GeodinError::io(path, e))?;
    file.write_all(text.as_bytes()).map_err(|e| GeodinError::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<DetectionReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| GeodinError::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        report_from_json(&text)
    } else {
        report_from_csv(&text)
    }
}

/// Serialisable snapshot of a model for JSON interchange with scripts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSummary {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub n_classes: usize,
    pub normalize_input: bool,
    pub variant: HeadVariant,
    pub seed: u64,
    pub trained: bool,
    pub provenance: String,
}

impl From<&Model> for ModelSummary {
    fn from(m: &Model) -> Self {
        ModelSummary {
            input_dim: m.input_dim(),
            hidden: m.extractor.hidden_widths(),
            feature_dim: m.feature_dim(),
            n_classes: m.n_classes(),
            normalize_input: m.extractor.normalize_input,
            variant: m.variant(),
            seed: m.meta.seed,
            trained: m.meta.trained,
            provenance: m.meta.provenance.clone(),
        }
    }
}
