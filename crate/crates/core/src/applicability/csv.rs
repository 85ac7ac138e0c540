use std::fmt::Write;

use crate::data::{ClassId, DatasetManifest, SubsetLabel};

use super::{ApplicabilityError, ApplicabilityTable, SeparabilityRecord, SubsetCurve};

pub const TABLE_HEADER: &str = "class_id,class_name,subset,layer,app,k,n_records";
pub const RECORDS_HEADER: &str = "x,un_j,layer,xi,seed";
pub const SUBSET_HEADER: &str = "subset,layer,mean_app";

pub fn table_csv(table: &ApplicabilityTable, manifest: &DatasetManifest) -> String {
    let mut out = format!("{TABLE_HEADER}\n");
    for ((class, layer), entry) in table.entries() {
        let (name, subset) = manifest
            .class(class)
            .map(|c| (c.class_name.as_str(), c.subset.as_str()))
            .unwrap_or(("", ""));
        writeln!(
            out,
            "{class},{name},{subset},{layer},{},{},{}",
            entry.app,
            table.k(),
            entry.records.len()
        )
        .expect("string write");
    }
    out
}

pub fn records_csv(records: &[SeparabilityRecord]) -> String {
    let mut out = format!("{RECORDS_HEADER}\n");
    for r in records {
        out.push_str(&record_line(r));
    }
    out
}

pub fn record_line(r: &SeparabilityRecord) -> String {
    format!(
        "{},{},{},{},{}\n",
        r.target, r.probe, r.layer, r.accuracy, r.seed
    )
}

fn field<T: std::str::FromStr>(
    s: Option<&str>,
    line: usize,
    what: &str,
) -> Result<T, ApplicabilityError> {
    s.and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| ApplicabilityError::Csv(format!("line {line}: bad or missing {what}")))
}

/// Parses a records CSV. A trailing partial line (interrupted write) is
/// ignored.
pub fn parse_records_csv(text: &str) -> Result<Vec<SeparabilityRecord>, ApplicabilityError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == RECORDS_HEADER => {}
        Some(h) => return Err(ApplicabilityError::Csv(format!("unexpected header {h:?}"))),
        None => return Ok(Vec::new()),
    }
    let complete = text.ends_with('\n');
    let body: Vec<&str> = lines.collect();
    let mut out = Vec::with_capacity(body.len());
    for (i, line) in body.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let last = i + 1 == body.len();
        let mut parts = line.split(',');
        let parsed = (|| {
            let r = SeparabilityRecord {
                target: field(parts.next(), i + 2, "x")?,
                probe: field(parts.next(), i + 2, "un_j")?,
                layer: field(parts.next(), i + 2, "layer")?,
                accuracy: field(parts.next(), i + 2, "xi")?,
                seed: field(parts.next(), i + 2, "seed")?,
            };
            if parts.next().is_some() {
                return Err(ApplicabilityError::Csv(format!(
                    "line {}: extra fields",
                    i + 2
                )));
            }
            Ok(r)
        })();
        match parsed {
            Ok(r) => out.push(r),
            Err(_) if last && !complete => break,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub class_id: ClassId,
    pub class_name: String,
    pub subset: SubsetLabel,
    pub layer: usize,
    pub app: f64,
    pub k: usize,
    pub n_records: usize,
}

pub fn parse_table_csv(text: &str) -> Result<Vec<TableRow>, ApplicabilityError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == TABLE_HEADER => {}
        other => {
            return Err(ApplicabilityError::Csv(format!(
                "unexpected header {other:?}"
            )))
        }
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let n = i + 2;
            let mut p = line.split(',');
            let class_id = field(p.next(), n, "class_id")?;
            let class_name = p.next().unwrap_or_default().to_string();
            let subset = p
                .next()
                .and_then(SubsetLabel::parse)
                .ok_or_else(|| ApplicabilityError::Csv(format!("line {n}: bad subset")))?;
            Ok(TableRow {
                class_id,
                class_name,
                subset,
                layer: field(p.next(), n, "layer")?,
                app: field(p.next(), n, "app")?,
                k: field(p.next(), n, "k")?,
                n_records: field(p.next(), n, "n_records")?,
            })
        })
        .collect()
}

pub fn subset_curves_csv(curves: &[SubsetCurve]) -> String {
    let mut out = format!("{SUBSET_HEADER}\n");
    for c in curves {
        for (layer, v) in &c.points {
            writeln!(out, "{},{layer},{v}", c.subset).expect("string write");
        }
    }
    out
}
