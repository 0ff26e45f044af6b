use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::{Dataset, SubjectRecord};

use super::{write_atomic, IoError};

const HEADER: [&str; 4] = ["subject_id", "time", "outcome", "covariate_level"];

pub fn read_dataset(path: &Path) -> Result<Dataset, IoError> {
    let file = std::fs::File::open(path).map_err(|e| IoError::io(path, e))?;
    read_dataset_from(file)
}

/// Parses long-format rows. Subjects keep their order of first appearance;
/// rows of a subject are sorted by time. Row numbers in errors count the
/// header as row 1.
pub fn read_dataset_from<R: Read>(reader: R) -> Result<Dataset, IoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| IoError::DataParse { row: 1, message: e.to_string() })?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let missing = |name: &str| IoError::DataParse { row: 1, message: format!("missing column `{name}`") };
    let id_col = column(HEADER[0]).ok_or_else(|| missing(HEADER[0]))?;
    let time_col = column(HEADER[1]).ok_or_else(|| missing(HEADER[1]))?;
    let outcome_col = column(HEADER[2]).ok_or_else(|| missing(HEADER[2]))?;
    let level_col = column(HEADER[3]);

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(f64, f64, usize)>> = HashMap::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| IoError::DataParse { row, message: e.to_string() })?;
        let field = |c: usize, name: &str| {
            record.get(c).filter(|s| !s.is_empty()).ok_or_else(|| IoError::DataParse {
                row,
                message: format!("missing value for `{name}`"),
            })
        };
        let real = |c: usize, name: &str| -> Result<f64, IoError> {
            let s = field(c, name)?;
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| IoError::DataParse { row, message: format!("`{name}` is not a finite number: {s:?}") })
        };
        let id = field(id_col, HEADER[0])?.to_string();
        let time = real(time_col, HEADER[1])?;
        let outcome = real(outcome_col, HEADER[2])?;
        let level = match level_col {
            Some(c) => {
                let s = field(c, HEADER[3])?;
                s.parse::<usize>().map_err(|_| IoError::DataParse {
                    row,
                    message: format!("`covariate_level` must be a nonnegative integer: {s:?}"),
                })?
            }
            None => 0,
        };
        rows.entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push((time, outcome, level));
    }
    if order.is_empty() {
        return Err(IoError::DataParse { row: 1, message: "no data rows".into() });
    }
    let subjects = order
        .into_iter()
        .map(|id| {
            let mut r = rows.remove(&id).expect("subject rows");
            r.sort_by(|a, b| a.0.total_cmp(&b.0));
            let levels = level_col.map(|_| r.iter().map(|x| x.2).collect());
            SubjectRecord::new(id, r.iter().map(|x| x.0).collect(), r.iter().map(|x| x.1).collect(), levels)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset::new(subjects)?)
}

pub fn write_dataset_to<W: Write>(data: &Dataset, writer: W) -> Result<(), IoError> {
    let with_levels = data.subjects.iter().any(|s| s.levels.is_some());
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| IoError::Invalid(e.to_string());
    if with_levels {
        w.write_record(HEADER).map_err(csv_err)?;
    } else {
        w.write_record(&HEADER[..3]).map_err(csv_err)?;
    }
    for s in &data.subjects {
        for t in 0..s.len() {
            let mut rec = vec![s.id.clone(), s.times[t].to_string(), s.outcomes[t].to_string()];
            if with_levels {
                rec.push(s.level(t).to_string());
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| IoError::Invalid(e.to_string()))?;
    Ok(())
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<(), IoError> {
    let mut buf = Vec::new();
    write_dataset_to(data, &mut buf)?;
    write_atomic(path, &buf)
}
