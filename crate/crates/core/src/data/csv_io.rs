use std::io::{Read, Write};
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which features are excluded from the monotone decoder. Every feature
/// not listed is monotone.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Schema {
    pub non_monotone: Vec<String>,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn parse_cell(cell: &str) -> Option<f64> {
    let v: f64 = cell.trim().parse().ok()?;
    v.is_finite().then_some(v)
}

/// Parses `id,age[,visit],<features...>`. Rows with a missing, unparseable
/// or non-finite cell, a wrong cell count, or a nonpositive age are
/// dropped and counted.
pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(true)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(format!("reading header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.iter().all(String::is_empty) {
        return Err(Error::Data("file is empty".into()));
    }
    let find = |name: &str| header.iter().position(|h| h == name);
    let id_col = find("id").ok_or_else(|| Error::Data("missing required column `id`".into()))?;
    let age_col = find("age").ok_or_else(|| Error::Data("missing required column `age`".into()))?;
    let visit_col = find("visit");
    let feature_cols: Vec<usize> = (0..header.len())
        .filter(|&c| c != id_col && c != age_col && Some(c) != visit_col)
        .collect();
    if feature_cols.is_empty() {
        return Err(Error::Data("no feature columns".into()));
    }
    let feature_names: Vec<String> = feature_cols.iter().map(|&c| header[c].clone()).collect();
    if let Some(name) = schema.non_monotone.iter().find(|n| !feature_names.contains(n)) {
        return Err(Error::Data(format!(
            "non-monotone feature `{name}` is not a column"
        )));
    }
    let monotone = feature_names
        .iter()
        .map(|n| !schema.non_monotone.contains(n))
        .collect();

    let (mut ids, mut visits, mut ages, mut data) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut dropped = 0;
    for record in rdr.records() {
        let Ok(record) = record else {
            dropped += 1;
            continue;
        };
        if record.len() != header.len() {
            dropped += 1;
            continue;
        }
        let id = record[id_col].trim();
        let age = parse_cell(&record[age_col]).filter(|a| *a > 0.0);
        let visit = match visit_col {
            Some(c) => record[c].trim().parse::<u32>().ok(),
            None => Some(0),
        };
        let feats: Option<Vec<f64>> = feature_cols.iter().map(|&c| parse_cell(&record[c])).collect();
        match (id.is_empty(), age, visit, feats) {
            (false, Some(age), Some(visit), Some(feats)) => {
                ids.push(id.to_string());
                ages.push(age);
                visits.push(visit);
                data.extend(feats);
            }
            _ => dropped += 1,
        }
    }
    if ids.is_empty() {
        return Err(Error::Data(format!("no usable rows ({dropped} dropped)")));
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} rows with missing or invalid cells");
    }
    let x = Tensor::matrix(ids.len(), feature_names.len(), data)?;
    let mut ds = Dataset::new(ids, visits, ages, x, feature_names, monotone)?;
    ds.dropped_rows = dropped;
    Ok(ds)
}

/// Writes the dataset with an explicit visit column. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_csv<W: Write>(ds: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_err = |e: csv::Error| Error::Data(format!("writing CSV: {e}"));
    let mut header = vec!["id".to_string(), "age".to_string(), "visit".to_string()];
    header.extend(ds.feature_names.iter().cloned());
    w.write_record(&header).map_err(to_err)?;
    for i in 0..ds.len() {
        let mut rec = vec![
            ds.ids[i].clone(),
            ds.ages[i].to_string(),
            ds.visits[i].to_string(),
        ];
        rec.extend(ds.x.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::Data(format!("writing CSV: {e}")))?;
    Ok(())
}
