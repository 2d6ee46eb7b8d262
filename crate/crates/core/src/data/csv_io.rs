//! CSV datasets with a `label,f0,...,f{d-1}` header.

use std::io::{Read, Write};
use std::path::Path;

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::net::Matrix;

fn csv_err(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    Error::parse(offset, e.to_string())
}

pub fn write_csv<W: Write>(ds: &LabeledDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["label".to_string()];
    header.extend((0..ds.dim()).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for (row, &y) in ds.samples().row_iter().zip(ds.labels()) {
        let mut rec = vec![y.to_string()];
        // `{:?}` prints the shortest representation that parses back exactly
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV dataset. `num_classes` defaults to one more than the largest label.
pub fn read_csv<R: Read>(
    input: R,
    num_classes: Option<usize>,
    split: Split,
) -> Result<LabeledDataset> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    if header.get(0) != Some("label") {
        return Err(Error::parse(0, "CSV header must start with `label`"));
    }
    let dim = header.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let at = rec.position().map_or(0, |p| p.byte());
        let label: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::parse(at, format!("bad label `{}`", &rec[0])))?;
        labels.push(label);
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::parse(at, format!("bad feature `{field}`")))?;
            data.push(v);
        }
    }
    let num_classes =
        num_classes.unwrap_or_else(|| labels.iter().map(|&y| y + 1).max().unwrap_or(0));
    LabeledDataset::new(
        Matrix::from_vec(labels.len(), dim, data)?,
        labels,
        num_classes,
        split,
    )
}

pub fn load_csv(
    path: impl AsRef<Path>,
    num_classes: Option<usize>,
    split: Split,
) -> Result<LabeledDataset> {
    read_csv(std::fs::File::open(path)?, num_classes, split)
}

pub fn save_csv(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    write_csv(ds, std::io::BufWriter::new(std::fs::File::create(path)?))
}
