//! CSV and JSON encodings of annotation lists.
//!
//! The CSV header holds `d` columns for `x`, `d` for `y` and the upper
//! triangle of `Σ` row by row, e.g. `x0,x1,y0,y1,s00,s01,s11` in 2-D.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use super::Annotation;
use crate::error::{Error, Result};

fn header(d: usize) -> Vec<String> {
    let mut cols: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    cols.extend((0..d).map(|i| format!("y{i}")));
    for i in 0..d {
        for j in i..d {
            cols.push(format!("s{i}{j}"));
        }
    }
    cols
}

fn dimension_from_columns(n: usize) -> Result<usize> {
    match n {
        7 => Ok(2),
        12 => Ok(3),
        _ => Err(Error::Validation(format!(
            "annotation CSV needs 7 (2-D) or 12 (3-D) columns, got {n}"
        ))),
    }
}

pub fn write_annotations_csv<W: Write>(writer: W, annotations: &[Annotation]) -> Result<()> {
    let d = annotations.first().map_or(2, Annotation::dimension);
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(header(d))?;
    for a in annotations {
        if a.dimension() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: a.dimension(),
            });
        }
        let mut row: Vec<String> = a.x.iter().chain(&a.y).map(f64::to_string).collect();
        for i in 0..d {
            for j in i..d {
                row.push(a.sigma[(i, j)].to_string());
            }
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_annotations_csv<R: Read>(reader: R) -> Result<Vec<Annotation>> {
    let mut input = csv::Reader::from_reader(reader);
    let columns = input.headers()?.len();
    let d = dimension_from_columns(columns)?;
    if input.headers()?.iter().ne(header(d).iter().map(String::as_str)) {
        return Err(Error::Validation(format!(
            "unexpected annotation CSV header, expected {}",
            header(d).join(",")
        )));
    }
    let mut out = Vec::new();
    for record in input.records() {
        let record = record?;
        let values = record
            .iter()
            .map(|field| {
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Validation(format!("bad number {field:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let x = values[..d].to_vec();
        let y = values[d..2 * d].to_vec();
        let mut sigma = DMatrix::zeros(d, d);
        let mut k = 2 * d;
        for i in 0..d {
            for j in i..d {
                sigma[(i, j)] = values[k];
                sigma[(j, i)] = values[k];
                k += 1;
            }
        }
        out.push(Annotation::new(x, y, sigma)?);
    }
    Ok(out)
}

pub fn write_annotations_json<W: Write>(writer: W, annotations: &[Annotation]) -> Result<()> {
    serde_json::to_writer_pretty(writer, annotations)?;
    Ok(())
}

pub fn read_annotations_json<R: Read>(reader: R) -> Result<Vec<Annotation>> {
    Ok(serde_json::from_reader(reader)?)
}
