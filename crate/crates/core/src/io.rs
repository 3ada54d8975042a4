//! Dataset CSV and matrix CSV persistence.
//!
//! Dataset layout, one row per product:
//! `market_id, product_id, share, x_1..x_L, h_1..h_K`, markets and products zero-based
//! and contiguous. The partition of attributes into groups does not live in the file.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{BlpError, Result};
use crate::model::{Dataset, MarketData, ModelConfig};

pub fn write_dataset_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let cfg = &dataset.config;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["market_id".to_string(), "product_id".into(), "share".into()];
    header.extend((1..=cfg.attributes()).map(|l| format!("x_{l}")));
    header.extend((1..=cfg.instruments()).map(|k| format!("h_{k}")));
    w.write_record(&header)?;
    for (t, m) in dataset.markets.iter().enumerate() {
        for j in 0..m.products() {
            let mut row = vec![t.to_string(), j.to_string(), m.shares[j].to_string()];
            row.extend(m.x.row(j).iter().map(f64::to_string));
            row.extend(m.instruments.row(j).iter().map(f64::to_string));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn column_count(header: &csv::StringRecord, prefix: &str) -> Result<usize> {
    let mut count = 0;
    for (i, name) in header.iter().enumerate().skip(3) {
        if let Some(idx) = name.strip_prefix(prefix) {
            count += 1;
            if idx != count.to_string() {
                return Err(BlpError::Data(format!("column {i} is {name:?}, expected {prefix}{count}")));
            }
        }
    }
    Ok(count)
}

/// Reads a dataset; `partition` holds zero-based groups and defaults to a single group.
///
/// Only the shape is checked here. Share ranges and finiteness are left to
/// [`crate::model::validate_dataset`] so callers can report every violation.
pub fn read_dataset_csv(path: &Path, groups: usize, partition: Option<&[usize]>) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let fixed = ["market_id", "product_id", "share"];
    if header.len() < 3 || header.iter().take(3).ne(fixed) {
        return Err(BlpError::Data(format!(
            "header must start with market_id,product_id,share; got {:?}",
            header.iter().take(3).collect::<Vec<_>>()
        )));
    }
    let l = column_count(&header, "x_")?;
    let k = column_count(&header, "h_")?;
    if l == 0 || k == 0 || header.len() != 3 + l + k {
        return Err(BlpError::Data(format!(
            "expected columns x_1..x_L then h_1..h_K after share; got {} extra columns",
            header.len() - 3
        )));
    }

    let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse_id = |i: usize| -> Result<usize> {
            rec[i]
                .trim()
                .parse()
                .map_err(|_| BlpError::Data(format!("row {}: {} is not an index: {:?}", line + 1, fixed[i], &rec[i])))
        };
        let values = (2..rec.len())
            .map(|i| {
                rec[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| BlpError::Data(format!("row {}: column {} is not a number: {:?}", line + 1, &header[i], &rec[i])))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((parse_id(0)?, parse_id(1)?, values));
    }
    if rows.is_empty() {
        return Err(BlpError::Data("dataset has no rows".into()));
    }

    let mut markets: Vec<Vec<(usize, Vec<f64>)>> = Vec::new();
    for (t, j, v) in rows {
        if t == markets.len() {
            markets.push(Vec::new());
        } else if t + 1 != markets.len() {
            return Err(BlpError::Data(format!("market ids must be contiguous from 0; saw {t} after {}", markets.len().saturating_sub(1))));
        }
        markets[t].push((j, v));
    }
    let j_count = markets[0].len();
    let mut out = Vec::with_capacity(markets.len());
    for (t, products) in markets.iter().enumerate() {
        if products.len() != j_count {
            return Err(BlpError::Data(format!(
                "market {t} has {} products, market 0 has {j_count}",
                products.len()
            )));
        }
        if products.iter().enumerate().any(|(i, (j, _))| *j != i) {
            return Err(BlpError::Data(format!("market {t}: product ids must run 0..{j_count} in order")));
        }
        let shares = DVector::from_iterator(j_count, products.iter().map(|(_, v)| v[0]));
        let x = DMatrix::from_fn(j_count, l, |j, c| products[j].1[1 + c]);
        let h = DMatrix::from_fn(j_count, k, |j, c| products[j].1[1 + l + c]);
        out.push(MarketData::new(x, shares, h));
    }
    let partition = match partition {
        Some(p) => p.to_vec(),
        None => vec![0; l],
    };
    let config = ModelConfig::new(out.len(), j_count, l, groups, k, partition)?;
    Dataset::new(config, out)
}

/// Plain numeric CSV with columns `c0..`; a vector is written as one column.
pub fn write_matrix_csv(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..m.ncols()).map(|c| format!("c{c}")))?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(f64::to_string))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_vector_csv(v: &DVector<f64>, path: &Path) -> Result<()> {
    write_matrix_csv(&DMatrix::from_column_slice(v.len(), 1, v.as_slice()), path)
}
