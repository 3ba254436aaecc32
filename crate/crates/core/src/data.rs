//! Time-series datasets and their on-disk form: a CSV table (time, z₁…z_p,
//! u₁…u_q) plus a JSON sidecar describing the generating system.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulator::SystemMatrices;

/// Measurement times, noisy measurements and optional recorded inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesData {
    pub times: Vec<f64>,
    /// `M × p`.
    pub z: DMatrix<f64>,
    /// `M × q` recorded input path.
    pub u: Option<DMatrix<f64>>,
}

impl TimeSeriesData {
    pub fn new(times: Vec<f64>, z: DMatrix<f64>, u: Option<DMatrix<f64>>) -> Result<Self> {
        let data = Self { times, z, u };
        data.validate()?;
        Ok(data)
    }

    pub fn nodes(&self) -> usize {
        self.z.ncols()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() < 2 {
            return Err(Error::Data("need at least two measurements".into()));
        }
        if self.z.nrows() != self.times.len() || self.z.ncols() == 0 {
            return Err(Error::Data(format!(
                "measurement matrix is {}×{} for {} times",
                self.z.nrows(),
                self.z.ncols(),
                self.times.len()
            )));
        }
        if let Some(u) = &self.u {
            if u.nrows() != self.times.len() {
                return Err(Error::Data("input rows do not match the measurement times".into()));
            }
        }
        for (i, w) in self.times.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(Error::Parse {
                    row: i + 3,
                    message: format!("time {} does not exceed the previous time {}", w[1], w[0]),
                });
            }
        }
        Ok(())
    }

    /// Writes the CSV table: header row, one row per measurement instant.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        let q = self.u.as_ref().map_or(0, |u| u.ncols());
        let mut header = vec!["time".to_string()];
        header.extend((1..=self.nodes()).map(|j| format!("z{j}")));
        header.extend((1..=q).map(|j| format!("u{j}")));
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for (i, t) in self.times.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(self.z.row(i).iter().map(|v| v.to_string()));
            if let Some(u) = &self.u {
                rec.extend(u.row(i).iter().map(|v| v.to_string()));
            }
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a CSV table written by [`write_csv`](Self::write_csv). Columns
    /// named `u*` are inputs; every other column after the first is a node.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(BufReader::new(file));
        let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
        if header.len() < 2 {
            return Err(Error::Parse {
                row: 1,
                message: "expected a time column and at least one measurement column".into(),
            });
        }
        let is_input: Vec<bool> = header.iter().skip(1).map(|h| h.trim().starts_with('u')).collect();
        let p = is_input.iter().filter(|&&b| !b).count();
        let q = is_input.len() - p;
        let mut times = Vec::new();
        let mut zs = Vec::new();
        let mut us = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2;
            let rec = rec.map_err(|e| Error::Parse { row, message: e.to_string() })?;
            if rec.len() != header.len() {
                return Err(Error::Parse {
                    row,
                    message: format!("expected {} fields, found {}", header.len(), rec.len()),
                });
            }
            let mut vals = Vec::with_capacity(rec.len());
            for (c, field) in rec.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    row,
                    message: format!("column `{}` is not a number: `{field}`", &header[c]),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row,
                        message: format!("column `{}` is not finite", &header[c]),
                    });
                }
                vals.push(v);
            }
            if let Some(&prev) = times.last() {
                if !(vals[0] > prev) {
                    return Err(Error::Parse {
                        row,
                        message: format!("time {} is not after {prev}; times must be strictly increasing", vals[0]),
                    });
                }
            }
            times.push(vals[0]);
            for (c, v) in vals[1..].iter().enumerate() {
                if is_input[c] {
                    us.push(*v);
                } else {
                    zs.push(*v);
                }
            }
        }
        let m = times.len();
        let z = DMatrix::from_row_slice(m, p, &zs);
        let u = (q > 0).then(|| DMatrix::from_row_slice(m, q, &us));
        Self::new(times, z, u)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Data("ragged matrix in sidecar".into()));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), cols, rows.iter().flatten().copied()))
}

/// JSON sidecar describing how a dataset was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub network: String,
    pub n: usize,
    pub p: usize,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub seed: u64,
    pub snr_db: f64,
    pub lambda_meas: f64,
    pub input_variance: f64,
    pub noise_variance: f64,
    /// Measured-node adjacency, `truth[r][j]` for the link `j → r`.
    pub truth: Vec<Vec<bool>>,
}

impl DatasetSidecar {
    pub fn from_system(
        network: &str,
        sys: &SystemMatrices,
        seed: u64,
        snr_db: f64,
        lambda_meas: f64,
        input_variance: f64,
        noise_variance: f64,
    ) -> Self {
        Self {
            network: network.to_string(),
            n: sys.n,
            p: sys.p,
            a: rows_of(&sys.a),
            b: rows_of(&sys.b),
            k: rows_of(&sys.k),
            seed,
            snr_db,
            lambda_meas,
            input_variance,
            noise_variance,
            truth: sys.truth(),
        }
    }

    pub fn system(&self) -> Result<SystemMatrices> {
        let a = from_rows(&self.a, self.n)?;
        let b = from_rows(&self.b, self.b.first().map_or(0, |r| r.len()))?;
        let k = from_rows(&self.k, self.k.first().map_or(0, |r| r.len()))?;
        SystemMatrices::new(a, b, k, self.p)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Writes pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
