//! Metrics CSV: one row per evaluation, columns fixed by [`HEADER`].

use std::io::{Read, Write};
use std::path::Path;

use crate::diagnostics::MetricsRecord;
use crate::error::{Error, Result};

pub const HEADER: [&str; 18] = [
    "run_id",
    "seed",
    "mode",
    "step",
    "G",
    "U",
    "train_mse",
    "test_mse",
    "align_emp",
    "align_pop",
    "align_pop_stderr",
    "param_align",
    "dof",
    "mean_w_sq",
    "mean_a_sq",
    "sigma",
    "tilde_sigma",
    "wall_ms",
];

/// A parsed CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub mode: String,
    pub record: MetricsRecord,
}

pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

// `{:?}` prints the shortest representation that parses back to the same f64.
fn num(v: f64) -> String {
    format!("{v:?}")
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(HEADER)?;
        Ok(Self { inner })
    }

    /// Continues an existing file: no header is written.
    pub fn append(out: W) -> Self {
        Self {
            inner: csv::Writer::from_writer(out),
        }
    }

    pub fn write(&mut self, run_id: &str, seed: u64, mode: &str, r: &MetricsRecord) -> Result<()> {
        let nums = [
            r.g,
            r.u,
            r.train_mse,
            r.test_mse,
            r.align_emp,
            r.align_pop,
            r.align_pop_stderr,
            r.param_align,
            r.dof,
            r.mean_w_sq,
            r.mean_a_sq,
            r.sigma,
            r.tilde_sigma,
            r.wall_ms,
        ];
        let mut row = vec![run_id.to_string(), seed.to_string(), mode.to_string(), r.step.to_string()];
        row.extend(nums.iter().map(|&v| num(v)));
        self.inner.write_record(&row)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_metrics<R: Read>(input: R) -> Result<Vec<MetricsRow>> {
    let bad = |detail: String| Error::Malformed {
        what: "metrics csv",
        detail,
    };
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    if header.iter().ne(HEADER.iter().copied()) {
        return Err(bad(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let f = |k: usize| -> Result<f64> {
            rec[k]
                .parse::<f64>()
                .map_err(|_| bad(format!("row {}: column {} is not a number: {:?}", i + 1, HEADER[k], &rec[k])))
        };
        let int = |k: usize| -> Result<u64> {
            rec[k]
                .parse::<u64>()
                .map_err(|_| bad(format!("row {}: column {} is not an integer: {:?}", i + 1, HEADER[k], &rec[k])))
        };
        rows.push(MetricsRow {
            run_id: rec[0].to_string(),
            seed: int(1)?,
            mode: rec[2].to_string(),
            record: MetricsRecord {
                step: int(3)?,
                g: f(4)?,
                u: f(5)?,
                train_mse: f(6)?,
                test_mse: f(7)?,
                align_emp: f(8)?,
                align_pop: f(9)?,
                align_pop_stderr: f(10)?,
                param_align: f(11)?,
                dof: f(12)?,
                mean_w_sq: f(13)?,
                mean_a_sq: f(14)?,
                sigma: f(15)?,
                tilde_sigma: f(16)?,
                wall_ms: f(17)?,
            },
        });
    }
    Ok(rows)
}

pub fn read_metrics_file(path: &Path) -> Result<Vec<MetricsRow>> {
    read_metrics(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: u64) -> MetricsRecord {
        MetricsRecord {
            step,
            g: 0.1,
            u: 1.0 / 3.0,
            train_mse: 1e-300,
            test_mse: 2.5e10,
            align_emp: 0.7,
            align_pop: f64::NAN,
            align_pop_stderr: f64::NAN,
            param_align: 0.25,
            dof: 123.456,
            mean_w_sq: 16.0,
            mean_a_sq: -0.0,
            sigma: 0.5,
            tilde_sigma: 0.0,
            wall_ms: 3.0,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let mut buf = Vec::new();
        {
            let mut w = MetricsWriter::new(&mut buf).unwrap();
            w.write("r1", 7, "mfld", &record(0)).unwrap();
            w.write("r1", 7, "mfld", &record(25)).unwrap();
            w.flush().unwrap();
        }
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("run_id,seed,mode,step,G,U,train_mse,test_mse,"));
        let rows = read_metrics(&buf[..]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].record.step, 25);
        assert_eq!(rows[0].record.u.to_bits(), (1.0f64 / 3.0).to_bits());
        assert_eq!(rows[0].record.train_mse, 1e-300);
        assert!(rows[0].record.align_pop.is_nan());
        assert_eq!(rows[0].seed, 7);
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(matches!(read_metrics(&b"a,b\n1,2\n"[..]), Err(Error::Malformed { .. })));
        let mut text = HEADER.join(",");
        text.push_str("\nr,1,mfld,0,x,1,1,1,1,1,1,1,1,1,1,1,1,1\n");
        assert!(matches!(read_metrics(text.as_bytes()), Err(Error::Malformed { .. })));
    }
}
