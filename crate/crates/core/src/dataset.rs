//! Excitation datasets: joint measurements and the discrete commands that
//! produced them, sampled at the control rate (20 Hz). One file per session;
//! velocities are deliberately not stored — they are reconstructed by the
//! tracking observer, matching encoder-only sensing.

use crate::{Action, Error, Joints, Result};
use std::path::Path;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub q: Vec<Joints>,
    pub a: Vec<Action>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn push(&mut self, q: Joints, a: Action) {
        self.q.push(q);
        self.a.push(a);
    }

    /// Rows `t,q0..q3,a0..a3`; `t` is the tick index.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["t", "q0", "q1", "q2", "q3", "a0", "a1", "a2", "a3"])
            .map_err(csv_err)?;
        for (t, (q, a)) in self.q.iter().zip(&self.a).enumerate() {
            let mut rec = Vec::with_capacity(9);
            rec.push(t.to_string());
            for v in q {
                rec.push(format!("{v:?}"));
            }
            for v in a {
                rec.push(v.to_string());
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Dataset> {
        let mut r = csv::Reader::from_path(path)
            .map_err(|e| Error::Format(format!("cannot open dataset {}: {e}", path.display())))?;
        let headers = r.headers().map_err(csv_err)?.clone();
        let expect = ["t", "q0", "q1", "q2", "q3", "a0", "a1", "a2", "a3"];
        if headers.iter().ne(expect) {
            return Err(Error::Format(format!(
                "dataset {}: unexpected header {:?}",
                path.display(),
                headers
            )));
        }
        let mut ds = Dataset::default();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != 9 {
                return Err(Error::Format(format!(
                    "dataset {}: row {i} has {} fields, expected 9",
                    path.display(),
                    rec.len()
                )));
            }
            let mut q = [0.0; 4];
            for j in 0..4 {
                q[j] = rec[1 + j]
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("row {i}, q{j}: {e}")))?;
                if !q[j].is_finite() {
                    return Err(Error::NonFinite(format!("dataset row {i}, q{j}")));
                }
            }
            let mut a = [0i8; 4];
            for j in 0..4 {
                a[j] = rec[5 + j]
                    .parse::<i8>()
                    .map_err(|e| Error::Format(format!("row {i}, a{j}: {e}")))?;
                if !(-1..=1).contains(&a[j]) {
                    return Err(Error::Format(format!(
                        "dataset row {i}: a{j} = {} outside {{-1,0,1}}",
                        a[j]
                    )));
                }
            }
            ds.push(q, a);
        }
        Ok(ds)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_is_bit_exact() {
        let mut ds = Dataset::default();
        ds.push([0.1, -0.2, 0.3333333333333333, 1e-17], [1, 0, -1, 0]);
        ds.push([std::f64::consts::PI, 0.0, -1.4, 0.4], [0, 0, 0, 1]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        ds.write_csv(&path).unwrap();
        let back = Dataset::read_csv(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn bad_action_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "t,q0,q1,q2,q3,a0,a1,a2,a3\n0,0,0,0,0,2,0,0,0\n").unwrap();
        assert!(Dataset::read_csv(&path).is_err());
    }

    #[test]
    fn bad_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "time,q0,q1,q2,q3,a0,a1,a2,a3\n").unwrap();
        assert!(Dataset::read_csv(&path).is_err());
    }
}
