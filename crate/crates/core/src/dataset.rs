//! JSON-lines dataset records, one channel realization per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_len, invalid, Result};
use crate::model::{
    db_to_linear, rotate_and_lift_with, ChannelSet, LiftedProblem, PskSymbols, RotationConvention,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub seed: u64,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub h_re: Vec<Vec<f64>>,
    pub h_im: Vec<Vec<f64>>,
    pub phases: Vec<f64>,
    pub gamma_db: Vec<f64>,
    pub n0: f64,
}

impl DatasetRecord {
    pub fn from_parts(
        seed: u64,
        ch: &ChannelSet,
        sym: &PskSymbols,
        gamma_db: Vec<f64>,
        n0: f64,
    ) -> Self {
        let g = ch.gains();
        let rows = |f: fn(&Complex64) -> f64| -> Vec<Vec<f64>> {
            (0..g.nrows())
                .map(|i| (0..g.ncols()).map(|j| f(&g[(i, j)])).collect())
                .collect()
        };
        Self {
            seed,
            k: ch.users(),
            n: ch.antennas(),
            h_re: rows(|z| z.re),
            h_im: rows(|z| z.im),
            phases: sym.phases().to_vec(),
            gamma_db,
            n0,
        }
    }

    pub fn channels(&self) -> Result<ChannelSet> {
        check_len("h_re rows", self.k, self.h_re.len())?;
        check_len("h_im rows", self.k, self.h_im.len())?;
        for (re, im) in self.h_re.iter().zip(&self.h_im) {
            check_len("h_re columns", self.n, re.len())?;
            check_len("h_im columns", self.n, im.len())?;
        }
        ChannelSet::new(DMatrix::from_fn(self.k, self.n, |i, j| {
            Complex64::new(self.h_re[i][j], self.h_im[i][j])
        }))
    }

    pub fn symbols(&self) -> Result<PskSymbols> {
        check_len("phases", self.k, self.phases.len())?;
        PskSymbols::infer(&self.phases)
    }

    pub fn gamma_linear(&self) -> Vec<f64> {
        self.gamma_db.iter().map(|&d| db_to_linear(d)).collect()
    }

    pub fn lift(&self, convention: RotationConvention) -> Result<LiftedProblem> {
        check_len("gamma_db", self.k, self.gamma_db.len())?;
        rotate_and_lift_with(
            &self.channels()?,
            &self.symbols()?,
            &self.gamma_linear(),
            self.n0,
            convention,
        )
    }

    /// Lifts with every user's target replaced by `db`.
    pub fn lift_at(&self, db: f64, convention: RotationConvention) -> Result<LiftedProblem> {
        let gamma = vec![db_to_linear(db); self.k];
        rotate_and_lift_with(
            &self.channels()?,
            &self.symbols()?,
            &gamma,
            self.n0,
            convention,
        )
    }
}

pub fn write_jsonl(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DatasetRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| invalid(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// SHA-256 over the canonical JSON-lines encoding.
pub fn fingerprint(records: &[DatasetRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(serde_json::to_vec(r).expect("records always serialize"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}
