//! Cohort CSV: `subject_id, region, <covariates>, t1, e1, t2, e2`.
//!
//! `region` is 1-based. `e1` is 0 (censored), 1 (illness) or 2 (death);
//! `t2` is the sojourn in the illness state and `e2` flags death at its end,
//! both left empty unless `e1 = 1`.

use std::io::{Read, Write};

use illdeath::likelihood::{FirstExit, Subject};

use crate::error::{CliError, CliResult};

const FIXED: [&str; 6] = ["subject_id", "region", "t1", "e1", "t2", "e2"];

pub fn write<W: Write>(out: W, covariates: &[String], data: &[Subject]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["subject_id".to_string(), "region".to_string()];
    header.extend(covariates.iter().cloned());
    header.extend(["t1", "e1", "t2", "e2"].map(String::from));
    w.write_record(&header).map_err(csv_error)?;
    for (i, s) in data.iter().enumerate() {
        let mut row = vec![(i + 1).to_string(), (s.region + 1).to_string()];
        row.extend(s.covariates.iter().map(f64::to_string));
        row.push(s.t1.to_string());
        row.push(s.exit.code().to_string());
        match s.exit {
            FirstExit::Illness { sojourn, died } => {
                row.push(sojourn.to_string());
                row.push(u8::from(died).to_string());
            }
            _ => row.extend([String::new(), String::new()]),
        }
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush().map_err(|e| CliError::data(e.to_string()))
}

fn csv_error(e: csv::Error) -> CliError {
    CliError::data(e.to_string())
}

/// Reads the rows, keeping the covariate columns named in `covariates` in
/// that order. Columns not named are ignored.
pub fn read<R: Read>(input: R, covariates: &[String], n_regions: usize) -> CliResult<Vec<Subject>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = r.headers().map_err(csv_error)?.clone();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::data(format!("cohort has no column `{name}`")))
    };
    let fixed: Vec<usize> = FIXED.iter().map(|n| column(n)).collect::<CliResult<_>>()?;
    let cov_idx: Vec<usize> = covariates
        .iter()
        .map(|n| column(n))
        .collect::<CliResult<_>>()?;
    let [_, region_i, t1_i, e1_i, t2_i, e2_i] = fixed[..] else {
        unreachable!()
    };
    let mut out = Vec::new();
    let mut ids = std::collections::HashSet::new();
    for (row, rec) in r.records().enumerate() {
        // Header is line 1.
        let line = row + 2;
        let rec = rec.map_err(|e| CliError::data(format!("line {line}: {e}")))?;
        let fail = |msg: String| CliError::data(format!("line {line}: {msg}"));
        let field = |i: usize| rec.get(i).unwrap_or("");
        let number = |i: usize| -> CliResult<f64> {
            let s = field(i);
            s.parse::<f64>().map_err(|_| {
                fail(format!(
                    "`{}` is not a number in column `{}`",
                    s, &header[i]
                ))
            })
        };
        let id = field(fixed[0]);
        if id.is_empty() {
            return Err(fail("empty subject_id".into()));
        }
        if !ids.insert(id.to_string()) {
            return Err(fail(format!("duplicate subject_id `{id}`")));
        }
        let region: usize = field(region_i)
            .parse()
            .map_err(|_| fail(format!("`{}` is not a region index", field(region_i))))?;
        if region == 0 || region > n_regions {
            return Err(fail(format!("region {region} outside 1..={n_regions}")));
        }
        let covs = cov_idx
            .iter()
            .map(|&i| number(i))
            .collect::<CliResult<Vec<f64>>>()?;
        let t1 = number(t1_i)?;
        let exit = match field(e1_i) {
            "0" | "2" => {
                if !field(t2_i).is_empty() || !matches!(field(e2_i), "" | "0") {
                    return Err(fail("t2 and e2 must be empty unless e1 = 1".into()));
                }
                if field(e1_i) == "0" {
                    FirstExit::Censored
                } else {
                    FirstExit::Death
                }
            }
            "1" => {
                let sojourn = number(t2_i)?;
                let died = match field(e2_i) {
                    "0" => false,
                    "1" => true,
                    other => return Err(fail(format!("e2 must be 0 or 1, got `{other}`"))),
                };
                FirstExit::Illness { sojourn, died }
            }
            other => return Err(fail(format!("e1 must be 0, 1 or 2, got `{other}`"))),
        };
        let s = Subject {
            region: region - 1,
            covariates: covs,
            t1,
            exit,
        };
        s.validate(n_regions, covariates.len())
            .map_err(|e| fail(e.to_string()))?;
        out.push(s);
    }
    Ok(out)
}
