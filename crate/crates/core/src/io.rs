//! Text formats for datasets and chains.
//!
//! Datasets: CSV with columns `subject, occasion, state_true, dep_1..dep_k`
//! (states 1-based; `state_true` empty when unknown). Chains: CSV with one
//! row per stored draw and a JSON metadata sidecar next to it. Floats are
//! written in shortest round-trip form, so reading a file back gives the
//! exact values that were written.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;
use crate::model::{Dataset, SubjectParams, SubjectSeries};
use crate::sampler::{group_from_values, param_names, param_values, Chain, ChainMeta, Draw};

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n_dep = dataset.n_dep();
    let mut header = vec![
        "subject".to_string(),
        "occasion".into(),
        "state_true".into(),
    ];
    header.extend((1..=n_dep).map(|k| format!("dep_{k}")));
    w.write_record(&header)?;
    for (n, s) in dataset.subjects.iter().enumerate() {
        for t in 0..s.len() {
            let mut row = vec![
                (n + 1).to_string(),
                (t + 1).to_string(),
                s.true_states
                    .as_ref()
                    .map_or(String::new(), |st| (st[t] + 1).to_string()),
            ];
            row.extend(s.obs.row(t).iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset. Subjects appear in order of first appearance and their
/// rows must be contiguous with increasing occasions. Parse errors carry the
/// 1-based line number of the offending row.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_dataset(&text)
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if header.len() < 4 {
        return Err(parse_err(
            1,
            "expected columns subject, occasion, state_true and at least one variable",
        ));
    }
    for (i, want) in ["subject", "occasion", "state_true"].iter().enumerate() {
        if &header[i] != *want {
            return Err(parse_err(
                1,
                format!("column {} must be `{want}`, found `{}`", i + 1, &header[i]),
            ));
        }
    }
    let n_dep = header.len() - 3;

    struct Building {
        id: String,
        last_occasion: i64,
        rows: Vec<f64>,
        states: Vec<Option<usize>>,
        first_line: usize,
    }
    let mut subjects: Vec<Building> = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let id = rec[0].to_string();
        let occasion: i64 = rec[1]
            .parse()
            .map_err(|_| parse_err(line, format!("occasion `{}` is not an integer", &rec[1])))?;
        let state = match &rec[2] {
            "" | "NA" => None,
            s => {
                let v: usize = s.parse().map_err(|_| {
                    parse_err(line, format!("state `{s}` is not a positive integer"))
                })?;
                if v == 0 {
                    return Err(parse_err(line, "states are numbered from 1"));
                }
                Some(v - 1)
            }
        };
        let mut values = Vec::with_capacity(n_dep);
        for k in 0..n_dep {
            let raw = &rec[3 + k];
            let v: f64 = raw.parse().map_err(|_| {
                parse_err(
                    line,
                    format!(
                        "value `{raw}` in column `{}` is not a number",
                        &header[3 + k]
                    ),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    line,
                    format!("non-finite value in column `{}`", &header[3 + k]),
                ));
            }
            values.push(v);
        }
        match subjects.last_mut() {
            Some(b) if b.id == id => {
                if occasion <= b.last_occasion {
                    return Err(parse_err(
                        line,
                        format!("occasions of subject {id} must increase"),
                    ));
                }
                b.last_occasion = occasion;
                b.rows.extend(values);
                b.states.push(state);
            }
            _ => {
                if subjects.iter().any(|b| b.id == id) {
                    return Err(parse_err(
                        line,
                        format!("rows of subject {id} are not contiguous"),
                    ));
                }
                subjects.push(Building {
                    id,
                    last_occasion: occasion,
                    rows: values,
                    states: vec![state],
                    first_line: line,
                });
            }
        }
    }
    if subjects.is_empty() {
        return Err(parse_err(2, "dataset has no rows"));
    }
    let mut out = Vec::with_capacity(subjects.len());
    for b in subjects {
        let n = b.states.len();
        let known = b.states.iter().filter(|s| s.is_some()).count();
        let true_states = if known == n {
            Some(b.states.into_iter().map(Option::unwrap).collect())
        } else if known == 0 {
            None
        } else {
            return Err(parse_err(
                b.first_line,
                format!("subject {} has states for only some occasions", b.id),
            ));
        };
        out.push(SubjectSeries {
            obs: Matrix::from_fn(n, n_dep, |t, k| b.rows[t * n_dep + k]),
            true_states,
        });
    }
    Ok(Dataset { subjects: out })
}

/// Path of the metadata sidecar for a chain file.
pub fn meta_path(chain_path: &Path) -> PathBuf {
    chain_path.with_extension("meta.json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainFileMeta<C> {
    pub m: usize,
    pub n_dep: usize,
    pub chain: ChainMeta,
    /// Effective run configuration.
    pub config: C,
}

pub fn write_chain<C: Serialize>(path: &Path, chain: &Chain, config: &C) -> Result<()> {
    let (m, n_dep) = (chain.m(), chain.n_dep());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = param_names(m, n_dep);
    header.push("loglik".into());
    w.write_record(&header)?;
    for d in &chain.draws {
        let mut row: Vec<String> = param_values(&d.group)
            .iter()
            .map(|v| v.to_string())
            .collect();
        row.push(d.loglik.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    let meta = ChainFileMeta {
        m,
        n_dep,
        chain: chain.meta.clone(),
        config,
    };
    fs::write(meta_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Infers `(m, n_dep)` from chain column names.
fn dims_from_header(header: &csv::StringRecord) -> Result<(usize, usize)> {
    let count = |prefix: &str| header.iter().filter(|h| h.starts_with(prefix)).count();
    let gamma = count("gamma.");
    let m = (gamma as f64).sqrt().round() as usize;
    if m < 2 || m * m != gamma {
        return Err(parse_err(
            1,
            "chain header lacks a square block of gamma.<i>.<j> columns",
        ));
    }
    let emiss = count("emiss_mean.");
    if emiss == 0 || emiss % m != 0 {
        return Err(parse_err(
            1,
            "chain header has an inconsistent emiss_mean block",
        ));
    }
    Ok((m, emiss / m))
}

/// Reads a chain file. Subject-level draws are not persisted, so the
/// returned draws carry group-level values only. The metadata sidecar is
/// read when present.
pub fn read_chain(path: &Path) -> Result<Chain> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let (m, n_dep) = dims_from_header(&header)?;
    let expected = {
        let mut h = param_names(m, n_dep);
        h.push("loglik".into());
        h
    };
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(parse_err(1, "unexpected chain columns"));
    }
    let mut draws = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| parse_err(line, format!("`{s}` is not a number")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != expected.len() {
            return Err(parse_err(line, "wrong number of fields"));
        }
        draws.push(Draw {
            group: group_from_values(&vals, m, n_dep)?,
            subjects: Vec::<SubjectParams>::new(),
            loglik: *vals.last().unwrap(),
        });
    }
    if draws.is_empty() {
        return Err(invalid(format!(
            "chain file {} has no draws",
            path.display()
        )));
    }
    let meta_file = meta_path(path);
    let meta = if meta_file.exists() {
        let parsed: ChainFileMeta<serde_json::Value> =
            serde_json::from_str(&fs::read_to_string(&meta_file)?)?;
        if (parsed.m, parsed.n_dep) != (m, n_dep) {
            return Err(invalid(
                "chain metadata dimensions disagree with the chain file",
            ));
        }
        parsed.chain
    } else {
        ChainMeta {
            chain_index: 0,
            n_iter: draws.len(),
            burn_in: 0,
            thin: 1,
            seed: 0,
            acceptance: Vec::new(),
            proposal_sd: Vec::new(),
            proposal_target: (0.0, 0.0),
            initial_distribution: "unknown".into(),
            empty_state_sweeps: 0,
            start: None,
        }
    };
    Ok(Chain { draws, meta })
}
