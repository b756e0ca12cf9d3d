//! CSV ingestion and export.
//!
//! One row per `(sample_id, t)` pair: `sample_id,t,<features...>,target`,
//! grouped by sample and ordered by `t`. The target is repeated on every row
//! of a sample. A TOML sidecar with the same basename and a `.meta`
//! extension carries the schema.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MtsDataset, TaskKind, Targets};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub task: TaskKind,
    pub streams: usize,
    pub seq_len: usize,
    pub feature_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted: Option<Vec<usize>>,
}

impl DatasetMeta {
    pub fn of(dataset: &MtsDataset) -> Self {
        DatasetMeta {
            task: dataset.task(),
            streams: dataset.streams(),
            seq_len: dataset.seq_len(),
            feature_names: dataset.feature_names().to_vec(),
            classes: dataset.class_count(),
            planted: dataset.planted.clone(),
        }
    }
}

pub fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta")
}

pub fn write_csv(dataset: &MtsDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string(), "t".to_string()];
    header.extend(dataset.feature_names().iter().cloned());
    header.push("target".into());
    w.write_record(&header)?;
    let (len, d) = (dataset.seq_len(), dataset.streams());
    let targets: Vec<String> = match dataset.targets() {
        Targets::Regression(v) => v.iter().map(f64::to_string).collect(),
        Targets::Classes { labels, .. } => labels.iter().map(usize::to_string).collect(),
    };
    let mut record = Vec::with_capacity(d + 3);
    for (i, target) in targets.iter().enumerate() {
        for t in 0..len {
            record.clear();
            record.push(i.to_string());
            record.push(t.to_string());
            record.extend((0..d).map(|j| dataset.value(i, t, j).to_string()));
            record.push(target.clone());
            w.write_record(&record)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<DatasetMeta> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(toml::from_str(&text)?)
}

/// Writes the CSV and its `.meta` sidecar.
pub fn write_dataset(dataset: &MtsDataset, path: &Path) -> Result<()> {
    write_csv(dataset, path)?;
    let meta = toml::to_string(&DatasetMeta::of(dataset))?;
    let mpath = meta_path(path);
    fs::write(&mpath, meta).map_err(|e| Error::io(mpath, e))
}

/// Reads a CSV using its `.meta` sidecar as the schema.
pub fn read_dataset(path: &Path) -> Result<MtsDataset> {
    let meta = read_meta(&meta_path(path))?;
    load_csv(path, &meta)
}

fn ingest(row: usize, detail: impl Into<String>) -> Error {
    Error::Ingestion { row, detail: detail.into() }
}

fn parse_real(cell: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| ingest(row, format!("column `{column}`: `{cell}` is not a number")))?;
    if !v.is_finite() {
        return Err(ingest(row, format!("column `{column}`: non-finite value `{cell}`")));
    }
    Ok(v)
}

#[derive(Clone, Copy, PartialEq)]
enum Target {
    Real(f64),
    Class(usize),
}

pub fn load_csv(path: &Path, schema: &DatasetMeta) -> Result<MtsDataset> {
    let d = schema.streams;
    let len = schema.seq_len;
    if d == 0 || len == 0 || schema.feature_names.len() != d {
        return Err(Error::Config("schema needs positive streams/seq_len and one name per stream".into()));
    }
    let classes = match schema.task {
        TaskKind::Classification => {
            Some(schema.classes.ok_or_else(|| Error::Config("classification schema needs `classes`".into()))?)
        }
        TaskKind::Regression => None,
    };

    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header = reader.headers()?.clone();
    let expected: Vec<&str> = ["sample_id", "t"]
        .into_iter()
        .chain(schema.feature_names.iter().map(String::as_str))
        .chain(["target"])
        .collect();
    let found: Vec<&str> = header.iter().map(str::trim).collect();
    if found != expected {
        return Err(ingest(1, format!("header {found:?} does not match expected columns {expected:?}")));
    }

    let mut data = Vec::new();
    let mut targets: Vec<Target> = Vec::new();
    let mut seen = HashSet::new();
    let mut current: Option<String> = None;
    let mut steps = 0usize;
    let mut last_row = 1;

    let finish = |id: &str, steps: usize, row: usize| -> Result<()> {
        if steps != len {
            return Err(ingest(row, format!("sample `{id}` has {steps} time steps, expected {len}")));
        }
        Ok(())
    };

    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        last_row = row;
        let record = record?;
        if record.len() != d + 3 {
            return Err(ingest(row, format!("expected {} columns, found {}", d + 3, record.len())));
        }
        let id = record[0].trim();
        if current.as_deref() != Some(id) {
            if let Some(prev) = &current {
                finish(prev, steps, row - 1)?;
            }
            if !seen.insert(id.to_string()) {
                return Err(ingest(row, format!("sample `{id}` appears in more than one block")));
            }
            current = Some(id.to_string());
            steps = 0;
        }
        let t: usize = record[1]
            .trim()
            .parse()
            .map_err(|_| ingest(row, format!("sample `{id}`: time index `{}` is not an integer", &record[1])))?;
        if t != steps {
            return Err(ingest(row, format!("sample `{id}`: expected time step {steps}, found {t}")));
        }
        if steps >= len {
            return Err(ingest(row, format!("sample `{id}` has more than {len} time steps")));
        }
        for j in 0..d {
            data.push(parse_real(&record[2 + j], row, &schema.feature_names[j])?);
        }
        let cell = record[d + 2].trim();
        let target = match classes {
            Some(k) => {
                let label: usize =
                    cell.parse().map_err(|_| ingest(row, format!("sample `{id}`: label `{cell}` is not a class index")))?;
                if label >= k {
                    return Err(ingest(row, format!("sample `{id}`: label {label} out of range for {k} classes")));
                }
                Target::Class(label)
            }
            None => Target::Real(parse_real(cell, row, "target")?),
        };
        if steps == 0 {
            targets.push(target);
        } else if targets.last() != Some(&target) {
            return Err(ingest(row, format!("sample `{id}`: target changes within the sample")));
        }
        steps += 1;
    }
    match &current {
        Some(id) => finish(id, steps, last_row)?,
        None => return Err(ingest(1, "file holds no samples")),
    }

    let n = targets.len();
    let x = Tensor::new(vec![n, len, d], data)?;
    let targets = match classes {
        Some(k) => Targets::Classes {
            labels: targets.iter().map(|t| if let Target::Class(c) = t { *c } else { unreachable!() }).collect(),
            classes: k,
        },
        None => Targets::Regression(targets.iter().map(|t| if let Target::Real(v) = t { *v } else { unreachable!() }).collect()),
    };
    let mut ds = MtsDataset::new(x, targets, schema.feature_names.clone())?;
    ds.planted = schema.planted.clone();
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn schema(d: usize, len: usize) -> DatasetMeta {
        DatasetMeta {
            task: TaskKind::Regression,
            streams: d,
            seq_len: len,
            feature_names: (0..d).map(|j| format!("x{j}")).collect(),
            classes: None,
            planted: None,
        }
    }

    fn write(dir: &tempfile::TempDir, body: &str) -> PathBuf {
        let p = dir.path().join("data.csv");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn hand_written_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "sample_id,t,x0,x1,target\n\
             a,0,1,2,0.5\na,1,3,4,0.5\na,2,5,6,0.5\n\
             b,0,7,8,-1\nb,1,9,10,-1\nb,2,11,12,-1\n",
        );
        let ds = load_csv(&p, &schema(2, 3)).unwrap();
        assert_eq!(ds.x().shape(), &[2, 3, 2]);
        assert_eq!(ds.value(1, 2, 1), 12.0);
        assert_eq!(ds.targets().as_f64(), vec![0.5, -1.0]);
    }

    #[test]
    fn missing_timestep_names_sample() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "sample_id,t,x0,target\ns1,0,1,0\ns1,1,1,0\ns2,0,1,0\ns2,2,1,0\n");
        let err = load_csv(&p, &schema(1, 2)).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Ingestion { row: 5, .. }), "{msg}");
        assert!(msg.contains("s2"), "{msg}");
    }

    #[test]
    fn short_sample_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "sample_id,t,x0,target\ns1,0,1,0\ns2,0,1,0\ns2,1,1,0\n");
        let msg = load_csv(&p, &schema(1, 2)).unwrap_err().to_string();
        assert!(msg.contains("s1") && msg.contains("1 time steps"), "{msg}");
    }

    #[test]
    fn bad_cells_and_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "sample_id,t,x0,target\ns1,0,abc,0\n");
        assert!(matches!(load_csv(&p, &schema(1, 1)), Err(Error::Ingestion { row: 2, .. })));
        let p = write(&dir, "sample_id,t,target\ns1,0,0\n");
        assert!(matches!(load_csv(&p, &schema(1, 1)), Err(Error::Ingestion { row: 1, .. })));
        let p = write(&dir, "sample_id,t,x0,target\ns1,0,1\n");
        assert!(matches!(load_csv(&p, &schema(1, 1)), Err(Error::Ingestion { row: 2, .. })));
        let p = write(&dir, "sample_id,t,x0,target\ns1,0,NaN,0\n");
        assert!(load_csv(&p, &schema(1, 1)).is_err());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for task in [TaskKind::Regression, TaskKind::Classification] {
            let spec = SyntheticSpec { samples: 30, seq_len: 7, streams: 4, informative: vec![0, 3], task, ..Default::default() };
            let ds = generate_synthetic(&spec).unwrap();
            let p = dir.path().join("gen.csv");
            write_dataset(&ds, &p).unwrap();
            let back = read_dataset(&p).unwrap();
            assert_eq!(back, ds);
            assert!(back.x().data().iter().zip(ds.x().data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
