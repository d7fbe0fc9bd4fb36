//! CSV sample/label files and the JSON sidecars next to them.
//!
//! Samples: header `sample_id,t,<KPI names>`, one row per (sample, timestep),
//! timesteps `0..l` contiguous per sample. Labels: `sample_id,class_id,source`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::{KpiSample, LabelSource, LabeledDataset, ZScore};
use crate::error::{data_err, Result};
use crate::schema::{KpiSchema, RootCause};

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

pub fn write_samples(path: &Path, schema: &KpiSchema, samples: &[KpiSample]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string(), "t".to_string()];
    header.extend(schema.names().map(str::to_string));
    w.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for s in samples {
        if s.m() != schema.m() {
            return data_err(format!("sample `{}` has {} channels, schema has {}", s.id, s.m(), schema.m()));
        }
        let l = s.len();
        let d = s.values().data();
        for t in 0..l {
            row.clear();
            row.push(s.id.clone());
            row.push(t.to_string());
            for c in 0..s.m() {
                row.push(format!("{}", d[c * l + t]));
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path, schema: &KpiSchema) -> Result<Vec<KpiSample>> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header = r.headers()?.clone();
    let want = schema.m() + 2;
    let names_ok = header.len() == want
        && header.get(0) == Some("sample_id")
        && header.get(1) == Some("t")
        && header.iter().skip(2).zip(schema.names()).all(|(a, b)| a == b);
    if !names_ok {
        return data_err(format!(
            "{}: header must be `sample_id,t` followed by the {} schema KPIs in order",
            path.display(),
            schema.m()
        ));
    }
    let m = schema.m();
    let mut out = Vec::new();
    let mut cur_id: Option<String> = None;
    let mut cur: Vec<Vec<f64>> = Vec::new();
    let flush = |id: String, rows: &mut Vec<Vec<f64>>, out: &mut Vec<KpiSample>| -> Result<()> {
        let l = rows.len();
        let mut data = vec![0.0; m * l];
        for (t, row) in rows.iter().enumerate() {
            for c in 0..m {
                data[c * l + t] = row[c];
            }
        }
        rows.clear();
        out.push(KpiSample::from_rows(id, m, l, data)?);
        Ok(())
    };
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != want {
            return data_err(format!(
                "{} row {line}: {} columns, header has {want}",
                path.display(),
                rec.len()
            ));
        }
        let id = rec[0].to_string();
        let t: usize = rec[1]
            .parse()
            .map_err(|_| crate::error::RcaError::Data(format!("{} row {line}: bad timestep `{}`", path.display(), &rec[1])))?;
        if cur_id.as_deref() != Some(id.as_str()) {
            if let Some(prev) = cur_id.take() {
                flush(prev, &mut cur, &mut out)?;
            }
            cur_id = Some(id.clone());
        }
        if t != cur.len() {
            return data_err(format!(
                "{} row {line}: sample `{id}` timestep {t}, expected {}",
                path.display(),
                cur.len()
            ));
        }
        let mut vals = Vec::with_capacity(m);
        for (j, f) in rec.iter().skip(2).enumerate() {
            let v: f64 = f.trim().parse().map_err(|_| {
                crate::error::RcaError::Data(format!("{} row {line}: bad value `{f}` in column {}", path.display(), j + 3))
            })?;
            if !v.is_finite() {
                return data_err(format!("{} row {line}: non-finite value in column {}", path.display(), j + 3));
            }
            vals.push(v);
        }
        cur.push(vals);
    }
    if let Some(prev) = cur_id {
        flush(prev, &mut cur, &mut out)?;
    }
    if let Some(l) = out.first().map(KpiSample::len) {
        if let Some(bad) = out.iter().find(|s| s.len() != l) {
            return data_err(format!("sample `{}` has {} timesteps, expected {l}", bad.id, bad.len()));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelRow {
    pub sample_id: String,
    pub class: RootCause,
    pub source: LabelSource,
}

pub fn write_labels(path: &Path, rows: &[LabelRow]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_id", "class_id", "source"])?;
    for r in rows {
        w.write_record([r.sample_id.as_str(), &r.class.id().to_string(), r.source.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let h = r.headers()?.clone();
    if h.iter().collect::<Vec<_>>() != ["sample_id", "class_id", "source"] {
        return data_err(format!("{}: header must be `sample_id,class_id,source`", path.display()));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != 3 {
            return data_err(format!("{} row {line}: {} columns, expected 3", path.display(), rec.len()));
        }
        let id: u8 = rec[1]
            .trim()
            .parse()
            .map_err(|_| crate::error::RcaError::Data(format!("{} row {line}: unknown class id `{}`", path.display(), &rec[1])))?;
        let class = RootCause::from_id(id)
            .map_err(|_| crate::error::RcaError::Data(format!("{} row {line}: unknown class id {id}", path.display())))?;
        out.push(LabelRow {
            sample_id: rec[0].to_string(),
            class,
            source: LabelSource::parse(rec[2].trim())?,
        });
    }
    Ok(out)
}

/// File locations of one stored dataset.
#[derive(Clone, Debug)]
pub struct DatasetPaths {
    pub samples: PathBuf,
    pub labels: PathBuf,
    pub stats: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path, stem: &str) -> Self {
        Self {
            samples: dir.join(format!("{stem}_samples.csv")),
            labels: dir.join(format!("{stem}_labels.csv")),
            stats: dir.join(format!("{stem}_stats.json")),
        }
    }
}

pub fn save_dataset(ds: &LabeledDataset, paths: &DatasetPaths) -> Result<()> {
    write_samples(&paths.samples, &ds.schema, &ds.samples)?;
    let rows: Vec<LabelRow> = ds
        .samples
        .iter()
        .zip(&ds.labels)
        .zip(&ds.sources)
        .map(|((s, &class), &source)| LabelRow {
            sample_id: s.id.clone(),
            class,
            source,
        })
        .collect();
    write_labels(&paths.labels, &rows)?;
    match &ds.normalization {
        Some(z) => fs::write(&paths.stats, serde_json::to_vec_pretty(z)?)?,
        None => {
            if paths.stats.exists() {
                fs::remove_file(&paths.stats)?;
            }
        }
    }
    Ok(())
}

pub fn load_dataset(paths: &DatasetPaths, schema: &KpiSchema) -> Result<LabeledDataset> {
    let samples = read_samples(&paths.samples, schema)?;
    let rows = read_labels(&paths.labels)?;
    let mut by_id: HashMap<&str, &LabelRow> = HashMap::with_capacity(rows.len());
    for r in &rows {
        if by_id.insert(r.sample_id.as_str(), r).is_some() {
            return data_err(format!("duplicate label for sample `{}`", r.sample_id));
        }
    }
    if rows.len() != samples.len() {
        return data_err(format!("{} samples but {} labels", samples.len(), rows.len()));
    }
    let mut labels = Vec::with_capacity(samples.len());
    let mut sources = Vec::with_capacity(samples.len());
    for s in &samples {
        let Some(r) = by_id.get(s.id.as_str()) else {
            return data_err(format!("no label for sample `{}`", s.id));
        };
        labels.push(r.class);
        sources.push(r.source);
    }
    let mut ds = LabeledDataset::new(schema.clone(), samples, labels, sources)?;
    if paths.stats.exists() {
        let z: ZScore = serde_json::from_slice(&fs::read(&paths.stats)?)?;
        if z.mean.len() != schema.m() || z.std.iter().any(|&s| !(s > 0.0)) {
            return data_err(format!("{}: invalid normalisation statistics", paths.stats.display()));
        }
        ds.normalization = Some(z);
    }
    Ok(ds)
}
