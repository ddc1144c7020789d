//! JSON-lines metrics and their CSV export.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::learner::StepMetrics;

pub const METRICS_FILE: &str = "metrics.jsonl";

/// Appends one record per line, flushed after every write so a crashed run
/// still leaves a readable prefix.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(f) })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        serde_json::to_writer(&mut self.out, m)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let f = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Config {
            line: i + 1,
            msg: format!("{}: {e}", path.display()),
        })?);
    }
    Ok(out)
}

/// Paths written by [`export_csv`].
#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub returns: PathBuf,
    pub spans: PathBuf,
    pub flops: PathBuf,
    pub rows: usize,
}

/// Writes `returns.csv`, `spans.csv` and `flops.csv` next to the metrics.
///
/// `layout[layer]` is the number of heads with spans per layer; it fixes the
/// span columns even when there are no records yet.
pub fn export_csv(run_dir: &Path, layout: &[usize]) -> Result<ReportFiles> {
    let path = run_dir.join(METRICS_FILE);
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no {METRICS_FILE} in {}", run_dir.display()),
        )));
    }
    let records = read_metrics(&path)?;
    let files = ReportFiles {
        returns: run_dir.join("returns.csv"),
        spans: run_dir.join("spans.csv"),
        flops: run_dir.join("flops.csv"),
        rows: records.len(),
    };

    let mut w = csv::Writer::from_path(&files.returns)?;
    w.write_record([
        "step",
        "frames",
        "episodes",
        "env",
        "mean_return_100",
        "lr",
        "loss_total",
        "pg",
        "baseline",
        "entropy",
        "span_l1",
        "span_raw",
        "grad_norm",
        "mean_ratio_deviation",
        "policy_lag",
    ])?;
    for m in &records {
        let l = &m.loss;
        w.write_record([
            m.step.to_string(),
            m.frames.to_string(),
            m.episodes.to_string(),
            m.env.clone(),
            m.mean_return_100.map(|r| r.to_string()).unwrap_or_default(),
            m.lr.to_string(),
            l.total.to_string(),
            l.pg.to_string(),
            l.baseline.to_string(),
            l.entropy.to_string(),
            l.span_l1.to_string(),
            l.span_raw.to_string(),
            m.grad_norm.to_string(),
            m.mean_ratio_deviation.to_string(),
            m.policy_lag.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&files.spans)?;
    let mut header = vec!["step".to_string()];
    for (layer, &heads) in layout.iter().enumerate() {
        for head in 0..heads {
            header.push(format!("layer{layer}_head{head}"));
        }
    }
    w.write_record(&header)?;
    for m in &records {
        let mut row = vec![m.step.to_string()];
        row.extend(m.spans.iter().flatten().map(|z| z.to_string()));
        if row.len() != header.len() {
            return Err(Error::Contract(format!(
                "step {} has {} spans, expected {}",
                m.step,
                row.len() - 1,
                header.len() - 1
            )));
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&files.flops)?;
    let mut header = vec!["step".to_string(), "adaptive_flops".into(), "fixed_flops".into(), "ratio".into()];
    for layer in 0..layout.len() {
        header.push(format!("layer{layer}_max_span"));
    }
    w.write_record(&header)?;
    for m in &records {
        let mut row = vec![
            m.step.to_string(),
            m.flops.adaptive_flops.to_string(),
            m.flops.fixed_flops.to_string(),
            m.flops.ratio.to_string(),
        ];
        row.extend(m.flops.max_span_per_layer.iter().map(|z| z.to_string()));
        row.resize(header.len(), String::new());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(files)
}
