//! Metrics files and atomic artifact writes.

use std::fs;
use std::path::{Path, PathBuf};

use bdk_core::checkpoint::write_atomic;
use bdk_core::eval::MetricsReport;

use crate::CliError;

pub const METRICS_HEADER: &str = "metric,value,standard_error,n_trials";

/// Output directory handle; every file is written once via rename.
#[derive(Clone, Debug)]
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        write_atomic(&p, bytes).map_err(|e| match e {
            bdk_core::Error::Io(io) => CliError::io(&p, io),
            other => other.into(),
        })
    }
}

/// Shortest round-trip formatting keeps reruns byte-identical and lossless.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn render_metrics(rows: &[MetricsReport]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.name,
            fmt_f64(r.value),
            fmt_f64(r.standard_error),
            r.n_trials
        ));
    }
    s
}

pub fn parse_metrics(text: &str, origin: &str) -> Result<Vec<MetricsReport>, CliError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => return Err(CliError::Config(format!("{origin}: not a metrics file (bad header)"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = |what: &str| CliError::Config(format!("{origin}:{}: {what}", i + 1));
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        out.push(MetricsReport {
            name: f[0].to_string(),
            value: f[1].parse().map_err(|_| bad("bad value"))?,
            standard_error: f[2].parse().map_err(|_| bad("bad standard error"))?,
            n_trials: f[3].parse().map_err(|_| bad("bad trial count"))?,
        });
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsReport>, CliError> {
    let file = if path.is_dir() { path.join("metrics.csv") } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| CliError::io(&file, e))?;
    parse_metrics(&text, &file.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_round_trip() {
        let rows = vec![
            MetricsReport::single("kl_grid", 0.1 + 0.2),
            MetricsReport::aggregate("test_loglik", &[-2.5, -2.25, -2.0]).unwrap(),
        ];
        let text = render_metrics(&rows);
        assert_eq!(parse_metrics(&text, "t").unwrap(), rows);
        assert!(parse_metrics("a,b\n", "t").is_err());
        assert!(parse_metrics(&format!("{METRICS_HEADER}\nx,1,2\n"), "t").is_err());
    }
}
