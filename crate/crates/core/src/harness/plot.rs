use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{io_err, CurveReport, HarnessError, RunManifest};
use crate::evaluation::{EvalReport, MetadataAxis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FigureKind {
    KappaCurve,
    JitterCurve,
    AngleCurve,
    DistanceCurve,
}

impl FigureKind {
    pub const ALL: [FigureKind; 4] = [Self::KappaCurve, Self::JitterCurve, Self::AngleCurve, Self::DistanceCurve];

    pub fn name(self) -> &'static str {
        match self {
            Self::KappaCurve => "kappa_curve",
            Self::JitterCurve => "jitter_curve",
            Self::AngleCurve => "angle_curve",
            Self::DistanceCurve => "distance_curve",
        }
    }
}

impl FromStr for FigureKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown figure {s:?}")))
    }
}

fn read_report(run_dir: &Path, name: &str) -> Result<String, HarnessError> {
    let p = run_dir.join("reports").join(name);
    if !p.exists() {
        return Err(HarnessError::MissingReport(p.display().to_string()));
    }
    fs::read_to_string(&p).map_err(|e| io_err(&p, e))
}

fn curve_rows(run_dir: &Path, name: &str) -> Result<Vec<(String, f64, Option<f64>)>, HarnessError> {
    let text = read_report(run_dir, name)?;
    let c: CurveReport = serde_json::from_str(&text).map_err(|e| io_err(&run_dir.join("reports").join(name), e))?;
    Ok(c.series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| (s.label.clone(), p.x, Some(p.y))))
        .collect())
}

/// One row per bucket for every evaluation report of the run that carries a
/// breakdown along `axis`. The series is the report's stem and x is the
/// bucket midpoint.
fn bucket_rows(run_dir: &Path, axis: MetadataAxis) -> Result<Vec<(String, f64, Option<f64>)>, HarnessError> {
    let mp = run_dir.join("manifest.json");
    let manifest: RunManifest = fs::read_to_string(&mp)
        .map_err(|e| io_err(&mp, e))
        .and_then(|t| serde_json::from_str(&t).map_err(|e| io_err(&mp, e)))?;
    let mut rows = Vec::new();
    for name in manifest.reports.iter().filter(|n| n.ends_with(".json")) {
        let Ok(rep) = serde_json::from_str::<EvalReport>(&read_report(run_dir, name)?) else {
            continue;
        };
        let stem = name.trim_end_matches(".json");
        for b in rep.breakdowns.iter().filter(|b| b.axis == axis) {
            rows.extend(b.buckets.iter().map(|v| (stem.to_string(), (v.lo + v.hi) / 2.0, v.value)));
        }
    }
    if rows.is_empty() {
        return Err(HarnessError::MissingReport(format!("{} breakdown in {}", axis.name(), run_dir.display())));
    }
    Ok(rows)
}

/// Writes `plots/<figure>.csv` (`series,x,value`) from the run's reports.
pub fn emit_plot_data(run_dir: &Path, figure: FigureKind) -> Result<PathBuf, HarnessError> {
    let rows = match figure {
        FigureKind::KappaCurve => curve_rows(run_dir, "kappa_sweep.json")?,
        FigureKind::JitterCurve => curve_rows(run_dir, "jitter.json")?,
        FigureKind::AngleCurve => bucket_rows(run_dir, MetadataAxis::Angle)?,
        FigureKind::DistanceCurve => bucket_rows(run_dir, MetadataAxis::Distance)?,
    };
    let mut out = String::from("series,x,value\n");
    for (series, x, v) in rows {
        let v = v.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{series},{x},{v}").expect("string write");
    }
    let dir = run_dir.join("plots");
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let p = dir.join(format!("{}.csv", figure.name()));
    fs::write(&p, out).map_err(|e| io_err(&p, e))?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn figure_names_round_trip() {
        for k in FigureKind::ALL {
            assert_eq!(k.name().parse::<FigureKind>().unwrap(), k);
        }
        assert!("pie".parse::<FigureKind>().is_err());
    }

    #[test]
    fn missing_report_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = emit_plot_data(dir.path(), FigureKind::KappaCurve).unwrap_err();
        assert!(matches!(err, HarnessError::MissingReport(_)));
    }
}
