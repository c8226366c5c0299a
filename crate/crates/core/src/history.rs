//! Per-epoch training records, their CSV form and the epoch chart.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};

pub const HISTORY_HEADER: &str = "epoch,train_mse,val_mse,val_stoi,val_si_sdr,val_pesq,wall_seconds";

/// Validation fields are absent on epochs that were not validated.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
    pub val_stoi: Option<f64>,
    pub val_si_sdr: Option<f64>,
    pub val_pesq: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

fn field(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{HISTORY_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.train_mse,
                field(r.val_mse),
                field(r.val_stoi),
                field(r.val_si_sdr),
                field(r.val_pesq),
                r.wall_seconds
            );
        }
        s
    }

    pub fn from_csv(text: &str, origin: &Path) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Format { path: origin.to_path_buf(), message: format!("line {line}: {msg}") };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == HISTORY_HEADER => {}
            _ => return Err(bad(1, &format!("expected header '{HISTORY_HEADER}'"))),
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 7 {
                return Err(bad(i + 1, &format!("expected 7 columns, found {}", cols.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, &format!("'{s}' is not a number")));
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            records.push(EpochRecord {
                epoch: cols[0].parse().map_err(|_| bad(i + 1, "epoch must be an integer"))?,
                train_mse: num(cols[1])?,
                val_mse: opt(cols[2])?,
                val_stoi: opt(cols[3])?,
                val_si_sdr: opt(cols[4])?,
                val_pesq: opt(cols[5])?,
                wall_seconds: num(cols[6])?,
            });
        }
        Ok(Self { records })
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, path)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

type Series = (&'static str, fn(&EpochRecord) -> Option<f64>);

const PANELS: [(&str, &[Series]); 4] = [
    ("MSE", &[("train", |r| Some(r.train_mse)), ("val", |r| r.val_mse)]),
    ("SI-SDR (dB)", &[("val", |r| r.val_si_sdr)]),
    ("STOI", &[("val", |r| r.val_stoi)]),
    ("PESQ", &[("val", |r| r.val_pesq)]),
];

fn chart_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format { path: path.to_path_buf(), message: format!("chart rendering failed: {e}") }
}

/// Four panels (loss, SI-SDR, STOI, PESQ) against epoch, as SVG.
pub fn render_chart(history: &TrainHistory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if history.records.is_empty() {
        return Err(Error::Argument("cannot chart an empty history".into()));
    }
    let root = SVGBackend::new(path, (1000, 720)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| chart_error(path, e))?;
    let last = history.records.iter().map(|r| r.epoch).max().unwrap_or(1).max(1) as f64;
    let first = history.records.iter().map(|r| r.epoch).min().unwrap_or(0) as f64;
    let x_range = if last > first { first..last } else { first - 0.5..last + 0.5 };
    for (area, (title, series)) in root.split_evenly((2, 2)).iter().zip(PANELS) {
        let points: Vec<Vec<(f64, f64)>> = series
            .iter()
            .map(|(_, f)| history.records.iter().filter_map(|r| f(r).map(|v| (r.epoch as f64, v))).collect())
            .collect();
        let ys: Vec<f64> = points.iter().flatten().map(|p| p.1).filter(|v| v.is_finite()).collect();
        let mut chart = ChartBuilder::on(area)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(30)
            .y_label_area_size(55)
            .build_cartesian_2d(x_range.clone(), y_range(&ys))
            .map_err(|e| chart_error(path, e))?;
        chart.configure_mesh().x_desc("epoch").draw().map_err(|e| chart_error(path, e))?;
        if ys.is_empty() {
            continue;
        }
        for (k, ((name, _), pts)) in series.iter().zip(points).enumerate() {
            let color = Palette99::pick(k).to_rgba();
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                .map_err(|e| chart_error(path, e))?
                .label(*name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled()))).map_err(|e| chart_error(path, e))?;
        }
        if series.len() > 1 {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(|e| chart_error(path, e))?;
        }
    }
    root.present().map_err(|e| chart_error(path, e))
}

fn y_range(ys: &[f64]) -> std::ops::Range<f64> {
    if ys.is_empty() {
        return 0.0..1.0;
    }
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = if hi > lo { 0.08 * (hi - lo) } else { 0.5 * lo.abs().max(1e-3) };
    lo - pad..hi + pad
}

/// Write `path` (CSV) and a chart next to it with the `.svg` extension; returns the chart path.
pub fn export_history(history: &TrainHistory, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    if history.records.is_empty() {
        return Err(Error::Argument("history is empty".into()));
    }
    history.write_csv(path)?;
    let chart = path.with_extension("svg");
    render_chart(history, &chart)?;
    Ok(chart)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn history(n: usize) -> TrainHistory {
        TrainHistory {
            records: (1..=n)
                .map(|e| EpochRecord {
                    epoch: e,
                    train_mse: 1.0 / e as f64,
                    val_mse: Some(1.2 / e as f64),
                    val_stoi: (e % 2 == 0).then_some(0.4 + 0.01 * e as f64),
                    val_si_sdr: Some(-6.0 + 0.1 * e as f64),
                    val_pesq: None,
                    wall_seconds: 2.5,
                })
                .collect(),
        }
    }

    #[test]
    fn csv_schema_and_round_trip() {
        let h = history(20);
        let csv = h.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,train_mse,val_mse,val_stoi,val_si_sdr,val_pesq,wall_seconds");
        assert_eq!(lines.len(), 21);
        assert_eq!(TrainHistory::from_csv(&csv, Path::new("h.csv")).unwrap(), h);
        assert!(TrainHistory::from_csv("epoch,x\n", Path::new("h.csv")).is_err());
        assert!(TrainHistory::from_csv(&format!("{HISTORY_HEADER}\n1,2\n"), Path::new("h.csv")).is_err());
    }

    #[test]
    fn export_writes_csv_and_nonempty_chart() {
        let dir = tempfile::tempdir().unwrap();
        let chart = export_history(&history(20), dir.path().join("history.csv")).unwrap();
        let svg = std::fs::read_to_string(&chart).unwrap();
        assert!(svg.len() > 1000 && svg.contains("<svg") && svg.contains("SI-SDR"));
        render_chart(&history(1), dir.path().join("one.svg")).unwrap();
        assert!(export_history(&TrainHistory::default(), dir.path().join("e.csv")).is_err());
    }
}
