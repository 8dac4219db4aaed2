//! Loss curves: one SVG per loss stream, raw values in a light line and the
//! exponentially smoothed series on top.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::args::PlotLossesArgs;
use crate::{CliResult, Failure};

pub const DEFAULT_SMOOTHING: f64 = 0.9;

/// Columns that index a row rather than measure a loss.
const INDEX_COLUMNS: [&str; 3] = ["iteration", "epoch", "lr"];

/// `s₀ = x₀`, `sₜ = α sₜ₋₁ + (1 − α) xₜ`.
pub fn ema(values: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut s = None;
    for &x in values {
        let next = match s {
            None => x,
            Some(prev) => alpha * prev + (1.0 - alpha) * x,
        };
        s = Some(next);
        out.push(next);
    }
    out
}

/// A named loss series against iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub name: String,
    pub iterations: Vec<f64>,
    pub values: Vec<f64>,
}

/// Loss streams of a CSV: every non-index column with at least one value.
/// `total` is dropped when it repeats another stream exactly.
pub fn read_streams(path: &Path) -> CliResult<Vec<Stream>> {
    let mut rd = csv::Reader::from_path(path)?;
    let headers = rd.headers()?.clone();
    let it_col = headers
        .iter()
        .position(|h| h == "iteration")
        .ok_or_else(|| Failure::user(format!("{}: no iteration column", path.display())))?;
    let cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !INDEX_COLUMNS.contains(h))
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    let mut series: Vec<Stream> = cols
        .iter()
        .map(|(_, n)| Stream {
            name: n.clone(),
            iterations: Vec::new(),
            values: Vec::new(),
        })
        .collect();
    let parse = |s: &str, what: &str| -> CliResult<f64> {
        s.trim()
            .parse()
            .map_err(|_| Failure::user(format!("{}: {what} value '{s}' is not a number", path.display())))
    };
    for rec in rd.records() {
        let rec = rec?;
        let it = parse(rec.get(it_col).unwrap_or(""), "iteration")?;
        for ((i, _), s) in cols.iter().zip(&mut series) {
            let cell = rec.get(*i).unwrap_or("").trim();
            if !cell.is_empty() {
                s.iterations.push(it);
                s.values.push(parse(cell, &s.name)?);
            }
        }
    }
    series.retain(|s| !s.values.is_empty());
    if let Some(t) = series.iter().position(|s| s.name == "total") {
        let dup = series
            .iter()
            .enumerate()
            .any(|(i, s)| i != t && s.iterations == series[t].iterations && s.values == series[t].values);
        if dup {
            series.remove(t);
        }
    }
    if series.is_empty() {
        return Err(Failure::user(format!("{}: no loss values", path.display())));
    }
    Ok(series)
}

fn draw(stream: &Stream, title: &str, alpha: f64, out: &Path) -> Result<(), Box<dyn std::error::Error>> {
    let smooth = ema(&stream.values, alpha);
    let (x0, x1) = (
        stream.iterations[0],
        *stream.iterations.last().unwrap_or(&stream.iterations[0]),
    );
    let (mut y0, mut y1) = stream
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    let root = SVGBackend::new(out, (800, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1.max(x0 + 1.0), (y0 - pad)..(y1 + pad))?;
    chart
        .configure_mesh()
        .x_desc("iteration")
        .y_desc(stream.name.as_str())
        .draw()?;
    let raw = RGBColor(31, 119, 180).mix(0.3);
    chart
        .draw_series(LineSeries::new(
            stream.iterations.iter().copied().zip(stream.values.iter().copied()),
            raw,
        ))?
        .label("raw")
        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], raw));
    let solid = RGBColor(31, 119, 180);
    chart
        .draw_series(LineSeries::new(
            stream.iterations.iter().copied().zip(smooth),
            solid.stroke_width(2),
        ))?
        .label(format!("smoothed ({alpha})"))
        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], solid.stroke_width(2)));
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE)
        .draw()?;
    root.present()?;
    Ok(())
}

/// Writes `<csv stem>_<stream>.svg` for every stream of `csv` into `out_dir`.
pub fn plot_csv(csv: &Path, out_dir: &Path, alpha: f64) -> CliResult<Vec<PathBuf>> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Failure::user(format!("smoothing factor {alpha} must lie in [0, 1)")));
    }
    let streams = read_streams(csv)?;
    std::fs::create_dir_all(out_dir)?;
    let stem = csv
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let prefix = csv
        .parent()
        .and_then(|p| p.file_name())
        .map(|p| format!("{}_", p.to_string_lossy()))
        .unwrap_or_default();
    let mut written = Vec::new();
    for s in &streams {
        let out = out_dir.join(format!("{prefix}{stem}_{}.svg", s.name));
        let title = format!("{prefix}{stem}: {}", s.name);
        draw(s, &title, alpha, &out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
        written.push(out);
    }
    Ok(written)
}

fn loss_csvs(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            loss_csvs(&p, out)?;
        } else if p
            .file_name()
            .is_some_and(|n| n.to_string_lossy().ends_with("_loss.csv"))
        {
            out.push(p);
        }
    }
    Ok(())
}

/// Plots every `*_loss.csv` below `run_dir`.
pub fn plot_run(run_dir: &Path, out_dir: &Path, alpha: f64) -> CliResult<Vec<PathBuf>> {
    let mut csvs = Vec::new();
    loss_csvs(run_dir, &mut csvs)?;
    let mut written = Vec::new();
    for c in csvs {
        written.extend(plot_csv(&c, out_dir, alpha)?);
    }
    Ok(written)
}

pub fn plot_losses(a: PlotLossesArgs) -> CliResult {
    let mut written = Vec::new();
    if let Some(dir) = &a.run_dir {
        let out = a.out.clone().unwrap_or_else(|| dir.join("plots"));
        let found = plot_run(dir, &out, a.smoothing)?;
        if found.is_empty() {
            return Err(Failure::user(format!("no *_loss.csv files below {}", dir.display())));
        }
        written.extend(found);
    }
    for csv in &a.csv {
        let out = a
            .out
            .clone()
            .or_else(|| csv.parent().map(Path::to_path_buf))
            .unwrap_or_default();
        written.extend(plot_csv(csv, &out, a.smoothing)?);
    }
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_smoothing_is_identity() {
        let v = [3.0, 1.0, 4.0, 1.0, 5.0];
        assert_eq!(ema(&v, 0.0), v);
    }

    #[test]
    fn smoothing_starts_at_first_value() {
        let s = ema(&[2.0, 0.0], 0.9);
        assert_eq!(s[0], 2.0);
        assert!((s[1] - 1.8).abs() < 1e-15);
    }
}
