//! Line plots emitted as plain SVG.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::regularity::EpochSummary;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Value range of `values` widened by 5% of the span on each side.
/// Non-finite values, and non-positive ones on a log axis, are ignored; on
/// a log axis the range is in log10 units.
pub fn y_range(values: impl IntoIterator<Item = f64>, log_y: bool) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        let v = if log_y {
            if v <= 0.0 {
                continue;
            }
            v.log10()
        } else {
            v
        };
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if lo > hi {
        return None;
    }
    let span = hi - lo;
    let pad = if span > 0.0 {
        0.05 * span
    } else {
        0.05 * lo.abs().max(1.0)
    };
    Some((lo - pad, hi + pad))
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn tick_label(v: f64, log_y: bool) -> String {
    let v = if log_y { 10f64.powf(v) } else { v };
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

pub fn render_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    log_y: bool,
) -> String {
    let (x0, x1) = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .filter(|x| x.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
            (a.min(x), b.max(x))
        });
    let (x0, x1) = if x0 > x1 {
        (0.0, 1.0)
    } else if x0 == x1 {
        (x0 - 0.5, x1 + 0.5)
    } else {
        (x0, x1)
    };
    let (y0, y1) = y_range(
        series.iter().flat_map(|s| s.points.iter().map(|p| p.1)),
        log_y,
    )
    .unwrap_or((0.0, 1.0));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        esc(title)
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let yv = y0 + f * (y1 - y0);
        let xv = x0 + f * (x1 - x0);
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" x2="{}" y1="{y:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            sy(yv) + 4.0,
            tick_label(yv, log_y),
            y = sy(yv),
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            sx(xv),
            TOP + ph + 18.0,
            tick_label(xv, false)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 14.0,
        esc(x_label)
    );
    let y_title = if log_y {
        format!("{y_label} (log)")
    } else {
        y_label.to_string()
    };
    let _ = writeln!(
        svg,
        r#"<text transform="translate(18 {}) rotate(-90)" text-anchor="middle">{}</text>"#,
        TOP + ph / 2.0,
        esc(&y_title)
    );

    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut path = String::new();
        let mut pen_down = false;
        for &(x, y) in &s.points {
            let y = if log_y {
                if y > 0.0 {
                    y.log10()
                } else {
                    f64::NAN
                }
            } else {
                y
            };
            if !(x.is_finite() && y.is_finite()) {
                pen_down = false;
                continue;
            }
            let _ = write!(
                path,
                "{}{:.2},{:.2} ",
                if pen_down { "L" } else { "M" },
                sx(x),
                sy(y)
            );
            pen_down = true;
        }
        if !path.is_empty() {
            let _ = writeln!(
                svg,
                r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.6"/>"#,
                path.trim_end()
            );
        }
        let ly = TOP + 14.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 14.0;
        let _ = writeln!(
            svg,
            r#"<g class="legend"><line x1="{lx}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text></g>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            esc(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Reads a per-epoch CSV (header `epoch,mean_loss,median_gamma,...`).
pub fn read_epoch_csv(path: &Path) -> Result<Vec<EpochSummary>> {
    let err = |row: usize, message: String| Error::Csv {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| err(0, e.to_string()))?;
    let headers = reader.headers().map_err(|e| err(0, e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| err(0, format!("missing column {name:?}")))
    };
    let (ce, cl, cg, cr, cv) = (
        col("epoch")?,
        col("mean_loss")?,
        col("median_gamma")?,
        col("median_rate_factor")?,
        col("violations")?,
    );
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| err(row, e.to_string()))?;
        let field = |c: usize| {
            rec.get(c)
                .map(str::trim)
                .ok_or_else(|| err(row, format!("missing field {c}")))
        };
        let num = |c: usize| -> Result<f64> {
            let s = field(c)?;
            s.parse::<f64>()
                .map_err(|_| err(row, format!("not a number: {s:?}")))
        };
        rows.push(EpochSummary {
            epoch: field(ce)?
                .parse()
                .map_err(|_| err(row, "bad epoch".into()))?,
            mean_loss: num(cl)?,
            median_gamma: num(cg)?,
            median_rate_factor: num(cr)?,
            violations: field(cv)?
                .parse()
                .map_err(|_| err(row, "bad violation count".into()))?,
            valid_steps: 0,
        });
    }
    if rows.is_empty() {
        return Err(err(0, "no data rows".into()));
    }
    Ok(rows)
}

/// Overlays per-epoch CSVs: writes `<stem>_loss.svg` and
/// `<stem>_rate_factor.svg` into `out_dir`. Labels default to each file's
/// parent directory name.
pub fn plot_csvs(
    paths: &[PathBuf],
    labels: Option<&[String]>,
    out_dir: &Path,
    stem: &str,
    log_y: bool,
) -> Result<[PathBuf; 2]> {
    if paths.is_empty() {
        return Err(Error::Config("plot needs at least one CSV".into()));
    }
    let mut loss = Vec::new();
    let mut rate = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        let rows = read_epoch_csv(p)?;
        let label = labels.and_then(|l| l.get(i).cloned()).unwrap_or_else(|| {
            p.parent()
                .and_then(|d| d.file_name())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string())
        });
        loss.push(Series {
            label: label.clone(),
            points: rows.iter().map(|r| (r.epoch as f64, r.mean_loss)).collect(),
        });
        rate.push(Series {
            label,
            points: rows
                .iter()
                .map(|r| (r.epoch as f64, r.median_rate_factor))
                .collect(),
        });
    }
    std::fs::create_dir_all(out_dir)?;
    let loss_path = out_dir.join(format!("{stem}_loss.svg"));
    let rate_path = out_dir.join(format!("{stem}_rate_factor.svg"));
    std::fs::write(
        &loss_path,
        render_svg("mean training loss", "epoch", "loss", &loss, log_y),
    )?;
    std::fs::write(
        &rate_path,
        render_svg(
            "median rate factor γ/‖θ0−θT‖²",
            "epoch",
            "rate factor",
            &rate,
            log_y,
        ),
    )?;
    Ok([loss_path, rate_path])
}
