//! Static SVG line charts rendered from trace CSV text.
//!
//! Rendering reads nothing but the CSV, so regenerating a chart from a saved
//! trace gives the same SVG text.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

#[derive(Clone, Copy, Debug)]
pub struct Chart {
    pub file: &'static str,
    pub title: &'static str,
    pub column: &'static str,
    /// Plot `1 - value` instead of `value`.
    pub complement: bool,
    /// Fixed y range; `None` scales to the data with 0 at the bottom.
    pub y_range: Option<(f64, f64)>,
}

pub const CHARTS: [Chart; 4] = [
    Chart { file: "loss.svg", title: "training loss", column: "train_loss", complement: false, y_range: Some((0.0, 0.8)) },
    Chart { file: "signal.svg", title: "signal learning", column: "signal", complement: false, y_range: None },
    Chart { file: "noise.svg", title: "noise memorization", column: "noise_max", complement: false, y_range: None },
    Chart { file: "accuracy.svg", title: "test accuracy", column: "test_error", complement: true, y_range: Some((0.0, 1.0)) },
];

/// `(epoch, value)` pairs of one column; rows with an empty cell are skipped.
pub fn column_series(csv: &str, column: &str) -> Result<Vec<(f64, f64)>, String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().ok_or("empty csv")?.split(',').collect();
    let find = |name: &str| header.iter().position(|h| *h == name).ok_or(format!("csv has no column '{name}'"));
    let (xi, yi) = (find("epoch")?, find(column)?);
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let (x, y) = (cells.get(xi).copied().unwrap_or(""), cells.get(yi).copied().unwrap_or(""));
        if y.is_empty() {
            continue;
        }
        let parse = |s: &str| s.parse::<f64>().map_err(|_| format!("row {}: bad number '{s}'", k + 2));
        out.push((parse(x)?, parse(y)?));
    }
    Ok(out)
}

fn nice_ceiling(v: f64) -> f64 {
    if !(v > 0.0) || !v.is_finite() {
        return 1.0;
    }
    let mag = 10f64.powf(v.log10().floor());
    for step in [1.0, 2.0, 2.5, 5.0, 10.0] {
        if step * mag >= v {
            return step * mag;
        }
    }
    10.0 * mag
}

/// One chart with any number of labelled series.
pub fn render_series(title: &str, series: &[(String, Vec<(f64, f64)>)], y_range: Option<(f64, f64)>) -> String {
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let points = series.iter().flat_map(|(_, s)| s.iter());
    let x_max = nice_ceiling(points.clone().map(|p| p.0).fold(0.0, f64::max));
    let (y_lo, y_hi) = y_range.unwrap_or_else(|| {
        let lo = points.clone().map(|p| p.1).fold(0.0, f64::min);
        let hi = points.map(|p| p.1).fold(0.0, f64::max);
        (if lo < 0.0 { -nice_ceiling(-lo) } else { 0.0 }, nice_ceiling(hi))
    });
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + x / x_max * pw;
    let sy = |y: f64| TOP + (1.0 - (y.clamp(y_lo, y_hi) - y_lo) / (y_hi - y_lo)) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{title}</text>"#, WIDTH / 2.0);
    let _ = writeln!(
        s,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (f * x_max, y_lo + f * (y_hi - y_lo));
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            sx(xv),
            HEIGHT - BOTTOM + 16.0,
            xv
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{:.3}</text>"#,
            LEFT - 6.0,
            sy(yv) + 4.0,
            yv
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">epoch</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0
    );
    for (k, (label, pts)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        if !label.is_empty() {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" fill="{color}">{label}</text>"#,
                LEFT + 8.0,
                TOP + 14.0 + 14.0 * k as f64
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn render_chart(csv: &str, chart: &Chart) -> Result<String, String> {
    let mut pts = column_series(csv, chart.column)?;
    if chart.complement {
        pts.iter_mut().for_each(|p| p.1 = 1.0 - p.1);
    }
    Ok(render_series(chart.title, &[(String::new(), pts)], chart.y_range))
}

/// Every standard chart as `(file name, svg)`. The accuracy chart is skipped
/// when the trace has no test column values.
pub fn render_all(csv: &str) -> Result<Vec<(&'static str, String)>, String> {
    let mut out = Vec::new();
    for chart in &CHARTS {
        if chart.complement && column_series(csv, chart.column)?.is_empty() {
            continue;
        }
        out.push((chart.file, render_chart(csv, chart)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "epoch,train_loss,signal,noise_max,test_error\n0,0.69,0.01,0.2,\n100,0.3,0.5,1.5,0.1\n200,0.01,1.2,2.0,0.0\n";

    #[test]
    fn series_skip_empty_cells() {
        assert_eq!(column_series(CSV, "test_error").unwrap(), vec![(100.0, 0.1), (200.0, 0.0)]);
        assert!(column_series(CSV, "nope").is_err());
    }

    #[test]
    fn rendering_is_a_pure_function() {
        let a = render_all(CSV).unwrap();
        let b = render_all(CSV).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(a[0].1.starts_with("<svg"));
        assert!(a[0].1.contains("<polyline"));
    }

    #[test]
    fn nice_ceilings() {
        assert_eq!(nice_ceiling(1500.0), 2000.0);
        assert_eq!(nice_ceiling(0.3), 0.5);
        assert_eq!(nice_ceiling(0.0), 1.0);
    }
}
