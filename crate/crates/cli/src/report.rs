//! Metrics tables (aligned text and CSV) and small SVG line plots.

use std::fmt::Write as _;
use std::path::Path;

use game_core::checkpoint::atomic_write;

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Table { headers: headers.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.headers.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = self.headers.iter().map(|h| h.len()).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
                if i > 0 {
                    s.push_str("  ");
                }
                let _ = write!(s, "{c:<w$}");
            }
            s.trim_end().to_string() + "\n"
        };
        let mut out = line(&self.headers);
        out.push_str(&line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>()));
        for r in &self.rows {
            out.push_str(&line(r));
        }
        out
    }

    pub fn to_csv(&self) -> csv::Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        Ok(w.into_inner().map_err(|e| e.into_error())?)
    }

    /// Write `<stem>.txt` and `<stem>.csv` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> anyhow::Result<()> {
        atomic_write(&dir.join(format!("{stem}.txt")), self.render().as_bytes())?;
        atomic_write(&dir.join(format!("{stem}.csv")), &self.to_csv()?)?;
        Ok(())
    }
}

pub fn fmt_rate(x: f64) -> String {
    format!("{x:.4}")
}

/// One series of a line plot, with optional symmetric-or-not error bars.
pub struct Series<'a> {
    pub label: &'a str,
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub band: Option<&'a [(f64, f64)]>,
}

/// A self-contained SVG line chart.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, m) = (480.0, 320.0, 50.0);
    let xs = series.iter().flat_map(|s| s.x.iter().copied());
    let ys = series.iter().flat_map(|s| {
        s.y.iter().copied().chain(s.band.into_iter().flatten().flat_map(|&(a, b)| [a, b]))
    });
    let (x0, x1) = bounds(xs);
    let (y0, y1) = bounds(ys);
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{fx:.3}</text>"#, px(fx), h - m + 15.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{fy:.3}</text>"#, m - 4.0, py(fy) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    for (k, ser) in series.iter().enumerate() {
        let c = colors[k % colors.len()];
        let pts: Vec<String> = ser.x.iter().zip(ser.y).map(|(&x, &y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        for (i, (&x, &y)) in ser.x.iter().zip(ser.y).enumerate() {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}"/>"#, px(x), py(y));
            if let Some(b) = ser.band {
                let (lo, hi) = b[i];
                let _ = writeln!(s, r#"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="{c}"/>"#, px(x), py(lo), py(hi));
            }
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{c}">{}</text>"#, w - m - 90.0, m + 14.0 * k as f64, escape(ser.label));
    }
    s.push_str("</svg>\n");
    s
}

fn bounds(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = xs.filter(|x| x.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Whether a curve has an interior maximum or plateau: no endpoint is strictly
/// greater than every interior value.
pub fn has_interior_max_or_plateau(y: &[f64]) -> bool {
    if y.len() < 3 {
        return true;
    }
    let interior_max = y[1..y.len() - 1].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    !(y[0] > interior_max || y[y.len() - 1] > interior_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_render_and_csv() {
        let mut t = Table::new(&["mode", "em"]);
        t.push(vec!["baseline".into(), "0.5".into()]);
        t.push(vec!["game, decay".into(), "0.61".into()]);
        assert_eq!(t.render(), "mode         em\n-----------  ----\nbaseline     0.5\ngame, decay  0.61\n");
        assert_eq!(String::from_utf8(t.to_csv().unwrap()).unwrap(), "mode,em\nbaseline,0.5\n\"game, decay\",0.61\n");
    }

    #[test]
    fn plot_is_wellformed() {
        let svg = line_plot_svg(
            "a < b",
            "eta",
            "em",
            &[Series { label: "decay", x: &[0.0, 1.0, 2.0], y: &[0.1, 0.3, 0.2], band: Some(&[(0.0, 0.2), (0.2, 0.4), (0.1, 0.3)]) }],
        );
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("a &lt; b"));
        assert_eq!(svg.matches("<circle").count(), 3);
    }

    #[test]
    fn interior_shape() {
        assert!(has_interior_max_or_plateau(&[0.1, 0.3, 0.2]));
        assert!(has_interior_max_or_plateau(&[0.3, 0.3, 0.3]));
        assert!(has_interior_max_or_plateau(&[0.1, 0.3, 0.3]));
        assert!(!has_interior_max_or_plateau(&[0.1, 0.2, 0.3]));
        assert!(!has_interior_max_or_plateau(&[0.4, 0.2, 0.3]));
    }
}
