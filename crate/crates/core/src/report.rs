//! Markdown tables and SVG line plots for reports.
//!
//! Numbers are formatted with a fixed precision so identical inputs always
//! render to identical bytes.

use std::fmt::Write as _;

/// Fixed three-decimal rendering; `None` and non-finite values print `n/a`.
pub fn fmt3(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.3}"),
        _ => "n/a".to_string(),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MdTable {
    pub title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl MdTable {
    pub fn new(title: &str, headers: &[&str]) -> Self {
        Self { title: title.into(), headers: headers.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        assert_eq!(cells.len(), self.headers.len(), "row width does not match the header");
        self.rows.push(cells);
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        if !self.title.is_empty() {
            let _ = writeln!(s, "### {}\n", self.title);
        }
        let _ = writeln!(s, "| {} |", self.headers.join(" | "));
        let _ = writeln!(s, "|{}", self.headers.iter().map(|_| "---|").collect::<String>());
        for r in &self.rows {
            let _ = writeln!(s, "| {} |", r.join(" | "));
        }
        s
    }
}

/// A line plot over categorical x positions with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_ticks: Vec<String>,
    pub series: Vec<(String, Vec<Option<f64>>)>,
}

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

impl LinePlot {
    pub fn to_svg(&self) -> String {
        let (w, h) = (480.0, 320.0);
        let (left, right, top, bottom) = (60.0, 20.0, 40.0, 50.0);
        let pw = w - left - right;
        let ph = h - top - bottom;
        let n = self.x_ticks.len().max(1);
        let xp = |i: usize| if n == 1 { left + pw / 2.0 } else { left + pw * i as f64 / (n - 1) as f64 };
        let yp = |v: f64| top + ph * (1.0 - v.clamp(0.0, 1.0));
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="22" font-size="14" text-anchor="middle" font-family="sans-serif">{}</text>"#, w / 2.0, esc(&self.title));
        for k in 0..=4 {
            let v = k as f64 / 4.0;
            let y = yp(v);
            let _ = writeln!(s, r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, left + pw);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end" font-family="sans-serif">{v:.2}</text>"#, left - 6.0, y + 4.0);
        }
        let _ = writeln!(s, r#"<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#, top + ph, left + pw, top + ph);
        let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.1}" stroke="black"/>"#, top + ph);
        for (i, t) in self.x_ticks.iter().enumerate() {
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle" font-family="sans-serif">{}</text>"#, xp(i), top + ph + 16.0, esc(t));
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle" font-family="sans-serif">{}</text>"#, left + pw / 2.0, h - 12.0, esc(&self.x_label));
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.1}" font-size="12" text-anchor="middle" font-family="sans-serif" transform="rotate(-90 16 {:.1})">{}</text>"#,
            top + ph / 2.0,
            top + ph / 2.0,
            esc(&self.y_label)
        );
        for (k, (name, vals)) in self.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let pts: Vec<String> =
                vals.iter().enumerate().filter_map(|(i, v)| v.filter(|x| x.is_finite()).map(|v| format!("{:.1},{:.1}", xp(i), yp(v)))).collect();
            if pts.len() > 1 {
                let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
            }
            for p in &pts {
                let (x, y) = p.split_once(',').unwrap();
                let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
            }
            let ly = top + 14.0 * k as f64 + 8.0;
            let _ = writeln!(s, r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#, left + pw - 120.0, left + pw - 100.0);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="11" font-family="sans-serif">{}</text>"#, left + pw - 95.0, ly + 4.0, esc(name));
        }
        s.push_str("</svg>\n");
        s
    }
}

fn esc(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markdown_shape() {
        let mut t = MdTable::new("T", &["a", "b"]);
        t.row(vec!["1".into(), fmt3(Some(0.5))]);
        t.row(vec!["2".into(), fmt3(None)]);
        let md = t.to_markdown();
        assert!(md.contains("| a | b |\n|---|---|\n| 1 | 0.500 |\n| 2 | n/a |"));
    }

    #[test]
    fn svg_is_deterministic_and_skips_missing_points() {
        let p = LinePlot {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            x_ticks: vec!["1".into(), "2".into(), "4".into()],
            series: vec![("f1".into(), vec![Some(0.2), None, Some(0.9)])],
        };
        let a = p.to_svg();
        assert_eq!(a, p.to_svg());
        assert_eq!(a.matches("<circle").count(), 2);
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
    }
}
