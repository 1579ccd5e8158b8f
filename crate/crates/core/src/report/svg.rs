use std::fmt::Write;

pub struct BarSeries<'a> {
    pub label: &'a str,
    pub values: &'a [f64],
    pub color: &'a str,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Grouped bar chart: one group per category, one bar per series.
pub fn paired_bars_svg(title: &str, categories: &[String], series: &[BarSeries]) -> String {
    let (width, height) = (960.0, 360.0);
    let (left, right, top, bottom) = (50.0, 10.0, 40.0, 30.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let max = series
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let max = if max > 0.0 { max } else { 1.0 };
    let groups = categories.len().max(1) as f64;
    let group_w = plot_w / groups;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{left}" y="20" font-family="sans-serif" font-size="14">{}</text>"#,
        escape(title)
    );
    let base = top + plot_h;
    let _ = writeln!(
        out,
        r#"<line x1="{left}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
        left + plot_w
    );
    let _ = writeln!(
        out,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{base}" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{max:.2}</text>"#,
        left - 4.0,
        top + 4.0
    );
    for (g, cat) in categories.iter().enumerate() {
        let x0 = left + g as f64 * group_w + group_w * 0.1;
        for (k, s) in series.iter().enumerate() {
            let v = s.values.get(g).copied().unwrap_or(0.0);
            let v = if v.is_finite() { v.max(0.0) } else { 0.0 };
            let h = plot_h * v / max;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>{} {}: {v:.4}</title></rect>"#,
                x0 + k as f64 * bar_w,
                base - h,
                bar_w,
                h,
                escape(s.color),
                escape(s.label),
                escape(cat)
            );
        }
        if categories.len() <= 40 || g % 5 == 0 {
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{}" font-family="sans-serif" font-size="8" text-anchor="middle">{}</text>"#,
                x0 + group_w * 0.4,
                base + 12.0,
                escape(cat)
            );
        }
    }
    for (k, s) in series.iter().enumerate() {
        let x = width - right - 160.0;
        let y = 12.0 + 14.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#,
            y - 9.0,
            escape(s.color)
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{y}" font-family="sans-serif" font-size="11">{}</text>"#,
            x + 14.0,
            escape(s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_rect_per_bar_and_escaped_labels() {
        let cats: Vec<String> = vec!["p<1>".into(), "p2".into(), "p3".into()];
        let svg = paired_bars_svg(
            "a & b",
            &cats,
            &[
                BarSeries {
                    label: "compressed",
                    values: &[1.0, 2.0, 3.0],
                    color: "#c33",
                },
                BarSeries {
                    label: "clean",
                    values: &[0.5, f64::NAN, 1.0],
                    color: "#36c",
                },
            ],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<title>").count(), 6);
        assert!(svg.contains("a &amp; b"));
        assert!(svg.contains("p&lt;1&gt;"));
        assert!(!svg.contains("NaN"));
    }
}
