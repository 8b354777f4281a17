//! SVG forest plot: per-study risk ratios on a log axis with classical and
//! weighted pooled diamonds.

use std::fmt::Write;

use evsynth_core::meta::{ForestData, PooledRow, RrStatus};

const ROW_H: f64 = 24.0;
const LABEL_W: f64 = 170.0;
const PLOT_W: f64 = 300.0;
const TEXT_W: f64 = 290.0;
const TOP: f64 = 40.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Log-axis bounds covering every finite value, widened to powers of two.
fn axis_range(data: &ForestData) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut see = |v: Option<f64>| {
        if let Some(v) = v.filter(|v| v.is_finite() && *v > 0.0) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    };
    for r in &data.rows {
        see(r.rr.ci_low);
        see(r.rr.ci_high);
        see(r.rr.rr);
    }
    for p in [&data.pooled_classical, &data.pooled_weighted] {
        see(Some(p.ci_low));
        see(Some(p.ci_high));
    }
    if !lo.is_finite() {
        return (0.5, 2.0);
    }
    let lo = 2f64.powf(lo.min(1.0).log2().floor());
    let hi = 2f64.powf(hi.max(1.0).log2().ceil());
    if lo == hi {
        (lo / 2.0, hi * 2.0)
    } else {
        (lo, hi)
    }
}

fn fmt_ci(rr: Option<f64>, lo: Option<f64>, hi: Option<f64>) -> String {
    let f = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.2}"));
    format!("{} ({}, {})", f(rr), f(lo), f(hi))
}

/// Deterministic for identical input: fixed-precision coordinates only.
pub fn render_svg(data: &ForestData) -> String {
    let (lo, hi) = axis_range(data);
    let x = |v: f64| LABEL_W + (v.max(lo).min(hi).ln() - lo.ln()) / (hi.ln() - lo.ln()) * PLOT_W;
    let n = data.rows.len() as f64;
    let height = TOP + (n + 3.0) * ROW_H + 40.0;
    let width = LABEL_W + PLOT_W + TEXT_W;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="12">"#
    );
    let tx = LABEL_W + PLOT_W + 10.0;
    let _ = writeln!(s, r#"<text x="8" y="{:.1}" font-weight="bold">Study</text>"#, TOP - 16.0);
    let _ = writeln!(
        s,
        r#"<text x="{tx:.1}" y="{:.1}" font-weight="bold">RR ({:.0}% CI)   W classical   W weighted</text>"#,
        TOP - 16.0,
        data.level * 100.0
    );
    let axis_bottom = TOP + (n + 2.5) * ROW_H;
    let _ = writeln!(
        s,
        r##"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="#888" stroke-dasharray="3,3"/>"##,
        x(1.0),
        TOP - 8.0,
        axis_bottom
    );
    for (i, r) in data.rows.iter().enumerate() {
        let y = TOP + (i as f64 + 0.5) * ROW_H;
        let _ = writeln!(s, r#"<text x="8" y="{:.1}">{}</text>"#, y + 4.0, escape(&r.study_id));
        if r.rr.status == RrStatus::Finite {
            let (l, h, m) = (r.rr.ci_low.unwrap_or(lo), r.rr.ci_high.unwrap_or(hi), r.rr.rr.unwrap_or(1.0));
            let _ = writeln!(s, r#"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="black"/>"#, x(l), x(h));
            let side = 4.0 + 8.0 * (r.weight_weighted_percent / 100.0).sqrt();
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{side:.1}" height="{side:.1}" fill="black"/>"#,
                x(m) - side / 2.0,
                y - side / 2.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{tx:.1}" y="{:.1}">{}   {:.1}%   {:.1}%</text>"#,
            y + 4.0,
            fmt_ci(r.rr.rr, r.rr.ci_low, r.rr.ci_high),
            r.weight_classical_percent,
            r.weight_weighted_percent
        );
    }
    let mut diamond = |row: &PooledRow, label: &str, idx: f64, fill: &str| {
        let y = TOP + (n + idx) * ROW_H;
        let _ = writeln!(s, r#"<text x="8" y="{:.1}" font-weight="bold">{label}</text>"#, y + 4.0);
        let _ = writeln!(
            s,
            r#"<polygon points="{:.1},{y:.1} {:.1},{:.1} {:.1},{y:.1} {:.1},{:.1}" fill="{fill}"/>"#,
            x(row.ci_low),
            x(row.theta_hat),
            y - 6.0,
            x(row.ci_high),
            x(row.theta_hat),
            y + 6.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{tx:.1}" y="{:.1}" font-weight="bold">{}</text>"#,
            y + 4.0,
            fmt_ci(Some(row.theta_hat), Some(row.ci_low), Some(row.ci_high))
        );
    };
    diamond(&data.pooled_classical, "Pooled (classical)", 0.5, "#555555");
    diamond(&data.pooled_weighted, "Pooled (weighted)", 1.5, "#1f5fa8");
    let _ = writeln!(
        s,
        r#"<line x1="{LABEL_W:.1}" y1="{axis_bottom:.1}" x2="{:.1}" y2="{axis_bottom:.1}" stroke="black"/>"#,
        LABEL_W + PLOT_W
    );
    let mut tick = lo;
    while tick <= hi * 1.000_001 {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x(tick),
            axis_bottom + 16.0,
            tick
        );
        tick *= 2.0;
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use evsynth_core::meta::{forest_data, pool_classical_mh, pool_ew_mh, PoolOptions};
    use evsynth_core::{ContingencyTable, StudyWeight};

    #[test]
    fn renders_rows_and_both_diamonds() {
        let tables = vec![
            ContingencyTable::from_arms("A<1>", 10, 100, 5, 100).unwrap(),
            ContingencyTable::from_arms("B", 0, 50, 4, 50).unwrap(),
        ];
        let o = PoolOptions::default();
        let c = pool_classical_mh(&tables, &o).unwrap();
        let w = pool_ew_mh(&tables, &[StudyWeight { study_id: "A<1>".into(), weight: 0.7 }, StudyWeight { study_id: "B".into(), weight: 0.3 }], &o).unwrap();
        let svg = render_svg(&forest_data(&c, &w).unwrap());
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("A&lt;1&gt;"));
        assert_eq!(svg.matches("<polygon").count(), 2);
        assert_eq!(svg.matches("<rect").count(), 1);
        assert!(svg.contains("0.00 (0.00, NA)"));
        assert_eq!(svg, render_svg(&forest_data(&c, &w).unwrap()));
    }
}
