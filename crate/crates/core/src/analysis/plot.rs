//! Minimal static SVG bar charts.

use std::fmt::Write as _;

use super::{DistributionShift, ImportanceRanking};

const INITIAL_COLOR: &str = "#48a185";
const SELECTED_COLOR: &str = "#d86e45";

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Horizontal bars of relative importance for the `top` strongest features.
pub fn importance_svg(ranking: &ImportanceRanking, top: usize, title: &str) -> String {
    let entries = &ranking.entries[..top.min(ranking.entries.len())];
    let (label_w, bar_w, row_h) = (260.0, 400.0, 18.0);
    let height = 40.0 + row_h * entries.len() as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="11">"#,
        label_w + bar_w + 60.0
    );
    let _ = writeln!(svg, r#"<text x="4" y="16" font-size="13">{}</text>"#, escape(title));
    for (i, e) in entries.iter().enumerate() {
        let y = 28.0 + row_h * i as f64;
        let w = bar_w * e.relative.clamp(0.0, 1.0);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text><rect x="{label_w}" y="{y}" width="{w:.2}" height="{}" fill="{INITIAL_COLOR}"/><text x="{}" y="{}">{:.3}</text>"#,
            label_w - 6.0,
            y + 12.0,
            escape(&e.feature),
            row_h - 4.0,
            label_w + w + 4.0,
            y + 12.0,
            e.relative
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Paired bars (initial vs selected) for each level of the named features.
pub fn distribution_svg(shift: &DistributionShift, features: &[&str]) -> String {
    let chosen: Vec<_> = features.iter().filter_map(|f| shift.feature(f)).collect();
    let (label_w, bar_w, row_h, gap) = (200.0, 360.0, 10.0, 22.0);
    let rows: usize = chosen.iter().map(|f| f.levels.len()).sum();
    let height = 40.0 + rows as f64 * 2.0 * row_h + chosen.len() as f64 * gap;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="10">"#,
        label_w + bar_w + 60.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="4" y="14" font-size="12">initial (n={}) <tspan fill="{INITIAL_COLOR}">&#9632;</tspan> selected (n={}) <tspan fill="{SELECTED_COLOR}">&#9632;</tspan></text>"#,
        shift.initial_count, shift.selected_count
    );
    let mut y = 28.0;
    for f in chosen {
        let _ = writeln!(svg, r#"<text x="4" y="{}" font-weight="bold">{}</text>"#, y + 10.0, escape(&f.feature));
        y += gap;
        for l in &f.levels {
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                label_w - 6.0,
                y + row_h + 3.0,
                escape(&l.level)
            );
            for (k, (v, color)) in [(l.initial, INITIAL_COLOR), (l.selected, SELECTED_COLOR)].into_iter().enumerate() {
                let _ = writeln!(
                    svg,
                    r#"<rect x="{label_w}" y="{}" width="{:.2}" height="{}" fill="{color}"/>"#,
                    y + k as f64 * row_h,
                    bar_w * v.clamp(0.0, 1.0),
                    row_h - 1.0
                );
            }
            y += 2.0 * row_h;
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::super::{distribution_report, ImportanceEntry};
    use super::*;
    use crate::profile::{sample_profile, AttributeCatalog};

    #[test]
    fn importance_chart_has_one_bar_per_feature() {
        let r = ImportanceRanking {
            entries: (0..5)
                .map(|i| ImportanceEntry {
                    feature: format!("MBTI=<{i}>"),
                    category: None,
                    raw: 1.0 / (i + 1) as f64,
                    share: 0.2,
                    relative: 1.0 / (i + 1) as f64,
                })
                .collect(),
        };
        let svg = importance_svg(&r, 3, "t");
        assert_eq!(svg.matches("<rect").count(), 3);
        assert!(svg.contains("MBTI=&lt;0&gt;"));
    }

    #[test]
    fn distribution_chart_pairs_bars() {
        let cat = AttributeCatalog::default();
        let ps: Vec<_> = (0..10).map(|s| sample_profile(s, &cat).unwrap()).collect();
        let d = distribution_report(&ps, &ps[..3], &cat).unwrap();
        let svg = distribution_svg(&d, &["Gender", "nope"]);
        assert_eq!(svg.matches("<rect").count(), 2 * cat.genders.len());
    }
}
