//! Minimal SVG histograms.

use std::fmt::Write;

use crate::metrics::age_histogram;

const W: f64 = 480.0;
const H: f64 = 300.0;
const MARGIN: f64 = 40.0;
const BEFORE: &str = "#f28e2b";
const AFTER: &str = "#4e79a7";

/// Overlaid age histograms, `before` in orange and `after` in blue.
pub fn age_histogram_svg(title: &str, before: &[f64], after: &[f64], width: f64) -> String {
    let hb = age_histogram(before, width);
    let ha = age_histogram(after, width);
    let bins = hb.counts.len();
    let peak = hb.counts.iter().chain(&ha.counts).copied().max().unwrap_or(0).max(1) as f64;
    let plot_w = W - 2.0 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    let bar_w = plot_w / bins as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    for (counts, color) in [(&hb.counts, BEFORE), (&ha.counts, AFTER)] {
        for (i, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let h = plot_h * c as f64 / peak;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.6"/>"#,
                MARGIN + i as f64 * bar_w,
                H - MARGIN - h,
                bar_w,
                h
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
        H - MARGIN,
        W - MARGIN
    );
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{}" stroke="black"/>"#,
        H - MARGIN
    );
    for i in 0..=bins {
        if i % 2 != 0 && bins > 8 {
            continue;
        }
        let age = hb.lo + i as f64 * hb.width;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{age}</text>"#,
            MARGIN + i as f64 * bar_w,
            H - MARGIN + 14.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">target age (years)</text>"#,
        W / 2.0,
        H - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{peak}</text>"#,
        MARGIN - 4.0,
        MARGIN + 4.0
    );
    let _ = writeln!(
        s,
        r#"<rect x="{}" y="30" width="10" height="10" fill="{BEFORE}"/>"#,
        W - 130.0
    );
    let _ = writeln!(s, r#"<text x="{}" y="39">before</text>"#, W - 115.0);
    let _ = writeln!(
        s,
        r#"<rect x="{}" y="30" width="10" height="10" fill="{AFTER}"/>"#,
        W - 70.0
    );
    let _ = writeln!(s, r#"<text x="{}" y="39">after</text>"#, W - 55.0);
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bars_match_nonzero_bins() {
        let svg = age_histogram_svg("AD <hard>", &[61.0, 61.5, 80.0], &[70.0], 5.0);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("AD &lt;hard&gt;"));
        assert_eq!(svg.matches(BEFORE).count(), 1 + 2);
        assert_eq!(svg.matches(AFTER).count(), 1 + 1);
    }
}
