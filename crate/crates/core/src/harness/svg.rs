//! Minimal self-contained SVG bar charts.

use std::fmt::Write;

const W: f64 = 760.0;
const H: f64 = 360.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 60.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;
const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

/// One bar series; `None` values leave a gap.
pub struct Series {
    pub name: String,
    pub values: Vec<Option<f64>>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(series: &[Series]) -> (f64, f64) {
    let vals = series.iter().flat_map(|s| s.values.iter().flatten().copied());
    let (lo, hi) = vals.fold((0.0f64, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi - lo < 1e-12 {
        (lo - 1.0, hi + 1.0)
    } else {
        let pad = 0.05 * (hi - lo);
        (if lo < 0.0 { lo - pad } else { lo }, hi + pad)
    }
}

fn axis(svg: &mut String, x: f64, lo: f64, hi: f64, label: &str, right: bool) {
    let plot_h = H - TOP - BOTTOM;
    let _ = writeln!(svg, r#"<line x1="{x}" y1="{TOP}" x2="{x}" y2="{}" stroke="black"/>"#, H - BOTTOM);
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = H - BOTTOM - plot_h * i as f64 / 4.0;
        let (tx, anchor) = if right { (x + 6.0, "start") } else { (x - 6.0, "end") };
        let _ = writeln!(
            svg,
            r#"<text x="{tx}" y="{:.1}" font-size="10" text-anchor="{anchor}">{v:.3}</text>"#,
            y + 3.0
        );
    }
    let lx = if right { W - 12.0 } else { 14.0 };
    let _ = writeln!(
        svg,
        r#"<text x="{lx}" y="{:.1}" font-size="11" text-anchor="middle" transform="rotate(-90 {lx} {:.1})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(label)
    );
}

/// Grouped bars over `groups` with one colour per series. `overlay`, when
/// given, is drawn as points against a second axis on the right.
pub fn grouped_bars(
    title: &str,
    groups: &[String],
    series: &[Series],
    y_label: &str,
    overlay: Option<(&Series, &str)>,
) -> String {
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" font-size="14" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let (lo, hi) = range(series);
    let y_of = |v: f64, lo: f64, hi: f64| H - BOTTOM - plot_h * (v - lo) / (hi - lo);
    axis(&mut svg, LEFT, lo, hi, y_label, false);
    let zero = y_of(0.0f64.clamp(lo, hi), lo, hi);
    let _ = writeln!(
        svg,
        r#"<line x1="{LEFT}" y1="{zero:.1}" x2="{}" y2="{zero:.1}" stroke="black"/>"#,
        W - RIGHT
    );
    let gw = plot_w / groups.len().max(1) as f64;
    let bw = 0.8 * gw / series.len().max(1) as f64;
    for (gi, g) in groups.iter().enumerate() {
        let gx = LEFT + gi as f64 * gw;
        for (si, s) in series.iter().enumerate() {
            if let Some(Some(v)) = s.values.get(gi) {
                let y = y_of(*v, lo, hi);
                let (top, h) = if y < zero { (y, zero - y) } else { (zero, y - zero) };
                let _ = writeln!(
                    svg,
                    r#"<rect x="{:.1}" y="{top:.1}" width="{bw:.1}" height="{h:.1}" fill="{}"><title>{} {}: {v:.4}</title></rect>"#,
                    gx + 0.1 * gw + si as f64 * bw,
                    PALETTE[si % PALETTE.len()],
                    escape(g),
                    escape(&s.name)
                );
            }
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#,
            gx + gw / 2.0,
            H - BOTTOM + 14.0,
            escape(g)
        );
    }
    if let Some((o, label)) = overlay {
        let (olo, ohi) = range(std::slice::from_ref(o));
        axis(&mut svg, W - RIGHT, olo, ohi, label, true);
        for (gi, v) in o.values.iter().enumerate() {
            if let Some(v) = v {
                let _ = writeln!(
                    svg,
                    r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="black"><title>{}: {v:.4}</title></circle>"#,
                    LEFT + (gi as f64 + 0.5) * gw,
                    y_of(*v, olo, ohi),
                    escape(&o.name)
                );
            }
        }
    }
    for (si, s) in series.iter().enumerate() {
        let x = LEFT + si as f64 * 110.0;
        let y = H - 22.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{y:.1}" font-size="11">{}</text>"#,
            y - 9.0,
            PALETTE[si % PALETTE.len()],
            x + 14.0,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
