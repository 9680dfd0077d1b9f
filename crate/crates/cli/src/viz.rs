//! Five-panel SVG of one frame's attention trace, top to bottom: both flows,
//! step-1 attention heat rows, the step-1 pooled curve, step-2 attention
//! weights, and the two-bin class probability.

use std::fmt::Write as _;

use glottal_core::s2ap::AttentionTrace;

const WIDTH: f64 = 800.0;
const MARGIN: f64 = 40.0;
const PANEL_H: f64 = 120.0;
const GAP: f64 = 30.0;

fn polyline(out: &mut String, values: &[f64], top: f64, lo: f64, hi: f64, color: &str) {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = values.len().max(2) - 1;
    let points: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let x = MARGIN + (WIDTH - 2.0 * MARGIN) * i as f64 / n as f64;
            let y = top + PANEL_H * (1.0 - (v - lo) / span);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let _ = writeln!(
        out,
        r#"    <polyline fill="none" stroke="{color}" stroke-width="1" points="{}"/>"#,
        points.join(" ")
    );
}

fn bounds<'a>(series: impl IntoIterator<Item = &'a f64>) -> (f64, f64) {
    series
        .into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn open_panel(out: &mut String, index: usize, name: &str, top: f64) {
    let _ = writeln!(out, r#"  <g class="panel" id="panel-{index}" data-name="{name}">"#);
    let _ = writeln!(out, r#"    <text x="{MARGIN}" y="{:.2}" font-size="12">{name}</text>"#, top - 6.0);
    let _ = writeln!(
        out,
        r#"    <rect x="{MARGIN}" y="{top:.2}" width="{:.2}" height="{PANEL_H}" fill="none" stroke="gray"/>"#,
        WIDTH - 2.0 * MARGIN
    );
}

fn heat(v: f64) -> String {
    let level = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
    format!("rgb(255,{level},{level})")
}

pub fn render_svg(trace: &AttentionTrace, title: &str) -> String {
    let height = MARGIN + 5.0 * (PANEL_H + GAP);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    let _ = writeln!(out, r#"  <title>{}</title>"#, escape(title));
    let top = |i: usize| MARGIN + i as f64 * (PANEL_H + GAP);

    open_panel(&mut out, 1, "u_filter (black) and u_model (red)", top(0));
    let (lo, hi) = bounds(trace.u_filter.iter().chain(&trace.u_model));
    polyline(&mut out, &trace.u_filter, top(0), lo, hi, "black");
    polyline(&mut out, &trace.u_model, top(0), lo, hi, "red");
    out.push_str("  </g>\n");

    open_panel(&mut out, 2, "step-1 attention z_a1", top(1));
    let rows = trace.z_a1.len().max(1);
    let row_h = PANEL_H / rows as f64;
    for (f, row) in trace.z_a1.iter().enumerate() {
        let col_w = (WIDTH - 2.0 * MARGIN) / row.len().max(1) as f64;
        let _ = writeln!(out, r#"    <g class="heat-row" data-feature="{f}">"#);
        for (t, &v) in row.iter().enumerate() {
            let _ = writeln!(
                out,
                r#"      <rect x="{:.2}" y="{:.2}" width="{col_w:.3}" height="{row_h:.3}" fill="{}"/>"#,
                MARGIN + t as f64 * col_w,
                top(1) + f as f64 * row_h,
                heat(v)
            );
        }
        out.push_str("    </g>\n");
    }
    out.push_str("  </g>\n");

    open_panel(&mut out, 3, "step-1 pooled z_p1", top(2));
    let (lo, hi) = bounds(&trace.z_p1);
    polyline(&mut out, &trace.z_p1, top(2), lo, hi, "blue");
    out.push_str("  </g>\n");

    open_panel(&mut out, 4, "step-2 attention z_a2", top(3));
    let (_, hi) = bounds(&trace.z_a2);
    polyline(&mut out, &trace.z_a2, top(3), 0.0, hi, "green");
    out.push_str("  </g>\n");

    open_panel(&mut out, 5, "class probability", top(4));
    let bar_w = (WIDTH - 2.0 * MARGIN) / 4.0;
    for (i, (name, p)) in [("negative", 1.0 - trace.z_p2), ("positive", trace.z_p2)].into_iter().enumerate() {
        let x = MARGIN + bar_w * (0.5 + 2.0 * i as f64);
        let h = PANEL_H * p;
        let _ = writeln!(
            out,
            r#"    <rect class="bin" data-bin="{name}" data-value="{p}" x="{x:.2}" y="{:.2}" width="{bar_w:.2}" height="{h:.2}" fill="gray"/>"#,
            top(4) + PANEL_H - h
        );
        let _ = writeln!(
            out,
            r#"    <text x="{x:.2}" y="{:.2}" font-size="11">{name} {p:.3}</text>"#,
            top(4) + PANEL_H + 14.0
        );
    }
    out.push_str("  </g>\n");
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(features: usize, t: usize) -> AttentionTrace {
        AttentionTrace {
            u_filter: (0..t).map(|i| (i as f64 * 0.2).sin()).collect(),
            u_model: (0..t).map(|i| (i as f64 * 0.2).cos()).collect(),
            z_a1: vec![vec![1.0 / features as f64; t]; features],
            z_p1: vec![0.5; t],
            z_a2: vec![1.0 / t as f64; t],
            z_p2: 0.75,
        }
    }

    #[test]
    fn five_panels_and_one_heat_row_per_feature() {
        let svg = render_svg(&trace(6, 20), "r <1>");
        assert_eq!(svg.matches(r#"<g class="panel""#).count(), 5);
        assert_eq!(svg.matches(r#"class="heat-row""#).count(), 6);
        assert!(svg.contains(r#"data-bin="positive" data-value="0.75""#));
        assert!(svg.contains("r &lt;1&gt;"));
        let order: Vec<usize> = (1..=5).map(|i| svg.find(&format!("id=\"panel-{i}\"")).unwrap()).collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
    }
}
