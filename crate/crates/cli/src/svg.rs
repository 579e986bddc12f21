//! Minimal deterministic SVG charts. Coordinates are printed with fixed
//! precision so identical inputs give identical bytes.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const TICKS: usize = 5;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let pad = |(lo, hi): (f64, f64)| if hi - lo > 0.0 { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        let (x0, x1) = pad(x);
        let (y0, y1) = pad(y);
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn open(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str, x_ticks: bool) {
    let (bx, by) = (LEFT, HEIGHT - BOTTOM);
    let _ = writeln!(
        out,
        r#"<path d="M{bx:.2},{:.2} L{bx:.2},{by:.2} L{:.2},{by:.2}" stroke="black" fill="none"/>"#,
        TOP,
        WIDTH - RIGHT
    );
    for i in 0..=TICKS {
        let v = f.y0 + (f.y1 - f.y0) * i as f64 / TICKS as f64;
        let y = f.py(v);
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.3}</text>"#,
            bx - 6.0,
            y + 4.0
        );
        let _ = writeln!(out, r#"<path d="M{:.2},{y:.2} L{bx:.2},{y:.2}" stroke="black"/>"#, bx - 4.0);
        if x_ticks {
            let u = f.x0 + (f.x1 - f.x0) * i as f64 / TICKS as f64;
            let x = f.px(u);
            let _ = writeln!(
                out,
                r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="11">{u:.3}</text>"#,
                by + 16.0
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="13">{}</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        HEIGHT - 14.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 16 {:.2})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Vertical bars starting at zero.
pub fn bar_chart(title: &str, labels: &[String], values: &[f64], y_label: &str) -> String {
    let (_, hi) = range(values.iter().copied());
    let f = Frame::new((0.0, labels.len().max(1) as f64), (0.0, hi.max(0.0)));
    let mut out = String::new();
    open(&mut out, title);
    axes(&mut out, &f, "task", y_label, false);
    let slot = (WIDTH - LEFT - RIGHT) / labels.len().max(1) as f64;
    for (i, (label, &v)) in labels.iter().zip(values).enumerate() {
        let x = LEFT + slot * (i as f64 + 0.15);
        let y = f.py(v.max(0.0));
        let _ = writeln!(
            out,
            r##"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="#4c72b0"><title>{}: {v:.6}</title></rect>"##,
            slot * 0.7,
            (HEIGHT - BOTTOM - y).max(0.0),
            escape(label)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#,
            LEFT + slot * (i as f64 + 0.5),
            HEIGHT - BOTTOM + 16.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

pub fn line_chart(title: &str, xs: &[f64], ys: &[f64], x_label: &str, y_label: &str) -> String {
    let f = Frame::new(range(xs.iter().copied()), (0.0, range(ys.iter().copied()).1.max(0.0)));
    let mut out = String::new();
    open(&mut out, title);
    axes(&mut out, &f, x_label, y_label, true);
    let mut d = String::new();
    for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        let _ = write!(d, "{}{:.2},{:.2}", if i == 0 { "M" } else { " L" }, f.px(x), f.py(y));
    }
    let _ = writeln!(out, r##"<path d="{d}" stroke="#c44e52" stroke-width="1.5" fill="none"/>"##);
    out.push_str("</svg>\n");
    out
}

/// Labelled points with a dashed `y = x` reference.
pub fn scatter(title: &str, labels: &[String], xs: &[f64], ys: &[f64], x_label: &str, y_label: &str) -> String {
    let lo = range(xs.iter().chain(ys).copied()).0.min(1.0);
    let f = Frame::new((lo, 1.0), (lo, 1.0));
    let mut out = String::new();
    open(&mut out, title);
    axes(&mut out, &f, x_label, y_label, true);
    let _ = writeln!(
        out,
        r##"<path d="M{:.2},{:.2} L{:.2},{:.2}" stroke="#888888" stroke-dasharray="4 4"/>"##,
        f.px(lo),
        f.py(lo),
        f.px(1.0),
        f.py(1.0)
    );
    for ((label, &x), &y) in labels.iter().zip(xs).zip(ys) {
        let (cx, cy) = (f.px(x), f.py(y));
        let _ = writeln!(
            out,
            r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="4" fill="#55a868"><title>{}: ({x:.6}, {y:.6})</title></circle>"##,
            escape(label)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11">{}</text>"#,
            cx + 6.0,
            cy - 6.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_well_formed() {
        let labels = vec!["a".to_string(), "b<".to_string()];
        let a = bar_chart("alpha", &labels, &[0.5, 0.9], "alpha");
        assert_eq!(a, bar_chart("alpha", &labels, &[0.5, 0.9], "alpha"));
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
        assert!(a.contains("b&lt;"));
        assert_eq!(a.matches("<rect").count(), 3);
        let s = scatter("s", &labels, &[0.6, 0.9], &[0.62, 0.88], "x", "y");
        assert_eq!(s.matches("<circle").count(), 2);
        let l = line_chart("u", &[0.0, 1.0, 2.0], &[0.3, 0.2, 0.1], "step", "U");
        let data = l.lines().find(|line| line.contains("#c44e52")).unwrap();
        assert_eq!(data.matches(" L").count(), 2);
    }

    #[test]
    fn degenerate_ranges_are_finite() {
        let l = line_chart("u", &[0.0], &[0.0], "step", "U");
        assert!(!l.contains("NaN") && !l.contains("inf"));
    }
}
