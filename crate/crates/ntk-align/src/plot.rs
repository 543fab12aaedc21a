//! Deterministic SVG rendering for run traces and figure bundles. Output is
//! a pure function of the input figure: fixed element order, fixed ids,
//! fixed 3-decimal coordinate formatting, no timestamps.

use std::fmt::Write;

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: &str, points: Vec<(f64, f64)>) -> Series {
        Series { name: name.to_string(), points }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

impl Panel {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Panel {
        Panel { title: title.to_string(), x_label: x_label.to_string(), y_label: y_label.to_string(), ..Panel::default() }
    }

    pub fn log_y(mut self) -> Panel {
        self.log_y = true;
        self
    }

    pub fn log_x(mut self) -> Panel {
        self.log_x = true;
        self
    }

    pub fn with_series(mut self, series: Vec<Series>) -> Panel {
        self.series = series;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Figure {
    pub title: String,
    pub panels: Vec<Panel>,
}

const PANEL_W: f64 = 380.0;
const PANEL_H: f64 = 280.0;
const MARGIN_L: f64 = 62.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 34.0;
const MARGIN_B: f64 = 46.0;
const FIG_TITLE_H: f64 = 30.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Tick and coordinate formatting; fixed rules so output never depends on
/// locale or float printing quirks.
fn fmt_tick(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 {
        "0".to_string()
    } else if !(1e-3..1e5).contains(&a) {
        format!("{v:.1e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
        if s.is_empty() || s == "-" {
            "0".to_string()
        } else {
            s
        }
    }
}

struct Transform {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Transform {
    /// Maps a data value to [0, 1]; values outside the drawable domain of a
    /// log axis were filtered before range computation.
    fn unit(&self, v: f64) -> f64 {
        let (v, lo, hi) = if self.log {
            (v.log10(), self.lo.log10(), self.hi.log10())
        } else {
            (v, self.lo, self.hi)
        };
        if hi == lo {
            0.5
        } else {
            (v - lo) / (hi - lo)
        }
    }

    /// Data value at a unit fraction, used for tick placement.
    fn at(&self, t: f64) -> f64 {
        if self.log {
            let (lo, hi) = (self.lo.log10(), self.hi.log10());
            10f64.powf(lo + t * (hi - lo))
        } else {
            self.lo + t * (self.hi - self.lo)
        }
    }
}

fn drawable(p: &(f64, f64), log_x: bool, log_y: bool) -> bool {
    p.0.is_finite() && p.1.is_finite() && (!log_x || p.0 > 0.0) && (!log_y || p.1 > 0.0)
}

fn axis_range(values: impl Iterator<Item = f64>, log: bool) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return None;
    }
    if lo == hi {
        // widen a degenerate range so the single value sits mid-axis
        if log {
            return Some((lo / 10.0, hi * 10.0));
        }
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.5 };
        return Some((lo - pad, hi + pad));
    }
    Some((lo, hi))
}

fn render_panel(out: &mut String, panel: &Panel, idx: usize, x0: f64, y0: f64) {
    let plot_x = x0 + MARGIN_L;
    let plot_y = y0 + MARGIN_T;
    let plot_w = PANEL_W - MARGIN_L - MARGIN_R;
    let plot_h = PANEL_H - MARGIN_T - MARGIN_B;

    writeln!(out, r##"<g id="panel-{idx}">"##).unwrap();
    writeln!(
        out,
        r#"<text x="{:.3}" y="{:.3}" font-size="14" font-weight="bold" text-anchor="middle">{}</text>"#,
        x0 + PANEL_W / 2.0,
        y0 + 20.0,
        esc(&panel.title)
    )
    .unwrap();
    writeln!(
        out,
        r##"<rect x="{plot_x:.3}" y="{plot_y:.3}" width="{plot_w:.3}" height="{plot_h:.3}" fill="none" stroke="#333" stroke-width="1"/>"##
    )
    .unwrap();

    let kept: Vec<Vec<(f64, f64)>> = panel
        .series
        .iter()
        .map(|s| s.points.iter().copied().filter(|p| drawable(p, panel.log_x, panel.log_y)).collect())
        .collect();
    let xr = axis_range(kept.iter().flatten().map(|p| p.0), panel.log_x);
    let yr = axis_range(kept.iter().flatten().map(|p| p.1), panel.log_y);

    let (Some((xlo, xhi)), Some((ylo, yhi))) = (xr, yr) else {
        writeln!(
            out,
            r##"<text x="{:.3}" y="{:.3}" font-size="13" fill="#888" text-anchor="middle">no data</text>"##,
            plot_x + plot_w / 2.0,
            plot_y + plot_h / 2.0
        )
        .unwrap();
        writeln!(out, "</g>").unwrap();
        return;
    };
    let tx = Transform { lo: xlo, hi: xhi, log: panel.log_x };
    let ty = Transform { lo: ylo, hi: yhi, log: panel.log_y };

    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let gx = plot_x + t * plot_w;
        let gy = plot_y + plot_h - t * plot_h;
        writeln!(
            out,
            r##"<line x1="{gx:.3}" y1="{:.3}" x2="{gx:.3}" y2="{:.3}" stroke="#ccc" stroke-width="0.5"/>"##,
            plot_y,
            plot_y + plot_h
        )
        .unwrap();
        writeln!(
            out,
            r##"<line x1="{:.3}" y1="{gy:.3}" x2="{:.3}" y2="{gy:.3}" stroke="#ccc" stroke-width="0.5"/>"##,
            plot_x,
            plot_x + plot_w
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{gx:.3}" y="{:.3}" font-size="10" text-anchor="middle">{}</text>"#,
            plot_y + plot_h + 14.0,
            esc(&fmt_tick(tx.at(t)))
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{:.3}" y="{:.3}" font-size="10" text-anchor="end">{}</text>"#,
            plot_x - 5.0,
            gy + 3.5,
            esc(&fmt_tick(ty.at(t)))
        )
        .unwrap();
    }
    writeln!(
        out,
        r#"<text x="{:.3}" y="{:.3}" font-size="11" text-anchor="middle">{}</text>"#,
        plot_x + plot_w / 2.0,
        y0 + PANEL_H - 12.0,
        esc(&panel.x_label)
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="{:.3}" y="{:.3}" font-size="11" text-anchor="middle" transform="rotate(-90 {:.3} {:.3})">{}</text>"#,
        x0 + 14.0,
        plot_y + plot_h / 2.0,
        x0 + 14.0,
        plot_y + plot_h / 2.0,
        esc(&panel.y_label)
    )
    .unwrap();

    for (si, pts) in kept.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let color = PALETTE[si % PALETTE.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|p| {
                format!(
                    "{:.3},{:.3}",
                    plot_x + tx.unit(p.0) * plot_w,
                    plot_y + plot_h - ty.unit(p.1) * plot_h
                )
            })
            .collect();
        if coords.len() == 1 {
            let (x, y) = pts[0];
            writeln!(
                out,
                r#"<circle cx="{:.3}" cy="{:.3}" r="2.5" fill="{color}"/>"#,
                plot_x + tx.unit(x) * plot_w,
                plot_y + plot_h - ty.unit(y) * plot_h
            )
            .unwrap();
        } else {
            writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                coords.join(" ")
            )
            .unwrap();
        }
    }

    // legend in series order, top-right corner of the plot area
    for (si, s) in panel.series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let ly = plot_y + 14.0 + si as f64 * 15.0;
        let lx = plot_x + plot_w - 110.0;
        writeln!(
            out,
            r#"<line x1="{lx:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="{color}" stroke-width="2"/>"#,
            ly - 3.5,
            lx + 18.0,
            ly - 3.5
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{:.3}" y="{ly:.3}" font-size="11">{}</text>"#,
            lx + 23.0,
            esc(&s.name)
        )
        .unwrap();
    }
    writeln!(out, "</g>").unwrap();
}

/// Renders a figure to a standalone SVG document. Panels flow left to right
/// in rows of at most three.
pub fn render_figure(fig: &Figure) -> String {
    let n = fig.panels.len().max(1);
    let cols = n.min(3);
    let rows = n.div_ceil(cols);
    let width = cols as f64 * PANEL_W;
    let height = FIG_TITLE_H + rows as f64 * PANEL_H;
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"#
    )
    .unwrap();
    writeln!(out, r##"<rect width="{width:.0}" height="{height:.0}" fill="white"/>"##).unwrap();
    writeln!(
        out,
        r#"<text x="{:.3}" y="21" font-size="16" font-weight="bold" text-anchor="middle">{}</text>"#,
        width / 2.0,
        esc(&fig.title)
    )
    .unwrap();
    for (i, panel) in fig.panels.iter().enumerate() {
        let x0 = (i % cols) as f64 * PANEL_W;
        let y0 = FIG_TITLE_H + (i / cols) as f64 * PANEL_H;
        render_panel(&mut out, panel, i, x0, y0);
    }
    writeln!(out, "</svg>").unwrap();
    out
}
