//! Two-panel SVG figure: prices with change-point markers on top, returns
//! with the VaR, WVaR and BVaR thresholds below.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::risk::RiskReport;
use crate::segmentation::Segmentation;
use crate::series::{PriceSeries, ReturnSeries};

const WIDTH: f64 = 1000.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 20.0;
const PRICE_TOP: f64 = 30.0;
const PRICE_BOTTOM: f64 = 280.0;
const RETURN_TOP: f64 = 330.0;
const RETURN_BOTTOM: f64 = 580.0;
const HEIGHT: f64 = 610.0;

/// Linear map from data values to a vertical pixel band.
#[derive(Debug, Clone, Copy)]
struct Band {
    min: f64,
    max: f64,
    top: f64,
    bottom: f64,
}

impl Band {
    fn new(values: impl Iterator<Item = f64>, top: f64, bottom: f64) -> Self {
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            min = min.min(v);
            max = max.max(v);
        }
        if max.partial_cmp(&min) != Some(std::cmp::Ordering::Greater) {
            let pad = if min.is_finite() && min != 0.0 {
                min.abs() * 0.01
            } else {
                1.0
            };
            min -= pad;
            max += pad;
        }
        let pad = 0.05 * (max - min);
        Self {
            min: min - pad,
            max: max + pad,
            top,
            bottom,
        }
    }

    fn y(&self, v: f64) -> f64 {
        self.bottom - (v - self.min) / (self.max - self.min) * (self.bottom - self.top)
    }
}

fn x_of(index: usize, count: usize) -> f64 {
    let span = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    if count <= 1 {
        return MARGIN_LEFT;
    }
    MARGIN_LEFT + index as f64 / (count - 1) as f64 * span
}

fn polyline(out: &mut String, class: &str, points: impl Iterator<Item = (f64, f64)>) {
    let _ = write!(
        out,
        r#"<polyline class="{class}" fill="none" stroke-width="1" points=""#
    );
    for (k, (x, y)) in points.enumerate() {
        if k > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{x:.3},{y:.3}");
    }
    out.push_str("\"/>\n");
}

/// Renders the figure to a string.
pub fn render_svg(
    prices: &PriceSeries,
    returns: &ReturnSeries,
    seg: &Segmentation,
    report: &RiskReport,
) -> String {
    let n_prices = prices.len();
    let n_returns = returns.len();
    let price_band = Band::new(prices.prices().iter().copied(), PRICE_TOP, PRICE_BOTTOM);
    let thresholds = [-report.var, -report.wvar, -report.bvar];
    let return_band = Band::new(
        returns.values().iter().copied().chain(thresholds),
        RETURN_TOP,
        RETURN_BOTTOM,
    );

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    out.push_str(
        "<style>.price{stroke:#1f4e79}.returns{stroke:#555}.changepoint{stroke:#c00;stroke-dasharray:4 3}\
         .risk-var{stroke:#e08000}.risk-wvar{stroke:#b00000}.risk-bvar{stroke:#008040}text{font:12px sans-serif}</style>\n",
    );

    let _ = writeln!(
        out,
        r#"<g class="panel-prices" data-y-min="{}" data-y-max="{}" data-top="{PRICE_TOP}" data-bottom="{PRICE_BOTTOM}">"#,
        price_band.min, price_band.max
    );
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN_LEFT}" y="{}">Price</text>"#,
        PRICE_TOP - 10.0
    );
    polyline(
        &mut out,
        "price",
        prices
            .prices()
            .iter()
            .enumerate()
            .map(|(i, &p)| (x_of(i, n_prices), price_band.y(p))),
    );
    // Return t is the move from price t to price t+1, so a regime starting at
    // return t is marked at price t.
    for &t in seg.breakpoints() {
        let x = x_of(t, n_prices);
        let date = returns
            .dates()
            .get(t)
            .map(|d| d.to_string())
            .unwrap_or_default();
        let _ = writeln!(
            out,
            r#"<line class="changepoint" data-index="{t}" data-date="{date}" x1="{x:.3}" y1="{PRICE_TOP}" x2="{x:.3}" y2="{PRICE_BOTTOM}"/>"#
        );
    }
    out.push_str("</g>\n");

    let _ = writeln!(
        out,
        r#"<g class="panel-returns" data-y-min="{}" data-y-max="{}" data-top="{RETURN_TOP}" data-bottom="{RETURN_BOTTOM}">"#,
        return_band.min, return_band.max
    );
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN_LEFT}" y="{}">Log return</text>"#,
        RETURN_TOP - 10.0
    );
    polyline(
        &mut out,
        "returns",
        returns
            .values()
            .iter()
            .enumerate()
            .map(|(i, &r)| (x_of(i + 1, n_returns + 1), return_band.y(r))),
    );
    for (class, label, value) in [
        ("risk-var", "VaR", report.var),
        ("risk-wvar", "WVaR", report.wvar),
        ("risk-bvar", "BVaR", report.bvar),
    ] {
        let y = return_band.y(-value);
        let _ = writeln!(
            out,
            r#"<line class="{class}" data-value="{}" x1="{MARGIN_LEFT}" y1="{y:.3}" x2="{}" y2="{y:.3}"/>"#,
            -value,
            WIDTH - MARGIN_RIGHT
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.3}">{label} {:.2}%</text>"#,
            WIDTH - MARGIN_RIGHT - 90.0,
            y - 3.0,
            value * 100.0
        );
    }
    out.push_str("</g>\n</svg>\n");
    out
}

/// Writes the figure to `path`.
pub fn emit_svg(
    prices: &PriceSeries,
    returns: &ReturnSeries,
    seg: &Segmentation,
    report: &RiskReport,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_svg(prices, returns, seg, report)).map_err(|e| Error::io(path, e))
}
