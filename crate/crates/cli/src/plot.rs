//! SVG figures for the sweeps.

use std::path::Path;

use anyhow::{anyhow, bail};
use plotters::coord::Shift;
use plotters::prelude::*;

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(255, 127, 14),
    RGBColor(23, 190, 207),
];

fn pe<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("plot: {e:?}")
}

/// `[lo, hi]` padded so flat series still get a visible range.
fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) =
        values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.1).max(1e-3 * hi.abs().max(1.0));
    (lo - pad, hi + pad)
}

/// One x series with a left-axis curve (blue) and a right-axis curve (red).
pub fn dual_axis(
    path: &Path,
    title: &str,
    x_label: &str,
    xs: &[f64],
    left: (&str, &[f64]),
    right: (&str, &[f64]),
) -> anyhow::Result<()> {
    if xs.len() != left.1.len() || xs.len() != right.1.len() || xs.is_empty() {
        bail!("plot series lengths differ or are empty");
    }
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(pe)?;
    let (x0, x1) = span(xs.iter().copied());
    let (l0, l1) = span(left.1.iter().copied());
    let (r0, r1) = span(right.1.iter().copied());
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .right_y_label_area_size(60)
        .build_cartesian_2d(x0..x1, l0..l1)
        .map_err(pe)?
        .set_secondary_coord(x0..x1, r0..r1);
    chart.configure_mesh().x_desc(x_label).y_desc(left.0).draw().map_err(pe)?;
    chart.configure_secondary_axes().y_desc(right.0).draw().map_err(pe)?;
    let blue = PALETTE[0];
    let red = PALETTE[1];
    chart
        .draw_series(LineSeries::new(xs.iter().copied().zip(left.1.iter().copied()), blue.stroke_width(2)))
        .map_err(pe)?
        .label(left.0)
        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], blue));
    chart.draw_series(xs.iter().zip(left.1).map(|(&x, &y)| Circle::new((x, y), 3, blue.filled()))).map_err(pe)?;
    chart
        .draw_secondary_series(LineSeries::new(xs.iter().copied().zip(right.1.iter().copied()), red.stroke_width(2)))
        .map_err(pe)?
        .label(right.0)
        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], red));
    chart
        .draw_secondary_series(xs.iter().zip(right.1).map(|(&x, &y)| Circle::new((x, y), 3, red.filled())))
        .map_err(pe)?;
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(pe)?;
    root.present().map_err(pe)?;
    Ok(())
}

/// A named curve of `(x, y)` points.
pub type Series = (String, Vec<(f64, f64)>);

fn line_panel(
    area: &DrawingArea<SVGBackend<'_>, Shift>,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> anyhow::Result<()> {
    let (x0, x1) = span(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let (y0, y1) = span(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    let mut chart = ChartBuilder::on(area)
        .caption(y_label, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(pe)?;
    chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw().map_err(pe)?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(pe)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled()))).map_err(pe)?;
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(pe)?;
    Ok(())
}

/// Side-by-side panels sharing an x label, each with several curves.
pub fn line_panels(path: &Path, x_label: &str, panels: &[(&str, Vec<Series>)]) -> anyhow::Result<()> {
    if panels.is_empty() {
        bail!("nothing to plot");
    }
    let root = SVGBackend::new(path, (560 * panels.len() as u32, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(pe)?;
    for (area, (y_label, series)) in root.split_evenly((1, panels.len())).iter().zip(panels) {
        line_panel(area, x_label, y_label, series)?;
    }
    root.present().map_err(pe)?;
    Ok(())
}

/// White to dark blue.
pub fn heat_color(t: f64) -> RGBColor {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    RGBColor(lerp(247.0, 8.0), lerp(251.0, 48.0), lerp(255.0, 107.0))
}

/// `values[row][col]` as annotated cells; rows and columns share `labels`.
pub fn heatmap(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    labels: &[String],
    values: &[Vec<f64>],
) -> anyhow::Result<()> {
    let n = labels.len();
    if n == 0 || values.len() != n || values.iter().any(|r| r.len() != n) {
        bail!("heatmap needs a {n}x{n} grid");
    }
    let (lo, hi) = span(values.iter().flatten().copied());
    let root = SVGBackend::new(path, (600, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(pe)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(45)
        .y_label_area_size(70)
        .build_cartesian_2d(0..n, 0..n)
        .map_err(pe)?;
    let label_of = |i: &usize| labels.get(*i).cloned().unwrap_or_default();
    chart
        .configure_mesh()
        .disable_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .x_labels(n + 1)
        .y_labels(n + 1)
        .x_label_formatter(&label_of)
        .y_label_formatter(&label_of)
        .draw()
        .map_err(pe)?;
    for (r, row) in values.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let t = (v - lo) / (hi - lo);
            chart
                .draw_series(std::iter::once(Rectangle::new([(c, r), (c + 1, r + 1)], heat_color(t).filled())))
                .map_err(pe)?;
            let ink = if t > 0.55 { WHITE } else { BLACK };
            chart
                .draw_series(std::iter::once(Text::new(
                    format!("{v:.3}"),
                    (c, r + 1),
                    ("sans-serif", 13).into_font().color(&ink),
                )))
                .map_err(pe)?;
        }
    }
    root.present().map_err(pe)?;
    Ok(())
}
