//! Static SVG plots rendered from the CSV outputs.

use std::path::Path;

use plotters::prelude::*;

type PlotResult = Result<(), Box<dyn std::error::Error>>;

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

pub fn loss_curve(path: &Path, steps: &[(f64, f64)]) -> PlotResult {
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE)?;
    let (x0, x1) = span(steps.iter().map(|p| p.0));
    let (y0, y1) = span(steps.iter().map(|p| p.1));
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(48)
        .build_cartesian_2d(x0..x1, y0..y1)?;
    chart.configure_mesh().x_desc("step").y_desc("loss").draw()?;
    chart.draw_series(LineSeries::new(steps.iter().copied(), &BLUE))?;
    root.present()?;
    Ok(())
}

pub fn histogram(path: &Path, title: &str, values: &[f64], bins: usize) -> PlotResult {
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE)?;
    let (lo, hi) = span(values.iter().copied());
    let lo = lo.max(0.0);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(1).max(1) as f64 * 1.1;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(48)
        .build_cartesian_2d(lo..hi, 0.0..top)?;
    chart.configure_mesh().x_desc("radial error (mm)").y_desc("count").draw()?;
    chart.draw_series(counts.iter().enumerate().map(|(i, &c)| {
        let x = lo + i as f64 * width;
        Rectangle::new([(x, 0.0), (x + width, c as f64)], BLUE.mix(0.6).filled())
    }))?;
    root.present()?;
    Ok(())
}

/// Scatter of 2D points grouped by label, one color per group.
pub fn scatter(path: &Path, title: &str, groups: &[(String, Vec<(f64, f64)>)]) -> PlotResult {
    let root = SVGBackend::new(path, (720, 600)).into_drawing_area();
    root.fill(&WHITE)?;
    let (x0, x1) = span(groups.iter().flat_map(|g| g.1.iter().map(|p| p.0)));
    let (y0, y1) = span(groups.iter().flat_map(|g| g.1.iter().map(|p| p.1)));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(48)
        .build_cartesian_2d(x0..x1, y0..y1)?;
    chart.configure_mesh().x_desc("e1").y_desc("e2").draw()?;
    for (i, (label, pts)) in groups.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))?
            .label(label.as_str())
            .legend(move |(x, y)| Circle::new((x, y), 3, color.filled()));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    root.present()?;
    Ok(())
}
