use std::path::Path;

use anyhow::{anyhow, Result};
use cvdm_core::convergence::ConvergenceReport;
use cvdm_core::schedule::ScheduleReportRow;
use cvdm_core::tensor::Tensor;
use plotters::prelude::*;

/// Grayscale preview of the last two axes of the first channel. Without a
/// range the image is stretched between its own minimum and maximum.
pub fn save_png(path: &Path, t: &Tensor, range: Option<(f64, f64)>) -> Result<()> {
    let shape = t.shape();
    if shape.len() < 2 {
        return Err(anyhow!("cannot draw a tensor of shape {shape:?}"));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let plane = &t.data()[..h * w];
    let (lo, hi) = range.unwrap_or_else(|| {
        plane
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels: Vec<u8> = plane
        .iter()
        .map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .ok_or_else(|| anyhow!("image buffer size"))?
        .save(path)?;
    Ok(())
}

fn draw_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("plot: {e:?}")
}

pub fn schedule_chart(path: &Path, rows: &[ScheduleReportRow]) -> Result<()> {
    let root = SVGBackend::new(path, (960, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let (left, right) = root.split_horizontally(480);
    let panels: [(&DrawingArea<_, _>, &str, fn(&ScheduleReportRow) -> [Option<f64>; 3]); 2] = [
        (&left, "gamma", |r| [Some(r.mean_gamma), r.region_gamma, r.background_gamma]),
        (&right, "beta", |r| [Some(r.mean_beta), r.region_beta, r.background_beta]),
    ];
    for (area, name, pick) in panels {
        let ymax = rows
            .iter()
            .flat_map(|r| pick(r).into_iter().flatten())
            .fold(0.0f64, f64::max)
            .max(1e-12);
        let mut chart = ChartBuilder::on(area)
            .caption(format!("mean {name}(t)"), ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(0.0..1.0, 0.0..ymax * 1.05)
            .map_err(draw_err)?;
        chart.configure_mesh().x_desc("t").draw().map_err(draw_err)?;
        let styles = [("all", BLACK), ("region", RED), ("background", BLUE)];
        for (k, (label, color)) in styles.into_iter().enumerate() {
            let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| pick(r)[k].map(|v| (r.t, v))).collect();
            if pts.is_empty() {
                continue;
            }
            chart
                .draw_series(LineSeries::new(pts, color.stroke_width(2)))
                .map_err(draw_err)?
                .label(label)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE)
            .draw()
            .map_err(draw_err)?;
    }
    root.present().map_err(draw_err)?;
    Ok(())
}

/// Log-log plot of `|L_T − L_∞|` and its bound against `T` for each schedule.
pub fn convergence_chart(path: &Path, reports: &[ConvergenceReport]) -> Result<()> {
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let values = reports.iter().flat_map(|r| r.rows.iter().flat_map(|row| [row.gap, row.bound]));
    let (lo, hi) = values
        .filter(|v| *v > 0.0 && v.is_finite())
        .fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo < hi { (lo / 2.0, hi * 2.0) } else { (1e-6, 1.0) };
    let steps = reports.iter().flat_map(|r| r.rows.iter().map(|row| row.steps as f64));
    let (tmin, tmax) = steps.fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    let (tmin, tmax) = if tmin < tmax { (tmin, tmax) } else { (1.0, 10.0) };
    let mut chart = ChartBuilder::on(&root)
        .caption("discrete vs continuous loss", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(60)
        .build_cartesian_2d((tmin..tmax).log_scale(), (lo..hi).log_scale())
        .map_err(draw_err)?;
    chart.configure_mesh().x_desc("T").y_desc("gap").draw().map_err(draw_err)?;
    for (i, r) in reports.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let gap: Vec<(f64, f64)> = r
            .rows
            .iter()
            .filter(|row| row.gap > 0.0)
            .map(|row| (row.steps as f64, row.gap))
            .collect();
        let bound: Vec<(f64, f64)> = r.rows.iter().map(|row| (row.steps as f64, row.bound)).collect();
        chart
            .draw_series(LineSeries::new(gap.clone(), color.stroke_width(2)))
            .map_err(draw_err)?
            .label(format!("{} gap", r.schedule))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart
            .draw_series(gap.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(draw_err)?;
        chart
            .draw_series(LineSeries::new(bound, color.mix(0.5)))
            .map_err(draw_err)?
            .label(format!("{} bound", r.schedule))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.mix(0.5)));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(())
}
