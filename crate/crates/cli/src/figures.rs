//! Static figures: grayscale panel strips (PNG) and line plots (SVG).

use std::path::Path;

use anyhow::{Context, Result};
use image::{GrayImage, Luma};
use ndarray::{Array2, ArrayView2};
use plotters::prelude::*;

const GAP: u32 = 2;

/// Min-max scaled grayscale copy of one panel.
fn to_gray(panel: ArrayView2<f32>) -> GrayImage {
    let (h, w) = panel.dim();
    let (lo, hi) = panel
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (panel[[y as usize, x as usize]] - lo) / span;
        Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
    })
}

/// Places panels side by side, each scaled to its own value range.
pub fn panel_strip(panels: &[Array2<f32>]) -> GrayImage {
    let h = panels.iter().map(|p| p.dim().0).max().unwrap_or(0) as u32;
    let w: u32 = panels.iter().map(|p| p.dim().1 as u32).sum::<u32>()
        + GAP * panels.len().saturating_sub(1) as u32;
    let mut out = GrayImage::from_pixel(w.max(1), h.max(1), Luma([255]));
    let mut x0 = 0;
    for panel in panels {
        let gray = to_gray(panel.view());
        image::imageops::replace(&mut out, &gray, x0 as i64, 0);
        x0 += gray.width() + GAP;
    }
    out
}

pub fn save_strip(path: &Path, panels: &[Array2<f32>]) -> Result<()> {
    panel_strip(panels)
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}

/// One named series of `(x, y)` points.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Line plot with markers and a legend.
pub fn line_plot(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (x_lo, x_hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (x_lo, x_hi) = if x_hi > x_lo { (x_lo, x_hi) } else { (x_lo - 1.0, x_lo + 1.0) };
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x_lo..x_hi, 0.0..1.0)?;
    chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw()?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart.draw_series(s.points.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    root.present()
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strip_layout_and_scaling() {
        let a = Array2::from_shape_fn((4, 3), |(y, x)| (y * 3 + x) as f32);
        let b = Array2::from_elem((4, 5), 2.0f32);
        let strip = panel_strip(&[a, b]);
        assert_eq!(strip.dimensions(), (3 + GAP + 5, 4));
        assert_eq!(strip.get_pixel(0, 0)[0], 0);
        assert_eq!(strip.get_pixel(2, 3)[0], 255);
        // Constant panels map to black.
        assert_eq!(strip.get_pixel(3 + GAP, 0)[0], 0);
    }

    #[test]
    fn plot_writes_svg() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.svg");
        let series = vec![Series {
            label: "a".into(),
            points: vec![(100.0, 0.2), (500.0, 0.6), (900.0, 0.3)],
        }];
        line_plot(&path, "Dice", "t_test", "Dice", &series).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("polyline"));
    }
}
