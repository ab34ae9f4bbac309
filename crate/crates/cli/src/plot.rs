//! Offline PNG charts from evaluation reports and metrics streams.

use std::path::Path;

use anyhow::{bail, Context, Result};
use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_rect_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;
use iwol_core::harness::{Degradation, EvalReport};

const WIDTH: u32 = 800;
const HEIGHT: u32 = 480;
const MARGIN: u32 = 40;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([220, 220, 220]);

/// Bar color per degradation: normal, Type I at 8 and 2 bits (and other
/// widths), Type II.
pub fn bar_color(kind: Degradation) -> Rgb<u8> {
    match kind {
        Degradation::None => Rgb([46, 125, 50]),
        Degradation::Quantize { n_bits } if n_bits >= 8 => Rgb([100, 181, 246]),
        Degradation::Quantize { .. } => Rgb([21, 101, 192]),
        Degradation::Corrupt => Rgb([198, 40, 40]),
    }
}

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND);
    let (w, h) = ((WIDTH - 2 * MARGIN) as f32, (HEIGHT - 2 * MARGIN) as f32);
    for k in 0..=4 {
        let y = MARGIN as f32 + h * k as f32 / 4.0;
        draw_line_segment_mut(&mut img, (MARGIN as f32, y), (MARGIN as f32 + w, y), GRID);
    }
    let bottom = (HEIGHT - MARGIN) as f32;
    draw_line_segment_mut(&mut img, (MARGIN as f32, MARGIN as f32), (MARGIN as f32, bottom), AXIS);
    draw_line_segment_mut(&mut img, (MARGIN as f32, bottom), ((WIDTH - MARGIN) as f32, bottom), AXIS);
    img
}

/// One bar per report (success rate on a 0–100% axis with gridlines every
/// 25%). A report without degradation starts a new group.
pub fn success_bars(reports: &[EvalReport]) -> Result<RgbImage> {
    if reports.is_empty() {
        bail!("no reports to plot");
    }
    let groups = reports.iter().filter(|r| r.degradation.kind == Degradation::None).count().max(1);
    let slots = reports.len() + groups;
    let slot = (WIDTH - 2 * MARGIN) / slots as u32;
    let bar = (slot * 4 / 5).max(1);
    let plot_h = (HEIGHT - 2 * MARGIN) as f64;
    let mut img = canvas();
    let mut pos = 0u32;
    for (i, r) in reports.iter().enumerate() {
        if i > 0 && r.degradation.kind == Degradation::None {
            pos += 1;
        }
        let height = ((r.success_rate.clamp(0.0, 1.0) * plot_h).round() as u32).max(1);
        let x = MARGIN + pos * slot + (slot - bar) / 2;
        let y = HEIGHT - MARGIN - height;
        let rect = Rect::at(x as i32, y as i32).of_size(bar, height);
        draw_filled_rect_mut(&mut img, rect, bar_color(r.degradation.kind));
        draw_hollow_rect_mut(&mut img, rect, AXIS);
        pos += 1;
    }
    Ok(img)
}

/// Line chart of `values` against their index, scaled to the data range.
pub fn curve(series: &[Vec<f64>]) -> Result<RgbImage> {
    let all: Vec<f64> = series.iter().flatten().cloned().filter(|v| v.is_finite()).collect();
    if all.is_empty() {
        bail!("no finite values to plot");
    }
    let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let longest = series.iter().map(Vec::len).max().unwrap_or(1).max(2);
    let (w, h) = ((WIDTH - 2 * MARGIN) as f64, (HEIGHT - 2 * MARGIN) as f64);
    let palette = [Rgb([21, 101, 192]), Rgb([198, 40, 40]), Rgb([46, 125, 50]), Rgb([245, 124, 0])];
    let mut img = canvas();
    for (s, values) in series.iter().enumerate() {
        let point = |i: usize, v: f64| {
            (
                (MARGIN as f64 + w * i as f64 / (longest - 1) as f64) as f32,
                (MARGIN as f64 + h * (1.0 - (v - lo) / span)) as f32,
            )
        };
        let color = palette[s % palette.len()];
        let pts: Vec<(usize, f64)> = values.iter().cloned().enumerate().filter(|(_, v)| v.is_finite()).collect();
        for pair in pts.windows(2) {
            draw_line_segment_mut(&mut img, point(pair[0].0, pair[0].1), point(pair[1].0, pair[1].1), color);
        }
    }
    Ok(img)
}

pub fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path).with_context(|| format!("cannot write {}", path.display()))
}
