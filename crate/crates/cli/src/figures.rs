//! PNG figures: spillover heatmaps and effect curves.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array1, ArrayView2};
use serde::Serialize;
use stci::effects::EffectEstimates;
use stci::grid::RegionMask;

use crate::CliError;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const GREY: Rgb<u8> = Rgb([150, 150, 150]);
const LIGHT: Rgb<u8> = Rgb([225, 225, 225]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const RED: Rgb<u8> = Rgb([178, 24, 43]);
const BLUE: Rgb<u8> = Rgb([33, 102, 172]);
const GAP: u32 = 6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapLayout {
    /// Absolute time steps of the panel columns.
    pub steps: Vec<usize>,
    /// Shared symmetric colour limit, in outcome units.
    pub scale: f64,
}

/// `count` indices spread evenly over `0..len`.
pub fn panel_indices(len: usize, count: usize) -> Vec<usize> {
    if len == 0 || count == 0 {
        return Vec::new();
    }
    let count = count.min(len);
    if count == 1 {
        return vec![len / 2];
    }
    (0..count).map(|i| (i * (len - 1) + (count - 1) / 2) / (count - 1)).collect()
}

/// Diverging blue-white-red colour for `v` in `[-scale, scale]`.
pub fn diverging(v: f64, scale: f64) -> Rgb<u8> {
    let t = (v / scale).clamp(-1.0, 1.0);
    let target = if t < 0.0 { BLUE } else { RED };
    let a = t.abs();
    let mix = |w: u8, c: u8| ((1.0 - a) * w as f64 + a * c as f64).round() as u8;
    Rgb([mix(255, target[0]), mix(255, target[1]), mix(255, target[2])])
}

/// Largest |τ| outside the treated region over the chosen panels of both maps.
pub fn spillover_scale(oracle: &EffectEstimates, predicted: &EffectEstimates, panels: &[usize]) -> f64 {
    let region = &oracle.region;
    let mut scale = 0.0f64;
    for &k in panels {
        for map in [&oracle.tau_map, &predicted.tau_map] {
            for ((i, j), &v) in map.index_axis(ndarray::Axis(0), k).indexed_iter() {
                if !region.contains(i, j) && v.is_finite() {
                    scale = scale.max(v.abs());
                }
            }
        }
    }
    if scale > 0.0 {
        scale
    } else {
        1.0
    }
}

fn draw_map(img: &mut RgbImage, x0: u32, y0: u32, cell: u32, map: ArrayView2<'_, f64>, region: &RegionMask, scale: f64) {
    for ((i, j), &v) in map.indexed_iter() {
        let colour = if region.contains(i, j) { GREY } else { diverging(v, scale) };
        for dy in 0..cell {
            for dx in 0..cell {
                img.put_pixel(x0 + j as u32 * cell + dx, y0 + i as u32 * cell + dy, colour);
            }
        }
    }
}

/// Oracle (top row) against predicted (bottom row) spillover maps at several
/// steps, treated cells greyed, one colour scale for every panel, colour bar
/// along the bottom.
pub fn spillover_heatmaps(
    oracle: &EffectEstimates,
    predicted: &EffectEstimates,
    panels: usize,
    path: &Path,
) -> Result<HeatmapLayout, CliError> {
    let (steps, n, m) = oracle.tau_map.dim();
    let picks = panel_indices(steps, panels);
    let scale = spillover_scale(oracle, predicted, &picks);
    let cell = (192 / n.max(m) as u32).max(1);
    let (pw, ph) = (m as u32 * cell, n as u32 * cell);
    let cols = picks.len().max(1) as u32;
    let bar_h = 12;
    let width = GAP + cols * (pw + GAP);
    let height = GAP + 2 * (ph + GAP) + bar_h + GAP;
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    for (c, &k) in picks.iter().enumerate() {
        let x0 = GAP + c as u32 * (pw + GAP);
        for (r, est) in [oracle, predicted].into_iter().enumerate() {
            let y0 = GAP + r as u32 * (ph + GAP);
            draw_map(&mut img, x0, y0, cell, est.tau_map.index_axis(ndarray::Axis(0), k), &oracle.region, scale);
        }
    }
    let bar_y = GAP + 2 * (ph + GAP);
    let bar_w = width - 2 * GAP;
    for x in 0..bar_w {
        let v = scale * (2.0 * x as f64 / (bar_w - 1).max(1) as f64 - 1.0);
        let colour = if x == bar_w / 2 { BLACK } else { diverging(v, scale) };
        for y in 0..bar_h {
            img.put_pixel(GAP + x, bar_y + y, colour);
        }
    }
    save(&img, path)?;
    Ok(HeatmapLayout {
        steps: picks.iter().map(|&k| oracle.first_step + k).collect(),
        scale,
    })
}

fn draw_line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), colour: Rgb<u8>) {
    let n = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for s in 0..=n {
        let t = s as f64 / n as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, colour);
        }
    }
}

fn plot_panel(img: &mut RgbImage, y_top: u32, w: u32, h: u32, oracle: &Array1<f64>, predicted: &Array1<f64>) {
    let finite = oracle.iter().chain(predicted.iter()).copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (-1.0, 1.0) };
    let pad = ((hi - lo) * 0.05).max(1e-9);
    let (lo, hi) = (lo - pad, hi + pad);
    let x0 = GAP as f64;
    let to_px = |k: usize, v: f64, len: usize| {
        let x = x0 + k as f64 * (w - 1) as f64 / (len.max(2) - 1) as f64;
        let y = y_top as f64 + (hi - v) / (hi - lo) * (h - 1) as f64;
        (x, y)
    };
    for x in 0..w {
        img.put_pixel(GAP + x, y_top, LIGHT);
        img.put_pixel(GAP + x, y_top + h - 1, LIGHT);
    }
    if lo < 0.0 && hi > 0.0 {
        let (_, zy) = to_px(0, 0.0, 2);
        for x in 0..w {
            img.put_pixel(GAP + x, zy as u32, GREY);
        }
    }
    for (series, colour) in [(oracle, BLACK), (predicted, RED)] {
        let len = series.len();
        for k in 1..len {
            if series[k - 1].is_finite() && series[k].is_finite() {
                draw_line(img, to_px(k - 1, series[k - 1], len), to_px(k, series[k], len), colour);
            }
        }
    }
}

/// DATE, IATE and LATE per-step curves, oracle in black and prediction in red.
pub fn effect_curves(oracle: &EffectEstimates, predicted: &EffectEstimates, path: &Path) -> Result<(), CliError> {
    let (w, h) = (720u32, 160u32);
    let pairs = [
        (oracle.date_series(), predicted.date_series()),
        (oracle.iate_series(), predicted.iate_series()),
        (oracle.late_series(), predicted.late_series()),
    ];
    let mut img = RgbImage::from_pixel(w + 2 * GAP, GAP + pairs.len() as u32 * (h + GAP), WHITE);
    for (p, (o, q)) in pairs.iter().enumerate() {
        plot_panel(&mut img, GAP + p as u32 * (h + GAP), w, h, o, q);
    }
    save(&img, path)
}

fn save(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    img.save(path).map_err(|source| CliError::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn estimates(scale: f64) -> EffectEstimates {
        let region = RegionMask::rect(6, 6, 2..4, 2..4).unwrap();
        let tau = Array3::from_shape_fn((5, 6, 6), |(t, i, j)| scale * (t as f64 + 1.0) * (i as f64 - j as f64));
        EffectEstimates::from_tau_map(tau, region, 1, 3).unwrap()
    }

    #[test]
    fn panels_cover_the_window() {
        assert_eq!(panel_indices(10, 4), vec![0, 3, 6, 9]);
        assert_eq!(panel_indices(3, 8), vec![0, 1, 2]);
        assert_eq!(panel_indices(7, 1), vec![3]);
        assert!(panel_indices(0, 3).is_empty());
    }

    #[test]
    fn colour_map_is_symmetric_and_saturates() {
        assert_eq!(diverging(0.0, 2.0), WHITE);
        assert_eq!(diverging(2.0, 2.0), RED);
        assert_eq!(diverging(-5.0, 2.0), BLUE);
        let (a, b) = (diverging(1.0, 2.0), diverging(-1.0, 2.0));
        assert!(a[0] > a[2] && b[2] > b[0]);
    }

    #[test]
    fn scale_ignores_treated_cells_and_is_shared() {
        let o = estimates(1.0);
        let p = estimates(2.0);
        // Largest untreated |i - j| on a 6x6 grid is 5; last panel has t + 1 = 5.
        assert_eq!(spillover_scale(&o, &p, &[4]), 2.0 * 5.0 * 5.0);
        assert_eq!(spillover_scale(&o, &o, &[0]), 5.0);
    }

    #[test]
    fn figures_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let o = estimates(1.0);
        let p = estimates(0.5);
        let heat = dir.path().join("h.png");
        let layout = spillover_heatmaps(&o, &p, 3, &heat).unwrap();
        assert_eq!(layout.steps, vec![3, 5, 7]);
        let img = image::open(&heat).unwrap().to_rgb8();
        let cell = 192 / 6;
        assert_eq!(img.width(), GAP + 3 * (6 * cell + GAP));
        // Treated cell of the first oracle panel is grey.
        assert_eq!(*img.get_pixel(GAP + 2 * cell + 1, GAP + 2 * cell + 1), GREY);
        let curves = dir.path().join("c.png");
        effect_curves(&o, &p, &curves).unwrap();
        assert!(image::open(&curves).is_ok());
    }
}
