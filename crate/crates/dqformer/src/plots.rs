//! BEV heatmap images: thing-center probabilities drawn over the stuff map.

use std::path::{Path, PathBuf};

use dqformer_core::query::BevMaps;
use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

/// Output images are upscaled to at least this many pixels per side.
const MIN_SIDE: usize = 256;

const STUFF_COLORS: [[f64; 3]; 6] = [
    [0.45, 0.35, 0.25],
    [0.35, 0.45, 0.75],
    [0.20, 0.60, 0.25],
    [0.60, 0.60, 0.20],
    [0.55, 0.30, 0.60],
    [0.30, 0.60, 0.60],
];

/// Color of one BEV cell: the most likely stuff class tinted by its
/// probability, with the strongest thing-center response added in white.
fn cell_color(maps: &BevMaps, pixel: usize) -> Rgb<u8> {
    let stuff = maps.stuff.row(pixel);
    let (best, p) = stuff
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |a, (k, v)| if v > a.1 { (k, v) } else { a });
    let heat = maps.center.row(pixel).iter().copied().fold(0.0, f64::max);
    let base = STUFF_COLORS[best % STUFF_COLORS.len()];
    let px = |c: f64| ((c * p.clamp(0.0, 1.0) * (1.0 - heat) + heat).clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([px(base[0]), px(base[1]), px(base[2])])
}

/// Renders one level; rows of the map run down the image.
pub fn render_level(maps: &BevMaps) -> RgbImage {
    let scale = MIN_SIDE.div_ceil(maps.height.max(maps.width).max(1)).max(1);
    let (h, w) = (maps.height * scale, maps.width * scale);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize / scale, x as usize / scale);
        cell_color(maps, r * maps.width + c)
    })
}

/// Writes `<dir>/<scene>_level<l>.png` for every level; returns the paths.
pub fn write_scene_heatmaps(maps: &[BevMaps], dir: &Path, scene: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    maps.iter()
        .map(|m| {
            let path = dir.join(format!("{scene}_level{}.png", m.level));
            render_level(m)
                .save(&path)
                .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
            Ok(path)
        })
        .collect()
}
