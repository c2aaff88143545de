//! PNG panels of a change-map series.

use image::{GrayImage, Luma};
use ndarray::Array2;
use sitscd::data::GroundTruth;
use sitscd::training::ChangeMapSeries;

const GAP: u32 = 2;
const BACKGROUND: u8 = 96;

/// One column per pair; rows are the binary maps, the change probabilities
/// and, when present, the ground truth.
pub fn render_series(series: &ChangeMapSeries, truth: Option<&GroundTruth>) -> GrayImage {
    let pairs = series.len() as u32;
    let (h, w) = series.maps.first().map_or((0, 0), |m| m.dim());
    let (h, w) = (h as u32, w as u32);
    let rows = if truth.is_some() { 3 } else { 2 };
    let mut img = GrayImage::from_pixel(
        pairs * (w + GAP) + GAP,
        rows * (h + GAP) + GAP,
        Luma([BACKGROUND]),
    );
    let mut blit = |row: u32, col: u32, tile: &Array2<u8>| {
        let (x0, y0) = (GAP + col * (w + GAP), GAP + row * (h + GAP));
        for ((i, j), &v) in tile.indexed_iter() {
            img.put_pixel(x0 + j as u32, y0 + i as u32, Luma([v]));
        }
    };
    for (k, (m, p)) in series.maps.iter().zip(&series.probabilities).enumerate() {
        let k = k as u32;
        blit(0, k, &m.mapv(|v| if v != 0 { 255 } else { 0 }));
        blit(1, k, &p.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        if let Some(map) = truth.and_then(|t| t.maps.get(&(k as usize + 1))) {
            blit(2, k, &map.mapv(|v| if v != 0 { 255 } else { 0 }));
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panel_layout() {
        let series = ChangeMapSeries {
            scene_id: "s".into(),
            maps: vec![Array2::from_elem((4, 5), 1), Array2::zeros((4, 5))],
            probabilities: vec![Array2::from_elem((4, 5), 0.5), Array2::zeros((4, 5))],
        };
        let img = render_series(&series, None);
        assert_eq!(img.dimensions(), (2 * 7 + 2, 2 * 6 + 2));
        assert_eq!(img.get_pixel(GAP, GAP).0, [255]);
        assert_eq!(img.get_pixel(GAP, GAP + 6).0, [128]);
        assert_eq!(img.get_pixel(GAP + 7, GAP).0, [0]);
        assert_eq!(img.get_pixel(0, 0).0, [BACKGROUND]);
    }
}
