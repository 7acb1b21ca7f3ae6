//! Static PNG figures: similarity heatmaps, selection masks, label maps.

use std::path::Path;

use crate::error::Result;
use crate::image::Image;

const MARKER: [f32; 3] = [1.0, 0.0, 0.0];

/// Grayscale heatmap of `clamp(map, 0, 1)`, `scale` pixels per patch, with a
/// red cross through the center of the query patch.
pub fn heatmap_image(map: &[f64], grid: (usize, usize), scale: usize, query: Option<usize>) -> Image {
    let (rows, cols) = grid;
    let mut img = Image::from_fn(cols * scale, rows * scale, |x, y| {
        let v = map[(y / scale) * cols + x / scale].clamp(0.0, 1.0) as f32;
        [v, v, v]
    });
    if let Some(q) = query {
        let (qr, qc) = (q / cols, q % cols);
        let (cx, cy) = (qc * scale + scale / 2, qr * scale + scale / 2);
        let arm = (scale / 2).max(1);
        for d in 0..=arm {
            for (x, y) in [(cx + d, cy), (cx.wrapping_sub(d), cy), (cx, cy + d), (cx, cy.wrapping_sub(d))] {
                if x < img.width && y < img.height && (x != cx || y != cy || d == 0) {
                    img.set(x, y, MARKER);
                }
            }
        }
    }
    img
}

/// White where selected, black elsewhere.
pub fn mask_image(mask: &[bool], grid: (usize, usize), scale: usize) -> Image {
    let cols = grid.1;
    Image::from_fn(cols * scale, grid.0 * scale, |x, y| {
        let v = if mask[(y / scale) * cols + x / scale] { 1.0 } else { 0.0 };
        [v, v, v]
    })
}

const PALETTE: [[f32; 3]; 12] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.60, 0.90],
    [0.20, 0.80, 0.20],
    [0.95, 0.75, 0.10],
    [0.60, 0.20, 0.80],
    [0.10, 0.80, 0.75],
    [0.95, 0.45, 0.70],
    [0.50, 0.35, 0.15],
    [0.55, 0.55, 0.55],
    [0.05, 0.20, 0.50],
    [0.70, 0.85, 0.40],
    [1.00, 0.55, 0.20],
];

/// One flat color per cluster label.
pub fn label_image(labels: &[usize], grid: (usize, usize), scale: usize) -> Image {
    let cols = grid.1;
    Image::from_fn(cols * scale, grid.0 * scale, |x, y| {
        PALETTE[labels[(y / scale) * cols + x / scale] % PALETTE.len()]
    })
}

pub fn save(img: &Image, path: &Path) -> Result<()> {
    img.save_png(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_cell_is_brightest_and_marked() {
        let map = [0.2, 1.0, 0.4, 0.1];
        let img = heatmap_image(&map, (2, 2), 8, Some(1));
        assert_eq!(img.get(12, 4), MARKER);
        // Off-cross pixels of the query cell sit at full intensity.
        assert_eq!(img.get(9, 1), [1.0, 1.0, 1.0]);
        assert_eq!(img.get(1, 1), [0.2, 0.2, 0.2]);
    }
}
