//! Occupancy rasters of mapped macro tiles.

use std::io::Write;

use super::MappingPlan;
use crate::error::Result;

/// RGB image, row-major, one pixel per macro cell (row = wordline, column = bitline).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

pub const BLANK: [u8; 3] = [255, 255, 255];

impl Raster {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    /// Binary PPM (P6).
    pub fn write_ppm(&self, w: &mut impl Write) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        for p in &self.pixels {
            w.write_all(p)?;
        }
        Ok(())
    }
}

/// Fixed palette: evenly spread hues, saturated enough to tell neighbours apart.
pub fn layer_color(i: usize) -> [u8; 3] {
    let h = (i as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let to = |v: f64| (40.0 + v * 190.0).round() as u8;
    [to(r), to(g), to(b)]
}

/// One raster per macro tile; a column is painted from the top down to its
/// used wordline count in the color of its layer.
pub fn render_mapping(plan: &MappingPlan) -> Vec<Raster> {
    let (w, h) = (plan.macro_cfg.bitlines_per_macro(), plan.macro_cfg.wordlines());
    let mut tiles: Vec<Raster> = (0..plan.tile_count())
        .map(|_| Raster {
            width: w,
            height: h,
            pixels: vec![BLANK; w * h],
        })
        .collect();
    for (li, l) in plan.layers.iter().enumerate() {
        let color = layer_color(li);
        for c in 0..l.columns() {
            let g = l.first_column + c;
            let t = &mut tiles[g / w];
            let x = g % w;
            for y in 0..l.segmentation.rows_of_column(c) {
                t.pixels[y * w + x] = color;
            }
        }
    }
    tiles
}
