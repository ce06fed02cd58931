//! PNG contact sheets with tiny bitmap labels.

use std::path::Path;

use crate::error::Result;
use crate::image::ImageTensor;
use crate::lowpass::resize;

pub const GLYPH_WIDTH: usize = 3;
pub const GLYPH_HEIGHT: usize = 5;
const GAP: usize = 2;

fn glyph(c: char) -> [u8; GLYPH_HEIGHT] {
    match c.to_ascii_uppercase() {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        'N' => [0b101, 0b111, 0b111, 0b111, 0b101],
        'T' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'W' => [0b101, 0b101, 0b111, 0b111, 0b101],
        '=' => [0b000, 0b111, 0b000, 0b111, 0b000],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        ':' => [0b000, 0b010, 0b000, 0b010, 0b000],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        _ => [0; GLYPH_HEIGHT],
    }
}

/// Writes `text` into an RGB buffer of width `width` at `(top, left)`;
/// characters past the right edge are dropped.
pub fn draw_label(buf: &mut [f64], width: usize, top: usize, left: usize, text: &str, value: f64) {
    let height = buf.len() / (width * 3);
    for (i, c) in text.chars().enumerate() {
        let x0 = left + i * (GLYPH_WIDTH + 1);
        if x0 + GLYPH_WIDTH > width {
            break;
        }
        for (dy, bits) in glyph(c).iter().enumerate() {
            for dx in 0..GLYPH_WIDTH {
                let (y, x) = (top + dy, x0 + dx);
                if y < height && bits & (1 << (GLYPH_WIDTH - 1 - dx)) != 0 {
                    let at = (y * width + x) * 3;
                    buf[at..at + 3].fill(value);
                }
            }
        }
    }
}

/// A grid of equally sized tiles, each with a label strip above it.
pub struct ContactSheet {
    rows: usize,
    cols: usize,
    tile: usize,
    width: usize,
    height: usize,
    buf: Vec<f64>,
}

impl ContactSheet {
    pub fn new(rows: usize, cols: usize, tile: usize) -> Self {
        let label = GLYPH_HEIGHT + 2;
        let width = GAP + cols * (tile + GAP);
        let height = GAP + rows * (tile + label + GAP);
        Self {
            rows,
            cols,
            tile,
            width,
            height,
            buf: vec![-1.0; width * height * 3],
        }
    }

    pub fn place(&mut self, row: usize, col: usize, image: &ImageTensor, label: &str) {
        assert!(row < self.rows && col < self.cols, "tile ({row}, {col}) outside the sheet");
        let img = if (image.height(), image.width()) == (self.tile, self.tile) {
            image.clone()
        } else {
            resize(image, self.tile, self.tile).clamped()
        };
        let label_h = GLYPH_HEIGHT + 2;
        let top = GAP + row * (self.tile + label_h + GAP);
        let left = GAP + col * (self.tile + GAP);
        draw_label(&mut self.buf, self.width, top + 1, left, label, 1.0);
        let c = img.channels();
        for y in 0..self.tile {
            for x in 0..self.tile {
                let at = ((top + label_h + y) * self.width + left + x) * 3;
                for ch in 0..3 {
                    self.buf[at + ch] = img.get(y, x, if c == 3 { ch } else { 0 });
                }
            }
        }
    }

    pub fn image(&self) -> ImageTensor {
        ImageTensor::from_vec(self.height, self.width, 3, self.buf.clone()).expect("sheet values are finite")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.image().save_png(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_and_tiles_land_where_expected() {
        let mut sheet = ContactSheet::new(1, 2, 8);
        sheet.place(0, 0, &ImageTensor::filled(8, 8, 3, 0.5), "N=4");
        sheet.place(0, 1, &ImageTensor::filled(4, 4, 1, 0.25), "T=300");
        let img = sheet.image();
        let label_h = GLYPH_HEIGHT + 2;
        assert_eq!(img.shape(), (GAP + 8 + label_h + GAP, GAP + 2 * (8 + GAP), 3));
        assert_eq!(img.get(GAP + label_h, GAP, 0), 0.5);
        assert_eq!(img.get(GAP + label_h + 3, GAP + 8 + GAP + 3, 2), 0.25);
        // Top-left pixel of the `N` glyph is set, the one right of it is not.
        assert_eq!(img.get(GAP + 1, GAP, 0), 1.0);
        assert_eq!(img.get(GAP + 1, GAP + 1, 0), -1.0);
    }
}
