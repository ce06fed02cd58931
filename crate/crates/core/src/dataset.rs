//! Procedural face-like images and image-directory loading.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::lowpass::resize;
use crate::rng::substream;

const SUPERSAMPLE: usize = 4;

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    color: [f64; 3],
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

fn color<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

/// One anti-aliased `size x size` RGB face: background, head ellipse, hair
/// cap, two eyes and a mouth, with randomized geometry and colours.
pub fn face<R: Rng + ?Sized>(size: usize, rng: &mut R) -> ImageTensor {
    let s = size as f64;
    let background = color(rng, -0.9, 0.6);
    let skin_tone = rng.random_range(-0.2..0.7);
    let skin = [
        skin_tone + rng.random_range(0.1..0.3),
        skin_tone,
        skin_tone - rng.random_range(0.1..0.3),
    ];
    let head = Ellipse {
        cy: s * rng.random_range(0.48..0.56),
        cx: s * rng.random_range(0.45..0.55),
        ry: s * rng.random_range(0.32..0.4),
        rx: s * rng.random_range(0.24..0.32),
        color: skin,
    };
    let hair = Ellipse {
        cy: head.cy - head.ry * rng.random_range(0.45..0.7),
        cx: head.cx,
        ry: head.ry * rng.random_range(0.45..0.65),
        rx: head.rx * rng.random_range(1.0..1.15),
        color: color(rng, -1.0, 0.2),
    };
    let eye_dy = head.ry * rng.random_range(-0.2..0.0);
    let eye_dx = head.rx * rng.random_range(0.35..0.5);
    let eye_r = s * rng.random_range(0.035..0.06);
    let eye_color = color(rng, -1.0, -0.5);
    let eyes = [-1.0, 1.0].map(|side| Ellipse {
        cy: head.cy + eye_dy,
        cx: head.cx + side * eye_dx,
        ry: eye_r,
        rx: eye_r * 1.3,
        color: eye_color,
    });
    let mouth = Ellipse {
        cy: head.cy + head.ry * rng.random_range(0.4..0.55),
        cx: head.cx,
        ry: s * rng.random_range(0.025..0.05),
        rx: head.rx * rng.random_range(0.3..0.55),
        color: [rng.random_range(0.2..0.8), rng.random_range(-0.8..-0.3), rng.random_range(-0.8..-0.3)],
    };

    let shade = |y: f64, x: f64| -> [f64; 3] {
        let layers = [&mouth, &eyes[0], &eyes[1]];
        if head.contains(y, x) {
            if let Some(e) = layers.iter().find(|e| e.contains(y, x)) {
                return e.color;
            }
            if hair.contains(y, x) && y < head.cy {
                return hair.color;
            }
            return head.color;
        }
        if hair.contains(y, x) {
            return hair.color;
        }
        background
    };

    let mut values = Vec::with_capacity(size * size * 3);
    let step = 1.0 / SUPERSAMPLE as f64;
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let c = shade(py as f64 + (sy as f64 + 0.5) * step, px as f64 + (sx as f64 + 0.5) * step);
                    for ch in 0..3 {
                        acc[ch] += c[ch];
                    }
                }
            }
            let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
            values.extend(acc.iter().map(|v| (v / n).clamp(-1.0, 1.0)));
        }
    }
    ImageTensor::from_vec(size, size, 3, values).expect("generator emits finite values")
}

/// `count` faces; image `i` depends only on `(seed, i)`.
pub fn synthetic_faces(count: usize, size: usize, seed: u64) -> Vec<ImageTensor> {
    (0..count)
        .map(|i| face(size, &mut substream(seed, i as u64)))
        .collect()
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        if path.is_file() && IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every image in `dir`, resizing to `size x size` when given.
pub fn load_dir(dir: impl AsRef<Path>, size: Option<usize>) -> Result<Vec<(String, ImageTensor)>> {
    let dir = dir.as_ref();
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::Empty(format!("no images found in {}", dir.display())));
    }
    files
        .iter()
        .map(|path| {
            let img = ImageTensor::load(path)?;
            let img = match size {
                Some(s) if img.height() != s || img.width() != s => resize(&img, s, s),
                _ => img,
            };
            Ok((file_name(path), img))
        })
        .collect()
}

pub(crate) fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Writes `images` as `face_00000.png`, ... into `dir`.
pub fn write_faces(images: &[ImageTensor], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let path = dir.join(format!("face_{i:05}.png"));
            img.save_png(&path)?;
            Ok(path)
        })
        .collect()
}
