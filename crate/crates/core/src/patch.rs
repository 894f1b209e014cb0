use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `height × width × channels` image, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::Invalid(format!(
                "{} pixels for a {height}x{width}x{channels} image",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[self.index(y, x, c)]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.pixels[i] = v;
    }
}

/// Non-overlapping `P × P` patches in row-major patch order, each flattened
/// as `(dy, dx, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patch: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub patches: Vec<Vec<f64>>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// All patches concatenated, `N · P²C` values.
    pub fn flat(&self) -> Vec<f64> {
        self.patches.concat()
    }
}

pub fn patchify(image: &Image, patch: usize) -> Result<PatchGrid> {
    let (h, w, c) = (image.height, image.width, image.channels);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::PatchSize {
            height: h,
            width: w,
            patch,
        });
    }
    let (rows, cols) = (h / patch, w / patch);
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for col in 0..cols {
            let mut v = Vec::with_capacity(patch * patch * c);
            for dy in 0..patch {
                let start = image.index(r * patch + dy, col * patch, 0);
                v.extend_from_slice(&image.pixels[start..start + patch * c]);
            }
            patches.push(v);
        }
    }
    Ok(PatchGrid {
        patch,
        rows,
        cols,
        channels: c,
        patches,
    })
}

pub fn unpatchify(grid: &PatchGrid) -> Image {
    let p = grid.patch;
    let c = grid.channels;
    let mut img = Image::filled(grid.rows * p, grid.cols * p, c, 0.0);
    for (k, v) in grid.patches.iter().enumerate() {
        let (r, col) = (k / grid.cols, k % grid.cols);
        for dy in 0..p {
            let start = img.index(r * p + dy, col * p, 0);
            img.pixels[start..start + p * c].copy_from_slice(&v[dy * p * c..(dy + 1) * p * c]);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_resolution_gives_193_positions() {
        let img = Image::filled(384, 128, 3, 0.0);
        let grid = patchify(&img, 16).unwrap();
        assert_eq!(grid.len(), 192);
        assert_eq!(grid.len() + 1, 193);
    }

    #[test]
    fn toy_resolution_gives_eight_patches() {
        let grid = patchify(&Image::filled(32, 16, 3, 0.0), 8).unwrap();
        assert_eq!(grid.len(), 8);
        assert_eq!(grid.patch_dim(), 192);
    }

    #[test]
    fn non_divisible_rejected() {
        assert!(matches!(
            patchify(&Image::filled(30, 16, 3, 0.0), 8),
            Err(Error::PatchSize { .. })
        ));
    }

    proptest! {
        #[test]
        fn patchify_round_trips(rows in 1usize..4, cols in 1usize..4, p in 1usize..5, c in 1usize..4, seed in 0u64..1000) {
            let (h, w) = (rows * p, cols * p);
            let pixels = (0..h * w * c).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0).collect();
            let img = Image::new(h, w, c, pixels).unwrap();
            let grid = patchify(&img, p).unwrap();
            prop_assert_eq!(grid.len() * p * p, h * w);
            prop_assert_eq!(unpatchify(&grid), img);
        }
    }
}
