//! Match visualization: the two rasters side by side with keypoint marks
//! and match lines, correct matches in green and incorrect ones in red
//! (yellow when no ground truth is available).

use std::path::Path;

use bayernet::bayer::BayerImage;
use bayernet::evalmatch::Keypoint;
use bayernet::{Error, Result};

pub const GREEN: [u8; 3] = [0, 200, 0];
pub const RED: [u8; 3] = [220, 0, 0];
pub const YELLOW: [u8; 3] = [230, 200, 0];

/// A match line from a keypoint in the left image to one in the right.
pub struct MatchLine {
    pub from: (usize, usize),
    pub to: (usize, usize),
    pub color: [u8; 3],
}

pub struct Panel {
    width: usize,
    height: usize,
    offset: usize,
    pixels: Vec<u8>,
}

impl Panel {
    /// Places the two rasters side by side (gray levels from the raw
    /// values), padding the shorter image with black.
    pub fn new(a: &BayerImage, b: &BayerImage) -> Self {
        let height = a.height.max(b.height);
        let offset = a.width;
        let width = a.width + b.width;
        let mut pixels = vec![0u8; 3 * width * height];
        let mut blit = |img: &BayerImage, x0: usize| {
            for y in 0..img.height {
                for x in 0..img.width {
                    let v = (img.data[y * img.width + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                    let base = 3 * (y * width + x0 + x);
                    pixels[base..base + 3].fill(v);
                }
            }
        };
        blit(a, 0);
        blit(b, offset);
        Self { width, height, offset, pixels }
    }

    fn put(&mut self, x: isize, y: isize, color: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            return;
        }
        let base = 3 * (y as usize * self.width + x as usize);
        self.pixels[base..base + 3].copy_from_slice(&color);
    }

    /// 3x3 cross mark.
    fn mark(&mut self, x: usize, y: usize, color: [u8; 3]) {
        let (x, y) = (x as isize, y as isize);
        for d in -1..=1 {
            self.put(x + d, y, color);
            self.put(x, y + d, color);
        }
    }

    fn line(&mut self, from: (isize, isize), to: (isize, isize), color: [u8; 3]) {
        // Bresenham over the longer axis.
        let (dx, dy) = (to.0 - from.0, to.1 - from.1);
        let steps = dx.abs().max(dy.abs()).max(1);
        for i in 0..=steps {
            let x = from.0 + dx * i / steps;
            let y = from.1 + dy * i / steps;
            self.put(x, y, color);
        }
    }

    pub fn draw_keypoints(&mut self, left: &[Keypoint], right: &[Keypoint], color: [u8; 3]) {
        for kp in left {
            self.mark(kp.x, kp.y, color);
        }
        for kp in right {
            self.mark(kp.x + self.offset, kp.y, color);
        }
    }

    pub fn draw_matches(&mut self, lines: &[MatchLine]) {
        for line in lines {
            self.line(
                (line.from.0 as isize, line.from.1 as isize),
                ((line.to.0 + self.offset) as isize, line.to.1 as isize),
                line.color,
            );
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("pixel buffer matches dimensions");
        img.save(path).map_err(|e| Error::Data(format!("cannot write image {}: {e}", path.display())))
    }
}
