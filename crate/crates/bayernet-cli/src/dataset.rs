//! Scene-directory dataset loading. A dataset root holds one directory per
//! scene; each scene holds numbered images `1.png .. n.png` and plain-text
//! homography files `H_1_k` mapping image 1 coordinates into image k.

use std::fs;
use std::path::{Path, PathBuf};

use bayernet::bayer::RgbImage;
use bayernet::geometry::Homography;
use bayernet::{Error, Result};

/// One evaluation scene: the reference image, its partners, and the
/// ground-truth homographies from image 1 into each partner.
pub struct Scene {
    pub name: String,
    pub reference: RgbImage,
    /// `(image index k, image, H_1_k)` for k = 2..=n.
    pub partners: Vec<(usize, RgbImage, Homography)>,
}

/// Loads an 8-bit PNG as RGB planes scaled to [0, 1], cropping odd
/// dimensions by one pixel so the Bayer quad tiling is well defined.
pub fn load_png_rgb(path: &Path) -> Result<RgbImage> {
    let decoded = image::open(path)
        .map_err(|e| Error::Data(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (cw, ch) = (w - w % 2, h - h % 2);
    if cw == 0 || ch == 0 {
        return Err(Error::Data(format!("image {} is too small to mosaic", path.display())));
    }
    let mut data = vec![0f32; 3 * ch * cw];
    for y in 0..ch {
        for x in 0..cw {
            let px = decoded.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                data[c * ch * cw + y * cw + x] = f32::from(px.0[c]) / 255.0;
            }
        }
    }
    Ok(RgbImage { height: ch, width: cw, data })
}

/// Loads one scene directory. Returns an error when the layout is
/// incomplete or any homography file is malformed; the caller decides
/// whether to skip the scene or abort.
pub fn load_scene(dir: &Path) -> Result<Scene> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let reference = load_png_rgb(&dir.join("1.png"))?;
    let mut partners = Vec::new();
    for k in 2.. {
        let image_path = dir.join(format!("{k}.png"));
        if !image_path.exists() {
            break;
        }
        let h_path = dir.join(format!("H_1_{k}"));
        let h_text = fs::read_to_string(&h_path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", h_path.display())))?;
        let homography = Homography::parse(&h_text)?;
        partners.push((k, load_png_rgb(&image_path)?, homography));
    }
    if partners.is_empty() {
        return Err(Error::Data(format!("scene {name} has no image pairs (needs 2.png and H_1_2)")));
    }
    Ok(Scene { name, reference, partners })
}

/// Lists scene subdirectories of the dataset root in name order.
pub fn scene_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::Data(format!("cannot read dataset directory {}: {e}", root.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no scene directories under {}", root.display())));
    }
    Ok(dirs)
}
