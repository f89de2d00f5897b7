//! Dataset directory layout:
//!
//! ```text
//! object_<id>/
//!   block_0/images/0000.png ...
//!   block_0/transforms.json      per-image 4x4 camera-to-world + intrinsics
//!   block_1/...
//!   gt_transform.json            4x4 inter-block ground truth (block0 -> block1)
//! ```
//!
//! All JSON numbers are decimal floats; matrices are 16 row-major values.

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{BlockDataset, TriMesh};
use crate::geom::{CameraPose, Intrinsics, RigidTransform};
use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
struct FrameJson {
    file_path: String,
    c2w: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TransformsJson {
    intrinsics: Intrinsics,
    frames: Vec<FrameJson>,
}

#[derive(Serialize, Deserialize)]
struct GtJson {
    block0_to_block1: Vec<f64>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn image_to_u8(img: &Array3<f32>) -> image::RgbImage {
    let (h, w, _) = img.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (img[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn image_from_u8(img: &image::RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

/// Writes one block directory (images + transforms.json).
pub fn write_block(dir: &Path, block: &BlockDataset) -> Result<()> {
    block.validate()?;
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir)
        .map_err(|e| Error::io(images_dir.display().to_string(), e))?;
    let mut frames = Vec::with_capacity(block.images.len());
    for (i, (img, pose)) in block.images.iter().zip(&block.poses).enumerate() {
        let name = format!("{i:04}.png");
        let path = images_dir.join(&name);
        image_to_u8(img).save(&path)?;
        frames.push(FrameJson {
            file_path: format!("images/{name}"),
            c2w: pose.to_row_major().to_vec(),
        });
    }
    write_json(&dir.join("transforms.json"), &TransformsJson { intrinsics: block.intrinsics, frames })
}

/// Loads a block directory. The shared-frame transform is not persisted, so
/// the returned block carries an identity `gt_transform`; the inter-block
/// ground truth lives at the object level.
pub fn load_block(dir: &Path) -> Result<BlockDataset> {
    let tj: TransformsJson = read_json(&dir.join("transforms.json"))?;
    let mut images = Vec::with_capacity(tj.frames.len());
    let mut poses = Vec::with_capacity(tj.frames.len());
    for frame in &tj.frames {
        let path = dir.join(&frame.file_path);
        let img = image::open(&path)?.to_rgb8();
        images.push(image_from_u8(&img));
        poses.push(CameraPose::from_row_major(&frame.c2w)?);
    }
    let block =
        BlockDataset { images, poses, intrinsics: tj.intrinsics, gt_transform: RigidTransform::identity() };
    block.validate()?;
    Ok(block)
}

/// Writes a full object directory: two blocks plus the inter-block transform
/// mapping block-0 coordinates into block-1 coordinates.
pub fn write_object(
    dir: &Path,
    blocks: &[BlockDataset; 2],
    block0_to_block1: &RigidTransform,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    write_block(&dir.join("block_0"), &blocks[0])?;
    write_block(&dir.join("block_1"), &blocks[1])?;
    write_json(
        &dir.join("gt_transform.json"),
        &GtJson { block0_to_block1: block0_to_block1.to_row_major().to_vec() },
    )
}

pub fn load_object(dir: &Path) -> Result<([BlockDataset; 2], RigidTransform)> {
    let b0 = load_block(&dir.join("block_0"))?;
    let b1 = load_block(&dir.join("block_1"))?;
    let gt: GtJson = read_json(&dir.join("gt_transform.json"))?;
    Ok(([b0, b1], RigidTransform::from_row_major(&gt.block0_to_block1)?))
}

/// Loads a small OBJ subset: `v x y z [r g b]` vertices and triangular
/// `f` faces (1-based indices, `i`, `i/..` and `i//..` forms).
pub fn load_obj(path: &Path) -> Result<TriMesh> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut mesh = TriMesh::default();
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let nums: Vec<f64> = parts
                    .map(|p| {
                        p.parse::<f64>().map_err(|_| {
                            Error::Format(format!("bad vertex on line {}", lineno + 1))
                        })
                    })
                    .collect::<Result<_>>()?;
                if nums.len() != 3 && nums.len() != 6 {
                    return Err(Error::Format(format!("vertex on line {} needs 3 or 6 numbers", lineno + 1)));
                }
                mesh.vertices.push([nums[0], nums[1], nums[2]]);
                if nums.len() == 6 {
                    mesh.colors.push([nums[3], nums[4], nums[5]]);
                }
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|p| {
                        let first = p.split('/').next().unwrap_or(p);
                        first
                            .parse::<usize>()
                            .map_err(|_| Error::Format(format!("bad face on line {}", lineno + 1)))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(Error::Format(format!("face on line {} needs >= 3 vertices", lineno + 1)));
                }
                // fan triangulation for polygons
                for k in 1..idx.len() - 1 {
                    let tri = [idx[0] - 1, idx[k] - 1, idx[k + 1] - 1];
                    if tri.iter().any(|&i| i >= mesh.vertices.len()) {
                        return Err(Error::Format(format!(
                            "face index out of range on line {}",
                            lineno + 1
                        )));
                    }
                    mesh.faces.push(tri);
                }
            }
            _ => {}
        }
    }
    if !mesh.colors.is_empty() && mesh.colors.len() != mesh.vertices.len() {
        return Err(Error::Format("partial vertex colors".into()));
    }
    Ok(mesh)
}
