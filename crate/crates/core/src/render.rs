//! Stick-figure rendering: a front and a side orthographic view per frame.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, Pose, Representation, SkeletonTopology};

const CHAIN_COLORS: [[u8; 3]; 5] = [[40, 40, 40], [200, 40, 40], [40, 90, 200], [220, 120, 20], [30, 150, 60]];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    /// Side length of each square view in pixels.
    pub view_size: u32,
    pub margin: u32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            view_size: 256,
            margin: 16,
        }
    }
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        for (ox, oy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x + ox, y + oy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Joint positions of every frame, root fixed at the origin.
pub fn joint_positions(frames: &Mat, topology: &SkeletonTopology) -> Result<Vec<Vec<[f64; 3]>>> {
    frames
        .rows()
        .into_iter()
        .map(|r| {
            let pose = Pose::new(r.to_vec(), Representation::ExpmapAngles)?;
            forward_kinematics(&pose, topology, [0.0; 3])
        })
        .collect()
}

/// Writes `frame_0001.png`, ... into `dir`, one image per row of `frames`.
/// All frames share one scale so motion is comparable across images.
pub fn render_sequence(
    frames: &Mat,
    topology: &SkeletonTopology,
    dir: &Path,
    cfg: &RenderConfig,
) -> Result<Vec<PathBuf>> {
    if frames.nrows() == 0 {
        return Err(Error::InvalidArgument("nothing to render".into()));
    }
    let positions = joint_positions(frames, topology)?;
    let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
    for p in positions.iter().flatten() {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(1e-9, f64::max);
    let usable = cfg.view_size.saturating_sub(2 * cfg.margin).max(1) as f64;
    let scale = usable / extent;
    let centre: Vec<f64> = (0..3).map(|a| 0.5 * (lo[a] + hi[a])).collect();
    let half = cfg.view_size as f64 / 2.0;
    // front view looks along z, side view along x; y is up
    let project = |p: &[f64; 3], horizontal: usize, offset: u32| -> (i64, i64) {
        let x = offset as f64 + half + (p[horizontal] - centre[horizontal]) * scale;
        let y = half - (p[1] - centre[1]) * scale;
        (x.round() as i64, y.round() as i64)
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let width = (frames.nrows() + 1).to_string().len().max(4);
    let mut out = Vec::with_capacity(positions.len());
    for (i, joints) in positions.iter().enumerate() {
        let mut img = RgbImage::from_pixel(2 * cfg.view_size, cfg.view_size, Rgb([255, 255, 255]));
        for k in 0..cfg.view_size {
            img.put_pixel(cfg.view_size, k, Rgb([180, 180, 180]));
        }
        for j in 0..topology.num_joints() {
            let Some(p) = topology.parent(j) else { continue };
            let color = Rgb(CHAIN_COLORS[topology.chain_of(j).index()]);
            for (horizontal, offset) in [(0, 0), (2, cfg.view_size)] {
                draw_line(&mut img, project(&joints[p], horizontal, offset), project(&joints[j], horizontal, offset), color);
            }
        }
        let path = dir.join(format!("frame_{:0width$}.png", i + 1));
        img.save(&path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        out.push(path);
    }
    Ok(out)
}
