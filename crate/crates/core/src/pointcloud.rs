//! Pinhole deprojection of depth frames and the fruit / branch / other
//! coloring scheme, exported as binary little-endian PLY.
//!
//! Camera frame: x right, y down, z forward.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::RgbImage;

use crate::config::CameraConfig;
use crate::data::DepthImage;
use crate::decode::Detection;
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Meters per depth unit.
    pub depth_scale: f64,
}

impl From<&CameraConfig> for Intrinsics {
    fn from(c: &CameraConfig) -> Self {
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            depth_scale: c.depth_scale,
        }
    }
}

impl Intrinsics {
    pub fn deproject_pixel(&self, u: f64, v: f64, d: f64) -> [f64; 3] {
        let z = d * self.depth_scale;
        [(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z]
    }

    /// Inverse of [`Intrinsics::deproject_pixel`]: `(u, v, depth units)`.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64, f64) {
        (
            p[0] * self.fx / p[2] + self.cx,
            p[1] * self.fy / p[2] + self.cy,
            p[2] / self.depth_scale,
        )
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct SourcePoint {
    pub xyz: [f64; 3],
    pub u: usize,
    pub v: usize,
}

/// Every `stride`-th pixel in both directions with nonzero depth.
pub fn deproject(depth: &DepthImage, intr: &Intrinsics, stride: usize) -> Vec<SourcePoint> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for v in (0..depth.height()).step_by(stride) {
        for u in (0..depth.width()).step_by(stride) {
            let d = depth.get_pixel(u, v).0[0];
            if d > 0 {
                out.push(SourcePoint {
                    xyz: intr.deproject_pixel(u as f64, v as f64, d as f64),
                    u: u as usize,
                    v: v as usize,
                });
            }
        }
    }
    out
}

pub const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
];
pub const BRANCH_COLOR: [u8; 3] = [139, 69, 19];
pub const OTHER_COLOR: [u8; 3] = [0, 0, 0];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ColoredPointCloud {
    pub points: Vec<[f32; 3]>,
    pub colors: Vec<[u8; 3]>,
}

impl ColoredPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// How branch pixels are colored.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BranchColoring {
    Unified,
    /// Keep the camera color of branch pixels.
    Original,
}

/// Color per source pixel: fruit `i` (first rendered mask containing the
/// pixel) → `PALETTE[i % 12]`; else branch → brown or the original color;
/// else black.
pub fn pixel_color(
    u: usize,
    v: usize,
    dets: &[Detection],
    branch_map: &[u8],
    width: usize,
    branch: BranchColoring,
    rgb: Option<&RgbImage>,
) -> [u8; 3] {
    for (i, d) in dets.iter().enumerate() {
        if let Some(m) = &d.rendered_mask {
            if u < m.width && v < m.height && m.get(u, v) {
                return PALETTE[i % PALETTE.len()];
            }
        }
    }
    if branch_map.get(v * width + u).copied().unwrap_or(0) != 0 {
        return match (branch, rgb) {
            (BranchColoring::Original, Some(img)) => img.get_pixel(u as u32, v as u32).0,
            _ => BRANCH_COLOR,
        };
    }
    OTHER_COLOR
}

pub fn colorize(
    points: &[SourcePoint],
    dets: &[Detection],
    branch_map: &[u8],
    width: usize,
    branch: BranchColoring,
    rgb: Option<&RgbImage>,
) -> ColoredPointCloud {
    ColoredPointCloud {
        points: points.iter().map(|p| p.xyz.map(|c| c as f32)).collect(),
        colors: points
            .iter()
            .map(|p| pixel_color(p.u, p.v, dets, branch_map, width, branch, rgb))
            .collect(),
    }
}

/// The point-cloud color scheme applied in 2D: fruit and branch pixels
/// are blended over the image with weight `alpha`, the rest is kept.
pub fn overlay(rgb: &RgbImage, dets: &[Detection], branch_map: &[u8], alpha: f32) -> RgbImage {
    let width = rgb.width() as usize;
    let mut out = rgb.clone();
    for (u, v, px) in out.enumerate_pixels_mut() {
        let c = pixel_color(u as usize, v as usize, dets, branch_map, width, BranchColoring::Unified, None);
        if c != OTHER_COLOR {
            for k in 0..3 {
                px[k] = (px[k] as f32 * (1.0 - alpha) + c[k] as f32 * alpha).round() as u8;
            }
        }
    }
    out
}

pub fn write_ply_to<W: Write>(cloud: &ColoredPointCloud, mut out: W) -> std::io::Result<()> {
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    )?;
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        for v in p {
            out.write_f32::<LittleEndian>(*v)?;
        }
        out.write_all(c)?;
    }
    out.flush()
}

pub fn write_ply(cloud: &ColoredPointCloud, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_ply_to(cloud, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

const EXPECTED_PROPERTIES: [&str; 6] = [
    "property float x",
    "property float y",
    "property float z",
    "property uchar red",
    "property uchar green",
    "property uchar blue",
];

/// Read back files in exactly the layout [`write_ply`] produces.
pub fn read_ply(path: &Path) -> Result<ColoredPointCloud> {
    let ctx = path.display().to_string();
    let bad = |m: &str| Error::format(&ctx, m.to_string());
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut line = String::new();
    let mut next = |r: &mut BufReader<File>| -> Result<String> {
        line.clear();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        Ok(line.trim_end().to_string())
    };
    if next(&mut r)? != "ply" || next(&mut r)? != "format binary_little_endian 1.0" {
        return Err(bad("not a binary little-endian PLY"));
    }
    let count: usize = next(&mut r)?
        .strip_prefix("element vertex ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| bad("missing vertex count"))?;
    for expected in EXPECTED_PROPERTIES {
        if next(&mut r)? != expected {
            return Err(bad("unexpected vertex properties"));
        }
    }
    if next(&mut r)? != "end_header" {
        return Err(bad("missing end_header"));
    }
    let mut cloud = ColoredPointCloud::default();
    for _ in 0..count {
        let mut p = [0f32; 3];
        for v in &mut p {
            *v = r.read_f32::<LittleEndian>().map_err(|_| bad("truncated vertex data"))?;
        }
        let mut c = [0u8; 3];
        r.read_exact(&mut c).map_err(|_| bad("truncated vertex data"))?;
        cloud.points.push(p);
        cloud.colors.push(c);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(bad("trailing bytes after vertex data"));
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_pixels() {
        let intr = Intrinsics {
            fx: 600.0,
            fy: 600.0,
            cx: 320.0,
            cy: 240.0,
            depth_scale: 0.001,
        };
        assert_eq!(intr.deproject_pixel(320.0, 240.0, 1000.0), [0.0, 0.0, 1.0]);
        assert_eq!(intr.deproject_pixel(920.0, 240.0, 1000.0), [1.0, 0.0, 1.0]);
        let p = intr.deproject_pixel(420.0, 190.0, 2000.0);
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-12 && (p[1] + 1.0 / 6.0).abs() < 1e-12 && p[2] == 2.0);
    }

    #[test]
    fn zero_depth_skipped_and_stride() {
        let mut d = DepthImage::from_pixel(4, 4, image::Luma([500]));
        d.put_pixel(0, 0, image::Luma([0]));
        let intr = Intrinsics::from(&CameraConfig::default());
        assert_eq!(deproject(&d, &intr, 1).len(), 15);
        assert_eq!(deproject(&d, &intr, 2).len(), 3);
    }
}
