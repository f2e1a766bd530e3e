//! Z-buffered depth rendering of the LiDAR map with near-point splat
//! magnification.

use super::{LidarMap, MapError};
use crate::geometry::{project_pinhole, transform_to_camera, CameraIntrinsics, CameraPose, DEPTH_EPSILON};
use std::io::Write;
use std::path::Path;

pub const EMPTY_SOURCE: u32 = u32::MAX;

/// Splat magnification: half-width in pixels as a function of depth.
/// Zero at the far plane, growing as the point approaches the camera.
#[derive(Debug, Clone, Copy)]
pub struct SplatParams {
    pub beta: f64,
    pub r_max: u32,
}

impl Default for SplatParams {
    fn default() -> Self {
        Self { beta: 2.0, r_max: 8 }
    }
}

impl SplatParams {
    pub fn radius(&self, depth: f64, height: f64) -> u32 {
        if depth <= 0.0 || depth > height {
            return 0;
        }
        let r = (self.beta * (height - depth) / depth).floor();
        (r as u32).min(self.r_max)
    }
}

/// Per-pixel nearest depth (meters, 0 = empty) and source point index.
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f64>,
    pub source: Vec<u32>,
}

impl DepthImage {
    fn empty(width: u32, height: u32) -> Self {
        let n = (width * height) as usize;
        Self {
            width,
            height,
            depth: vec![0.0; n],
            source: vec![EMPTY_SOURCE; n],
        }
    }

    #[inline]
    pub fn at(&self, x: u32, y: u32) -> (f64, u32) {
        let i = (y * self.width + x) as usize;
        (self.depth[i], self.source[i])
    }

    /// Source LiDAR index under a (possibly fractional) pixel, if splatted.
    pub fn source_at_pixel(&self, px: f64, py: f64) -> Option<u32> {
        let x = px.floor();
        let y = py.floor();
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        let (_, src) = self.at(x as u32, y as u32);
        (src != EMPTY_SOURCE).then_some(src)
    }

    /// 16-bit PGM, millimeter quantization, 0 = empty.
    pub fn write_pgm<P: AsRef<Path>>(&self, path: P) -> Result<(), MapError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(w, "P5\n{} {}\n65535\n", self.width, self.height)?;
        for &d in &self.depth {
            let mm = (d * 1000.0).round().clamp(0.0, 65535.0) as u16;
            w.write_all(&mm.to_be_bytes())?;
        }
        Ok(())
    }
}

/// Render the frustum-culled map into a depth image, splatting each
/// point as a filled square and keeping the nearest point per pixel.
pub fn render_depth(
    map: &LidarMap,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    height: f64,
    splat: &SplatParams,
) -> DepthImage {
    let mut img = DepthImage::empty(intr.width, intr.height);
    let candidates = map.frustum_points(pose, intr, height);
    for idx in candidates {
        let p = &map.points[idx as usize];
        let cam = transform_to_camera(pose, &p.position);
        if cam.z <= DEPTH_EPSILON || cam.z > height {
            continue;
        }
        let Ok(px) = project_pinhole(intr, &cam) else {
            continue;
        };
        let cx = px.x.floor();
        let cy = px.y.floor();
        let r = splat.radius(cam.z, height) as f64;
        let x0 = (cx - r).max(0.0) as i64;
        let x1 = (cx + r).min(intr.width as f64 - 1.0) as i64;
        let y0 = (cy - r).max(0.0) as i64;
        let y1 = (cy + r).min(intr.height as f64 - 1.0) as i64;
        if cx < -r || cy < -r || cx > intr.width as f64 - 1.0 + r || cy > intr.height as f64 - 1.0 + r
        {
            continue;
        }
        for y in y0..=y1 {
            for x in x0..=x1 {
                let i = (y as u32 * img.width + x as u32) as usize;
                if img.source[i] == EMPTY_SOURCE || cam.z < img.depth[i] {
                    img.depth[i] = cam.z;
                    img.source[i] = idx;
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::map::LidarPoint;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(200.0, 200.0, 100.0, 75.0, 200, 150)
    }

    fn make_map(positions: Vec<Vec3>) -> LidarMap {
        LidarMap::from_points(
            positions
                .into_iter()
                .map(|p| LidarPoint {
                    position: p,
                    normal: Vec3::new(0.0, 0.0, 1.0),
                })
                .collect(),
            1.0,
        )
    }

    #[test]
    fn far_limit_single_pixel() {
        let height = 10.0;
        let map = make_map(vec![Vec3::new(0.0, 0.0, height)]);
        let img = render_depth(&map, &CameraPose::identity(), &intr(), height, &SplatParams::default());
        let set: Vec<usize> = (0..img.source.len())
            .filter(|&i| img.source[i] != EMPTY_SOURCE)
            .collect();
        assert_eq!(set.len(), 1);
        assert_eq!(img.depth[set[0]], height);
    }

    #[test]
    fn z_buffer_keeps_nearest() {
        let map = make_map(vec![Vec3::new(0.0, 0.0, 5.0), Vec3::new(0.0, 0.0, 2.0)]);
        let img = render_depth(&map, &CameraPose::identity(), &intr(), 30.0, &SplatParams::default());
        let (d, src) = img.at(100, 75);
        assert_eq!(d, 2.0);
        assert_eq!(src, 1);
    }

    #[test]
    fn splat_footprint_matches_formula() {
        let height = 30.0;
        let splat = SplatParams::default();
        for depth in [1.0, 2.0, 5.0, 12.0, 25.0] {
            let map = make_map(vec![Vec3::new(0.0, 0.0, depth)]);
            let img = render_depth(&map, &CameraPose::identity(), &intr(), height, &splat);
            let count = img.source.iter().filter(|&&s| s != EMPTY_SOURCE).count();
            let r = splat.radius(depth, height) as usize;
            assert_eq!(count, (2 * r + 1) * (2 * r + 1), "depth {depth}");
        }
    }

    #[test]
    fn splat_stays_near_projection() {
        // Every set pixel is within Chebyshev distance r(d) of the
        // source point's exact projection.
        let mut positions = Vec::new();
        for i in 0..20 {
            positions.push(Vec3::new(
                (i % 5) as f64 * 0.3 - 0.6,
                (i % 4) as f64 * 0.3 - 0.45,
                1.5 + i as f64 * 0.7,
            ));
        }
        let map = make_map(positions);
        let ic = intr();
        let height = 30.0;
        let splat = SplatParams::default();
        let img = render_depth(&map, &CameraPose::identity(), &ic, height, &splat);
        for y in 0..img.height {
            for x in 0..img.width {
                let (d, src) = img.at(x, y);
                if src == EMPTY_SOURCE {
                    continue;
                }
                let p = &map.points[src as usize];
                let px = project_pinhole(&ic, &p.position).unwrap();
                let r = splat.radius(d, height) as f64;
                let cheb = (px.x.floor() - x as f64).abs().max((px.y.floor() - y as f64).abs());
                assert!(cheb <= r, "pixel ({x},{y}) at distance {cheb} > r {r}");
            }
        }
    }

    #[test]
    fn pgm_roundtrip_quantization() {
        let map = make_map(vec![Vec3::new(0.0, 0.0, 3.25)]);
        let img = render_depth(&map, &CameraPose::identity(), &intr(), 4.0, &SplatParams::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pgm");
        img.write_pgm(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n200 150\n65535\n"));
        let data = &bytes[b"P5\n200 150\n65535\n".len()..];
        let i = (75 * 200 + 100) * 2;
        let mm = u16::from_be_bytes([data[i], data[i + 1]]);
        assert_eq!(mm, 3250);
    }
}
