//! Reconstruction state: images, features, matches, tracks and 3D points.

use crate::association::PlaneCorrespondence;
use crate::geometry::{normalized_plane_coords, CameraIntrinsics, CameraPose, Pixel, Vec3};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// A 2D feature: pixel position plus its normalized-plane coordinate.
#[derive(Debug, Clone, Copy)]
pub struct Feature {
    pub px: Pixel,
    pub norm: Pixel,
}

#[derive(Debug, Clone)]
pub struct ImageEntry {
    pub name: String,
    pub pose: CameraPose,
    pub registered: bool,
    pub pose_prior: Option<CameraPose>,
}

/// A reconstructed 3D point and its track of 2D observations.
/// Track length 1 is permitted only for LiDAR-depth-initialized points.
#[derive(Debug, Clone)]
pub struct ScenePoint {
    pub position: Vec3,
    pub track: Vec<(usize, usize)>,
    pub correspondence: Option<PlaneCorrespondence>,
    pub error_stat: f64,
    pub optimization_round: u32,
    pub alive: bool,
}

pub struct SceneStore {
    pub intrinsics: CameraIntrinsics,
    pub images: Vec<ImageEntry>,
    pub features: Vec<Vec<Feature>>,
    /// Match lists keyed by (a, b) with a < b; entries are (feature_a, feature_b).
    matches: HashMap<(usize, usize), Vec<(u32, u32)>>,
    pub points: Vec<ScenePoint>,
    /// Per image, per feature: the point id tracking that feature, if any.
    feature_point: Vec<Vec<Option<u32>>>,
}

impl SceneStore {
    pub fn new(intrinsics: CameraIntrinsics) -> Self {
        Self {
            intrinsics,
            images: Vec::new(),
            features: Vec::new(),
            matches: HashMap::new(),
            points: Vec::new(),
            feature_point: Vec::new(),
        }
    }

    pub fn add_image(&mut self, name: &str, pixels: Vec<Pixel>) -> usize {
        let id = self.images.len();
        let features = pixels
            .into_iter()
            .map(|px| Feature {
                px,
                norm: normalized_plane_coords(&self.intrinsics, &px),
            })
            .collect::<Vec<_>>();
        self.feature_point.push(vec![None; features.len()]);
        self.features.push(features);
        self.images.push(ImageEntry {
            name: name.to_string(),
            pose: CameraPose::identity(),
            registered: false,
            pose_prior: None,
        });
        id
    }

    pub fn image_id_by_name(&self, name: &str) -> Option<usize> {
        self.images.iter().position(|im| im.name == name)
    }

    pub fn set_matches(&mut self, a: usize, b: usize, pairs: Vec<(u32, u32)>) {
        assert_ne!(a, b);
        if a < b {
            self.matches.insert((a, b), pairs);
        } else {
            self.matches
                .insert((b, a), pairs.into_iter().map(|(x, y)| (y, x)).collect());
        }
    }

    /// Matched feature pairs oriented as (feature in a, feature in b).
    pub fn matches_between(&self, a: usize, b: usize) -> Vec<(u32, u32)> {
        if a < b {
            self.matches.get(&(a, b)).cloned().unwrap_or_default()
        } else {
            self.matches
                .get(&(b, a))
                .map(|v| v.iter().map(|&(x, y)| (y, x)).collect())
                .unwrap_or_default()
        }
    }

    pub fn match_count(&self, a: usize, b: usize) -> usize {
        let key = if a < b { (a, b) } else { (b, a) };
        self.matches.get(&key).map_or(0, |v| v.len())
    }

    pub fn registered_ids(&self) -> Vec<usize> {
        (0..self.images.len())
            .filter(|&i| self.images[i].registered)
            .collect()
    }

    pub fn point_of_feature(&self, image_id: usize, feature_idx: usize) -> Option<u32> {
        self.feature_point[image_id][feature_idx]
    }

    /// Create a new point; every track entry must be unclaimed.
    pub fn add_point(&mut self, position: Vec3, track: Vec<(usize, usize)>) -> u32 {
        let id = self.points.len() as u32;
        for &(im, f) in &track {
            debug_assert!(self.feature_point[im][f].is_none(), "feature already tracked");
            self.feature_point[im][f] = Some(id);
        }
        self.points.push(ScenePoint {
            position,
            track,
            correspondence: None,
            error_stat: 0.0,
            optimization_round: 0,
            alive: true,
        });
        id
    }

    /// Append an observation to an existing track if the feature is free.
    pub fn add_observation(&mut self, point_id: u32, image_id: usize, feature_idx: usize) -> bool {
        if self.feature_point[image_id][feature_idx].is_some() {
            return false;
        }
        self.feature_point[image_id][feature_idx] = Some(point_id);
        self.points[point_id as usize].track.push((image_id, feature_idx));
        true
    }

    pub fn remove_observation(&mut self, point_id: u32, image_id: usize, feature_idx: usize) {
        let pt = &mut self.points[point_id as usize];
        pt.track.retain(|&(im, f)| !(im == image_id && f == feature_idx));
        self.feature_point[image_id][feature_idx] = None;
    }

    pub fn drop_point(&mut self, point_id: u32) {
        let track = std::mem::take(&mut self.points[point_id as usize].track);
        for (im, f) in track {
            self.feature_point[im][f] = None;
        }
        self.points[point_id as usize].alive = false;
    }

    /// Track entries restricted to registered images.
    pub fn registered_track(&self, point_id: u32) -> Vec<(usize, usize)> {
        self.points[point_id as usize]
            .track
            .iter()
            .copied()
            .filter(|&(im, _)| self.images[im].registered)
            .collect()
    }

    /// Distinct live points observed by an image.
    pub fn points_tracked_by(&self, image_id: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = self.feature_point[image_id]
            .iter()
            .flatten()
            .copied()
            .filter(|&id| self.points[id as usize].alive)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn live_point_ids(&self) -> Vec<u32> {
        (0..self.points.len() as u32)
            .filter(|&id| self.points[id as usize].alive)
            .collect()
    }
}

/// Read one `x y` feature line per row.
pub fn read_features<P: AsRef<Path>>(path: P) -> Result<Vec<Pixel>, SceneError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut it = trimmed.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<f64, SceneError> {
            tok.and_then(|t| t.parse().ok()).ok_or(SceneError::Parse {
                line: lineno + 1,
                msg: format!("expected `x y`, got '{trimmed}'"),
            })
        };
        let x = parse(it.next())?;
        let y = parse(it.next())?;
        out.push(Pixel::new(x, y));
    }
    Ok(out)
}

/// Matches file: blocks starting with `IMAGE_A IMAGE_B`, followed by
/// `idxA idxB` index lines. Returns (name_a, name_b, pairs) per block.
pub fn read_matches<P: AsRef<Path>>(
    path: P,
) -> Result<Vec<(String, String, Vec<(u32, u32)>)>, SceneError> {
    let reader = BufReader::new(File::open(path)?);
    let mut blocks: Vec<(String, String, Vec<(u32, u32)>)> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();
        if tokens.len() != 2 {
            return Err(SceneError::Parse {
                line: lineno + 1,
                msg: format!("expected 2 fields, got {}", tokens.len()),
            });
        }
        match (tokens[0].parse::<u32>(), tokens[1].parse::<u32>()) {
            (Ok(a), Ok(b)) => {
                let block = blocks.last_mut().ok_or(SceneError::Parse {
                    line: lineno + 1,
                    msg: "index pair before any image-pair header".into(),
                })?;
                block.2.push((a, b));
            }
            _ => blocks.push((tokens[0].to_string(), tokens[1].to_string(), Vec::new())),
        }
    }
    Ok(blocks)
}

/// Pose file: `name qw qx qy qz tx ty tz` per line, world-to-camera.
pub fn read_pose_file<P: AsRef<Path>>(path: P) -> Result<Vec<(String, CameraPose)>, SceneError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();
        if tokens.len() != 8 {
            return Err(SceneError::Parse {
                line: lineno + 1,
                msg: format!("expected 8 fields, got {}", tokens.len()),
            });
        }
        let mut vals = [0.0f64; 7];
        for (v, tok) in vals.iter_mut().zip(&tokens[1..]) {
            *v = tok.parse().map_err(|_| SceneError::Parse {
                line: lineno + 1,
                msg: format!("bad number '{tok}'"),
            })?;
        }
        let pose = CameraPose::from_wxyz_t(
            vals[0],
            vals[1],
            vals[2],
            vals[3],
            Vec3::new(vals[4], vals[5], vals[6]),
        );
        out.push((tokens[0].to_string(), pose));
    }
    Ok(out)
}

pub fn write_pose_file<P: AsRef<Path>>(
    path: P,
    poses: &[(String, CameraPose)],
) -> Result<(), SceneError> {
    let mut w = BufWriter::new(File::create(path)?);
    for (name, pose) in poses {
        let q = pose.rotation.as_ref();
        writeln!(
            w,
            "{} {} {} {} {} {} {} {}",
            name,
            q.w,
            q.i,
            q.j,
            q.k,
            pose.translation.x,
            pose.translation.y,
            pose.translation.z
        )?;
    }
    Ok(())
}
