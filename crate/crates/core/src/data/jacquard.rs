//! Jacquard dataset layout: `<object>/<n>_<object>_grasps.txt` with lines
//! `x;y;theta;opening;jaw_size` (theta in degrees), next to
//! `<n>_<object>_RGB.png` and `<n>_<object>_perfect_depth.tiff`.

use std::fs;
use std::path::Path;

use super::{find_files, load_depth, load_rgb, Dataset, Provenance, Sample};
use crate::codec::GraspRectangle;
use crate::error::{Error, Result};

/// Parse one grasp line. The angle is taken verbatim as the plate direction.
pub fn parse_grasp_line(line: &str) -> Option<GraspRectangle> {
    let v: Vec<f64> = line
        .trim()
        .split(';')
        .map(|s| s.trim().parse().ok())
        .collect::<Option<_>>()?;
    if v.len() != 5 || v.iter().any(|x| !x.is_finite()) {
        return None;
    }
    Some(GraspRectangle::new(v[0], v[1], v[2].to_radians(), v[3], 0.0))
}

pub fn parse_grasp_file(path: &Path) -> Result<Vec<GraspRectangle>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rects = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_grasp_line(line) {
            Some(r) => rects.push(r),
            None => log::warn!("{}:{}: malformed grasp line dropped", path.display(), n + 1),
        }
    }
    Ok(rects)
}

/// One sample per `*_grasps.txt` below `root`, in path order.
pub fn parse_jacquard(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let mut samples = Vec::new();
    for gpath in find_files(root, &|n| n.ends_with("_grasps.txt"))? {
        let name = gpath.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let prefix = &name[..name.len() - "grasps.txt".len()];
        let rgb_path = gpath.with_file_name(format!("{prefix}RGB.png"));
        let depth_path = gpath.with_file_name(format!("{prefix}perfect_depth.tiff"));
        let rects = parse_grasp_file(&gpath)?;
        let rgb = if rgb_path.exists() {
            Some(load_rgb(&rgb_path)?)
        } else {
            None
        };
        let depth = if depth_path.exists() {
            Some(load_depth(&depth_path)?)
        } else {
            None
        };
        if rgb.is_none() && depth.is_none() {
            return Err(Error::parse(&gpath, "no RGB or perfect-depth image next to grasp file"));
        }
        let object = gpath
            .parent()
            .and_then(|p| p.file_name())
            .and_then(|n| n.to_str())
            .unwrap_or(prefix)
            .to_string();
        samples.push(Sample::new(rgb, depth, rects, object, gpath.display().to_string())?);
    }
    Ok(Dataset {
        samples,
        provenance: Provenance::Jacquard,
    })
}
