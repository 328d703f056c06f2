//! Cornell grasping dataset layout.
//!
//! Each sample `pcdNNNN` consists of `pcdNNNNr.png` (colour), an optional
//! depth source (`pcdNNNNd.tiff`, or the ASCII point cloud `pcdNNNN.txt`),
//! and `pcdNNNNcpos.txt` holding positive rectangles as four `x y` vertex
//! lines each. Negative rectangles are ignored. Object ids come from any
//! `z.txt` below the root (`<image number> <object id> ...` per line); images
//! missing from it use their own name as object id.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{find_files, load_depth, load_rgb, Dataset, DepthImage, Provenance, Sample};
use crate::codec::GraspRectangle;
use crate::error::{Error, Result};

/// Convert four vertices to a grasp. Edges 1-2 and 3-4 are the jaw plates:
/// the plate direction gives θ and the edge 2-3 length is the opening.
pub fn rect_from_vertices(v: &[(f64, f64); 4]) -> GraspRectangle {
    let cx = v.iter().map(|p| p.0).sum::<f64>() / 4.0;
    let cy = v.iter().map(|p| p.1).sum::<f64>() / 4.0;
    let theta = (v[1].1 - v[0].1).atan2(v[1].0 - v[0].0);
    let w = (v[2].0 - v[1].0).hypot(v[2].1 - v[1].1);
    GraspRectangle::new(cx, cy, theta, w, 0.0)
}

/// Parse a `cpos`/`cneg` file. Rectangles with a non-finite vertex are
/// dropped with a warning.
pub fn parse_rect_file(path: &Path) -> Result<Vec<GraspRectangle>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut verts = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let parsed = match f.as_slice() {
            [x, y] => x.parse::<f64>().ok().zip(y.parse::<f64>().ok()),
            _ => None,
        };
        let Some(p) = parsed else {
            return Err(Error::parse(path, format!("line {}: expected `x y`, got {line:?}", n + 1)));
        };
        verts.push(p);
    }
    if verts.len() % 4 != 0 {
        return Err(Error::parse(
            path,
            format!("{} vertex lines is not a multiple of 4", verts.len()),
        ));
    }
    let mut rects = Vec::new();
    for (i, c) in verts.chunks_exact(4).enumerate() {
        if c.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
            log::warn!("{}: rectangle {i} has a non-finite vertex, skipped", path.display());
            continue;
        }
        rects.push(rect_from_vertices(&[c[0], c[1], c[2], c[3]]));
    }
    Ok(rects)
}

/// Read an ASCII PCD point cloud into a depth image using each point's
/// `index` field (`row * width + col`) and its `z` coordinate.
pub fn parse_pcd(path: &Path, width: usize, height: usize) -> Result<DepthImage> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut fields: Vec<String> = Vec::new();
    let mut lines = text.lines();
    for line in lines.by_ref() {
        let mut t = line.split_whitespace();
        match t.next() {
            Some("FIELDS") => fields = t.map(str::to_string).collect(),
            Some("DATA") => {
                if t.next() != Some("ascii") {
                    return Err(Error::parse(path, "only ASCII point clouds are supported"));
                }
                break;
            }
            _ => {}
        }
    }
    let pos = |name: &str| {
        fields
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| Error::parse(path, format!("point cloud has no `{name}` field")))
    };
    let (zi, ii) = (pos("z")?, pos("index")?);
    let mut img = DepthImage::filled(width, height, 0.0);
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let z = f.get(zi).and_then(|s| s.parse::<f32>().ok());
        let idx = f.get(ii).and_then(|s| s.parse::<f64>().ok());
        let (Some(z), Some(idx)) = (z, idx) else {
            return Err(Error::parse(path, format!("point {n}: malformed line {line:?}")));
        };
        let idx = idx as usize;
        if idx >= width * height {
            return Err(Error::parse(path, format!("point {n}: index {idx} outside {width}x{height}")));
        }
        img.data[idx] = z;
    }
    Ok(img)
}

fn object_ids(root: &Path) -> Result<HashMap<u64, String>> {
    let mut map = HashMap::new();
    for path in find_files(root, &|n| n == "z.txt")? {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for line in text.lines() {
            let f: Vec<&str> = line.split_whitespace().collect();
            if let [img, obj, ..] = f.as_slice() {
                if let Ok(n) = img.parse::<u64>() {
                    map.insert(n, obj.to_string());
                }
            }
        }
    }
    Ok(map)
}

fn sibling(img: &Path, stem: &str, suffix: &str) -> PathBuf {
    img.with_file_name(format!("{stem}{suffix}"))
}

/// Load every `pcd*r.png` below `root`, in path order.
pub fn parse_cornell(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let ids = object_ids(root)?;
    let images = find_files(root, &|n| n.starts_with("pcd") && n.ends_with("r.png"))?;
    let mut samples = Vec::new();
    for img_path in images {
        let name = img_path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let stem = &name[..name.len() - "r.png".len()];
        let cpos = sibling(&img_path, stem, "cpos.txt");
        if !cpos.exists() {
            log::warn!("{}: no rectangle file, sample skipped", img_path.display());
            continue;
        }
        let rects = parse_rect_file(&cpos)?;
        let rgb = load_rgb(&img_path)?;
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let tiff = sibling(&img_path, stem, "d.tiff");
        let pcd = sibling(&img_path, stem, ".txt");
        let depth = if tiff.exists() {
            Some(load_depth(&tiff)?)
        } else if pcd.exists() {
            Some(parse_pcd(&pcd, w, h)?)
        } else {
            None
        };
        let number = stem.trim_start_matches("pcd").parse::<u64>().ok();
        let object = number
            .and_then(|n| ids.get(&n).cloned())
            .unwrap_or_else(|| stem.to_string());
        samples.push(Sample::new(
            Some(rgb),
            depth,
            rects,
            object,
            img_path.display().to_string(),
        )?);
    }
    Ok(Dataset {
        samples,
        provenance: Provenance::Cornell,
    })
}
