//! File formats: poses, camera intrinsics, depth/mask/color images, point
//! clouds, weight bundles, and evaluation reports.
//!
//! Text formats serialize floats in Rust's shortest round-trip notation, so
//! every writer/reader pair is bit-exact for in-range values. Parse errors
//! name the file, the line or offset, and what was expected.

pub mod report;
pub mod weights;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use refpose_core::geom::{CameraIntrinsics, Mat3, PointCloud, Pose, Vec3};
use refpose_core::view::{ColorImage, DepthMap, Mask};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected {expected}, got `{got}`")]
    Parse {
        path: PathBuf,
        line: usize,
        expected: String,
        got: String,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: image error: {message}")]
    Image { path: PathBuf, message: String },
}

impl IoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn parse(path: &Path, line: usize, expected: &str, got: &str) -> Self {
        IoError::Parse {
            path: path.to_path_buf(),
            line,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn format(path: &Path, message: impl Into<String>) -> Self {
        IoError::Format { path: path.to_path_buf(), message: message.into() }
    }
}

fn read_text(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    std::fs::write(path, text).map_err(|e| IoError::io(path, e))
}

fn parse_floats(
    path: &Path,
    line_no: usize,
    what: &str,
    parts: &[&str],
    n: usize,
) -> Result<Vec<f64>, IoError> {
    if parts.len() != n {
        return Err(IoError::parse(
            path,
            line_no,
            &format!("{n} values for {what}"),
            &parts.join(" "),
        ));
    }
    parts
        .iter()
        .map(|p| {
            p.parse::<f64>().map_err(|_| {
                IoError::parse(path, line_no, &format!("a number in {what}"), p)
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Pose files
// ---------------------------------------------------------------------------

/// Write a pose: frame tag, row-major rotation, translation in meters.
pub fn write_pose(path: &Path, pose: &Pose) -> Result<(), IoError> {
    let r = &pose.rotation;
    let t = &pose.translation;
    let mut s = String::new();
    s.push_str("# pose v1\n");
    s.push_str("frame camera_from_object\n");
    let _ = write!(
        s,
        "rotation {} {} {} {} {} {} {} {} {}\n",
        r[(0, 0)], r[(0, 1)], r[(0, 2)],
        r[(1, 0)], r[(1, 1)], r[(1, 2)],
        r[(2, 0)], r[(2, 1)], r[(2, 2)],
    );
    let _ = write!(s, "translation {} {} {}\n", t.x, t.y, t.z);
    write_text(path, &s)
}

pub fn read_pose(path: &Path) -> Result<Pose, IoError> {
    let text = read_text(path)?;
    let mut rotation: Option<Mat3> = None;
    let mut translation: Option<Vec3> = None;
    let mut frame_seen = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let line_no = i + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or("");
        let rest: Vec<&str> = parts.collect();
        match key {
            "frame" => {
                if rest != ["camera_from_object"] {
                    return Err(IoError::parse(
                        path,
                        line_no,
                        "frame tag `camera_from_object`",
                        &rest.join(" "),
                    ));
                }
                frame_seen = true;
            }
            "rotation" => {
                let v = parse_floats(path, line_no, "rotation", &rest, 9)?;
                rotation = Some(Mat3::new(
                    v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8],
                ));
            }
            "translation" => {
                let v = parse_floats(path, line_no, "translation", &rest, 3)?;
                translation = Some(Vec3::new(v[0], v[1], v[2]));
            }
            other => {
                return Err(IoError::parse(
                    path,
                    line_no,
                    "one of frame/rotation/translation",
                    other,
                ));
            }
        }
    }
    if !frame_seen {
        return Err(IoError::format(path, "missing frame tag"));
    }
    match (rotation, translation) {
        (Some(rotation), Some(translation)) => Ok(Pose { rotation, translation }),
        _ => Err(IoError::format(path, "missing rotation or translation line")),
    }
}

// ---------------------------------------------------------------------------
// Intrinsics files
// ---------------------------------------------------------------------------

pub fn write_intrinsics(path: &Path, intr: &CameraIntrinsics) -> Result<(), IoError> {
    let s = format!(
        "# intrinsics v1\nfx {}\nfy {}\ncx {}\ncy {}\nwidth {}\nheight {}\n",
        intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height
    );
    write_text(path, &s)
}

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics, IoError> {
    let text = read_text(path)?;
    let mut fields = std::collections::HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or("").to_string();
        let value: Vec<&str> = parts.collect();
        let v = parse_floats(path, i + 1, &key, &value, 1)?;
        fields.insert(key, v[0]);
    }
    let get = |k: &str| -> Result<f64, IoError> {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| IoError::format(path, format!("missing field `{k}`")))
    };
    let intr = CameraIntrinsics {
        fx: get("fx")?,
        fy: get("fy")?,
        cx: get("cx")?,
        cy: get("cy")?,
        width: get("width")? as usize,
        height: get("height")? as usize,
    };
    intr.validate()
        .map_err(|e| IoError::format(path, e.to_string()))?;
    Ok(intr)
}

// ---------------------------------------------------------------------------
// Images: depth (16-bit millimeters), mask (8-bit), color (RGB8)
// ---------------------------------------------------------------------------

/// Write a depth map whose values are integral millimeters (zero invalid).
pub fn write_depth_mm(path: &Path, depth: &DepthMap) -> Result<(), IoError> {
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
        depth.width as u32,
        depth.height as u32,
    );
    for (x, y, px) in img.enumerate_pixels_mut() {
        let v = depth.at(x as usize, y as usize);
        px.0 = [v.clamp(0.0, 65535.0).round() as u16];
    }
    img.save(path)
        .map_err(|e| IoError::Image { path: path.to_path_buf(), message: e.to_string() })
}

/// Read a 16-bit depth map; values are returned in raw millimeters
/// (pass `unit_scale = 0.001` to back-projection).
pub fn read_depth_mm(path: &Path) -> Result<DepthMap, IoError> {
    let img = image::open(path)
        .map_err(|e| IoError::Image { path: path.to_path_buf(), message: e.to_string() })?
        .into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut depth = DepthMap::zeros(w, h);
    for (x, y, px) in img.enumerate_pixels() {
        depth.set(x as usize, y as usize, px.0[0] as f64);
    }
    Ok(depth)
}

/// Convert a metric depth map to the millimeter file convention.
pub fn depth_meters_to_mm(depth: &DepthMap) -> DepthMap {
    DepthMap {
        width: depth.width,
        height: depth.height,
        data: depth
            .data
            .iter()
            .map(|&z| (z * 1000.0).clamp(0.0, 65535.0).round())
            .collect(),
    }
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<(), IoError> {
    let mut img =
        image::GrayImage::new(mask.width as u32, mask.height as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        px.0 = [if mask.at(x as usize, y as usize) { 255 } else { 0 }];
    }
    img.save(path)
        .map_err(|e| IoError::Image { path: path.to_path_buf(), message: e.to_string() })
}

pub fn read_mask(path: &Path) -> Result<Mask, IoError> {
    let img = image::open(path)
        .map_err(|e| IoError::Image { path: path.to_path_buf(), message: e.to_string() })?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut mask = Mask::filled(w, h, false);
    for (x, y, px) in img.enumerate_pixels() {
        mask.set(x as usize, y as usize, px.0[0] != 0);
    }
    Ok(mask)
}

pub fn write_color(path: &Path, image: &ColorImage) -> Result<(), IoError> {
    let mut img = image::RgbImage::new(image.width as u32, image.height as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let rgb = image.at(x as usize, y as usize);
        px.0 = [
            (rgb[0].clamp(0.0, 1.0) * 255.0).round() as u8,
            (rgb[1].clamp(0.0, 1.0) * 255.0).round() as u8,
            (rgb[2].clamp(0.0, 1.0) * 255.0).round() as u8,
        ];
    }
    img.save(path)
        .map_err(|e| IoError::Image { path: path.to_path_buf(), message: e.to_string() })
}

pub fn read_color(path: &Path) -> Result<ColorImage, IoError> {
    let img = image::open(path)
        .map_err(|e| IoError::Image { path: path.to_path_buf(), message: e.to_string() })?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ColorImage::filled(w, h, [0.0; 3]);
    for (x, y, px) in img.enumerate_pixels() {
        out.set(
            x as usize,
            y as usize,
            [
                px.0[0] as f32 / 255.0,
                px.0[1] as f32 / 255.0,
                px.0[2] as f32 / 255.0,
            ],
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Point cloud files
// ---------------------------------------------------------------------------

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    let mut s = String::from("# cloud v1\n");
    for (i, p) in cloud.points.iter().enumerate() {
        match &cloud.pixel_coords {
            Some(px) => {
                let _ = writeln!(s, "{} {} {} {} {}", p.x, p.y, p.z, px[i][0], px[i][1]);
            }
            None => {
                let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
            }
        }
    }
    write_text(path, &s)
}

pub fn read_cloud(path: &Path) -> Result<PointCloud, IoError> {
    let text = read_text(path)?;
    let mut points = Vec::new();
    let mut pixels: Vec<[u32; 2]> = Vec::new();
    let mut has_pixels: Option<bool> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let with_px = match parts.len() {
            3 => false,
            5 => true,
            _ => {
                return Err(IoError::parse(
                    path,
                    i + 1,
                    "`x y z` or `x y z u v`",
                    line,
                ))
            }
        };
        if *has_pixels.get_or_insert(with_px) != with_px {
            return Err(IoError::parse(
                path,
                i + 1,
                "consistent per-point pixel columns",
                line,
            ));
        }
        let v = parse_floats(path, i + 1, "point", &parts[..3], 3)?;
        points.push(Vec3::new(v[0], v[1], v[2]));
        if with_px {
            let u = parts[3].parse::<u32>().map_err(|_| {
                IoError::parse(path, i + 1, "integer pixel u", parts[3])
            })?;
            let w = parts[4].parse::<u32>().map_err(|_| {
                IoError::parse(path, i + 1, "integer pixel v", parts[4])
            })?;
            pixels.push([u, w]);
        }
    }
    Ok(PointCloud {
        points,
        pixel_coords: if has_pixels == Some(true) { Some(pixels) } else { None },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use refpose_core::rng::seeded_rng;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("refpose-io-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn pose_round_trip_is_bit_exact() {
        let mut rng = seeded_rng(3);
        let pose = Pose {
            rotation: refpose_core::geom::random_rotation(&mut rng, 3.0),
            translation: Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
        };
        let path = tmp("pose_rt.txt");
        write_pose(&path, &pose).unwrap();
        let back = read_pose(&path).unwrap();
        assert_eq!(pose.rotation, back.rotation);
        assert_eq!(pose.translation, back.translation);
    }

    #[test]
    fn hand_authored_pose_parses_to_documented_matrix() {
        let path = tmp("pose_hand.txt");
        std::fs::write(
            &path,
            "# pose v1\nframe camera_from_object\n\
             rotation 1 0 0 0 0 -1 0 1 0\n\
             translation 0.1 -0.2 0.9\n",
        )
        .unwrap();
        let pose = read_pose(&path).unwrap();
        assert_eq!(pose.rotation, Mat3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0));
        assert_eq!(pose.translation, Vec3::new(0.1, -0.2, 0.9));
    }

    #[test]
    fn pose_with_wrong_frame_tag_is_rejected() {
        let path = tmp("pose_frame.txt");
        std::fs::write(
            &path,
            "frame object_from_camera\nrotation 1 0 0 0 1 0 0 0 1\ntranslation 0 0 0\n",
        )
        .unwrap();
        let err = read_pose(&path).unwrap_err();
        assert!(err.to_string().contains("camera_from_object"));
    }

    #[test]
    fn intrinsics_round_trip() {
        let intr = CameraIntrinsics {
            fx: 230.5,
            fy: 229.25,
            cx: 111.5,
            cy: 112.0,
            width: 224,
            height: 224,
        };
        let path = tmp("intr.txt");
        write_intrinsics(&path, &intr).unwrap();
        assert_eq!(read_intrinsics(&path).unwrap(), intr);
    }

    #[test]
    fn depth_round_trip_preserves_integral_millimeters() {
        let mut depth = DepthMap::zeros(8, 6);
        let mut rng = seeded_rng(4);
        for v in depth.data.iter_mut() {
            *v = rng.random_range(0u32..30000) as f64;
        }
        let path = tmp("depth.png");
        write_depth_mm(&path, &depth).unwrap();
        let back = read_depth_mm(&path).unwrap();
        assert_eq!(depth.data, back.data);
    }

    #[test]
    fn mask_and_color_round_trip() {
        let mut rng = seeded_rng(5);
        let mut mask = Mask::filled(7, 5, false);
        for v in mask.data.iter_mut() {
            *v = rng.random_range(0..2) == 1;
        }
        let path = tmp("mask.png");
        write_mask(&path, &mask).unwrap();
        assert_eq!(read_mask(&path).unwrap().data, mask.data);

        let mut color = ColorImage::filled(7, 5, [0.0; 3]);
        for v in color.data.iter_mut() {
            *v = rng.random_range(0u32..256) as f32 / 255.0;
        }
        let cpath = tmp("color.png");
        write_color(&cpath, &color).unwrap();
        let back = read_color(&cpath).unwrap();
        assert_eq!(back.data, color.data);
    }

    #[test]
    fn cloud_round_trip_with_and_without_pixels() {
        let mut rng = seeded_rng(6);
        let points: Vec<Vec3> = (0..20)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let plain = PointCloud { points: points.clone(), pixel_coords: None };
        let path = tmp("cloud_plain.txt");
        write_cloud(&path, &plain).unwrap();
        let back = read_cloud(&path).unwrap();
        assert_eq!(back.points, plain.points);
        assert!(back.pixel_coords.is_none());

        let with_px = PointCloud {
            points,
            pixel_coords: Some((0..20).map(|i| [i as u32, (i * 2) as u32]).collect()),
        };
        let path2 = tmp("cloud_px.txt");
        write_cloud(&path2, &with_px).unwrap();
        let back2 = read_cloud(&path2).unwrap();
        assert_eq!(back2.points, with_px.points);
        assert_eq!(back2.pixel_coords, with_px.pixel_coords);
    }

    #[test]
    fn parse_errors_name_file_and_line() {
        let path = tmp("bad_cloud.txt");
        std::fs::write(&path, "# cloud v1\n1 2\n").unwrap();
        let err = read_cloud(&path).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("bad_cloud.txt"));
        assert!(text.contains(":2:"));
    }
}
