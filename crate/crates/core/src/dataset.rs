//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/parts/<object_id>_p<i>.ply     ASCII PLY, float x y z per vertex
//! <dir>/images/<object_id>.pgm         P2 ASCII grey map, 0 or 255
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{CompositeObject, ConditionImage, PartPointCloud, Point};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub object_id: String,
    pub n_obj: usize,
    pub category_tag: String,
    pub part_files: Vec<String>,
    pub type_ids: Vec<usize>,
    pub image_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub points_per_part: usize,
    pub render_size: usize,
    pub objects: Vec<ManifestEntry>,
}

/// Objects with their condition renders, index-aligned.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub objects: Vec<CompositeObject>,
    pub images: Vec<ConditionImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }
}

pub fn write_ply(path: &Path, points: &[Point]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", points.len())?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    writeln!(w, "end_header")?;
    for p in points {
        // `{}` on f32 prints the shortest text that parses back to the same bits.
        writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses an ASCII PLY holding only `x y z` float vertices.
pub fn read_ply(path: &Path) -> std::result::Result<Vec<Point>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(format!("{}: missing `ply` magic", path.display()));
    }
    let mut count: Option<usize> = None;
    let mut props = Vec::new();
    loop {
        let line = lines
            .next()
            .ok_or_else(|| format!("{}: header not terminated", path.display()))?
            .trim();
        if line == "end_header" {
            break;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["format", "ascii", _] | ["comment", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse().map_err(|_| format!("{}: bad vertex count `{n}`", path.display()))?)
            }
            ["property", "float" | "float32", name] => props.push(name.to_string()),
            _ => return Err(format!("{}: unsupported header line `{line}`", path.display())),
        }
    }
    if props != ["x", "y", "z"] {
        return Err(format!("{}: expected float properties x y z, got {props:?}", path.display()));
    }
    let count = count.ok_or_else(|| format!("{}: no vertex element", path.display()))?;
    let mut points = Vec::with_capacity(count);
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let vals: Vec<f32> = line
            .split_whitespace()
            .map(|t| t.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| format!("{}: unparsable vertex `{line}`", path.display()))?;
        if vals.len() != 3 {
            return Err(format!("{}: vertex with {} coordinates", path.display(), vals.len()));
        }
        points.push([vals[0], vals[1], vals[2]]);
    }
    if points.len() != count {
        return Err(format!(
            "{}: header declares {count} vertices but {} were found",
            path.display(),
            points.len()
        ));
    }
    Ok(points)
}

pub fn write_pgm(path: &Path, img: &ConditionImage) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "P2")?;
    writeln!(w, "# {}", img.camera_tag)?;
    writeln!(w, "{} {}", img.size, img.size)?;
    writeln!(w, "255")?;
    for row in img.pixels.chunks(img.size) {
        let line: Vec<String> = row
            .iter()
            .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u32).to_string())
            .collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> std::result::Result<ConditionImage, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut camera_tag = String::new();
    let mut tokens = Vec::new();
    for line in text.lines() {
        if let Some(comment) = line.trim().strip_prefix('#') {
            if camera_tag.is_empty() {
                camera_tag = comment.trim().to_string();
            }
            continue;
        }
        tokens.extend(line.split_whitespace());
    }
    if tokens.first() != Some(&"P2") {
        return Err(format!("{}: not a P2 grey map", path.display()));
    }
    let num = |i: usize| -> std::result::Result<usize, String> {
        tokens
            .get(i)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| format!("{}: bad header field {i}", path.display()))
    };
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if w != h || maxval == 0 {
        return Err(format!("{}: expected a square image with positive maxval", path.display()));
    }
    let pixels: Vec<f32> = tokens[4..]
        .iter()
        .map(|t| t.parse::<u32>().map(|v| v as f32 / maxval as f32))
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format!("{}: bad pixel value", path.display()))?;
    if pixels.len() != w * h {
        return Err(format!("{}: expected {} pixels, found {}", path.display(), w * h, pixels.len()));
    }
    Ok(ConditionImage {
        size: w,
        pixels,
        camera_tag,
    })
}

/// Writes objects, renders and the manifest under `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    if dataset.objects.len() != dataset.images.len() {
        return Err(Error::Argument("objects and images are not index-aligned".into()));
    }
    fs::create_dir_all(dir.join("parts"))?;
    fs::create_dir_all(dir.join("images"))?;
    let points_per_part = dataset
        .objects
        .first()
        .and_then(|o| o.parts.first())
        .map_or(0, |p| p.points.len());
    let render_size = dataset.images.first().map_or(0, |i| i.size);
    let mut entries = Vec::with_capacity(dataset.len());
    for (obj, img) in dataset.objects.iter().zip(&dataset.images) {
        let mut part_files = Vec::with_capacity(obj.n_obj());
        for (i, part) in obj.parts.iter().enumerate() {
            if part.points.len() != points_per_part {
                return Err(Error::Object {
                    object_id: obj.object_id.clone(),
                    reason: format!("part {i} has {} points, expected {points_per_part}", part.points.len()),
                });
            }
            let rel = format!("parts/{}_p{i}.ply", obj.object_id);
            write_ply(&dir.join(&rel), &part.points)?;
            part_files.push(rel);
        }
        let image_file = format!("images/{}.pgm", obj.object_id);
        write_pgm(&dir.join(&image_file), img)?;
        entries.push(ManifestEntry {
            object_id: obj.object_id.clone(),
            n_obj: obj.n_obj(),
            category_tag: obj.category_tag.clone(),
            part_files,
            type_ids: obj.parts.iter().map(|p| p.type_id).collect(),
            image_file,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        points_per_part,
        render_size,
        objects: entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn manifest_error(path: PathBuf, reason: impl Into<String>) -> Error {
    Error::Manifest {
        path,
        reason: reason.into(),
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| manifest_error(path.clone(), e.to_string()))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| manifest_error(path.clone(), e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(manifest_error(path, format!("unsupported manifest version {}", manifest.version)));
    }
    Ok(manifest)
}

/// Loads a dataset written by [`write_dataset`]; per-object failures name the object.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut out = Dataset::default();
    for entry in &manifest.objects {
        let fail = |reason: String| Error::Object {
            object_id: entry.object_id.clone(),
            reason,
        };
        if entry.part_files.len() != entry.n_obj || entry.type_ids.len() != entry.n_obj {
            return Err(fail(format!(
                "n_obj = {} but {} part files and {} type ids are listed",
                entry.n_obj,
                entry.part_files.len(),
                entry.type_ids.len()
            )));
        }
        let mut parts = Vec::with_capacity(entry.n_obj);
        for (i, (file, &type_id)) in entry.part_files.iter().zip(&entry.type_ids).enumerate() {
            let points = read_ply(&dir.join(file)).map_err(fail)?;
            if points.len() != manifest.points_per_part {
                return Err(fail(format!(
                    "part file {file} has {} points, manifest declares {}",
                    points.len(),
                    manifest.points_per_part
                )));
            }
            parts.push(PartPointCloud {
                points,
                type_id,
                part_index: i,
            });
        }
        let image = read_pgm(&dir.join(&entry.image_file)).map_err(fail)?;
        if image.size != manifest.render_size {
            return Err(fail(format!(
                "image is {}x{}, manifest declares {}",
                image.size, image.size, manifest.render_size
            )));
        }
        out.objects.push(CompositeObject {
            object_id: entry.object_id.clone(),
            category_tag: entry.category_tag.clone(),
            parts,
        });
        out.images.push(image);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_objects, render_silhouette, GeneratorSpec, DEFAULT_IOU_CAP};

    fn small_dataset(n: usize) -> Dataset {
        let objects = gen_objects(&GeneratorSpec::default(), 1, 1, n, DEFAULT_IOU_CAP, 1).unwrap();
        let images = objects.iter().map(|o| render_silhouette(o, 32)).collect();
        Dataset { objects, images }
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(10);
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&Dataset::default(), dir.path()).unwrap();
        assert!(read_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn missing_part_file_names_the_object() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(3);
        write_dataset(&ds, dir.path()).unwrap();
        let victim = &ds.objects[1];
        fs::remove_file(dir.path().join(format!("parts/{}_p0.ply", victim.object_id))).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Object { object_id, .. }) => assert_eq!(object_id, victim.object_id),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_part_file_names_the_object() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(2);
        write_dataset(&ds, dir.path()).unwrap();
        let victim = &ds.objects[0];
        let path = dir.path().join(format!("parts/{}_p1.ply", victim.object_id));
        let text = fs::read_to_string(&path).unwrap();
        let cut: Vec<&str> = text.lines().take(20).collect();
        fs::write(&path, cut.join("\n")).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Object { object_id, reason }) => {
                assert_eq!(object_id, victim.object_id);
                assert!(reason.contains("header declares"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_or_corrupt_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Manifest { .. })));
        fs::write(dir.path().join(MANIFEST_FILE), "{ not json").unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Manifest { .. })));
    }
}
