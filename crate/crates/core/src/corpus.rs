//! On-disk corpus layout.
//!
//! ```text
//! images/0000.ppm    8-bit RGB image
//! images/0000.gt     optional annotations, box line format with class ids
//! cache/0000.props   cached proposals, box line format
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{format_boxes, parse_boxes, BBox};

pub const IMAGE_EXT: &str = "ppm";
pub const ANNOTATION_EXT: &str = "gt";
pub const PROPOSAL_EXT: &str = "props";

/// Images of `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == IMAGE_EXT))
        .collect();
    out.sort();
    Ok(out)
}

fn stem(image: &Path) -> &str {
    image.file_stem().and_then(|s| s.to_str()).unwrap_or("")
}

pub fn proposal_path(cache_dir: &Path, image: &Path) -> PathBuf {
    cache_dir.join(format!("{}.{PROPOSAL_EXT}", stem(image)))
}

pub fn annotation_path(image: &Path) -> PathBuf {
    image.with_extension(ANNOTATION_EXT)
}

pub fn read_boxes(path: &Path) -> Result<Vec<BBox>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_boxes(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn write_boxes(path: &Path, boxes: &[BBox]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, format_boxes(boxes)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.ppm", "a.ppm", "notes.txt"] {
            fs::write(dir.path().join(name), b"").unwrap();
        }
        let imgs = list_images(dir.path()).unwrap();
        assert_eq!(imgs.iter().map(|p| p.file_name().unwrap().to_str().unwrap()).collect::<Vec<_>>(), ["a.ppm", "b.ppm"]);
        assert_eq!(proposal_path(Path::new("/c"), &imgs[0]), Path::new("/c/a.props"));
        assert_eq!(annotation_path(&imgs[1]), dir.path().join("b.gt"));

        let boxes = vec![BBox::new(1.0, 2.0, 30.0, 40.5).unwrap().with_class(2)];
        let p = dir.path().join("cache/a.props");
        write_boxes(&p, &boxes).unwrap();
        assert_eq!(read_boxes(&p).unwrap()[0].class_id, Some(2));
        assert!(matches!(read_boxes(&dir.path().join("none")), Err(Error::MissingFile(_))));
    }
}
