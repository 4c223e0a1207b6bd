use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Clip, Frame, Object};
use crate::error::{Error, Result};

pub const ANNOTATIONS_FILE: &str = "annotations.json";

fn parse_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::dim("write_ppm", &[height, width, 3], &[rgb.len()]));
    }
    let mut buf = format!("P6\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(rgb);
    fs::write(path, buf)?;
    Ok(())
}

/// Binary P6 reader; `#` comments are allowed in the header.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    if bytes.get(..2) != Some(b"P6") {
        return Err(parse_err(path, 0, "missing P6 magic"));
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(
                path,
                pos,
                format!("expected header field {}", i + 1),
            ));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(path, start, "header number out of range"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(parse_err(path, pos, format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(parse_err(path, pos, "expected whitespace after header"));
    }
    pos += 1;
    let need = w * h * 3;
    if bytes.len() - pos < need {
        return Err(parse_err(
            path,
            bytes.len(),
            format!(
                "truncated pixel data: {} of {need} bytes",
                bytes.len() - pos
            ),
        ));
    }
    if bytes.len() - pos > need {
        return Err(parse_err(
            path,
            pos + need,
            "trailing bytes after pixel data",
        ));
    }
    Ok((w, h, bytes[pos..].to_vec()))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    clip_id: String,
    width: usize,
    height: usize,
    classes: Vec<String>,
    frames: Vec<AnnotatedFrame>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotatedFrame {
    index: usize,
    objects: Vec<ObjectRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectRecord {
    class_id: usize,
    bbox: [f64; 4],
    occluded: bool,
}

fn frame_file(index: usize) -> String {
    format!("frame_{index:06}.ppm")
}

pub fn save_clip(clip: &Clip, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for f in &clip.frames {
        write_ppm(
            &dir.join(frame_file(f.index)),
            clip.width,
            clip.height,
            &f.image,
        )?;
    }
    let ann = AnnotationFile {
        clip_id: clip.clip_id.clone(),
        width: clip.width,
        height: clip.height,
        classes: clip.classes.clone(),
        frames: clip
            .frames
            .iter()
            .map(|f| AnnotatedFrame {
                index: f.index,
                objects: f
                    .objects
                    .iter()
                    .map(|o| ObjectRecord {
                        class_id: o.class_id,
                        bbox: o.bbox,
                        occluded: o.occluded,
                    })
                    .collect(),
            })
            .collect(),
    };
    fs::write(
        dir.join(ANNOTATIONS_FILE),
        serde_json::to_string_pretty(&ann)?,
    )?;
    Ok(())
}

/// Byte offset of a (1-based) line/column pair.
fn offset_of(text: &str, line: usize, column: usize) -> usize {
    let mut off = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return off + column.saturating_sub(1);
        }
        off += l.len();
    }
    text.len()
}

/// Byte offset of the `n`-th occurrence of `needle`, or the end of text.
fn nth_offset(text: &str, needle: &str, n: usize) -> usize {
    text.match_indices(needle)
        .nth(n)
        .map_or(text.len(), |(i, _)| i)
}

/// Parses and validates an annotations file. Returns the header and the
/// per-frame objects.
pub fn parse_annotations(
    path: &Path,
    text: &str,
) -> Result<(String, usize, usize, Vec<String>, Vec<(usize, Vec<Object>)>)> {
    let ann: AnnotationFile = serde_json::from_str(text)
        .map_err(|e| parse_err(path, offset_of(text, e.line(), e.column()), e.to_string()))?;
    let mut nth_box = 0;
    let mut frames = Vec::with_capacity(ann.frames.len());
    for (i, f) in ann.frames.iter().enumerate() {
        if f.index != i {
            let off = nth_offset(text, "\"index\"", i);
            return Err(parse_err(
                path,
                off,
                format!("frame {i} has index {}", f.index),
            ));
        }
        let mut objects = Vec::with_capacity(f.objects.len());
        for o in &f.objects {
            let off = nth_offset(text, "\"bbox\"", nth_box);
            nth_box += 1;
            if o.bbox
                .iter()
                .any(|v| !(v.is_finite() && *v > 0.0 && *v < 1.0))
            {
                return Err(parse_err(
                    path,
                    off,
                    format!("bbox {:?} outside (0,1)^4", o.bbox),
                ));
            }
            if o.class_id >= ann.classes.len() {
                return Err(parse_err(
                    path,
                    off,
                    format!("class_id {} out of range", o.class_id),
                ));
            }
            objects.push(Object {
                class_id: o.class_id,
                bbox: o.bbox,
                occluded: o.occluded,
            });
        }
        frames.push((f.index, objects));
    }
    Ok((ann.clip_id, ann.width, ann.height, ann.classes, frames))
}

pub fn load_clip(dir: &Path) -> Result<Clip> {
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let text = fs::read_to_string(&ann_path)?;
    let (clip_id, width, height, classes, anns) = parse_annotations(&ann_path, &text)?;
    let mut frames = Vec::with_capacity(anns.len());
    for (index, objects) in anns {
        let path = dir.join(frame_file(index));
        let (w, h, image) = read_ppm(&path)?;
        if (w, h) != (width, height) {
            return Err(parse_err(
                &path,
                3,
                format!("frame is {w}x{h}, clip is {width}x{height}"),
            ));
        }
        frames.push(Frame {
            index,
            image,
            objects,
        });
    }
    Ok(Clip {
        clip_id,
        width,
        height,
        classes,
        frames,
    })
}

/// Writes each clip to `dir/<clip_id>/`.
pub fn save_split(clips: &[Clip], dir: &Path) -> Result<()> {
    for c in clips {
        save_clip(c, &dir.join(&c.clip_id))?;
    }
    Ok(())
}

/// Loads every clip directory under `dir`, sorted by name.
pub fn load_split(dir: &Path) -> Result<Vec<Clip>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(ANNOTATIONS_FILE).is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_clip(d)).collect()
}
