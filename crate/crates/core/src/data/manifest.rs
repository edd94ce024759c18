//! Dataset directories: `manifest.tsv` lists `id  rgb_path  depth_path  split`
//! per line, tab separated, with paths relative to the directory.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::io::{read_pfm, read_ppm};
use super::Frame;
use crate::error::FormatError;
use crate::layers::ObservationMask;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?} (train, val, test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameRef {
    pub id: String,
    pub rgb_path: PathBuf,
    pub depth_path: PathBuf,
    pub split: Split,
}

pub fn write_manifest(dir: &Path, refs: &[FrameRef]) -> Result<(), FormatError> {
    let mut text = String::new();
    for r in refs {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.id,
            r.rgb_path.display(),
            r.depth_path.display(),
            r.split
        ));
    }
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, text).map_err(|e| FormatError::io(path, e))
}

fn parse(text: &str) -> Result<Vec<FrameRef>, FormatError> {
    let mut refs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| FormatError::Manifest { line: line_no, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        if fields.iter().any(|f| f.is_empty()) {
            return Err(err("empty field".into()));
        }
        let split = fields[3].parse::<Split>().map_err(err)?;
        if !seen.insert(fields[0].to_string()) {
            return Err(err(format!("duplicate id {:?}", fields[0])));
        }
        refs.push(FrameRef {
            id: fields[0].to_string(),
            rgb_path: fields[1].into(),
            depth_path: fields[2].into(),
            split,
        });
    }
    Ok(refs)
}

/// Parses the manifest and checks that every referenced pair exists and has
/// matching dimensions. Errors name the offending manifest line.
pub fn dataset_manifest(dir: &Path) -> Result<Vec<FrameRef>, FormatError> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| FormatError::io(&path, e))?;
    let refs = parse(&text)?;
    let line_of = |id: &str| {
        text.lines()
            .position(|l| l.split('\t').next() == Some(id))
            .map_or(0, |p| p + 1)
    };
    for r in &refs {
        let line = line_of(&r.id);
        load_frame(dir, r).map_err(|e| FormatError::Manifest {
            line,
            msg: format!("frame {}: {e}", r.id),
        })?;
    }
    Ok(refs)
}

/// Loads one frame. Ground truth is valid where depth is finite and positive.
pub fn load_frame(dir: &Path, r: &FrameRef) -> Result<Frame, FormatError> {
    let rgb = read_ppm(&dir.join(&r.rgb_path))?;
    let depth = read_pfm(&dir.join(&r.depth_path))?;
    let (rs, ds) = (rgb.shape(), depth.shape());
    if rs[2..] != ds[2..] {
        return Err(FormatError::Config(format!(
            "rgb is {}x{} but depth is {}x{}",
            rs[2], rs[3], ds[2], ds[3]
        )));
    }
    let (h, w) = (ds[2], ds[3]);
    let bits: Vec<bool> = depth.data().iter().map(|d| d.is_finite() && *d > 0.0).collect();
    let clean: Vec<f64> = depth
        .data()
        .iter()
        .zip(&bits)
        .map(|(d, ok)| if *ok { *d } else { 0.0 })
        .collect();
    Ok(Frame::new(
        r.id.clone(),
        rgb,
        Tensor::new(&[1, 1, h, w], clean)?,
        ObservationMask::from_bools(1, h, w, &bits)?,
    )?)
}

/// Loads every frame of `split`, in manifest order.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Frame>, FormatError> {
    dataset_manifest(dir)?
        .iter()
        .filter(|r| r.split == split)
        .map(|r| load_frame(dir, r))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_skips_blanks_and_comments() {
        let refs = parse("# header\n\na\tx.ppm\tx.pfm\ttrain\nb\ty.ppm\ty.pfm\ttest\n").unwrap();
        assert_eq!(refs.len(), 2);
        assert_eq!(refs[1].split, Split::Test);
    }

    #[test]
    fn parse_errors_name_the_line() {
        for (text, line) in [
            ("a\tx\ty\ttrain\nb\tx\ty\n", 2),
            ("a\tx\ty\ttrain\na\tx\ty\tval\n", 2),
            ("a\tx\ty\tdev\n", 1),
            ("\n\na\t\ty\ttrain\n", 3),
        ] {
            match parse(text) {
                Err(FormatError::Manifest { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{other:?}"),
            }
        }
    }
}
