//! Datasets on disk: per-sample PGM images, PFM depth, PGM occlusion mask
//! and a tab-separated manifest `id  left  right  depth  occlusion` with
//! paths relative to the manifest.

use std::path::{Path, PathBuf};

use depthsweep::pfm::{load_depth_pfm, save_depth_pfm};
use depthsweep::{Error, ImageBuf, Result, Sample};

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub id: String,
    pub left: PathBuf,
    pub right: PathBuf,
    pub depth: PathBuf,
    pub occlusion: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<Entry>,
}

impl Manifest {
    /// Accepts the manifest file or the directory containing `manifest.tsv`.
    pub fn read(path: impl AsRef<Path>) -> Result<Manifest> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path = path.join(MANIFEST_NAME);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut entries = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let at = offset;
            offset += line.len();
            let line = line.trim_end_matches(['\n', '\r']);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(Error::Format {
                    offset: at,
                    message: format!("{}: expected 5 tab-separated fields, got {}", path.display(), f.len()),
                });
            }
            entries.push(Entry {
                id: f[0].to_string(),
                left: f[1].into(),
                right: f[2].into(),
                depth: f[3].into(),
                occlusion: f[4].into(),
            });
        }
        Ok(Manifest { root, entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::new();
        for e in &self.entries {
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.id,
                e.left.display(),
                e.right.display(),
                e.depth.display(),
                e.occlusion.display()
            ));
        }
        std::fs::write(path, text).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    /// Loads one sample; occlusion-mask pixels above mid-gray are treated as
    /// not visible in the right view.
    pub fn load(&self, e: &Entry) -> Result<Sample> {
        let left = ImageBuf::read_pnm(self.resolve(&e.left))?;
        let right = ImageBuf::read_pnm(self.resolve(&e.right))?;
        let depth = load_depth_pfm(self.resolve(&e.depth))?;
        let occ = ImageBuf::read_pnm(self.resolve(&e.occlusion))?;
        let (w, h) = (left.width, left.height);
        for (name, (ww, hh)) in [
            ("right", (right.width, right.height)),
            ("depth", (depth.width, depth.height)),
            ("occlusion", (occ.width, occ.height)),
        ] {
            if (ww, hh) != (w, h) {
                return Err(Error::Argument(format!("{}: {name} is {ww}x{hh}, left is {w}x{h}", e.id)));
            }
        }
        let occluded: Vec<bool> = occ.luma()?.iter().map(|&v| v > 0.5).collect();
        Ok(Sample {
            left,
            right,
            depth,
            out_of_frame: vec![false; w * h],
            surface: vec![0; w * h],
            occluded,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        self.entries.iter().map(|e| self.load(e)).collect()
    }
}

/// Writes `sample` as `{id}_left.pgm`, `{id}_right.pgm`, `{id}_depth.pfm` and
/// `{id}_occ.pgm` under `dir`. Pixels occluded or out of frame in the right
/// view are white in the mask.
pub fn write_sample(dir: &Path, id: &str, sample: &Sample) -> Result<Entry> {
    let e = Entry {
        id: id.to_string(),
        left: format!("{id}_left.pgm").into(),
        right: format!("{id}_right.pgm").into(),
        depth: format!("{id}_depth.pfm").into(),
        occlusion: format!("{id}_occ.pgm").into(),
    };
    sample.left.write_pnm(dir.join(&e.left))?;
    sample.right.write_pnm(dir.join(&e.right))?;
    save_depth_pfm(&sample.depth, dir.join(&e.depth))?;
    let mask = ImageBuf::gray_from_fn(sample.width(), sample.height(), |x, y| {
        let p = y * sample.width() + x;
        if sample.occluded[p] || sample.out_of_frame[p] {
            1.0
        } else {
            0.0
        }
    });
    mask.write_pnm(dir.join(&e.occlusion))?;
    Ok(e)
}
