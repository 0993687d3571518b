//! On-disk episode format, version 1.
//!
//! One binary blob per episode plus a JSON manifest per dataset directory.
//! Blob layout (little-endian throughout):
//!
//! | offset | size | field |
//! |--------|------|-------|
//! | 0      | 4    | magic `DVEP` |
//! | 4      | 4    | u32 format version (= 1) |
//! | 8      | 2    | u16 embodiment id length E |
//! | 10     | E    | embodiment id, utf8 |
//! | ..     | 2    | u16 task name length T, then T bytes utf8 |
//! | ..     | 4    | u32 step count S |
//! | ..     | 1    | u8 view count V |
//! | ..     | 2+2  | u16 view width W, u16 view height H |
//! | ..     | 2+2  | u16 proprio dim P, u16 action dim D |
//! | ..     | 1    | u8 palette entries C, then 3·C bytes RGB |
//! | ..     | 2    | u16 instruction token count L, then 4·L bytes u32 ids |
//! | ..     | S·(V·W·H + 4·P + 4·D) | per step: palette pixels, proprio f32, action f32 |
//! | ..     | 4    | u32 footer length J, then J bytes of annotation JSON |
//!
//! Blobs are written to a temp file and renamed; the manifest is rewritten
//! the same way, so a crash never leaves a truncated committed file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use deskvla_model::embodiment::EmbodimentId;
use serde::{Deserialize, Serialize};

use crate::annotate::SubstepAnnotation;
use crate::raster::{Image, Palette};
use crate::{Result, WorldError};

pub const EPISODE_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DVEP";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub views: Vec<Image>,
    pub proprio: Vec<f32>,
    pub action: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub embodiment: EmbodimentId,
    pub task: String,
    pub instruction: Vec<u32>,
    pub palette: Palette,
    pub steps: Vec<StepRecord>,
    pub annotation: SubstepAnnotation,
}

impl EpisodeRecord {
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.steps.first() else {
            return Err(WorldError::Format("episode with zero steps".into()));
        };
        let (v, p, d) = (first.views.len(), first.proprio.len(), first.action.len());
        for (i, s) in self.steps.iter().enumerate() {
            if s.views.len() != v || s.proprio.len() != p || s.action.len() != d {
                return Err(WorldError::Format(format!(
                    "step {i} has ragged widths (views {} proprio {} action {})",
                    s.views.len(),
                    s.proprio.len(),
                    s.action.len()
                )));
            }
            for img in &s.views {
                if img.width != first.views[0].width || img.height != first.views[0].height {
                    return Err(WorldError::Format(format!("step {i} view size mismatch")));
                }
            }
        }
        Ok(())
    }

    /// Exact committed blob size in bytes.
    pub fn blob_size(&self) -> usize {
        let first = &self.steps[0];
        let (w, h) = (first.views[0].width, first.views[0].height);
        let header = 4
            + 4
            + 2
            + self.embodiment.as_str().len()
            + 2
            + self.task.len()
            + 4
            + 1
            + 2
            + 2
            + 2
            + 2
            + 1
            + 3 * self.palette.0.len()
            + 2
            + 4 * self.instruction.len();
        let per_step = first.views.len() * w * h + 4 * first.proprio.len() + 4 * first.action.len();
        let footer = 4 + serde_json::to_vec(&self.annotation).expect("serializable").len();
        header + per_step * self.steps.len() + footer
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpisodeMeta {
    pub file: String,
    pub embodiment: String,
    pub task: String,
    pub steps: usize,
    pub substeps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub episodes: Vec<EpisodeMeta>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self {
                format_version: MANIFEST_FORMAT_VERSION,
                episodes: Vec::new(),
            });
        }
        let manifest: Manifest = serde_json::from_slice(&fs::read(path)?)?;
        if manifest.format_version != MANIFEST_FORMAT_VERSION {
            return Err(WorldError::Format(format!(
                "manifest format {} unsupported",
                manifest.format_version
            )));
        }
        Ok(manifest)
    }

    fn store(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(self)?)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn push_u16(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u16).to_le_bytes());
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    push_u16(buf, s.len());
    buf.extend_from_slice(s.as_bytes());
}

/// Serialize, commit the blob, and append to the manifest. Returns the file
/// id (the blob's file name).
pub fn write_episode(rec: &EpisodeRecord, dir: &Path) -> Result<String> {
    rec.validate()?;
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest::load(dir)?;
    let file = format!("ep{:05}.bin", manifest.episodes.len());

    let first = &rec.steps[0];
    let mut buf = Vec::with_capacity(rec.blob_size());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&EPISODE_FORMAT_VERSION.to_le_bytes());
    push_str(&mut buf, rec.embodiment.as_str());
    push_str(&mut buf, &rec.task);
    buf.extend_from_slice(&(rec.steps.len() as u32).to_le_bytes());
    buf.push(first.views.len() as u8);
    push_u16(&mut buf, first.views[0].width);
    push_u16(&mut buf, first.views[0].height);
    push_u16(&mut buf, first.proprio.len());
    push_u16(&mut buf, first.action.len());
    buf.push(rec.palette.0.len() as u8);
    for rgb in &rec.palette.0 {
        buf.extend_from_slice(rgb);
    }
    push_u16(&mut buf, rec.instruction.len());
    for &id in &rec.instruction {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    for step in &rec.steps {
        for view in &step.views {
            buf.extend_from_slice(&view.pix);
        }
        for &v in &step.proprio {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &step.action {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let footer = serde_json::to_vec(&rec.annotation)?;
    buf.extend_from_slice(&(footer.len() as u32).to_le_bytes());
    buf.extend_from_slice(&footer);

    write_atomic(&dir.join(&file), &buf)?;
    manifest.episodes.push(EpisodeMeta {
        file: file.clone(),
        embodiment: rec.embodiment.as_str().to_string(),
        task: rec.task.clone(),
        steps: rec.steps.len(),
        substeps: rec.annotation.segments.len(),
    });
    manifest.store(dir)?;
    Ok(file)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(WorldError::Format(format!(
                "truncated blob: wanted {n} bytes at {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<usize> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]) as usize)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|e| WorldError::Format(e.to_string()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(4 * n)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn read_episode(path: &Path) -> Result<EpisodeRecord> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(WorldError::Format(format!(
            "{}: bad magic, not an episode blob",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != EPISODE_FORMAT_VERSION {
        return Err(WorldError::Format(format!(
            "episode format {version} unsupported (expected {EPISODE_FORMAT_VERSION})"
        )));
    }
    let embodiment = EmbodimentId::new(r.string()?);
    let task = r.string()?;
    let steps_n = r.u32()? as usize;
    let views_n = r.take(1)?[0] as usize;
    let w = r.u16()?;
    let h = r.u16()?;
    let p_dim = r.u16()?;
    let a_dim = r.u16()?;
    let pal_n = r.take(1)?[0] as usize;
    let mut palette = Vec::with_capacity(pal_n);
    for _ in 0..pal_n {
        let b = r.take(3)?;
        palette.push([b[0], b[1], b[2]]);
    }
    let instr_n = r.u16()?;
    let mut instruction = Vec::with_capacity(instr_n);
    for _ in 0..instr_n {
        instruction.push(r.u32()?);
    }
    let mut steps = Vec::with_capacity(steps_n);
    for _ in 0..steps_n {
        let mut views = Vec::with_capacity(views_n);
        for _ in 0..views_n {
            views.push(Image {
                width: w,
                height: h,
                pix: r.take(w * h)?.to_vec(),
            });
        }
        let proprio = r.f32s(p_dim)?;
        let action = r.f32s(a_dim)?;
        steps.push(StepRecord {
            views,
            proprio,
            action,
        });
    }
    let footer_len = r.u32()? as usize;
    let annotation: SubstepAnnotation = serde_json::from_slice(r.take(footer_len)?)?;
    if r.pos != buf.len() {
        return Err(WorldError::Format(format!(
            "{} trailing bytes after footer",
            buf.len() - r.pos
        )));
    }
    Ok(EpisodeRecord {
        embodiment,
        task,
        instruction,
        palette: Palette(palette),
        steps,
        annotation,
    })
}

/// Load every episode a manifest lists.
pub fn load_dataset(dir: &Path) -> Result<Vec<EpisodeRecord>> {
    let manifest = Manifest::load(dir)?;
    manifest
        .episodes
        .iter()
        .map(|meta| read_episode(&dir.join(&meta.file)))
        .collect()
}

pub fn dataset_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(Manifest::load(dir)?
        .episodes
        .iter()
        .map(|m| dir.join(&m.file))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::Segment;
    use crate::raster::default_palette;

    fn sample_record(steps: usize) -> EpisodeRecord {
        let view = Image {
            width: 8,
            height: 8,
            pix: (0..64).map(|i| (i % 5) as u8).collect(),
        };
        EpisodeRecord {
            embodiment: EmbodimentId::new("arm3"),
            task: "pick-place".to_string(),
            instruction: vec![4, 9, 2],
            palette: default_palette(),
            steps: (0..steps)
                .map(|i| StepRecord {
                    views: vec![view.clone(), view.clone(), view.clone()],
                    proprio: vec![i as f32, 0.5, -0.25, 0.0, 0.1, 0.9],
                    action: vec![0.1, -0.2, 0.3, 1.0],
                })
                .collect(),
            annotation: SubstepAnnotation {
                segments: vec![Segment {
                    start: 0,
                    end: steps,
                    phrase: "reach red disc".to_string(),
                }],
            },
        }
    }

    #[test]
    fn write_then_read_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let rec = sample_record(7);
        let file = write_episode(&rec, dir.path()).unwrap();
        let back = read_episode(&dir.path().join(&file)).unwrap();
        assert_eq!(rec, back);
        let manifest = Manifest::load(dir.path()).unwrap();
        assert_eq!(manifest.episodes.len(), 1);
        assert_eq!(manifest.episodes[0].steps, 7);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let rec = sample_record(3);
        let file = write_episode(&rec, dir.path()).unwrap();
        let path = dir.path().join(&file);
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        let err = read_episode(&path).unwrap_err();
        assert!(matches!(err, WorldError::Format(_)));
    }

    #[test]
    fn blob_size_matches_the_formula() {
        let dir = tempfile::tempdir().unwrap();
        let rec = sample_record(100);
        let file = write_episode(&rec, dir.path()).unwrap();
        let on_disk = fs::metadata(dir.path().join(&file)).unwrap().len() as usize;
        assert_eq!(on_disk, rec.blob_size());
    }

    #[test]
    fn manifest_count_matches_blob_count_and_all_parse() {
        let dir = tempfile::tempdir().unwrap();
        for _ in 0..3 {
            write_episode(&sample_record(4), dir.path()).unwrap();
        }
        let blobs = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .path()
                    .extension()
                    .is_some_and(|x| x == "bin")
            })
            .count();
        let manifest = Manifest::load(dir.path()).unwrap();
        assert_eq!(manifest.episodes.len(), blobs);
        for rec in load_dataset(dir.path()).unwrap() {
            rec.validate().unwrap();
        }
    }
}
