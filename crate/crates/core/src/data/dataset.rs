//! Silhouette datasets laid out as `root/<subject>/<sequence>/<frame>.pgm`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pgm::{self, Gray};
use crate::error::{Error, Result};
use crate::retrieval::SeqId;

pub const FRAME_HEIGHT: usize = 64;
pub const FRAME_WIDTH: usize = 44;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceEntry {
    pub name: String,
    pub dir: PathBuf,
    /// Frame files in lexicographic order.
    pub frames: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectEntry {
    pub name: String,
    pub sequences: Vec<SequenceEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub subjects: Vec<SubjectEntry>,
    /// Frame files that could not be read or parsed.
    pub skipped_files: usize,
    pub skipped_sequences: usize,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Indexes a dataset directory. Only `.pgm` files count as frames; files with
/// an unreadable header are skipped and counted, as are sequences left empty.
pub fn scan(root: &Path) -> Result<DatasetIndex> {
    let mut subjects = Vec::new();
    let (mut skipped_files, mut skipped_sequences) = (0, 0);
    for sdir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let mut sequences = Vec::new();
        for qdir in sorted_entries(&sdir)?.into_iter().filter(|p| p.is_dir()) {
            let mut frames = Vec::new();
            for f in sorted_entries(&qdir)? {
                if !f.is_file() || f.extension().is_none_or(|e| e != "pgm") {
                    continue;
                }
                match pgm::probe(&f) {
                    Ok(_) => frames.push(f),
                    Err(e) => {
                        log::warn!("skipping frame: {e}");
                        skipped_files += 1;
                    }
                }
            }
            if frames.is_empty() {
                log::warn!("skipping empty sequence {}", qdir.display());
                skipped_sequences += 1;
                continue;
            }
            sequences.push(SequenceEntry {
                name: file_name(&qdir),
                dir: qdir,
                frames,
            });
        }
        if !sequences.is_empty() {
            subjects.push(SubjectEntry {
                name: file_name(&sdir),
                sequences,
            });
        }
    }
    if subjects.is_empty() {
        return Err(Error::format(root, "no subject directories with .pgm frames"));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        subjects,
        skipped_files,
        skipped_sequences,
    })
}

impl DatasetIndex {
    pub fn sequence_count(&self) -> usize {
        self.subjects.iter().map(|s| s.sequences.len()).sum()
    }

    pub fn frame_count(&self) -> usize {
        self.subjects
            .iter()
            .flat_map(|s| &s.sequences)
            .map(|q| q.frames.len())
            .sum()
    }

    pub fn id(&self, subject: usize, sequence: usize) -> SeqId {
        let s = &self.subjects[subject];
        SeqId::new(&s.name, &s.sequences[sequence].name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Probe,
    Gallery,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "probe" => Ok(Split::Probe),
            "gallery" => Ok(Split::Gallery),
            _ => Err(Error::Config(format!("unknown split {s:?} (train | probe | gallery)"))),
        }
    }
}

/// How sequences are divided into train / probe / gallery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Protocol {
    /// Every subject trains; its last `per_subject` sequences are held out as
    /// probes and the remaining (training) sequences form the gallery.
    HeldOut { per_subject: usize },
    /// The last `test_subjects` subjects are unseen in training; each has its
    /// first sequence as probe and the rest as gallery.
    Gait3d { test_subjects: usize },
    /// As `Gait3d`, with two probe sequences per test subject.
    Grew { test_subjects: usize },
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol::HeldOut { per_subject: 1 }
    }
}

/// `(subject, sequence)` index pairs of one split, in dataset order.
pub fn split(index: &DatasetIndex, protocol: Protocol, which: Split) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    match protocol {
        Protocol::HeldOut { per_subject } => {
            for (s, subj) in index.subjects.iter().enumerate() {
                let n = subj.sequences.len();
                if n <= per_subject {
                    return Err(Error::Protocol(format!(
                        "subject {} has {n} sequences; holding out {per_subject} leaves none for training",
                        subj.name
                    )));
                }
                let range = match which {
                    Split::Probe => n - per_subject..n,
                    Split::Train | Split::Gallery => 0..n - per_subject,
                };
                out.extend(range.map(|q| (s, q)));
            }
        }
        Protocol::Gait3d { test_subjects } | Protocol::Grew { test_subjects } => {
            let probes = if matches!(protocol, Protocol::Grew { .. }) { 2 } else { 1 };
            let n = index.subjects.len();
            if test_subjects == 0 || test_subjects >= n {
                return Err(Error::Protocol(format!(
                    "{test_subjects} test subjects out of {n} leaves no train or test set"
                )));
            }
            let first_test = n - test_subjects;
            let subjects = match which {
                Split::Train => 0..first_test,
                _ => first_test..n,
            };
            for s in subjects {
                let count = index.subjects[s].sequences.len();
                if which != Split::Train && count <= probes {
                    return Err(Error::Protocol(format!(
                        "test subject {} needs more than {probes} sequences",
                        index.subjects[s].name
                    )));
                }
                let range = match which {
                    Split::Train => 0..count,
                    Split::Probe => 0..probes,
                    Split::Gallery => probes..count,
                };
                out.extend(range.map(|q| (s, q)));
            }
        }
    }
    Ok(out)
}

/// Thresholds at 128 and normalises to `height x width`.
///
/// Frames already at the target size are only thresholded. Otherwise the
/// silhouette's bounding box is widened (or heightened) to the target aspect
/// ratio around its centre and resampled by nearest neighbour; pixels outside
/// the image read as background. Frames without foreground are resampled whole.
pub fn normalize(img: &Gray, height: usize, width: usize) -> Vec<u8> {
    let bin: Vec<u8> = img.pixels.iter().map(|&v| u8::from(v >= 128)).collect();
    if img.height == height && img.width == width {
        return bin;
    }
    let (iw, ih) = (img.width, img.height);
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for y in 0..ih {
        for x in 0..iw {
            if bin[y * iw + x] == 1 {
                bbox = Some(match bbox {
                    None => (y, y, x, x),
                    Some((y0, y1, x0, x1)) => (y0.min(y), y1.max(y), x0.min(x), x1.max(x)),
                });
            }
        }
    }
    let (oy, ox, rh, rw) = match bbox {
        None => (0.0, 0.0, ih as f64, iw as f64),
        Some((y0, y1, x0, x1)) => {
            let (bh, bw) = ((y1 - y0 + 1) as f64, (x1 - x0 + 1) as f64);
            let aspect = width as f64 / height as f64;
            let rh = bh.max(bw / aspect);
            let rw = rh * aspect;
            let cy = y0 as f64 + bh / 2.0;
            let cx = x0 as f64 + bw / 2.0;
            (cy - rh / 2.0, cx - rw / 2.0, rh, rw)
        }
    };
    let mut out = vec![0u8; height * width];
    for y in 0..height {
        let sy = (oy + (y as f64 + 0.5) * rh / height as f64).floor();
        if sy < 0.0 || sy >= ih as f64 {
            continue;
        }
        for x in 0..width {
            let sx = (ox + (x as f64 + 0.5) * rw / width as f64).floor();
            if sx >= 0.0 && sx < iw as f64 {
                out[y * width + x] = bin[sy as usize * iw + sx as usize];
            }
        }
    }
    out
}

/// Reads one frame as a `64 x 44` map of 0/1 values.
pub fn load_frame(path: &Path) -> Result<Vec<u8>> {
    Ok(normalize(&pgm::read(path)?, FRAME_HEIGHT, FRAME_WIDTH))
}

/// Frames of one sequence held in memory, `len * 64 * 44` 0/1 values.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSequence {
    pub id: SeqId,
    /// Dense subject index within the loaded set.
    pub label: usize,
    pub len: usize,
    pub pixels: Vec<u8>,
}

impl LoadedSequence {
    pub fn frame(&self, i: usize) -> &[u8] {
        let n = FRAME_HEIGHT * FRAME_WIDTH;
        &self.pixels[i * n..][..n]
    }

    /// Selected frames as `[indices.len(), 1, 64, 44]` values.
    pub fn gather(&self, indices: &[usize], out: &mut Vec<f32>) {
        for &i in indices {
            out.extend(self.frame(i).iter().map(|&v| v as f32));
        }
    }
}

/// Loads the given `(subject, sequence)` pairs in parallel, keeping at most
/// `max_frames` leading frames of each. Labels number the distinct subjects
/// in order of first appearance.
pub fn load_sequences(index: &DatasetIndex, items: &[(usize, usize)], max_frames: usize) -> Result<Vec<LoadedSequence>> {
    let mut label_of = std::collections::BTreeMap::new();
    for &(s, _) in items {
        let next = label_of.len();
        label_of.entry(s).or_insert(next);
    }
    items
        .par_iter()
        .map(|&(s, q)| {
            let entry = &index.subjects[s].sequences[q];
            let frames = &entry.frames[..entry.frames.len().min(max_frames)];
            let mut pixels = Vec::with_capacity(frames.len() * FRAME_HEIGHT * FRAME_WIDTH);
            for f in frames {
                pixels.extend(load_frame(f)?);
            }
            Ok(LoadedSequence {
                id: index.id(s, q),
                label: label_of[&s],
                len: frames.len(),
                pixels,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Gray {
        let mut pixels = vec![0u8; h * w];
        for y in y0..y1 {
            for x in x0..x1 {
                pixels[y * w + x] = 255;
            }
        }
        Gray {
            width: w,
            height: h,
            pixels,
        }
    }

    #[test]
    fn target_size_is_thresholded_only() {
        let mut g = boxed(64, 44, 0, 0, 0, 0);
        g.pixels[5] = 255;
        g.pixels[6] = 127;
        g.pixels[7] = 128;
        let n = normalize(&g, 64, 44);
        assert_eq!(&n[4..8], &[0, 1, 0, 1]);
        assert_eq!(n.iter().map(|&v| v as usize).sum::<usize>(), 2);
    }

    #[test]
    fn exact_aspect_box_fills_frame() {
        let g = boxed(128, 88, 32, 96, 22, 66);
        assert!(normalize(&g, 64, 44).iter().all(|&v| v == 1));
    }

    #[test]
    fn narrow_box_keeps_proportions() {
        // 40x20 box -> full height, width 20 * 64 / 40 = 32 columns.
        let g = boxed(128, 88, 40, 80, 30, 50);
        let n = normalize(&g, 64, 44);
        let count: usize = n.iter().map(|&v| v as usize).sum();
        assert_eq!(count, 64 * 32);
        assert!(n[..6].iter().all(|&v| v == 0));
    }

    #[test]
    fn empty_frame_stays_empty() {
        let g = boxed(100, 70, 0, 0, 0, 0);
        assert!(normalize(&g, 64, 44).iter().all(|&v| v == 0));
    }
}
