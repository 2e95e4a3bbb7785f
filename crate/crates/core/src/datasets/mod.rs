//! Synthetic compositional-action videos and their on-disk format.
//!
//! A dataset directory holds `manifest.json` and one directory per sample
//! with frames `frame_0000.ppm`, `frame_0001.ppm`, ... (binary PPM, 8-bit
//! RGB). Pixel bytes map to model inputs as `v / 127.5 − 1`.

mod canvas;
mod compositional;
mod concat3;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};
use canvas::{byte_to_unit, unit_to_byte};

pub use compositional::{
    generate_level1, generate_level2, modifier_events, LEVEL1_ACTIONS, LEVEL1_PAIRS,
    LEVEL2_ACTIONS, LEVEL2_TRIPLETS, MODIFIERS, OBJECTS,
};
pub use concat3::{category_name as concat3_category_name, category_triple, generate_concat3, PRIMITIVES};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Concat3,
    Level1,
    Level2,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Concat3 => "concat3",
            Task::Level1 => "level1",
            Task::Level2 => "level2",
        })
    }
}

fn default_extent() -> usize {
    24
}

fn default_fpp() -> usize {
    8
}

fn default_subjects() -> usize {
    6
}

/// Generator settings. Generation is a pure function of this value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub task: Task,
    #[serde(default = "default_extent")]
    pub height: usize,
    #[serde(default = "default_extent")]
    pub width: usize,
    /// Frames per motion primitive (concat3 videos have three primitives).
    #[serde(default = "default_fpp")]
    pub frames_per_primitive: usize,
    /// Video length for level1/level2; defaults to 16 and 30.
    #[serde(default)]
    pub frames: Option<usize>,
    #[serde(default = "default_subjects")]
    pub subjects: usize,
    /// Videos per subject and category; defaults to 1, 6 and 2.
    #[serde(default)]
    pub repeats: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(task: Task) -> Self {
        SynthSpec {
            task,
            height: default_extent(),
            width: default_extent(),
            frames_per_primitive: default_fpp(),
            frames: None,
            subjects: default_subjects(),
            repeats: None,
            seed: 0,
        }
    }

    pub fn video_frames(&self) -> usize {
        match self.task {
            Task::Concat3 => 3 * self.frames_per_primitive,
            Task::Level1 => self.frames.unwrap_or(16),
            Task::Level2 => self.frames.unwrap_or(30),
        }
    }

    pub fn repeats(&self) -> usize {
        self.repeats.unwrap_or(match self.task {
            Task::Concat3 => 1,
            Task::Level1 => 6,
            Task::Level2 => 2,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::config(format!(
                "frames must be at least 16×16, got {}×{}",
                self.height, self.width
            )));
        }
        if self.subjects == 0 || self.repeats() == 0 {
            return Err(Error::config("subjects and repeats must be positive"));
        }
        if self.task == Task::Concat3 && self.frames.is_some() {
            return Err(Error::config(
                "concat3 video length is set by frames_per_primitive",
            ));
        }
        let min = match self.task {
            Task::Concat3 => 3,
            Task::Level1 => 4,
            Task::Level2 => 15,
        };
        if self.video_frames() < min {
            return Err(Error::config(format!(
                "{} videos need at least {min} frames",
                self.task
            )));
        }
        Ok(())
    }

    fn validate_for(&self, task: Task) -> Result<()> {
        if self.task != task {
            return Err(Error::config(format!(
                "spec is for {}, generator is {task}",
                self.task
            )));
        }
        self.validate()
    }
}

/// Name and category names of one output head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadInfo {
    pub name: String,
    pub categories: Vec<String>,
}

impl HeadInfo {
    fn new(name: &str, categories: &[&str]) -> Self {
        HeadInfo {
            name: name.into(),
            categories: categories.iter().map(|c| c.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    /// Directory name on disk, e.g. `sample_0007`.
    pub id: String,
    pub subject: usize,
    /// `3×H×W` frames in `[−1, 1]`.
    pub frames: Vec<Tensor>,
    /// Category index per head, in [`Dataset::heads`] order.
    pub labels: Vec<usize>,
    /// Frames where the hand first touches the object, one per event
    /// (level 2 only).
    pub contacts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub heads: Vec<HeadInfo>,
    pub samples: Vec<VideoSample>,
}

impl Dataset {
    pub fn head_sizes(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.categories.len()).collect()
    }

    /// Sorted distinct subject ids.
    pub fn subjects(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.samples.iter().map(|x| x.subject).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Frame extents `[channels, height, width]` of the first sample.
    pub fn frame_dims(&self) -> Option<[usize; 3]> {
        let s = self.samples.first()?.frames.first()?.shape();
        Some([s[0], s[1], s[2]])
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            task: self.task,
            heads: self.heads.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn check(&self) -> Result<()> {
        let dims = self.frame_dims();
        let sizes = self.head_sizes();
        for s in &self.samples {
            if s.frames.is_empty() {
                return Err(Error::shape(format!("{} has no frames", s.id)));
            }
            if s.frames.iter().any(|f| Some([f.shape()[0], f.shape()[1], f.shape()[2]]) != dims || f.shape().len() != 3) {
                return Err(Error::shape(format!("{} has frames of mixed extents", s.id)));
            }
            if s.labels.len() != sizes.len() || s.labels.iter().zip(&sizes).any(|(l, n)| l >= n) {
                return Err(Error::shape(format!("{} has labels {:?} for heads {sizes:?}", s.id, s.labels)));
            }
        }
        Ok(())
    }
}

/// Generates the dataset described by `spec` from `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    let mut rng = SeededRng::new(spec.seed);
    match spec.task {
        Task::Concat3 => generate_concat3(spec, &mut rng),
        Task::Level1 => generate_level1(spec, &mut rng),
        Task::Level2 => generate_level2(spec, &mut rng),
    }
}

/// Per-pixel absolute difference to `background`, mapped so that an
/// unchanged pixel is `−1`: `|f − b| − 1`.
pub fn background_subtract(frames: &[Tensor], background: &Tensor) -> Result<Vec<Tensor>> {
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if f.shape() != background.shape() {
                return Err(Error::shape(format!(
                    "frame {i} is {:?}, background is {:?}",
                    f.shape(),
                    background.shape()
                )));
            }
            let data = f
                .data()
                .iter()
                .zip(background.data())
                .map(|(a, b)| (a - b).abs() - 1.0)
                .collect();
            Tensor::from_vec(f.shape(), data)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    task: Task,
    height: usize,
    width: usize,
    heads: Vec<HeadInfo>,
    samples: Vec<ManifestSample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSample {
    dir: String,
    subject: usize,
    frames: usize,
    labels: BTreeMap<String, usize>,
    category_names: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    contacts: Vec<usize>,
}

pub fn frame_file_name(t: usize) -> String {
    format!("frame_{t:04}.ppm")
}

fn encode_ppm(frame: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = frame.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("PPM frames need 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let n = h * w;
    let d = frame.data();
    out.reserve(3 * n);
    for i in 0..n {
        for ch in 0..3 {
            out.push(unit_to_byte(d[ch * n + i]));
        }
    }
    Ok(out)
}

fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::format(path, m.to_string());
    let mut fields = Vec::with_capacity(4);
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && (bytes[at].is_ascii_whitespace() || bytes[at] == b'#') {
            if bytes[at] == b'#' {
                while at < bytes.len() && bytes[at] != b'\n' {
                    at += 1;
                }
            } else {
                at += 1;
            }
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(bad("truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..at]).map_err(|_| bad("PPM header is not ASCII"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PPM header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let body = &bytes[at + 1..];
    let n = h * w;
    if body.len() != 3 * n {
        return Err(bad(&format!("expected {} pixel bytes, found {}", 3 * n, body.len())));
    }
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        for ch in 0..3 {
            data[ch * n + i] = byte_to_unit(body[3 * i + ch]);
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Writes `dataset` under `dir` (created if needed).
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.check()?;
    let [_, height, width] = dataset.frame_dims().unwrap_or([3, 0, 0]);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let sdir = dir.join(&s.id);
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        for (t, f) in s.frames.iter().enumerate() {
            let p = sdir.join(frame_file_name(t));
            fs::write(&p, encode_ppm(f)?).map_err(|e| Error::io(&p, e))?;
        }
        let mut labels = BTreeMap::new();
        let mut names = BTreeMap::new();
        for (head, &l) in dataset.heads.iter().zip(&s.labels) {
            labels.insert(head.name.clone(), l);
            names.insert(head.name.clone(), head.categories[l].clone());
        }
        entries.push(ManifestSample {
            dir: s.id.clone(),
            subject: s.subject,
            frames: s.frames.len(),
            labels,
            category_names: names,
            contacts: s.contacts.clone(),
        });
    }
    let manifest = Manifest {
        task: dataset.task,
        height,
        width,
        heads: dataset.heads.clone(),
        samples: entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    let p = dir.join(MANIFEST_FILE);
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for (i, entry) in manifest.samples.into_iter().enumerate() {
        let mut labels = Vec::with_capacity(manifest.heads.len());
        for head in &manifest.heads {
            let l = *entry.labels.get(&head.name).ok_or_else(|| {
                Error::format(&mpath, format!("samples[{i}].labels has no \"{}\"", head.name))
            })?;
            if l >= head.categories.len() {
                return Err(Error::format(
                    &mpath,
                    format!("samples[{i}].labels.{} = {l} is out of range", head.name),
                ));
            }
            labels.push(l);
        }
        if entry.labels.len() != manifest.heads.len() {
            return Err(Error::format(&mpath, format!("samples[{i}].labels names unknown heads")));
        }
        let sdir = dir.join(&entry.dir);
        let mut frames = Vec::with_capacity(entry.frames);
        for t in 0..entry.frames {
            let p = sdir.join(frame_file_name(t));
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let f = decode_ppm(&p, &bytes)?;
            if f.shape() != [3, manifest.height, manifest.width] {
                return Err(Error::format(&p, format!(
                    "frame is {:?}, manifest says {}×{}",
                    &f.shape()[1..],
                    manifest.height,
                    manifest.width
                )));
            }
            frames.push(f);
        }
        samples.push(VideoSample {
            id: entry.dir,
            subject: entry.subject,
            frames,
            labels,
            contacts: entry.contacts,
        });
    }
    let ds = Dataset {
        task: manifest.task,
        heads: manifest.heads,
        samples,
    };
    ds.check()?;
    Ok(ds)
}
