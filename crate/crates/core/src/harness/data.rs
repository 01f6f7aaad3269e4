//! Synthetic video tasks.
//!
//! * `motion8`: a square drifts one pixel per frame in one of eight compass
//!   directions over a noisy background, wrapping at the borders. Label is
//!   the direction index.
//! * `flash-order`: a red or green patch flashes for three frames in the
//!   first quarter of the clip and again in the last quarter. Label is
//!   `2·first + last` with red = 0, green = 1, so two of the four classes
//!   differ only in the order of the flashes.
//!
//! Clip `i` of `(task, seed)` comes from its own random stream and has label
//! `i mod K`, so any prefix of a multiple of `K` clips is class-balanced.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::{self, Entry, Payload};
use crate::tensor::{Scalar, Tensor};

/// Background noise stays below this level in every channel.
const NOISE: f32 = 0.25;
const FLASH_FRAMES: usize = 3;
const DIRECTIONS: [(isize, isize); 8] = [
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Motion8,
    FlashOrder,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Motion8 => "motion8",
            Task::FlashOrder => "flash-order",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Task::Motion8 => 8,
            Task::FlashOrder => 4,
        }
    }

    fn id(self) -> u64 {
        match self {
            Task::Motion8 => 1,
            Task::FlashOrder => 2,
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "motion8" => Ok(Task::Motion8),
            "flash-order" => Ok(Task::FlashOrder),
            _ => Err(Error::Dataset(format!(
                "unknown task {s:?} (expected motion8 or flash-order)"
            ))),
        }
    }
}

/// One generated clip, `3×T×H×W` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClip {
    pub pixels: Tensor<f32>,
    pub label: usize,
    pub task: Task,
    pub seed: u64,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub seed: u64,
    pub clips: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

struct Canvas {
    t: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Canvas {
    fn noise(t: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..3 * t * h * w)
            .map(|_| rng.random::<f32>() * NOISE)
            .collect();
        Self { t, h, w, data }
    }

    fn paint(&mut self, frame: usize, y: usize, x: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[((c * self.t + frame) * self.h + y) * self.w + x] = v;
        }
    }

    fn into_tensor(self) -> Tensor<f32> {
        Tensor::from_parts(vec![3, self.t, self.h, self.w], self.data)
    }
}

fn clip_rng(task: Task, seed: u64, index: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(index as u64).to_le_bytes());
    key[16..24].copy_from_slice(&task.id().to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn check_dims(task: Task, t: usize, h: usize, w: usize) -> Result<()> {
    let min_t = match task {
        Task::Motion8 => 2,
        Task::FlashOrder => 4 * FLASH_FRAMES,
    };
    if t < min_t || h < 4 || w < 4 {
        return Err(Error::Dataset(format!(
            "{}: clip {t}x{h}x{w} too small (need T >= {min_t}, H, W >= 4)",
            task.name()
        )));
    }
    Ok(())
}

/// Clip `index` of the `(task, seed)` stream.
pub fn gen_clip(
    task: Task,
    index: usize,
    t: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<SyntheticClip> {
    check_dims(task, t, h, w)?;
    let mut rng = clip_rng(task, seed, index);
    let label = index % task.num_classes();
    let mut canvas = Canvas::noise(t, h, w, &mut rng);
    match task {
        Task::Motion8 => {
            let side = (h.min(w) / 8).max(2);
            let mut rgb: [f32; 3] = std::array::from_fn(|_| rng.random::<f32>());
            rgb[rng.random_range(0..3)] = 1.0;
            let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
            let (dy, dx) = DIRECTIONS[label];
            for f in 0..t {
                let y = (y0 as isize + dy * f as isize).rem_euclid(h as isize) as usize;
                let x = (x0 as isize + dx * f as isize).rem_euclid(w as isize) as usize;
                for i in 0..side {
                    for j in 0..side {
                        canvas.paint(f, (y + i) % h, (x + j) % w, rgb);
                    }
                }
            }
        }
        Task::FlashOrder => {
            let quarter = t / 4;
            let colors = [label / 2, label % 2];
            let starts = [
                rng.random_range(0..=quarter - FLASH_FRAMES),
                rng.random_range(t - quarter..=t - FLASH_FRAMES),
            ];
            let side = (h.min(w) / 4).max(2);
            for (color, start) in colors.into_iter().zip(starts) {
                let (y, x) = (
                    rng.random_range(0..=h - side),
                    rng.random_range(0..=w - side),
                );
                let rgb = if color == 0 {
                    [1.0, 0.1, 0.1]
                } else {
                    [0.1, 1.0, 0.1]
                };
                for f in start..start + FLASH_FRAMES {
                    for i in 0..side {
                        for j in 0..side {
                            canvas.paint(f, y + i, x + j, rgb);
                        }
                    }
                }
            }
        }
    }
    Ok(SyntheticClip {
        pixels: canvas.into_tensor(),
        label,
        task,
        seed,
        index,
    })
}

/// Recovers the label of a clip from its pixels alone.
pub fn derive_label(task: Task, pixels: &Tensor<f32>) -> Option<usize> {
    let [_, t, h, w]: [usize; 4] = pixels.shape().try_into().ok()?;
    let px = |c: usize, f: usize, y: usize, x: usize| pixels.data()[((c * t + f) * h + y) * w + x];
    match task {
        Task::Motion8 => {
            let lit = |f: usize, y: usize, x: usize| (0..3).any(|c| px(c, f, y, x) > 0.5);
            (0..8).find(|&k| {
                let (dy, dx) = DIRECTIONS[k];
                (0..h).all(|y| {
                    (0..w).all(|x| {
                        let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
                        let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
                        lit(1, y, x) == lit(0, sy, sx)
                    })
                })
            })
        }
        Task::FlashOrder => {
            let flash = |f: usize| -> Option<usize> {
                (0..h)
                    .flat_map(|y| (0..w).map(move |x| (y, x)))
                    .find_map(
                        |(y, x)| match (px(0, f, y, x) > 0.9, px(1, f, y, x) > 0.9) {
                            (true, false) => Some(0),
                            (false, true) => Some(1),
                            _ => None,
                        },
                    )
            };
            let first = (0..t).find_map(flash)?;
            let last = (0..t).rev().find_map(flash)?;
            Some(2 * first + last)
        }
    }
}

/// `n` clips of the `(task, seed)` stream starting at clip `offset`.
pub fn gen_dataset_range(
    task: Task,
    offset: usize,
    n: usize,
    t: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Dataset> {
    let mut clips = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in offset..offset + n {
        let c = gen_clip(task, i, t, h, w, seed)?;
        clips.push(c.pixels);
        labels.push(c.label);
    }
    Ok(Dataset {
        task,
        seed,
        clips,
        labels,
    })
}

pub fn gen_dataset(
    task: Task,
    n: usize,
    t: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Dataset> {
    gen_dataset_range(task, 0, n, t, h, w, seed)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn clip_shape(&self) -> Option<&[usize]> {
        self.clips.first().map(|c| c.shape())
    }

    /// Stacks the clips at `indices` into an `N×3×T×H×W` batch.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let shape = self.clips[indices[0]].shape().to_vec();
        let mut data = Vec::with_capacity(indices.len() * self.clips[indices[0]].numel());
        for &i in indices {
            data.extend(self.clips[i].data().iter().map(|&v| T::of(v as f64)));
        }
        let mut full = vec![indices.len()];
        full.extend(shape);
        (
            Tensor::from_parts(full, data),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn to_entries(&self) -> Vec<Entry> {
        let meta = format!("task={}\nseed={}\n", self.task.name(), self.seed);
        let mut out = vec![Entry::new("__meta__", Payload::Bytes(meta.into_bytes()))];
        out.extend(
            self.clips
                .iter()
                .enumerate()
                .map(|(i, c)| Entry::new(format!("clip/{i}"), Payload::F32(c.clone()))),
        );
        if !self.labels.is_empty() {
            let labels = self.labels.iter().map(|&l| l as f64).collect();
            out.push(Entry::new(
                "labels",
                Payload::F64(Tensor::from_parts(vec![self.labels.len()], labels)),
            ));
        }
        out
    }

    pub fn from_entries(entries: Vec<Entry>) -> Result<Self> {
        let bad = |m: String| Error::Dataset(m);
        let mut task = None;
        let mut seed = None;
        let mut clips: BTreeMap<usize, Tensor<f32>> = BTreeMap::new();
        let mut labels = None;
        for e in entries {
            match (e.name.as_str(), e.payload) {
                ("__meta__", Payload::Bytes(b)) => {
                    let text =
                        String::from_utf8(b).map_err(|_| bad("metadata is not UTF-8".into()))?;
                    for line in text.lines() {
                        match line.split_once('=') {
                            Some(("task", v)) => task = Some(v.parse::<Task>()?),
                            Some(("seed", v)) => {
                                seed = Some(
                                    v.parse::<u64>()
                                        .map_err(|_| bad(format!("bad seed {v:?}")))?,
                                )
                            }
                            _ => return Err(bad(format!("bad metadata line {line:?}"))),
                        }
                    }
                }
                ("labels", Payload::F64(t)) if t.rank() == 1 => {
                    let ls = t
                        .data()
                        .iter()
                        .map(|&v| {
                            (v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64)
                                .then_some(v as usize)
                                .ok_or_else(|| bad(format!("bad label {v}")))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    labels = Some(ls);
                }
                (name, Payload::F32(t)) if name.starts_with("clip/") => {
                    // Only canonical decimal indices, so two names never map to one slot.
                    let i: usize = name[5..]
                        .parse()
                        .ok()
                        .filter(|i: &usize| i.to_string() == name[5..])
                        .ok_or_else(|| bad(format!("bad clip name {name:?}")))?;
                    if t.rank() != 4 || t.shape()[0] != 3 {
                        return Err(bad(format!(
                            "{name}: expected 3×T×H×W, got {:?}",
                            t.shape()
                        )));
                    }
                    if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                        return Err(bad(format!("{name}: pixel outside [0, 1]")));
                    }
                    clips.insert(i, t);
                }
                (name, _) => return Err(bad(format!("unexpected tensor {name:?}"))),
            }
        }
        if let Some(i) = clips
            .keys()
            .enumerate()
            .find_map(|(want, &i)| (i != want).then_some(want))
        {
            return Err(bad(format!("missing clip/{i}")));
        }
        let clips: Vec<Tensor<f32>> = clips.into_values().collect();
        let labels = labels.unwrap_or_default();
        if labels.len() != clips.len() {
            return Err(bad(format!(
                "{} labels for {} clips",
                labels.len(),
                clips.len()
            )));
        }
        let task = task.ok_or_else(|| bad("missing task".into()))?;
        if let Some(&l) = labels.iter().find(|&&l| l >= task.num_classes()) {
            return Err(bad(format!("label {l} out of range for {}", task.name())));
        }
        if let Some(s) = clips.first().map(|c| c.shape().to_vec()) {
            if clips.iter().any(|c| c.shape() != s.as_slice()) {
                return Err(bad("clips differ in shape".into()));
            }
        }
        Ok(Self {
            task,
            seed: seed.ok_or_else(|| bad("missing seed".into()))?,
            clips,
            labels,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(&self.to_entries())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let entries = checkpoint::decode(bytes).map_err(|e| Error::Dataset(e.to_string()))?;
        Self::from_entries(entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
