//! Deterministic synthetic hand-face interaction clips.
//!
//! Each clip lives directly at latent resolution: a static Gaussian face blob
//! and a hand blob that approaches a class-specific contact point, touches
//! the face, and retreats. While hand and face overlap, the face intensity is
//! dented around the contact point in proportion to the overlap area. Masks
//! are the thresholded blob supports.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, TensorMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_FILE: &str = "dataset.ialt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// The 18 interaction sub-classes: nose pinches, strokes of four facial
/// regions with either hand, cheek pokes with one to three fingers, and
/// palm swipes in either direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InteractionClass {
    LhNosePinch,
    RhNosePinch,
    LhEyebrow,
    LhForehead,
    LhChin,
    LhEar,
    RhEyebrow,
    RhForehead,
    RhChin,
    RhEar,
    LeftCheekOneFinger,
    RightCheekOneFinger,
    LeftCheekTwoFingers,
    RightCheekTwoFingers,
    LeftCheekThreeFingers,
    RightCheekThreeFingers,
    SwipeLeftToRight,
    SwipeRightToLeft,
}

use InteractionClass::*;

impl InteractionClass {
    pub const ALL: [InteractionClass; 18] = [
        LhNosePinch,
        RhNosePinch,
        LhEyebrow,
        LhForehead,
        LhChin,
        LhEar,
        RhEyebrow,
        RhForehead,
        RhChin,
        RhEar,
        LeftCheekOneFinger,
        RightCheekOneFinger,
        LeftCheekTwoFingers,
        RightCheekTwoFingers,
        LeftCheekThreeFingers,
        RightCheekThreeFingers,
        SwipeLeftToRight,
        SwipeRightToLeft,
    ];

    pub fn label(self) -> &'static str {
        match self {
            LhNosePinch => "LH-NP",
            RhNosePinch => "RH-NP",
            LhEyebrow => "LH-EB",
            LhForehead => "LH-FH",
            LhChin => "LH-CH",
            LhEar => "LH-ER",
            RhEyebrow => "RH-EB",
            RhForehead => "RH-FH",
            RhChin => "RH-CH",
            RhEar => "RH-ER",
            LeftCheekOneFinger => "LC-SF",
            RightCheekOneFinger => "RC-SF",
            LeftCheekTwoFingers => "LC-TF",
            RightCheekTwoFingers => "RC-TF",
            LeftCheekThreeFingers => "LC-TH",
            RightCheekThreeFingers => "RC-TH",
            SwipeLeftToRight => "LR-FS",
            SwipeRightToLeft => "RL-FS",
        }
    }

    pub fn from_label(label: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.label() == label)
            .ok_or_else(|| Error::UnknownClass(label.to_string()))
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    /// Every class in the taxonomy involves touching the face.
    pub fn has_contact(self) -> bool {
        true
    }

    fn left_handed(self) -> bool {
        matches!(
            self,
            LhNosePinch
                | LhEyebrow
                | LhForehead
                | LhChin
                | LhEar
                | LeftCheekOneFinger
                | LeftCheekTwoFingers
                | LeftCheekThreeFingers
                | SwipeLeftToRight
        )
    }

    /// Contact offset from the face center, in units of the face radius
    /// (row, column), for the left-hand variant.
    fn contact_offset(self) -> (f64, f64) {
        match self {
            LhNosePinch | RhNosePinch => (0.0, 0.0),
            LhEyebrow | RhEyebrow => (-0.35, -0.4),
            LhForehead | RhForehead => (-0.6, -0.1),
            LhChin | RhChin => (0.6, -0.1),
            LhEar | RhEar => (0.0, -0.6),
            _ => (0.25, -0.45),
        }
    }

    fn hand_scale(self) -> f64 {
        match self {
            LeftCheekOneFinger | RightCheekOneFinger => 0.8,
            LeftCheekTwoFingers | RightCheekTwoFingers | LhNosePinch | RhNosePinch => 1.0,
            LeftCheekThreeFingers | RightCheekThreeFingers => 1.2,
            SwipeLeftToRight | SwipeRightToLeft => 1.3,
            _ => 1.0,
        }
    }
}

impl fmt::Display for InteractionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl Serialize for InteractionClass {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for InteractionClass {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        InteractionClass::from_label(&s).map_err(serde::de::Error::custom)
    }
}

/// Grid and channel sizes of generated clips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub face_dim: usize,
}

impl Default for ClipDims {
    fn default() -> Self {
        Self { frames: 4, height: 8, width: 8, channels: 4, face_dim: 16 }
    }
}

impl ClipDims {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 3 {
            return Err(Error::InvalidDimension(format!(
                "clips need at least 3 frames (approach, contact, retreat), got {}",
                self.frames
            )));
        }
        if self.height < 6 || self.width < 6 {
            return Err(Error::InvalidDimension(format!(
                "grid must be at least 6x6, got {}x{}",
                self.height, self.width
            )));
        }
        if self.channels < 2 || self.face_dim < 1 {
            return Err(Error::InvalidDimension("need >= 2 channels and face_dim >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub class: InteractionClass,
    pub seed: u64,
    /// `[f, h, w, c]`, values in `[-1, 1]`.
    pub frames: Tensor,
    /// `[f, h, w, 1]`, binary.
    pub hand_mask: Tensor,
    /// `[f, h, w, 1]`, binary.
    pub face_mask: Tensor,
    /// Unit-norm identity vector, `[face_dim]`.
    pub identity: Tensor,
}

impl SynthClip {
    /// Frames where the hand and face masks share at least one cell.
    pub fn contact_frames(&self) -> Vec<usize> {
        let (f, per) = (self.hand_mask.shape()[0], self.hand_mask.numel() / self.hand_mask.shape()[0]);
        (0..f)
            .filter(|&t| {
                let h = &self.hand_mask.data()[t * per..(t + 1) * per];
                let m = &self.face_mask.data()[t * per..(t + 1) * per];
                h.iter().zip(m).any(|(&a, &b)| a > 0.0 && b > 0.0)
            })
            .collect()
    }
}

fn gaussian(y: f64, x: f64, cy: f64, cx: f64, sigma: f64) -> f64 {
    (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * sigma * sigma)).exp()
}

/// Position of the hand at progress `u ∈ [0, 1]` through the clip. The
/// approach factor is 1 at both ends and 0 around the middle.
fn approach_factor(u: f64) -> f64 {
    (((2.0 * u - 1.0).abs() - 0.4) / 0.6).max(0.0)
}

/// Generates one clip. Deterministic in `(class, seed, dims)`.
pub fn generate_clip(class: InteractionClass, seed: u64, dims: &ClipDims) -> Result<SynthClip> {
    dims.validate()?;
    let ClipDims { frames: nf, height: h, width: w, channels: c, face_dim } = *dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = h.min(w) as f64;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let face_sigma = 0.2 * side;
    let face_radius = face_sigma * (2.0 * 2f64.ln()).sqrt();
    let hand_sigma = 0.12 * side * class.hand_scale();
    let mirror = if class.left_handed() { 1.0 } else { -1.0 };

    let (oy, ox) = class.contact_offset();
    let jy = rng.gen_range(-0.1..0.1);
    let jx = rng.gen_range(-0.1..0.1);
    let contact = (cy + (oy + jy) * face_radius, cx + mirror * (ox + jx) * face_radius);
    let start = if class.left_handed() { (h as f64 - 1.0, 0.0) } else { (h as f64 - 1.0, w as f64 - 1.0) };

    let mut identity: Vec<f64> = (0..face_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = identity.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    identity.iter_mut().for_each(|x| *x /= norm);
    let tints: Vec<f64> = (0..c).map(|k| 0.6 + 0.4 * identity[k % face_dim].abs().min(1.0)).collect();

    let cells = h * w;
    let mut frames = vec![0.0; nf * cells * c];
    let mut hand_mask = vec![0.0; nf * cells];
    let mut face_mask = vec![0.0; nf * cells];
    for t in 0..nf {
        let u = t as f64 / (nf - 1) as f64;
        let hand_pos = match class {
            SwipeLeftToRight | SwipeRightToLeft => {
                let x = if class.left_handed() { u * (w as f64 - 1.0) } else { (1.0 - u) * (w as f64 - 1.0) };
                (contact.0, x)
            }
            _ => {
                let a = approach_factor(u);
                (contact.0 + a * (start.0 - contact.0), contact.1 + a * (start.1 - contact.1))
            }
        };
        let mut face = vec![0.0; cells];
        let mut hand = vec![0.0; cells];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                face[i] = gaussian(y as f64, x as f64, cy, cx, face_sigma);
                hand[i] = gaussian(y as f64, x as f64, hand_pos.0, hand_pos.1, hand_sigma);
                face_mask[t * cells + i] = if face[i] > 0.5 { 1.0 } else { 0.0 };
                hand_mask[t * cells + i] = if hand[i] > 0.5 { 1.0 } else { 0.0 };
            }
        }
        let hm = &hand_mask[t * cells..(t + 1) * cells];
        let fm = &face_mask[t * cells..(t + 1) * cells];
        let overlap = hm.iter().zip(fm).filter(|(&a, &b)| a > 0.0 && b > 0.0).count();
        let hand_area = hm.iter().filter(|&&a| a > 0.0).count().max(1);
        if overlap > 0 {
            let depth = 0.6 * overlap as f64 / hand_area as f64;
            for y in 0..h {
                for x in 0..w {
                    face[y * w + x] -= depth * gaussian(y as f64, x as f64, hand_pos.0, hand_pos.1, 0.7 * hand_sigma);
                }
            }
        }
        for i in 0..cells {
            let base = (t * cells + i) * c;
            for k in 0..c {
                let v = match k {
                    0 => face[i],
                    1 => hand[i],
                    _ if k % 2 == 0 => tints[k] * face[i] - 0.5 * hand[i],
                    _ => tints[k] * (face[i] - hand[i]),
                };
                let noise = 0.02 * rng.sample::<f64, _>(StandardNormal);
                frames[base + k] = (v + noise).clamp(-1.0, 1.0);
            }
        }
    }
    let clip = SynthClip {
        class,
        seed,
        frames: Tensor::new(vec![nf, h, w, c], frames)?,
        hand_mask: Tensor::new(vec![nf, h, w, 1], hand_mask)?,
        face_mask: Tensor::new(vec![nf, h, w, 1], face_mask)?,
        identity: Tensor::new(vec![face_dim], identity)?,
    };
    if class.has_contact() && clip.contact_frames().is_empty() {
        return Err(Error::InvalidDimension(format!("grid {h}x{w} too coarse for {class} contact")));
    }
    Ok(clip)
}

/// Label-based entry point.
pub fn generate_clip_by_label(label: &str, seed: u64, dims: &ClipDims) -> Result<SynthClip> {
    generate_clip(InteractionClass::from_label(label)?, seed, dims)
}

/// Per-clip seed derived from the dataset seed and the clip index.
pub fn clip_seed(dataset_seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = dataset_seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Every tenth clip is held out, giving a 90/10 split.
pub fn split_for(index: usize) -> Split {
    if index % 10 == 9 {
        Split::Test
    } else {
        Split::Train
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: usize,
    pub class: InteractionClass,
    pub split: Split,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub dims: ClipDims,
    pub clips: Vec<ClipEntry>,
    pub histogram: BTreeMap<String, usize>,
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.clips.iter().filter(|c| c.split == split).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub clips: Vec<SynthClip>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest.clips.iter().filter(|c| c.split == split).map(|c| c.id).collect()
    }
}

/// Generates `num_clips` clips (classes assigned round-robin) in memory.
pub fn generate_dataset(num_clips: usize, seed: u64, dims: &ClipDims) -> Result<Dataset> {
    if num_clips < InteractionClass::ALL.len() {
        return Err(Error::ConfigInvalid(format!(
            "need at least {} clips (one per class), got {num_clips}",
            InteractionClass::ALL.len()
        )));
    }
    dims.validate()?;
    let clips = (0..num_clips)
        .into_par_iter()
        .map(|i| generate_clip(InteractionClass::ALL[i % 18], clip_seed(seed, i), dims))
        .collect::<Result<Vec<_>>>()?;
    let mut histogram = BTreeMap::new();
    for c in InteractionClass::ALL {
        histogram.insert(c.label().to_string(), 0);
    }
    let entries = clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            *histogram.get_mut(c.class.label()).unwrap() += 1;
            ClipEntry { id: i, class: c.class, split: split_for(i), seed: c.seed }
        })
        .collect();
    let manifest = DatasetManifest { version: MANIFEST_VERSION, seed, dims: *dims, clips: entries, histogram };
    Ok(Dataset { manifest, clips })
}

fn clip_key(i: usize, field: &str) -> String {
    format!("clip.{i:05}.{field}")
}

/// Writes the clip tensors and the JSON manifest into `dir`.
pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut map = TensorMap::new();
    for (i, c) in dataset.clips.iter().enumerate() {
        map.insert(clip_key(i, "frames"), c.frames.clone());
        map.insert(clip_key(i, "hand"), c.hand_mask.clone());
        map.insert(clip_key(i, "face"), c.face_mask.clone());
        map.insert(clip_key(i, "identity"), c.identity.clone());
    }
    container::save(dir.join(DATASET_FILE), &map)?;
    let mut json = serde_json::to_string_pretty(&dataset.manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

/// Generates and writes a dataset, returning its manifest.
pub fn build_dataset(num_clips: usize, seed: u64, dims: &ClipDims, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let ds = generate_dataset(num_clips, seed, dims)?;
    write_dataset(&ds, dir)?;
    Ok(ds.manifest)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::FormatVersionMismatch(format!("manifest version {}", manifest.version)));
    }
    let mut map = container::load(dir.join(DATASET_FILE))?;
    let mut take = |i: usize, field: &str| {
        let k = clip_key(i, field);
        map.remove(&k).ok_or(Error::MissingEntry(k))
    };
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for e in &manifest.clips {
        clips.push(SynthClip {
            class: e.class,
            seed: e.seed,
            frames: take(e.id, "frames")?,
            hand_mask: take(e.id, "hand")?,
            face_mask: take(e.id, "face")?,
            identity: take(e.id, "identity")?,
        });
    }
    Ok(Dataset { manifest, clips })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_frame_is_pre_contact_and_contact_follows() {
        let dims = ClipDims::default();
        for class in InteractionClass::ALL {
            for seed in 0..5 {
                let clip = generate_clip(class, seed, &dims).unwrap();
                let contact = clip.contact_frames();
                assert!(!contact.contains(&0), "{class} seed {seed} touches at frame 0");
                assert!(!contact.is_empty(), "{class} seed {seed} never touches");
            }
        }
    }

    #[test]
    fn values_and_masks_in_range() {
        let clip = generate_clip(LhNosePinch, 3, &ClipDims::default()).unwrap();
        assert!(clip.frames.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        for m in [&clip.hand_mask, &clip.face_mask] {
            assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
        let per = 64;
        for t in 0..4 {
            assert!(clip.face_mask.data()[t * per..(t + 1) * per].iter().any(|&v| v == 1.0));
        }
        let n: f64 = clip.identity.data().iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn labels_round_trip_and_unknown() {
        for c in InteractionClass::ALL {
            assert_eq!(InteractionClass::from_label(c.label()).unwrap(), c);
        }
        assert!(matches!(InteractionClass::from_label("XX-YY"), Err(Error::UnknownClass(_))));
        assert!(generate_clip_by_label("nope", 0, &ClipDims::default()).is_err());
    }

    #[test]
    fn split_arithmetic() {
        let ds = generate_dataset(180, 1, &ClipDims::default()).unwrap();
        assert_eq!(ds.manifest.count(Split::Train), 162);
        assert_eq!(ds.manifest.count(Split::Test), 18);
        assert_eq!(ds.manifest.histogram.values().sum::<usize>(), 180);
        assert!(ds.manifest.histogram.values().all(|&n| n == 10));
        let ds = generate_dataset(18, 1, &ClipDims::default()).unwrap();
        assert!(ds.manifest.histogram.values().all(|&n| n == 1));
        assert!(generate_dataset(5, 1, &ClipDims::default()).is_err());
    }

    #[test]
    fn rejects_tiny_dims() {
        let dims = ClipDims { frames: 2, ..ClipDims::default() };
        assert!(matches!(generate_clip(LhChin, 0, &dims), Err(Error::InvalidDimension(_))));
    }
}
