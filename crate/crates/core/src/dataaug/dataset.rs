use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{hflip, noise, noise_flip, Image8, Provenance, Sample, Split};
use crate::boxes::{BBox, GtBox};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

/// `(train, val, test)` sizes for `n` groups: 15% each for val and test
/// (floored), the remainder to train.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let val = n * 15 / 100;
    let test = n * 15 / 100;
    (n - val - test, val, test)
}

/// Assigns splits per group (see [`Sample::group`]), so augmented variants
/// always share their original's split. Deterministic in `seed` and
/// independent of the order of `samples`.
pub fn split_dataset(samples: &mut [Sample], seed: u64) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty dataset".into()));
    }
    let mut groups: Vec<&str> = samples
        .iter()
        .map(|s| s.group.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (_, val, test) = split_counts(groups.len());
    let assignment: std::collections::HashMap<String, Split> = groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let split = if i < val {
                Split::Val
            } else if i < val + test {
                Split::Test
            } else {
                Split::Train
            };
            (g.to_string(), split)
        })
        .collect();
    for s in samples.iter_mut() {
        s.split = assignment[&s.group];
    }
    Ok(())
}

/// The original plus its noise, flip and noise-flip variants.
pub fn augment_group(original: &Sample, sigma: f64, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (noise_seed, noise_flip_seed): (u64, u64) = (rng.gen(), rng.gen());
    let variant = |s: Sample, suffix: &str, provenance| Sample {
        id: format!("{}_{suffix}", original.id),
        provenance,
        ..s
    };
    Ok(vec![
        original.clone(),
        variant(noise(original, sigma, noise_seed)?, "noise", Provenance::Noise),
        variant(hflip(original), "flip", Provenance::Flip),
        variant(
            noise_flip(original, sigma, noise_flip_seed)?,
            "noiseflip",
            Provenance::NoiseFlip,
        ),
    ])
}

/// Optionally expands every original into its four variants, then splits.
pub fn build_dataset(originals: &[Sample], sigma: f64, seed: u64, augment: bool) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(originals.len() * if augment { 4 } else { 1 });
    for o in originals {
        let s: u64 = rng.gen();
        if augment {
            out.extend(augment_group(o, sigma, s)?);
        } else {
            out.push(o.clone());
        }
    }
    split_dataset(&mut out, seed)?;
    Ok(out)
}

/// One line per box, `class cx cy w h`, coordinates normalized to `[0, 1]`.
pub fn format_annotations(boxes: &[GtBox], width: usize, height: usize) -> String {
    let (w, h) = (width as f64, height as f64);
    boxes
        .iter()
        .map(|b| {
            format!(
                "{} {} {} {} {}\n",
                b.class_id,
                b.bbox.cx / w,
                b.bbox.cy / h,
                b.bbox.w / w,
                b.bbox.h / h
            )
        })
        .collect()
}

pub fn parse_annotations(text: &str, path: &Path, width: usize, height: usize) -> Result<Vec<GtBox>> {
    let (w, h) = (width as f64, height as f64);
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected `class cx cy w h`, got {} fields", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("bad class id `{}`", fields[0])))?;
        let mut v = [0.0f64; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| err(format!("bad number `{f}`")))?;
            if !slot.is_finite() {
                return Err(err(format!("non-finite coordinate `{f}`")));
            }
        }
        let bbox = BBox::new(v[0] * w, v[1] * h, v[2] * w, v[3] * h);
        if !bbox.within(w, h) {
            return Err(err(format!("box {line:?} lies outside the image")));
        }
        boxes.push(GtBox { class_id, bbox });
    }
    Ok(boxes)
}

pub fn write_annotations(path: &Path, boxes: &[GtBox], width: usize, height: usize) -> Result<()> {
    fs::write(path, format_annotations(boxes, width, height)).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path, width: usize, height: usize) -> Result<Vec<GtBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path, width, height)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub group: String,
    /// Relative to the dataset directory.
    pub image: PathBuf,
    pub annotation: PathBuf,
    pub split: Split,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

/// A dataset directory: `manifest.json`, `images/*.png`, `labels/*.txt`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn write(root: &Path, samples: &[Sample], class_names: &[&str]) -> Result<Dataset> {
        for sub in ["images", "labels"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mut entries = Vec::with_capacity(samples.len());
        let mut seen = BTreeSet::new();
        for s in samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate sample id `{}`", s.id)));
            }
            let image = PathBuf::from("images").join(format!("{}.png", s.id));
            let annotation = PathBuf::from("labels").join(format!("{}.txt", s.id));
            s.image.save(&root.join(&image))?;
            write_annotations(&root.join(&annotation), &s.boxes, s.image.width, s.image.height)?;
            entries.push(ManifestEntry {
                id: s.id.clone(),
                group: s.group.clone(),
                image,
                annotation,
                split: s.split,
                provenance: s.provenance,
            });
        }
        let manifest = DatasetManifest {
            format_version: MANIFEST_VERSION,
            class_names: class_names.iter().map(|s| s.to_string()).collect(),
            entries,
        };
        let mpath = root.join(MANIFEST_FILE);
        fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn open(root: &Path) -> Result<Dataset> {
        let mpath = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Corrupt(format!(
                "dataset manifest version {} is not supported",
                manifest.format_version
            )));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn entries(&self, split: Option<Split>) -> impl Iterator<Item = &ManifestEntry> {
        self.manifest
            .entries
            .iter()
            .filter(move |e| split.is_none_or(|s| e.split == s))
    }

    pub fn load_entry(&self, entry: &ManifestEntry) -> Result<Sample> {
        let image = Image8::load(&self.root.join(&entry.image))?;
        let boxes = read_annotations(&self.root.join(&entry.annotation), image.width, image.height)?;
        Ok(Sample {
            id: entry.id.clone(),
            group: entry.group.clone(),
            image,
            boxes,
            split: entry.split,
            provenance: entry.provenance,
        })
    }

    pub fn load(&self, split: Option<Split>) -> Result<Vec<Sample>> {
        self.entries(split).map(|e| self.load_entry(e)).collect()
    }
}

/// Reads every PNG/PGM in `dir` (sorted by name) as an original; a `.txt`
/// with the same stem supplies the boxes, and a missing one means no boxes.
pub fn import_originals(dir: &Path) -> Result<Vec<Sample>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|x| x.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "pgm" | "ppm")
            )
        })
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let image = Image8::load(&p)?;
            let ann = p.with_extension("txt");
            let boxes = if ann.exists() {
                read_annotations(&ann, image.width, image.height)?
            } else {
                Vec::new()
            };
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
            Ok(Sample::original(id, image, boxes))
        })
        .collect()
}
