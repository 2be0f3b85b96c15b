//! Phantom generation, volume files, preprocessing and sample assembly.

mod phantom;
mod preprocess;
mod samples;
mod volume;

use std::path::Path;

pub use phantom::{generate_phantom, Phantom, PhantomConfig};
pub use preprocess::{
    crop, crop_skull_square, normalize, preprocess, resample_bilinear, resample_mask, skull_square,
    CropBox, FOREGROUND_FRACTION,
};
pub use samples::{
    augment, augment_with, kfold_split, make_triplets, patch_origins, patchify, stitch, Fold,
};
pub use volume::{
    decode_mask, decode_volume, encode_mask, encode_volume, read_mask, read_volume, write_mask,
    write_volume, Grid, MaskVolume, Volume,
};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::io_util::write_text;

pub const MANIFEST: &str = "manifest.txt";

/// A volume and its label map under a stable identifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub volume: Volume,
    pub mask: MaskVolume,
}

/// Settings for `gen-data`: a phantom template plus the number of volumes.
/// Volume `i` is generated with seed `seed + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub volumes: usize,
    pub phantom: PhantomConfig,
    pub spacing_mm: f32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            volumes: 4,
            phantom: PhantomConfig::default(),
            spacing_mm: 1.0,
        }
    }
}

impl DatasetConfig {
    pub fn from_keys(mut kv: KeyValues) -> Result<Self> {
        let d = PhantomConfig::default();
        let cfg = Self {
            volumes: kv.take_or("volumes", 4)?,
            spacing_mm: kv.take_or("spacing_mm", 1.0)?,
            phantom: PhantomConfig {
                size: kv.take_or("size", d.size)?,
                slices: kv.take_or("slices", d.slices)?,
                lesions: (
                    kv.take_or("lesions_min", d.lesions.0)?,
                    kv.take_or("lesions_max", d.lesions.1)?,
                ),
                radius: (
                    kv.take_or("radius_min", d.radius.0)?,
                    kv.take_or("radius_max", d.radius.1)?,
                ),
                extent: (
                    kv.take_or("extent_min", d.extent.0)?,
                    kv.take_or("extent_max", d.extent.1)?,
                ),
                gain: kv.take_or("gain", d.gain)?,
                distractors: kv.take_or("distractors", d.distractors)?,
                smoothness: kv.take_or("smoothness", d.smoothness)?,
                seed: kv.take_or("seed", d.seed)?,
            },
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.volumes == 0 {
            return Err(Error::Config("volumes must be at least 1".into()));
        }
        if !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return Err(Error::Config(format!(
                "spacing_mm must be positive, got {}",
                self.spacing_mm
            )));
        }
        self.phantom.validate()
    }
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..cfg.volumes)
        .map(|i| {
            let p = generate_phantom(&PhantomConfig {
                seed: cfg.phantom.seed.wrapping_add(i as u64),
                ..cfg.phantom.clone()
            })?;
            let spacing = (cfg.spacing_mm, cfg.spacing_mm);
            Ok(Sample {
                id: format!("vol{i:03}"),
                volume: Volume {
                    spacing,
                    ..p.volume
                },
                mask: MaskVolume { spacing, ..p.mask },
            })
        })
        .collect()
}

/// Writes `<id>.img.tscv`, `<id>.mask.tscv` per sample and a manifest listing
/// one `id image mask` line per sample.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for s in samples {
        let (img, mask) = (format!("{}.img.tscv", s.id), format!("{}.mask.tscv", s.id));
        write_volume(&dir.join(&img), &s.volume)?;
        write_mask(&dir.join(&mask), &s.mask)?;
        manifest.push_str(&format!("{} {img} {mask}\n", s.id));
    }
    write_text(&dir.join(MANIFEST), &manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [id, img, mask] = parts[..] else {
            return Err(Error::Config(format!(
                "{}: line {}: expected `id image mask`",
                path.display(),
                i + 1
            )));
        };
        let volume = read_volume(&dir.join(img))?;
        let mask = read_mask(&dir.join(mask))?;
        if !volume.same_geometry(&mask) {
            return Err(Error::Config(format!(
                "sample {id}: mask geometry differs from its volume"
            )));
        }
        out.push(Sample {
            id: id.to_string(),
            volume,
            mask,
        });
    }
    if out.is_empty() {
        return Err(Error::Config(format!(
            "{} lists no volumes",
            path.display()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip() {
        let cfg = DatasetConfig {
            volumes: 2,
            phantom: PhantomConfig {
                size: 32,
                slices: 3,
                ..PhantomConfig::default()
            },
            spacing_mm: 0.8,
        };
        let samples = generate_dataset(&cfg).unwrap();
        assert_eq!(samples[1].id, "vol001");
        assert_ne!(samples[0].volume, samples[1].volume);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), samples);
    }

    #[test]
    fn dataset_config_keys() {
        let kv =
            KeyValues::parse("volumes = 3\nsize = 32\nlesions_min = 1\nlesions_max = 2\nseed = 9")
                .unwrap();
        let cfg = DatasetConfig::from_keys(kv).unwrap();
        assert_eq!(
            (
                cfg.volumes,
                cfg.phantom.size,
                cfg.phantom.lesions,
                cfg.phantom.seed
            ),
            (3, 32, (1, 2), 9)
        );
        let kv = KeyValues::parse("lesions_max = 2").unwrap();
        assert!(DatasetConfig::from_keys(kv).is_err());
        let kv = KeyValues::parse("volume = 3").unwrap();
        assert!(DatasetConfig::from_keys(kv).is_err());
    }
}
