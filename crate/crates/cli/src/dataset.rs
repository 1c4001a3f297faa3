//! Dataset directories.
//!
//! Two layouts are recognized, by file stem (extensions `.nii.gz`, `.nii`
//! or `.vhdr`):
//!
//! * synthetic, as written by `stagereg synth`: `<id>` is the moving phantom,
//!   `<id>_deformed` the fixed image, `<id>_mask` the moving mask and
//!   `<id>_field` the ground-truth field. The fixed mask is the moving mask
//!   warped by that field.
//! * scans: every other `<id>` is a volume with an optional `<id>_mask`;
//!   all ordered pairs of distinct scans are used, in seeded order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use stagereg::data::{pair_indices, preprocess, resize_mask};
use stagereg::evaluation::{warp_mask, EvalPair};
use stagereg::io::{load_field, load_mask, load_volume};
use stagereg::resample::resize_trilinear;
use stagereg::training::TrainPair;
use stagereg::volume::{LabelMask, Shape3, Volume};
use stagereg::warp::DeformationField;
use stagereg::Error;

use crate::config::PreprocessConfig;

const EXTENSIONS: [&str; 3] = [".nii.gz", ".nii", ".vhdr"];

fn stem(name: &str) -> Option<&str> {
    EXTENSIONS.iter().find_map(|e| name.strip_suffix(e))
}

#[derive(Debug)]
pub enum Layout {
    Synthetic(Vec<String>),
    Scans(Vec<String>),
}

#[derive(Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    files: BTreeMap<String, PathBuf>,
    pub layout: Layout,
}

/// How loaded volumes are brought to the network grid.
#[derive(Clone, Copy, Debug)]
pub struct Prep {
    pub target: Shape3,
    pub window: Option<PreprocessConfig>,
}

impl Prep {
    pub fn volume_checked(&self, v: Volume<f32>, path: &Path) -> Result<Volume<f32>, Error> {
        match self.window {
            Some(w) => preprocess(&v, w.window_low, w.window_high, self.target),
            None if v.shape != self.target => Err(Error::Shape(format!(
                "{} is {}, the network expects {} (enable [preprocess] to resize)",
                path.display(),
                v.shape,
                self.target
            ))),
            None => Ok(v),
        }
    }

    fn mask(&self, m: LabelMask) -> LabelMask {
        if self.window.is_some() && m.shape != self.target {
            resize_mask(&m, self.target)
        } else {
            m
        }
    }

    fn field(&self, f: DeformationField<f32>) -> Result<DeformationField<f32>, Error> {
        if self.window.is_some() && f.shape() != self.target {
            DeformationField::new(
                self.target,
                resize_trilinear(f.data(), 3, f.shape(), self.target),
            )
        } else {
            Ok(f)
        }
    }
}

impl Dataset {
    pub fn scan(dir: &Path) -> Result<Self, Error> {
        let entries = fs::read_dir(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let mut files = BTreeMap::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(s) = stem(&name) {
                files.insert(s.to_string(), entry.path());
            }
        }
        let synthetic: Vec<String> = files
            .keys()
            .filter_map(|k| k.strip_suffix("_deformed"))
            .map(str::to_string)
            .collect();
        let layout = if synthetic.is_empty() {
            Layout::Scans(
                files
                    .keys()
                    .filter(|k| !k.ends_with("_mask") && !k.ends_with("_field"))
                    .cloned()
                    .collect(),
            )
        } else {
            Layout::Synthetic(synthetic)
        };
        let ds = Dataset {
            dir: dir.to_path_buf(),
            files,
            layout,
        };
        if ds.is_empty() {
            return Err(Error::Validation(format!(
                "no volumes found in {}",
                dir.display()
            )));
        }
        Ok(ds)
    }

    pub fn is_empty(&self) -> bool {
        match &self.layout {
            Layout::Synthetic(ids) => ids.is_empty(),
            Layout::Scans(ids) => ids.len() < 2,
        }
    }

    fn path(&self, key: &str) -> Option<&PathBuf> {
        self.files.get(key)
    }

    /// Files the layout needs but the directory lacks.
    pub fn missing(&self, with_masks: bool) -> Vec<String> {
        let mut need = Vec::new();
        match &self.layout {
            Layout::Synthetic(ids) => {
                for id in ids {
                    need.push(id.clone());
                    if with_masks {
                        need.push(format!("{id}_mask"));
                        need.push(format!("{id}_field"));
                    }
                }
            }
            Layout::Scans(ids) => {
                if with_masks {
                    need.extend(ids.iter().map(|id| format!("{id}_mask")));
                }
            }
        }
        need.retain(|k| !self.files.contains_key(k));
        need.into_iter()
            .map(|k| self.dir.join(k).display().to_string())
            .collect()
    }

    fn require(&self, with_masks: bool) -> Result<(), Error> {
        let missing = self.missing(with_masks);
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "dataset {} is missing: {}",
                self.dir.display(),
                missing.join(", ")
            )))
        }
    }

    fn volume(&self, key: &str, prep: &Prep) -> Result<Volume<f32>, Error> {
        let path = self.path(key).expect("checked by require");
        prep.volume_checked(load_volume(path)?, path)
    }

    fn mask(&self, key: &str, prep: &Prep) -> Result<LabelMask, Error> {
        Ok(prep.mask(load_mask(self.path(key).expect("checked by require"))?))
    }

    pub fn train_pairs(&self, prep: &Prep, seed: u64) -> Result<Vec<TrainPair<f32>>, Error> {
        self.require(false)?;
        match &self.layout {
            Layout::Synthetic(ids) => ids
                .iter()
                .map(|id| {
                    Ok(TrainPair::new(
                        self.volume(&format!("{id}_deformed"), prep)?,
                        self.volume(id, prep)?,
                    ))
                })
                .collect(),
            Layout::Scans(ids) => {
                let vols = ids
                    .iter()
                    .map(|id| self.volume(id, prep).map(std::sync::Arc::new))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(pair_indices(vols.len(), seed)?
                    .into_iter()
                    .map(|(f, m)| TrainPair {
                        fixed: vols[f].clone(),
                        moving: vols[m].clone(),
                    })
                    .collect())
            }
        }
    }

    pub fn eval_pairs(&self, prep: &Prep, seed: u64) -> Result<Vec<EvalPair<f32>>, Error> {
        self.require(true)?;
        match &self.layout {
            Layout::Synthetic(ids) => ids
                .iter()
                .map(|id| {
                    let field = prep.field(load_field(
                        self.path(&format!("{id}_field")).expect("required"),
                    )?)?;
                    let moving_mask = self.mask(&format!("{id}_mask"), prep)?;
                    Ok(EvalPair {
                        fixed_id: format!("{id}_deformed"),
                        moving_id: id.clone(),
                        fixed: self.volume(&format!("{id}_deformed"), prep)?,
                        moving: self.volume(id, prep)?,
                        fixed_mask: warp_mask(&moving_mask, &field)?,
                        moving_mask,
                        true_field: Some(field),
                    })
                })
                .collect(),
            Layout::Scans(ids) => {
                let vols = ids
                    .iter()
                    .map(|id| {
                        Ok((
                            self.volume(id, prep)?,
                            self.mask(&format!("{id}_mask"), prep)?,
                        ))
                    })
                    .collect::<Result<Vec<_>, Error>>()?;
                Ok(pair_indices(vols.len(), seed)?
                    .into_iter()
                    .map(|(f, m)| EvalPair {
                        fixed_id: ids[f].clone(),
                        moving_id: ids[m].clone(),
                        fixed: vols[f].0.clone(),
                        moving: vols[m].0.clone(),
                        fixed_mask: vols[f].1.clone(),
                        moving_mask: vols[m].1.clone(),
                        true_field: None,
                    })
                    .collect())
            }
        }
    }
}
