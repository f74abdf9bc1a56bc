//! Paired datasets on disk, few-shot splits and aligned patch sampling.

use std::fs;
use std::path::{Path, PathBuf};

use drtl_autograd::Tensor;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, DrtlError, Result};
use crate::image::Image;
use crate::rng::{self, Rng};
use crate::synth::DegradationRecord;

pub const PATCH_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub index: usize,
    pub clean: String,
    pub distorted: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<DegradationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: String,
    pub count: usize,
    pub seed: u64,
    pub items: Vec<ManifestItem>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairItem {
    pub index: usize,
    pub clean: Image,
    pub distorted: Image,
    pub record: Option<DegradationRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub kind: String,
    pub items: Vec<PairItem>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// SHA-256 over dimensions and 8-bit pixels of every pair.
    pub fn content_hash(&self) -> String {
        hash_pairs(&self.items)
    }
}

pub fn hash_pairs(items: &[PairItem]) -> String {
    let mut h = Sha256::new();
    for it in items {
        for img in [&it.clean, &it.distorted] {
            let (a, b, c) = img.dims();
            for d in [a, b, c] {
                h.update((d as u64).to_le_bytes());
            }
            h.update(img.to_u8());
        }
    }
    hex::encode(h.finalize())
}

/// Writes `<root>/<name>/{clean,distorted}/<i>.png` and `manifest.json`.
///
/// Files go to a scratch directory first; an existing dataset of the same
/// name is replaced only once everything has been written.
pub fn write_dataset(
    root: &Path,
    name: &str,
    items: &[(Image, Image, Option<DegradationRecord>)],
    seed: u64,
) -> Result<DatasetManifest> {
    for (i, (c, d, _)) in items.iter().enumerate() {
        if !c.same_shape(d) {
            return Err(DrtlError::Item {
                index: i,
                reason: "clean and distorted shapes differ".into(),
            });
        }
    }
    let final_dir = root.join(name);
    let tmp = root.join(format!(".{name}.partial"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    let res = (|| {
        for sub in ["clean", "distorted"] {
            fs::create_dir_all(tmp.join(sub)).map_err(io_err(tmp.join(sub)))?;
        }
        let mut entries = Vec::with_capacity(items.len());
        for (i, (c, d, rec)) in items.iter().enumerate() {
            let entry = ManifestItem {
                index: i,
                clean: format!("clean/{i}.png"),
                distorted: format!("distorted/{i}.png"),
                record: rec.clone(),
            };
            c.save_png(&tmp.join(&entry.clean))?;
            d.save_png(&tmp.join(&entry.distorted))?;
            entries.push(entry);
        }
        let manifest = DatasetManifest {
            kind: name.to_string(),
            count: entries.len(),
            seed,
            items: entries,
        };
        let path = tmp.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(io_err(&path))?;
        Ok(manifest)
    })();
    match res {
        Ok(m) => {
            if final_dir.exists() {
                fs::remove_dir_all(&final_dir).map_err(io_err(&final_dir))?;
            }
            fs::rename(&tmp, &final_dir).map_err(io_err(&final_dir))?;
            Ok(m)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

pub fn write_paired(root: &Path, ds: &PairedDataset, seed: u64) -> Result<DatasetManifest> {
    let items: Vec<_> = ds
        .items
        .iter()
        .map(|it| (it.clean.clone(), it.distorted.clone(), it.record.clone()))
        .collect();
    write_dataset(root, &ds.kind, &items, seed)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| DrtlError::Load {
        path: path.to_path_buf(),
        reason: format!("bad manifest: {e}"),
    })
}

/// Loads every pair listed in a manifest, checking shapes.
pub fn load_pairs(manifest_path: &Path) -> Result<PairedDataset> {
    let manifest = read_manifest(manifest_path)?;
    let base: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut items = Vec::with_capacity(manifest.items.len());
    for it in &manifest.items {
        let load = |rel: &str| {
            Image::load_png(&base.join(rel)).map_err(|e| DrtlError::Item {
                index: it.index,
                reason: e.to_string(),
            })
        };
        let clean = load(&it.clean)?;
        let distorted = load(&it.distorted)?;
        if !clean.same_shape(&distorted) {
            return Err(DrtlError::Item {
                index: it.index,
                reason: format!("clean {:?} vs distorted {:?}", clean.dims(), distorted.dims()),
            });
        }
        items.push(PairItem {
            index: it.index,
            clean,
            distorted,
            record: it.record.clone(),
        });
    }
    Ok(PairedDataset {
        kind: manifest.kind,
        items,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotSplit {
    pub train: Vec<PairItem>,
    pub eval: Vec<PairItem>,
}

/// Uniformly chooses `k` items for training; the rest form the eval set.
/// Both parts keep dataset order.
pub fn few_shot_split(ds: &PairedDataset, k: usize, seed: u64) -> Result<FewShotSplit> {
    if k == 0 || k > ds.len() {
        return Err(DrtlError::Param(format!(
            "k must be in [1, {}], got {k}",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut rng::stream(seed, "few-shot-split", 0));
    let mut chosen = vec![false; ds.len()];
    for &i in &idx[..k] {
        chosen[i] = true;
    }
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (i, it) in ds.items.iter().enumerate() {
        if chosen[i] {
            train.push(it.clone());
        } else {
            eval.push(it.clone());
        }
    }
    Ok(FewShotSplit { train, eval })
}

/// Horizontal flip followed by `rot` counter-clockwise quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augment {
    pub flip: bool,
    pub rot: u8,
}

impl Augment {
    /// Applies to a planar `C x P x P` patch.
    pub fn apply(&self, planar: &[f32], channels: usize, p: usize) -> Vec<f32> {
        let mut out = vec![0.0; planar.len()];
        for c in 0..channels {
            let src = &planar[c * p * p..][..p * p];
            let dst = &mut out[c * p * p..][..p * p];
            for i in 0..p {
                for j in 0..p {
                    // output (i, j) reads from source after undoing the rotation
                    let (mut y, mut x) = (i, j);
                    for _ in 0..self.rot % 4 {
                        // inverse of a CCW quarter turn
                        let (ny, nx) = (x, p - 1 - y);
                        y = ny;
                        x = nx;
                    }
                    if self.flip {
                        x = p - 1 - x;
                    }
                    dst[i * p + j] = src[y * p + x];
                }
            }
        }
        out
    }
}

/// A batch of pixel-aligned clean/distorted crops, `B x C x P x P`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    pub distorted: Tensor<f32>,
    pub clean: Tensor<f32>,
    /// `(item, y, x)` of each crop's top-left corner.
    pub sources: Vec<(usize, usize, usize)>,
    pub augment: Vec<Augment>,
}

impl PatchBatch {
    pub fn batch_size(&self) -> usize {
        self.sources.len()
    }

    /// `clean - distorted`, unclamped.
    pub fn residual(&self) -> Tensor<f32> {
        self.clean.zip_map(&self.distorted, |a, b| a - b)
    }
}

/// Samples aligned random crops with a shared flip/rotation per crop.
pub fn sample_patch_batch(
    pairs: &[PairItem],
    batch: usize,
    patch: usize,
    rng: &mut Rng,
) -> Result<PatchBatch> {
    if pairs.is_empty() || batch == 0 || patch == 0 {
        return Err(DrtlError::Sampling("need at least one pair, batch and patch > 0".into()));
    }
    let channels = pairs[0].clean.channels();
    for it in pairs {
        let (h, w, c) = it.clean.dims();
        if h < patch || w < patch {
            return Err(DrtlError::Sampling(format!(
                "item {} is {h}x{w}, smaller than the {patch}x{patch} patch",
                it.index
            )));
        }
        if c != channels {
            return Err(DrtlError::Sampling("mixed channel counts".into()));
        }
    }
    let per = channels * patch * patch;
    let mut dist = Vec::with_capacity(batch * per);
    let mut clean = Vec::with_capacity(batch * per);
    let mut sources = Vec::with_capacity(batch);
    let mut augment = Vec::with_capacity(batch);
    for _ in 0..batch {
        let item = rng.gen_range(0..pairs.len());
        let it = &pairs[item];
        let y = rng.gen_range(0..=it.clean.height() - patch);
        let x = rng.gen_range(0..=it.clean.width() - patch);
        let aug = Augment {
            flip: rng.gen_bool(0.5),
            rot: rng.gen_range(0..4),
        };
        dist.extend(aug.apply(&it.distorted.crop_planar(y, x, patch), channels, patch));
        clean.extend(aug.apply(&it.clean.crop_planar(y, x, patch), channels, patch));
        sources.push((item, y, x));
        augment.push(aug);
    }
    let shape = [batch, channels, patch, patch];
    Ok(PatchBatch {
        distorted: Tensor::from_vec(&shape, dist).expect("sized above"),
        clean: Tensor::from_vec(&shape, clean).expect("sized above"),
        sources,
        augment,
    })
}

/// Elementwise `clean - distorted` as an `H x W x C` tensor, not clamped.
pub fn residual(clean: &Image, distorted: &Image) -> Result<Tensor<f32>> {
    if !clean.same_shape(distorted) {
        return Err(DrtlError::Shape(format!(
            "residual of {:?} and {:?}",
            clean.dims(),
            distorted.dims()
        )));
    }
    let (h, w, c) = clean.dims();
    let data = clean
        .data()
        .iter()
        .zip(distorted.data())
        .map(|(a, b)| a - b)
        .collect();
    Ok(Tensor::from_vec(&[h, w, c], data).expect("same shape"))
}

/// Whole images as a `1 x C x H x W` tensor.
pub fn image_tensor(img: &Image) -> Tensor<f32> {
    let (h, w, c) = img.dims();
    Tensor::from_vec(&[1, c, h, w], img.to_planar()).expect("planar size")
}
