//! Paired low/normal-light image ingestion, patch sampling and synchronized
//! augmentation.
//!
//! A dataset root holds `low/` and `high/` directories whose files pair up by
//! name. Augmentation is restricted to right-angle rotations and a
//! horizontal flip so that it never resamples pixels.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::PixelImage;
use crate::tensor::Tensor;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairEntry {
    pub low: PathBuf,
    pub normal: PathBuf,
    pub scene_id: String,
}

/// Matched pairs sorted by scene id, plus the file names that had no
/// partner.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairIndex {
    pub entries: Vec<PairEntry>,
    pub unmatched: Vec<String>,
}

impl PairIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Keeps at most the first `n` pairs.
    pub fn truncate(&mut self, n: usize) {
        self.entries.truncate(n);
    }
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let supported = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if path.is_file() && supported {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Pairs `root/low/*` with `root/high/*` by file name.
pub fn scan_pairs(root: &Path) -> Result<PairIndex> {
    scan_pairs_in(&root.join("low"), &root.join("high"))
}

/// Pairs the images of two directories by file name.
pub fn scan_pairs_in(low_dir: &Path, high_dir: &Path) -> Result<PairIndex> {
    for d in [low_dir, high_dir] {
        if !d.is_dir() {
            return Err(Error::Data(format!("{} is not a directory", d.display())));
        }
    }
    let low = list_images(low_dir)?;
    let mut high = list_images(high_dir)?;
    let mut index = PairIndex::default();
    for (name, low_path) in low {
        match high.remove(&name) {
            Some(normal) => {
                let scene_id = Path::new(&name)
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or(&name)
                    .to_string();
                index.entries.push(PairEntry {
                    low: low_path,
                    normal,
                    scene_id,
                });
            }
            None => index.unmatched.push(name),
        }
    }
    index.unmatched.extend(high.into_keys());
    index.unmatched.sort();
    if index.entries.is_empty() {
        return Err(Error::Data(format!(
            "no pairs found between {} and {}",
            low_dir.display(),
            high_dir.display()
        )));
    }
    index.entries.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    Ok(index)
}

/// Decodes an 8-bit PNG or JPEG into `[0, 1]` RGB.
pub fn load_image(path: &Path) -> Result<PixelImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb8();
    PixelImage::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
}

/// Writes `img` as an 8-bit PNG.
pub fn save_png(path: &Path, img: &PixelImage) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_rgb8())
        .ok_or_else(|| Error::InvalidInput("image buffer size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// A decoded low/normal pair of equal size.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub low: PixelImage,
    pub normal: PixelImage,
    pub scene_id: String,
}

impl ImagePair {
    pub fn new(low: PixelImage, normal: PixelImage, scene_id: impl Into<String>) -> Result<Self> {
        if low.tensor().shape() != normal.tensor().shape() {
            return Err(Error::Data(format!(
                "pair sizes differ: {:?} vs {:?}",
                low.tensor().shape(),
                normal.tensor().shape()
            )));
        }
        Ok(Self {
            low,
            normal,
            scene_id: scene_id.into(),
        })
    }
}

pub fn load_pair(entry: &PairEntry) -> Result<ImagePair> {
    ImagePair::new(
        load_image(&entry.low)?,
        load_image(&entry.normal)?,
        entry.scene_id.clone(),
    )
    .map_err(|e| Error::Data(format!("{}: {e}", entry.scene_id)))
}

/// Decodes every pair; decoding runs in parallel, order follows the index.
pub fn load_pairs(index: &PairIndex) -> Result<Vec<ImagePair>> {
    index.entries.par_iter().map(load_pair).collect()
}

/// One of the eight right-angle rotation/flip combinations: rotate `rot90`
/// quarter turns counter-clockwise, then mirror horizontally if `flip`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Transform {
    pub rot90: u8,
    pub flip: bool,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        rot90: 0,
        flip: false,
    };

    /// Transform number `i` in `0..8`: rotations first, then their mirrored forms.
    pub fn from_index(i: usize) -> Self {
        Transform {
            rot90: (i % 4) as u8,
            flip: i >= 4,
        }
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        for _ in 0..self.rot90 % 4 {
            out = rot90_ccw(&out);
        }
        if self.flip {
            out = hflip(&out);
        }
        out
    }

    /// Undoes [`Transform::apply`].
    pub fn invert(&self, t: &Tensor) -> Tensor {
        let mut out = if self.flip { hflip(t) } else { t.clone() };
        for _ in 0..(4 - self.rot90 % 4) % 4 {
            out = rot90_ccw(&out);
        }
        out
    }
}

fn rot90_ccw(t: &Tensor) -> Tensor {
    let [n, c, h, w] = t.shape();
    Tensor::from_fn([n, c, w, h], |ni, ci, y, x| t.at(ni, ci, x, w - 1 - y))
}

fn hflip(t: &Tensor) -> Tensor {
    let [_, _, _, w] = t.shape();
    Tensor::from_fn(t.shape(), |ni, ci, y, x| t.at(ni, ci, y, w - 1 - x))
}

/// Aligned crops of a pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub low: PixelImage,
    pub normal: PixelImage,
    pub scene_id: String,
    /// Top-left corner `(row, col)` of the crop in the source image.
    pub offset: (usize, usize),
    pub transform: Transform,
}

/// Crops the same uniformly drawn `size × size` window from both images.
pub fn sample_patch<R: Rng + ?Sized>(
    pair: &ImagePair,
    size: usize,
    rng: &mut R,
) -> Result<PatchPair> {
    let (h, w) = (pair.low.height(), pair.low.width());
    if size == 0 || size > h || size > w {
        return Err(Error::InvalidInput(format!(
            "patch size {size} does not fit a {h}×{w} image"
        )));
    }
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    let crop = |img: &PixelImage| -> Result<PixelImage> {
        PixelImage::new(img.tensor().crop(top, left, size, size)?)
    };
    Ok(PatchPair {
        low: crop(&pair.low)?,
        normal: crop(&pair.normal)?,
        scene_id: pair.scene_id.clone(),
        offset: (top, left),
        transform: Transform::IDENTITY,
    })
}

/// Applies one uniformly drawn transform to both members.
pub fn augment<R: Rng + ?Sized>(patch: PatchPair, rng: &mut R) -> PatchPair {
    let t = Transform::from_index(rng.random_range(0..8));
    apply_transform(patch, t)
}

/// Applies `t` to both members and records it as the patch transform.
pub fn apply_transform(patch: PatchPair, t: Transform) -> PatchPair {
    let f =
        |img: &PixelImage| PixelImage::new(t.apply(img.tensor())).expect("permutation keeps range");
    PatchPair {
        low: f(&patch.low),
        normal: f(&patch.normal),
        scene_id: patch.scene_id,
        offset: patch.offset,
        transform: t,
    }
}

/// Draws training batches from decoded pairs.
pub struct Sampler<'a> {
    pairs: &'a [ImagePair],
    patch_size: usize,
    augment: bool,
}

impl<'a> Sampler<'a> {
    pub fn new(pairs: &'a [ImagePair], patch_size: usize, augment: bool) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("no training pairs".into()));
        }
        for p in pairs {
            if p.low.height() < patch_size || p.low.width() < patch_size {
                return Err(Error::Data(format!(
                    "{}: {}×{} is smaller than patch size {patch_size}",
                    p.scene_id,
                    p.low.height(),
                    p.low.width()
                )));
            }
        }
        Ok(Self {
            pairs,
            patch_size,
            augment,
        })
    }

    pub fn patch<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PatchPair> {
        let pair = &self.pairs[rng.random_range(0..self.pairs.len())];
        let p = sample_patch(pair, self.patch_size, rng)?;
        Ok(if self.augment { augment(p, rng) } else { p })
    }

    /// `batch` patches stacked into `([B, 3, P, P] low, [B, 3, P, P] normal)`.
    pub fn batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<(Tensor, Tensor)> {
        let mut lows = Vec::with_capacity(batch);
        let mut normals = Vec::with_capacity(batch);
        for _ in 0..batch {
            let p = self.patch(rng)?;
            lows.push(p.low.into_tensor());
            normals.push(p.normal.into_tensor());
        }
        Ok((Tensor::stack(&lows)?, Tensor::stack(&normals)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(h: usize, w: usize) -> ImagePair {
        let t = Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
            ((c * 31 + y * w + x) % 97) as f64 / 96.0
        });
        let low = PixelImage::new(t.scale(0.2)).unwrap();
        let normal = PixelImage::new(t).unwrap();
        ImagePair::new(low, normal, "s").unwrap()
    }

    #[test]
    fn whole_image_patch() {
        let p = pair(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let patch = sample_patch(&p, 8, &mut rng).unwrap();
        assert_eq!(patch.offset, (0, 0));
        assert_eq!(patch.low, p.low);
        assert!(sample_patch(&p, 9, &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_offsets() {
        let p = pair(20, 24);
        let a = sample_patch(&p, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_patch(&p, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let expect = p
            .normal
            .tensor()
            .crop(a.offset.0, a.offset.1, 5, 5)
            .unwrap();
        assert_eq!(a.normal.tensor(), &expect);
    }

    #[test]
    fn transforms_invert_and_compose() {
        let t = pair(3, 5).low.into_tensor();
        for i in 0..8 {
            let tr = Transform::from_index(i);
            assert_eq!(tr.invert(&tr.apply(&t)), t, "{tr:?}");
        }
        let half = Transform {
            rot90: 2,
            flip: false,
        };
        assert_eq!(half.apply(&half.apply(&t)), t);
        assert_eq!(Transform::IDENTITY.apply(&t), t);
        let quarter = Transform {
            rot90: 1,
            flip: false,
        }
        .apply(&t);
        assert_eq!(quarter.shape(), [1, 3, 5, 3]);
        // Top-right corner moves to top-left under a counter-clockwise turn.
        assert_eq!(quarter.at(0, 0, 0, 0), t.at(0, 0, 0, 4));
    }

    #[test]
    fn augment_is_synchronized_permutation() {
        let p = pair(6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..16 {
            let patch = sample_patch(&p, 4, &mut rng).unwrap();
            let aug = augment(patch.clone(), &mut rng);
            let t = aug.transform;
            assert_eq!(t.invert(aug.low.tensor()), *patch.low.tensor());
            assert_eq!(t.invert(aug.normal.tensor()), *patch.normal.tensor());
            let mut a = patch.low.tensor().data().to_vec();
            let mut b = aug.low.tensor().data().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sampler_is_deterministic() {
        let pairs = vec![pair(8, 8), pair(10, 9)];
        let s = Sampler::new(&pairs, 4, true).unwrap();
        let a = s.batch(3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = s.batch(3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.shape(), [3, 3, 4, 4]);
        assert!(Sampler::new(&pairs, 9, false).is_err());
    }
}
