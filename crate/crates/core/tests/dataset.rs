use std::path::Path;

use latrex::dataset::{
    apply_transform, augment, load_pairs, sample_patch, save_png, scan_pairs, ImagePair, Sampler,
    Transform,
};
use latrex::{Error, PixelImage, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn touch_images(dir: &Path, names: &[&str]) {
    std::fs::create_dir_all(dir).unwrap();
    for (i, n) in names.iter().enumerate() {
        let img = PixelImage::new(Tensor::full([1, 3, 4, 4], i as f64 / 10.0)).unwrap();
        save_png(&dir.join(n), &img).unwrap();
    }
}

fn random_pair(h: usize, w: usize, seed: u64) -> ImagePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img =
        || PixelImage::new(Tensor::from_fn([1, 3, h, w], |_, _, _, _| rng.random())).unwrap();
    ImagePair::new(img(), img(), "p").unwrap()
}

/// Upper critical value of the χ² distribution with `dof` degrees of freedom.
fn chi2_critical(dof: usize, p: f64) -> f64 {
    ChiSquared::new(dof as f64).unwrap().inverse_cdf(1.0 - p)
}

fn chi2_stat(counts: &[usize], expected: f64) -> f64 {
    counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum()
}

#[test]
fn matching_names_pair_up() {
    let tmp = tempfile::tempdir().unwrap();
    touch_images(&tmp.path().join("low"), &["b.png", "a.png"]);
    touch_images(&tmp.path().join("high"), &["a.png", "b.png"]);
    let index = scan_pairs(tmp.path()).unwrap();
    let ids: Vec<&str> = index.entries.iter().map(|e| e.scene_id.as_str()).collect();
    assert_eq!(ids, ["a", "b"]);
    assert!(index.unmatched.is_empty());
    for e in &index.entries {
        assert_eq!(e.low.file_name(), e.normal.file_name());
    }
    let pairs = load_pairs(&index).unwrap();
    assert_eq!(pairs.len(), 2);
    assert_eq!(pairs[0].scene_id, "a");
}

#[test]
fn unmatched_files_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    touch_images(&tmp.path().join("low"), &["a.png", "b.png", "c.png"]);
    touch_images(&tmp.path().join("high"), &["b.png", "c.png", "d.png"]);
    std::fs::write(tmp.path().join("low/notes.txt"), "not an image").unwrap();
    let index = scan_pairs(tmp.path()).unwrap();
    assert_eq!(index.len(), 2);
    assert_eq!(index.unmatched, ["a.png", "d.png"]);
}

#[test]
fn empty_intersection_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    touch_images(&tmp.path().join("low"), &["a.png"]);
    std::fs::create_dir_all(tmp.path().join("high")).unwrap();
    let err = scan_pairs(tmp.path()).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains("no pairs"));
}

#[test]
fn unreadable_file_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    touch_images(&tmp.path().join("low"), &["a.png"]);
    std::fs::create_dir_all(tmp.path().join("high")).unwrap();
    std::fs::write(tmp.path().join("high/a.png"), b"garbage").unwrap();
    let index = scan_pairs(tmp.path()).unwrap();
    let err = load_pairs(&index).unwrap_err().to_string();
    assert!(err.contains("a.png"), "{err}");
}

#[test]
fn crop_offsets_are_uniform() {
    let pair = random_pair(64, 64, 1);
    let side = 33;
    let mut counts = vec![0usize; side * side];
    let draws = 10_000;
    for seed in 0..draws {
        let p = sample_patch(&pair, 32, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (r, c) = p.offset;
        assert!(r < side && c < side);
        counts[r * side + c] += 1;
    }
    let stat = chi2_stat(&counts, draws as f64 / counts.len() as f64);
    assert!(stat < chi2_critical(counts.len() - 1, 1e-3), "chi2 {stat}");
    // Each axis separately has far more draws per cell.
    let rows: Vec<usize> = (0..side)
        .map(|r| counts[r * side..(r + 1) * side].iter().sum())
        .collect();
    let stat = chi2_stat(&rows, draws as f64 / side as f64);
    assert!(stat < chi2_critical(side - 1, 1e-3), "row chi2 {stat}");
}

#[test]
fn crops_are_aligned_windows() {
    let pair = random_pair(20, 24, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let p = sample_patch(&pair, 8, &mut rng).unwrap();
        let (r, c) = p.offset;
        for ch in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(
                        p.low.tensor().at(0, ch, y, x),
                        pair.low.tensor().at(0, ch, r + y, c + x)
                    );
                    assert_eq!(
                        p.normal.tensor().at(0, ch, y, x),
                        pair.normal.tensor().at(0, ch, r + y, c + x)
                    );
                }
            }
        }
    }
    assert!(sample_patch(&pair, 21, &mut rng).is_err());
}

#[test]
fn augmentation_draws_are_uniform() {
    let pair = random_pair(8, 8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = [0usize; 8];
    let draws = 8000;
    for _ in 0..draws {
        let p = augment(sample_patch(&pair, 4, &mut rng).unwrap(), &mut rng);
        let i = (0..8)
            .find(|&i| Transform::from_index(i) == p.transform)
            .unwrap();
        counts[i] += 1;
    }
    let stat = chi2_stat(&counts, draws as f64 / 8.0);
    assert!(
        stat < chi2_critical(7, 1e-3),
        "chi2 {stat}, counts {counts:?}"
    );
}

#[test]
fn rotation_group_properties() {
    let t = Tensor::from_fn([1, 3, 3, 5], |_, c, y, x| (c * 100 + y * 10 + x) as f64);
    let half = Transform {
        rot90: 2,
        flip: false,
    };
    assert_eq!(half.apply(&half.apply(&t)), t);
    assert_eq!(Transform::IDENTITY.apply(&t), t);
    let quarter = Transform {
        rot90: 1,
        flip: false,
    };
    let four = (0..4).fold(t.clone(), |acc, _| quarter.apply(&acc));
    assert_eq!(four, t);
    assert_eq!(quarter.apply(&t).shape(), [1, 3, 5, 3]);
}

#[test]
fn sampler_stream_is_reproducible() {
    let pairs = vec![random_pair(16, 16, 6), random_pair(16, 16, 7)];
    let s = Sampler::new(&pairs, 8, true).unwrap();
    let a = s.batch(4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = s.batch(4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a.0.to_le_bytes(), b.0.to_le_bytes());
    assert_eq!(a.1.to_le_bytes(), b.1.to_le_bytes());
    assert_eq!(a.0.shape(), [4, 3, 8, 8]);
    assert!(Sampler::new(&pairs, 17, false).is_err());
}

fn sorted(t: &Tensor) -> Vec<f64> {
    let mut v = t.data().to_vec();
    v.sort_by(f64::total_cmp);
    v
}

proptest! {
    #[test]
    fn transforms_permute_and_invert_in_lockstep(seed in 0u64..500, idx in 0usize..8, size in 1usize..7) {
        let pair = random_pair(8, 8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let crop = sample_patch(&pair, size, &mut rng).unwrap();
        let t = Transform::from_index(idx);
        let aug = apply_transform(crop.clone(), t);
        prop_assert_eq!(aug.transform, t);
        prop_assert_eq!(aug.offset, crop.offset);
        prop_assert_eq!(sorted(aug.low.tensor()), sorted(crop.low.tensor()));
        prop_assert_eq!(sorted(aug.normal.tensor()), sorted(crop.normal.tensor()));
        prop_assert_eq!(&t.invert(aug.low.tensor()), crop.low.tensor());
        prop_assert_eq!(&t.invert(aug.normal.tensor()), crop.normal.tensor());
    }
}
