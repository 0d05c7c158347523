//! Sample mixing: CutMix-style image composition with the point
//! correspondences it induces, and concatenation of point clouds within a batch.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::MaskKind;
use crate::dataset::{SourceSample, TargetScene};
use crate::error::{Error, Result};
use crate::geometry::sample_plane_at_points;
use crate::real::Real;

/// Binary paste mask; 1 selects the source image.
#[derive(Clone, Debug, PartialEq)]
pub struct MixMask {
    pub mask: Array2<u8>,
    pub kind: MaskKind,
}

impl MixMask {
    pub fn count_ones(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        MixMask {
            mask: Array2::from_elem((height, width), value),
            kind: MaskKind::Region,
        }
    }
}

/// One axis-aligned rectangle whose area fraction is uniform in `area_range`.
///
/// The rectangle height is drawn among integers that keep the aspect ratio
/// within `[1/2, 2]` where the image allows it; the width is then the rounded
/// quotient, so the area misses its target by at most half a row or column.
pub fn make_region_mask<R: Rng>(height: usize, width: usize, rng: &mut R, area_range: (f64, f64)) -> Result<MixMask> {
    let (lo, hi) = area_range;
    if !(0.0 < lo && lo <= hi && hi < 1.0) {
        return Err(Error::Config(format!("area range must satisfy 0 < lo <= hi < 1, got ({lo}, {hi})")));
    }
    if height == 0 || width == 0 {
        return Err(Error::Config("mask needs a non-empty image".into()));
    }
    loop {
        let fraction = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        let area = fraction * (height * width) as f64;
        let min_h = ((area / width as f64).ceil() as usize).max(1);
        let max_h = (area.floor() as usize).clamp(1, height);
        if min_h > max_h {
            continue;
        }
        let side = area.sqrt();
        let pref_lo = ((side / 2f64.sqrt()).ceil() as usize).max(min_h);
        let pref_hi = ((side * 2f64.sqrt()).floor() as usize).min(max_h);
        let rect_h = if pref_lo <= pref_hi {
            rng.random_range(pref_lo..=pref_hi)
        } else {
            rng.random_range(min_h..=max_h)
        };
        let rect_w = ((area / rect_h as f64).round() as usize).min(width);
        if rect_w == 0 {
            continue;
        }
        let top = rng.random_range(0..=height - rect_h);
        let left = rng.random_range(0..=width - rect_w);
        let mut mask = Array2::zeros((height, width));
        mask.slice_mut(ndarray::s![top..top + rect_h, left..left + rect_w]).fill(1);
        return Ok(MixMask {
            mask,
            kind: MaskKind::Region,
        });
    }
}

/// Classes present in a label map, ascending.
pub fn present_classes(labels: ArrayView2<'_, u8>) -> Vec<usize> {
    labels.iter().map(|&l| l as usize).collect::<BTreeSet<_>>().into_iter().collect()
}

/// Half of the present classes (rounded up), drawn uniformly without replacement.
pub fn choose_class_subset<R: Rng>(labels: ArrayView2<'_, u8>, rng: &mut R) -> Vec<usize> {
    let mut present = present_classes(labels);
    present.shuffle(rng);
    present.truncate(present.len().div_ceil(2));
    present.sort_unstable();
    present
}

/// Mask that is 1 exactly where the source label is in `chosen`.
pub fn make_class_mask(source_labels: ArrayView2<'_, u8>, chosen: &[usize]) -> Result<MixMask> {
    if chosen.is_empty() {
        return Err(Error::Config("class mask needs at least one chosen class".into()));
    }
    let mut lookup = [false; 256];
    for &c in chosen {
        if c > 255 {
            return Err(Error::Config(format!("class {c} out of range")));
        }
        lookup[c] = true;
    }
    let mask = source_labels.mapv(|l| lookup[l as usize] as u8);
    if !mask.iter().any(|&m| m == 1) {
        return Err(Error::EmptyMask(chosen.to_vec()));
    }
    Ok(MixMask {
        mask,
        kind: MaskKind::Class,
    })
}

/// A CutMix image built on a target scene, with the source labels and mask
/// values gathered at that scene's projected points.
#[derive(Clone, Debug)]
pub struct MixedImageSample<'a> {
    pub image: Array3<f32>,
    pub mask: MixMask,
    pub source_labels: Array2<u8>,
    pub source_labels_at_points: Vec<u8>,
    pub mask_at_points: Vec<bool>,
    pub parent_target: &'a TargetScene,
}

pub fn cutmix_images<'a>(source: &SourceSample, target: &'a TargetScene, mask: MixMask) -> Result<MixedImageSample<'a>> {
    let (h, w, ch) = target.image.dim();
    if source.image.dim() != (h, w, ch) || source.labels.dim() != (h, w) || mask.mask.dim() != (h, w) {
        return Err(Error::Config(format!(
            "cutmix shape mismatch: source {:?}, target {:?}, mask {:?}",
            source.image.dim(),
            target.image.dim(),
            mask.mask.dim()
        )));
    }
    let mut image = target.image.clone();
    for ((r, c), &m) in mask.mask.indexed_iter() {
        if m == 1 {
            for k in 0..ch {
                image[[r, c, k]] = source.image[[r, c, k]];
            }
        }
    }
    let source_labels_at_points = sample_plane_at_points(source.labels.view(), &target.pixel_of_point)?;
    let mask_at_points = sample_plane_at_points(mask.mask.view(), &target.pixel_of_point)?
        .into_iter()
        .map(|m| m == 1)
        .collect();
    Ok(MixedImageSample {
        image,
        mask,
        source_labels: source.labels.clone(),
        source_labels_at_points,
        mask_at_points,
        parent_target: target,
    })
}

/// Two target clouds concatenated, scene `i` first.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedCloudSample {
    pub points: Vec<[f32; 3]>,
    pub labels: Vec<usize>,
    /// Number of points contributed by scene `i`.
    pub boundary: usize,
}

pub fn mix_pointclouds(
    scene_i: &TargetScene,
    labels_i: &[usize],
    scene_j: &TargetScene,
    labels_j: &[usize],
) -> Result<MixedCloudSample> {
    if scene_i.points.len() != labels_i.len() || scene_j.points.len() != labels_j.len() {
        return Err(Error::Contract(format!(
            "mixed cloud labels: {} points / {} labels and {} points / {} labels",
            scene_i.points.len(),
            labels_i.len(),
            scene_j.points.len(),
            labels_j.len()
        )));
    }
    let mut points = Vec::with_capacity(labels_i.len() + labels_j.len());
    points.extend_from_slice(&scene_i.points);
    points.extend_from_slice(&scene_j.points);
    let mut labels = Vec::with_capacity(points.len());
    labels.extend_from_slice(labels_i);
    labels.extend_from_slice(labels_j);
    Ok(MixedCloudSample {
        points,
        labels,
        boundary: labels_i.len(),
    })
}

/// Rows `rows[k]` of `values`, in order. With a pointwise network this turns
/// per-scene outputs into the outputs of a concatenated cloud.
pub fn gather_rows<T: Real>(values: ArrayView2<'_, T>, rows: &[usize]) -> Result<Array2<T>> {
    if let Some(&bad) = rows.iter().find(|&&r| r >= values.nrows()) {
        return Err(Error::Contract(format!("gather: row {bad} of {}", values.nrows())));
    }
    Ok(values.select(Axis(0), rows))
}

/// Adjoint of [`gather_rows`]: adds row `k` of `values` into row `rows[k]` of `into`.
pub fn scatter_add_rows<T: Real>(into: &mut Array2<T>, rows: &[usize], values: ArrayView2<'_, T>) -> Result<()> {
    if values.nrows() != rows.len() || values.ncols() != into.ncols() {
        return Err(Error::Contract(format!(
            "scatter: {} rows for {} indices, {} columns into {}",
            values.nrows(),
            rows.len(),
            values.ncols(),
            into.ncols()
        )));
    }
    if let Some(&bad) = rows.iter().find(|&&r| r >= into.nrows()) {
        return Err(Error::Contract(format!("scatter: row {bad} of {}", into.nrows())));
    }
    for (&dst, src) in rows.iter().zip(values.rows()) {
        let mut row = into.row_mut(dst);
        row += &src;
    }
    Ok(())
}

/// Draws, for each batch slot, a partner slot uniformly among the others.
pub fn pair_batch<R: Rng>(batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("pairing needs a batch of at least 2, got {batch_size}")));
    }
    Ok((0..batch_size)
        .map(|i| {
            let j = rng.random_range(0..batch_size - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PixelIndex;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn target(h: usize, w: usize, n: usize, salt: u64) -> TargetScene {
        let mut rng = seed::stream(salt, &[]);
        TargetScene {
            image: Array3::from_shape_fn((h, w, 3), |_| rng.random::<f32>()),
            points: (0..n).map(|k| [k as f32, 0.0, 1.0]).collect(),
            pixel_of_point: (0..n)
                .map(|_| PixelIndex::new(rng.random_range(0..h), rng.random_range(0..w)))
                .collect(),
        }
    }

    fn source(h: usize, w: usize, salt: u64) -> SourceSample {
        let mut rng = seed::stream(salt, &[1]);
        SourceSample {
            image: Array3::from_shape_fn((h, w, 3), |_| rng.random::<f32>()),
            labels: Array2::from_shape_fn((h, w), |_| rng.random_range(0..6u8)),
        }
    }

    #[test]
    fn near_full_area_covers_the_image() {
        let mut rng = seed::stream(1, &[]);
        let m = make_region_mask(64, 64, &mut rng, (0.999, 0.999)).unwrap();
        assert!(m.count_ones() >= 4094);
    }

    #[test]
    fn fixed_area_within_one_row_or_column() {
        for s in 0..200 {
            let mut rng = seed::stream(s, &[]);
            let m = make_region_mask(64, 64, &mut rng, (0.25, 0.25)).unwrap();
            let ones = m.count_ones() as i64;
            let rows = m.mask.rows().into_iter().filter(|r| r.iter().any(|&v| v == 1)).count() as i64;
            let cols = m.mask.columns().into_iter().filter(|c| c.iter().any(|&v| v == 1)).count() as i64;
            assert_eq!(rows * cols, ones, "mask is a single rectangle");
            assert!((ones - 1024).abs() <= rows.max(cols), "seed {s}: {ones} ones, {rows}x{cols}");
        }
    }

    #[test]
    fn region_mask_is_deterministic() {
        let a = make_region_mask(32, 48, &mut seed::stream(5, &[]), (0.2, 0.5)).unwrap();
        let b = make_region_mask(32, 48, &mut seed::stream(5, &[]), (0.2, 0.5)).unwrap();
        assert_eq!(a, b);
        assert!(make_region_mask(32, 48, &mut seed::stream(5, &[]), (0.5, 0.2)).is_err());
        assert!(make_region_mask(32, 48, &mut seed::stream(5, &[]), (0.0, 0.2)).is_err());
    }

    #[test]
    fn class_mask_cases() {
        let labels = ndarray::arr2(&[[0u8, 1, 2], [2, 2, 1]]);
        assert!(make_class_mask(labels.view(), &[0, 1, 2]).unwrap().mask.iter().all(|&m| m == 1));
        let constant = Array2::from_elem((3, 3), 4u8);
        assert!(matches!(make_class_mask(constant.view(), &[1]), Err(Error::EmptyMask(_))));
        assert!(make_class_mask(labels.view(), &[]).is_err());

        let src = source(9, 11, 3);
        let chosen = vec![1, 4];
        let m = make_class_mask(src.labels.view(), &chosen).unwrap();
        for ((r, c), &l) in src.labels.indexed_iter() {
            assert_eq!(m.mask[[r, c]] == 1, chosen.contains(&(l as usize)));
        }
    }

    #[test]
    fn class_subset_is_half_of_present() {
        let src = source(16, 16, 8);
        let subset = choose_class_subset(src.labels.view(), &mut seed::stream(2, &[]));
        assert_eq!(subset.len(), present_classes(src.labels.view()).len().div_ceil(2));
    }

    #[test]
    fn extreme_masks_reproduce_parents() {
        let t = target(6, 7, 20, 1);
        let s = source(6, 7, 2);
        let all = cutmix_images(&s, &t, MixMask::filled(6, 7, 1)).unwrap();
        assert_eq!(all.image, s.image);
        assert!(all.mask_at_points.iter().all(|&m| m));
        let none = cutmix_images(&s, &t, MixMask::filled(6, 7, 0)).unwrap();
        assert_eq!(none.image, t.image);
        assert!(none.mask_at_points.iter().all(|&m| !m));
    }

    #[test]
    fn cutmix_shape_mismatch() {
        let t = target(6, 7, 5, 1);
        let s = source(7, 6, 2);
        assert!(matches!(cutmix_images(&s, &t, MixMask::filled(6, 7, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn concatenation_and_boundary() {
        let a = target(4, 4, 100, 1);
        let b = target(4, 4, 150, 2);
        let la: Vec<usize> = (0..100).map(|k| k % 6).collect();
        let lb: Vec<usize> = (0..150).map(|k| (k * 7) % 6).collect();
        let m = mix_pointclouds(&a, &la, &b, &lb).unwrap();
        assert_eq!((m.points.len(), m.boundary), (250, 100));
        assert_eq!(&m.labels[..100], &la[..]);
        assert_eq!(&m.labels[100..], &lb[..]);
        assert_eq!(&m.points[100..], &b.points[..]);

        let selfmix = mix_pointclouds(&a, &la, &a, &la).unwrap();
        assert_eq!(&selfmix.points[..100], &selfmix.points[100..]);
        assert!(mix_pointclouds(&a, &la[..99], &b, &lb).is_err());
    }

    #[test]
    fn pairing_small_batches() {
        assert_eq!(pair_batch(2, &mut seed::stream(0, &[])).unwrap(), vec![1, 0]);
        assert!(pair_batch(1, &mut seed::stream(0, &[])).is_err());
    }

    #[test]
    fn partner_frequencies_are_uniform() {
        // 10^4 draws of batch 8: each partner j != i has probability 1/7.
        let mut rng = seed::stream(99, &[]);
        let draws = 10_000;
        let mut counts = [[0usize; 8]; 8];
        for _ in 0..draws {
            for (i, j) in pair_batch(8, &mut rng).unwrap().into_iter().enumerate() {
                counts[i][j] += 1;
            }
        }
        let p = 1.0 / 7.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (i, row) in counts.iter().enumerate() {
            assert_eq!(row[i], 0);
            for (j, &c) in row.iter().enumerate() {
                if j != i {
                    assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sigma, "({i},{j}) = {c}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn composition_and_partition(seed_value in any::<u64>(), n in 1usize..60) {
            let t = target(8, 10, n, seed_value);
            let s = source(8, 10, seed_value ^ 1);
            let mut rng = seed::stream(seed_value, &[2]);
            let mask = make_region_mask(8, 10, &mut rng, (0.2, 0.6)).unwrap();
            let mixed = cutmix_images(&s, &t, mask.clone()).unwrap();
            for ((r, c), &m) in mask.mask.indexed_iter() {
                for k in 0..3 {
                    let expected = if m == 1 { s.image[[r, c, k]] } else { t.image[[r, c, k]] };
                    prop_assert_eq!(mixed.image[[r, c, k]].to_bits(), expected.to_bits());
                }
            }
            let ones = mixed.mask_at_points.iter().filter(|&&m| m).count();
            let zeros = mixed.mask_at_points.iter().filter(|&&m| !m).count();
            prop_assert_eq!(ones + zeros, n);
            for (i, p) in t.pixel_of_point.iter().enumerate() {
                prop_assert_eq!(mixed.mask_at_points[i], mask.mask[[p.row, p.col]] == 1);
                prop_assert_eq!(mixed.source_labels_at_points[i], s.labels[[p.row, p.col]]);
            }
        }
    }
}
