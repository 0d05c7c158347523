//! Pseudo-labels, confidence fusion, class prototypes and alignment targets.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::losses::softmax;
use crate::mixing::MixedImageSample;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Online,
    Pretrained,
    Teacher,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointPseudoLabels {
    pub labels: Vec<usize>,
    /// Max softmax probability of the producing model.
    pub confidence: Vec<f64>,
    pub provenance: Vec<Provenance>,
}

impl PointPseudoLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn online_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let online = self.provenance.iter().filter(|&&p| p == Provenance::Online).count();
        online as f64 / self.len() as f64
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance.fill(provenance);
        self
    }

    pub fn concat(parts: &[PointPseudoLabels]) -> Self {
        PointPseudoLabels {
            labels: parts.iter().flat_map(|p| p.labels.iter().copied()).collect(),
            confidence: parts.iter().flat_map(|p| p.confidence.iter().copied()).collect(),
            provenance: parts.iter().flat_map(|p| p.provenance.iter().copied()).collect(),
        }
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        PointPseudoLabels {
            labels: self.labels[range.clone()].to_vec(),
            confidence: self.confidence[range.clone()].to_vec(),
            provenance: self.provenance[range].to_vec(),
        }
    }
}

/// Row-wise argmax with the lowest index winning ties; provenance is `Online`.
pub fn argmax_labels<T: Real>(logits: ArrayView2<'_, T>) -> Result<PointPseudoLabels> {
    let probs = softmax(logits)?;
    let n = probs.nrows();
    let mut labels = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    for (row, prob) in logits.rows().into_iter().zip(probs.rows()) {
        let mut best = 0;
        for (k, v) in row.iter().enumerate().skip(1) {
            if *v > row[best] {
                best = k;
            }
        }
        labels.push(best);
        confidence.push(prob[best].as_f64());
    }
    Ok(PointPseudoLabels {
        labels,
        confidence,
        provenance: vec![Provenance::Online; n],
    })
}

/// Per point, keep the online label when its confidence is at least the pretrained one.
pub fn hybrid_fuse(online: &PointPseudoLabels, pretrained: &PointPseudoLabels) -> Result<PointPseudoLabels> {
    if online.len() != pretrained.len() {
        return Err(Error::Contract(format!(
            "fusion: {} online labels vs {} pretrained",
            online.len(),
            pretrained.len()
        )));
    }
    let n = online.len();
    let mut out = PointPseudoLabels {
        labels: Vec::with_capacity(n),
        confidence: Vec::with_capacity(n),
        provenance: Vec::with_capacity(n),
    };
    for i in 0..n {
        let (src, tag) = if online.confidence[i] >= pretrained.confidence[i] {
            (online, Provenance::Online)
        } else {
            (pretrained, Provenance::Pretrained)
        };
        out.labels.push(src.labels[i]);
        out.confidence.push(src.confidence[i]);
        out.provenance.push(tag);
    }
    Ok(out)
}

/// Mean pre-softmax score vector per pseudo-class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototypes<T> {
    /// Row `c` is the prototype of class `c`; rows of absent classes are zero.
    pub values: Array2<T>,
    pub support: Vec<usize>,
}

impl<T: Real> ClassPrototypes<T> {
    pub fn is_present(&self, class: usize) -> bool {
        self.support.get(class).is_some_and(|&s| s > 0)
    }

    pub fn num_classes(&self) -> usize {
        self.support.len()
    }

    /// Blend with an earlier estimate: `m * previous + (1 - m) * self` where both are present.
    pub fn smoothed(&self, previous: &ClassPrototypes<T>, momentum: f64) -> ClassPrototypes<T> {
        let mut out = self.clone();
        if momentum <= 0.0 {
            return out;
        }
        for c in 0..self.num_classes() {
            if previous.is_present(c) {
                if self.is_present(c) {
                    let blended = &previous.values.row(c) * T::of(momentum) + &self.values.row(c) * T::of(1.0 - momentum);
                    out.values.row_mut(c).assign(&blended);
                } else {
                    out.values.row_mut(c).assign(&previous.values.row(c));
                    out.support[c] = previous.support[c];
                }
            }
        }
        out
    }
}

pub fn class_prototypes<T: Real>(point_logits: ArrayView2<'_, T>, pseudo: &PointPseudoLabels) -> Result<ClassPrototypes<T>> {
    let (n, c) = point_logits.dim();
    if pseudo.len() != n {
        return Err(Error::Contract(format!("prototypes: {n} logit rows, {} labels", pseudo.len())));
    }
    if n == 0 {
        return Err(Error::Contract("prototypes need at least one point".into()));
    }
    let mut sums = Array2::<f64>::zeros((c, c));
    let mut support = vec![0usize; c];
    for (row, &label) in point_logits.rows().into_iter().zip(&pseudo.labels) {
        if label >= c {
            return Err(Error::Contract(format!("prototypes: label {label} outside [0, {c})")));
        }
        support[label] += 1;
        let mut dst = sums.row_mut(label);
        for (d, v) in dst.iter_mut().zip(row) {
            *d += v.as_f64();
        }
    }
    let values = Array2::from_shape_fn((c, c), |(k, j)| {
        if support[k] > 0 {
            T::of(sums[[k, j]] / support[k] as f64)
        } else {
            T::zero()
        }
    });
    Ok(ClassPrototypes { values, support })
}

/// Prototype rows for the given source classes; rows whose prototype is absent are invalid.
pub fn prototype_targets<T: Real>(prototypes: &ClassPrototypes<T>, classes: &[u8]) -> (Array2<T>, Vec<bool>) {
    let c = prototypes.num_classes();
    let mut targets = Array2::zeros((classes.len(), c));
    let mut valid = Vec::with_capacity(classes.len());
    for (mut row, &class) in targets.rows_mut().into_iter().zip(classes) {
        let present = prototypes.is_present(class as usize);
        if present {
            row.assign(&prototypes.values.row(class as usize));
        }
        valid.push(present);
    }
    (targets, valid)
}

/// Per sampled point: the prototype of the pasted source class where the mask is 1,
/// the point's own logits where it is 0.
pub fn assemble_alignment_targets<T: Real>(
    prototypes: &ClassPrototypes<T>,
    point_logits: ArrayView2<'_, T>,
    mixed: &MixedImageSample<'_>,
) -> Result<(Array2<T>, Vec<bool>)> {
    let n = point_logits.nrows();
    if mixed.mask_at_points.len() != n || mixed.source_labels_at_points.len() != n {
        return Err(Error::Contract(format!(
            "alignment targets: {n} logit rows, {} mask samples",
            mixed.mask_at_points.len()
        )));
    }
    if point_logits.ncols() != prototypes.num_classes() {
        return Err(Error::Contract("alignment targets: class count mismatch".into()));
    }
    let mut targets = point_logits.to_owned();
    let mut valid = vec![true; n];
    for i in 0..n {
        if mixed.mask_at_points[i] {
            let class = mixed.source_labels_at_points[i] as usize;
            if prototypes.is_present(class) {
                targets.row_mut(i).assign(&prototypes.values.row(class));
            } else {
                targets.row_mut(i).fill(T::zero());
                valid[i] = false;
            }
        }
    }
    Ok((targets, valid))
}

/// Mean confidence, a convenience for logging.
pub fn mean_confidence(labels: &PointPseudoLabels) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    labels.confidence.iter().sum::<f64>() / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{SourceSample, TargetScene};
    use crate::geometry::PixelIndex;
    use crate::losses::loss_2d_m;
    use crate::mixing::{cutmix_images, MixMask};
    use crate::config::MaskKind;
    use ndarray::{arr2, Array3};
    use proptest::prelude::*;
    use rand::Rng;

    fn labels(l: &[usize], conf: &[f64]) -> PointPseudoLabels {
        PointPseudoLabels {
            labels: l.to_vec(),
            confidence: conf.to_vec(),
            provenance: vec![Provenance::Online; l.len()],
        }
    }

    #[test]
    fn argmax_examples() {
        let pl = argmax_labels(arr2(&[[0.0f64, 0.0, 0.0, 10.0]]).view()).unwrap();
        assert_eq!(pl.labels, vec![3]);
        assert!(pl.confidence[0] > 0.9998);
        let pl = argmax_labels(Array2::<f64>::zeros((1, 5)).view()).unwrap();
        assert_eq!(pl.labels, vec![0]);
        assert!((pl.confidence[0] - 0.2).abs() < 1e-15);
        assert!(matches!(argmax_labels(arr2(&[[0.0f64, f64::NAN]]).view()), Err(Error::Numeric(_))));
    }

    #[test]
    fn argmax_matches_loop_oracle() {
        let mut rng = crate::seed::stream(3, &[]);
        let x = Array2::from_shape_fn((5, 4), |_| rng.random_range(-3.0f64..3.0));
        let pl = argmax_labels(x.view()).unwrap();
        for i in 0..5 {
            let mut best = 0;
            for k in 0..4 {
                if x[[i, k]] > x[[i, best]] {
                    best = k;
                }
            }
            let z: f64 = (0..4).map(|k| x[[i, k]].exp()).sum();
            assert_eq!(pl.labels[i], best);
            assert!((pl.confidence[i] - x[[i, best]].exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_examples() {
        let f = hybrid_fuse(&labels(&[2], &[0.8]), &labels(&[5], &[0.6])).unwrap();
        assert_eq!((f.labels[0], f.provenance[0]), (2, Provenance::Online));
        let f = hybrid_fuse(&labels(&[2], &[0.7]), &labels(&[5], &[0.7])).unwrap();
        assert_eq!((f.labels[0], f.provenance[0]), (2, Provenance::Online));
        let f = hybrid_fuse(&labels(&[2], &[0.3]), &labels(&[5], &[0.9])).unwrap();
        assert_eq!((f.labels[0], f.provenance[0]), (5, Provenance::Pretrained));
        assert!(matches!(hybrid_fuse(&labels(&[1], &[0.5]), &labels(&[], &[])), Err(Error::Contract(_))));
    }

    #[test]
    fn prototype_examples() {
        let logits = arr2(&[[0.9f64, 0.1], [0.2, 0.8], [0.4, 0.6]]);
        let p = class_prototypes(logits.view(), &labels(&[0, 1, 1], &[1.0; 3])).unwrap();
        assert_eq!(p.values.row(0).to_vec(), vec![0.9, 0.1]);
        assert_eq!(p.support, vec![1, 2]);
        assert!((p.values[[1, 0]] - 0.3).abs() < 1e-15 && (p.values[[1, 1]] - 0.7).abs() < 1e-15);
        let p = class_prototypes(logits.view(), &labels(&[1, 1, 1], &[1.0; 3])).unwrap();
        assert!(!p.is_present(0));
        assert!(class_prototypes(Array2::<f64>::zeros((0, 2)).view(), &labels(&[], &[])).is_err());
    }

    fn toy_mixed(mask_value: u8, source_class: u8, target: &TargetScene) -> MixedImageSample<'_> {
        let source = SourceSample {
            image: Array3::zeros((2, 2, 3)),
            labels: Array2::from_elem((2, 2), source_class),
        };
        cutmix_images(&source, target, MixMask {
            mask: Array2::from_elem((2, 2), mask_value),
            kind: MaskKind::Region,
        })
        .unwrap()
    }

    fn toy_target() -> TargetScene {
        TargetScene {
            image: Array3::zeros((2, 2, 3)),
            points: vec![[0.0, 0.0, 1.0]; 3],
            pixel_of_point: vec![PixelIndex::new(0, 0), PixelIndex::new(0, 1), PixelIndex::new(1, 1)],
        }
    }

    #[test]
    fn alignment_target_examples() {
        let target = toy_target();
        let logits = arr2(&[[1.0f64, 0.0, 0.5], [0.0, 2.0, 0.1], [0.3, 0.3, 0.3]]);
        let protos = class_prototypes(logits.view(), &labels(&[0, 1, 1], &[1.0; 3])).unwrap();

        let (t, v) = assemble_alignment_targets(&protos, logits.view(), &toy_mixed(0, 2, &target)).unwrap();
        assert_eq!(t, logits);
        assert!(v.iter().all(|&b| b));

        let (t, v) = assemble_alignment_targets(&protos, logits.view(), &toy_mixed(1, 1, &target)).unwrap();
        for row in t.rows() {
            assert_eq!(row, protos.values.row(1));
        }
        assert!(v.iter().all(|&b| b));

        // Class 2 has no support: every mask-1 row is dropped and the loss is zero.
        let (t, v) = assemble_alignment_targets(&protos, logits.view(), &toy_mixed(1, 2, &target)).unwrap();
        assert!(v.iter().all(|&b| !b));
        let mim = arr2(&[[0.1f64, 0.2, 0.3], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
        let r = loss_2d_m(mim.view(), t.view(), &v).unwrap();
        assert_eq!((r.value, r.count), (0.0, 0));
    }

    #[test]
    fn invalid_row_is_excluded_from_loss() {
        // Three points, one of which maps to an absent prototype.
        let logits = arr2(&[[1.0f64, 0.0], [0.0, 1.0], [0.5, 0.5]]);
        let protos = class_prototypes(logits.view(), &labels(&[0, 0, 0], &[1.0; 3])).unwrap();
        let (targets, valid) = prototype_targets(&protos, &[0, 1, 0]);
        assert_eq!(valid, vec![true, false, true]);
        let mim = arr2(&[[0.3f64, 0.1], [2.0, -1.0], [0.0, 0.4]]);
        let with = loss_2d_m(mim.view(), targets.view(), &valid).unwrap();
        let rows = [0usize, 2];
        let sub_m = mim.select(ndarray::Axis(0), &rows);
        let sub_t = targets.select(ndarray::Axis(0), &rows);
        let without = loss_2d_m(sub_m.view(), sub_t.view(), &[true, true]).unwrap();
        assert!((with.value - without.value).abs() < 1e-15);
    }

    #[test]
    fn smoothing_blends_present_prototypes() {
        let a = ClassPrototypes { values: arr2(&[[1.0f64, 0.0], [0.0, 0.0]]), support: vec![1, 0] };
        let b = ClassPrototypes { values: arr2(&[[3.0f64, 2.0], [4.0, 4.0]]), support: vec![2, 1] };
        let s = a.smoothed(&b, 0.5);
        assert_eq!(s.values, arr2(&[[2.0, 1.0], [4.0, 4.0]]));
        assert_eq!(s.support, vec![1, 1]);
        assert_eq!(a.smoothed(&b, 0.0), a);
    }

    proptest! {
        #[test]
        fn fusion_takes_the_max_confidence(confs in proptest::collection::vec((0.01f64..1.0, 0.01f64..1.0), 1..40)) {
            let n = confs.len();
            let on = labels(&vec![0; n], &confs.iter().map(|c| c.0).collect::<Vec<_>>());
            let pre = labels(&vec![1; n], &confs.iter().map(|c| c.1).collect::<Vec<_>>());
            let f = hybrid_fuse(&on, &pre).unwrap();
            for i in 0..n {
                prop_assert_eq!(f.confidence[i], confs[i].0.max(confs[i].1));
            }
        }

        #[test]
        fn prototypes_match_brute_force_and_stay_in_hull(seed in any::<u64>(), n in 1usize..30, c in 2usize..6) {
            let mut rng = crate::seed::stream(seed, &[]);
            let x = Array2::from_shape_fn((n, c), |_| rng.random_range(-5.0f64..5.0));
            let lab: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let p = class_prototypes(x.view(), &labels(&lab, &vec![1.0; n])).unwrap();
            for k in 0..c {
                let members: Vec<usize> = (0..n).filter(|&i| lab[i] == k).collect();
                prop_assert_eq!(p.support[k], members.len());
                for j in 0..c {
                    if members.is_empty() { continue; }
                    let mut sum = 0.0;
                    for &i in &members { sum += x[[i, j]]; }
                    let mean = sum / members.len() as f64;
                    prop_assert!((p.values[[k, j]] - mean).abs() <= 1e-12);
                    let lo = members.iter().map(|&i| x[[i, j]]).fold(f64::INFINITY, f64::min);
                    let hi = members.iter().map(|&i| x[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(p.values[[k, j]] >= lo - 1e-12 && p.values[[k, j]] <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn target_rows_partition(seed in any::<u64>()) {
            let mut rng = crate::seed::stream(seed, &[]);
            let target = toy_target();
            let logits = Array2::from_shape_fn((3, 3), |_| rng.random_range(-2.0f64..2.0));
            let protos = class_prototypes(logits.view(), &labels(&[0, 1, 2], &[1.0; 3])).unwrap();
            let source = SourceSample {
                image: Array3::zeros((2, 2, 3)),
                labels: Array2::from_shape_fn((2, 2), |_| rng.random_range(0..3u8)),
            };
            let mask = MixMask { mask: Array2::from_shape_fn((2, 2), |_| rng.random_range(0..2u8)), kind: MaskKind::Region };
            let mixed = cutmix_images(&source, &target, mask).unwrap();
            let (t, _) = assemble_alignment_targets(&protos, logits.view(), &mixed).unwrap();
            for i in 0..3 {
                if mixed.mask_at_points[i] {
                    let c = mixed.source_labels_at_points[i] as usize;
                    prop_assert_eq!(t.row(i), protos.values.row(c));
                } else {
                    prop_assert_eq!(t.row(i), logits.row(i));
                }
            }
        }
    }
}
