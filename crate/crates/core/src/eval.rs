//! Confusion matrices, mIoU, the 2D/3D/ensemble triad and label-map rendering.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2};

use crate::dataset::{encode_ppm, TargetScene, TargetSplit};
use crate::error::{Error, Result};
use crate::geometry::PixelIndex;
use crate::losses::softmax;
use crate::nets::{features_2d_at, features_3d, SegNet};

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            counts: Array2::zeros((num_classes, num_classes)),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn accumulate(&mut self, gt: &[usize], pred: &[usize]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::Contract(format!("{} ground-truth labels vs {} predictions", gt.len(), pred.len())));
        }
        let c = self.num_classes();
        if let Some(bad) = gt.iter().chain(pred).find(|&&l| l >= c) {
            return Err(Error::Contract(format!("label {bad} outside [0, {c})")));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            self.counts[[g, p]] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::Contract("merging confusion matrices of different sizes".into()));
        }
        self.counts += &other.counts;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn miou(cm: &ConfusionMatrix) -> Result<MiouReport> {
    let c = cm.num_classes();
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let diag = cm.counts[[k, k]];
        let row: u64 = cm.counts.row(k).sum();
        let col: u64 = cm.counts.column(k).sum();
        let denom = row + col - diag;
        per_class.push((denom > 0).then(|| diag as f64 / denom as f64));
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric);
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(MiouReport { per_class, mean })
}

fn argmax_rows(probs: ArrayView2<'_, f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Per-point class probabilities of both networks on one scene, in `f64`.
#[derive(Clone, Debug)]
pub struct ScenePredictions {
    pub probs_2d: Array2<f64>,
    pub probs_3d: Array2<f64>,
}

impl ScenePredictions {
    pub fn labels_2d(&self) -> Vec<usize> {
        argmax_rows(self.probs_2d.view())
    }

    pub fn labels_3d(&self) -> Vec<usize> {
        argmax_rows(self.probs_3d.view())
    }

    /// Argmax of the mean of the two distributions.
    pub fn labels_avg(&self) -> Vec<usize> {
        let mean = (&self.probs_2d + &self.probs_3d) * 0.5;
        argmax_rows(mean.view())
    }
}

/// 2D classifier probabilities at a scene's projected points.
pub fn point_probs_2d(net: &SegNet<f32>, scene: &TargetScene) -> Result<Array2<f64>> {
    let feats = features_2d_at::<f32>(scene.image.view(), &scene.pixel_of_point)?;
    Ok(softmax(net.predict(feats.view())?.view())?.mapv(|v| v as f64))
}

pub fn point_probs_3d(net: &SegNet<f32>, scene: &TargetScene) -> Result<Array2<f64>> {
    let feats = features_3d::<f32>(&scene.points)?;
    Ok(softmax(net.predict(feats.view())?.view())?.mapv(|v| v as f64))
}

pub fn predict_scene(net_2d: &SegNet<f32>, net_3d: &SegNet<f32>, scene: &TargetScene) -> Result<ScenePredictions> {
    Ok(ScenePredictions {
        probs_2d: point_probs_2d(net_2d, scene)?,
        probs_3d: point_probs_3d(net_3d, scene)?,
    })
}

/// Per-point ensemble labels for every scene of a split.
pub fn ensemble_labels(net_2d: &SegNet<f32>, net_3d: &SegNet<f32>, split: &TargetSplit) -> Result<Vec<Vec<usize>>> {
    split
        .scenes()
        .iter()
        .map(|scene| Ok(predict_scene(net_2d, net_3d, scene)?.labels_avg()))
        .collect()
}

/// mIoU of the 2D, 3D and ensemble predictors, plus optionally the 3D teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct TriadReport {
    pub miou_2d: MiouReport,
    pub miou_3d: MiouReport,
    pub miou_avg: MiouReport,
    pub miou_teacher: Option<MiouReport>,
}

pub fn evaluate_triads(
    net_2d: &SegNet<f32>,
    net_3d: &SegNet<f32>,
    teacher: Option<&SegNet<f32>>,
    split: &TargetSplit,
) -> Result<TriadReport> {
    let c = net_3d.dims().2;
    let mut cms = [ConfusionMatrix::new(c), ConfusionMatrix::new(c), ConfusionMatrix::new(c)];
    let mut cm_teacher = ConfusionMatrix::new(c);
    for (scene, truth) in split.scenes().iter().zip(split.evaluation_truth()) {
        let gt: Vec<usize> = truth.point_labels.iter().map(|&l| l as usize).collect();
        let pred = predict_scene(net_2d, net_3d, scene)?;
        cms[0].accumulate(&gt, &pred.labels_2d())?;
        cms[1].accumulate(&gt, &pred.labels_3d())?;
        cms[2].accumulate(&gt, &pred.labels_avg())?;
        if let Some(t) = teacher {
            cm_teacher.accumulate(&gt, &argmax_rows(point_probs_3d(t, scene)?.view()))?;
        }
    }
    Ok(TriadReport {
        miou_2d: miou(&cms[0])?,
        miou_3d: miou(&cms[1])?,
        miou_avg: miou(&cms[2])?,
        miou_teacher: teacher.map(|_| miou(&cm_teacher)).transpose()?,
    })
}

/// CSV with one row per predictor: per-class IoU (empty when undefined) and the mean.
pub fn eval_report_csv(report: &TriadReport) -> String {
    let c = report.miou_3d.per_class.len();
    let mut out = String::from("predictor");
    for k in 0..c {
        let _ = write!(out, ",iou_{k}");
    }
    out.push_str(",miou\n");
    let mut rows = vec![("2d", &report.miou_2d), ("3d", &report.miou_3d), ("avg", &report.miou_avg)];
    if let Some(t) = &report.miou_teacher {
        rows.push(("teacher", t));
    }
    for (name, m) in rows {
        out.push_str(name);
        for v in &m.per_class {
            match v {
                Some(v) => {
                    let _ = write!(out, ",{v:.6}");
                }
                None => out.push(','),
            }
        }
        let _ = writeln!(out, ",{:.6}", m.mean);
    }
    out
}

pub fn write_eval_report(report: &TriadReport, path: &Path) -> Result<()> {
    std::fs::write(path, eval_report_csv(report)).map_err(|e| Error::io(path, e))
}

const BASE_PALETTE: [[u8; 3]; 12] = [
    [128, 64, 128],
    [244, 35, 232],
    [152, 251, 152],
    [0, 0, 142],
    [70, 70, 70],
    [250, 170, 30],
    [220, 20, 60],
    [0, 60, 100],
    [107, 142, 35],
    [102, 102, 156],
    [190, 153, 153],
    [119, 11, 32],
];

/// A fixed, distinct color per class.
pub fn default_palette(num_classes: usize) -> Vec<[u8; 3]> {
    (0..num_classes)
        .map(|k| {
            let base = BASE_PALETTE[k % BASE_PALETTE.len()];
            let round = (k / BASE_PALETTE.len()) as u8;
            base.map(|v| v.wrapping_add(round.wrapping_mul(37)))
        })
        .collect()
}

fn color_image(h: usize, w: usize, mut color_at: impl FnMut(usize, usize) -> Option<[u8; 3]>) -> Array3<f32> {
    let mut img = Array3::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            if let Some(rgb) = color_at(r, c) {
                for k in 0..3 {
                    img[[r, c, k]] = rgb[k] as f32 / 255.0;
                }
            }
        }
    }
    img
}

fn palette_color(palette: &[[u8; 3]], label: usize) -> Result<[u8; 3]> {
    palette
        .get(label)
        .copied()
        .ok_or_else(|| Error::Contract(format!("palette has no color for class {label}")))
}

/// PPM bytes of a dense label map.
pub fn render_label_map(labels: ArrayView2<'_, u8>, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    let (h, w) = labels.dim();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= palette.len()) {
        return Err(Error::Contract(format!("palette has no color for class {bad}")));
    }
    let img = color_image(h, w, |r, c| Some(palette[labels[[r, c]] as usize]));
    Ok(encode_ppm(&img))
}

/// PPM bytes with each point splatted as one pixel on black.
pub fn render_point_labels(
    labels: &[usize],
    pixel_of_point: &[PixelIndex],
    height: usize,
    width: usize,
    palette: &[[u8; 3]],
) -> Result<Vec<u8>> {
    if labels.len() != pixel_of_point.len() {
        return Err(Error::Contract("one label per point is required".into()));
    }
    let mut map: Array2<Option<[u8; 3]>> = Array2::from_elem((height, width), None);
    for (i, (&l, px)) in labels.iter().zip(pixel_of_point).enumerate() {
        if px.row >= height || px.col >= width {
            return Err(Error::Index {
                point: i,
                row: px.row,
                col: px.col,
                height,
                width,
            });
        }
        map[[px.row, px.col]] = Some(palette_color(palette, l)?);
    }
    Ok(encode_ppm(&color_image(height, width, |r, c| map[[r, c]])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::decode_ppm;
    use ndarray::arr2;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn accumulate_examples() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[], &[]).unwrap();
        assert_eq!(cm.total(), 0);
        cm.accumulate(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert_eq!(cm.counts, arr2(&[[1, 0, 0], [0, 1, 0], [0, 0, 2]]));
        assert!(cm.accumulate(&[3], &[0]).is_err());
        assert!(cm.accumulate(&[0], &[]).is_err());
    }

    #[test]
    fn miou_examples() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 1], &[0, 1, 1]).unwrap();
        let m = miou(&cm).unwrap();
        assert_eq!(m.per_class, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(m.mean, 1.0);

        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 1], &[1, 0, 0]).unwrap();
        assert_eq!(miou(&cm).unwrap().mean, 0.0);

        let cm = ConfusionMatrix { counts: arr2(&[[3, 1], [2, 4]]) };
        let m = miou(&cm).unwrap();
        assert!((m.per_class[0].unwrap() - 0.5).abs() < 1e-15);
        assert!((m.per_class[1].unwrap() - 4.0 / 7.0).abs() < 1e-15);
        assert!((m.mean - (0.5 + 4.0 / 7.0) / 2.0).abs() < 1e-15);

        assert!(matches!(miou(&ConfusionMatrix::new(4)), Err(Error::UndefinedMetric)));
    }

    #[test]
    fn rendering() {
        let palette = default_palette(4);
        let labels = Array2::from_elem((3, 5), 2u8);
        let bytes = render_label_map(labels.view(), &palette).unwrap();
        let img = decode_ppm(&bytes).unwrap();
        for px in img.exact_chunks((1, 1, 3)) {
            let rgb: Vec<u8> = px.iter().map(|&v| (v * 255.0).round() as u8).collect();
            assert_eq!(rgb, palette[2].to_vec());
        }
        // Permuting the palette only permutes colors.
        let mut swapped = palette.clone();
        swapped.swap(1, 2);
        let mixed = arr2(&[[1u8, 2], [2, 1]]);
        let a = decode_ppm(&render_label_map(mixed.view(), &palette).unwrap()).unwrap();
        let relabeled = mixed.mapv(|l| if l == 1 { 2 } else { 1 });
        let b = decode_ppm(&render_label_map(relabeled.view(), &swapped).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(render_label_map(Array2::from_elem((1, 1), 9u8).view(), &palette).is_err());

        let pts = render_point_labels(&[3], &[PixelIndex::new(1, 1)], 2, 2, &palette).unwrap();
        let img = decode_ppm(&pts).unwrap();
        assert_eq!(img[[0, 0, 0]], 0.0);
        assert!((img[[1, 1, 0]] * 255.0 - palette[3][0] as f32).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn accumulate_matches_loop_oracle(seed in any::<u64>(), n in 0usize..200, c in 1usize..7) {
            let mut rng = crate::seed::stream(seed, &[]);
            let gt: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let mut cm = ConfusionMatrix::new(c);
            cm.accumulate(&gt, &pred).unwrap();
            for a in 0..c {
                for b in 0..c {
                    let mut count = 0u64;
                    for i in 0..n {
                        if gt[i] == a && pred[i] == b { count += 1; }
                    }
                    prop_assert_eq!(cm.counts[[a, b]], count);
                }
            }
            prop_assert_eq!(cm.total(), n as u64);
            if let Ok(m) = miou(&cm) {
                prop_assert!((0.0..=1.0).contains(&m.mean));
            }
        }
    }
}
