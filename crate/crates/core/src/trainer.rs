//! Source pretraining, joint cross-modal training and the pseudo-label round.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, IcdVariant, MaskKind, PixelSelect};
use crate::dataset::{Dataset, SourceSample, TargetScene};
use crate::error::{Error, Result};
use crate::eval::{
    default_palette, ensemble_labels, evaluate_triads, miou, predict_scene, render_label_map, render_point_labels,
    ConfusionMatrix, MiouReport, TriadReport,
};
use crate::geometry::PixelIndex;
use crate::losses::{
    cross_entropy, loss_2d_m, loss_2d_s, loss_2d_t, loss_3d_t, total_2d, total_3d, LossReport, TotalLoss,
};
use crate::mixing::{
    choose_class_subset, cutmix_images, gather_rows, make_class_mask, make_region_mask, mix_pointclouds, pair_batch,
    scatter_add_rows, MixMask,
};
use crate::nets::{features_2d_at, features_3d, SegNet, TeacherState, PATCH_FEATURES, POINT_FEATURES};
use crate::optim::{adam_step, poly_lr, AdamState};
use crate::pseudo::{
    argmax_labels, assemble_alignment_targets, class_prototypes, hybrid_fuse, prototype_targets, ClassPrototypes,
    PointPseudoLabels, Provenance,
};
use crate::seed;
use crate::snapshot::{param_digest, save_snapshot, Snapshot};

/// Random stream identifiers. Each purpose draws from its own stream so that
/// switching a component on or off leaves the other draws unchanged.
pub mod streams {
    pub const INIT_2D: u64 = 1;
    pub const INIT_3D: u64 = 2;
    pub const PRETRAIN_INIT: u64 = 3;
    pub const PRETRAIN_BATCH: u64 = 4;
    pub const PRETRAIN_PIXELS: u64 = 5;
    pub const BATCH: u64 = 6;
    pub const PIXELS: u64 = 7;
    pub const MASK: u64 = 8;
    pub const PAIR: u64 = 9;
    pub const SELECT: u64 = 10;
}

fn rng_for(config: &Config, purpose: u64) -> ChaCha8Rng {
    seed::stream(config.train.seed, &[purpose])
}

/// `count` distinct pixels in row-major order, or every pixel when `count` is 0 or too large.
pub fn sample_pixels<R: Rng>(height: usize, width: usize, count: usize, rng: &mut R) -> Vec<PixelIndex> {
    let total = height * width;
    let mut flat: Vec<usize> = if count == 0 || count >= total {
        (0..total).collect()
    } else {
        sample(rng, total, count).into_vec()
    };
    flat.sort_unstable();
    flat.into_iter().map(|k| PixelIndex::new(k / width, k % width)).collect()
}

/// Uniform draws with replacement of `count` indices below `len`.
pub fn sample_indices<R: Rng>(len: usize, count: usize, rng: &mut R) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..len)).collect()
}

fn source_rows(sample: &SourceSample, pixels: &[PixelIndex]) -> Result<(Array2<f32>, Vec<usize>)> {
    let feats = features_2d_at::<f32>(sample.image.view(), pixels)?;
    let labels = pixels.iter().map(|p| sample.labels[[p.row, p.col]] as usize).collect();
    Ok((feats, labels))
}

fn stack(blocks: &[Array2<f32>], cols: usize) -> Result<Array2<f32>> {
    if blocks.is_empty() {
        return Ok(Array2::zeros((0, cols)));
    }
    let views: Vec<ArrayView2<'_, f32>> = blocks.iter().map(|b| b.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::Contract(e.to_string()))
}

fn check_dataset(dataset: &Dataset) -> Result<()> {
    if dataset.source_train.is_empty() {
        return Err(Error::Config("the source-train split is empty".into()));
    }
    if dataset.target_train.is_empty() || dataset.target_val.is_empty() {
        return Err(Error::Config("the target splits must not be empty".into()));
    }
    Ok(())
}

/// Fresh 2D network with input statistics taken from the source training images.
pub fn init_net_2d(dataset: &Dataset, config: &Config, purpose: u64) -> Result<SegNet<f32>> {
    let mut rng = rng_for(config, purpose);
    let mut net = SegNet::new(PATCH_FEATURES, config.train.hidden_2d, dataset.num_classes(), &mut rng);
    let mut blocks = Vec::new();
    for s in dataset.source_train.iter().take(64) {
        let (h, w, _) = s.image.dim();
        let pixels: Vec<PixelIndex> = (0..h * w).step_by(3).map(|k| PixelIndex::new(k / w, k % w)).collect();
        blocks.push(features_2d_at::<f32>(s.image.view(), &pixels)?);
    }
    net.fit_input_standardization(stack(&blocks, PATCH_FEATURES)?.view());
    Ok(net)
}

/// Fresh 3D network with input statistics taken from the target training clouds.
pub fn init_net_3d(dataset: &Dataset, config: &Config) -> Result<SegNet<f32>> {
    let mut rng = rng_for(config, streams::INIT_3D);
    let mut net = SegNet::new(POINT_FEATURES, config.train.hidden_3d, dataset.num_classes(), &mut rng);
    let blocks = dataset
        .target_train
        .scenes()
        .iter()
        .map(|s| features_3d::<f32>(&s.points))
        .collect::<Result<Vec<_>>>()?;
    net.fit_input_standardization(stack(&blocks, POINT_FEATURES)?.view());
    Ok(net)
}

fn add_grads(into: &mut SegNet<f32>, other: &SegNet<f32>) {
    for (a, b) in into.tensors_mut().into_iter().zip(other.tensors()) {
        for (x, &y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

/// Pixel accuracy of the classifier over every pixel of the given images.
pub fn pixel_accuracy(net: &SegNet<f32>, samples: &[SourceSample]) -> Result<f64> {
    let (mut correct, mut total) = (0usize, 0usize);
    for s in samples {
        let (h, w) = s.labels.dim();
        let pixels = sample_pixels(h, w, 0, &mut seed::stream(0, &[]));
        let (feats, labels) = source_rows(s, &pixels)?;
        let pred = argmax_labels(net.predict(feats.view())?.view())?;
        correct += pred.labels.iter().zip(&labels).filter(|(a, b)| a == b).count();
        total += labels.len();
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub net: SegNet<f32>,
    pub source_val_accuracy: f64,
}

/// Trains a 2D network on labeled source images only.
pub fn pretrain_2d(dataset: &Dataset, config: &Config) -> Result<Pretrained> {
    config.validate()?;
    check_dataset(dataset)?;
    let t = &config.train;
    let mut net = init_net_2d(dataset, config, streams::PRETRAIN_INIT)?;
    let mut adam = AdamState::new(&net);
    let mut batch_rng = rng_for(config, streams::PRETRAIN_BATCH);
    let mut pixel_rng = rng_for(config, streams::PRETRAIN_PIXELS);
    for it in 0..t.pretrain_iterations {
        let lr = poly_lr(t.base_lr, it, t.pretrain_iterations, t.poly_power);
        let ids = sample_indices(dataset.source_train.len(), t.batch_size, &mut batch_rng);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for &i in &ids {
            let s = &dataset.source_train[i];
            let (h, w) = s.labels.dim();
            let pixels = sample_pixels(h, w, t.source_pixels, &mut pixel_rng);
            let (f, l) = source_rows(s, &pixels)?;
            feats.push(f);
            labels.extend(l);
        }
        let x = stack(&feats, PATCH_FEATURES)?;
        let out = net.forward(x.view())?;
        let ce = loss_2d_s(out.cls.view(), &labels)?;
        let grads = net.param_gradients(&out.cache, ce.grad.view(), None)?;
        adam_step(&mut net, &grads, &mut adam, lr)
            .map_err(|e| Error::Numeric(format!("pretraining iteration {it}: {e}")))?;
    }
    let source_val_accuracy = pixel_accuracy(&net, &dataset.source_val)?;
    Ok(Pretrained { net, source_val_accuracy })
}

/// One line of `train_log.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss_2d_s: f64,
    pub loss_2d_t: f64,
    pub loss_2d_m: f64,
    pub loss_3d_t: f64,
    pub loss_3d_m: f64,
    pub loss_pl_2d: f64,
    pub loss_pl_3d: f64,
    pub count_2d_s: usize,
    pub count_2d_t: usize,
    pub count_2d_m: usize,
    pub count_3d_t: usize,
    pub count_3d_m: usize,
    pub total_2d: f64,
    pub total_3d: f64,
    pub online_fraction: f64,
}

pub const LOG_HEADER: &str = "iteration,lr,loss_2d_s,loss_2d_t,loss_2d_m,loss_3d_t,loss_3d_m,loss_pl_2d,loss_pl_3d,\
count_2d_s,count_2d_t,count_2d_m,count_3d_t,count_3d_m,total_2d,total_3d,online_fraction";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.lr,
            r.loss_2d_s,
            r.loss_2d_t,
            r.loss_2d_m,
            r.loss_3d_t,
            r.loss_3d_m,
            r.loss_pl_2d,
            r.loss_pl_3d,
            r.count_2d_s,
            r.count_2d_t,
            r.count_2d_m,
            r.count_3d_t,
            r.count_3d_m,
            r.total_2d,
            r.total_3d,
            r.online_fraction
        );
    }
    out
}

/// Per-epoch share of hybrid labels taken from the online network.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionRow {
    pub epoch: usize,
    pub points: usize,
    pub online_fraction: f64,
    pub mean_confidence: f64,
}

pub fn fusion_csv(rows: &[FusionRow]) -> String {
    let mut out = String::from("epoch,points,online_fraction,pretrained_fraction,mean_confidence\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch,
            r.points,
            r.online_fraction,
            1.0 - r.online_fraction,
            r.mean_confidence
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub config: Config,
    pub net_2d: SegNet<f32>,
    pub net_3d: SegNet<f32>,
    pub teacher: SegNet<f32>,
    pub log: Vec<LogRow>,
    pub fusion: Vec<FusionRow>,
    /// Target-val metrics of the final networks.
    pub report: TriadReport,
    /// Target-val 3D metric of the freshly initialized 3D network.
    pub initial_3d: MiouReport,
    /// Frozen per-point labels used by a pseudo-label round.
    pub pl_labels: Option<Vec<Vec<usize>>>,
}

/// Rows of the mixed-image distillation for one scene.
struct AlignmentRows {
    pixels: Vec<PixelIndex>,
    targets: Array2<f32>,
    valid: Vec<bool>,
    image: ndarray::Array3<f32>,
}

fn alignment_rows<R: Rng>(
    config: &Config,
    source: &SourceSample,
    target: &TargetScene,
    point_logits: ArrayView2<'_, f32>,
    prototypes: &ClassPrototypes<f32>,
    mask_rng: &mut R,
    select_rng: &mut R,
) -> Result<AlignmentRows> {
    let a = &config.train.ablation;
    let (h, w) = source.labels.dim();
    let mask = match (a.icd_variant, a.mask_kind) {
        (IcdVariant::PrototypeOnly, _) => MixMask::filled(h, w, 1),
        (_, MaskKind::Region) => make_region_mask(h, w, mask_rng, config.train.area_range)?,
        (_, MaskKind::Class) => {
            let chosen = choose_class_subset(source.labels.view(), mask_rng);
            make_class_mask(source.labels.view(), &chosen)?
        }
    };
    let mixed = cutmix_images(source, target, mask)?;
    let (point_targets, point_valid) = assemble_alignment_targets(prototypes, point_logits, &mixed)?;
    let (pixels, targets, mut valid) = match a.icd_pixel_select {
        PixelSelect::Projection => (target.pixel_of_point.clone(), point_targets, point_valid),
        PixelSelect::Random | PixelSelect::All => {
            // Keep the target-region points, then add source-region pixels chosen independently of the points.
            let keep: Vec<usize> = (0..target.len()).filter(|&i| !mixed.mask_at_points[i]).collect();
            let in_source = target.len() - keep.len();
            let region: Vec<PixelIndex> = mixed
                .mask
                .mask
                .indexed_iter()
                .filter(|(_, &m)| m == 1)
                .map(|((r, c), _)| PixelIndex::new(r, c))
                .collect();
            let extra: Vec<PixelIndex> = if a.icd_pixel_select == PixelSelect::All {
                region
            } else {
                let mut idx = sample(select_rng, region.len(), in_source.min(region.len())).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|k| region[k]).collect()
            };
            let classes: Vec<u8> = extra.iter().map(|p| source.labels[[p.row, p.col]]).collect();
            let (proto_rows, proto_valid) = prototype_targets(prototypes, &classes);
            let mut pixels: Vec<PixelIndex> = keep.iter().map(|&i| target.pixel_of_point[i]).collect();
            pixels.extend(extra);
            let kept = point_targets.select(Axis(0), &keep);
            let targets = concatenate(Axis(0), &[kept.view(), proto_rows.view()]).map_err(|e| Error::Contract(e.to_string()))?;
            let mut valid: Vec<bool> = keep.iter().map(|&i| point_valid[i]).collect();
            valid.extend(proto_valid);
            (pixels, targets, valid)
        }
    };
    if a.icd_variant == IcdVariant::MixOnly {
        // Only target-region pixels are constrained.
        let mask_at = |p: &PixelIndex| mixed.mask.mask[[p.row, p.col]] == 1;
        for (v, p) in valid.iter_mut().zip(&pixels) {
            if mask_at(p) {
                *v = false;
            }
        }
    }
    Ok(AlignmentRows {
        pixels,
        targets,
        valid,
        image: mixed.image,
    })
}

fn weighted(report: &LossReport<f32>, weight: f64) -> Array2<f32> {
    report.grad.mapv(|g| g * weight as f32)
}

fn term_grad(total: &TotalLoss<f32>, name: &str) -> Option<Array2<f32>> {
    total.term(name).map(|t| t.grad.clone())
}

/// Joint training of the 2D and 3D networks on source images and unlabeled target scenes.
///
/// `pl_labels`, when present, holds fixed per-point labels for every target-train
/// scene; both networks then receive an extra cross-entropy term toward them.
pub fn train_comodal(
    dataset: &Dataset,
    pretrained: Option<&SegNet<f32>>,
    config: &Config,
    pl_labels: Option<&[Vec<usize>]>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(dataset)?;
    let t = &config.train;
    let a = &t.ablation;
    let c = dataset.num_classes();
    let scenes = dataset.target_train.scenes();
    if a.use_hybrid_pl && pretrained.is_none() {
        return Err(Error::Config("use_hybrid_pl needs a pretrained 2D snapshot".into()));
    }
    if let Some(p) = pretrained {
        if p.dims().0 != PATCH_FEATURES || p.dims().2 != c {
            return Err(Error::Config(format!("pretrained snapshot has shape {:?}, dataset has {c} classes", p.dims())));
        }
    }
    if let Some(pl) = pl_labels {
        let ok = pl.len() == scenes.len() && pl.iter().zip(scenes).all(|(l, s)| l.len() == s.len() && l.iter().all(|&k| k < c));
        if !ok {
            return Err(Error::Contract("pseudo-labels do not match the target-train split".into()));
        }
    }
    let pretrained_digest = pretrained.map(param_digest);

    let mut net_2d = init_net_2d(dataset, config, streams::INIT_2D)?;
    let mut net_3d = init_net_3d(dataset, config)?;
    let mut teacher = TeacherState::new(&net_3d, t.ema_decay)?;
    let mut adam_2d = AdamState::new(&net_2d);
    let mut adam_3d = AdamState::new(&net_3d);
    let initial_3d = {
        let mut cm = ConfusionMatrix::new(c);
        for (scene, truth) in dataset.target_val.scenes().iter().zip(dataset.target_val.evaluation_truth()) {
            let pred = argmax_labels(net_3d.predict(features_3d::<f32>(&scene.points)?.view())?.view())?;
            let gt: Vec<usize> = truth.point_labels.iter().map(|&l| l as usize).collect();
            cm.accumulate(&gt, &pred.labels)?;
        }
        miou(&cm)?
    };

    let feats_3d: Vec<Array2<f32>> = scenes.iter().map(|s| features_3d::<f32>(&s.points)).collect::<Result<_>>()?;
    let feats_2d_points: Vec<Array2<f32>> = scenes
        .iter()
        .map(|s| features_2d_at::<f32>(s.image.view(), &s.pixel_of_point))
        .collect::<Result<_>>()?;
    let pretrained_labels: Option<Vec<PointPseudoLabels>> = match pretrained {
        Some(p) if a.use_hybrid_pl => Some(
            feats_2d_points
                .iter()
                .map(|f| Ok(argmax_labels(p.predict(f.view())?.view())?.with_provenance(Provenance::Pretrained)))
                .collect::<Result<_>>()?,
        ),
        _ => None,
    };

    let mut batch_rng = rng_for(config, streams::BATCH);
    let mut pixel_rng = rng_for(config, streams::PIXELS);
    let mut mask_rng = rng_for(config, streams::MASK);
    let mut pair_rng = rng_for(config, streams::PAIR);
    let mut select_rng = rng_for(config, streams::SELECT);

    let epoch_len = scenes.len().div_ceil(t.batch_size).max(1);
    let mut log = Vec::with_capacity(t.iterations);
    let mut fusion = Vec::new();
    let (mut epoch_points, mut epoch_online, mut epoch_conf) = (0usize, 0usize, 0.0f64);
    let mut previous_prototypes: Option<ClassPrototypes<f32>> = None;
    let zeros = |rows: usize| Array2::<f32>::zeros((rows, c));

    for it in 0..t.iterations {
        let lr = poly_lr(t.base_lr, it, t.iterations, t.poly_power);
        let src_ids = sample_indices(dataset.source_train.len(), t.batch_size, &mut batch_rng);
        let tgt_ids = sample_indices(scenes.len(), t.batch_size, &mut batch_rng);

        // 3D forward over the batch's target clouds.
        let mut offsets = vec![0usize];
        for &k in &tgt_ids {
            offsets.push(offsets.last().copied().unwrap_or(0) + scenes[k].len());
        }
        let n_points = *offsets.last().unwrap_or(&0);
        let x3 = stack(&tgt_ids.iter().map(|&k| feats_3d[k].clone()).collect::<Vec<_>>(), POINT_FEATURES)?;
        let out_3d = net_3d.forward(x3.view())?;

        // 2D forward over source pixels followed by target point pixels.
        let mut blocks = Vec::with_capacity(2 * t.batch_size);
        let mut source_labels = Vec::new();
        for &k in &src_ids {
            let s = &dataset.source_train[k];
            let (h, w) = s.labels.dim();
            let pixels = sample_pixels(h, w, t.source_pixels, &mut pixel_rng);
            let (f, l) = source_rows(s, &pixels)?;
            blocks.push(f);
            source_labels.extend(l);
        }
        let n_source = source_labels.len();
        for &k in &tgt_ids {
            blocks.push(feats_2d_points[k].clone());
        }
        let x2 = stack(&blocks, PATCH_FEATURES)?;
        let out_2d = net_2d.forward(x2.view())?;
        let cls_target = out_2d.cls.slice(s![n_source.., ..]);
        let mim_target = out_2d.mim.slice(s![n_source.., ..]);

        let l_2d_s = loss_2d_s(out_2d.cls.slice(s![..n_source, ..]), &source_labels)?;
        let online = argmax_labels(cls_target)?;
        let hybrid = match &pretrained_labels {
            Some(cache) => {
                let parts: Vec<PointPseudoLabels> = tgt_ids.iter().map(|&k| cache[k].clone()).collect();
                hybrid_fuse(&online, &PointPseudoLabels::concat(&parts))?
            }
            None => online.clone(),
        };
        epoch_points += hybrid.len();
        epoch_online += hybrid.provenance.iter().filter(|&&p| p == Provenance::Online).count();
        epoch_conf += hybrid.confidence.iter().sum::<f64>();

        let l_3d_t = loss_3d_t(out_3d.cls.view(), &hybrid)?;
        let l_2d_t = loss_2d_t(mim_target, out_3d.cls.view())?;

        let fixed: Option<Vec<usize>> = pl_labels.map(|pl| tgt_ids.iter().flat_map(|&k| pl[k].iter().copied()).collect());
        let l_pl_3d = fixed.as_ref().map(|l| cross_entropy(out_3d.cls.view(), l, None)).transpose()?;
        let l_pl_2d = fixed.as_ref().map(|l| cross_entropy(cls_target, l, None)).transpose()?;

        // Mixed-image distillation.
        let mut icd = None;
        if a.use_icd {
            let mut protos = class_prototypes(out_3d.cls.view(), &hybrid)?;
            if let Some(prev) = &previous_prototypes {
                protos = protos.smoothed(prev, t.prototype_momentum);
            }
            let mut feats = Vec::with_capacity(t.batch_size);
            let mut targets = Vec::with_capacity(t.batch_size);
            let mut valid = Vec::new();
            for (b, (&si, &ti)) in src_ids.iter().zip(&tgt_ids).enumerate() {
                let rows = alignment_rows(
                    config,
                    &dataset.source_train[si],
                    &scenes[ti],
                    out_3d.cls.slice(s![offsets[b]..offsets[b + 1], ..]),
                    &protos,
                    &mut mask_rng,
                    &mut select_rng,
                )?;
                feats.push(features_2d_at::<f32>(rows.image.view(), &rows.pixels)?);
                targets.push(rows.targets);
                valid.extend(rows.valid);
            }
            let x_m = stack(&feats, PATCH_FEATURES)?;
            let targets = stack(&targets, c)?;
            let out_m = net_2d.forward(x_m.view())?;
            let report = loss_2d_m(out_m.mim.view(), targets.view(), &valid)?;
            if t.prototype_momentum > 0.0 {
                previous_prototypes = Some(protos);
            }
            icd = Some((out_m, report));
        }

        // Mixed-cloud guidance: logits of a concatenated cloud are the stacked per-scene rows.
        let mut icg = None;
        if a.use_icg {
            let teacher_labels = argmax_labels(teacher.params.predict(x3.view())?.view())?;
            let partner = pair_batch(t.batch_size, &mut pair_rng)?;
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for (i, &j) in partner.iter().enumerate() {
                let pick = |k: usize, use_2d: bool| -> Vec<usize> {
                    let src = if use_2d { &hybrid.labels } else { &teacher_labels.labels };
                    src[offsets[k]..offsets[k + 1]].to_vec()
                };
                let mixed = mix_pointclouds(
                    &scenes[tgt_ids[i]],
                    &pick(i, a.use_2d_labels_in_icg),
                    &scenes[tgt_ids[j]],
                    &pick(j, !a.use_teacher_labels),
                )?;
                rows.extend(offsets[i]..offsets[i + 1]);
                rows.extend(offsets[j]..offsets[j + 1]);
                labels.extend(mixed.labels);
            }
            let mixed_logits = gather_rows(out_3d.cls.view(), &rows)?;
            let mut report = cross_entropy(mixed_logits.view(), &labels, None)?;
            report.name = "loss_3d_m";
            icg = Some((rows, report));
        }

        let tot_2d = total_2d(&l_2d_s, Some(&l_2d_t), icd.as_ref().map(|(_, r)| r), t.lambda_2d_t, t.lambda_2d_m)?;
        let tot_3d = total_3d(&l_3d_t, icg.as_ref().map(|(_, r)| r), t.lambda_3d_m)?;

        // 2D update.
        let mut grad_cls = concatenate(
            Axis(0),
            &[term_grad(&tot_2d, "loss_2d_s").unwrap_or_else(|| zeros(n_source)).view(), zeros(n_points).view()],
        )
        .map_err(|e| Error::Contract(e.to_string()))?;
        if let Some(r) = &l_pl_2d {
            let mut tail = grad_cls.slice_mut(s![n_source.., ..]);
            tail += &weighted(r, t.pl_weight);
        }
        let mut grad_mim = zeros(n_source + n_points);
        if let Some(g) = term_grad(&tot_2d, "loss_2d_t") {
            grad_mim.slice_mut(s![n_source.., ..]).assign(&g);
        }
        let mut grads_2d = net_2d.param_gradients(&out_2d.cache, grad_cls.view(), Some(grad_mim.view()))?;
        if let Some((out_m, _)) = &icd {
            let g = term_grad(&tot_2d, "loss_2d_m").unwrap_or_else(|| zeros(out_m.mim.nrows()));
            let back = net_2d.param_gradients(&out_m.cache, zeros(g.nrows()).view(), Some(g.view()))?;
            add_grads(&mut grads_2d, &back);
        }
        adam_step(&mut net_2d, &grads_2d, &mut adam_2d, lr).map_err(|e| Error::Numeric(format!("iteration {it}: {e}")))?;

        // 3D update, then the teacher.
        let mut grad_3d = term_grad(&tot_3d, "loss_3d_t").unwrap_or_else(|| zeros(n_points));
        if let Some(r) = &l_pl_3d {
            grad_3d += &weighted(r, t.pl_weight);
        }
        if let (Some((rows, _)), Some(g)) = (&icg, term_grad(&tot_3d, "loss_3d_m")) {
            scatter_add_rows(&mut grad_3d, rows, g.view())?;
        }
        let grads_3d = net_3d.param_gradients(&out_3d.cache, grad_3d.view(), None)?;
        adam_step(&mut net_3d, &grads_3d, &mut adam_3d, lr).map_err(|e| Error::Numeric(format!("iteration {it}: {e}")))?;
        teacher.ema_update(&net_3d)?;

        let pl_2d = l_pl_2d.as_ref().map_or(0.0, |r| r.value);
        let pl_3d = l_pl_3d.as_ref().map_or(0.0, |r| r.value);
        log.push(LogRow {
            iteration: it,
            lr,
            loss_2d_s: l_2d_s.value,
            loss_2d_t: l_2d_t.value,
            loss_2d_m: icd.as_ref().map_or(0.0, |(_, r)| r.value),
            loss_3d_t: l_3d_t.value,
            loss_3d_m: icg.as_ref().map_or(0.0, |(_, r)| r.value),
            loss_pl_2d: pl_2d,
            loss_pl_3d: pl_3d,
            count_2d_s: l_2d_s.count,
            count_2d_t: l_2d_t.count,
            count_2d_m: icd.as_ref().map_or(0, |(_, r)| r.count),
            count_3d_t: l_3d_t.count,
            count_3d_m: icg.as_ref().map_or(0, |(_, r)| r.count),
            total_2d: tot_2d.value + t.pl_weight * pl_2d,
            total_3d: tot_3d.value + t.pl_weight * pl_3d,
            online_fraction: hybrid.online_fraction(),
        });
        if (it + 1) % epoch_len == 0 || it + 1 == t.iterations {
            fusion.push(FusionRow {
                epoch: it / epoch_len,
                points: epoch_points,
                online_fraction: if epoch_points == 0 { 0.0 } else { epoch_online as f64 / epoch_points as f64 },
                mean_confidence: if epoch_points == 0 { 0.0 } else { epoch_conf / epoch_points as f64 },
            });
            (epoch_points, epoch_online, epoch_conf) = (0, 0, 0.0);
        }
    }

    if let (Some(p), Some(d)) = (pretrained, &pretrained_digest) {
        if &param_digest(p) != d {
            return Err(Error::Contract("the pretrained 2D network changed during training".into()));
        }
    }
    let report = evaluate_triads(&net_2d, &net_3d, Some(&teacher.params), &dataset.target_val)?;
    Ok(TrainOutcome {
        config: config.clone(),
        net_2d,
        net_3d,
        teacher: teacher.params,
        log,
        fusion,
        report,
        initial_3d,
        pl_labels: pl_labels.map(|p| p.to_vec()),
    })
}

/// Retrains from fresh initialization with frozen labels from the previous run's ensemble.
pub fn self_train_pl(
    dataset: &Dataset,
    previous_2d: &SegNet<f32>,
    previous_3d: &SegNet<f32>,
    pretrained: Option<&SegNet<f32>>,
    config: &Config,
) -> Result<TrainOutcome> {
    let labels = ensemble_labels(previous_2d, previous_3d, &dataset.target_train)?;
    train_comodal(dataset, pretrained, config, Some(&labels))
}

/// Trains the base run and, when `pl_round` is set, the pseudo-label round on top of it.
pub fn train_with_optional_pl(dataset: &Dataset, pretrained: Option<&SegNet<f32>>, config: &Config) -> Result<TrainOutcome> {
    let base = train_comodal(dataset, pretrained, config, None)?;
    if !config.train.ablation.pl_round {
        return Ok(base);
    }
    self_train_pl(dataset, &base.net_2d, &base.net_3d, pretrained, config)
}

fn pl_labels_text(labels: &[Vec<usize>]) -> String {
    let mut out = String::new();
    for scene in labels {
        let line: Vec<String> = scene.iter().map(|l| l.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Reads labels written next to a pseudo-label run.
pub fn parse_pl_labels(text: &str) -> Result<Vec<Vec<usize>>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|v| v.parse().map_err(|_| Error::Format(format!("pseudo-label line {}: bad value {v:?}", i + 1))))
                .collect()
        })
        .collect()
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub const NET_2D_FILE: &str = "net2d.snap";
pub const NET_3D_FILE: &str = "net3d.snap";
pub const TEACHER_FILE: &str = "teacher3d.snap";
pub const CONFIG_FILE: &str = "config.txt";
pub const PRETRAINED_FILE: &str = "pretrained2d.snap";

pub fn write_pretrained(dir: &Path, config: &Config, pretrained: &Pretrained) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(CONFIG_FILE), config.to_text())?;
    save_snapshot(
        &Snapshot {
            kind: "pretrained2d".into(),
            config_hash: config.hash(),
            net: pretrained.net.clone(),
        },
        &dir.join(PRETRAINED_FILE),
    )?;
    write_file(
        &dir.join("pretrain_report.csv"),
        format!("source_val_pixel_accuracy\n{:.6}\n", pretrained.source_val_accuracy),
    )
}

/// Writes snapshots, logs, the config echo, the eval report and qualitative images.
pub fn write_run_artifacts(dir: &Path, dataset: &Dataset, outcome: &TrainOutcome) -> Result<()> {
    let qual = dir.join("qualitative");
    std::fs::create_dir_all(&qual).map_err(|e| Error::io(&qual, e))?;
    let hash = outcome.config.hash();
    write_file(&dir.join(CONFIG_FILE), outcome.config.to_text())?;
    for (file, kind, net) in [
        (NET_2D_FILE, "net2d", &outcome.net_2d),
        (NET_3D_FILE, "net3d", &outcome.net_3d),
        (TEACHER_FILE, "teacher3d", &outcome.teacher),
    ] {
        save_snapshot(
            &Snapshot {
                kind: kind.into(),
                config_hash: hash.clone(),
                net: net.clone(),
            },
            &dir.join(file),
        )?;
    }
    write_file(&dir.join("train_log.csv"), log_csv(&outcome.log))?;
    write_file(&dir.join("fusion_stats.csv"), fusion_csv(&outcome.fusion))?;
    write_file(&dir.join("eval_report.csv"), crate::eval::eval_report_csv(&outcome.report))?;
    if let Some(pl) = &outcome.pl_labels {
        write_file(&dir.join("pl_labels.txt"), pl_labels_text(pl))?;
    }
    write_qualitative(&qual, dataset, &outcome.net_2d, &outcome.net_3d, outcome.config.train.qualitative_scenes)
}

pub fn write_qualitative(dir: &Path, dataset: &Dataset, net_2d: &SegNet<f32>, net_3d: &SegNet<f32>, count: usize) -> Result<()> {
    let palette = default_palette(dataset.num_classes());
    let split = &dataset.target_val;
    for (k, (scene, truth)) in split.scenes().iter().zip(split.evaluation_truth()).take(count).enumerate() {
        let (h, w, _) = scene.image.dim();
        let pred = predict_scene(net_2d, net_3d, scene)?;
        let gt: Vec<usize> = truth.point_labels.iter().map(|&l| l as usize).collect();
        let name = |suffix: &str| dir.join(format!("scene_{k:03}_{suffix}.ppm"));
        write_file(&name("image"), crate::dataset::encode_ppm(&scene.image))?;
        write_file(&name("gt_pixels"), render_label_map(truth.pixel_labels.view(), &palette)?)?;
        write_file(&name("gt_points"), render_point_labels(&gt, &scene.pixel_of_point, h, w, &palette)?)?;
        write_file(&name("pred_3d"), render_point_labels(&pred.labels_3d(), &scene.pixel_of_point, h, w, &palette)?)?;
        write_file(&name("pred_avg"), render_point_labels(&pred.labels_avg(), &scene.pixel_of_point, h, w, &palette)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_sampling() {
        let mut rng = seed::stream(1, &[]);
        let all = sample_pixels(3, 4, 0, &mut rng);
        assert_eq!(all.len(), 12);
        assert_eq!(all[5], PixelIndex::new(1, 1));
        let some = sample_pixels(8, 8, 10, &mut rng);
        assert_eq!(some.len(), 10);
        let mut dedup = some.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 10);
        assert_eq!(sample_pixels(2, 2, 100, &mut rng).len(), 4);
    }

    #[test]
    fn pl_label_text_round_trip() {
        let labels = vec![vec![0, 5, 2], vec![], vec![1]];
        assert_eq!(parse_pl_labels(&pl_labels_text(&labels)).unwrap(), labels);
        assert!(parse_pl_labels("1 x\n").is_err());
    }
}
