//! Runs the benchmark configurations for a few seeds and prints timings and metrics.
//!
//! Usage: `calibrate [iterations] [seeds] [key=value ...]`

use std::time::Instant;

use lidar_uda::config::Config;
use lidar_uda::dataset::generate_dataset;
use lidar_uda::trainer::{pretrain_2d, train_comodal};

fn main() -> lidar_uda::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let iterations: usize = args.first().and_then(|a| a.parse().ok()).unwrap_or(3000);
    let seeds: u64 = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(1);
    let mut base = Config::default();
    base.train.iterations = iterations;
    for kv in args.iter().skip(2) {
        let (k, v) = kv.split_once('=').expect("key=value");
        base.set(k, v)?;
    }
    let start = Instant::now();
    let data = generate_dataset(&base.scene)?;
    let points: Vec<usize> = data.target_train.scenes().iter().map(|s| s.len()).collect();
    println!(
        "generated in {:.1}s, points per scene mean {:.0} min {} max {}",
        start.elapsed().as_secs_f64(),
        points.iter().sum::<usize>() as f64 / points.len() as f64,
        points.iter().min().unwrap(),
        points.iter().max().unwrap()
    );
    let variants: Vec<(&str, Vec<(&str, &str)>)> = vec![
        ("online", vec![("use_hybrid_pl", "false"), ("use_icd", "false"), ("use_icg", "false")]),
        ("basic", vec![("use_icd", "false"), ("use_icg", "false")]),
        ("icd", vec![("use_icg", "false")]),
        ("full", vec![]),
        ("full-all", vec![("icd_pixel_select", "all")]),
    ];
    if std::env::var("ORACLE").is_ok() {
        oracle_3d(&data, &base)?;
        return Ok(());
    }
    let only: Option<Vec<String>> = std::env::var("ONLY").ok().map(|s| s.split(',').map(String::from).collect());
    let first: u64 = std::env::var("FIRST_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    for seed in first..first + seeds {
        let mut cfg = base.clone();
        cfg.train.seed = seed;
        let t = Instant::now();
        let pre = pretrain_2d(&data, &cfg)?;
        println!("seed {seed} pretrain {:.1}s source-val acc {:.4}", t.elapsed().as_secs_f64(), pre.source_val_accuracy);
        let mut cm = lidar_uda::eval::ConfusionMatrix::new(data.num_classes());
        for (sc, tr) in data.target_val.scenes().iter().zip(data.target_val.evaluation_truth()) {
            let p = lidar_uda::eval::point_probs_2d(&pre.net, sc)?;
            let pred: Vec<usize> = p.rows().into_iter().map(|r| (0..r.len()).fold(0, |b, k| if r[k] > r[b] { k } else { b })).collect();
            let gt: Vec<usize> = tr.point_labels.iter().map(|&l| l as usize).collect();
            cm.accumulate(&gt, &pred)?;
        }
        let pr = lidar_uda::eval::miou(&cm)?;
        println!("  confusion {:?}", cm.counts);
        println!("  pretrained on target: miou {:.4} per class {:?}", pr.mean, pr.per_class.iter().map(|v| v.map(|x| (x * 1000.0).round() / 1000.0)).collect::<Vec<_>>());
        let mut counts = vec![0usize; data.num_classes()];
        for t in data.target_val.evaluation_truth() { for &l in &t.point_labels { counts[l as usize] += 1; } }
        println!("  target-val point class counts {counts:?}");
        for (name, sets) in &variants {
            if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == name)) {
                continue;
            }
            let mut c = cfg.clone();
            for (k, v) in sets {
                c.set(k, v)?;
            }
            let t = Instant::now();
            let out = train_comodal(&data, Some(&pre.net), &c, None)?;
            let r = &out.report;
            println!(
                "seed {seed} {name:9} {:6.1}s  2d {:.4} 3d {:.4} avg {:.4} teacher {:.4} init3d {:.4} online_frac_last {:.3}",
                t.elapsed().as_secs_f64(),
                r.miou_2d.mean,
                r.miou_3d.mean,
                r.miou_avg.mean,
                r.miou_teacher.as_ref().map_or(0.0, |m| m.mean),
                out.initial_3d.mean,
                out.fusion.last().map_or(0.0, |f| f.online_fraction),
            );
            println!("    3d per class {:?}", r.miou_3d.per_class.iter().map(|v| v.map(|x| (x * 1000.0).round() / 1000.0)).collect::<Vec<_>>());
        }
    }
    Ok(())
}

fn oracle_3d(data: &lidar_uda::dataset::Dataset, cfg: &Config) -> lidar_uda::Result<()> {
    use lidar_uda::nets::features_3d;
    use lidar_uda::optim::{adam_step, poly_lr, AdamState};
    use rand::Rng;
    let mut net = lidar_uda::trainer::init_net_3d(data, cfg)?;
    let mut adam = AdamState::new(&net);
    let mut rng = lidar_uda::seed::stream(5, &[]);
    let scenes = data.target_train.scenes();
    let truth: Vec<Vec<usize>> = if std::env::var("ORACLE").as_deref() == Ok("pre") {
        let pre = lidar_uda::trainer::pretrain_2d(data, cfg)?;
        let mut out = Vec::new();
        for s in scenes {
            let p = lidar_uda::eval::point_probs_2d(&pre.net, s)?;
            out.push(p.rows().into_iter().map(|r| (0..r.len()).fold(0, |b, k| if r[k] > r[b] { k } else { b })).collect());
        }
        out
    } else {
        data.target_train.evaluation_truth().iter().map(|t| t.point_labels.iter().map(|&l| l as usize).collect()).collect()
    };
    let iters = cfg.train.iterations;
    let t = Instant::now();
    for it in 0..iters {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..cfg.train.batch_size {
            let k = rng.random_range(0..scenes.len());
            feats.push(features_3d::<f32>(&scenes[k].points)?);
            labels.extend(truth[k].iter().copied());
        }
        let views: Vec<_> = feats.iter().map(|f| f.view()).collect();
        let x = ndarray::concatenate(ndarray::Axis(0), &views).unwrap();
        let out = net.forward(x.view())?;
        let ce = lidar_uda::losses::cross_entropy(out.cls.view(), &labels, None)?;
        let back = net.backward(&out.cache, ce.grad.view(), None)?;
        adam_step(&mut net, &back.params, &mut adam, poly_lr(cfg.train.base_lr, it, iters, 0.9))?;
        if it % 500 == 0 { println!("it {it} ce {:.4}", ce.value); }
    }
    let r = lidar_uda::eval::evaluate_triads(&lidar_uda::trainer::init_net_2d(data, cfg, 1)?, &net, None, &data.target_val)?;
    println!("oracle 3d {:.1}s miou {:.4} {:?}", t.elapsed().as_secs_f64(), r.miou_3d.mean, r.miou_3d.per_class);
    Ok(())
}
