//! Quick calibration run: trains one variant on the default corpus and
//! prints per-epoch losses, Visual-G/Visual-I mAP, and IISR.

use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use viplab_core::bench::train::{train_step, TrainSettings};
use viplab_core::bench::{
    generate_category_space, generate_corpus, protocol, split_seeds, CategorySpaceConfig,
    SceneConfig, SyntheticScene,
};
use viplab_core::metrics::iisr;
use viplab_core::model::{FusionSettings, ModelConfig, ToyDetector};
use viplab_core::nn::{Adam, ParamStore};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let variant = args.get(1).map(String::as_str).unwrap_or("distill");
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(6);

    let space_cfg = CategorySpaceConfig {
        seed,
        ..Default::default()
    };
    let space = generate_category_space(&space_cfg).unwrap();
    let scene_cfg = SceneConfig::default();
    let train_scenes =
        generate_corpus(&space, &scene_cfg, &split_seeds(seed, "train", std::env::var("SMOKE_TRAIN").ok().and_then(|s| s.parse().ok()).unwrap_or(512))).unwrap();
    let eval_scenes = generate_corpus(&space, &scene_cfg, &split_seeds(seed, "eval", 32)).unwrap();

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xABCD));
    let mut mc = ModelConfig::default();
    if let Ok(d) = std::env::var("SMOKE_DEC") { mc.dec_layers = d.parse().unwrap(); }
    if let Ok(e) = std::env::var("SMOKE_ENC") { mc.enc_layers = e.parse().unwrap(); }
    let model = ToyDetector::new(&mut store, &mut rng, mc);
    println!("params: {}", store.param_count());

    let mut settings = TrainSettings {
        global_integration: false,
        ..Default::default()
    };
    if let Ok(w) = std::env::var("SMOKE_ENCW") { settings.enc_cls_weight = w.parse().unwrap(); }
    if let Ok(t) = std::env::var("SMOKE_ATAU") { settings.align_tau = t.parse().unwrap(); }
    let scene_cfg = { let mut c = scene_cfg; if let Ok(s) = std::env::var("SMOKE_SINST") { c.sigma_inst = s.parse().unwrap(); } c };
    let train_scenes = generate_corpus(&space, &scene_cfg, &split_seeds(seed, "train", std::env::var("SMOKE_TRAIN").ok().and_then(|s| s.parse().ok()).unwrap_or(512))).unwrap();
    let eval_scenes = generate_corpus(&space, &scene_cfg, &split_seeds(seed, "eval", 32)).unwrap();
    match variant {
        "baseline" => {}
        "align" => {
            settings.align = true;
        }
        "global" => {
            settings.align = true;
            settings.global_integration = true;
        }
        "distill" => {
            settings.align = true;
            settings.global_integration = true;
            settings.distill = true;
        }
        "scl" => {
            settings.align = true;
            settings.global_integration = true;
            settings.scl_instead_of_distill = true;
        }
        other => panic!("unknown variant {other}"),
    }

    let lr: f64 = std::env::var("SMOKE_LR").ok().and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let wd: f64 = std::env::var("SMOKE_WD").ok().and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let mut adam = Adam::with_decay(&store, lr * 0.1, lr, wd);
    let batch_size: usize = std::env::var("SMOKE_BATCH").ok().and_then(|s| s.parse().ok()).unwrap_or(6);
    let mut order: Vec<usize> = (0..train_scenes.len()).collect();
    let mut epoch_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));

    let eval = |store: &ParamStore, tag: &str| {
        let categories: Vec<u32> = (0..space.k() as u32).collect();
        let bank = protocol::visual_g_prompts(&model, store, &categories, &train_scenes, 4, 11)
            .unwrap();
        let (report, _) =
            protocol::evaluate_bank(&model, store, &eval_scenes, &bank, FusionSettings::none())
                .unwrap();
        let vi = protocol::evaluate_visual_i(&model, store, &eval_scenes, 13, FusionSettings::none())
            .unwrap();
        let prompts = protocol::collect_labeled_prompts(&model, store, &eval_scenes, 8).unwrap();
        let ratio = iisr(&prompts).map(|i| i.value).unwrap_or(f64::NAN);
        // Decompose: intra mean and inter-of-means.
        let values = prompts.embeddings.values();
        let mut cats: Vec<u32> = Vec::new();
        for l in &prompts.labels { if !cats.contains(l) { cats.push(*l); } }
        let cos = |a: &ndarray::Array1<f64>, b: &ndarray::Array1<f64>| a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt());
        let mut intra_sum = 0.0;
        let mut means: Vec<ndarray::Array1<f64>> = Vec::new();
        for &c in &cats {
            let rows: Vec<usize> = (0..prompts.labels.len()).filter(|&i| prompts.labels[i] == c).collect();
            let mut s = 0.0; let mut n = 0.0;
            for (a, &i) in rows.iter().enumerate() { for &j in rows.iter().skip(a + 1) {
                s += cos(&values.row(i).to_owned(), &values.row(j).to_owned()); n += 1.0; } }
            intra_sum += s / n;
            let mut m = ndarray::Array1::zeros(values.ncols());
            for &i in &rows { m = m + values.row(i).to_owned(); }
            means.push(m / rows.len() as f64);
        }
        let numer = intra_sum / cats.len() as f64;
        let mut inter = 0.0; let mut n = 0.0;
        for i in 0..means.len() { for j in 0..i { inter += cos(&means[i], &means[j]); n += 1.0; } }
        let denom = inter / n;
        println!("{tag}: visual-g mAP {:.4}  visual-i mAP {:.4}  iisr {:.4} (intra {:.3} / inter {:.3})", report.map, vi.map, ratio, numer, denom);
    };

    let diagnose = |store: &ParamStore| {
        let scene = &eval_scenes[0];
        let categories: Vec<u32> = (0..space.k() as u32).collect();
        let bank = protocol::visual_g_prompts(&model, store, &categories, &train_scenes, 4, 11)
            .unwrap();
        let matrix = viplab_core::integration::bank_as_classifier(&bank).unwrap();
        let mut dets = model.detect(
            store,
            &scene.grid,
            matrix.values(),
            bank.labels(),
            FusionSettings::none(),
        );
        dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        println!("gt:");
        for (b, c) in &scene.instances {
            println!("  cat {c} at ({:.2},{:.2}) {:.2}x{:.2}", b.cx, b.cy, b.w, b.h);
        }
        println!("top detections:");
        for d in dets.iter().take(6) {
            println!(
                "  cat {} score {:.3} at ({:.2},{:.2}) {:.2}x{:.2}",
                d.category, d.score, d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h
            );
        }
        // Encoder token score quality on instance vs background cells.
        let mut fwd = viplab_core::nn::Fwd::new(store);
        let bank_var = fwd.tape.leaf(matrix.values().clone());
        let out = model.forward(&mut fwd, &scene.grid, bank_var, FusionSettings::none());
        let enc = fwd.tape.value(out.enc_scores);
        let mut on_instance: Vec<f64> = Vec::new();
        let mut on_bg: Vec<f64> = Vec::new();
        for r in 0..scene.grid.h {
            for c in 0..scene.grid.w {
                let cx = (c as f64 + 0.5) / scene.grid.w as f64;
                let cy = (r as f64 + 0.5) / scene.grid.h as f64;
                let inside = scene.instances.iter().any(|(b, _)| {
                    let co = b.corners();
                    cx >= co[0] && cx <= co[2] && cy >= co[1] && cy <= co[3]
                });
                let max = enc
                    .row(r * scene.grid.w + c)
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                if inside {
                    on_instance.push(max);
                } else {
                    on_bg.push(max);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        println!(
            "encoder max-score: instance {:.3} background {:.3}",
            mean(&on_instance),
            mean(&on_bg)
        );
        // Localization ceiling: best final-layer box IoU per ground truth,
        // regardless of classification.
        let mut best_ious = Vec::new();
        for scene in eval_scenes.iter().take(8) {
            let mut fwd = viplab_core::nn::Fwd::new(store);
            let bank_var = fwd.tape.leaf(matrix.values().clone());
            let out = model.forward(&mut fwd, &scene.grid, bank_var, FusionSettings::none());
            let boxes = out.layer_box_values.last().unwrap();
            for (gt, _) in &scene.instances {
                let best = boxes
                    .iter()
                    .map(|b| b.iou(gt))
                    .fold(f64::NEG_INFINITY, f64::max);
                best_ious.push(best);
            }
        }
        let hit = best_ious.iter().filter(|&&i| i >= 0.5).count();
        println!(
            "box oracle: mean best IoU {:.3}, recall@0.5 {:.2} ({} gts)",
            mean(&best_ious),
            hit as f64 / best_ious.len() as f64,
            best_ious.len()
        );
    };

    eval(&store, "epoch 0 (untrained)");
    let start = Instant::now();
    let mut step = 0usize;
    for epoch in 0..epochs {
        order.shuffle(&mut epoch_rng);
        let mut totals = (0.0, 0.0, 0.0, 0.0); // cls, box, align, distill
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&SyntheticScene> = chunk.iter().map(|&i| &train_scenes[i]).collect();
            let b = train_step(&model, &mut store, &mut adam, &batch, &space, &settings, step)
                .unwrap();
            totals.0 += b.cls;
            totals.1 += b.l1 + b.giou;
            totals.2 += b.align;
            totals.3 += b.distill;
            step += 1;
        }
        let n = (train_scenes.len() / batch_size) as f64;
        println!(
            "epoch {}: cls {:.4} box {:.4} align {:.4} distill {:.4} ({:.1} ms/step)",
            epoch + 1,
            totals.0 / n,
            totals.1 / n,
            totals.2 / n,
            totals.3 / n,
            start.elapsed().as_millis() as f64 / step as f64,
        );
        eval(&store, &format!("epoch {}", epoch + 1));
    }
    diagnose(&store);
    println!("total {:?}", start.elapsed());
}
