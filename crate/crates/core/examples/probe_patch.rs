//! Scratch probe: patch-optimization bootstrap dynamics (not shipped).

use dualkey_core::detector::{
    read_detector_file, receptive_field_origin, DetectorModel, N_B, RF,
};
use dualkey_core::io::derive_seed;
use dualkey_core::numerics::{adam_update, stable_sigmoid, AdamParams, AdamState, Graph, Tensor};
use dualkey_core::patchopt::{
    center_origin, count_pair_frequencies, kept_cells, make_solid_patch, patch_loss, patch_side,
    select_semantic_targets, target_detection_rate, Patch, PatchLossItem, PatchMeta, PatchStyle,
};
use dualkey_core::synthdata::{render, sample_scene, Image, CHANNELS};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::path::Path;

fn pool_images(seed: u64, n: usize, tag: &str) -> Vec<Image> {
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, tag));
    (0..n).map(|_| render(&sample_scene(&mut rng).unwrap())).collect()
}

/// Cells whose receptive field window intersects the patch rectangle.
fn overlap_cells(s: usize, origin: (usize, usize)) -> Vec<usize> {
    let mut out = Vec::new();
    for cell in 0..64 {
        let (oy, ox) = receptive_field_origin(cell);
        let inter = |a0: usize, a1: usize, b0: usize, b1: usize| a0 < b1 && b0 < a1;
        if inter(oy, oy + RF, origin.0, origin.0 + s)
            && inter(ox, ox + RF, origin.1, origin.1 + s)
        {
            out.push(cell);
        }
    }
    out
}

struct EpochStats {
    loss: f64,
    det_rate: f64,
    kept_rate: f64,
    mean_objness: f64,
    mean_p_obj: f64,
    mean_p_attr: f64,
}

fn eval_stats(
    det: &DetectorModel,
    eval_pool: &[Image],
    theta: &[f64],
    s: usize,
    origin: (usize, usize),
    target: (u8, u8),
    ov: &[usize],
) -> EpochStats {
    let pixels: Vec<f64> = theta.iter().map(|&x| stable_sigmoid(x)).collect();
    let patch = Patch {
        style: PatchStyle::Optimized,
        size: s,
        pixels: Tensor::new(vec![s, s, CHANNELS], pixels).unwrap(),
        meta: PatchMeta::Optimized { target_obj: target.0, target_attr: target.1 },
    };
    let det_rate = target_detection_rate(det, &patch, eval_pool, target).unwrap();
    let mut kept_hits = 0usize;
    let mut objness = 0.0;
    let mut p_obj = 0.0;
    let mut p_attr = 0.0;
    let mut n_win = 0usize;
    for img in eval_pool {
        let patched = dualkey_core::patchopt::overlay(img, &patch, origin.0, origin.1).unwrap();
        let ds = det.detect(&patched);
        if ds.detections.iter().any(|d| ov.contains(&d.cell_index)) {
            kept_hits += 1;
        }
        for d in ds.detections.iter().filter(|d| ov.contains(&d.cell_index)) {
            objness += d.objectness;
            p_obj += d.obj_probs[target.0 as usize];
            p_attr += d.attr_probs[target.1 as usize];
            n_win += 1;
        }
    }
    let n = eval_pool.len() as f64;
    let w = n_win.max(1) as f64;
    EpochStats {
        loss: 0.0,
        det_rate,
        kept_rate: kept_hits as f64 / n,
        mean_objness: objness / w,
        mean_p_obj: p_obj / w,
        mean_p_attr: p_attr / w,
    }
}

fn run_variant(
    name: &str,
    det: &DetectorModel,
    pool: &[Image],
    eval_pool: &[Image],
    target: (u8, u8),
    init: impl Fn(&mut ChaCha20Rng, usize) -> Vec<f64>,
    epochs: usize,
    lr: f64,
) {
    let s = patch_side(0.1).unwrap();
    let origin = center_origin(s);
    let ov = overlap_cells(s, origin);
    println!("== variant {name}: s={s} origin={origin:?} overlap_cells={ov:?}");
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let mut theta = init(&mut rng, s * s * CHANNELS);
    let mut adam = AdamState::new(theta.len());
    let hp = AdamParams::with_lr(lr);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let st = eval_stats(det, eval_pool, &theta, s, origin, target, &ov);
    println!(
        "  init: det={:.3} kept={:.3} objness={:.3} p_obj={:.3} p_attr={:.3}",
        st.det_rate, st.kept_rate, st.mean_objness, st.mean_p_obj, st.mean_p_attr
    );
    let t = (target.0 as usize, target.1 as usize);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut rows_total = 0usize;
        let mut grad_norm = 0.0;
        for chunk in order.chunks(16) {
            let theta_t = Tensor::new(vec![s, s, CHANNELS], theta.clone()).unwrap();
            let pixels_now = {
                let mut g = Graph::new();
                let th = g.input(theta_t.clone());
                let px = g.sigmoid(th);
                g.value(px).clone()
            };
            let items: Vec<PatchLossItem> = chunk
                .iter()
                .map(|&i| {
                    let cells = kept_cells(det, &pool[i], &pixels_now, origin).unwrap();
                    PatchLossItem { image: pool[i].clone(), origin, cells }
                })
                .collect();
            let n_rows: usize = items.iter().map(|it| it.cells.len()).sum();
            let mut g = Graph::new();
            let th = g.param(theta_t);
            let nodes = patch_loss(&mut g, det, &items, th, t, 0.1).unwrap();
            g.backward(nodes.loss).unwrap();
            loss_sum += g.value(nodes.loss).item();
            rows_total += n_rows;
            let grad = g.grad(th).unwrap();
            grad_norm += grad.iter().map(|x| x * x).sum::<f64>().sqrt();
            adam_update("theta", &mut theta, grad, &mut adam, &hp).unwrap();
        }
        let st = eval_stats(det, eval_pool, &theta, s, origin, target, &ov);
        println!(
            "  ep{:02}: loss={:.4} |g|={:.4} det={:.3} kept={:.3} objness={:.3} p_obj={:.3} p_attr={:.3}",
            epoch,
            loss_sum / rows_total as f64,
            grad_norm / (pool.len() as f64 / 16.0),
            st.det_rate,
            st.kept_rate,
            st.mean_objness,
            st.mean_p_obj,
            st.mean_p_attr
        );
    }
}

/// Ceiling probe: maximize target prob for an explicit window set on one
/// fixed image, long run, small lr — measures representability, not dynamics.
fn ceiling(
    name: &str,
    det: &DetectorModel,
    img: &Image,
    cells: Vec<usize>,
    target: (u8, u8),
    steps: usize,
    lr: f64,
    init_amp: f64,
) {
    let s = patch_side(0.1).unwrap();
    let origin = center_origin(s);
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let mut theta: Vec<f64> =
        (0..s * s * CHANNELS).map(|_| rng.random_range(-init_amp..init_amp)).collect();
    let mut adam = AdamState::new(theta.len());
    let hp = AdamParams::with_lr(lr);
    let t = (target.0 as usize, target.1 as usize);
    let items =
        vec![PatchLossItem { image: img.clone(), origin, cells: cells.clone() }];
    let mut last = f64::NAN;
    for step in 0..steps {
        let theta_t = Tensor::new(vec![s, s, CHANNELS], theta.clone()).unwrap();
        let mut g = Graph::new();
        let th = g.param(theta_t);
        let nodes = patch_loss(&mut g, det, &items, th, t, 0.1).unwrap();
        g.backward(nodes.loss).unwrap();
        last = g.value(nodes.loss).item();
        let grad = g.grad(th).unwrap().to_vec();
        adam_update("theta", &mut theta, &grad, &mut adam, &hp).unwrap();
        if step % (steps / 5).max(1) == 0 {
            println!("  {name} step {step}: loss={last:.4}");
        }
    }
    // Report final per-window probabilities.
    let pixels: Vec<f64> = theta.iter().map(|&x| stable_sigmoid(x)).collect();
    let patch = Patch {
        style: PatchStyle::Optimized,
        size: s,
        pixels: Tensor::new(vec![s, s, CHANNELS], pixels).unwrap(),
        meta: PatchMeta::Optimized { target_obj: target.0, target_attr: target.1 },
    };
    let patched = dualkey_core::patchopt::overlay(img, &patch, origin.0, origin.1).unwrap();
    let ds = det.detect(&patched);
    let mean_abs_theta = theta.iter().map(|x| x.abs()).sum::<f64>() / theta.len() as f64;
    println!("  {name}: final loss {last:.4}, mean|theta| {mean_abs_theta:.2}");
    for c in &cells {
        match ds.detections.iter().find(|d| d.cell_index == *c) {
            Some(d) => println!(
                "    cell {c}: KEPT objness={:.3} p_obj={:.3} p_attr={:.3} argmax=({},{})",
                d.objectness,
                d.obj_probs[t.0],
                d.attr_probs[t.1],
                d.obj_argmax(),
                d.attr_argmax()
            ),
            None => println!("    cell {c}: not kept"),
        }
    }
}

fn main() {
    let (det, _) =
        read_detector_file(Path::new("/root/probe_out/detector/detector.bin"), None).unwrap();
    let pool = pool_images(1, 2000, "patch-pool");
    let eval_pool = pool_images(1, 400, "patch-eval-probe");

    let freqs = count_pair_frequencies(&det, &pool);
    let targets = select_semantic_targets(&freqs, pool.len(), (0.01, 0.1));
    println!("semantic targets in band: {targets:?}");
    let target = targets[0];
    println!("using target {target:?}");

    // Natural base rate: how often does the *unpatched* eval pool already
    // contain a kept detection matching the target?
    let mut nat = 0usize;
    for img in &eval_pool {
        let ds = det.detect(img);
        if ds
            .detections
            .iter()
            .any(|d| d.obj_argmax() == target.0 as usize && d.attr_argmax() == target.1 as usize)
        {
            nat += 1;
        }
    }
    println!("natural target rate on eval pool: {:.3}", nat as f64 / eval_pool.len() as f64);

    // Solid-blue baseline detection rate.
    let solid = make_solid_patch("blue", 0.1).unwrap();
    let sr = target_detection_rate(&det, &solid, &eval_pool, target).unwrap();
    println!("solid blue detection rate: {sr:.3}");

    let n_b = N_B;
    println!("top-K = {n_b}");

    let fixed = &eval_pool[0];
    ceiling("single-window", &det, fixed, vec![27], target, 1500, 0.01, 0.5);
    ceiling("four-windows", &det, fixed, vec![27, 28, 35, 36], target, 1500, 0.01, 0.5);
    if std::env::args().any(|a| a == "--dynamics") {
        run_variant_all(&det, &pool, &eval_pool, target);
    }
}

#[allow(dead_code)]
fn run_variant_all(
    det: &DetectorModel,
    pool: &[Image],
    eval_pool: &[Image],
    target: (u8, u8),
) {
    run_variant(
        "uniform+-3",
        &det,
        &pool,
        &eval_pool,
        target,
        |rng, n| (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
        12,
        0.03,
    );
    run_variant(
        "blue-sprite",
        &det,
        &pool,
        &eval_pool,
        target,
        |_, n| {
            // Saturated palette blue: channels (0.05, 0.05, 0.95) in logit space.
            (0..n)
                .map(|i| if i % 3 == 2 { 2.9444 } else { -2.9444 })
                .collect()
        },
        12,
        0.03,
    );
}
