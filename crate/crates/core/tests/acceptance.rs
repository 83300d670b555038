//! Acceptance checks. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line. Pass criterion numbers as arguments to
//! run a subset.

use std::time::{Duration, Instant};

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use hoistlab_core::config::RunConfig;
use hoistlab_core::data::{synth_dataset, Dataset, Split};
use hoistlab_core::decoder::{
    attention_mask, cross_att, decoder_layer, mask_att, AblationFlags, AttentionParams, LayerParams,
    LayerState, LinearParams, MaskStack, QueryRole, QuerySet,
};
use hoistlab_core::eval::{average_precision, evaluate, match_predictions, st_iou, Label, IOU_THRESHOLD};
use hoistlab_core::features::FeatureVolume;
use hoistlab_core::losses::hungarian;
use hoistlab_core::mask::SpatioTemporalMask;
use hoistlab_core::model::Model;
use hoistlab_core::pipeline::predict_dataset;
use hoistlab_core::rle::{rle_decode, rle_encode};
use hoistlab_core::train::train;

type Check = std::result::Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || std * r.sample::<f64, _>(StandardNormal))
}

fn features(r: &mut ChaCha8Rng, t: usize, h: usize, w: usize, c: usize) -> FeatureVolume {
    FeatureVolume {
        data: Array4::from_shape_simple_fn((t, h, w, c), || 0.5 * r.sample::<f64, _>(StandardNormal)),
        stride: 4,
    }
}

fn query_set(data: Array2<f64>, role: QueryRole) -> QuerySet {
    QuerySet { data, role, layer: 0 }
}

fn random_masks(r: &mut ChaCha8Rng, n: usize, grid: (usize, usize, usize)) -> MaskStack {
    let (t, h, w) = grid;
    let mut data = Array2::from_elem((n, t * h * w), false);
    for mut row in data.rows_mut() {
        let p = [0.0, 0.1, 0.5, 0.9, 1.0][r.random_range(0..5)];
        row.mapv_inplace(|_| r.random_bool(p));
    }
    MaskStack::new(data, t, h, w).unwrap()
}

fn softmax_row(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Unmasked attention written with explicit loops.
fn loop_attention(x: &Array2<f64>, y: &Array2<f64>, f: &AttentionParams) -> Array2<f64> {
    let (q, k, v) = (f.q.apply(x), f.k.apply(y), f.v.apply(y));
    let mut out = Array2::zeros(x.dim());
    for i in 0..x.nrows() {
        let scores: Vec<f64> = (0..y.nrows())
            .map(|j| (0..x.ncols()).map(|c| q[[i, c]] * k[[j, c]]).sum())
            .collect();
        let a = softmax_row(&scores);
        for j in 0..y.nrows() {
            for c in 0..x.ncols() {
                out[[i, c]] += a[j] * v[[j, c]];
            }
        }
    }
    out
}

fn criterion_1() -> Check {
    let mut r = rng(1);
    let mut empty_rows = 0;
    for _ in 0..100 {
        let (n, t, h, w) = (r.random_range(1..5), r.random_range(1..4), r.random_range(1..6), r.random_range(1..6));
        let p = [0.0, 0.3, 0.7][r.random_range(0..3)];
        let m = Array4::from_shape_simple_fn((n, t, h, w), || if r.random_bool(p) { 1.0 } else { 0.0 });
        let a = attention_mask(m.view()).map_err(|e| e.to_string())?.data;
        if a.dim() != (t, h, w, n) {
            return Err(format!("shape {:?}", a.dim()));
        }
        for q in 0..n {
            let empty = m.index_axis(ndarray::Axis(0), q).iter().all(|&v| v == 0.0);
            empty_rows += empty as usize;
            for ((tt, y, x), &v) in m.index_axis(ndarray::Axis(0), q).indexed_iter() {
                let expected = if v == 1.0 || empty { 0.0 } else { f64::NEG_INFINITY };
                if a[[tt, y, x, q]] != expected {
                    return Err(format!("query {q} at ({tt},{y},{x}): {}", a[[tt, y, x, q]]));
                }
            }
        }
    }
    Ok(format!("100 masks exact ({empty_rows} empty queries mapped to zero rows)"))
}

fn criterion_2() -> Check {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (n, c) = (r.random_range(1..6), r.random_range(2..9));
        let grid = (r.random_range(1..3), r.random_range(1..5), r.random_range(1..5));
        let feat = features(&mut r, grid.0, grid.1, grid.2, c);
        let x = query_set(normal(&mut r, (n, c), 1.0), QueryRole::Object);
        let f = AttentionParams::random(c, &mut r, 0.5);
        let masks = MaskStack::filled(n, grid.0, grid.1, grid.2, true);
        let out = mask_att(&x, &masks, &feat, &f).map_err(|e| e.to_string())?;
        let oracle = loop_attention(&x.data, &feat.as_matrix(), &f) + &x.data;
        for (a, b) in out.queries.data.iter().zip(oracle.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst < 1e-6 {
        Ok(format!("50 instances, max abs diff {worst:.2e}"))
    } else {
        Err(format!("max abs diff {worst:.2e} >= 1e-6"))
    }
}

fn criterion_3() -> Check {
    let mut r = rng(3);
    for i in 0..50 {
        let (n, c) = (r.random_range(1..6), r.random_range(2..9));
        let grid = (r.random_range(1..3), r.random_range(1..5), r.random_range(1..5));
        let feat = features(&mut r, grid.0, grid.1, grid.2, c);
        let x = query_set(normal(&mut r, (n, c), 1.0), QueryRole::Hand);
        let mut f = AttentionParams::random(c, &mut r, 0.5);
        f.v = LinearParams::zeros(c);
        let masks = random_masks(&mut r, n, grid);
        let out = mask_att(&x, &masks, &feat, &f).map_err(|e| e.to_string())?;
        if out.queries.data != x.data {
            return Err(format!("instance {i}: queries changed"));
        }
    }
    Ok("50 instances bit-exact".into())
}

fn criterion_4() -> Check {
    let mut r = rng(4);
    let mut cases = 0;
    for trial in 0..10 {
        let (n, c) = (r.random_range(1..5), r.random_range(2..7));
        let grid = (r.random_range(1..3), r.random_range(2..5), r.random_range(2..5));
        let feat = features(&mut r, grid.0, grid.1, grid.2, c);
        let lp = LayerParams {
            h2h: AttentionParams::random(c, &mut r, 0.5),
            h2o: AttentionParams::random(c, &mut r, 0.5),
            o2o: AttentionParams::random(c, &mut r, 0.5),
            o2h: AttentionParams::random(c, &mut r, 0.5),
        };
        let prev = LayerState {
            hand: query_set(normal(&mut r, (n, c), 1.0), QueryRole::Hand),
            object: query_set(normal(&mut r, (n, c), 1.0), QueryRole::Object),
            hand_masks: random_masks(&mut r, n, grid),
            object_masks: random_masks(&mut r, n, grid),
        };
        for (h2o_attn, o2h_attn) in [(true, true), (true, false), (false, true), (false, false)] {
            let flags = AblationFlags { h2o_attn, o2h_attn };
            let got = decoder_layer(&prev, &feat, &lp, flags).map_err(|e| e.to_string())?;
            let e = |e: hoistlab_core::Error| e.to_string();
            let hand = mask_att(&prev.hand, &prev.hand_masks, &feat, &lp.h2h).map_err(e)?;
            let mixed = if h2o_attn {
                cross_att(&prev.object, &hand.queries, &lp.h2o).map_err(e)?
            } else {
                prev.object.clone()
            };
            let object = mask_att(&mixed, &prev.object_masks, &feat, &lp.o2o).map_err(e)?;
            let hand_out = if o2h_attn {
                cross_att(&hand.queries, &object.queries, &lp.o2h).map_err(e)?
            } else {
                hand.queries.clone()
            };
            let same = got.state.hand.data == hand_out.data
                && got.state.object.data == object.queries.data
                && got.state.hand_masks == hand.binary
                && got.state.object_masks == object.binary
                && got.hand_soft == hand.soft
                && got.object_soft == object.soft;
            if !same {
                return Err(format!("trial {trial}, flags {flags:?}: layer differs from composition"));
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} cases over all flag settings, zero difference"))
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.n_queries = 3;
    cfg.model.channels = 8;
    cfg.model.layers = 2;
    cfg.data.synth.t = 2;
    cfg.data.synth.h = 32;
    cfg.data.synth.w = 32;
    cfg.data.synth.seed = 11;
    cfg
}

fn criterion_5() -> Check {
    let e = |e: hoistlab_core::Error| e.to_string();
    let cfg = tiny_config();
    let mut model = Model::new(&cfg, 3).map_err(e)?;
    let ds = synth_dataset(&cfg.data.synth, 1, Split::Train).map_err(e)?;
    let entry = &ds.clips[0];
    let loss = cfg.loss.loss_config();
    let targets = model.targets(entry, &loss).map_err(e)?;
    if targets.is_empty() {
        return Err("synthetic clip has no tracks".into());
    }
    let step = model.step(&entry.clip, &targets, &loss).map_err(e)?;
    let base = model.forward(&entry.clip).map_err(e)?;
    let ids: Vec<_> = model.store.ids().collect();
    let h = 1e-3;
    let mut r = rng(5);
    let (mut checked, mut skipped, mut worst) = (0usize, 0usize, 0.0f64);
    let mut attempts = 0;
    while checked < 24 && attempts < 400 {
        attempts += 1;
        let id = ids[r.random_range(0..ids.len())];
        let Some(grad) = &step.grads[id.index()] else { continue };
        let (rows, cols) = grad.dim();
        let at = (r.random_range(0..rows), r.random_range(0..cols));
        let analytic = grad[at];
        let orig = model.store.get(id)[at];
        let mut eval_at = |v: f64| -> std::result::Result<(f64, bool), String> {
            model.store.get_mut(id)[at] = v;
            let out = model.forward(&entry.clip).map_err(e)?;
            let stable = out.layers.iter().zip(&base.layers).all(|(a, b)| {
                a.hand_binary == b.hand_binary && a.object_binary == b.object_binary
            });
            let l = model.loss_with_matching(&entry.clip, &targets, &step.matching, &loss).map_err(e)?;
            Ok((l.total, stable))
        };
        let (plus, s1) = eval_at(orig + h)?;
        let (minus, s2) = eval_at(orig - h)?;
        model.store.get_mut(id)[at] = orig;
        if !(s1 && s2) {
            skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-7 {
            continue;
        }
        let rel = (analytic - numeric).abs() / scale;
        worst = worst.max(rel);
        checked += 1;
        if rel >= 1e-4 {
            return Err(format!(
                "{}{at:?}: analytic {analytic:.8e} numeric {numeric:.8e} rel {rel:.2e}",
                model.store.name(id)
            ));
        }
    }
    if checked < 20 {
        return Err(format!("only {checked} usable parameters ({skipped} skipped at mask flips)"));
    }
    Ok(format!("{checked} parameters, max rel error {worst:.2e} ({skipped} skipped at mask flips)"))
}

fn brute_force_min(cost: &Array2<f64>) -> f64 {
    fn go(cost: &Array2<f64>, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == cost.nrows() {
            *best = best.min(acc);
            return;
        }
        for j in 0..cost.ncols() {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc + cost[[row, j]], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.ncols()], 0.0, &mut best);
    best
}

fn criterion_6() -> Check {
    let mut r = rng(6);
    for i in 0..100 {
        let k = r.random_range(1..=6);
        let n = r.random_range(k..=8);
        let cost = Array2::from_shape_simple_fn((k, n), || r.random_range(-5.0..5.0));
        let m = hungarian(&cost).map_err(|e| e.to_string())?;
        let best = brute_force_min(&cost);
        let own: f64 = m.assignment.iter().enumerate().map(|(row, &col)| cost[[row, col]]).sum();
        if m.total_cost != best || own != best {
            return Err(format!("matrix {i} ({k}x{n}): {} vs brute force {best}", m.total_cost));
        }
    }
    Ok("100 matrices up to 6x8 equal brute force".into())
}

fn reference_ap(labels: &[Label], n_gt: usize) -> f64 {
    // Mean over recall levels i/n_gt of the best precision reached at or beyond that recall.
    let mut points = Vec::new();
    let mut tp = 0;
    for (i, l) in labels.iter().enumerate() {
        tp += (*l == Label::Tp) as usize;
        points.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    (1..=n_gt)
        .map(|i| {
            let level = i as f64 / n_gt as f64;
            points
                .iter()
                .filter(|(rec, _)| *rec >= level - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / n_gt as f64
}

fn criterion_7() -> Check {
    let mut r = rng(7);
    for i in 0..50 {
        let shape = (r.random_range(1..4), r.random_range(1..8), r.random_range(1..8));
        let a = Array3::from_shape_simple_fn(shape, || r.random_bool(0.4));
        let b = Array3::from_shape_simple_fn(shape, || r.random_bool(0.4));
        let inter = a.iter().zip(b.iter()).filter(|(x, y)| **x && **y).count();
        let union = a.iter().zip(b.iter()).filter(|(x, y)| **x || **y).count();
        let oracle = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        let got = st_iou(&SpatioTemporalMask::from_array(a), &SpatioTemporalMask::from_array(b))
            .map_err(|e| e.to_string())?;
        if got != oracle {
            return Err(format!("iou case {i}: {got} vs {oracle}"));
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let len = r.random_range(1..9);
        let labels: Vec<Label> = (0..len).map(|_| if r.random_bool(0.5) { Label::Tp } else { Label::Fp }).collect();
        let tps = labels.iter().filter(|l| **l == Label::Tp).count();
        let n_gt = (tps + r.random_range(0..3)).max(1);
        worst = worst.max((average_precision(&labels, n_gt) - reference_ap(&labels, n_gt)).abs());
    }
    if worst > 1e-9 {
        return Err(format!("AP differs from reference by {worst:.2e}"));
    }
    let tp_fp = average_precision(&[Label::Tp, Label::Fp], 1);
    let fp_tp = average_precision(&[Label::Fp, Label::Tp], 1);
    if tp_fp != 1.0 || fp_tp != 0.5 {
        return Err(format!("[TP,FP] -> {tp_fp}, [FP,TP] -> {fp_tp}"));
    }
    let mut gt = SpatioTemporalMask::zeros(1, 1, 2);
    gt.data_mut().fill(true);
    let mut half = SpatioTemporalMask::zeros(1, 1, 2);
    half.data_mut()[[0, 0, 0]] = true;
    let m = match_predictions(&[&half], &[&gt], IOU_THRESHOLD).map_err(|e| e.to_string())?;
    if m.labels != [Label::Fp] {
        return Err("IoU exactly 0.5 counted as a true positive".into());
    }
    Ok(format!("50 IoU cases exact, 50 AP cases within {worst:.1e}, strict > 0.5"))
}

fn criterion_8() -> Check {
    let e = |e: hoistlab_core::Error| e.to_string();
    for bits in 0u32..512 {
        let m = Array2::from_shape_fn((3, 3), |(y, x)| ((bits >> (y * 3 + x)) & 1) as u8);
        if rle_decode(&rle_encode(m.view()).map_err(e)?).map_err(e)? != m {
            return Err(format!("3x3 pattern {bits:#011b}"));
        }
    }
    let mut r = rng(8);
    for i in 0..1000 {
        let shape = (r.random_range(1..=64), r.random_range(1..=64));
        let p = r.random_range(0.0..1.0);
        let m = Array2::from_shape_simple_fn(shape, || r.random_bool(p) as u8);
        if rle_decode(&rle_encode(m.view()).map_err(e)?).map_err(e)? != m {
            return Err(format!("random mask {i} {shape:?}"));
        }
    }
    Ok("512 exhaustive 3x3 and 1000 random masks round-trip".into())
}

fn overfit_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.n_clips = 4;
    cfg.data.synth.t = 4;
    cfg.data.synth.h = 96;
    cfg.data.synth.w = 96;
    cfg.data.synth.n_objects = 2;
    cfg.data.synth.seed = 42;
    cfg.model.n_queries = 8;
    cfg.model.channels = 64;
    cfg.model.layers = 3;
    cfg.optim.learning_rate = 1e-4;
    cfg.optim.iterations = 2000;
    cfg.optim.seed = 0;
    cfg.optim.log_every = 0;
    cfg
}

fn criterion_9() -> Check {
    let e = |e: hoistlab_core::Error| e.to_string();
    let mut cfg = overfit_config();
    cfg.loss.contact_loss = false;
    cfg.optim.iterations = 120;
    let ds = synth_dataset(&cfg.data.synth, cfg.data.n_clips, Split::Train).map_err(e)?;
    let mut model = Model::new(&cfg, cfg.optim.seed).map_err(e)?;
    let mut nonzero = 0;
    let report = train(&mut model, &ds, &cfg, None, |_, b| {
        if b.mask_c != 0.0 || b.dice_c != 0.0 {
            nonzero += 1;
        }
    })
    .map_err(e)?;
    if nonzero > 0 {
        return Err(format!("{nonzero} iterations with nonzero contact terms"));
    }
    Ok(format!("{} iterations, mask_C = dice_C = 0 throughout", report.history.len()))
}

struct Overfit {
    ap: f64,
    empty_not_held: (usize, usize),
    first_losses: Vec<f64>,
}

fn overfit_run() -> std::result::Result<Overfit, String> {
    let e = |e: hoistlab_core::Error| e.to_string();
    let cfg = overfit_config();
    let ds = synth_dataset(&cfg.data.synth, cfg.data.n_clips, Split::Train).map_err(e)?;
    let mut model = Model::new(&cfg, cfg.optim.seed).map_err(e)?;
    let report = train(&mut model, &ds, &cfg, None, |_, _| {}).map_err(e)?;
    let preds = predict_dataset(&model, &ds, cfg.io.score_thresh).map_err(e)?;
    let ap = evaluate(&preds, &ds, IOU_THRESHOLD).map_err(e)?.ap;
    Ok(Overfit {
        ap,
        empty_not_held: not_held_emptiness(&preds, &ds)?,
        first_losses: report.first_losses(10),
    })
}

/// Over predictions matched to a ground-truth object, counts (empty, total)
/// predicted frames among the frames where that object is not held.
fn not_held_emptiness(
    preds: &[hoistlab_core::eval::PredictedTrack],
    ds: &Dataset,
) -> std::result::Result<(usize, usize), String> {
    let (mut empty, mut total) = (0, 0);
    for entry in &ds.clips {
        let mut mine: Vec<_> = preds.iter().filter(|p| p.clip_id == entry.clip.clip_id).collect();
        mine.sort_by(|a, b| b.score.total_cmp(&a.score));
        let gts: Vec<_> = entry.tracks.iter().filter(|t| t.is_hand_held_instance()).collect();
        let masks: Vec<_> = mine.iter().map(|p| &p.mask).collect();
        let gt_masks: Vec<_> = gts.iter().map(|t| &t.masks).collect();
        let m = match_predictions(&masks, &gt_masks, IOU_THRESHOLD).map_err(|e| e.to_string())?;
        for (p, matched) in mine.iter().zip(&m.matches) {
            let Some((j, _)) = matched else { continue };
            let held = gts[*j].held.as_ref().ok_or("object without held flags")?;
            for (t, &h) in held.iter().enumerate() {
                if !h {
                    total += 1;
                    empty += p.mask.frame_is_empty(t) as usize;
                }
            }
        }
    }
    Ok((empty, total))
}

fn criterion_10(run: &std::result::Result<Overfit, String>) -> Check {
    let o = run.as_ref().map_err(Clone::clone)?;
    let (empty, total) = o.empty_not_held;
    let frac = if total == 0 { 1.0 } else { empty as f64 / total as f64 };
    let msg = format!(
        "AP {:.4} (need >= 0.95), not-held frames empty {empty}/{total} = {frac:.3} (need >= 0.9)",
        o.ap
    );
    if o.ap >= 0.95 && frac >= 0.9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_11(first: &std::result::Result<Overfit, String>) -> Check {
    let first = first.as_ref().map_err(Clone::clone)?;
    let second = overfit_run()?;
    if second.ap == first.ap && second.first_losses == first.first_losses && first.first_losses.len() == 10 {
        Ok(format!("identical AP {:.4} and first 10 losses over two runs", first.ap))
    } else {
        Err(format!(
            "AP {} vs {}, first losses {:?} vs {:?}",
            first.ap, second.ap, first.first_losses, second.first_losses
        ))
    }
}

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, n: u32, result: Check, took: Duration, budget: Duration) {
        let (status, detail) = match (result, took > budget) {
            (Ok(d), false) => ("PASS", d),
            (Ok(d), true) => ("FAIL", format!("{d}; over time budget")),
            (Err(d), _) => ("FAIL", d),
        };
        self.failed += (status == "FAIL") as usize;
        println!("criterion {n:2}: {status} {:.2}s/{}s {detail}", took.as_secs_f64(), budget.as_secs());
    }
}

type Criterion = (u32, fn() -> Check, u64);

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut report = Report { failed: 0 };
    let table: [Criterion; 9] = [
        (1, criterion_1, 1),
        (2, criterion_2, 5),
        (3, criterion_3, 1),
        (4, criterion_4, 5),
        (5, criterion_5, 120),
        (6, criterion_6, 10),
        (7, criterion_7, 10),
        (8, criterion_8, 5),
        (9, criterion_9, 60),
    ];
    for (n, f, budget) in table {
        if run(n) {
            let start = Instant::now();
            let r = f();
            report.line(n, r, start.elapsed(), Duration::from_secs(budget));
        }
    }
    if run(10) || run(11) {
        let budget = Duration::from_secs(20 * 60);
        let start = Instant::now();
        let first = overfit_run();
        let took = start.elapsed();
        if run(10) {
            report.line(10, criterion_10(&first), took, budget);
        }
        if run(11) {
            let r = criterion_11(&first);
            report.line(11, r, start.elapsed(), 2 * budget);
        }
    }
    if report.failed > 0 {
        std::process::exit(1);
    }
}
