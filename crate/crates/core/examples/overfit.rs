//! Trains the default model on four synthetic clips and scores it on the
//! same clips.
//!
//! cargo run --release --example overfit -- [iterations]

use std::time::Instant;

use hoistlab_core::config::RunConfig;
use hoistlab_core::data::{synth_dataset, Split};
use hoistlab_core::eval::{evaluate, IOU_THRESHOLD};
use hoistlab_core::model::Model;
use hoistlab_core::pipeline::predict_dataset;
use hoistlab_core::train::train;

fn main() -> hoistlab_core::Result<()> {
    let mut cfg = RunConfig::default();
    if let Some(n) = std::env::args().nth(1) {
        cfg.optim.iterations = n.parse().expect("iterations must be an integer");
    }
    cfg.data.synth.seed = 42;
    let ds = synth_dataset(&cfg.data.synth, 4, Split::Train)?;
    let mut model = Model::new(&cfg, cfg.optim.seed)?;
    println!("{} parameters", model.store.numel());

    let start = Instant::now();
    train(&mut model, &ds, &cfg, None, |it, b| {
        if it % 100 == 0 {
            println!(
                "{it:5} total {:.4} cls {:.4} mask_o {:.4} dice_o {:.4}",
                b.total, b.cls, b.mask_o, b.dice_o
            );
        }
    })?;
    println!("trained in {:.1}s", start.elapsed().as_secs_f64());

    for entry in &ds.clips {
        let probs: Vec<String> = model
            .forward(&entry.clip)?
            .track_probs()
            .iter()
            .map(|p| format!("{p:.2}"))
            .collect();
        println!("{} track probabilities [{}]", entry.clip.clip_id, probs.join(", "));
    }
    let preds = predict_dataset(&model, &ds, cfg.io.score_thresh)?;
    let report = evaluate(&preds, &ds, IOU_THRESHOLD)?;
    println!("AP {:.4} ({} predictions, {} ground truth)", report.ap, report.n_pred, report.n_gt);
    Ok(())
}
