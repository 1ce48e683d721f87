//! Records the overfit oracle. Run with
//! `cargo test --test overfit_oracle -- --ignored` to regenerate
//! tests/oracle/overfit.json; the acceptance target checks against it.

mod common;

use common::*;

#[test]
#[ignore]
fn record_overfit_oracle() {
    let seed = 0;
    let run = run_overfit(seed);
    let steps = &run.outcome.steps;
    let (first, last) = (steps.first().unwrap(), steps.last().unwrap());

    let (untrained_store, untrained_model) = untrained(&run.cfg);
    let untrained_mae = mean_masked_video_mae(&untrained_store, &untrained_model, &run.cfg, &run.data);
    let mae = mean_masked_video_mae(&run.outcome.store, &run.outcome.model, &run.cfg, &run.data);
    assert!(mae < untrained_mae, "overfit did not improve reconstructions: {mae} vs {untrained_mae}");

    let oracle = OverfitOracle {
        seed,
        clips: run.data.len(),
        steps: steps.len(),
        base_lr: run.cfg.pretrain.base_lr,
        initial_lr_loss: first.lr_loss,
        final_lr_loss: last.lr_loss,
        final_lc: last.lc,
        matched_fraction: matched_fraction(&run.outcome.store, &run.outcome.model, &run.data),
        untrained_masked_video_mae: untrained_mae,
        masked_video_mae: mae,
        thresholds: OverfitThresholds {
            lr_ratio: 0.25,
            lc_margin: 0.1,
            matched_fraction: 0.9,
            // halfway between the oracle run and the untrained model
            masked_video_mae: 0.5 * (mae + untrained_mae),
        },
    };
    let path = oracle_path();
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(&path, serde_json::to_string_pretty(&oracle).unwrap() + "\n").unwrap();
    println!("{}", serde_json::to_string_pretty(&oracle).unwrap());
}
