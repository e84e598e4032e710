//! Agreement and margin diagnostics: trains a warm start on the desk
//! preset, then shows the agreement rate, accuracy split by classifier
//! agreement, and precision of the margin-ranked curriculum bins.

use simpal::cli::resolve_data;
use simpal::config::RunConfig;
use simpal::eval::{accuracy_split_by_agreement, curriculum_precision, target_accuracy};
use simpal::model::{agreement_rate, init_params, MarginMode};
use simpal::trainer::{warm_start, TrainOptions};

fn main() {
    let seed = 0;
    let config = RunConfig::desk_preset("agreement-margin", vec![seed]);
    let data = resolve_data(&config, seed).unwrap();
    let truth = data.eval_labels.as_ref().unwrap();
    let opts = TrainOptions { seed, ..config.train.clone() };
    let params = init_params(
        data.target.dim(),
        &config.model.hidden_dims,
        config.model.latent_dim,
        data.sources.len(),
        data.n_classes,
        seed,
    );

    let state = warm_start(params, &data.sources, &data.target, Some(truth), &opts).unwrap();
    let a = agreement_rate(&state.params, &data.target).unwrap();
    let acc = target_accuracy(&state.params, &data.target, truth).unwrap();
    let split = accuracy_split_by_agreement(&state.params, &data.target, truth).unwrap();

    println!("warm start converged after {} iterations", state.iteration);
    println!("target agreement rate A = {a:.4}");
    println!("target accuracy overall = {acc:.4}");
    println!(
        "  where classifiers agree    ({} samples): {}",
        split.n_agree,
        split.acc_agree.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
    );
    println!(
        "  where classifiers disagree ({} samples): {}",
        split.n_disagree,
        split.acc_disagree.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
    );

    println!("\ncurriculum bins, highest ensemble margin first:");
    println!("{:>12} {:>10}", "percentile", "precision");
    for (pct, precision) in
        curriculum_precision(&state.params, &data.target, truth, 10, MarginMode::Ensemble).unwrap()
    {
        println!("{pct:>11.0}% {precision:>10.4}");
    }
}
