//! Self-generated vs ground-truth pseudo-labels: runs the adaptation
//! phase twice from the same warm start, once with the model's own
//! agreement-filtered predictions and once with the hidden true labels
//! substituted in. The gap between the two shows how much headroom the
//! pseudo-label quality leaves on the table.

use simpal::cli::resolve_data;
use simpal::config::RunConfig;
use simpal::eval::target_accuracy;
use simpal::model::init_params;
use simpal::trainer::{adapt, warm_start, TrainMode, TrainOptions};

fn main() {
    println!(
        "{:>4} {:>9} {:>14} {:>13}",
        "seed", "warm acc", "self-labeled", "oracle-labeled"
    );
    for seed in 0..5u64 {
        let config = RunConfig::desk_preset("oracle-comparison", vec![seed]);
        let data = resolve_data(&config, seed).unwrap();
        let truth = data.eval_labels.as_ref().unwrap();

        let mut accs = Vec::new();
        let mut warm_acc = 0.0;
        for mode in [TrainMode::Simpal, TrainMode::Oracle] {
            let opts = TrainOptions { seed, mode, ..config.train.clone() };
            let params = init_params(
                data.target.dim(),
                &config.model.hidden_dims,
                config.model.latent_dim,
                data.sources.len(),
                data.n_classes,
                seed,
            );
            let warm = warm_start(params, &data.sources, &data.target, Some(truth), &opts).unwrap();
            warm_acc = target_accuracy(&warm.params, &data.target, truth).unwrap();
            let state = adapt(warm, &data.sources, &data.target, Some(truth), &opts).unwrap();
            accs.push(target_accuracy(&state.params, &data.target, truth).unwrap());
        }
        println!("{seed:>4} {warm_acc:>9.4} {:>14.4} {:>13.4}", accs[0], accs[1]);
    }
    println!("\nthe oracle column bounds what perfect pseudo-labels could achieve");
}
