//! Finite-difference verification of the hand-rolled backward pass:
//! compares analytic gradients of the source and target losses against
//! central differences on random small models.

use rand::Rng;

use simpal::data::{substream, Batch};
use simpal::model::{init_params, ModelParams};
use simpal::numeric::{grad_check, Matrix};
use simpal::objective::{source_loss_and_grad, target_loss_and_grad, Gradients};

fn main() {
    let mut rng = substream(42, 0);
    let mut worst = 0.0f64;
    for instance in 0..20 {
        let d_in = rng.gen_range(2..5);
        let n_classes = rng.gen_range(2..5);
        let n_heads = rng.gen_range(1..4);
        let params = init_params(d_in, &[5], 4, n_heads, n_classes, rng.gen());

        let n = rng.gen_range(2..6);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d_in).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n_classes)).collect();
        let batch = Batch {
            features: x.clone(),
            labels: labels.clone(),
            source_tags: (0..n).map(|_| rng.gen_range(0..n_heads)).collect(),
        };

        let check = |loss: &dyn Fn(&ModelParams) -> (f64, Gradients)| -> f64 {
            let tensors: Vec<Matrix> = params.tensors().into_iter().cloned().collect();
            let template = params.clone();
            grad_check(
                |ts| {
                    let mut p = template.clone();
                    for (dst, src) in p.tensors_mut().into_iter().zip(ts) {
                        *dst = src.clone();
                    }
                    Ok(loss(&p))
                },
                &tensors,
                1e-5,
            )
            .expect("finite differences evaluate")
        };
        let source_err = check(&|p| {
            let (report, grads) = source_loss_and_grad(p, &batch).unwrap();
            (report.value, grads)
        });
        let target_err = check(&|p| {
            let (report, grads) = target_loss_and_grad(p, &x, &labels).unwrap();
            (report.value, grads)
        });
        worst = worst.max(source_err).max(target_err);
        println!(
            "instance {instance:2}: d_in={d_in} heads={n_heads} classes={n_classes} \
             source rel err {source_err:.2e}, target rel err {target_err:.2e}"
        );
    }
    println!("\nworst relative error over all instances: {worst:.2e} (tolerance 1e-4)");
    assert!(worst < 1e-4);
}
