//! Synthetic multi-domain generation: Gaussian class clusters on the
//! unit circle, with each domain a rotation/translation/scale of the
//! same base layout. Writes the CSVs plus a manifest to a temporary
//! directory and prints where they landed.

use simpal::cli::cmd_gen_data;
use simpal::config::RunConfig;
use simpal::data::{class_mean_angle, generate_domains};

fn main() {
    let config = RunConfig::desk_preset("generate-data", vec![0]);
    let synth = config.data.synthetic.as_ref().unwrap();

    println!("base class means on the unit circle:");
    for class in 0..synth.n_classes {
        let theta = class_mean_angle(class, synth.n_classes);
        println!(
            "  class {class}: angle {:6.1} deg, mean ({:+.3}, {:+.3})",
            theta.to_degrees(),
            theta.cos(),
            theta.sin()
        );
    }

    let domains = generate_domains(&synth.shift_config(0)).expect("valid preset");
    println!("\ngenerated domains (last one is the target):");
    for (d, ds) in domains.iter().enumerate() {
        println!(
            "  {}: {} samples, {} classes, rotation {:+.1} deg",
            ds.domain_id,
            ds.len(),
            ds.label_set.len(),
            synth.rotation_per_domain[d].to_degrees()
        );
    }

    let out = std::env::temp_dir().join("simpal_generate_data_example");
    cmd_gen_data(&config, &out).expect("write dataset files");
    println!("\nwrote CSVs and manifest to {}", out.display());
}
