//! Scratch calibration run for the synthetic sequence: prints per-method
//! metrics so experiment thresholds can be sanity-checked quickly.

use std::time::Instant;

use dasa_core::data::synth::{synth_generate, SynthConfig};
use dasa_core::eval::Metric;
use dasa_core::pipeline::{run_sequence, Method};
use dasa_core::train::{AugmentConfig, TrainConfig};

fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn env_u32(name: &str, default: u32) -> u32 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let synth = SynthConfig {
        seed: env_u32("PILOT_DATA_SEED", 7) as u64,
        noise: env_f64("PILOT_NOISE", 0.04) as f32,
        occlusion_prob: env_f64("PILOT_OCC", 0.25) as f32,
        ..SynthConfig::default()
    };
    let datasets = synth_generate(&synth).unwrap();
    for d in &datasets {
        println!(
            "dataset {}: {} train ({} ids), {} query, {} gallery",
            d.name,
            d.train.len(),
            d.n_train_ids,
            d.query.len(),
            d.gallery.len()
        );
    }

    let epochs = env_u32("PILOT_EPOCHS", 30);
    let cfg = TrainConfig {
        arch: "tiny".into(),
        batch_size: 16,
        instances_per_id: 2,
        epochs,
        base_lr: env_f64("PILOT_LR", 3.5e-4),
        warmup_start_lr: env_f64("PILOT_LR", 3.5e-4) / 10.0,
        warmup_epochs: 5,
        decay_epoch_first: env_u32("PILOT_DECAY", epochs * 2 / 3),
        decay_epoch_rest: env_u32("PILOT_DECAY", epochs * 2 / 3),
        input_height: synth.height,
        input_width: synth.width,
        augment: AugmentConfig {
            pad: 4,
            ..AugmentConfig::default()
        },
        seed: env_u32("PILOT_SEED", 13) as u64,
        exemplar_ids_per_step: 250,
        exemplar_images_per_id: 2,
        ..TrainConfig::default()
    };

    for method in [Method::Dasa, Method::Kd, Method::FineTune] {
        let t0 = Instant::now();
        let outcome = run_sequence(method, &datasets, &cfg, Metric::Cosine, None).unwrap();
        println!(
            "\n=== {} ({:.1}s) ===",
            method.as_str(),
            t0.elapsed().as_secs_f64()
        );
        for step in &outcome.steps {
            let accs: Vec<String> = step
                .evals
                .iter()
                .map(|e| format!("{}: mAP {:.3} R1 {:.3}", e.dataset, e.map, e.rank1))
                .collect();
            let last_epoch = step.epochs.last().unwrap();
            println!(
                "step {} ({}): train acc {:.3} loss {:.3} | {} | s_mAP {:.3} s_R1 {:.3}",
                step.step,
                step.trained_dataset,
                last_epoch.accuracy,
                last_epoch.loss,
                accs.join(" ; "),
                step.s_map,
                step.s_r1
            );
        }
    }
}
