// scratch tuning probe; not part of the deliverable
use asymmoe::branch_bias::{adapter_gradient_contributions, branch_contributions};
use asymmoe::data::{generate, SplitKind, SyntheticTaskConfig};
use asymmoe::train::{build_model, train, TrainConfig};
use asymmoe::Tensor;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let alpha: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.0015);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1);
    let tau: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.07);
    let lambda_bias: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let lambda_bal: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let ood_shift: f64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(1.5);
    let noise: f64 = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(0.6);

    let data_cfg = SyntheticTaskConfig {
        seed: 7,
        ood_shift,
        noise_scale: noise,
        ..Default::default()
    };
    let dataset = generate(&data_cfg).unwrap();
    let config = TrainConfig {
        alpha,
        lr,
        epochs,
        seed,
        tau,
        lambda_bias,
        lambda_bal,
        ..Default::default()
    };
    let mut model = build_model(&config, &dataset.config).unwrap();
    let t0 = std::time::Instant::now();
    let outcome = train(&mut model, &dataset, &config).unwrap();
    let dt = t0.elapsed();

    let base_prompts: Vec<Tensor> = dataset
        .base_classes
        .iter()
        .map(|&c| dataset.prompts[c].clone())
        .collect();
    let ood_local: Vec<(Tensor, usize)> = dataset
        .labelled(SplitKind::OodTest)
        .into_iter()
        .map(|(t, label)| {
            let local = dataset.base_classes.iter().position(|&c| c == label).unwrap();
            (t, local)
        })
        .collect();
    let (c_v, c_t) = branch_contributions(&model, &ood_local, &base_prompts).unwrap();
    let (c_v_eff, c_t_eff) = adapter_gradient_contributions(&model, &ood_local, &base_prompts).unwrap();

    let s = &outcome.summary;
    println!(
        "SUMMARY base {:.2} novel {:.2} hm {:.2} ood {:.2} loss {:.4} gatedev {:.4} oodDelta {:.4} cv {:.5} ct {:.5} cveff {:.5} cteff {:.5} steps {} elapsed {:.2?}",
        s.base_accuracy,
        s.novel_accuracy,
        s.harmonic_mean,
        s.ood_accuracy,
        s.final_total_loss,
        s.final_max_gate_deviation,
        s.ood_mean_delta_norm,
        c_v,
        c_t,
        c_v_eff,
        c_t_eff,
        s.steps,
        dt
    );
}
