use scnn_core::toytrain::{train, NetConfig, SceneConfig, StepMetrics, TrainConfig};

fn mean_loss(h: &[StepMetrics]) -> f64 {
    h.iter().map(|m| m.loss).sum::<f64>() / h.len() as f64
}

/// First and last ten steps, averaged to smooth out per-scene noise.
fn first_last(h: &[StepMetrics]) -> (f64, f64) {
    (mean_loss(&h[..10]), mean_loss(&h[h.len() - 10..]))
}

#[test]
fn baseline_loss_decreases() {
    let cfg = TrainConfig {
        net: NetConfig {
            hidden: 8,
            ..NetConfig::default()
        },
        scene: SceneConfig {
            height: 64,
            width: 128,
            ..SceneConfig::default()
        },
        steps: 2000,
        batch: 1,
        seed: 11,
        ..TrainConfig::default()
    };
    let run = train(&cfg, None).unwrap();
    assert_eq!(run.history.len(), 2000);
    let (first, last) = first_last(&run.history);
    assert!(last < first, "loss went from {first} to {last}");
    assert!(run.history.iter().all(|m| m.loss.is_finite()));
}

/// Full-size default configuration; takes tens of minutes on one core.
#[test]
#[ignore]
fn default_config_halves_loss() {
    let run = train(&TrainConfig::default(), None).unwrap();
    let (first, last) = first_last(&run.history);
    println!("default config loss {first:.4} -> {last:.4}");
    assert!(last < 0.5 * first, "loss went from {first} to {last}");
}
