use seedprop_core::detector::{run_experiment, Axes, TrainConfig};
use seedprop_core::stabilizers::PropDecaySchedule;
use seedprop_core::synthgen::{generate_scene, scene_seed, SceneSpec};
use seedprop_core::synthgen::Dataset;

#[test]
#[ignore]
fn timing_probe() {
    let spec = SceneSpec { targets_min: 3, targets_max: 3, ..Default::default() };
    let scenes: Vec<_> =
        (0..64).map(|i| generate_scene(&spec, scene_seed(1, i)).unwrap()).collect();
    let ds = Dataset {
        scenes,
        train_indices: (0..52).collect(),
        val_indices: (52..64).collect(),
        manifest_hash: "probe".into(),
    };
    let cfg = TrainConfig {
        epochs: 3,
        axes: Axes { decay: true, ltd: true, hbc: true, asg: true },
        schedule: PropDecaySchedule { lambda0: 1.0, decay_start: 1, total_epochs: 3, floor: 0.1 },
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let stats = run_experiment(&cfg, &ds, None).unwrap();
    let dt = t0.elapsed();
    println!(
        "3 epochs in {:.2}s ({:.2}s/epoch), {} steps, final miou {:.4}",
        dt.as_secs_f64(),
        dt.as_secs_f64() / 3.0,
        stats.steps.len(),
        stats.epochs.last().unwrap().eval.miou
    );
}
