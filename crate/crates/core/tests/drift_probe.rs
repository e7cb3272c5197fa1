use seedprop_core::detector::{run_experiment, FailureSwitches, TrainConfig};
use seedprop_core::stabilizers::PropDecaySchedule;
use seedprop_core::synthgen::Dataset;
use seedprop_core::synthgen::{generate_scene, scene_seed, SceneSpec};

fn drift_dataset() -> Dataset {
    let spec = SceneSpec {
        targets_min: 3,
        targets_max: 3,
        bin_mix: [0.4, 0.6, 0.0, 0.0],
        aniso_max: 1.5,
        ..Default::default()
    };
    let scenes: Vec<_> =
        (0..64).map(|i| generate_scene(&spec, scene_seed(71, i)).unwrap()).collect();
    Dataset {
        scenes,
        train_indices: (0..52).collect(),
        val_indices: (52..64).collect(),
        manifest_hash: "probe".into(),
    }
}

#[test]
#[ignore]
fn failure_probe() {
    let ds = drift_dataset();
    let epochs = 40;
    let base = TrainConfig {
        epochs,
        lr: 0.01,
        schedule: PropDecaySchedule {
            lambda0: 1.0,
            decay_start: epochs / 2,
            total_epochs: epochs,
            floor: 0.1,
        },
        ..Default::default()
    };

    let detach = TrainConfig {
        failures: FailureSwitches { full_detach: true, ..Default::default() },
        ..base.clone()
    };
    let stats = run_experiment(&detach, &ds, None).unwrap();
    println!("=== full_detach");
    for e in &stats.epochs {
        println!(
            "  ep {:>2}: prop {:.4} support {:.2} px ratio {:.2} miou {:.3} drift {:.5}",
            e.epoch,
            e.loss.prop,
            e.affinity_support_px,
            e.affinity_area_ratio,
            e.eval.miou,
            e.loss.grad_drift_norm
        );
    }

    let free = TrainConfig {
        failures: FailureSwitches { free_radius: true, ..Default::default() },
        ..base.clone()
    };
    let stats = run_experiment(&free, &ds, None).unwrap();
    println!("=== free_radius");
    let late_from = epochs * 3 / 4;
    let late: Vec<_> = stats.gate_log.iter().filter(|d| d.epoch >= late_from).collect();
    let max_r = *free.gate.radii.last().unwrap();
    let at_max = late.iter().filter(|d| d.r_star == max_r).count();
    println!(
        "late decisions {}  at max radius {:.1}%",
        late.len(),
        100.0 * at_max as f64 / late.len() as f64
    );
    let mut counts = std::collections::BTreeMap::new();
    for d in &late {
        *counts.entry(d.r_star).or_insert(0usize) += 1;
    }
    println!("late radius histogram: {counts:?}");
    for e in stats.epochs.iter().filter(|e| e.epoch % 4 == 0 || e.epoch >= 36) {
        println!(
            "  ep {:>2}: prop {:.4} miou {:.3} ar {:?}",
            e.epoch, e.loss.prop, e.eval.miou, e.eval.area_ratio
        );
    }
}
