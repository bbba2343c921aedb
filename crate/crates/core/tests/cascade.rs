use surfelflow::autodiff::Tensor;
use surfelflow::flow::*;
use surfelflow::geometry::{points_to_tensor, Aabb};
use surfelflow::nets::DenoiserConfig;
use surfelflow::synthetic::shape_dataset;

fn samples(per_class: usize, points: usize, seed: u64) -> Vec<TrainSample> {
    shape_dataset(per_class, points, 4, seed)
        .iter()
        .map(|s| TrainSample {
            anchors: points_to_tensor(&s.points),
            features: Some(Tensor::new(&[points, 4], s.features.concat()).unwrap()),
            label: s.class.label(),
        })
        .collect()
}

fn train_stage2(injection: bool, data: &[TrainSample]) -> FlowModel {
    let den = DenoiserConfig {
        width: 32,
        layers: 2,
        heads: 4,
        cond_width: 32,
        anchor_injection: injection,
        ..DenoiserConfig::default()
    };
    let model = FlowModel::new(ModelConfig::stage2(16, 4, 4, den, Aabb::unit(), 5)).unwrap();
    let cfg = TrainConfig {
        steps: 400,
        batch: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, cfg);
    trainer.run(data, None, |_| {}).unwrap();
    trainer.model
}

#[test]
fn anchor_injection_lowers_stage2_validation_loss() {
    let train = samples(16, 16, 1);
    let held = samples(4, 16, 77);
    let times = [0.1, 0.3, 0.5, 0.7, 0.9];
    let with = validation_loss(&train_stage2(true, &train), &held, &times, 3).unwrap();
    let without = validation_loss(&train_stage2(false, &train), &held, &times, 3).unwrap();
    println!("validation fm loss: injection {with:.4}, ablated {without:.4}");
    assert!(with < 0.9 * without, "injection {with} vs ablated {without}");
}

#[test]
fn stage2_training_rejects_featureless_data() {
    let mut data = samples(1, 16, 2);
    for s in &mut data {
        s.features = None;
    }
    let model = FlowModel::new(ModelConfig::stage2(
        16,
        4,
        4,
        DenoiserConfig::default(),
        Aabb::unit(),
        1,
    ))
    .unwrap();
    let mut trainer = Trainer::new(
        model,
        TrainConfig {
            steps: 1,
            batch: 1,
            ..TrainConfig::default()
        },
    );
    assert!(matches!(trainer.run(&data, None, |_| {}), Err(FlowError::Data(_))));
}
