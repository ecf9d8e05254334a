use voxelforge::gabor::GaborConfig;
use voxelforge::io::synthetic::{generate_synthetic, SyntheticRoi, SyntheticSpec, SyntheticStimuli};
use voxelforge::report::{evaluate_bundle, EvaluationOptions};
use voxelforge::trainer::{train_full_model, train_roi_layer, DatasetSplit, ModelConfig};
use voxelforge::{ModelKind, TrainConfig};

fn roi(name: &str) -> SyntheticRoi {
    SyntheticRoi {
        name: name.into(),
        ..Default::default()
    }
}

fn quick_eval() -> EvaluationOptions {
    EvaluationOptions {
        shuffles: 1000,
        ..Default::default()
    }
}

#[test]
fn noiseless_linear_responses_are_learned() {
    let spec = SyntheticSpec {
        layer_dims: vec![32],
        rois: vec![SyntheticRoi { linear: 20, ..roi("L") }],
        noise_sigma: 0.0,
        seed: 1,
        ..Default::default()
    };
    let ds = generate_synthetic(&spec).unwrap().dataset;
    let split = DatasetSplit::holdout(1750, 120, 0).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        ..Default::default()
    };
    let t = train_roi_layer(&ds.layers[&1].estimation, &ds.rois[0].estimation, &split, &cfg).unwrap();
    let mean = t.validation_c.iter().sum::<f64>() / t.validation_c.len() as f64;
    assert!(mean >= 0.95, "{mean}");
    assert!(t.log.len() <= cfg.max_epochs);
}

#[test]
fn pure_noise_voxels_are_down_weighted() {
    let spec = SyntheticSpec {
        layer_dims: vec![32],
        rois: vec![SyntheticRoi { noise: 30, ..roi("N") }],
        seed: 2,
        ..Default::default()
    };
    let ds = generate_synthetic(&spec).unwrap().dataset;
    let split = DatasetSplit::holdout(1750, 120, 0).unwrap();
    let t = train_roi_layer(
        &ds.layers[&1].estimation,
        &ds.rois[0].estimation,
        &split,
        &TrainConfig::default(),
    )
    .unwrap();
    let mu = t.model.final_mu.mean();
    assert!(mu < 0.2, "{mu}");
}

#[test]
fn head_training_picks_the_planted_layer() {
    let spec = SyntheticSpec {
        layer_dims: vec![24, 24, 24, 24],
        rois: vec![SyntheticRoi {
            nonlinear: 15,
            linear: 15,
            source_layer: Some(3),
            ..roi("V4")
        }],
        seed: 3,
        ..Default::default()
    };
    let ds = generate_synthetic(&spec).unwrap().dataset;
    let cfg = ModelConfig {
        train: TrainConfig {
            learning_rate: 1e-2,
            ..Default::default()
        },
        ..Default::default()
    };
    let bundle = train_full_model(&ds, ModelKind::DnnTl, &cfg, 4).unwrap();
    let roi = &bundle.rois[0];
    assert_eq!(roi.layers.len(), 4);
    let hits = roi.selected_layer.iter().filter(|l| **l == 3).count();
    assert!(hits * 10 >= 8 * 30, "{hits}/30");
}

#[test]
fn linear_model_picks_the_planted_layer() {
    let spec = SyntheticSpec {
        layer_dims: vec![40, 40, 40],
        rois: vec![SyntheticRoi {
            linear: 30,
            source_layer: Some(2),
            ..roi("V2")
        }],
        seed: 5,
        ..Default::default()
    };
    let ds = generate_synthetic(&spec).unwrap().dataset;
    let bundle = train_full_model(&ds, ModelKind::DnnLinear, &ModelConfig::default(), 6).unwrap();
    let hits = bundle.rois[0].selected_layer.iter().filter(|l| **l == 2).count();
    assert!(hits * 10 >= 9 * 30, "{hits}/30");
}

fn gabor_stimuli() -> SyntheticStimuli {
    SyntheticStimuli {
        gabor: GaborConfig {
            image_size: 32,
            frequencies: vec![1.0, 2.0, 4.0, 8.0],
            ..Default::default()
        },
    }
}

#[test]
fn gwp_recovers_gabor_generated_voxels() {
    let spec = SyntheticSpec {
        layer_dims: vec![],
        rois: vec![SyntheticRoi { gabor: 20, ..roi("V1") }],
        noise_sigma: 0.1,
        stimuli: Some(gabor_stimuli()),
        seed: 7,
        ..Default::default()
    };
    let ds = generate_synthetic(&spec).unwrap().dataset;
    let cfg = ModelConfig {
        gabor: gabor_stimuli().gabor,
        ..Default::default()
    };
    let bundle = train_full_model(&ds, ModelKind::Gwp, &cfg, 8).unwrap();
    let report = evaluate_bundle(&bundle, &ds, &quick_eval()).unwrap();
    let mean = report.rois[0].mean_accuracy.unwrap();
    assert!(mean >= 0.8, "{mean}");
}

#[test]
fn head_beats_gabor_model_on_nonlinear_voxels() {
    let spec = SyntheticSpec {
        layer_dims: vec![32, 32],
        rois: vec![SyntheticRoi { nonlinear: 30, ..roi("LO") }],
        stimuli: Some(gabor_stimuli()),
        seed: 9,
        ..Default::default()
    };
    let ds = generate_synthetic(&spec).unwrap().dataset;
    let cfg = ModelConfig {
        gabor: gabor_stimuli().gabor,
        train: TrainConfig {
            learning_rate: 1e-2,
            ..Default::default()
        },
        ..Default::default()
    };
    let tl = evaluate_bundle(&train_full_model(&ds, ModelKind::DnnTl, &cfg, 1).unwrap(), &ds, &quick_eval()).unwrap();
    let gwp = evaluate_bundle(&train_full_model(&ds, ModelKind::Gwp, &cfg, 1).unwrap(), &ds, &quick_eval()).unwrap();
    let (a, b) = (tl.rois[0].curve.significant_fraction, gwp.rois[0].curve.significant_fraction);
    assert!(a > b, "dnn_tl {a} vs gwp {b}");
}

#[test]
fn training_is_reproducible_end_to_end() {
    let spec = SyntheticSpec {
        estimation_samples: 300,
        test_samples: 60,
        layer_dims: vec![16, 16],
        rois: vec![SyntheticRoi {
            linear: 5,
            nonlinear: 5,
            ..roi("A")
        }],
        seed: 10,
        ..Default::default()
    };
    let ds = generate_synthetic(&spec).unwrap().dataset;
    let cfg = ModelConfig {
        validation_samples: 60,
        train: TrainConfig {
            max_epochs: 20,
            ..Default::default()
        },
        ..Default::default()
    };
    let a = train_full_model(&ds, ModelKind::DnnTl, &cfg, 3).unwrap();
    let b = train_full_model(&ds, ModelKind::DnnTl, &cfg, 3).unwrap();
    assert_eq!(a, b);
    let c = train_full_model(&ds, ModelKind::DnnTl, &cfg, 4).unwrap();
    assert_ne!(a.split, c.split);
}
