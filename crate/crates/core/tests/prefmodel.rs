use prefrank_core::dataset::{ItemId, Preprocessed};
use prefrank_core::emotion::Emotion;
use prefrank_core::face::IMAGE_SIZE;
use prefrank_core::prefmodel::{
    bce_loss, train, train_from, ImageBank, Label, PairData, Params, PreferenceModel, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_images(n: usize, seed: u64) -> Vec<Preprocessed> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Preprocessed {
            channels: 1,
            side: IMAGE_SIZE,
            data: (0..IMAGE_SIZE * IMAGE_SIZE).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect()
}

/// Images whose only difference is overall brightness, ordered dark to light.
fn brightness_images(n: usize) -> Vec<Preprocessed> {
    (0..n)
        .map(|i| Preprocessed {
            channels: 1,
            side: IMAGE_SIZE,
            data: (0..IMAGE_SIZE * IMAGE_SIZE)
                .map(|p| -0.8 + 1.6 * i as f64 / (n - 1) as f64 + 0.1 * ((p % 97) as f64 / 97.0))
                .collect(),
        })
        .collect()
}

fn bank(images: &[Preprocessed]) -> ImageBank {
    let refs: Vec<(ItemId, &Preprocessed)> = images.iter().enumerate().map(|(i, p)| (i as ItemId, p)).collect();
    ImageBank::new(&refs).unwrap()
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let images = random_images(8, 1);
    let bank = bank(&images);
    let labels = [
        Label { left: 0, right: 1, y: 1 },
        Label { left: 2, right: 3, y: 0 },
        Label { left: 4, right: 5, y: 1 },
        Label { left: 6, right: 7, y: 0 },
    ];
    let data = PairData::new(&bank, &labels).unwrap();
    let model = PreferenceModel::new(Emotion::Happiness, 5, 3.0, 42);
    let grads = model.gradients(&data).unwrap();
    assert!(grads.frozen.iter().all(|&g| g == 0.0));

    let frozen = model.frozen_features_of(&data);
    let h = 1e-5;
    // round-off floor of a central difference; below `floor` compare absolutely
    let loss = model.mean_bce_with_frozen(&data, &frozen).unwrap();
    let noise = f64::EPSILON * loss.abs().max(1.0) / h;
    let floor = noise / 1e-4;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for t in 0..6 {
        let n = model.params.tensors()[t].len();
        for k in 0..n {
            let base = model.params.tensors()[t].as_slice()[k];
            probe.params.tensors_mut()[t].as_mut_slice()[k] = base + h;
            let up = probe.mean_bce_with_frozen(&data, &frozen).unwrap();
            probe.params.tensors_mut()[t].as_mut_slice()[k] = base - h;
            let down = probe.mean_bce_with_frozen(&data, &frozen).unwrap();
            probe.params.tensors_mut()[t].as_mut_slice()[k] = base;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.params.tensors()[t].as_slice()[k];
            let diff = (analytic - numeric).abs();
            let scale = analytic.abs().max(numeric.abs());
            let ok = if scale >= floor { diff / scale < 1e-4 } else { diff <= 10.0 * noise };
            assert!(ok, "{}[{k}]: analytic {analytic:e} numeric {numeric:e}", Params::NAMES[t]);
            if scale >= floor {
                worst = worst.max(diff / scale);
            }
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn saturated_correct_predictions_have_zero_gradient() {
    let images = random_images(4, 2);
    let bank = bank(&images);
    let model = PreferenceModel::new(Emotion::Sadness, 4, 1e7, 3);
    let scores: Vec<f64> = images.iter().map(|i| model.target_score(i).unwrap()).collect();
    let labels: Vec<Label> = [(0, 1), (1, 2), (2, 3), (0, 3)]
        .iter()
        .map(|&(a, b)| Label { left: a, right: b, y: u8::from(scores[a as usize] > scores[b as usize]) })
        .collect();
    let data = PairData::new(&bank, &labels).unwrap();
    for l in &labels {
        let p = model.pair_probability(&images[l.left as usize], &images[l.right as usize]).unwrap();
        assert_eq!(p, l.y as f64);
    }
    let g = model.gradients(&data).unwrap();
    for t in g.params.tensors() {
        assert!(t.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn siamese_swap_is_complementary() {
    let images = random_images(6, 4);
    let model = PreferenceModel::new(Emotion::Fear, 8, 2.0, 5);
    for i in 0..5 {
        let (a, b) = (&images[i], &images[i + 1]);
        let p = model.pair_probability(a, b).unwrap();
        let q = model.pair_probability(b, a).unwrap();
        assert!((p + q - 1.0).abs() < 1e-15);
        assert!((bce_loss(1.0, p) - bce_loss(0.0, q)).abs() < 1e-12);
        assert_eq!(model.pair_probability(a, a).unwrap(), 0.5);
    }
}

#[test]
fn softmax_normalized_and_shift_invariant() {
    let images = random_images(5, 6);
    let model = PreferenceModel::new(Emotion::Disgust, 8, 1.0, 7);
    let mut shifted = model.clone();
    shifted.params.head_b.add_scalar_mut(3.5);
    let argmax = |m: &PreferenceModel| {
        let s: Vec<f64> = images.iter().map(|i| m.target_score(i).unwrap()).collect();
        (0..s.len()).fold(0, |b, i| if s[i] > s[b] { i } else { b })
    };
    for img in &images {
        let s = model.score(img).unwrap();
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
        let t = shifted.score(img).unwrap();
        for (x, y) in s.iter().zip(&t) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    assert_eq!(argmax(&model), argmax(&shifted));
}

#[test]
fn separable_pairs_are_learned() {
    let images = brightness_images(5);
    let bank = bank(&images);
    let mut labels = Vec::new();
    for a in 0..5u32 {
        for b in a + 1..5 {
            labels.push(Label { left: a, right: b, y: 1 });
        }
    }
    let data = PairData::new(&bank, &labels).unwrap();
    assert_eq!(data.len(), 10);
    let cfg = TrainConfig { epochs: 200, seed: 1, ..Default::default() };
    let out = train(Emotion::Anger, &data, None, &cfg).unwrap();
    assert_eq!(out.model.evaluate_accuracy(&data).unwrap(), 1.0);
}

#[test]
fn contradictory_labels_settle_at_one_half() {
    let images = random_images(2, 8);
    let bank = bank(&images);
    let labels = [Label { left: 0, right: 1, y: 1 }, Label { left: 0, right: 1, y: 0 }];
    let data = PairData::new(&bank, &labels).unwrap();
    let cfg = TrainConfig { epochs: 400, sigmoid_scale: 4.0, seed: 2, ..Default::default() };
    let out = train(Emotion::Surprise, &data, None, &cfg).unwrap();
    let p = out.model.pair_probability(&images[0], &images[1]).unwrap();
    assert!((p - 0.5).abs() < 1e-3, "p = {p}");
    let loss = out.model.mean_bce(&data).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-5);
}

#[test]
fn training_is_deterministic_and_keeps_frozen_weights() {
    let images = random_images(6, 9);
    let bank = bank(&images);
    let labels: Vec<Label> = (0..5).map(|i| Label { left: i, right: i + 1, y: (i % 2) as u8 }).collect();
    let data = PairData::new(&bank, &labels).unwrap();
    let cfg = TrainConfig { epochs: 5, batch_size: 2, seed: 11, hidden: 8, ..Default::default() };
    let a = train(Emotion::Happiness, &data, None, &cfg).unwrap();
    let b = train(Emotion::Happiness, &data, None, &cfg).unwrap();
    assert_eq!(a, b);
    let init = PreferenceModel::from_config(Emotion::Happiness, &cfg);
    assert_eq!(a.model.frozen_checksum(), init.frozen_checksum());
    assert_ne!(a.model.params, init.params);
}

#[test]
fn small_step_full_batch_loss_does_not_increase() {
    let images = random_images(6, 10);
    let bank = bank(&images);
    let labels: Vec<Label> = (0..5).map(|i| Label { left: i, right: i + 1, y: ((i * 7) % 3 == 0) as u8 }).collect();
    let data = PairData::new(&bank, &labels).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 64,
        momentum: 0.0,
        learning_rate: 1e-3,
        weight_decay: 0.0,
        hidden: 8,
        ..Default::default()
    };
    let out = train(Emotion::Anger, &data, None, &cfg).unwrap();
    let first = PreferenceModel::from_config(Emotion::Anger, &cfg).mean_bce(&data).unwrap();
    let mut prev = first;
    for e in &out.epochs {
        assert!(e.train_loss <= prev + 1e-15, "epoch {}: {} > {}", e.epoch, e.train_loss, prev);
        prev = e.train_loss;
    }
    assert!(prev < first);
}

#[test]
fn accuracy_on_self_flipped_and_random_labels() {
    let images = random_images(40, 12);
    let bank = bank(&images);
    let model = PreferenceModel::new(Emotion::Sadness, 8, 1.0, 13);
    let scores: Vec<f64> = images.iter().map(|i| model.target_score(i).unwrap()).collect();
    let mut own = Vec::new();
    for a in 0..40u32 {
        for b in a + 1..40 {
            own.push(Label { left: a, right: b, y: u8::from(scores[a as usize] > scores[b as usize]) });
        }
    }
    let data = PairData::new(&bank, &own).unwrap();
    assert_eq!(model.evaluate_accuracy(&data).unwrap(), 1.0);
    let flipped: Vec<Label> = own.iter().map(|l| Label { y: 1 - l.y, ..*l }).collect();
    assert_eq!(model.evaluate_accuracy(&PairData::new(&bank, &flipped).unwrap()).unwrap(), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut random = Vec::new();
    while random.len() < 1000 {
        let (a, b) = (rng.random_range(0..40u32), rng.random_range(0..40u32));
        if a != b {
            random.push(Label { left: a, right: b, y: (random.len() % 2) as u8 });
        }
    }
    let acc = model.evaluate_accuracy(&PairData::new(&bank, &random).unwrap()).unwrap();
    assert!((acc - 0.5).abs() <= 0.1, "accuracy {acc}");
}

#[test]
fn validation_selects_best_epoch() {
    let images = brightness_images(8);
    let bank = bank(&images);
    let train_labels: Vec<Label> = (0..5).map(|i| Label { left: i, right: i + 1, y: 1 }).collect();
    let val_labels = [Label { left: 6, right: 7, y: 1 }, Label { left: 5, right: 7, y: 1 }];
    let tr = PairData::new(&bank, &train_labels).unwrap();
    let va = PairData::new(&bank, &val_labels).unwrap();
    let cfg = TrainConfig { epochs: 40, patience: 5, hidden: 8, seed: 4, ..Default::default() };
    let out = train_from(PreferenceModel::from_config(Emotion::Fear, &cfg), &tr, Some(&va), &cfg).unwrap();
    let best = out.epochs.iter().map(|e| e.validation_loss.unwrap()).fold(f64::INFINITY, f64::min);
    assert_eq!(out.model.mean_bce(&va).unwrap(), best);
    assert_eq!(out.epochs[out.best_epoch].validation_loss, Some(best));
}

#[test]
fn empty_data_is_rejected() {
    let images = random_images(2, 15);
    let data = PairData::new(&bank(&images), &[]).unwrap();
    assert!(train(Emotion::Anger, &data, None, &TrainConfig::default()).is_err());
}
