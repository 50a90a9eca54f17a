use image::{GrayImage, Luma, Rgb, RgbImage};
use lkaguard::decoder::{AdapterSet, DecoderConfig, DecoderParams, LoraConfig};
use lkaguard::encoder::{EncoderConfig, FrozenEncoder, FusedRepresentation};
use lkaguard::media::MaskPair;
use lkaguard::text::Vocab;
use lkaguard::trainer::{
    compare_gradients, grad_check, loss, loss_and_grad, reproduces, sample_entries, smoothed, train, TrainConfig,
    TrainError, TrainExample,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TEXTS: [&str; 4] = [
    "Yes. The left lane line is faded ahead.",
    "Yes. A sharp curve ahead may pull the car out of the lane.",
    "No.",
    "speed=25.0 ; steer_deg=-1.5 ; torque=0.20 ; lka=1 ; offset_m=0.10",
];

fn vocab() -> Vocab {
    Vocab::build(TEXTS)
}

fn scene(seed: u64) -> (RgbImage, MaskPair) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = RgbImage::from_fn(64, 64, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]));
    let lane = rng.gen_range(10..50);
    let bin = GrayImage::from_fn(64, 64, |x, _| Luma([if x == lane { 255 } else { 0 }]));
    let ins = GrayImage::from_fn(64, 64, |x, _| Luma([u8::from(x == lane)]));
    (img, MaskPair::new(bin, ins).unwrap())
}

fn encoded(enc: &FrozenEncoder, v: &Vocab, seed: u64) -> FusedRepresentation {
    let (img, masks) = scene(seed);
    enc.encode(v, &img, &masks, TEXTS[3], true).unwrap()
}

fn setup() -> (Vocab, FrozenEncoder, DecoderParams) {
    let v = vocab();
    let enc = FrozenEncoder::init_frozen(EncoderConfig::new(v.len()), 1).unwrap();
    let dec = DecoderParams::init(DecoderConfig::new(v.len()), 2).unwrap();
    (v, enc, dec)
}

fn tiny() -> (Vocab, DecoderParams, Vec<TrainExample>) {
    let v = vocab();
    let cfg = DecoderConfig {
        d_model: 8,
        heads: 2,
        layers: 2,
        ffn_hidden: 12,
        max_seq_len: 24,
        vocab_size: v.len(),
    };
    let params = DecoderParams::init(cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = (0..3)
        .map(|i| {
            let n = 3 + i;
            let x = FusedRepresentation {
                tokens: Array2::from_shape_simple_fn((n, 8), || rng.gen_range(-1.0..1.0)),
                provenance: vec![lkaguard::encoder::Provenance::Image; n],
            };
            TrainExample::new(x, &v, TEXTS[i])
        })
        .collect();
    (v, params, batch)
}

fn random_adapters(params: &DecoderParams, seed: u64) -> AdapterSet {
    let mut set = AdapterSet::init(params, &LoraConfig::default(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for ad in &mut set.adapters {
        ad.a.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
        ad.b.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
    }
    set
}

#[test]
fn untrained_loss_is_near_log_vocab() {
    let (v, enc, dec) = setup();
    let batch: Vec<_> = (0..4)
        .map(|i| TrainExample::new(encoded(&enc, &v, i), &v, TEXTS[i as usize % 3]))
        .collect();
    let adapters = AdapterSet::init(&dec, &LoraConfig::default(), 5);
    let l = loss(&dec, &adapters, &batch).unwrap();
    let expected = (v.len() as f64).ln();
    assert!((l - expected).abs() <= 0.05, "loss {l} vs ln V {expected}");
}

#[test]
fn duplicated_batch_keeps_loss() {
    let (_, params, batch) = tiny();
    let adapters = random_adapters(&params, 1);
    let once = loss(&params, &adapters, &batch).unwrap();
    let doubled: Vec<_> = batch.iter().chain(batch.iter()).cloned().collect();
    let twice = loss(&params, &adapters, &doubled).unwrap();
    assert!((once - twice).abs() < 1e-12);
}

#[test]
fn pad_positions_are_masked() {
    let (_, params, mut batch) = tiny();
    let adapters = random_adapters(&params, 1);
    let plain = loss(&params, &adapters, &batch).unwrap();
    for ex in &mut batch {
        ex.target_ids.extend([0, 0, 0]);
    }
    let padded = loss(&params, &adapters, &batch).unwrap();
    assert!((plain - padded).abs() < 1e-12);
    let (unmasked, _) = loss_and_grad(&params, &adapters, &batch, false).unwrap();
    assert!((unmasked - plain).abs() > 1e-6);
}

#[test]
fn empty_batch_is_an_error() {
    let (_, params, _) = tiny();
    assert!(matches!(loss(&params, &AdapterSet::empty(), &[]), Err(TrainError::EmptyBatch)));
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let (_, params, batch) = tiny();
    let adapters = random_adapters(&params, 7);
    let err = grad_check(&params, &adapters, &batch, 1e-5).unwrap();
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn gradient_check_catches_a_corrupted_entry() {
    let (_, params, batch) = tiny();
    let adapters = random_adapters(&params, 7);
    let (_, mut grads) = loss_and_grad(&params, &adapters, &batch, true).unwrap();
    let entries = sample_entries(&adapters, 24, 99);
    let e = entries
        .iter()
        .copied()
        .max_by(|a, b| a.grad(&grads).abs().total_cmp(&b.grad(&grads).abs()))
        .unwrap();
    let g = &mut grads[e.adapter];
    let m = if e.in_b { &mut g.b } else { &mut g.a };
    m[[e.row, e.col]] *= 2.0;
    let err = compare_gradients(&params, &adapters, &batch, &grads, &entries, 1e-5).unwrap();
    assert!(err > 1e-2, "{err}");
}

#[test]
fn generic_batch_has_nonzero_gradient() {
    let (_, params, batch) = tiny();
    let adapters = AdapterSet::init(&params, &LoraConfig::default(), 3);
    let (_, grads) = loss_and_grad(&params, &adapters, &batch, true).unwrap();
    let norm: f64 = grads.iter().map(|g| g.b.iter().map(|v| v * v).sum::<f64>()).sum();
    assert!(norm > 0.0);
    // With B = 0 the gradient of every A is exactly zero.
    assert!(grads.iter().all(|g| g.a.iter().all(|&v| v == 0.0)));
}

#[test]
fn zero_steps_leave_adapters_at_init() {
    let (_, params, batch) = tiny();
    let cfg = TrainConfig {
        max_steps: 0,
        ..TrainConfig::default()
    };
    let out = train(&params, &batch, None, &cfg).unwrap();
    assert!(out.log.is_empty());
    assert!(out.losses.is_empty());
    assert!(out.adapters.adapters.iter().all(|a| a.b.iter().all(|&v| v == 0.0)));
}

#[test]
fn one_sample_overfits_and_is_reproduced() {
    let (v, enc, dec) = setup();
    let enc_sum = enc.params.checksum();
    let dec_sum = dec.checksum();
    let ex = TrainExample::new(encoded(&enc, &v, 11), &v, TEXTS[1]);
    let cfg = TrainConfig {
        max_steps: 500,
        batch_size: 1,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let out = train(&dec, std::slice::from_ref(&ex), None, &cfg).unwrap();
    let last = *out.losses.last().unwrap();
    assert!(last < 0.05, "final loss {last}");
    assert!(reproduces(&dec, &out.adapters, &ex, &v).unwrap());

    let smooth = smoothed(&out.losses[50..], 20);
    assert!(smooth.windows(2).all(|w| w[1] <= w[0] + 1e-9), "smoothed loss not decreasing");

    assert_eq!(enc.params.checksum(), enc_sum);
    assert_eq!(dec.checksum(), dec_sum);
}

#[test]
fn training_is_bitwise_deterministic() {
    let (_, params, batch) = tiny();
    let cfg = TrainConfig {
        max_steps: 30,
        batch_size: 2,
        learning_rate: 1e-2,
        seed: 42,
        ..TrainConfig::default()
    };
    let a = train(&params, &batch, None, &cfg).unwrap();
    let b = train(&params, &batch, None, &cfg).unwrap();
    assert_eq!(a.adapters, b.adapters);
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 1);
    let c = train(&params, &batch, None, &TrainConfig { seed: 43, ..cfg }).unwrap();
    assert_ne!(a.adapters, c.adapters);
}

#[test]
fn non_finite_loss_aborts() {
    let (_, params, mut batch) = tiny();
    batch[0].x.tokens[[0, 0]] = f64::NAN;
    let cfg = TrainConfig {
        max_steps: 5,
        batch_size: 3,
        ..TrainConfig::default()
    };
    assert!(matches!(train(&params, &batch, None, &cfg), Err(TrainError::DivergedLoss { step: 1 })));
}

#[test]
fn invalid_config_rejected() {
    let (_, params, batch) = tiny();
    for cfg in [
        TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(train(&params, &batch, None, &cfg), Err(TrainError::InvalidConfig(_))));
    }
    assert!(matches!(
        train(&params, &[], None, &TrainConfig::default()),
        Err(TrainError::EmptyTrainSet)
    ));
}

#[test]
fn validation_snapshots_are_logged() {
    let (v, params, batch) = tiny();
    let inputs: Vec<_> = batch.iter().map(|e| e.x.clone()).collect();
    let refs: Vec<_> = [("Yes", TEXTS[0]), ("Yes", TEXTS[1]), ("No", "")]
        .iter()
        .map(|(l, t)| lkaguard::metrics::Reference {
            label: if *l == "Yes" {
                lkaguard::dataset::Label::Yes
            } else {
                lkaguard::dataset::Label::No
            },
            explanation: t.trim_start_matches("Yes. ").to_string(),
        })
        .collect();
    let val = lkaguard::trainer::Validation {
        inputs: &inputs,
        references: &refs,
        vocab: &v,
    };
    let cfg = TrainConfig {
        max_steps: 10,
        eval_every: 4,
        max_gen_len: 16,
        ..TrainConfig::default()
    };
    let out = train(&params, &batch, Some(&val), &cfg).unwrap();
    let steps: Vec<_> = out.log.iter().map(|e| e.step).collect();
    assert_eq!(steps, [4, 8, 10]);
    for e in &out.log {
        assert!(e.mean_nll >= 0.0);
        let s = e.val.as_ref().unwrap();
        assert!((0.0..=100.0).contains(&s.accuracy));
    }
    let line = serde_json::to_string(&out.log[0]).unwrap();
    assert!(line.contains("\"rougeL\""));
}
