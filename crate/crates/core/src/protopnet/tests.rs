use rand::Rng;

use super::*;
use crate::autodiff::Tape;
use crate::dataset::LabeledImage;
use crate::geometry::PixelBox;
use crate::rng::stream;

const LN_INV_EPS: f64 = 9.210340371976184;

fn tiny_config(classes: usize, per_class: usize, size: usize) -> ModelConfig {
    ModelConfig {
        image_height: size,
        image_width: size,
        backbone: BackboneConfig {
            conv_channels: vec![4, 4, 4],
            latent_channels: 3,
            ..BackboneConfig::reference()
        },
        prototypes_per_class: per_class,
        ..ModelConfig::reference(classes)
    }
}

fn random_image(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = stream(seed, 0x99, 0);
    Tensor::from_fn(&cfg.image_shape(), |_| rng.gen_range(0.0..1.0))
}

fn labeled(id: usize, label: usize, image: Tensor) -> LabeledImage {
    LabeledImage {
        id,
        label,
        image,
        part: PixelBox::full(1, 1),
        clean: None,
    }
}

#[test]
fn reference_latent_is_8x8x32() {
    let cfg = ModelConfig::reference(10);
    assert_eq!(cfg.latent_dims(), (8, 8, 32));
    assert_eq!(cfg.prototypes(), 100);
    let model = Model::new(cfg.clone(), 1).unwrap();
    let z = embed(&model, &random_image(&cfg, 3)).unwrap();
    assert_eq!(z.values.shape(), &[32, 8, 8]);
    assert!(z.values.data().iter().all(|v| *v > 0.0 && *v < 1.0));
}

#[test]
fn embed_is_deterministic_and_input_sensitive() {
    let cfg = tiny_config(2, 2, 32);
    let model = Model::new(cfg.clone(), 4).unwrap();
    let x = random_image(&cfg, 1);
    assert_eq!(embed(&model, &x).unwrap(), embed(&model, &x).unwrap());
    let zeros = embed(&model, &Tensor::zeros(&cfg.image_shape())).unwrap();
    let ones = embed(&model, &Tensor::full(&cfg.image_shape(), 1.0)).unwrap();
    assert_ne!(zeros, ones);
}

#[test]
fn embed_rejects_wrong_shape() {
    let model = Model::new(tiny_config(2, 1, 16), 0).unwrap();
    assert!(embed(&model, &Tensor::zeros(&[3, 16, 15])).is_err());
    assert!(embed(&model, &Tensor::zeros(&[1, 16, 16])).is_err());
}

#[test]
fn config_validation() {
    let mut cfg = ModelConfig::reference(10);
    cfg.epsilon_stab = 1.0;
    assert!(cfg.validate().is_err());
    let mut cfg = ModelConfig::reference(10);
    cfg.image_height = 4;
    assert!(cfg.validate().is_err());
    assert!(ModelConfig::reference(0).validate().is_err());
}

#[test]
fn similarity_reference_values() {
    assert!((similarity(0.0, 1e-4).unwrap() - LN_INV_EPS).abs() < 1e-9);
    assert!((similarity(1.0, 1e-4).unwrap() - (2.0f64 / 1.0001).ln()).abs() < 1e-12);
    assert!((similarity(1.0, 1e-4).unwrap() - 0.69305).abs() < 1e-5);
    assert!(similarity(1e9, 1e-4).unwrap() < 1e-8);
    assert!(similarity(-1e-3, 1e-4).is_err());
    assert!(similarity(0.5, 0.0).is_err());
}

#[test]
fn similarity_strictly_decreasing_on_log_grid() {
    let grid: Vec<f64> = (0..100).map(|i| 10f64.powf(-4.0 + 8.0 * i as f64 / 99.0)).collect();
    let s: Vec<f64> = grid.iter().map(|&d| similarity(d, 1e-4).unwrap()).collect();
    assert!(s.windows(2).all(|w| w[0] > w[1]));
}

fn hand_latent() -> LatentVolume {
    // [D=2, H=2, W=2]
    LatentVolume {
        values: Tensor::new(vec![2, 2, 2], vec![0.1, 0.4, 0.7, 0.2, 0.9, 0.3, 0.5, 0.6]).unwrap(),
    }
}

#[test]
fn similarity_map_matches_cellwise_eq1() {
    let z = hand_latent();
    let proto = [0.3, 0.8];
    for mode in [DistanceMode::Squared, DistanceMode::Euclidean] {
        let cfg = ModelConfig {
            distance_mode: mode,
            ..ModelConfig::reference(1)
        };
        let bank = PrototypeBank {
            vectors: Tensor::new(vec![1, 2], proto.to_vec()).unwrap(),
            class_of: vec![0],
            provenance: vec![None],
        };
        let map = similarity_map(&z, &bank, &cfg).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let px = z.pixel(r, c);
                let sq = (px[0] - proto[0]).powi(2) + (px[1] - proto[1]).powi(2);
                let d = if mode == DistanceMode::Squared { sq } else { sq.sqrt() };
                let want = ((d + 1.0) / (d + 1e-4)).ln();
                assert!((map.at(0, r, c) - want).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn prototype_on_a_pixel_attains_the_maximum() {
    let z = hand_latent();
    let bank = PrototypeBank {
        vectors: Tensor::new(vec![2, 2], [z.pixel(1, 0), vec![0.0, 0.0]].concat()).unwrap(),
        class_of: vec![0, 0],
        provenance: vec![None; 2],
    };
    let map = similarity_map(&z, &bank, &ModelConfig::reference(1)).unwrap();
    assert!((map.at(0, 1, 0) - LN_INV_EPS).abs() < 1e-12);
    let pooled = pool_scores(&map);
    assert_eq!(pooled.locations[0], (1, 0));
    assert!(map.values.data().iter().all(|v| *v > 0.0 && *v <= LN_INV_EPS));
}

#[test]
fn constant_latent_gives_constant_maps() {
    let z = LatentVolume {
        values: Tensor::full(&[3, 4, 5], 0.25),
    };
    let bank = PrototypeBank {
        vectors: Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.9, 0.8, 0.7]).unwrap(),
        class_of: vec![0, 1],
        provenance: vec![None; 2],
    };
    let map = similarity_map(&z, &bank, &ModelConfig::reference(2)).unwrap();
    for l in 0..2 {
        assert!(map.slice(l).iter().all(|v| *v == map.slice(l)[0]));
    }
    assert_eq!(pool_scores(&map).locations, vec![(0, 0), (0, 0)]);
}

#[test]
fn similarity_map_rejects_depth_mismatch() {
    let bank = PrototypeBank {
        vectors: Tensor::zeros(&[1, 3]),
        class_of: vec![0],
        provenance: vec![None],
    };
    assert!(similarity_map(&hand_latent(), &bank, &ModelConfig::reference(1)).is_err());
}

#[test]
fn pool_scores_match_bruteforce() {
    let mut rng = stream(11, 0x99, 1);
    let map = SimilarityMap {
        values: Tensor::from_fn(&[6, 3, 4], |_| rng.gen_range(0.0..9.0)),
    };
    let pooled = pool_scores(&map);
    for l in 0..6 {
        let mut best = (f64::NEG_INFINITY, (0, 0));
        for r in 0..3 {
            for c in 0..4 {
                if map.at(l, r, c) > best.0 {
                    best = (map.at(l, r, c), (r, c));
                }
            }
        }
        assert_eq!(pooled.scores[l], best.0);
        assert_eq!(pooled.locations[l], best.1);
    }
}

#[test]
fn classify_examples() {
    let class_of = vec![0, 0, 1, 1];
    let identity = LastLayer {
        weights: Tensor::from_fn(&[2, 4], |i| if class_of[i % 4] == i / 4 { 1.0 } else { 0.0 }),
    };
    let c = classify(&[0.1, 0.2, 5.0, 0.3], &identity).unwrap();
    assert_eq!(c.class, 1);
    let c = classify(&[0.0; 4], &identity).unwrap();
    assert_eq!(c.logits, vec![0.0, 0.0]);
    assert_eq!(c.class, 0);
    assert!(classify(&[0.0; 3], &identity).is_err());
}

#[test]
fn last_layer_init_is_class_connection() {
    let model = Model::new(ModelConfig::reference(3), 0).unwrap();
    let w = model.last_layer().weights;
    assert_eq!(w.shape(), &[3, 30]);
    for c in 0..3 {
        for l in 0..30 {
            let want = if l / 10 == c { 1.0 } else { -0.5 };
            assert_eq!(w.data()[c * 30 + l], want);
        }
    }
    let mask = LastLayer::off_class_mask(&model.prototype_class, 3);
    assert_eq!(mask.iter().filter(|m| **m).count(), 60);
}

#[test]
fn modular_and_tape_forward_agree() {
    let cfg = tiny_config(3, 2, 32);
    let model = Model::new(cfg.clone(), 9).unwrap();
    for seed in 0..4 {
        let x = random_image(&cfg, seed);
        let inf = predict(&model, &x).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let fp = forward_on_tape(&mut tape, &model, xv, &model.frozen()).unwrap();
        assert_eq!(tape.value(fp.logits).data(), &inf.classification.logits[..]);
        assert_eq!(tape.value(fp.scores).data(), &inf.pooled.scores[..]);
        assert_eq!(tape.value(fp.similarity), &inf.map.values);
    }
}

fn push_fixture(mode: DistanceMode) -> (Model, Vec<LabeledImage>) {
    let cfg = ModelConfig {
        distance_mode: mode,
        ..tiny_config(2, 2, 16)
    };
    assert_eq!(cfg.latent_dims(), (2, 2, 3));
    let model = Model::new(cfg.clone(), 21).unwrap();
    let images = (0..4)
        .map(|i| labeled(100 + i, i % 2, random_image(&cfg, 50 + i as u64)))
        .collect();
    (model, images)
}

#[test]
fn push_equals_exhaustive_nearest_neighbour() {
    for mode in [DistanceMode::Squared, DistanceMode::Euclidean] {
        let (model, images) = push_fixture(mode);
        let bank = push_prototypes(&model, &images).unwrap();
        let before = model.bank();
        for l in 0..before.len() {
            let p = before.vector(l);
            let mut best = (f64::INFINITY, Vec::new(), 0);
            for img in images.iter().filter(|i| i.label == before.class_of[l]) {
                let z = embed(&model, &img.image).unwrap();
                for r in 0..2 {
                    for c in 0..2 {
                        let v = z.pixel(r, c);
                        let d: f64 = v.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
                        if d < best.0 {
                            best = (d, v, img.id);
                        }
                    }
                }
            }
            assert_eq!(bank.vector(l), &best.1[..]);
            assert_eq!(bank.provenance[l].unwrap().image_id, best.2);
        }
    }
}

#[test]
fn pushed_prototypes_score_maximally_on_their_source() {
    let (mut model, images) = push_fixture(DistanceMode::Squared);
    let bank = push_prototypes(&model, &images).unwrap();
    model.set_bank(bank.clone()).unwrap();
    for l in 0..bank.len() {
        let p = bank.provenance[l].unwrap();
        let img = images.iter().find(|i| i.id == p.image_id).unwrap();
        assert_eq!(img.label, bank.class_of[l]);
        let inf = predict(&model, &img.image).unwrap();
        assert!((inf.map.at(l, p.row, p.col) - LN_INV_EPS).abs() < 1e-9);
    }
    // pushing again is a fixed point
    let again = push_prototypes(&model, &images).unwrap();
    assert_eq!(again.vectors, bank.vectors);
}

#[test]
fn push_rejects_empty_class() {
    let (model, images) = push_fixture(DistanceMode::Squared);
    let only_zero: Vec<_> = images.into_iter().filter(|i| i.label == 0).collect();
    assert!(matches!(push_prototypes(&model, &only_zero), Err(Error::EmptyClass(1))));
}

#[test]
fn upsample_constant_map_covers_everything() {
    let h = upsample_activation(&[0.7; 4], 2, 2, 8, 8).unwrap();
    assert!(h.values.iter().all(|v| (*v - 0.7).abs() < 1e-15));
    assert_eq!(h.bbox, PixelBox::full(8, 8));
}

#[test]
fn upsample_corner_aligned_bilinear() {
    let h = upsample_activation(&[0.0, 0.0, 0.0, 1.0], 2, 2, 4, 4).unwrap();
    let at = |r: usize, c: usize| h.values[r * 4 + c];
    assert_eq!(at(0, 0), 0.0);
    assert_eq!(at(0, 3), 0.0);
    assert_eq!(at(3, 0), 0.0);
    assert_eq!(at(3, 3), 1.0);
    assert!((at(1, 2) - 2.0 / 9.0).abs() < 1e-15);
    assert!((at(2, 2) - 4.0 / 9.0).abs() < 1e-15);
    assert_eq!(
        h.bbox,
        PixelBox {
            top: 3,
            left: 3,
            bottom: 3,
            right: 3
        }
    );
}

#[test]
fn upsample_spike_box_stays_in_its_support() {
    let mut map = vec![0.0; 64];
    map[3 * 8 + 5] = 1.0;
    let h = upsample_activation(&map, 8, 8, 64, 64).unwrap();
    // nonzero bilinear support of cell (3,5) spans the neighbouring cell centres
    let scale: f64 = 63.0 / 7.0;
    let support = PixelBox {
        top: (2.0 * scale).floor() as usize + 1,
        left: (4.0 * scale).floor() as usize + 1,
        bottom: (4.0 * scale).ceil() as usize - 1,
        right: (6.0 * scale).ceil() as usize - 1,
    };
    assert!(support.contains_box(&h.bbox), "{:?} vs {:?}", h.bbox, support);
    assert!(h.bbox.contains(27, 45));
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let (mut model, images) = push_fixture(DistanceMode::Euclidean);
    let bank = push_prototypes(&model, &images).unwrap();
    model.set_bank(bank).unwrap();
    model.corrupted_classes = vec![1];
    let mut bytes = Vec::new();
    write_checkpoint(&model, &mut bytes).unwrap();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    let back = read_checkpoint(&bytes[..]).unwrap();
    assert_eq!(back, model);
    let mut again = Vec::new();
    write_checkpoint(&back, &mut again).unwrap();
    assert_eq!(again, bytes);
}

#[test]
fn checkpoint_rejects_corruption() {
    let model = Model::new(tiny_config(2, 1, 16), 0).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&model, &mut bytes).unwrap();
    assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(read_checkpoint(&bad[..]).is_err());
    let mut bad = bytes;
    bad[4] = 9;
    assert!(read_checkpoint(&bad[..]).is_err());
}

#[test]
fn missing_checkpoint_is_named() {
    let err = load_checkpoint(std::path::Path::new("/nonexistent/model.plab")).unwrap_err();
    assert!(err.to_string().contains("model.plab"));
}
