//! End-to-end acceptance checks, one test per shipped guarantee. Each test
//! prints a PASS line so a `--nocapture` run reads as a checklist.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use geoloc::cli::{
    cmd_eval, cmd_partition, cmd_sample, cmd_train, FeatureSource, PartitionParams, Resolved,
    RunConfig, TrainParams,
};
use geoloc::datatools::{gini, lorenz, sample_locations, write_image_records, CountryRecord, ImageRecord};
use geoloc::geocell::{
    build_stack, read_partition, GeoPoint, PartitionStack, MAX_DEPTH,
};
use geoloc::geodecoder::{EncoderConfig, GeoDecoder, ModelConfig, ModelInput};
use geoloc::inference::{compose_over_parents, haversine_km, predict, EARTH_RADIUS_KM};
use geoloc::numerics::{backward, cross_entropy, max_rel_err, scaled_dot_attention, Sgd, SgdConfig, Tensor};

// ---------------------------------------------------------------------------
// 1. Gradient suite

/// Deterministic smooth input data for a given shape.
fn op_input(shape: &[usize], salt: usize) -> Vec<f64> {
    let n: usize = shape.iter().product();
    (0..n)
        .map(|k| ((salt * 37 + k * 11) as f64 * 0.7).sin() * 1.2 + 0.05)
        .collect()
}

/// Gradient-checks `build` over tracked leaves of the given shapes and
/// returns the worst relative error across every input coordinate.
fn gradcheck_op(shapes: &[&[usize]], build: &dyn Fn(&[Tensor]) -> Tensor) -> f64 {
    let datas: Vec<Vec<f64>> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| op_input(s, i + 1))
        .collect();
    let make_loss = |datas: &[Vec<f64>]| -> (Vec<Tensor>, Tensor) {
        let leaves: Vec<Tensor> = shapes
            .iter()
            .zip(datas)
            .map(|(s, d)| Tensor::from_vec(s.to_vec(), d.clone()).unwrap().tracked())
            .collect();
        let y = build(&leaves);
        let loss = if y.data().len() == 1 {
            y
        } else {
            // Weighted sum keeps coordinates distinguishable in the scalar.
            let w: Vec<f64> = (0..y.data().len()).map(|k| 0.25 + 0.05 * k as f64).collect();
            let w = Tensor::from_vec(y.shape().to_vec(), w).unwrap();
            y.mul(&w).unwrap().sum_all()
        };
        (leaves, loss)
    };
    let (leaves, loss) = make_loss(&datas);
    let grads = backward(&loss).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .wrt(leaf)
            .unwrap_or_else(|| panic!("input {i} missing from gradients"))
            .to_vec();
        for k in 0..datas[i].len() {
            let mut probe = datas.clone();
            probe[i][k] += h;
            let up = make_loss(&probe).1.item().unwrap();
            probe[i][k] -= 2.0 * h;
            let down = make_loss(&probe).1.item().unwrap();
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(max_rel_err(&[analytic[k]], &[numeric]));
        }
    }
    worst
}

fn micro_model_config(hierarchies: usize, scenes: usize) -> ModelConfig {
    ModelConfig {
        hierarchies,
        scenes,
        dim: 8,
        heads: 2,
        independent_layers: 1,
        dependent_layers: 1,
        ffn_hidden: 16,
        classes_per_hierarchy: (0..hierarchies).map(|h| 3 + h).collect(),
        encoder: EncoderConfig::Precomputed { input_dim: 4 },
        values_from_keys: false,
        zero_init_heads: false,
    }
}

/// Worst relative error over every parameter coordinate of the model's full
/// loss (three tokens, fixed labels) against central differences.
fn gradcheck_model(hierarchies: usize, scenes: usize, seed: u64) -> f64 {
    let mut model = GeoDecoder::new(micro_model_config(hierarchies, scenes), seed).unwrap();
    let tokens =
        Tensor::from_vec(vec![3, 4], op_input(&[3, 4], 9)).unwrap();
    let labels: Vec<Option<usize>> = (0..hierarchies).map(|h| Some((h + 1) % 3)).collect();
    let scene = if scenes == 0 { None } else { Some(scenes - 1) };
    let loss_of = |m: &GeoDecoder| {
        let out = m.forward(&ModelInput::Tokens(tokens.clone())).unwrap();
        m.loss(&out, &labels, scene).unwrap().item().unwrap()
    };
    let out = model.forward(&ModelInput::Tokens(tokens.clone())).unwrap();
    let loss = model.loss(&out, &labels, scene).unwrap();
    let grads = backward(&loss).unwrap();
    let names: Vec<String> = model
        .parameters()
        .iter()
        .map(|p| p.name().to_string())
        .collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for name in names {
        let (analytic, n) = {
            for p in model.parameters_mut() {
                if p.name() == name {
                    p.zero_grad();
                    p.accumulate(&grads);
                }
            }
            let p = model
                .parameters()
                .into_iter()
                .find(|p| p.name() == name)
                .unwrap();
            (p.grad().to_vec(), p.numel())
        };
        for k in 0..n {
            let orig = model
                .parameters()
                .into_iter()
                .find(|p| p.name() == name)
                .unwrap()
                .value()
                .data()[k];
            let set = |m: &mut GeoDecoder, v: f64| {
                for p in m.parameters_mut() {
                    if p.name() == name {
                        let mut d = p.value().data().to_vec();
                        d[k] = v;
                        p.set_data(d).unwrap();
                    }
                }
            };
            set(&mut model, orig + h);
            let up = loss_of(&model);
            set(&mut model, orig - h);
            let down = loss_of(&model);
            set(&mut model, orig);
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(max_rel_err(&[analytic[k]], &[numeric]));
        }
    }
    worst
}

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut check = |name: &str, shapes: &[&[usize]], build: &dyn Fn(&[Tensor]) -> Tensor| {
        let err = gradcheck_op(shapes, build);
        assert!(err < 1e-4, "{name}: relative error {err}");
        worst = worst.max(err);
    };
    check("add", &[&[3, 4], &[3, 4]], &|t| t[0].add(&t[1]).unwrap());
    check("sub", &[&[3, 4], &[3, 4]], &|t| t[0].sub(&t[1]).unwrap());
    check("mul", &[&[3, 4], &[3, 4]], &|t| t[0].mul(&t[1]).unwrap());
    check("scale", &[&[3, 4]], &|t| t[0].scale(1.7));
    check("add_row", &[&[3, 4], &[4]], &|t| t[0].add_row(&t[1]).unwrap());
    check("matmul", &[&[3, 4], &[4, 2]], &|t| t[0].matmul(&t[1]).unwrap());
    check("transpose", &[&[3, 4]], &|t| t[0].transpose().unwrap());
    check("softmax_rows", &[&[3, 4]], &|t| t[0].softmax(1).unwrap());
    check("softmax_cols", &[&[3, 4]], &|t| t[0].softmax(0).unwrap());
    check("layer_norm", &[&[3, 4], &[4], &[4]], &|t| {
        t[0].layer_norm(&t[1], &t[2], 1e-5).unwrap()
    });
    check("gelu", &[&[3, 4]], &|t| t[0].gelu());
    check("slice_rows", &[&[5, 4]], &|t| t[0].slice_rows(1, 3).unwrap());
    check("slice_cols", &[&[3, 6]], &|t| t[0].slice_cols(2, 3).unwrap());
    check("reshape", &[&[3, 4]], &|t| t[0].reshape(vec![2, 6]).unwrap());
    check("mean_rows", &[&[4, 3]], &|t| t[0].mean_rows().unwrap());
    check("sum_all", &[&[3, 4]], &|t| t[0].sum_all());
    check("concat_rows", &[&[2, 3], &[3, 3]], &|t| {
        geoloc::numerics::concat_rows(&[t[0].clone(), t[1].clone()]).unwrap()
    });
    check("concat_cols", &[&[2, 3], &[2, 2]], &|t| {
        geoloc::numerics::concat_cols(&[t[0].clone(), t[1].clone()]).unwrap()
    });
    check("cross_entropy", &[&[3, 5]], &|t| {
        cross_entropy(&t[0], &[0, 2, 4]).unwrap()
    });
    check("attention", &[&[2, 4], &[3, 4], &[3, 4]], &|t| {
        scaled_dot_attention(&t[0], &t[1], &t[2]).unwrap().0
    });

    for (h, s) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
        let err = gradcheck_model(h, s, 31 + (h * 2 + s) as u64);
        assert!(err < 1e-4, "model H={h} S={s}: relative error {err}");
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "gradient suite took {elapsed:?}");
    println!(
        "PASS gradient suite: all ops and 4 decoder micro-configs within 1e-4 \
         (worst {worst:.2e}, {elapsed:?})"
    );
}

// ---------------------------------------------------------------------------
// 2. Partition suite

fn random_points(rng: &mut ChaCha8Rng) -> Vec<GeoPoint> {
    let mut points = Vec::new();
    // A few tight clusters plus uniform background noise.
    let clusters = rng.random_range(1..5);
    for _ in 0..clusters {
        let lat: f64 = rng.random_range(-80.0..80.0);
        let lon: f64 = rng.random_range(-180.0..180.0);
        let count = rng.random_range(5..120);
        for _ in 0..count {
            points.push(
                GeoPoint::new(
                    (lat + rng.random_range(-0.5..0.5)).clamp(-90.0, 90.0),
                    ((lon + rng.random_range(-0.5..0.5) + 540.0).rem_euclid(360.0)) - 180.0,
                )
                .unwrap(),
            );
        }
    }
    for _ in 0..rng.random_range(0..80) {
        let z: f64 = rng.random_range(-1.0..1.0);
        let lon = rng.random_range(-180.0..180.0);
        points.push(GeoPoint::new(z.asin().to_degrees(), lon).unwrap());
    }
    points
}

fn check_stack_invariants(
    stack: &PartitionStack,
    n_points: usize,
    t_max: &[usize],
    t_min: usize,
) {
    assert_eq!(stack.len(), t_max.len());
    for (k, h) in stack.hierarchies().iter().enumerate() {
        let mut total = 0usize;
        for c in 0..h.num_classes() {
            let count = h.count(c);
            assert!(count >= t_min, "class below t_min");
            // Splitting stops only at t_max or the depth limit.
            assert!(
                count <= t_max[k] || h.cell(c).depth == MAX_DEPTH,
                "oversized cell not at max depth"
            );
            total += count;
        }
        assert!(total <= n_points);
        // Disjointness: no retained cell contains another.
        let cells = h.cells();
        for a in 0..cells.len() {
            for b in 0..cells.len() {
                if a != b {
                    assert!(
                        !cells[a].is_ancestor_or_equal_of(&cells[b]),
                        "cells {a} and {b} overlap"
                    );
                }
            }
        }
    }
    // Nesting: every finer class sits inside its mapped parent.
    for k in 1..stack.len() {
        let map = &stack.parent_maps()[k - 1];
        assert_eq!(map.len(), stack.hierarchy(k).num_classes());
        for (child, &parent) in map.iter().enumerate() {
            assert!(
                stack
                    .hierarchy(k - 1)
                    .cell(parent)
                    .is_ancestor_or_equal_of(&stack.hierarchy(k).cell(child)),
                "hierarchy {k} class {child} escapes its parent"
            );
        }
    }
}

#[test]
fn criterion_2_partition_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..110 {
        let mut points = random_points(&mut rng);
        let t_min = rng.random_range(1..8);
        let hi = rng.random_range(40..200);
        let t_max = match trial % 3 {
            0 => vec![hi],
            1 => vec![hi, hi / 2],
            _ => vec![hi, hi / 2, (hi / 4).max(2)],
        };
        let stack = build_stack(&points, &t_max, t_min).unwrap();
        check_stack_invariants(&stack, points.len(), &t_max, t_min);

        // Same set in a different order builds the identical partition.
        points.shuffle(&mut rng);
        let again = build_stack(&points, &t_max, t_min).unwrap();
        for (a, b) in stack.hierarchies().iter().zip(again.hierarchies()) {
            assert_eq!(a.cells(), b.cells());
            for c in 0..a.num_classes() {
                assert_eq!(a.count(c), b.count(c));
                let (ca, cb) = (a.class_centroid(c).unwrap(), b.class_centroid(c).unwrap());
                assert_eq!(ca.lat().to_bits(), cb.lat().to_bits());
                assert_eq!(ca.lon().to_bits(), cb.lon().to_bits());
            }
        }
        assert_eq!(stack.parent_maps(), again.parent_maps());
    }

    // Hand-simulated builds.
    // (a) 40 points cannot reach t_min = 50: zero classes.
    let sparse: Vec<GeoPoint> = (0..40)
        .map(|i| GeoPoint::new(10.0 + 0.01 * i as f64, 20.0).unwrap())
        .collect();
    let stack = build_stack(&sparse, &[1000], 50).unwrap();
    assert_eq!(stack.hierarchy(0).num_classes(), 0);

    // (b) 60 + 60 points on two cube faces: exactly the two face cells.
    let mut two: Vec<GeoPoint> = Vec::new();
    for i in 0..60 {
        two.push(GeoPoint::new(10.0 + 0.001 * i as f64, 20.0).unwrap());
        two.push(GeoPoint::new(-5.0 - 0.001 * i as f64, 150.0).unwrap());
    }
    let stack = build_stack(&two, &[100], 50).unwrap();
    let h = stack.hierarchy(0);
    assert_eq!(h.num_classes(), 2);
    for c in 0..2 {
        assert_eq!(h.cell(c).depth, 0);
        assert_eq!(h.count(c), 60);
    }

    // (c) 120 coincident points can never be separated: recursion stops at
    // the depth cap and keeps one full cell.
    let stacked: Vec<GeoPoint> = (0..120)
        .map(|_| GeoPoint::new(0.5, 0.5).unwrap())
        .collect();
    let stack = build_stack(&stacked, &[100], 50).unwrap();
    let h = stack.hierarchy(0);
    assert_eq!(h.num_classes(), 1);
    assert_eq!(h.cell(0).depth, MAX_DEPTH);
    assert_eq!(h.count(0), 120);

    println!("PASS partition suite: 110 fuzzed builds hold all invariants; 3 hand builds exact");
}

// ---------------------------------------------------------------------------
// 3. Composition oracle

#[test]
fn criterion_3_composition_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(333);
    for _ in 0..10_000 {
        let levels = rng.random_range(1..=5);
        let mut counts = Vec::with_capacity(levels);
        let mut c = rng.random_range(1..=20);
        for _ in 0..levels {
            counts.push(c);
            c = (c + rng.random_range(0..=30)).min(100);
        }
        let maps: Vec<Vec<usize>> = (1..levels)
            .map(|l| {
                (0..counts[l])
                    .map(|_| rng.random_range(0..counts[l - 1]))
                    .collect()
            })
            .collect();
        let scores: Vec<Vec<f64>> = counts
            .iter()
            .map(|&n| (0..n).map(|_| rng.random_range(0.01..1.0)).collect())
            .collect();

        let composed = compose_over_parents(&scores, &maps).unwrap();
        assert_eq!(composed.len(), counts[levels - 1]);

        // Independent enumeration: walk each fine class's ancestor chain and
        // multiply root-first.
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for fine in 0..counts[levels - 1] {
            let mut chain = vec![fine];
            for l in (1..levels).rev() {
                chain.push(maps[l - 1][*chain.last().unwrap()]);
            }
            chain.reverse();
            let mut product = 1.0;
            for (l, &class) in chain.iter().enumerate() {
                product *= scores[l][class];
            }
            let rel = (product - composed[fine]).abs()
                / product.abs().max(composed[fine].abs()).max(1e-300);
            assert!(rel < 1e-12, "composed {} vs chain {}", composed[fine], product);
            if product > best_score {
                best_score = product;
                best = fine;
            }
        }
        let argmax = composed
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        assert_eq!(argmax, best, "argmax mismatch");
    }
    println!("PASS composition oracle: 10000 random stacks, zero argmax mismatches");
}

// ---------------------------------------------------------------------------
// 4. Dependent-layer isolation

#[test]
fn criterion_4_dependent_layer_isolation() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for trial in 0..1000u64 {
        let hierarchies = rng.random_range(2..=4);
        let scenes = [0usize, 1, 2][rng.random_range(0..3)];
        let config = ModelConfig {
            hierarchies,
            scenes,
            dim: 8,
            heads: if trial % 2 == 0 { 1 } else { 2 },
            independent_layers: 0,
            dependent_layers: rng.random_range(1..=2),
            ffn_hidden: 8,
            classes_per_hierarchy: vec![3; hierarchies],
            encoder: EncoderConfig::Precomputed { input_dim: 3 },
            values_from_keys: false,
            zero_init_heads: false,
        };
        let scene_rows = scenes.max(1);
        let base = GeoDecoder::new(config.clone(), trial).unwrap();
        let mut poked = GeoDecoder::new(config, trial).unwrap();
        let target = (trial as usize) % hierarchies;

        // Shift every foreign hierarchy's query block.
        for p in poked.parameters_mut() {
            if p.name() == "queries" {
                let mut data = p.value().data().to_vec();
                for (idx, v) in data.iter_mut().enumerate() {
                    let row = idx / 8;
                    if row / scene_rows != target {
                        *v += 0.25 + (idx % 5) as f64 * 0.1;
                    }
                }
                p.set_data(data).unwrap();
            }
        }

        let tokens = Tensor::randn(vec![2, 3], 1.0, &mut rng);
        let out_a = base.forward(&ModelInput::Tokens(tokens.clone())).unwrap();
        let out_b = poked.forward(&ModelInput::Tokens(tokens)).unwrap();
        let a = out_a.geo_logits[target].data();
        let b = out_b.geo_logits[target].data();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "target hierarchy moved");
        }
        // Sanity: the perturbation really changed the foreign hierarchies.
        let foreign = (target + 1) % hierarchies;
        assert_ne!(
            out_a.geo_logits[foreign].data(),
            out_b.geo_logits[foreign].data()
        );
    }
    println!("PASS dependent-layer isolation: 1000 fuzzed instances, difference exactly 0.0");
}

// ---------------------------------------------------------------------------
// 5. Overfit check

/// 64 images in 4 tight clusters on distinct cube faces, 2 scenes.
fn overfit_metadata() -> Vec<ImageRecord> {
    let centers = [(0.0, 0.0), (0.0, 90.0), (0.0, 180.0), (60.0, 0.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(555);
    let mut records = Vec::new();
    for (c, &(lat, lon)) in centers.iter().enumerate() {
        for i in 0..16 {
            let lat: f64 = lat + rng.random_range(-2.0..2.0);
            let lon: f64 = lon + rng.random_range(-2.0..2.0);
            let p = GeoPoint::new(lat, ((lon + 540.0).rem_euclid(360.0)) - 180.0).unwrap();
            records.push(ImageRecord {
                id: format!("c{c}i{i}"),
                lat: p.lat(),
                lon: p.lon(),
                photographer: format!("ph{c}"),
                scene_id: c % 2,
            });
        }
    }
    records
}

fn overfit_config(dir: &Path) -> RunConfig {
    let mut config = RunConfig::default();
    config.seed = 7;
    config.paths.metadata = Some(dir.join("meta.jsonl"));
    config.paths.partition = Some(dir.join("cells.partition"));
    config.paths.out_dir = Some(dir.join("run"));
    config.partition = PartitionParams {
        t_min: 5,
        t_max: vec![1000, 100],
    };
    config.model = Some(ModelConfig {
        hierarchies: 2,
        scenes: 2,
        dim: 16,
        heads: 2,
        independent_layers: 1,
        dependent_layers: 1,
        ffn_hidden: 32,
        classes_per_hierarchy: vec![4, 4],
        encoder: EncoderConfig::Patch {
            image_size: 32,
            patch_size: 16,
            depth: 1,
        },
        values_from_keys: false,
        zero_init_heads: false,
    });
    config.optimizer = SgdConfig {
        lr: 0.02,
        momentum: 0.9,
        weight_decay: 1e-4,
        milestones: vec![300, 400],
        gamma: 0.5,
    };
    // Full batches: one step per epoch, 500 steps total.
    config.train = TrainParams {
        epochs: 500,
        batch_size: 64,
        shuffle: true,
    };
    config.features = Some(FeatureSource::SyntheticImages { size: 32, seed: 0 });
    config
}

#[test]
fn criterion_5_overfit_64_images() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let records = overfit_metadata();
    write_image_records(&dir.path().join("meta.jsonl"), &records).unwrap();
    let resolved = Resolved::new(overfit_config(dir.path())).unwrap();
    cmd_partition(
        &resolved,
        &dir.path().join("meta.jsonl"),
        &dir.path().join("cells.partition"),
        5,
        &[1000, 100],
    )
    .unwrap();
    let stack = read_partition(&dir.path().join("cells.partition")).unwrap();
    assert_eq!(stack.class_counts(), vec![4, 4], "fixture must give 4 classes");

    let summary = cmd_train(&resolved, false, None, None).unwrap();
    assert!(summary.steps <= 500, "used {} steps", summary.steps);

    cmd_eval(
        &resolved,
        &summary.latest_checkpoint,
        &dir.path().join("meta.jsonl"),
        &dir.path().join("cells.partition"),
        &dir.path().join("run/eval"),
        false,
    )
    .unwrap();
    let preds = std::fs::read_to_string(dir.path().join("run/eval/predictions.jsonl")).unwrap();
    let mut correct = 0usize;
    let mut total = 0usize;
    for (line, rec) in preds.lines().skip(1).zip(&records) {
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(row["id"], rec.id.as_str());
        let truth = stack
            .assign_labels(&rec.point().unwrap())
            .last()
            .unwrap()
            .expect("fixture points all have labels");
        if row["fine_class"].as_u64().unwrap() as usize == truth {
            correct += 1;
        }
        total += 1;
    }
    assert_eq!(total, 64);
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 300,
        "overfit run took {elapsed:?}, budget 5 min"
    );
    assert_eq!(
        correct, 64,
        "finest-hierarchy train accuracy {correct}/64 after {} steps",
        summary.steps
    );
    println!(
        "PASS overfit: 64/64 finest-hierarchy train accuracy in {} steps ({elapsed:?})",
        summary.steps
    );
}

// ---------------------------------------------------------------------------
// 6. Geodesy

#[test]
fn criterion_6_geodesy() {
    let a = GeoPoint::new(0.0, 0.0).unwrap();
    let b = GeoPoint::new(0.0, 90.0).unwrap();
    let quarter = haversine_km(&a, &b);
    assert!(
        (quarter - 10007.543).abs() <= 0.001,
        "quarter circumference {quarter}"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let bound = std::f64::consts::PI * EARTH_RADIUS_KM;
    for _ in 0..100_000 {
        // asin(sqrt) keeps latitudes area-uniform on the sphere.
        let p = GeoPoint::new(
            rng.random_range(-1.0..1.0_f64).asin().to_degrees(),
            rng.random_range(-180.0..180.0),
        )
        .unwrap();
        let q = GeoPoint::new(
            rng.random_range(-1.0..1.0_f64).asin().to_degrees(),
            rng.random_range(-180.0..180.0),
        )
        .unwrap();
        let d1 = haversine_km(&p, &q);
        let d2 = haversine_km(&q, &p);
        assert_eq!(d1.to_bits(), d2.to_bits(), "asymmetric distance");
        assert!(d1 >= 0.0 && d1 <= bound + 1e-9, "distance {d1} out of range");
    }
    println!("PASS geodesy: quarter circumference within 1 m; 100000 pairs symmetric and bounded");
}

// ---------------------------------------------------------------------------
// 7. Inequality metrics

#[test]
fn criterion_7_inequality_metrics() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    // Exactness.
    for _ in 0..50 {
        let c = rng.random_range(0.1..100.0);
        let n = rng.random_range(1..40);
        let equal = vec![c; n];
        assert_eq!(gini(&equal).unwrap(), 0.0, "gini of equal counts");
    }
    assert_eq!(gini(&[1.0, 3.0]).unwrap(), 0.25);

    for _ in 0..300 {
        let n = rng.random_range(1..80);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..50.0)).collect();
        if xs.iter().all(|&x| x == 0.0) {
            continue;
        }
        let g = gini(&xs).unwrap();
        assert!((0.0..1.0).contains(&g));
        // Scale invariance.
        let k = rng.random_range(0.01..100.0);
        let scaled: Vec<f64> = xs.iter().map(|x| x * k).collect();
        assert!((gini(&scaled).unwrap() - g).abs() < 1e-12);

        // Lorenz: endpoints, monotone, convex.
        let curve = lorenz(&xs).unwrap();
        assert_eq!(curve[0], (0.0, 0.0));
        let (lx, ly) = *curve.last().unwrap();
        assert!((lx - 1.0).abs() < 1e-12 && (ly - 1.0).abs() < 1e-12);
        let mut prev_slope = f64::NEG_INFINITY;
        let mut area = 0.0;
        for w in curve.windows(2) {
            let dy = w[1].1 - w[0].1;
            let dx = w[1].0 - w[0].0;
            assert!(dy >= -1e-12, "Lorenz decreased");
            let slope = dy / dx;
            assert!(slope >= prev_slope - 1e-9, "Lorenz not convex");
            prev_slope = slope;
            area += dx * (w[0].1 + w[1].1) / 2.0;
        }
        // Trapezoidal-area consistency with the coefficient.
        assert!(
            ((1.0 - 2.0 * area) - g).abs() <= 2.0 / n as f64,
            "area {} vs gini {}",
            1.0 - 2.0 * area,
            g
        );
    }
    println!("PASS inequality metrics: exact values, scale invariance, Lorenz shape, area consistency");
}

// ---------------------------------------------------------------------------
// 8. Sampler

#[test]
fn criterion_8_sampler() {
    let countries = vec![
        CountryRecord {
            name: "Small".to_string(),
            surface_area_km2: 100.0,
            cities: vec![("S1".to_string(), GeoPoint::new(5.0, 5.0).unwrap())],
        },
        CountryRecord {
            name: "Large".to_string(),
            surface_area_km2: 300.0,
            cities: vec![
                ("L1".to_string(), GeoPoint::new(48.0, 2.0).unwrap()),
                ("L2".to_string(), GeoPoint::new(-33.0, 151.0).unwrap()),
            ],
        },
    ];
    let n = 100_000;
    let entries = sample_locations(&countries, n, 8).unwrap();
    let small = entries.iter().filter(|e| e.country == "Small").count() as f64;
    let large = n as f64 - small;
    let (e_small, e_large) = (0.25 * n as f64, 0.75 * n as f64);
    let chi2 = (small - e_small).powi(2) / e_small + (large - e_large).powi(2) / e_large;
    // df = 1, alpha = 0.001.
    assert!(chi2 < 10.828, "chi-square {chi2}");

    let centers: std::collections::HashMap<&str, GeoPoint> = countries
        .iter()
        .flat_map(|c| c.cities.iter().map(|(name, p)| (name.as_str(), *p)))
        .collect();
    for e in &entries {
        let d = haversine_km(&e.point, &centers[e.city.as_str()]);
        assert!(d <= 5.0, "sample {d} km from its city center");
    }

    // Byte-identical manifests through the full command path.
    let dir = tempfile::tempdir().unwrap();
    let csv = "country,area_km2,city,lat,lng\n\
               Small,100,S1,5.0,5.0\n\
               Large,300,L1,48.0,2.0\n\
               Large,300,L2,-33.0,151.0\n";
    std::fs::write(dir.path().join("cities.csv"), csv).unwrap();
    let resolved = Resolved::new(RunConfig::default()).unwrap();
    cmd_sample(
        &resolved,
        &dir.path().join("cities.csv"),
        2000,
        &dir.path().join("a.jsonl"),
    )
    .unwrap();
    cmd_sample(
        &resolved,
        &dir.path().join("cities.csv"),
        2000,
        &dir.path().join("b.jsonl"),
    )
    .unwrap();
    let a = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("b.jsonl")).unwrap();
    assert_eq!(a, b, "same seed must give byte-identical manifests");
    assert!(!a.is_empty());

    let mut other = RunConfig::default();
    other.seed = 43;
    let other = Resolved::new(other).unwrap();
    cmd_sample(
        &other,
        &dir.path().join("cities.csv"),
        2000,
        &dir.path().join("c.jsonl"),
    )
    .unwrap();
    let c = std::fs::read(dir.path().join("c.jsonl")).unwrap();
    assert_ne!(a, c, "different seed must change the manifest");

    println!("PASS sampler: chi-square {chi2:.3} < 10.828; all within 5 km; manifests byte-identical");
}

// ---------------------------------------------------------------------------
// 9. Ablation configurability

#[test]
fn criterion_9_ablation_matrix() {
    let start = Instant::now();
    // Four 16-point clusters on distinct faces: every t_max below keeps the
    // face cells whole, so each hierarchy level has exactly 4 classes.
    let records = overfit_metadata();
    let points: Vec<GeoPoint> = records.iter().map(|r| r.point().unwrap()).collect();

    let run = |hierarchies: usize, scenes: usize, n_ind: usize, n_dep: usize| {
        let t_max: Vec<usize> = (0..hierarchies).map(|k| 1000 - 50 * k).collect();
        let stack = build_stack(&points, &t_max, 5).unwrap();
        assert_eq!(stack.class_counts(), vec![4; hierarchies]);

        let config = ModelConfig {
            hierarchies,
            scenes,
            dim: 16,
            heads: 2,
            independent_layers: n_ind,
            dependent_layers: n_dep,
            ffn_hidden: 32,
            classes_per_hierarchy: vec![4; hierarchies],
            encoder: EncoderConfig::Precomputed { input_dim: 8 },
            values_from_keys: false,
            zero_init_heads: false,
        };
        let mut model = GeoDecoder::new(config, 9).unwrap();
        let mut opt = Sgd::new(SgdConfig::default());

        // Two samples from different clusters, one training step, then
        // inference through composition.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let inputs: Vec<ModelInput> = (0..2)
            .map(|_| ModelInput::Tokens(Tensor::randn(vec![6, 8], 1.0, &mut rng)))
            .collect();
        let sample_records = [&records[0], &records[20]];
        let mut total: Option<Tensor> = None;
        let outs = model.forward_batch(&inputs).unwrap();
        for (k, out) in outs.iter().enumerate() {
            let labels = stack.assign_labels(&sample_records[k].point().unwrap());
            let scene = if scenes == 0 {
                None
            } else {
                Some(sample_records[k].scene_id % scenes)
            };
            let loss = model.loss(out, &labels, scene).unwrap();
            total = Some(match total {
                Some(t) => t.add(&loss).unwrap(),
                None => loss,
            });
        }
        let loss = total.unwrap().scale(0.5);
        let value = loss.item().unwrap();
        assert!(value.is_finite(), "H={hierarchies} S={scenes}: loss {value}");
        let grads = backward(&loss).unwrap();
        let mut params = model.parameters_mut();
        for p in params.iter_mut() {
            p.accumulate(&grads);
        }
        opt.step(&mut params).unwrap();

        let pred = predict(&model, &inputs[0], &stack, false).unwrap();
        assert!(pred.fine_class < 4);
        assert_eq!(pred.composed_scores.len(), 4);
        if scenes == 0 {
            assert!(pred.scene.is_none());
        } else {
            assert!(pred.scene.unwrap() < scenes);
        }
    };

    for h in [1, 3, 5, 7] {
        run(h, 3, 2, 1);
    }
    for s in [0, 3, 16, 365] {
        run(3, s, 2, 1);
    }
    for depth in [3, 5, 8, 10] {
        run(3, 3, depth - 1, 1);
    }
    for e in [0, 2, 4, 6] {
        run(3, 3, 8 - e, e);
    }

    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 900,
        "ablation matrix took {elapsed:?}, budget 15 min"
    );
    println!(
        "PASS ablation matrix: H in {{1,3,5,7}}, S in {{0,3,16,365}}, depth in {{3,5,8,10}}, \
         E in {{0,2,4,6}} all run end-to-end ({elapsed:?})"
    );
}
