//! Shows how per-level class scores multiply along parent chains into a
//! single fine-grained prediction, and how far it lands from the truth.

use geoloc::geocell::{build_stack, GeoPoint};
use geoloc::geodecoder::{EncoderConfig, GeoDecoder, ModelInput, ModelConfig};
use geoloc::inference::{compose_over_parents, haversine_km, predict};
use geoloc::numerics::{backward, Sgd, SgdConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> geoloc::Result<()> {
    // Hand-sized score stack first: 2 coarse classes, 4 fine classes.
    let coarse = vec![0.7, 0.3];
    let fine = vec![0.4, 0.1, 0.3, 0.2];
    let parents = vec![vec![0, 0, 1, 1]];
    let composed = compose_over_parents(&[coarse.clone(), fine.clone()], &parents)?;
    println!("coarse {coarse:?}");
    println!("fine   {fine:?}");
    println!("composed (fine * its parent): {composed:?}");

    // The same mechanism through a trained model.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut points = Vec::new();
    let mut inputs = Vec::new();
    for i in 0..24 {
        let (lat, lon) = match i % 3 {
            0 => (10.0, 20.0),
            1 => (-5.0, 150.0),
            _ => (50.0, -60.0),
        };
        points.push(GeoPoint::new(
            lat + rng.random_range(-1.0..1.0f64),
            lon + rng.random_range(-1.0..1.0f64),
        )?);
        inputs.push(ModelInput::Tokens(Tensor::randn(vec![4, 6], 1.0, &mut rng)));
    }
    let stack = build_stack(&points, &[30, 10], 3)?;
    let labels: Vec<Vec<Option<usize>>> =
        points.iter().map(|p| stack.assign_labels(p)).collect();

    let mut model = GeoDecoder::new(
        ModelConfig {
            hierarchies: 2,
            scenes: 2,
            dim: 16,
            heads: 2,
            independent_layers: 1,
            dependent_layers: 1,
            ffn_hidden: 32,
            classes_per_hierarchy: stack.class_counts(),
            encoder: EncoderConfig::Precomputed { input_dim: 6 },
            values_from_keys: false,
            zero_init_heads: true,
        },
        4,
    )?;
    let mut opt = Sgd::new(SgdConfig {
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 1e-4,
        milestones: vec![],
        gamma: 0.5,
    });
    for epoch in 0..120 {
        opt.set_epoch(epoch);
        let outs = model.forward_batch(&inputs)?;
        let mut total: Option<Tensor> = None;
        for (i, out) in outs.iter().enumerate() {
            let loss = model.loss(out, &labels[i], Some(i % 2))?;
            total = Some(match total {
                Some(t) => t.add(&loss)?,
                None => loss,
            });
        }
        let mean = total.unwrap().scale(1.0 / 24.0);
        let grads = backward(&mean)?;
        let mut params = model.parameters_mut();
        for p in params.iter_mut() {
            p.accumulate(&grads);
        }
        opt.step(&mut params)?;
        for p in params.iter_mut() {
            p.zero_grad();
        }
    }

    println!("\nper-image predictions (first 6):");
    for i in 0..6 {
        let pred = predict(&model, &inputs[i], &stack, false)?;
        let err = haversine_km(&pred.point, &points[i]);
        println!(
            "image {i}: fine class {} scene {:?} predicted ({:+7.2}, {:+8.2}) error {:7.2} km",
            pred.fine_class,
            pred.scene,
            pred.point.lat(),
            pred.point.lon(),
            err
        );
        let sum: f64 = pred.composed_scores.iter().sum();
        println!("         composed scores {:?} (sum {sum:.4})", round3(&pred.composed_scores));
    }
    Ok(())
}

fn round3(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}
