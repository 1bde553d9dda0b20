//! Trains a small decoder to memorize 32 synthetic images end to end with
//! the raw library API: partition, model, loss, optimizer, accuracy.

use geoloc::geocell::{build_stack, GeoPoint};
use geoloc::geodecoder::{EncoderConfig, GeoDecoder, ModelConfig, ModelInput};
use geoloc::numerics::{backward, Sgd, SgdConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> geoloc::Result<()> {
    // Two clusters on different cube faces and a fixed random feature per
    // image, so the model must memorize feature -> cell.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut points = Vec::new();
    let mut inputs = Vec::new();
    for i in 0..32 {
        let (lat, lon) = if i % 2 == 0 { (10.0, 20.0) } else { (-5.0, 150.0) };
        points.push(GeoPoint::new(
            lat + rng.random_range(-1.0..1.0f64),
            lon + rng.random_range(-1.0..1.0f64),
        )?);
        inputs.push(ModelInput::Tokens(Tensor::randn(vec![4, 6], 1.0, &mut rng)));
    }
    let stack = build_stack(&points, &[40, 20], 4)?;
    println!("partition classes per level: {:?}", stack.class_counts());

    let labels: Vec<Vec<Option<usize>>> =
        points.iter().map(|p| stack.assign_labels(p)).collect();
    let scenes: Vec<Option<usize>> = (0..32).map(|i| Some(i % 3)).collect();

    let config = ModelConfig {
        hierarchies: 2,
        scenes: 3,
        dim: 16,
        heads: 2,
        independent_layers: 1,
        dependent_layers: 1,
        ffn_hidden: 32,
        classes_per_hierarchy: stack.class_counts(),
        encoder: EncoderConfig::Precomputed { input_dim: 6 },
        values_from_keys: false,
        zero_init_heads: true,
    };
    let mut model = GeoDecoder::new(config, 3)?;
    println!("model has {} parameters", model.num_parameters());

    let mut opt = Sgd::new(SgdConfig {
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 1e-4,
        milestones: vec![120],
        gamma: 0.5,
    });

    for epoch in 0..150 {
        opt.set_epoch(epoch);
        let outs = model.forward_batch(&inputs)?;
        let mut total: Option<Tensor> = None;
        for (i, out) in outs.iter().enumerate() {
            let loss = model.loss(out, &labels[i], scenes[i])?;
            total = Some(match total {
                Some(t) => t.add(&loss)?,
                None => loss,
            });
        }
        let mean = total.unwrap().scale(1.0 / 32.0);
        let value = mean.item()?;
        let grads = backward(&mean)?;
        let mut params = model.parameters_mut();
        for p in params.iter_mut() {
            p.accumulate(&grads);
        }
        opt.step(&mut params)?;
        for p in params.iter_mut() {
            p.zero_grad();
        }
        if epoch % 25 == 0 || epoch == 149 {
            println!("epoch {epoch:>3}  loss {value:.4}  lr {}", opt.learning_rate());
        }
    }

    // Train accuracy on the finest level plus scene accuracy.
    let mut geo_hits = 0;
    let mut scene_hits = 0;
    for (i, input) in inputs.iter().enumerate() {
        let pred = geoloc::inference::predict(&model, input, &stack, false)?;
        if Some(pred.fine_class) == labels[i][1] {
            geo_hits += 1;
        }
        if pred.scene == scenes[i] {
            scene_hits += 1;
        }
    }
    println!("finest-level accuracy {geo_hits}/32, scene accuracy {scene_hits}/32");
    Ok(())
}
