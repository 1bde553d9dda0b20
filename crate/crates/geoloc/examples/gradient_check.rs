//! Verifies reverse-mode gradients against central differences, first for a
//! strided attention composite, then for every parameter of a small decoder.

use geoloc::geodecoder::{EncoderConfig, GeoDecoder, ModelConfig, ModelInput};
use geoloc::numerics::{backward, max_rel_err, scaled_dot_attention, Tensor};

fn smooth(shape: &[usize], salt: usize) -> Vec<f64> {
    let n: usize = shape.iter().product();
    (0..n)
        .map(|k| ((salt * 31 + k * 7) as f64 * 0.43).sin())
        .collect()
}

fn main() -> geoloc::Result<()> {
    // Composite: softmax(QK^T/sqrt(d))V followed by a weighted reduction.
    let h = 1e-5;
    let shapes: [&[usize]; 3] = [&[2, 4], &[3, 4], &[3, 4]];
    let datas: Vec<Vec<f64>> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| smooth(s, i + 1))
        .collect();
    let loss_of = |datas: &[Vec<f64>]| -> geoloc::Result<(Vec<Tensor>, Tensor)> {
        let leaves: Vec<Tensor> = shapes
            .iter()
            .zip(datas)
            .map(|(s, d)| Tensor::from_vec(s.to_vec(), d.clone()).map(|t| t.tracked()))
            .collect::<geoloc::Result<_>>()?;
        let (out, _) = scaled_dot_attention(&leaves[0], &leaves[1], &leaves[2])?;
        let w = Tensor::from_vec(vec![2, 4], smooth(&[2, 4], 9))?;
        Ok((leaves.clone(), out.mul(&w)?.sum_all()))
    };
    let (leaves, loss) = loss_of(&datas)?;
    let grads = backward(&loss)?;
    let mut worst = 0.0f64;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(leaf).expect("leaf is tracked");
        for k in 0..datas[i].len() {
            let mut probe = datas.clone();
            probe[i][k] += h;
            let up = loss_of(&probe)?.1.item()?;
            probe[i][k] -= 2.0 * h;
            let down = loss_of(&probe)?.1.item()?;
            worst = worst.max(max_rel_err(&[analytic[k]], &[(up - down) / (2.0 * h)]));
        }
    }
    println!("attention composite: worst relative error {worst:.3e}");

    // Full decoder loss with respect to every parameter coordinate.
    let config = ModelConfig {
        hierarchies: 2,
        scenes: 2,
        dim: 8,
        heads: 2,
        independent_layers: 1,
        dependent_layers: 1,
        ffn_hidden: 16,
        classes_per_hierarchy: vec![3, 4],
        encoder: EncoderConfig::Precomputed { input_dim: 4 },
        values_from_keys: false,
        zero_init_heads: false,
    };
    let mut model = GeoDecoder::new(config, 5)?;
    let tokens = Tensor::from_vec(vec![3, 4], smooth(&[3, 4], 17))?;
    let labels = [Some(2), Some(1)];
    let loss_of = |m: &GeoDecoder| -> geoloc::Result<f64> {
        let out = m.forward(&ModelInput::Tokens(tokens.clone()))?;
        m.loss(&out, &labels, Some(1))?.item()
    };
    let out = model.forward(&ModelInput::Tokens(tokens.clone()))?;
    let loss = model.loss(&out, &labels, Some(1))?;
    let grads = backward(&loss)?;
    for p in model.parameters_mut() {
        p.accumulate(&grads);
    }
    let names: Vec<String> = model
        .parameters()
        .iter()
        .map(|p| p.name().to_string())
        .collect();
    println!(
        "decoder: {} parameters in {} tensors, loss {:.6}",
        model.num_parameters(),
        names.len(),
        loss.item()?
    );
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    for name in names {
        let (analytic, n) = {
            let p = model
                .parameters()
                .into_iter()
                .find(|p| p.name() == name)
                .unwrap();
            (p.grad().to_vec(), p.numel())
        };
        let mut tensor_worst = 0.0f64;
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
            let up = loss_of(&model)?;
            set(&mut model, orig - h);
            let down = loss_of(&model)?;
            set(&mut model, orig);
            tensor_worst =
                tensor_worst.max(max_rel_err(&[analytic[k]], &[(up - down) / (2.0 * h)]));
        }
        if tensor_worst > worst {
            worst = tensor_worst;
            worst_name = name;
        }
    }
    println!("decoder: worst relative error {worst:.3e} (parameter {worst_name})");
    assert!(worst < 1e-4);
    println!("all gradients agree with finite differences");
    Ok(())
}
