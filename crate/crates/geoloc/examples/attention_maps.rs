//! Renders where each hierarchy query attends over image patches. Attention
//! retention is off by default; this flips it on and exports one map per
//! (layer, hierarchy, scene) triple.

use geoloc::geodecoder::{EncoderConfig, GeoDecoder, ModelConfig, ModelInput};
use geoloc::numerics::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> geoloc::Result<()> {
    let config = ModelConfig {
        hierarchies: 3,
        scenes: 2,
        dim: 16,
        heads: 2,
        independent_layers: 1,
        dependent_layers: 1,
        ffn_hidden: 32,
        classes_per_hierarchy: vec![4, 4, 4],
        encoder: EncoderConfig::Patch {
            image_size: 32,
            patch_size: 8,
            depth: 1,
        },
        values_from_keys: false,
        zero_init_heads: false,
    };
    let layers = config.independent_layers + config.dependent_layers;
    let mut model = GeoDecoder::new(config, 11)?;
    model.set_retain_attention(true);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let image = Tensor::rand_uniform(vec![3, 32, 32], 0.0, 1.0, &mut rng);
    let out = model.forward(&ModelInput::Image(image))?;

    // 32/8 = 4 patches per side, 16 tokens per map.
    for layer in 0..layers {
        for h in 0..3 {
            let map = model.export_attention(&out, layer, h, 0)?;
            let weights = map.data();
            let peak = weights.iter().cloned().fold(0.0f64, f64::max);
            println!("layer {layer} hierarchy {h} scene 0 (peak {peak:.3}):");
            for row in 0..4 {
                let cells: Vec<String> = (0..4)
                    .map(|col| shade(weights[row * 4 + col] / peak))
                    .collect();
                println!("  {}", cells.join(""));
            }
        }
    }
    println!("legend: ' ' low, '.' then ':' then '#' high, row-major patches");
    Ok(())
}

fn shade(x: f64) -> String {
    let c = match x {
        x if x > 0.75 => '#',
        x if x > 0.5 => ':',
        x if x > 0.25 => '.',
        _ => ' ',
    };
    format!("{c}{c}")
}
