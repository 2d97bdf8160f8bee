//! Builds the full-size x-vector TDNN, prints its layer table and runs one
//! forward pass to show the embedding and posterior shapes.
//!
//! `cargo run --release --example xvector_network`

use lidkit::dsp::FeatureMatrix;
use lidkit::net::{extract_xvector, forward, init_network, NetConfig};
use ndarray::Array2;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = NetConfig::xvector(3);
    for spec in config.layer_specs() {
        println!(
            "{:<10} context {:?} {} -> {}{}",
            spec.name,
            spec.context,
            spec.in_dim,
            spec.out_dim,
            if spec.has_nonlinearity { " relu" } else { "" }
        );
    }
    println!("receptive field {} frames", config.receptive_field());

    let params = init_network(config, 11)?;
    println!("{} parameters, {} below the output layer", params.param_count(), params.embedding_param_count());

    let frames = Array2::from_shape_fn((120, 40), |(t, k)| ((t * 7 + k * 3) % 11) as f64 / 11.0);
    let feats = FeatureMatrix::new(frames, 0.01);
    let cache = forward(&params, &feats)?;
    let xv = extract_xvector(&params, &feats)?;
    println!("x-vector dim {}, posteriors {:.4}", xv.len(), cache.posteriors());

    let short = FeatureMatrix::new(Array2::zeros((10, 40)), 0.01);
    println!("10 frames: {}", forward(&params, &short).unwrap_err());
    Ok(())
}
