//! Modality-agnostic feature fusion on a synthetic scene: encode each
//! sensor raster, reweight per-modality features by cosine affinity to the
//! anchor, gather the per-pixel best modality, and aggregate. The trace
//! exposes the intermediate weights so you can watch the iterations move.
//!
//! Run with: cargo run --release --example fuse_pipeline

use any2seg::mff::{fuse, FuseConfig, Modality, ModalityBundle};
use any2seg::segnet::{encode, ModelDims, ModelParams};
use any2seg::synthdata::gen_scene;
use any2seg::tensor::Tape;

fn main() -> any2seg::Result<()> {
    // A 32x32 scene with four aligned rasters: RGB, depth, event, LiDAR.
    let scene = gen_scene(7, 4, 32, 32, 5, true)?;
    let params = ModelParams::init(0, &ModelDims::default())?;

    let tape = Tape::new();
    let mut pairs = Vec::new();
    for m in Modality::ALL {
        let f = encode(&tape, scene.raster(m), &params.enc)?;
        println!("encoded {:?} -> feature map {:?}", m, f.shape());
        pairs.push((m, f));
    }
    let bundle = ModalityBundle::from_pairs(pairs)?;

    // Two reweight/select rounds, mean aggregation: the defaults.
    let cfg = FuseConfig::default();
    let (f_ma, trace) = fuse(&tape, &bundle, &cfg)?;
    println!("\nfused f_ma {:?} via {} reweight/select rounds", f_ma.shape(), trace.len());

    for (i, step) in trace.iter().enumerate() {
        println!("round {}:", i);
        for (m, w) in &step.norm_weights {
            println!("  {:?}: mean normalized weight {:.5}", m, mean(w.data()));
        }
        let hist = step.index_map.histogram();
        let total: usize = hist.iter().sum();
        print!("  per-pixel winners:");
        for m in Modality::ALL {
            print!(" {:?} {:.0}%", m, 100.0 * hist[m.index()] as f64 / total as f64);
        }
        println!();
    }

    // Missing modalities are first-class: fuse the same scene from depth
    // and LiDAR alone. The bundle mask drives every stage, so absent
    // modalities never contribute zeros.
    let tape = Tape::new();
    let partial = ModalityBundle::from_pairs(vec![
        (Modality::D, encode(&tape, scene.raster(Modality::D), &params.enc)?),
        (Modality::L, encode(&tape, scene.raster(Modality::L), &params.enc)?),
    ])?;
    let (f_dl, _) = fuse(&tape, &partial, &cfg)?;
    println!("\nfused from {{D, L}} only -> {:?}", f_dl.shape());

    // A single available modality passes through untouched.
    let tape = Tape::new();
    let solo_feature = encode(&tape, scene.raster(Modality::R), &params.enc)?;
    let solo = ModalityBundle::from_pairs(vec![(Modality::R, solo_feature.clone())])?;
    let (f_r, _) = fuse(&tape, &solo, &cfg)?;
    let max_diff = f_r
        .data()
        .iter()
        .zip(solo_feature.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("single-modality fusion is the identity: max |diff| = {:.1e}", max_diff);
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
