//! The binary tensor container that checkpoints, teacher embeddings, and
//! samples share: named sections of f64 payloads behind a magic/version
//! header. Round trips are lossless; corrupted files are rejected, never
//! misread.
//!
//! Run with: cargo run --release --example checkpoint_roundtrip

use any2seg::fmt::{read_sections, write_sections, SectionMap};
use any2seg::lscd::TeacherEmbeddings;
use any2seg::segnet::{ModelDims, ModelParams};
use any2seg::tensor::Tensor;

fn main() -> any2seg::Result<()> {
    let dir = std::env::temp_dir().join("any2seg-example-fmt");
    std::fs::create_dir_all(&dir)?;

    // Raw container API: write named tensors, read them back.
    let path = dir.join("raw.a2sg");
    write_sections(
        &path,
        &[
            ("alpha".to_string(), Tensor::vector(&[1.0, 2.5, -3.0])),
            ("beta".to_string(), Tensor::from_vec(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4])?),
        ],
    )?;
    let sections = read_sections(&path)?;
    for (name, t) in &sections {
        println!("section {:?}: shape {:?} data {:?}", name, t.shape(), t.data());
    }
    let map = SectionMap::read(&path)?;
    println!("shaped lookup: beta[2,2] ok = {}", map.get_shaped("beta", &[2, 2]).is_ok());

    // Model checkpoints: parameters plus a dims header, bit-exact.
    let params = ModelParams::init(3, &ModelDims::default())?;
    let ckpt = dir.join("model.a2sg");
    params.save(&ckpt)?;
    let loaded = ModelParams::load(&ckpt)?;
    let identical = params
        .named_tensors()
        .iter()
        .zip(loaded.named_tensors())
        .all(|((_, a), (_, b))| {
            a.data().iter().zip(b.data().iter()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    println!("\ncheckpoint round trip bit-identical: {}", identical);

    // Teacher embeddings use the same container.
    let teacher = TeacherEmbeddings::synthesize(1, 4, 16, 0.75)?;
    let tpath = dir.join("teacher.a2sg");
    teacher.save(&tpath)?;
    let back = TeacherEmbeddings::load(&tpath)?;
    println!(
        "teacher round trip: {} classes, dim {}, scene row equal = {}",
        back.num_classes(),
        back.dim(),
        back.scene().data() == teacher.scene().data()
    );

    // Corruption is detected, not silently tolerated: flip a magic byte
    // and truncate a payload.
    let mut bytes = std::fs::read(&ckpt)?;
    bytes[0] ^= 0xFF;
    let bad_magic = dir.join("bad-magic.a2sg");
    std::fs::write(&bad_magic, &bytes)?;
    println!("\nbad magic -> {:?}", ModelParams::load(&bad_magic).unwrap_err());

    let mut shorter = std::fs::read(&ckpt)?;
    shorter.truncate(shorter.len() - 9);
    let truncated = dir.join("truncated.a2sg");
    std::fs::write(&truncated, &shorter)?;
    println!("truncated payload -> {:?}", ModelParams::load(&truncated).unwrap_err());

    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
