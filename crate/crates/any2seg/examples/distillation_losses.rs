//! The two correlation-distillation losses, end to end on one scene:
//!
//! - L_cr aligns the student's inter-modal correlation vector (cosine of
//!   each modality's pooled feature against the fused feature) with the
//!   teacher's (cosine of each modality embedding against the scene
//!   embedding), via KL at temperature τ.
//! - L_se aligns the self-similarity matrix of mask-pooled class
//!   representations with the teacher's class-embedding similarities,
//!   row-wise.
//!
//! Both vanish when the student already matches the teacher; the example
//! shows that zero point explicitly.
//!
//! Run with: cargo run --release --example distillation_losses

use any2seg::lscd::{
    inter_modal_corr_student, loss_cr, loss_kd, loss_se, map_pool, KlOrder, TeacherEmbeddings,
    UpsampleMode,
};
use any2seg::mff::{fuse, FuseConfig, Modality, ModalityBundle};
use any2seg::segnet::{encode, ModelDims, ModelParams};
use any2seg::synthdata::gen_scene;
use any2seg::tensor::Tape;
use any2seg::IGNORE_LABEL;

fn main() -> any2seg::Result<()> {
    let classes = 4;
    // Teacher coherence 0.8: modality embeddings share 80% of the scene
    // direction, so the teacher correlation vector is informative.
    let teacher = TeacherEmbeddings::synthesize(11, classes, 16, 0.8)?;
    println!("teacher: {} classes, embedding dim {}", teacher.num_classes(), teacher.dim());
    let t_corr = teacher.inter_modal_corr(&Modality::ALL)?;
    println!("teacher inter-modal correlation: {:?}\n", rounded(t_corr.data()));

    let scene = gen_scene(3, classes, 32, 32, 5, true)?;
    let params = ModelParams::init(1, &ModelDims::default())?;

    // Watch the encoder parameters so the losses are differentiable in
    // them, exactly as a training step would.
    let tape = Tape::new();
    let watched = params.watched(&tape);
    let pairs: Vec<(Modality, _)> = Modality::ALL
        .into_iter()
        .map(|m| encode(&tape, scene.raster(m), &watched.enc).map(|f| (m, f)))
        .collect::<any2seg::Result<_>>()?;
    let bundle = ModalityBundle::from_pairs(pairs)?;
    let (f_ma, _) = fuse(&tape, &bundle, &FuseConfig::default())?;

    // L_cr: student correlations against the fused anchor.
    let s_corr = inter_modal_corr_student(&tape, &bundle, &f_ma)?;
    println!("student inter-modal correlation: {:?}", rounded(s_corr.data()));
    let l_cr = loss_cr(&tape, &s_corr, &t_corr, 1.0, KlOrder::TeacherTarget)?;
    println!("L_cr = {:.6}", l_cr.item()?);

    // L_se: class representations by mask average pooling. The feature
    // map is 8x8 while labels are 32x32, so pooling first bilinearly
    // upsamples the features by 4.
    let reps = map_pool(&tape, &f_ma, &scene.y, IGNORE_LABEL, classes, UpsampleMode::Bilinear)?;
    println!("classes present in this scene: {:?}", reps.present());
    let l_se = loss_se(&tape, &reps, &teacher, 1.0, KlOrder::TeacherTarget)?;
    println!("L_se = {:.6}", l_se.item()?);

    let l_kd = loss_kd(&tape, &l_cr, &l_se)?;
    println!("L_kd = L_cr + L_se = {:.6}\n", l_kd.item()?);

    // Gradients flow to the student only; the teacher side is detached.
    let grads = tape.backward(&l_kd)?;
    let g = grads.wrt(&watched.enc.w1).expect("watched parameter");
    let norm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("‖dL_kd/d enc.w1‖ = {:.6} (teacher side is detached)", norm);

    // Zero points: feed the teacher its own quantities and both losses
    // vanish (up to the KL epsilon smoothing).
    let tape = Tape::new();
    let self_cr = loss_cr(&tape, &t_corr, &t_corr, 1.0, KlOrder::TeacherTarget)?;
    println!("\nL_cr(teacher, teacher) = {:.2e}", self_cr.item()?);
    Ok(())
}

fn rounded(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|v| (v * 1e4).round() / 1e4).collect()
}
