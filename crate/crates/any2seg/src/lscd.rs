//! Language-guided semantic correlation distillation.
//!
//! A frozen teacher provides unit-norm embeddings: one vector per modality,
//! one scene vector, and one row per class. Two losses transfer the
//! teacher's correlation structure onto the student:
//!
//! - L_cr matches inter-modal correlations: each modality's cosine to the
//!   scene vector (teacher) versus each pooled feature map's cosine to the
//!   pooled fused map (student).
//! - L_se matches intra-modal class structure: the cosine self-similarity
//!   matrix of mask-average-pooled class representations versus that of the
//!   class embedding rows.
//!
//! Similarity vectors become distributions via temperature softmax before
//! the KL divergence. Teacher values never join the tape, so their
//! gradients are identically zero by construction.
//!
//! There is no pretrained model here: [`TeacherEmbeddings::synthesize`]
//! draws a seeded synthetic teacher whose modality-to-scene coherence is
//! controlled by γ. A per-sample scene vector, if wanted, is just a
//! per-sample synthesis seed.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fmt::{write_sections, SectionMap};
use crate::label::LabelMap;
use crate::mff::{Modality, ModalityBundle, NUM_MODALITIES};
use crate::rng_util::unit_vector;
use crate::tensor::{Tape, Tensor, COS_EPS};

/// Which side of the KL divergence each distribution takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum KlOrder {
    /// KL(teacher ‖ student): teacher is the detached target (standard
    /// distillation form, the default).
    TeacherTarget,
    /// KL(student ‖ teacher): the literal argument order of the loss
    /// definitions.
    Literal,
}

impl Default for KlOrder {
    fn default() -> Self {
        KlOrder::TeacherTarget
    }
}

impl KlOrder {
    pub fn parse(s: &str) -> Result<KlOrder> {
        match s {
            "teacher_target" => Ok(KlOrder::TeacherTarget),
            "literal" => Ok(KlOrder::Literal),
            other => Err(Error::config(format!(
                "kl_order must be \"teacher_target\" or \"literal\", got {:?}",
                other
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KlOrder::TeacherTarget => "teacher_target",
            KlOrder::Literal => "literal",
        }
    }
}

/// How map_pool brings features to label resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum UpsampleMode {
    Bilinear,
    Nearest,
}

impl Default for UpsampleMode {
    fn default() -> Self {
        UpsampleMode::Bilinear
    }
}

impl UpsampleMode {
    pub fn parse(s: &str) -> Result<UpsampleMode> {
        match s {
            "bilinear" => Ok(UpsampleMode::Bilinear),
            "nearest" => Ok(UpsampleMode::Nearest),
            other => Err(Error::config(format!(
                "upsample must be \"bilinear\" or \"nearest\", got {:?}",
                other
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            UpsampleMode::Bilinear => "bilinear",
            UpsampleMode::Nearest => "nearest",
        }
    }
}

const TEACHER_SECTIONS: [&str; NUM_MODALITIES] = ["E_R", "E_D", "E_E", "E_L"];

/// Frozen teacher embeddings, all rows unit ℓ2 norm.
#[derive(Clone, Debug)]
pub struct TeacherEmbeddings {
    modal: [Tensor; NUM_MODALITIES], // each [d]
    scene: Tensor,                   // [d]
    classes: Tensor,                 // [K, d]
}

fn normalize_row(row: &[f64], what: &str) -> Result<Vec<f64>> {
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::data(format!("{} holds non-finite values", what)));
    }
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return Err(Error::data(format!("{} cannot be normalized (norm {})", what, norm)));
    }
    Ok(row.iter().map(|v| v / norm).collect())
}

impl TeacherEmbeddings {
    /// Builds a teacher from raw vectors, renormalizing every row.
    pub fn new(modal: [Tensor; NUM_MODALITIES], scene: Tensor, classes: Tensor) -> Result<Self> {
        let d = scene.len();
        if d < 2 || scene.rank() != 1 {
            return Err(Error::shape(format!(
                "scene embedding must be a vector of dim >= 2, got {:?}",
                scene.shape()
            )));
        }
        if classes.rank() != 2 || classes.shape()[1] != d || classes.shape()[0] == 0 {
            return Err(Error::shape(format!(
                "class matrix must be [K,{}] with K >= 1, got {:?}",
                d,
                classes.shape()
            )));
        }
        let mut norm_modal = Vec::with_capacity(NUM_MODALITIES);
        for (i, m) in modal.iter().enumerate() {
            if m.shape() != [d] {
                return Err(Error::shape(format!(
                    "modality embedding {} has shape {:?}, expected [{}]",
                    TEACHER_SECTIONS[i],
                    m.shape(),
                    d
                )));
            }
            norm_modal.push(Tensor::vector(&normalize_row(m.data(), TEACHER_SECTIONS[i])?));
        }
        let scene = Tensor::vector(&normalize_row(scene.data(), "E_S")?);
        let k = classes.shape()[0];
        let mut class_data = Vec::with_capacity(k * d);
        for row in 0..k {
            let slice = &classes.data()[row * d..(row + 1) * d];
            class_data.extend(normalize_row(slice, &format!("E_C row {}", row))?);
        }
        Ok(TeacherEmbeddings {
            modal: [
                norm_modal[0].clone(),
                norm_modal[1].clone(),
                norm_modal[2].clone(),
                norm_modal[3].clone(),
            ],
            scene,
            classes: Tensor::from_vec(vec![k, d], class_data)?,
        })
    }

    /// Draws a synthetic teacher. Class rows are independent random unit
    /// vectors; each modality vector is γ·E_S + (1−γ)·noise renormalized,
    /// so γ=1 binds every modality exactly to the scene and γ=0 makes them
    /// independent. Draw order (scene, classes, modality noise) is fixed so
    /// a seed pins every bit.
    pub fn synthesize(seed: u64, num_classes: usize, dim: usize, coherence: f64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::domain(format!("teacher dim must be >= 2, got {}", dim)));
        }
        if num_classes == 0 {
            return Err(Error::domain("teacher needs at least one class"));
        }
        if !(0.0..=1.0).contains(&coherence) {
            return Err(Error::domain(format!(
                "coherence must lie in [0,1], got {}",
                coherence
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = unit_vector(&mut rng, dim);
        let mut class_data = Vec::with_capacity(num_classes * dim);
        for _ in 0..num_classes {
            class_data.extend(unit_vector(&mut rng, dim));
        }
        let mut modal = Vec::with_capacity(NUM_MODALITIES);
        for _ in 0..NUM_MODALITIES {
            let v = loop {
                let noise = unit_vector(&mut rng, dim);
                let mixed: Vec<f64> = scene
                    .iter()
                    .zip(&noise)
                    .map(|(s, n)| coherence * s + (1.0 - coherence) * n)
                    .collect();
                let norm = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-9 {
                    break mixed.iter().map(|x| x / norm).collect::<Vec<f64>>();
                }
            };
            modal.push(Tensor::vector(&v));
        }
        TeacherEmbeddings::new(
            [
                modal[0].clone(),
                modal[1].clone(),
                modal[2].clone(),
                modal[3].clone(),
            ],
            Tensor::vector(&scene),
            Tensor::from_vec(vec![num_classes, dim], class_data)?,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let map = SectionMap::read(path)?;
        let scene = map.get("E_S")?.detach();
        let classes = map.get("E_C")?.detach();
        let mut modal = Vec::with_capacity(NUM_MODALITIES);
        for name in TEACHER_SECTIONS {
            modal.push(map.get(name)?.detach());
        }
        TeacherEmbeddings::new(
            [
                modal[0].clone(),
                modal[1].clone(),
                modal[2].clone(),
                modal[3].clone(),
            ],
            scene,
            classes,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut sections = Vec::new();
        for (i, name) in TEACHER_SECTIONS.iter().enumerate() {
            sections.push((name.to_string(), self.modal[i].clone()));
        }
        sections.push(("E_S".to_string(), self.scene.clone()));
        sections.push(("E_C".to_string(), self.classes.clone()));
        write_sections(path, &sections)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.scene.len()
    }

    pub fn modal(&self, m: Modality) -> &Tensor {
        &self.modal[m.index()]
    }

    pub fn scene(&self) -> &Tensor {
        &self.scene
    }

    /// Class embedding row `k` as a plain vector.
    pub fn class_row(&self, k: usize) -> Result<Tensor> {
        if k >= self.num_classes() {
            return Err(Error::domain(format!(
                "class {} out of {} teacher classes",
                k,
                self.num_classes()
            )));
        }
        let d = self.dim();
        Ok(Tensor::vector(&self.classes.data()[k * d..(k + 1) * d]))
    }

    /// Teacher inter-modal correlation: cosine(E_m, E_S) for each available
    /// modality, concatenated in canonical order. Always a plain tensor.
    pub fn inter_modal_corr(&self, available: &[Modality]) -> Result<Tensor> {
        if available.is_empty() {
            return Err(Error::domain("inter-modal correlation over zero modalities"));
        }
        let tape = Tape::new();
        let mut vals = Vec::new();
        for m in Modality::ALL {
            if available.contains(&m) {
                vals.push(tape.cosine(&self.modal[m.index()], &self.scene, COS_EPS)?.item()?);
            }
        }
        Ok(Tensor::vector(&vals))
    }
}

/// Global average pooling of a [C,h,w] map to a [C] vector, on tape.
pub fn global_avg_pool(tape: &Tape, f: &Tensor) -> Result<Tensor> {
    if f.rank() != 3 {
        return Err(Error::shape(format!("expected [C,h,w], got {:?}", f.shape())));
    }
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let flat = tape.reshape(f, vec![c, h * w])?;
    tape.mul_scalar(&tape.sum_axis(&flat, 1)?, 1.0 / (h * w) as f64)
}

/// Student inter-modal correlation: each available map is average-pooled to
/// a vector and compared (cosine) against the pooled fused map, in
/// canonical order.
pub fn inter_modal_corr_student(
    tape: &Tape,
    bundle: &ModalityBundle,
    f_ma: &Tensor,
) -> Result<Tensor> {
    if f_ma.shape() != bundle.map_shape() {
        return Err(Error::shape(format!(
            "fused map shape {:?} does not match bundle {:?}",
            f_ma.shape(),
            bundle.map_shape()
        )));
    }
    let pooled_ma = global_avg_pool(tape, f_ma)?;
    let mut entries = Vec::new();
    for m in bundle.available() {
        let pooled = global_avg_pool(tape, bundle.get(m).expect("available"))?;
        entries.push(tape.cosine(&pooled, &pooled_ma, COS_EPS)?);
    }
    let refs: Vec<&Tensor> = entries.iter().collect();
    let stacked = tape.stack0(&refs)?; // [m,1]
    tape.reshape(&stacked, vec![entries.len()])
}

/// Inter-modal correlation loss: KL between the softmaxed teacher and
/// student correlation vectors at temperature τ. Vectors shorter than 2
/// give loss 0 by convention. The teacher side is detached, so gradient
/// reaches student features only.
pub fn loss_cr(
    tape: &Tape,
    student: &Tensor,
    teacher: &Tensor,
    tau: f64,
    order: KlOrder,
) -> Result<Tensor> {
    if student.rank() != 1 || teacher.rank() != 1 || student.len() != teacher.len() {
        return Err(Error::shape(format!(
            "correlation vectors differ: {:?} vs {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    if student.len() < 2 {
        return Ok(Tensor::scalar(0.0));
    }
    let p_teacher = tape.softmax(&teacher.detach(), 0, tau)?;
    let p_student = tape.softmax(student, 0, tau)?;
    match order {
        KlOrder::TeacherTarget => tape.kl_div(&p_teacher, &p_student),
        KlOrder::Literal => tape.kl_div(&p_student, &p_teacher),
    }
}

/// Mask-average-pooled class representations with a presence mask.
#[derive(Clone, Debug)]
pub struct ClassReps {
    reps: Vec<Option<Tensor>>, // index = class id, each [C]
}

impl ClassReps {
    pub fn from_vec(reps: Vec<Option<Tensor>>) -> Result<ClassReps> {
        let mut width: Option<usize> = None;
        for r in reps.iter().flatten() {
            if r.rank() != 1 {
                return Err(Error::shape(format!(
                    "class representation must be a vector, got {:?}",
                    r.shape()
                )));
            }
            match width {
                None => width = Some(r.len()),
                Some(w) if w == r.len() => {}
                Some(w) => {
                    return Err(Error::shape(format!(
                        "class representation widths differ: {} vs {}",
                        w,
                        r.len()
                    )));
                }
            }
        }
        Ok(ClassReps { reps })
    }

    pub fn num_classes(&self) -> usize {
        self.reps.len()
    }

    pub fn get(&self, k: usize) -> Option<&Tensor> {
        self.reps.get(k).and_then(|r| r.as_ref())
    }

    /// Present class ids, ascending.
    pub fn present(&self) -> Vec<usize> {
        (0..self.reps.len()).filter(|&k| self.reps[k].is_some()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.present().is_empty()
    }
}

/// Mask average pooling: upsample f_ma to label resolution, then average
/// the channel vectors within each class mask. Classes without a
/// non-ignored pixel stay masked; an all-ignored map gives empty reps.
pub fn map_pool(
    tape: &Tape,
    f_ma: &Tensor,
    y: &LabelMap,
    ignore: u8,
    num_classes: usize,
    mode: UpsampleMode,
) -> Result<ClassReps> {
    if f_ma.rank() != 3 {
        return Err(Error::shape(format!("expected [C,h,w], got {:?}", f_ma.shape())));
    }
    let (c, h, w) = (f_ma.shape()[0], f_ma.shape()[1], f_ma.shape()[2]);
    let (yh, yw) = (y.height(), y.width());
    if yh % h != 0 || yw % w != 0 || yh / h != yw / w {
        return Err(Error::shape(format!(
            "labels {}x{} are not an integer multiple of features {}x{}",
            yh, yw, h, w
        )));
    }
    for (i, &v) in y.data().iter().enumerate() {
        if v != ignore && (v as usize) >= num_classes {
            return Err(Error::data(format!(
                "label {} at pixel {} exceeds {} classes",
                v, i, num_classes
            )));
        }
    }
    let up = if yh == h && yw == w {
        f_ma.clone()
    } else {
        match mode {
            UpsampleMode::Bilinear => tape.upsample_bilinear(f_ma, yh, yw)?,
            UpsampleMode::Nearest => tape.upsample_nearest(f_ma, yh, yw)?,
        }
    };
    let flat = tape.reshape(&up, vec![c, yh * yw])?;
    let mut reps: Vec<Option<Tensor>> = vec![None; num_classes];
    for k in 0..num_classes {
        let cols: Vec<usize> = y
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v as usize == k && v != ignore)
            .map(|(i, _)| i)
            .collect();
        if !cols.is_empty() {
            reps[k] = Some(tape.masked_mean_cols(&flat, &cols)?);
        }
    }
    ClassReps::from_vec(reps)
}

/// Semantic self-similarity loss: row-wise KL between the softmaxed cosine
/// self-similarity of present class reps and that of the matching teacher
/// class rows. Fewer than two present classes give 0 by convention.
pub fn loss_se(
    tape: &Tape,
    reps: &ClassReps,
    teacher: &TeacherEmbeddings,
    tau: f64,
    order: KlOrder,
) -> Result<Tensor> {
    let present = reps.present();
    if present.len() < 2 {
        return Ok(Tensor::scalar(0.0));
    }
    if let Some(&bad) = present.iter().find(|&&k| k >= teacher.num_classes()) {
        return Err(Error::domain(format!(
            "class {} has no teacher embedding (teacher has {})",
            bad,
            teacher.num_classes()
        )));
    }
    let student_rows: Vec<&Tensor> = present.iter().map(|&k| reps.get(k).expect("present")).collect();
    let teacher_rows: Vec<Tensor> = present
        .iter()
        .map(|&k| teacher.class_row(k))
        .collect::<Result<Vec<_>>>()?;

    let n = present.len();
    let mut total: Option<Tensor> = None;
    for i in 0..n {
        let mut s_entries = Vec::with_capacity(n);
        let mut t_entries = Vec::with_capacity(n);
        for j in 0..n {
            s_entries.push(tape.cosine(student_rows[i], student_rows[j], COS_EPS)?);
            t_entries.push(tape.cosine(&teacher_rows[i], &teacher_rows[j], COS_EPS)?);
        }
        let s_refs: Vec<&Tensor> = s_entries.iter().collect();
        let t_refs: Vec<&Tensor> = t_entries.iter().collect();
        let s_row = tape.reshape(&tape.stack0(&s_refs)?, vec![n])?;
        let t_row = tape.reshape(&tape.stack0(&t_refs)?, vec![n])?;
        let p_student = tape.softmax(&s_row, 0, tau)?;
        let p_teacher = tape.softmax(&t_row.detach(), 0, tau)?;
        let kl = match order {
            KlOrder::TeacherTarget => tape.kl_div(&p_teacher, &p_student)?,
            KlOrder::Literal => tape.kl_div(&p_student, &p_teacher)?,
        };
        total = Some(match total {
            None => kl,
            Some(t) => tape.add(&t, &kl)?,
        });
    }
    tape.mul_scalar(&total.expect("n >= 2"), 1.0 / n as f64)
}

/// Combined distillation loss L_cr + L_se.
pub fn loss_kd(tape: &Tape, l_cr: &Tensor, l_se: &Tensor) -> Result<Tensor> {
    tape.add(l_cr, l_se)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::IGNORE_LABEL;
    use rand::Rng;

    fn one_pixel(vals: &[f64]) -> Tensor {
        Tensor::from_vec(vec![vals.len(), 1, 1], vals.to_vec()).unwrap()
    }

    #[test]
    fn synthesize_is_deterministic_and_unit_norm() {
        let a = TeacherEmbeddings::synthesize(9, 5, 64, 0.8).unwrap();
        let b = TeacherEmbeddings::synthesize(9, 5, 64, 0.8).unwrap();
        assert_eq!(a.scene.data(), b.scene.data());
        assert_eq!(a.classes.data(), b.classes.data());
        for m in Modality::ALL {
            assert_eq!(a.modal(m).data(), b.modal(m).data());
            let norm: f64 = a.modal(m).data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-9);
        }
        let c = TeacherEmbeddings::synthesize(10, 5, 64, 0.8).unwrap();
        assert_ne!(a.scene.data(), c.scene.data());
    }

    #[test]
    fn synthesize_validates_inputs() {
        assert!(matches!(
            TeacherEmbeddings::synthesize(1, 4, 1, 0.5),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            TeacherEmbeddings::synthesize(1, 4, 8, 1.5),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            TeacherEmbeddings::synthesize(1, 0, 8, 0.5),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn full_coherence_binds_modalities_to_scene() {
        let te = TeacherEmbeddings::synthesize(3, 4, 32, 1.0).unwrap();
        let corr = te.inter_modal_corr(&Modality::ALL).unwrap();
        assert_eq!(corr.len(), 4);
        for v in corr.data() {
            assert!((v - 1.0).abs() <= 1e-9, "correlation {}", v);
        }
    }

    #[test]
    fn zero_coherence_decorrelates_modalities() {
        // Monte-Carlo bound: for d=64 random unit vectors, pairwise |cos|
        // exceeds 0.5 with negligible probability.
        let mut small = 0usize;
        let mut total = 0usize;
        for seed in 0..100u64 {
            let te = TeacherEmbeddings::synthesize(seed, 2, 64, 0.0).unwrap();
            let tape = Tape::new();
            for i in 0..NUM_MODALITIES {
                for j in i + 1..NUM_MODALITIES {
                    let c = tape
                        .cosine(&te.modal[i], &te.modal[j], COS_EPS)
                        .unwrap()
                        .item()
                        .unwrap();
                    total += 1;
                    if c.abs() < 0.5 {
                        small += 1;
                    }
                }
            }
        }
        assert!(small as f64 >= 0.99 * total as f64, "{}/{} pairs", small, total);
    }

    #[test]
    fn teacher_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.a2sg");
        let te = TeacherEmbeddings::synthesize(4, 3, 16, 0.7).unwrap();
        te.save(&path).unwrap();
        let back = TeacherEmbeddings::load(&path).unwrap();
        assert_eq!(back.num_classes(), 3);
        assert_eq!(back.dim(), 16);
        for (a, b) in te.classes.data().iter().zip(back.classes.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn teacher_load_rejects_missing_and_bad_sections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.a2sg");

        // Missing E_S.
        let sections: Vec<(String, Tensor)> = TEACHER_SECTIONS
            .iter()
            .map(|n| (n.to_string(), Tensor::vector(&[1.0, 0.0])))
            .chain([("E_C".to_string(), Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())])
            .collect();
        write_sections(&path, &sections).unwrap();
        assert!(matches!(TeacherEmbeddings::load(&path), Err(Error::Format(_))));

        // Zero row in E_C.
        let mut with_scene = sections.clone();
        with_scene.push(("E_S".to_string(), Tensor::vector(&[0.0, 1.0])));
        let idx = with_scene.iter().position(|(n, _)| n == "E_C").unwrap();
        with_scene[idx].1 = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        write_sections(&path, &with_scene).unwrap();
        assert!(matches!(TeacherEmbeddings::load(&path), Err(Error::Data(_))));

        // NaN in a modality vector.
        with_scene[idx].1 = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        with_scene[0].1 = Tensor::vector(&[f64::NAN, 1.0]);
        write_sections(&path, &with_scene).unwrap();
        assert!(matches!(TeacherEmbeddings::load(&path), Err(Error::Data(_))));
    }

    #[test]
    fn teacher_corr_masks_and_orders() {
        // Hand-built teacher: E_R orthogonal to E_S, the rest equal E_S.
        let s = Tensor::vector(&[1.0, 0.0]);
        let r = Tensor::vector(&[0.0, 1.0]);
        let te = TeacherEmbeddings::new(
            [r, s.clone(), s.clone(), s.clone()],
            s.clone(),
            Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
        let all = te.inter_modal_corr(&Modality::ALL).unwrap();
        assert!((all.data()[0]).abs() <= 1e-12);
        for v in &all.data()[1..] {
            assert!((v - 1.0).abs() <= 1e-12);
        }
        let dl = te.inter_modal_corr(&[Modality::L, Modality::D]).unwrap();
        assert_eq!(dl.len(), 2);
        assert!((dl.data()[0] - 1.0).abs() <= 1e-12);
        assert!(matches!(te.inter_modal_corr(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn student_corr_worked_example() {
        let tape = Tape::new();
        let bundle = ModalityBundle::from_pairs(vec![
            (Modality::R, one_pixel(&[1.0, 0.0])),
            (Modality::D, one_pixel(&[0.0, 1.0])),
        ])
        .unwrap();
        let f_ma = one_pixel(&[0.86553, 0.13447]);
        let corr = inter_modal_corr_student(&tape, &bundle, &f_ma).unwrap();
        assert_eq!(corr.shape(), &[2]);
        assert!((corr.data()[0] - 0.98815).abs() <= 1e-4);
        assert!((corr.data()[1] - 0.15354).abs() <= 1e-4);
    }

    #[test]
    fn student_corr_identity_cases() {
        let tape = Tape::new();
        let f = one_pixel(&[0.3, 0.8, -0.1]);
        let bundle = ModalityBundle::from_pairs(vec![
            (Modality::R, f.clone()),
            (Modality::E, f.clone()),
        ])
        .unwrap();
        let corr = inter_modal_corr_student(&tape, &bundle, &f).unwrap();
        for v in corr.data() {
            assert!((v - 1.0).abs() <= 1e-12);
        }

        let single = ModalityBundle::from_pairs(vec![(Modality::L, f.clone())]).unwrap();
        let corr1 = inter_modal_corr_student(&tape, &single, &f).unwrap();
        assert_eq!(corr1.shape(), &[1]);
        assert!((corr1.data()[0] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn loss_cr_zero_point_and_worked_value() {
        let tape = Tape::new();
        let m = Tensor::vector(&[0.9, 0.4, 0.1]);
        let zero = loss_cr(&tape, &m, &m, 1.0, KlOrder::TeacherTarget).unwrap();
        assert!(zero.item().unwrap().abs() <= 1e-9);

        // M^e=[1,0], M^f=[0,1] → KL(softmax[1,0] ‖ softmax[0,1]) = (e−1)/(e+1).
        let e = std::f64::consts::E;
        let student = Tensor::vector(&[0.0, 1.0]);
        let teacher = Tensor::vector(&[1.0, 0.0]);
        let l = loss_cr(&tape, &student, &teacher, 1.0, KlOrder::TeacherTarget).unwrap();
        assert!((l.item().unwrap() - 0.46212).abs() <= 1e-5);
        assert!((l.item().unwrap() - (e - 1.0) / (e + 1.0)).abs() <= 1e-9);

        // The literal order is symmetric for this instance.
        let lit = loss_cr(&tape, &student, &teacher, 1.0, KlOrder::Literal).unwrap();
        assert!((lit.item().unwrap() - (e - 1.0) / (e + 1.0)).abs() <= 1e-9);

        let single = loss_cr(&tape, &Tensor::vector(&[0.7]), &Tensor::vector(&[0.2]), 1.0, KlOrder::TeacherTarget)
            .unwrap();
        assert_eq!(single.item().unwrap(), 0.0);

        assert!(matches!(
            loss_cr(&tape, &Tensor::vector(&[1.0, 0.0]), &Tensor::vector(&[1.0]), 1.0, KlOrder::TeacherTarget),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn loss_cr_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let maps: Vec<Tensor> = (0..3)
            .map(|_| {
                let data = (0..3 * 2 * 2).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
                Tensor::from_vec(vec![3, 2, 2], data).unwrap()
            })
            .collect();
        let teacher_corr = Tensor::vector(&[0.8, 0.3, 0.5]);

        let eval_at = |alpha: f64| -> f64 {
            let tape = Tape::new();
            let scaled: Vec<Tensor> = maps
                .iter()
                .map(|m| tape.mul_scalar(m, alpha).unwrap())
                .collect();
            let bundle = ModalityBundle::from_pairs(vec![
                (Modality::R, scaled[0].clone()),
                (Modality::D, scaled[1].clone()),
                (Modality::E, scaled[2].clone()),
            ])
            .unwrap();
            let (f_ma, _) = crate::mff::fuse(&tape, &bundle, &crate::mff::FuseConfig::default()).unwrap();
            let corr = inter_modal_corr_student(&tape, &bundle, &f_ma).unwrap();
            loss_cr(&tape, &corr, &teacher_corr, 1.0, KlOrder::TeacherTarget)
                .unwrap()
                .item()
                .unwrap()
        };
        let base = eval_at(1.0);
        for alpha in [0.5, 2.0, 10.0] {
            assert!((eval_at(alpha) - base).abs() <= 1e-9, "alpha {}", alpha);
        }
    }

    #[test]
    fn map_pool_worked_example() {
        let tape = Tape::new();
        // C=1, features already at label resolution.
        let f = Tensor::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = LabelMap::new(2, 2, vec![0, 0, 1, IGNORE_LABEL]).unwrap();
        let reps = map_pool(&tape, &f, &y, IGNORE_LABEL, 2, UpsampleMode::Bilinear).unwrap();
        assert_eq!(reps.get(0).unwrap().data(), &[1.5]);
        assert_eq!(reps.get(1).unwrap().data(), &[3.0]);
        assert_eq!(reps.present(), vec![0, 1]);
    }

    #[test]
    fn map_pool_constant_feature_and_empty_cases() {
        let tape = Tape::new();
        let f = Tensor::full(vec![3, 2, 2], 0.25);
        let y = LabelMap::new(4, 4, {
            let mut v = vec![0u8; 16];
            v[5] = 2;
            v
        })
        .unwrap();
        for mode in [UpsampleMode::Bilinear, UpsampleMode::Nearest] {
            let reps = map_pool(&tape, &f, &y, IGNORE_LABEL, 3, mode).unwrap();
            for k in [0usize, 2] {
                for v in reps.get(k).unwrap().data() {
                    assert!((v - 0.25).abs() <= 1e-12);
                }
            }
            assert!(reps.get(1).is_none());
        }

        let all_ignored = LabelMap::filled(4, 4, IGNORE_LABEL);
        let reps = map_pool(&tape, &f, &all_ignored, IGNORE_LABEL, 3, UpsampleMode::Bilinear).unwrap();
        assert!(reps.is_empty());

        let bad = LabelMap::new(4, 4, vec![7; 16]).unwrap();
        assert!(matches!(
            map_pool(&tape, &f, &bad, IGNORE_LABEL, 3, UpsampleMode::Bilinear),
            Err(Error::Data(_))
        ));

        let ragged = LabelMap::filled(6, 4, 0);
        assert!(matches!(
            map_pool(&tape, &f, &ragged, IGNORE_LABEL, 3, UpsampleMode::Bilinear),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn loss_se_zero_point_and_conventions() {
        let tape = Tape::new();
        let te = TeacherEmbeddings::synthesize(8, 4, 6, 0.5).unwrap();

        // Reps equal to the teacher's own rows → zero loss.
        let reps = ClassReps::from_vec(
            (0..4).map(|k| Some(te.class_row(k).unwrap())).collect(),
        )
        .unwrap();
        let l = loss_se(&tape, &reps, &te, 1.0, KlOrder::TeacherTarget).unwrap();
        assert!(l.item().unwrap().abs() <= 1e-9);

        // One present class → 0 by convention.
        let one = ClassReps::from_vec(vec![Some(Tensor::vector(&[1.0, 2.0])), None]).unwrap();
        let l1 = loss_se(&tape, &one, &te, 1.0, KlOrder::TeacherTarget).unwrap();
        assert_eq!(l1.item().unwrap(), 0.0);

        // Present class with no teacher row → domain error.
        let far = ClassReps::from_vec({
            let mut v: Vec<Option<Tensor>> = vec![None; 9];
            v[7] = Some(Tensor::vector(&[1.0, 0.0]));
            v[8] = Some(Tensor::vector(&[0.0, 1.0]));
            v
        })
        .unwrap();
        assert!(matches!(
            loss_se(&tape, &far, &te, 1.0, KlOrder::TeacherTarget),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn loss_se_matches_naive_oracle() {
        // Independent implementation: plain loops and library-free math.
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let te = TeacherEmbeddings::synthesize(21, 3, 4, 0.4).unwrap();
        for _ in 0..10 {
            let rep_vecs: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..5).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
                .collect();
            let reps = ClassReps::from_vec(
                rep_vecs.iter().map(|v| Some(Tensor::vector(v))).collect(),
            )
            .unwrap();
            let tape = Tape::new();
            let l = loss_se(&tape, &reps, &te, 0.8, KlOrder::TeacherTarget)
                .unwrap()
                .item()
                .unwrap();

            let cos = |a: &[f64], b: &[f64]| -> f64 {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
                (dot / (na * nb)).clamp(-1.0, 1.0)
            };
            let softmax = |row: &[f64], tau: f64| -> Vec<f64> {
                let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau));
                let ex: Vec<f64> = row.iter().map(|&v| ((v / tau) - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                ex.iter().map(|v| v / z).collect()
            };
            let t_rows: Vec<Vec<f64>> = (0..3)
                .map(|k| te.class_row(k).unwrap().data().to_vec())
                .collect();
            let mut expected = 0.0;
            for i in 0..3 {
                let s_row: Vec<f64> = (0..3).map(|j| cos(&rep_vecs[i], &rep_vecs[j])).collect();
                let t_row: Vec<f64> = (0..3).map(|j| cos(&t_rows[i], &t_rows[j])).collect();
                let p = softmax(&t_row, 0.8);
                let q = softmax(&s_row, 0.8);
                for z in 0..3 {
                    expected += p[z] * ((p[z] + 1e-12) / (q[z] + 1e-12)).ln();
                }
            }
            expected /= 3.0;
            assert!((l - expected).abs() <= 1e-9, "{} vs {}", l, expected);
        }
    }

    #[test]
    fn loss_se_is_class_permutation_equivariant() {
        // Permuting class ids in y together with teacher rows leaves the
        // loss unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let f_data: Vec<f64> = (0..4 * 4 * 4).map(|_| rng.gen::<f64>()).collect();
        let f = Tensor::from_vec(vec![4, 4, 4], f_data).unwrap();
        let y_data: Vec<u8> = (0..16)
            .map(|i| if i == 3 { IGNORE_LABEL } else { (i % 3) as u8 })
            .collect();
        let y = LabelMap::new(4, 4, y_data.clone()).unwrap();
        let te = TeacherEmbeddings::synthesize(70, 3, 8, 0.3).unwrap();

        let tape = Tape::new();
        let reps = map_pool(&tape, &f, &y, IGNORE_LABEL, 3, UpsampleMode::Nearest).unwrap();
        let base = loss_se(&tape, &reps, &te, 1.0, KlOrder::TeacherTarget)
            .unwrap()
            .item()
            .unwrap();

        // Permutation 0→2, 1→0, 2→1 applied to labels and teacher rows.
        let perm = [2u8, 0, 1];
        let y_perm = LabelMap::new(
            4,
            4,
            y_data
                .iter()
                .map(|&v| if v == IGNORE_LABEL { v } else { perm[v as usize] })
                .collect(),
        )
        .unwrap();
        let d = te.dim();
        let mut class_data = vec![0.0; 3 * d];
        for k in 0..3 {
            let row = te.class_row(k).unwrap();
            let dst = perm[k] as usize;
            class_data[dst * d..(dst + 1) * d].copy_from_slice(row.data());
        }
        let te_perm = TeacherEmbeddings::new(
            [
                te.modal[0].clone(),
                te.modal[1].clone(),
                te.modal[2].clone(),
                te.modal[3].clone(),
            ],
            te.scene.clone(),
            Tensor::from_vec(vec![3, d], class_data).unwrap(),
        )
        .unwrap();

        let tape2 = Tape::new();
        let reps2 = map_pool(&tape2, &f, &y_perm, IGNORE_LABEL, 3, UpsampleMode::Nearest).unwrap();
        let permuted = loss_se(&tape2, &reps2, &te_perm, 1.0, KlOrder::TeacherTarget)
            .unwrap()
            .item()
            .unwrap();
        assert!((base - permuted).abs() <= 1e-10, "{} vs {}", base, permuted);
    }

    #[test]
    fn loss_kd_adds_components() {
        let tape = Tape::new();
        let kd = loss_kd(&tape, &Tensor::scalar(0.2), &Tensor::scalar(0.3)).unwrap();
        assert!((kd.item().unwrap() - 0.5).abs() <= 1e-12);
        let zero = loss_kd(&tape, &Tensor::scalar(0.0), &Tensor::scalar(0.0)).unwrap();
        assert_eq!(zero.item().unwrap(), 0.0);
    }

    #[test]
    fn teacher_values_receive_no_gradient() {
        let tape = Tape::new();
        let te = TeacherEmbeddings::synthesize(2, 3, 8, 0.6).unwrap();
        let student = tape.watch(&Tensor::vector(&[0.4, 0.9, 0.1, 0.2]));
        let teacher_corr = te.inter_modal_corr(&Modality::ALL).unwrap();
        let l = loss_cr(&tape, &student, &teacher_corr, 1.0, KlOrder::TeacherTarget).unwrap();
        let grads = tape.backward(&l).unwrap();
        // Teacher tensors were never on the tape; wrt() has nothing for them.
        assert!(grads.wrt(&teacher_corr).is_none());
        assert!(grads.wrt(te.scene()).is_none());
        let g = grads.wrt(&student).unwrap();
        assert!(g.data().iter().any(|v| v.abs() > 1e-9));
    }

    #[test]
    fn distillation_losses_pass_grad_check() {
        use crate::tensor::grad_check;
        let te = TeacherEmbeddings::synthesize(14, 3, 8, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let maps: Vec<Tensor> = (0..3)
            .map(|_| {
                let data = (0..4 * 2 * 2).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
                Tensor::from_vec(vec![4, 2, 2], data).unwrap()
            })
            .collect();
        let y = LabelMap::new(2, 2, vec![0, 1, 2, 0]).unwrap();

        let te_cr = te.clone();
        let err_cr = grad_check(
            move |tape, xs| {
                let bundle = ModalityBundle::from_pairs(vec![
                    (Modality::R, xs[0].clone()),
                    (Modality::D, xs[1].clone()),
                    (Modality::E, xs[2].clone()),
                ])?;
                let (f_ma, _) = crate::mff::fuse(tape, &bundle, &crate::mff::FuseConfig::default())?;
                let m_f = inter_modal_corr_student(tape, &bundle, &f_ma)?;
                let m_e = te_cr.inter_modal_corr(&bundle.available())?;
                loss_cr(tape, &m_f, &m_e, 1.0, KlOrder::TeacherTarget)
            },
            &maps,
            1e-5,
        )
        .unwrap();
        assert!(err_cr <= 1e-4, "loss_cr gradient mismatch: {}", err_cr);

        let te_se = te.clone();
        let y_se = y.clone();
        let err_se = grad_check(
            move |tape, xs| {
                let reps = map_pool(tape, &xs[0], &y_se, IGNORE_LABEL, 3, UpsampleMode::Bilinear)?;
                loss_se(tape, &reps, &te_se, 1.0, KlOrder::TeacherTarget)
            },
            &maps[..1],
            1e-5,
        )
        .unwrap();
        assert!(err_se <= 1e-4, "loss_se gradient mismatch: {}", err_se);
    }
}
