//! Modality-agnostic feature fusion.
//!
//! Given per-modality feature maps, fusion runs T refinement steps. Each
//! step, relative to the current anchor:
//!
//! 1. reweight: per-pixel channel cosine against the anchor, softmax over
//!    the available modalities (temperature τ_w), convex combination →
//!    the modality-balanced map f_mb;
//! 2. select: per-pixel cosine against f_mb, argmax over modalities (ties
//!    to the lowest canonical index), gather the winning channel vector →
//!    the modality-selected map f_ms;
//! 3. aggregate: f_ma = (f_mb + f_ms)/2 (or their sum, by config).
//!
//! The anchor starts as the mean of the available maps and each step's
//! output becomes the next anchor. Selection indices are constants on the
//! tape; gradients flow through the gathered values only.

use serde::Serialize;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fmt::write_sections;
use crate::tensor::{Tape, Tensor};

/// Sensing modalities in canonical order. The order is load-bearing: it
/// fixes concat order for correlation vectors, argmax tie-breaking, and
/// subset enumeration in evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Modality {
    R,
    D,
    E,
    L,
}

pub const NUM_MODALITIES: usize = 4;

/// Default norm floor for fusion's per-pixel cosines; see
/// [`FuseConfig::cos_eps`].
pub const FUSE_COS_EPS: f64 = 1e-3;

impl Modality {
    pub const ALL: [Modality; NUM_MODALITIES] = [Modality::R, Modality::D, Modality::E, Modality::L];

    pub fn index(self) -> usize {
        match self {
            Modality::R => 0,
            Modality::D => 1,
            Modality::E => 2,
            Modality::L => 3,
        }
    }

    pub fn from_index(i: usize) -> Result<Modality> {
        Modality::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::domain(format!("modality index {} out of range", i)))
    }

    pub fn letter(self) -> char {
        match self {
            Modality::R => 'R',
            Modality::D => 'D',
            Modality::E => 'E',
            Modality::L => 'L',
        }
    }

    pub fn from_letter(c: char) -> Result<Modality> {
        match c.to_ascii_uppercase() {
            'R' => Ok(Modality::R),
            'D' => Ok(Modality::D),
            'E' => Ok(Modality::E),
            'L' => Ok(Modality::L),
            other => Err(Error::usage(format!(
                "unknown modality {:?} (expected R, D, E or L)",
                other
            ))),
        }
    }
}

/// Formats a modality subset as its canonical letter string, e.g. "RDL".
pub fn subset_label(mods: &[Modality]) -> String {
    let mut sorted: Vec<Modality> = mods.to_vec();
    sorted.sort();
    sorted.iter().map(|m| m.letter()).collect()
}

/// Parses "R,D,L" or "RDL" into a canonical, deduplicated modality list.
pub fn parse_subset(s: &str) -> Result<Vec<Modality>> {
    let mut mods = Vec::new();
    for c in s.chars() {
        if c == ',' || c.is_whitespace() {
            continue;
        }
        let m = Modality::from_letter(c)?;
        if !mods.contains(&m) {
            mods.push(m);
        }
    }
    if mods.is_empty() {
        return Err(Error::usage(format!("no modalities in {:?}", s)));
    }
    mods.sort();
    Ok(mods)
}

/// Per-modality feature maps with an availability mask. Maps live in
/// canonical slots; absent modalities are absent, never zero-filled.
#[derive(Clone, Debug)]
pub struct ModalityBundle {
    maps: [Option<Tensor>; NUM_MODALITIES],
}

impl ModalityBundle {
    pub fn new(maps: [Option<Tensor>; NUM_MODALITIES]) -> Result<ModalityBundle> {
        let mut shape: Option<Vec<usize>> = None;
        for (i, m) in maps.iter().enumerate() {
            if let Some(t) = m {
                if t.rank() != 3 {
                    return Err(Error::shape(format!(
                        "feature map for {:?} must be [C,h,w], got {:?}",
                        Modality::from_index(i)?,
                        t.shape()
                    )));
                }
                match &shape {
                    None => shape = Some(t.shape().to_vec()),
                    Some(s) if s.as_slice() == t.shape() => {}
                    Some(s) => {
                        return Err(Error::shape(format!(
                            "feature map shapes differ: {:?} vs {:?}",
                            s,
                            t.shape()
                        )));
                    }
                }
            }
        }
        if shape.is_none() {
            return Err(Error::domain("bundle needs at least one available modality"));
        }
        Ok(ModalityBundle { maps })
    }

    pub fn from_pairs(pairs: Vec<(Modality, Tensor)>) -> Result<ModalityBundle> {
        let mut maps: [Option<Tensor>; NUM_MODALITIES] = [None, None, None, None];
        for (m, t) in pairs {
            if maps[m.index()].is_some() {
                return Err(Error::domain(format!("duplicate modality {:?}", m)));
            }
            maps[m.index()] = Some(t);
        }
        ModalityBundle::new(maps)
    }

    pub fn get(&self, m: Modality) -> Option<&Tensor> {
        self.maps[m.index()].as_ref()
    }

    /// Available modalities in canonical order.
    pub fn available(&self) -> Vec<Modality> {
        Modality::ALL
            .iter()
            .copied()
            .filter(|m| self.maps[m.index()].is_some())
            .collect()
    }

    /// Shape shared by every present map.
    pub fn map_shape(&self) -> &[usize] {
        self.maps
            .iter()
            .flatten()
            .next()
            .expect("bundle is never empty")
            .shape()
    }

    /// Keeps only `keep` (mask semantics). Modalities absent from the
    /// bundle stay absent even if listed.
    pub fn restrict(&self, keep: &[Modality]) -> Result<ModalityBundle> {
        let mut maps: [Option<Tensor>; NUM_MODALITIES] = [None, None, None, None];
        for m in keep {
            maps[m.index()] = self.maps[m.index()].clone();
        }
        ModalityBundle::new(maps)
    }
}

/// How f_mb and f_ms combine into the step output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AggregateMode {
    Mean,
    Sum,
}

impl Default for AggregateMode {
    fn default() -> Self {
        AggregateMode::Mean
    }
}

impl AggregateMode {
    pub fn parse(s: &str) -> Result<AggregateMode> {
        match s {
            "mean" => Ok(AggregateMode::Mean),
            "sum" => Ok(AggregateMode::Sum),
            other => Err(Error::config(format!(
                "aggregate must be \"mean\" or \"sum\", got {:?}",
                other
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AggregateMode::Mean => "mean",
            AggregateMode::Sum => "sum",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FuseConfig {
    /// Refinement steps T (≥ 1).
    pub steps: usize,
    /// Softmax temperature for reweighting (> 0).
    pub tau_w: f64,
    pub aggregate: AggregateMode,
    /// Norm floor for the per-pixel cosines. Encoded feature columns can
    /// be exactly zero (flat patches through zero-initialised biases), and
    /// the cosine gradient grows as 1/max(‖column‖, eps); this floor keeps
    /// early-training gradients bounded. Values are unaffected for any
    /// column with a healthy norm.
    pub cos_eps: f64,
}

impl Default for FuseConfig {
    fn default() -> Self {
        FuseConfig {
            steps: 2,
            tau_w: 1.0,
            aggregate: AggregateMode::Mean,
            cos_eps: FUSE_COS_EPS,
        }
    }
}

/// Per-pixel winning modality from the selection stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMap {
    height: usize,
    width: usize,
    indices: Vec<u8>,
}

impl IndexMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> Modality {
        Modality::from_index(self.indices[y * self.width + x] as usize)
            .expect("stored indices are canonical")
    }

    pub fn indices(&self) -> &[u8] {
        &self.indices
    }

    /// Pixel counts per canonical modality.
    pub fn histogram(&self) -> [usize; NUM_MODALITIES] {
        let mut h = [0usize; NUM_MODALITIES];
        for &i in &self.indices {
            h[i as usize] += 1;
        }
        h
    }
}

/// Everything one refinement step produced, for debugging and tests.
#[derive(Clone, Debug)]
pub struct FusionTrace {
    /// Anchor the step started from (f_ma at t−1).
    pub anchor: Tensor,
    /// Raw per-pixel cosine weights w_m, one [h,w] map per available modality.
    pub weights: Vec<(Modality, Tensor)>,
    /// Softmax-normalised weights ŵ_m.
    pub norm_weights: Vec<(Modality, Tensor)>,
    /// Modality-balanced map f_mb.
    pub balanced: Tensor,
    /// Selection similarities C_S, one [h,w] map per available modality.
    pub similarity: Vec<(Modality, Tensor)>,
    /// Winning modality per pixel.
    pub index_map: IndexMap,
    /// Modality-selected map f_ms.
    pub selected: Tensor,
    /// Step output f_ma at t.
    pub output: Tensor,
}

impl FusionTrace {
    /// Compact JSON: shapes plus the per-modality histogram of the index
    /// map. Full tensors go through [`FusionTrace::write_tensors`].
    pub fn summary_json(&self) -> serde_json::Value {
        let hist = self.index_map.histogram();
        let mut hist_obj = serde_json::Map::new();
        for m in Modality::ALL {
            hist_obj.insert(
                m.letter().to_string(),
                serde_json::json!(hist[m.index()]),
            );
        }
        serde_json::json!({
            "map_shape": self.output.shape(),
            "available": self.weights.iter().map(|(m, _)| m.letter().to_string()).collect::<Vec<_>>(),
            "index_histogram": serde_json::Value::Object(hist_obj),
        })
    }

    /// Dumps the step's tensors in the binary tensor container.
    pub fn write_tensors(&self, path: &Path) -> Result<()> {
        let mut sections = vec![
            ("anchor".to_string(), self.anchor.detach()),
            ("f_mb".to_string(), self.balanced.detach()),
            ("f_ms".to_string(), self.selected.detach()),
            ("f_ma".to_string(), self.output.detach()),
            (
                "m_i".to_string(),
                Tensor::from_vec(
                    vec![self.index_map.height, self.index_map.width],
                    self.index_map.indices.iter().map(|&v| v as f64).collect(),
                )?,
            ),
        ];
        for (m, t) in &self.weights {
            sections.push((format!("w.{}", m.letter()), t.detach()));
        }
        for (m, t) in &self.norm_weights {
            sections.push((format!("w_hat.{}", m.letter()), t.detach()));
        }
        for (m, t) in &self.similarity {
            sections.push((format!("c_s.{}", m.letter()), t.detach()));
        }
        write_sections(path, &sections)
    }
}

/// Mean over the available feature maps; the t = 0 anchor.
pub fn init_anchor(tape: &Tape, bundle: &ModalityBundle) -> Result<Tensor> {
    let available = bundle.available();
    let mut acc: Option<Tensor> = None;
    for m in &available {
        let f = bundle.get(*m).expect("available");
        acc = Some(match acc {
            None => f.clone(),
            Some(a) => tape.add(&a, f)?,
        });
    }
    let sum = acc.expect("bundle is never empty");
    tape.mul_scalar(&sum, 1.0 / available.len() as f64)
}

/// Cosine re-weighting against an anchor.
///
/// Returns the raw weight maps w_m, the normalised maps ŵ_m (softmax over
/// available modalities at each pixel), and the balanced map f_mb.
pub fn reweight(
    tape: &Tape,
    bundle: &ModalityBundle,
    anchor: &Tensor,
    tau_w: f64,
    eps: f64,
) -> Result<(Vec<(Modality, Tensor)>, Vec<(Modality, Tensor)>, Tensor)> {
    if anchor.shape() != bundle.map_shape() {
        return Err(Error::shape(format!(
            "anchor shape {:?} does not match maps {:?}",
            anchor.shape(),
            bundle.map_shape()
        )));
    }
    let available = bundle.available();
    let (c, h, w) = dims3(bundle.map_shape());
    let s = h * w;
    let anchor_flat = tape.reshape(anchor, vec![c, s])?;

    let mut flats = Vec::with_capacity(available.len());
    let mut raw_rows = Vec::with_capacity(available.len());
    for m in &available {
        let flat = tape.reshape(bundle.get(*m).expect("available"), vec![c, s])?;
        let cos = tape.cosine_cols(&flat, &anchor_flat, eps)?; // [S]
        flats.push(flat);
        raw_rows.push(cos);
    }
    let raw_refs: Vec<&Tensor> = raw_rows.iter().collect();
    let stacked = tape.stack0(&raw_refs)?; // [M,S]
    let norm = tape.softmax(&stacked, 0, tau_w)?;

    let mut balanced: Option<Tensor> = None;
    for (i, flat) in flats.iter().enumerate() {
        let wrow = tape.reshape(&tape.row(&norm, i)?, vec![1, s])?;
        let term = tape.mul(flat, &wrow)?;
        balanced = Some(match balanced {
            None => term,
            Some(b) => tape.add(&b, &term)?,
        });
    }
    let f_mb = tape.reshape(&balanced.expect("at least one modality"), vec![c, h, w])?;

    let mut weights = Vec::with_capacity(available.len());
    let mut norm_weights = Vec::with_capacity(available.len());
    for (i, m) in available.iter().enumerate() {
        weights.push((*m, tape.reshape(&raw_rows[i], vec![h, w])?));
        norm_weights.push((*m, tape.reshape(&tape.row(&norm, i)?, vec![h, w])?));
    }
    Ok((weights, norm_weights, f_mb))
}

/// Max-similarity index selection against f_mb.
///
/// Returns the similarity maps C_S, the per-pixel winning-modality map, and
/// the gathered map f_ms. Ties break to the lowest canonical index; the
/// winner indices are constants for the backward pass.
pub fn select(
    tape: &Tape,
    bundle: &ModalityBundle,
    f_mb: &Tensor,
    eps: f64,
) -> Result<(Vec<(Modality, Tensor)>, IndexMap, Tensor)> {
    if f_mb.shape() != bundle.map_shape() {
        return Err(Error::shape(format!(
            "f_mb shape {:?} does not match maps {:?}",
            f_mb.shape(),
            bundle.map_shape()
        )));
    }
    let available = bundle.available();
    let (c, h, w) = dims3(bundle.map_shape());
    let s = h * w;
    let mb_flat = tape.reshape(f_mb, vec![c, s])?;

    let mut flats = Vec::with_capacity(available.len());
    let mut sims = Vec::with_capacity(available.len());
    for m in &available {
        let flat = tape.reshape(bundle.get(*m).expect("available"), vec![c, s])?;
        let cos = tape.cosine_cols(&flat, &mb_flat, eps)?;
        flats.push(flat);
        sims.push(cos);
    }

    // Available list is in canonical order, so keeping the first strict
    // maximum realises the lowest-index tie-break.
    let mut winners = vec![0usize; s];
    for px in 0..s {
        let mut best = 0usize;
        for i in 1..sims.len() {
            if sims[i].data()[px] > sims[best].data()[px] {
                best = i;
            }
        }
        winners[px] = best;
    }

    let flat_refs: Vec<&Tensor> = flats.iter().collect();
    let gathered = tape.gather_cols(&flat_refs, &winners)?;
    let f_ms = tape.reshape(&gathered, vec![c, h, w])?;

    let indices: Vec<u8> = winners
        .iter()
        .map(|&i| available[i].index() as u8)
        .collect();
    let index_map = IndexMap {
        height: h,
        width: w,
        indices,
    };
    let similarity = available
        .iter()
        .zip(&sims)
        .map(|(m, t)| Ok((*m, tape.reshape(t, vec![h, w])?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((similarity, index_map, f_ms))
}

/// Combines the balanced and selected maps into the step output.
pub fn aggregate(tape: &Tape, f_mb: &Tensor, f_ms: &Tensor, mode: AggregateMode) -> Result<Tensor> {
    if f_mb.shape() != f_ms.shape() {
        return Err(Error::shape(format!(
            "aggregate shape mismatch: {:?} vs {:?}",
            f_mb.shape(),
            f_ms.shape()
        )));
    }
    let sum = tape.add(f_mb, f_ms)?;
    match mode {
        AggregateMode::Mean => tape.mul_scalar(&sum, 0.5),
        AggregateMode::Sum => Ok(sum),
    }
}

/// The full pipeline: T refinement steps starting from the mean anchor.
pub fn fuse(
    tape: &Tape,
    bundle: &ModalityBundle,
    cfg: &FuseConfig,
) -> Result<(Tensor, Vec<FusionTrace>)> {
    if cfg.steps < 1 {
        return Err(Error::domain(format!(
            "fusion needs at least one step, got {}",
            cfg.steps
        )));
    }
    let mut anchor = init_anchor(tape, bundle)?;
    let mut traces = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (weights, norm_weights, f_mb) = reweight(tape, bundle, &anchor, cfg.tau_w, cfg.cos_eps)?;
        let (similarity, index_map, f_ms) = select(tape, bundle, &f_mb, cfg.cos_eps)?;
        let output = aggregate(tape, &f_mb, &f_ms, cfg.aggregate)?;
        traces.push(FusionTrace {
            anchor: anchor.clone(),
            weights,
            norm_weights,
            balanced: f_mb,
            similarity,
            index_map,
            selected: f_ms.clone(),
            output: output.clone(),
        });
        anchor = output;
    }
    Ok((anchor, traces))
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2])
}
