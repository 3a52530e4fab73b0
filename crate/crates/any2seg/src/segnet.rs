//! Toy shared-weight patch encoder and per-pixel segmentation head.
//!
//! One parameter set is applied to every modality. A raster [3,H,W] is cut
//! into non-overlapping p×p patches, each flattened to a 3p² vector and
//! passed through linear → ReLU → linear, giving a [C, H/p, W/p] feature
//! map. The head is one linear layer C → K applied per spatial location.
//!
//! Predictions live at H/p resolution: labels are majority-downsampled for
//! the loss and predictions nearest-upsampled for metrics.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fmt::{write_sections, SectionMap};
use crate::label::{LabelMap, IGNORE_LABEL};
use crate::tensor::{Tape, Tensor};

/// Channels per modality raster (RGB-like 3 for every sensor).
pub const MODALITY_CHANNELS: usize = 3;

/// Model hyper-parameters: patch size, embedding width, class count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub patch: usize,
    pub width: usize,
    pub classes: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            patch: 4,
            width: 32,
            classes: 4,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.width == 0 || self.classes < 2 {
            return Err(Error::domain(format!(
                "bad model dims: patch {}, width {}, classes {}",
                self.patch, self.width, self.classes
            )));
        }
        Ok(())
    }

    fn patch_dim(&self) -> usize {
        MODALITY_CHANNELS * self.patch * self.patch
    }
}

/// Two linear layers with bias, shared across modalities.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub patch: usize,
    pub width: usize,
    pub w1: Tensor, // [3p², C]
    pub b1: Tensor, // [C]
    pub w2: Tensor, // [C, C]
    pub b2: Tensor, // [C]
}

/// One linear layer C → K applied per location.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub w: Tensor, // [C, K]
    pub b: Tensor, // [K]
}

/// Encoder plus head; the unit that checkpoints and training steps move.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub enc: EncoderParams,
    pub head: HeadParams,
}

fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound)
        .collect();
    Tensor::from_vec(vec![rows, cols], data).expect("sized by construction")
}

/// Draws fresh parameters: weights uniform in [−s, s] with
/// s = sqrt(6/(fan_in+fan_out)), biases zero. Matrices are drawn in a fixed
/// order (w1, w2, head.w) so a seed pins every bit.
pub fn init_params(seed: u64, dims: &ModelDims) -> Result<(EncoderParams, HeadParams)> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, c, k) = (dims.patch_dim(), dims.width, dims.classes);
    let w1 = uniform_matrix(&mut rng, d, c, xavier_bound(d, c));
    let w2 = uniform_matrix(&mut rng, c, c, xavier_bound(c, c));
    let hw = uniform_matrix(&mut rng, c, k, xavier_bound(c, k));
    Ok((
        EncoderParams {
            patch: dims.patch,
            width: c,
            w1,
            b1: Tensor::zeros(vec![c]),
            w2,
            b2: Tensor::zeros(vec![c]),
        },
        HeadParams {
            w: hw,
            b: Tensor::zeros(vec![k]),
        },
    ))
}

impl ModelParams {
    pub fn init(seed: u64, dims: &ModelDims) -> Result<ModelParams> {
        let (enc, head) = init_params(seed, dims)?;
        Ok(ModelParams { enc, head })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            patch: self.enc.patch,
            width: self.enc.width,
            classes: self.head.w.shape()[1],
        }
    }

    /// Registers every parameter as a leaf on `tape`, in a fixed order.
    pub fn watched(&self, tape: &Tape) -> ModelParams {
        ModelParams {
            enc: EncoderParams {
                patch: self.enc.patch,
                width: self.enc.width,
                w1: tape.watch(&self.enc.w1),
                b1: tape.watch(&self.enc.b1),
                w2: tape.watch(&self.enc.w2),
                b2: tape.watch(&self.enc.b2),
            },
            head: HeadParams {
                w: tape.watch(&self.head.w),
                b: tape.watch(&self.head.b),
            },
        }
    }

    /// Parameter tensors with their checkpoint section names.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("enc.w1", &self.enc.w1),
            ("enc.b1", &self.enc.b1),
            ("enc.w2", &self.enc.w2),
            ("enc.b2", &self.enc.b2),
            ("head.w", &self.head.w),
            ("head.b", &self.head.b),
        ]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dims = self.dims();
        let mut sections = vec![(
            "meta".to_string(),
            Tensor::vector(&[dims.patch as f64, dims.width as f64, dims.classes as f64]),
        )];
        for (name, t) in self.named_tensors() {
            sections.push((name.to_string(), t.detach()));
        }
        write_sections(path, &sections)
    }

    pub fn load(path: &Path) -> Result<ModelParams> {
        let map = SectionMap::read(path)?;
        let meta = map.get_shaped("meta", &[3])?;
        let as_dim = |v: f64, what: &str| -> Result<usize> {
            if v.fract() != 0.0 || v < 1.0 || v > 1e9 {
                return Err(Error::format(format!("bad {} {} in checkpoint meta", what, v)));
            }
            Ok(v as usize)
        };
        let dims = ModelDims {
            patch: as_dim(meta.data()[0], "patch")?,
            width: as_dim(meta.data()[1], "width")?,
            classes: as_dim(meta.data()[2], "classes")?,
        };
        dims.validate()
            .map_err(|e| Error::format(format!("checkpoint meta: {}", e)))?;
        let (d, c, k) = (dims.patch_dim(), dims.width, dims.classes);
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = map.get_shaped(name, shape)?;
            if t.has_non_finite() {
                return Err(Error::format(format!(
                    "checkpoint section {:?} holds non-finite values",
                    name
                )));
            }
            Ok(t.detach())
        };
        Ok(ModelParams {
            enc: EncoderParams {
                patch: dims.patch,
                width: c,
                w1: fetch("enc.w1", &[d, c])?,
                b1: fetch("enc.b1", &[c])?,
                w2: fetch("enc.w2", &[c, c])?,
                b2: fetch("enc.b2", &[c])?,
            },
            head: HeadParams {
                w: fetch("head.w", &[c, k])?,
                b: fetch("head.b", &[k])?,
            },
        })
    }
}

/// Rearranges [3,H,W] into a patch matrix [N, 3p²] with N = (H/p)·(W/p).
///
/// Column order inside a patch is channel-major, then row, then column.
/// The backward pass is the inverse permutation, so encoding stays
/// differentiable with respect to the raster as well as the weights.
pub fn extract_patches(tape: &Tape, x: &Tensor, p: usize) -> Result<Tensor> {
    if x.rank() != 3 || x.shape()[0] != MODALITY_CHANNELS {
        return Err(Error::shape(format!(
            "expected a [3,H,W] raster, got {:?}",
            x.shape()
        )));
    }
    let (h, w) = (x.shape()[1], x.shape()[2]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!(
            "extent {}x{} not divisible by patch {}",
            h, w, p
        )));
    }
    let (hp, wp) = (h / p, w / p);
    let n = hp * wp;
    let d = MODALITY_CHANNELS * p * p;
    // out[(py*wp+px)*d + c*p*p + dy*p + dx] = x[(c*h + py*p+dy)*w + px*p+dx]
    let mut src = vec![0usize; n * d];
    for py in 0..hp {
        for px in 0..wp {
            let patch = py * wp + px;
            for c in 0..MODALITY_CHANNELS {
                for dy in 0..p {
                    for dx in 0..p {
                        src[patch * d + c * p * p + dy * p + dx] =
                            (c * h + py * p + dy) * w + px * p + dx;
                    }
                }
            }
        }
    }
    let xd = x.data();
    let data: Vec<f64> = src.iter().map(|&i| xd[i]).collect();
    let total = x.len();
    let back = move |g: &[f64]| {
        let mut gx = vec![0.0; total];
        for (out_i, &in_i) in src.iter().enumerate() {
            gx[in_i] = g[out_i];
        }
        vec![gx]
    };
    tape.emit(&[x], vec![n, d], data, Box::new(back))
}

/// Shared-weight patch encoder: [3,H,W] → [C, H/p, W/p].
pub fn encode(tape: &Tape, x: &Tensor, enc: &EncoderParams) -> Result<Tensor> {
    let c = enc.width;
    let d = MODALITY_CHANNELS * enc.patch * enc.patch;
    if enc.w1.shape() != [d, c] {
        return Err(Error::shape(format!(
            "encoder w1 shape {:?} does not match patch {} width {}",
            enc.w1.shape(),
            enc.patch,
            c
        )));
    }
    let (h, w) = (x.shape().get(1).copied().unwrap_or(0), x.shape().get(2).copied().unwrap_or(0));
    let patches = extract_patches(tape, x, enc.patch)?;
    let b1 = tape.reshape(&enc.b1, vec![1, c])?;
    let b2 = tape.reshape(&enc.b2, vec![1, c])?;
    let h1 = tape.relu(&tape.add(&tape.matmul(&patches, &enc.w1)?, &b1)?)?;
    let h2 = tape.add(&tape.matmul(&h1, &enc.w2)?, &b2)?;
    let ft = tape.transpose2(&h2)?; // [C, N]
    tape.reshape(&ft, vec![c, h / enc.patch, w / enc.patch])
}

/// Per-location affine map [C,h,w] → [K,h,w]; no nonlinearity.
pub fn seg_head(tape: &Tape, f: &Tensor, head: &HeadParams) -> Result<Tensor> {
    if f.rank() != 3 {
        return Err(Error::shape(format!(
            "seg_head expects [C,h,w], got {:?}",
            f.shape()
        )));
    }
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    if head.w.shape()[0] != c {
        return Err(Error::shape(format!(
            "head expects {} channels, feature map has {}",
            head.w.shape()[0],
            c
        )));
    }
    let k = head.w.shape()[1];
    let flat = tape.reshape(f, vec![c, h * w])?;
    let cols = tape.transpose2(&flat)?; // [S, C]
    let b = tape.reshape(&head.b, vec![1, k])?;
    let logits = tape.add(&tape.matmul(&cols, &head.w)?, &b)?; // [S, K]
    let kt = tape.transpose2(&logits)?; // [K, S]
    tape.reshape(&kt, vec![k, h, w])
}

/// Majority vote over each p×p block; ignored pixels do not vote. Ties go
/// to the lowest class id; an all-ignored block stays ignored.
pub fn downsample_labels(y: &LabelMap, p: usize) -> Result<LabelMap> {
    if p == 0 || y.height() % p != 0 || y.width() % p != 0 {
        return Err(Error::shape(format!(
            "labels {}x{} not divisible by patch {}",
            y.height(),
            y.width(),
            p
        )));
    }
    let (hp, wp) = (y.height() / p, y.width() / p);
    let mut out = LabelMap::filled(hp, wp, IGNORE_LABEL);
    for by in 0..hp {
        for bx in 0..wp {
            let mut counts = [0u32; 256];
            for dy in 0..p {
                for dx in 0..p {
                    let v = y.get(by * p + dy, bx * p + dx);
                    if v != IGNORE_LABEL {
                        counts[v as usize] += 1;
                    }
                }
            }
            let mut best: Option<(u8, u32)> = None;
            for (k, &n) in counts.iter().enumerate() {
                if n > 0 && best.map_or(true, |(_, bn)| n > bn) {
                    best = Some((k as u8, n));
                }
            }
            if let Some((k, _)) = best {
                out.set(by, bx, k);
            }
        }
    }
    Ok(out)
}

/// Replicates each prediction over its p×p block.
pub fn upsample_labels(pred: &LabelMap, p: usize) -> LabelMap {
    let (h, w) = (pred.height() * p, pred.width() * p);
    let mut out = LabelMap::filled(h, w, IGNORE_LABEL);
    for y in 0..h {
        for x in 0..w {
            out.set(y, x, pred.get(y / p, x / p));
        }
    }
    out
}

/// Per-location argmax of [K,h,w] logits; ties go to the lowest class id.
pub fn argmax_classes(logits: &Tensor) -> Result<LabelMap> {
    if logits.rank() != 3 {
        return Err(Error::shape(format!(
            "argmax expects [K,h,w], got {:?}",
            logits.shape()
        )));
    }
    let (k, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    if k == 0 || k > IGNORE_LABEL as usize {
        return Err(Error::domain(format!("class count {} out of range", k)));
    }
    let d = logits.data();
    let s = h * w;
    let mut out = LabelMap::filled(h, w, 0);
    for px in 0..s {
        let mut best = 0usize;
        for c in 1..k {
            if d[c * s + px] > d[best * s + px] {
                best = c;
            }
        }
        out.set(px / w, px % w, best as u8);
    }
    Ok(out)
}
