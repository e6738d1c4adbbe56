//! Desk-scale victim classifiers and the synthetic shapes task used to
//! pretrain them.
//!
//! `small-cnn`: conv 3x3 (c -> 8) -> relu -> maxpool 2 -> conv 3x3 (8 -> 16)
//! -> relu -> maxpool 2 -> dense. Convolutions are unpadded.
//!
//! `patch-transformer`: linear patch embedding (dim 32) + class token +
//! learned positions, two pre-norm blocks of 4-head self-attention and a
//! 32 -> 64 -> 32 relu MLP, then a dense head on the class token.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use xmar_tensor::{AdamState, Checkpoint, Element, Padding, Tape, Tensor, Var};

use crate::error::{Result, XmarError};
use crate::image::ImageSpec;

pub const DEFAULT_VICTIM_PATCH: usize = 8;
pub const EMBED_DIM: usize = 32;
pub const HEADS: usize = 4;
pub const MLP_DIM: usize = 64;
pub const BLOCKS: usize = 2;
const LN_EPS: f64 = 1e-5;
const TOKEN_INIT: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    SmallCnn,
    PatchTransformer,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::SmallCnn => "small-cnn",
            Arch::PatchTransformer => "patch-transformer",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = XmarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small-cnn" => Ok(Arch::SmallCnn),
            "patch-transformer" => Ok(Arch::PatchTransformer),
            _ => Err(XmarError::invalid(format!(
                "unknown architecture {s:?} (expected small-cnn or patch-transformer)"
            ))),
        }
    }
}

fn cnn_features(image: ImageSpec) -> usize {
    let side = |n: usize| ((n - 2) / 2 - 2) / 2;
    16 * side(image.h) * side(image.w)
}

fn check_geometry(arch: Arch, image: ImageSpec, patch: usize) -> Result<()> {
    match arch {
        Arch::SmallCnn if image.h < 16 || image.w < 16 => Err(XmarError::invalid(format!(
            "small-cnn needs images of at least 16x16, got {}x{}",
            image.h, image.w
        ))),
        Arch::PatchTransformer if patch == 0 || image.h % patch != 0 || image.w % patch != 0 => {
            Err(XmarError::invalid(format!(
                "patch-transformer patch {patch} does not divide {}x{}",
                image.h, image.w
            )))
        }
        _ => Ok(()),
    }
}

/// `(name, shape, fan_in)` for every weight, in storage order. `fan_in` is
/// zero for tensors that are not fan-in initialized.
fn layout(arch: Arch, image: ImageSpec, num_labels: usize, patch: usize) -> Vec<(String, Vec<usize>, usize)> {
    let mut out = Vec::new();
    let mut add = |name: &str, shape: Vec<usize>, fan_in: usize| out.push((name.to_string(), shape, fan_in));
    match arch {
        Arch::SmallCnn => {
            let c = image.c;
            add("conv1.w", vec![3, 3, c, 8], 9 * c);
            add("conv1.b", vec![8], 9 * c);
            add("conv2.w", vec![3, 3, 8, 16], 72);
            add("conv2.b", vec![16], 72);
            let f = cnn_features(image);
            add("head.w", vec![f, num_labels], f);
            add("head.b", vec![num_labels], f);
        }
        Arch::PatchTransformer => {
            let d = EMBED_DIM;
            let pin = patch * patch * image.c;
            let tokens = (image.h / patch) * (image.w / patch);
            add("embed.w", vec![pin, d], pin);
            add("embed.b", vec![d], pin);
            add("cls", vec![1, d], 0);
            add("pos", vec![tokens + 1, d], 0);
            for b in 0..BLOCKS {
                add(&format!("block{b}.ln1.g"), vec![d], 0);
                add(&format!("block{b}.ln1.b"), vec![d], 0);
                add(&format!("block{b}.qkv.w"), vec![d, 3 * d], d);
                add(&format!("block{b}.qkv.b"), vec![3 * d], d);
                add(&format!("block{b}.proj.w"), vec![d, d], d);
                add(&format!("block{b}.proj.b"), vec![d], d);
                add(&format!("block{b}.ln2.g"), vec![d], 0);
                add(&format!("block{b}.ln2.b"), vec![d], 0);
                add(&format!("block{b}.mlp1.w"), vec![d, MLP_DIM], d);
                add(&format!("block{b}.mlp1.b"), vec![MLP_DIM], d);
                add(&format!("block{b}.mlp2.w"), vec![MLP_DIM, d], MLP_DIM);
                add(&format!("block{b}.mlp2.b"), vec![d], MLP_DIM);
            }
            add("head.w", vec![d, num_labels], d);
            add("head.b", vec![num_labels], d);
        }
    }
    out
}

/// Closed-form parameter count.
///
/// small-cnn: `(9c*8 + 8) + (72*16 + 16) + (F + 1) L` with
/// `F = 16 * s(h) * s(w)`, `s(n) = floor((floor((n - 2) / 2) - 2) / 2)`.
///
/// patch-transformer with `P = p*p*c`, `N = (h/p)(w/p)`, `D = 32`:
/// `(P + 1) D + D + (N + 1) D + 2 (4D + 3D^2 + 3D + D^2 + D + 2D^2 + 2D + 2D^2 + D) + (D + 1) L`.
pub fn param_count(arch: Arch, image: ImageSpec, num_labels: usize, patch: usize) -> usize {
    let l = num_labels;
    match arch {
        Arch::SmallCnn => (9 * image.c * 8 + 8) + (72 * 16 + 16) + (cnn_features(image) + 1) * l,
        Arch::PatchTransformer => {
            let d = EMBED_DIM;
            let p = patch * patch * image.c;
            let n = (image.h / patch) * (image.w / patch);
            let block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * MLP_DIM + MLP_DIM) + (MLP_DIM * d + d);
            (p + 1) * d + d + (n + 1) * d + BLOCKS * block + (d + 1) * l
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainRecord {
    pub seed: u64,
    pub epochs: usize,
    pub heldout_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VictimModel {
    arch: Arch,
    image: ImageSpec,
    num_labels: usize,
    patch: usize,
    weights: Vec<(String, Tensor<f32>)>,
    frozen: bool,
    init_seed: u64,
    pretrain: Option<PretrainRecord>,
}

/// Tape handles of a victim's weights, in storage order.
#[derive(Clone, Debug)]
pub struct BoundVictim {
    vars: Vec<Var>,
}

impl BoundVictim {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub fn build_victim(arch: Arch, image: ImageSpec, num_labels: usize, seed: u64) -> Result<VictimModel> {
    build_victim_with_patch(arch, image, num_labels, DEFAULT_VICTIM_PATCH, seed)
}

/// Fan-in uniform init: weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
/// biases `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; layernorm gains 1 and
/// offsets 0; class token and positions `U(-0.02, 0.02)`.
pub fn build_victim_with_patch(
    arch: Arch,
    image: ImageSpec,
    num_labels: usize,
    patch: usize,
    seed: u64,
) -> Result<VictimModel> {
    check_geometry(arch, image, patch)?;
    if num_labels == 0 {
        return Err(XmarError::invalid("victim needs at least one label"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = layout(arch, image, num_labels, patch)
        .into_iter()
        .map(|(name, shape, fan_in)| {
            let t = if name.ends_with(".g") {
                Tensor::full(shape, 1.0)?
            } else if name.contains(".ln") {
                Tensor::zeros(shape)?
            } else {
                let bound = match fan_in {
                    0 => TOKEN_INIT,
                    n if name.ends_with(".w") => (6.0 / n as f64).sqrt(),
                    n => 1.0 / (n as f64).sqrt(),
                };
                Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound) as f32)?
            };
            Ok((name, t))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VictimModel {
        arch,
        image,
        num_labels,
        patch: if arch == Arch::PatchTransformer { patch } else { 0 },
        weights,
        frozen: false,
        init_seed: seed,
        pretrain: None,
    })
}

impl VictimModel {
    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn image_spec(&self) -> ImageSpec {
        self.image
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// Internal patch size (transformer only; 0 for the CNN).
    pub fn victim_patch(&self) -> usize {
        self.patch
    }

    /// Granularity the reprogramming patch size should be a multiple of.
    pub fn patch_unit(&self) -> usize {
        match self.arch {
            Arch::SmallCnn => DEFAULT_VICTIM_PATCH,
            Arch::PatchTransformer => self.patch,
        }
    }

    /// Number of internal patch tokens, excluding the class token.
    pub fn internal_tokens(&self) -> Option<usize> {
        (self.arch == Arch::PatchTransformer).then(|| (self.image.h / self.patch) * (self.image.w / self.patch))
    }

    pub fn weights(&self) -> &[(String, Tensor<f32>)] {
        &self.weights
    }

    pub fn weight(&self, name: &str) -> Option<&Tensor<f32>> {
        self.weights.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn pretrain_record(&self) -> Option<PretrainRecord> {
        self.pretrain
    }

    /// Zeroes the final dense layer.
    pub fn zero_head(&mut self) -> Result<()> {
        if self.frozen {
            return Err(XmarError::invalid("cannot modify a frozen victim"));
        }
        for (name, t) in &mut self.weights {
            if name.starts_with("head.") {
                t.data_mut().fill(0.0);
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian weight bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.weights {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Places the weights on a tape, as parameters when `trainable`.
    pub fn bind<T: Element>(&self, tape: &mut Tape<T>, trainable: bool) -> Result<BoundVictim> {
        let vars = self
            .weights
            .iter()
            .map(|(_, t)| tape.leaf(T::from_f32_tensor(t), trainable))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(BoundVictim { vars })
    }

    fn var(&self, bound: &BoundVictim, name: &str) -> Var {
        let i = self
            .weights
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("victim has no weight {name}"));
        bound.vars[i]
    }

    /// Logits `[B, L]` for images `[B, h, w, c]`.
    pub fn forward_on<T: Element>(&self, tape: &mut Tape<T>, bound: &BoundVictim, images: Var) -> Result<Var> {
        let shape = tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1..] != self.image.shape() {
            return Err(XmarError::invalid(format!(
                "victim expects [B, {}, {}, {}] images, got {shape:?}",
                self.image.h, self.image.w, self.image.c
            )));
        }
        if tape.is_checked() {
            let one = T::one();
            if let Some(v) = tape.value(images).data().iter().find(|v| !(**v >= -one && **v <= one)) {
                return Err(XmarError::invalid(format!("pixel value {v} outside [-1, 1]")));
            }
        }
        let batch = shape[0];
        let w = |name: &str| self.var(bound, name);
        match self.arch {
            Arch::SmallCnn => {
                let mut x = images;
                for layer in ["conv1", "conv2"] {
                    x = tape.conv2d(x, w(&format!("{layer}.w")), 1, Padding::Valid)?;
                    x = tape.add_broadcast(x, w(&format!("{layer}.b")))?;
                    x = tape.relu(x)?;
                    x = tape.maxpool2d(x, 2)?;
                }
                let features = tape.reshape(x, &[batch, cnn_features(self.image)])?;
                Ok(tape.dense(features, w("head.w"), Some(w("head.b")))?)
            }
            Arch::PatchTransformer => self.transformer(tape, bound, images, batch),
        }
    }

    fn transformer<T: Element>(&self, tape: &mut Tape<T>, bound: &BoundVictim, images: Var, batch: usize) -> Result<Var> {
        let w = |name: &str| self.var(bound, name);
        let ImageSpec { h, w: width, c } = self.image;
        let p = self.patch;
        let n = (h / p) * (width / p);
        let s = n + 1;
        let d = EMBED_DIM;
        let dh = d / HEADS;

        let grid = tape.reshape(images, &[batch, h / p, p, width / p, p, c])?;
        let grid = tape.permute(grid, &[0, 1, 3, 2, 4, 5])?;
        let patches = tape.reshape(grid, &[batch * n, p * p * c])?;
        let tokens = tape.dense(patches, w("embed.w"), Some(w("embed.b")))?;
        let tokens = tape.reshape(tokens, &[batch, n, d])?;
        let cls = tape.gather_rows(w("cls"), &vec![0; batch])?;
        let cls = tape.reshape(cls, &[batch, 1, d])?;
        let x = tape.concat(&[cls, tokens], 1)?;
        let mut x = tape.add_broadcast(x, w("pos"))?;

        for b in 0..BLOCKS {
            let name = |part: &str| format!("block{b}.{part}");
            let hn = tape.layernorm(x, w(&name("ln1.g")), w(&name("ln1.b")), LN_EPS)?;
            let qkv = tape.dense(hn, w(&name("qkv.w")), Some(w(&name("qkv.b"))))?;
            let qkv = tape.reshape(qkv, &[batch, s, 3, HEADS, dh])?;
            let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
            let mut parts = [images; 3];
            for (i, part) in parts.iter_mut().enumerate() {
                let picked = tape.gather_rows(qkv, &[i])?;
                *part = tape.reshape(picked, &[batch * HEADS, s, dh])?;
            }
            let [q, k, v] = parts;
            let kt = tape.permute(k, &[0, 2, 1])?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let attn = tape.softmax(scores, 2)?;
            let ctx = tape.matmul(attn, v)?;
            let ctx = tape.reshape(ctx, &[batch, HEADS, s, dh])?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[batch, s, d])?;
            let out = tape.dense(ctx, w(&name("proj.w")), Some(w(&name("proj.b"))))?;
            x = tape.add(x, out)?;

            let hn = tape.layernorm(x, w(&name("ln2.g")), w(&name("ln2.b")), LN_EPS)?;
            let hidden = tape.dense(hn, w(&name("mlp1.w")), Some(w(&name("mlp1.b"))))?;
            let hidden = tape.relu(hidden)?;
            let out = tape.dense(hidden, w(&name("mlp2.w")), Some(w(&name("mlp2.b"))))?;
            x = tape.add(x, out)?;
        }

        let by_position = tape.permute(x, &[1, 0, 2])?;
        let cls = tape.gather_rows(by_position, &[0])?;
        let cls = tape.reshape(cls, &[batch, d])?;
        Ok(tape.dense(cls, w("head.w"), Some(w("head.b")))?)
    }

    /// Logits for `[B, h, w, c]` (or a single `[h, w, c]`) images.
    pub fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let images = if images.rank() == 3 {
            let mut s = vec![1];
            s.extend_from_slice(images.shape());
            images.reshape(s)?
        } else {
            images.clone()
        };
        let mut tape = Tape::<f32>::new();
        let bound = self.bind(&mut tape, false)?;
        let x = tape.constant(images)?;
        let out = self.forward_on(&mut tape, &bound, x)?;
        Ok(tape.value(out).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "victim");
        ck.set_meta("arch", self.arch.name());
        ck.set_meta("image", self.image.to_json());
        ck.set_meta("num_labels", self.num_labels);
        ck.set_meta("victim_patch", self.patch);
        ck.set_meta("frozen", self.frozen);
        ck.set_meta("seed", self.init_seed);
        if let Some(p) = self.pretrain {
            ck.set_meta("pretrain_seed", p.seed);
            ck.set_meta("pretrain_epochs", p.epochs);
            ck.set_meta("heldout_accuracy", p.heldout_accuracy);
        }
        for (name, t) in &self.weights {
            ck.push_array(name, t.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta_str("kind")? != "victim" {
            return Err(XmarError::invalid("checkpoint does not hold a victim"));
        }
        let arch: Arch = ck.meta_str("arch")?.parse()?;
        let image = ImageSpec::from_json(ck.meta_value("image")?)?;
        let num_labels = ck.meta_u64("num_labels")? as usize;
        let stored_patch = ck.meta_u64("victim_patch")? as usize;
        let patch = if arch == Arch::PatchTransformer { stored_patch } else { DEFAULT_VICTIM_PATCH };
        check_geometry(arch, image, patch)?;
        let weights = layout(arch, image, num_labels, patch)
            .into_iter()
            .map(|(name, shape, _)| {
                let t = ck.array(&name)?;
                if t.shape() != shape {
                    return Err(XmarError::invalid(format!("weight {name} has shape {:?}, expected {shape:?}", t.shape())));
                }
                Ok((name, t.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let pretrain = match ck.meta_u64("pretrain_seed") {
            Ok(seed) => Some(PretrainRecord {
                seed,
                epochs: ck.meta_u64("pretrain_epochs")? as usize,
                heldout_accuracy: ck.meta_f64("heldout_accuracy")?,
            }),
            Err(_) => None,
        };
        Ok(Self {
            arch,
            image,
            num_labels,
            patch: stored_patch,
            weights,
            frozen: ck.meta_value("frozen")?.as_bool().unwrap_or(true),
            init_seed: ck.meta_u64("seed")?,
            pretrain,
        })
    }
}

/// Procedural 10-shape image classification task. Sample `i` has label
/// `i % num_classes` and is a pure function of `(seed, i)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticImageTask {
    pub seed: u64,
    pub num_classes: usize,
    pub image: ImageSpec,
}

pub const SHAPE_NAMES: [&str; 10] = [
    "filled circle",
    "ring",
    "rectangle",
    "cross",
    "diagonal stripe",
    "horizontal stripe",
    "vertical stripe",
    "checkerboard",
    "blob",
    "triangle",
];

/// Offset of the held-out index range, far from any training index.
pub const HELDOUT_OFFSET: u64 = 1 << 40;

impl SyntheticImageTask {
    pub fn new(seed: u64, num_classes: usize, image: ImageSpec) -> Result<Self> {
        if num_classes == 0 || num_classes > SHAPE_NAMES.len() {
            return Err(XmarError::invalid(format!("num_classes must be in 1..=10, got {num_classes}")));
        }
        Ok(Self { seed, num_classes, image })
    }

    pub fn label(&self, index: u64) -> usize {
        (index % self.num_classes as u64) as usize
    }

    /// Image `[h, w, c]` and label for sample `index`.
    pub fn sample(&self, index: u64) -> (Tensor<f32>, usize) {
        let label = self.label(index);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let ImageSpec { h, w, c } = self.image;
        let bg: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..-0.2)).collect();
        let fg: Vec<f64> = (0..c).map(|_| rng.gen_range(0.2..1.0)).collect();
        let (cx, cy) = (rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65));
        let s: f64 = rng.gen_range(0.18..0.3);
        let (a, b) = (rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0));
        let period: f64 = rng.gen_range(0.12..0.22);
        let (ph1, ph2): (f64, f64) = (rng.gen(), rng.gen());
        let blobs: Vec<(f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    cx + rng.gen_range(-0.6..0.6) * s,
                    cy + rng.gen_range(-0.6..0.6) * s,
                    rng.gen_range(0.3..0.55) * s,
                )
            })
            .collect();
        let inside = |u: f64, v: f64| -> bool {
            let (dx, dy) = (u - cx, v - cy);
            let d = dx.hypot(dy);
            match label {
                0 => d <= s,
                1 => d <= s && d >= 0.55 * s,
                2 => dx.abs() <= s * a && dy.abs() <= s * b,
                3 => (dx.abs() <= 0.22 * s && dy.abs() <= s) || (dy.abs() <= 0.22 * s && dx.abs() <= s),
                4 => ((u + v) / period + ph1).fract() < 0.5,
                5 => (v / period + ph1).fract() < 0.5,
                6 => (u / period + ph1).fract() < 0.5,
                7 => ((u / period + ph1).floor() + (v / period + ph2).floor()) as i64 % 2 == 0,
                8 => blobs.iter().any(|&(bx, by, r)| (u - bx).hypot(v - by) <= r),
                _ => dy >= -s && dy <= s && dx.abs() <= (dy + s) / 2.0,
            }
        };
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                let on = inside((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
                for ch in 0..c {
                    let base = if on { fg[ch] } else { bg[ch] };
                    let noise: f64 = rng.gen_range(-0.15..0.15);
                    data.push((base + noise).clamp(-1.0, 1.0) as f32);
                }
            }
        }
        (Tensor::new(vec![h, w, c], data).expect("shape matches"), label)
    }

    /// Stacks samples into `[B, h, w, c]`.
    pub fn batch(&self, indices: &[u64]) -> (Tensor<f32>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image.numel());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let (img, label) = self.sample(i);
            data.extend_from_slice(img.data());
            labels.push(label);
        }
        let shape = vec![indices.len(), self.image.h, self.image.w, self.image.c];
        (Tensor::new(shape, data).expect("shape matches"), labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub heldout: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 5, samples_per_epoch: 2000, batch_size: 16, lr: 0.002, heldout: 500, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub heldout_accuracy: f64,
    pub final_train_loss: f64,
    pub steps: usize,
}

/// Fraction of held-out samples classified correctly.
pub fn heldout_accuracy(model: &VictimModel, task: &SyntheticImageTask, count: usize) -> Result<f64> {
    if count == 0 {
        return Err(XmarError::invalid("held-out set must be nonempty"));
    }
    let indices: Vec<u64> = (0..count as u64).map(|i| HELDOUT_OFFSET + i).collect();
    let mut correct = 0;
    for chunk in indices.chunks(50) {
        let (images, labels) = task.batch(chunk);
        let logits = model.logits(&images)?;
        let l = model.num_labels;
        for (row, &label) in logits.data().chunks(l).zip(&labels) {
            let pred = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            correct += (pred == label) as usize;
        }
    }
    Ok(correct as f64 / count as f64)
}

/// Trains all weights with Adam on cross-entropy over a fixed set of
/// `samples_per_epoch` task samples, then freezes the model.
pub fn pretrain_victim(model: &mut VictimModel, task: &SyntheticImageTask, config: &PretrainConfig) -> Result<PretrainReport> {
    if model.frozen {
        return Err(XmarError::invalid("victim is frozen"));
    }
    if task.image != model.image || task.num_classes > model.num_labels {
        return Err(XmarError::invalid("task geometry or label count does not fit the victim"));
    }
    if config.batch_size == 0 {
        return Err(XmarError::invalid("batch_size must be positive"));
    }
    let refs: Vec<&Tensor<f32>> = model.weights.iter().map(|(_, t)| t).collect();
    let mut adam = AdamState::for_params(&refs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<u64> = (0..config.samples_per_epoch as u64).collect();
    let mut steps = 0;
    let mut last_loss = f64::NAN;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let (images, labels) = task.batch(chunk);
            let mut tape = Tape::<f32>::new();
            let bound = model.bind(&mut tape, true)?;
            let x = tape.constant(images)?;
            let logits = model.forward_on(&mut tape, &bound, x)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            last_loss = tape.value(loss).item() as f64;
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor<f32>> = bound
                .vars
                .iter()
                .map(|&v| grads.take(v).expect("parameter gradient"))
                .collect();
            let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
            let mut params: Vec<&mut Tensor<f32>> = model.weights.iter_mut().map(|(_, t)| t).collect();
            adam.step(&mut params, &grad_refs, config.lr, true)?;
            steps += 1;
        }
    }
    let accuracy = heldout_accuracy(model, task, config.heldout)?;
    model.pretrain = Some(PretrainRecord { seed: config.seed, epochs: config.epochs, heldout_accuracy: accuracy });
    model.frozen = true;
    Ok(PretrainReport { heldout_accuracy: accuracy, final_train_loss: last_loss, steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(h: usize, w: usize, c: usize) -> ImageSpec {
        ImageSpec::new(h, w, c).unwrap()
    }

    #[test]
    fn deterministic_init() {
        let a = build_victim(Arch::SmallCnn, spec(64, 64, 3), 10, 7).unwrap();
        let b = build_victim(Arch::SmallCnn, spec(64, 64, 3), 10, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        let c = build_victim(Arch::SmallCnn, spec(64, 64, 3), 10, 8).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn parameter_counts_match_formula() {
        for (arch, s, l, p) in [
            (Arch::SmallCnn, spec(64, 64, 3), 10, 8),
            (Arch::SmallCnn, spec(17, 33, 1), 4, 8),
            (Arch::PatchTransformer, spec(64, 64, 3), 10, 8),
            (Arch::PatchTransformer, spec(8, 8, 1), 10, 4),
        ] {
            let m = build_victim_with_patch(arch, s, l, p, 0).unwrap();
            assert_eq!(m.param_count(), param_count(arch, s, l, p), "{arch} {s:?}");
        }
        // 64x64x3 CNN: 62 -> 31 -> 29 -> 14, so 16 * 14 * 14 = 3136 features.
        assert_eq!(param_count(Arch::SmallCnn, spec(64, 64, 3), 10, 8), 224 + 1168 + 3137 * 10);
    }

    #[test]
    fn geometry_errors() {
        assert!(build_victim(Arch::SmallCnn, spec(15, 64, 3), 10, 0).is_err());
        assert!(build_victim(Arch::PatchTransformer, spec(60, 64, 3), 10, 0).is_err());
    }

    #[test]
    fn transformer_token_count() {
        let m = build_victim(Arch::PatchTransformer, spec(64, 64, 3), 10, 0).unwrap();
        assert_eq!(m.internal_tokens(), Some(64));
        assert_eq!(m.weight("pos").unwrap().shape(), &[65, EMBED_DIM]);
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        for arch in [Arch::SmallCnn, Arch::PatchTransformer] {
            let mut m = build_victim(arch, spec(16, 16, 3), 5, 1).unwrap();
            m.zero_head().unwrap();
            let out = m.logits(&Tensor::zeros(vec![16, 16, 3]).unwrap()).unwrap();
            assert_eq!(out.shape(), &[1, 5]);
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn batch_independence_and_purity() {
        let task = SyntheticImageTask::new(3, 10, spec(16, 16, 3)).unwrap();
        let (images, _) = task.batch(&[0, 1, 2, 3]);
        for arch in [Arch::SmallCnn, Arch::PatchTransformer] {
            let m = build_victim(arch, spec(16, 16, 3), 10, 2).unwrap();
            let all = m.logits(&images).unwrap();
            let (first, _) = task.sample(2);
            let single = m.logits(&first).unwrap();
            for j in 0..10 {
                assert!((all.at(&[2, j]) - single.at(&[0, j])).abs() <= 1e-5);
            }
            assert_eq!(m.logits(&images).unwrap(), all);
        }
    }

    #[test]
    fn checked_mode_rejects_out_of_range_pixels() {
        let m = build_victim(Arch::SmallCnn, spec(16, 16, 1), 3, 0).unwrap();
        let mut tape = Tape::<f32>::checked();
        let bound = m.bind(&mut tape, false).unwrap();
        let x = tape.constant(Tensor::full(vec![1, 16, 16, 1], 1.5).unwrap()).unwrap();
        assert!(m.forward_on(&mut tape, &bound, x).is_err());
    }

    #[test]
    fn synthetic_task_is_pure_and_balanced() {
        let task = SyntheticImageTask::new(11, 10, spec(32, 32, 3)).unwrap();
        assert_eq!(task.sample(123), task.sample(123));
        assert_ne!(task.sample(123).0, task.sample(133).0);
        let (img, label) = task.sample(47);
        assert_eq!(label, 7);
        assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let mut counts = [0; 10];
        for i in 0..200 {
            counts[task.label(HELDOUT_OFFSET + i)] += 1;
        }
        assert!(counts.iter().all(|&c| c == 20));
    }

    #[test]
    fn zero_epochs_is_chance_and_freezes() {
        let s = spec(16, 16, 3);
        let task = SyntheticImageTask::new(1, 10, s).unwrap();
        let mut m = build_victim(Arch::SmallCnn, s, 10, 4).unwrap();
        let before = m.checksum();
        let config = PretrainConfig { epochs: 0, heldout: 200, ..PretrainConfig::default() };
        let report = pretrain_victim(&mut m, &task, &config).unwrap();
        assert!((report.heldout_accuracy - 0.1).abs() <= 0.1, "{}", report.heldout_accuracy);
        assert_eq!(before, m.checksum());
        assert!(m.is_frozen());
        assert!(pretrain_victim(&mut m, &task, &config).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = build_victim(Arch::PatchTransformer, spec(16, 16, 1), 4, 9).unwrap();
        m.freeze();
        m.pretrain = Some(PretrainRecord { seed: 2, epochs: 3, heldout_accuracy: 0.5 });
        let ck = Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap();
        assert_eq!(VictimModel::from_checkpoint(&ck).unwrap(), m);
        let cnn = build_victim(Arch::SmallCnn, spec(16, 16, 1), 4, 9).unwrap();
        let ck = Checkpoint::from_bytes(&cnn.to_checkpoint().to_bytes()).unwrap();
        assert_eq!(VictimModel::from_checkpoint(&ck).unwrap(), cnn);
    }
}
