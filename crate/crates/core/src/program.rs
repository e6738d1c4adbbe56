//! The token-to-image adversarial program and its concealed variant.
//!
//! Token `k` (0-indexed) of a padded sequence fills the `p x p` patch whose
//! top-left corner is at row `p * floor(k * p / w)` and column
//! `(k * p) mod w`, i.e. patches tile the image in raster order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use xmar_tensor::{Checkpoint, Element, Tape, Tensor, Var};

use crate::error::{Result, XmarError};
use crate::image::ImageSpec;

/// Initial theta entries are drawn from `U(-THETA_INIT, THETA_INIT)`.
pub const THETA_INIT: f64 = 0.05;

/// Pads with `pad_token` or truncates from the end to exactly `max_tokens`.
pub fn pad_and_clip(tokens: &[usize], max_tokens: usize, pad_token: usize) -> Vec<usize> {
    let mut out: Vec<usize> = tokens.iter().copied().take(max_tokens).collect();
    out.resize(max_tokens, pad_token);
    out
}

/// Largest multiple of `unit` that divides `h` and `w` and still leaves room
/// for `longest` tokens.
pub fn select_patch_size(h: usize, w: usize, unit: usize, longest: usize) -> Result<usize> {
    if unit == 0 {
        return Err(XmarError::invalid("patch unit must be positive"));
    }
    (1..=h.min(w) / unit)
        .rev()
        .map(|k| k * unit)
        .find(|&p| h % p == 0 && w % p == 0 && (h / p) * (w / p) >= longest)
        .ok_or_else(|| {
            XmarError::invalid(format!(
                "no multiple of {unit} tiles a {h}x{w} image with room for {longest} tokens"
            ))
        })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialProgram {
    theta: Tensor<f32>,
    image: ImageSpec,
    patch: usize,
    pad_token: usize,
}

impl AdversarialProgram {
    pub fn new(vocab_size: usize, image: ImageSpec, patch: usize, pad_token: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = Tensor::from_fn(vec![vocab_size, patch, patch, image.c], |_| {
            rng.gen_range(-THETA_INIT..THETA_INIT) as f32
        })?;
        Self::from_theta(theta, image, patch, pad_token)
    }

    pub fn from_theta(theta: Tensor<f32>, image: ImageSpec, patch: usize, pad_token: usize) -> Result<Self> {
        if patch == 0 || image.h % patch != 0 || image.w % patch != 0 {
            return Err(XmarError::invalid(format!(
                "patch {patch} does not divide the {}x{} image",
                image.h, image.w
            )));
        }
        if theta.shape()[1..] != [patch, patch, image.c] || theta.rank() != 4 {
            return Err(XmarError::invalid(format!(
                "theta shape {:?} does not match [V, {patch}, {patch}, {}]",
                theta.shape(),
                image.c
            )));
        }
        if pad_token >= theta.shape()[0] {
            return Err(XmarError::invalid(format!(
                "pad token {pad_token} outside vocabulary of {}",
                theta.shape()[0]
            )));
        }
        Ok(Self { theta, image, patch, pad_token })
    }

    pub fn theta(&self) -> &Tensor<f32> {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut Tensor<f32> {
        &mut self.theta
    }

    pub fn image_spec(&self) -> ImageSpec {
        self.image
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn pad_token(&self) -> usize {
        self.pad_token
    }

    pub fn vocab_size(&self) -> usize {
        self.theta.shape()[0]
    }

    pub fn max_tokens(&self) -> usize {
        (self.image.h / self.patch) * (self.image.w / self.patch)
    }

    pub fn pad(&self, tokens: &[usize]) -> Vec<usize> {
        pad_and_clip(tokens, self.max_tokens(), self.pad_token)
    }

    fn check_sequence(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() != self.max_tokens() {
            return Err(XmarError::invalid(format!(
                "sequence has {} tokens, program expects exactly {} (pad first)",
                tokens.len(),
                self.max_tokens()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(XmarError::invalid(format!("token {t} outside vocabulary of {}", self.vocab_size())));
        }
        Ok(())
    }

    /// Renders one padded sequence directly, without recording gradients.
    pub fn embed(&self, tokens: &[usize]) -> Result<Tensor<f32>> {
        self.check_sequence(tokens)?;
        let ImageSpec { h, w, c } = self.image;
        let p = self.patch;
        let row = p * c;
        let block = p * row;
        let theta = self.theta.data();
        let mut out = vec![0.0f32; h * w * c];
        for (k, &t) in tokens.iter().enumerate() {
            let r0 = p * (k * p / w);
            let c0 = (k * p) % w;
            let src = &theta[t * block..(t + 1) * block];
            for i in 0..p {
                let dst = ((r0 + i) * w + c0) * c;
                for (d, &v) in out[dst..dst + row].iter_mut().zip(&src[i * row..(i + 1) * row]) {
                    *d = v.tanh();
                }
            }
        }
        Ok(Tensor::new(vec![h, w, c], out)?)
    }

    /// Records the batch rendering `[B, h, w, c]` on a tape. `theta` must be
    /// a `[V, p, p, c]` node.
    pub fn embed_on<T: Element>(&self, tape: &mut Tape<T>, theta: Var, batch: &[Vec<usize>]) -> Result<Var> {
        if batch.is_empty() {
            return Err(XmarError::invalid("empty batch"));
        }
        for seq in batch {
            self.check_sequence(seq)?;
        }
        let ImageSpec { h, w, c } = self.image;
        let p = self.patch;
        let flat: Vec<usize> = batch.iter().flatten().copied().collect();
        let squashed = tape.tanh(theta)?;
        let patches = tape.gather_rows(squashed, &flat)?;
        let grid = tape.reshape(patches, &[batch.len(), h / p, w / p, p, p, c])?;
        let rows = tape.permute(grid, &[0, 1, 3, 2, 4, 5])?;
        Ok(tape.reshape(rows, &[batch.len(), h, w, c])?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "program");
        ck.set_meta("image", self.image.to_json());
        ck.set_meta("patch", self.patch);
        ck.set_meta("pad_token", self.pad_token);
        ck.push_array("theta", self.theta.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let image = ImageSpec::from_json(ck.meta_value("image")?)?;
        Self::from_theta(
            ck.array("theta")?.clone(),
            image,
            ck.meta_u64("patch")? as usize,
            ck.meta_u64("pad_token")? as usize,
        )
    }
}

/// Perturbation of a base image bounded by `epsilon` in L-infinity.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundedProgram {
    pub inner: AdversarialProgram,
    base: Tensor<f32>,
    epsilon: f64,
}

impl BoundedProgram {
    pub fn new(inner: AdversarialProgram, base: Tensor<f32>, epsilon: f64) -> Result<Self> {
        inner.image.check(&base)?;
        if base.rank() != 3 {
            return Err(XmarError::invalid("base image must be [h, w, c]"));
        }
        if base.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(XmarError::invalid("base image values must lie in [-1, 1]"));
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(XmarError::invalid(format!("epsilon must lie in [0, 1], got {epsilon}")));
        }
        Ok(Self { inner, base, epsilon })
    }

    pub fn base(&self) -> &Tensor<f32> {
        &self.base
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn conceal(&self, tokens: &[usize]) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let theta = tape.constant(self.inner.theta.clone())?;
        let out = self.conceal_on(&mut tape, theta, &[tokens.to_vec()])?;
        let image = tape.value(out).clone();
        Ok(image.reshape(self.base.shape().to_vec())?)
    }

    /// `clip(x_c + epsilon * embed, -1, 1)`, with the band around `x_c`
    /// enforced exactly.
    pub fn conceal_on<T: Element>(&self, tape: &mut Tape<T>, theta: Var, batch: &[Vec<usize>]) -> Result<Var> {
        let embedded = self.inner.embed_on(tape, theta, batch)?;
        let scaled = tape.scale(embedded, self.epsilon)?;
        let base = tape.constant(T::from_f32_tensor(&self.base))?;
        let shifted = tape.add_broadcast(scaled, base)?;
        let banded = tape.clip_around(shifted, base, self.epsilon)?;
        Ok(tape.clip(banded, -1.0, 1.0)?)
    }
}

/// Either form of the program, as trained.
#[derive(Clone, Debug, PartialEq)]
pub enum Program {
    Plain(AdversarialProgram),
    Bounded(BoundedProgram),
}

impl Program {
    pub fn inner(&self) -> &AdversarialProgram {
        match self {
            Program::Plain(p) => p,
            Program::Bounded(b) => &b.inner,
        }
    }

    pub fn inner_mut(&mut self) -> &mut AdversarialProgram {
        match self {
            Program::Plain(p) => p,
            Program::Bounded(b) => &mut b.inner,
        }
    }

    pub fn epsilon(&self) -> Option<f64> {
        match self {
            Program::Plain(_) => None,
            Program::Bounded(b) => Some(b.epsilon),
        }
    }

    /// Image for an unpadded token sequence.
    pub fn render(&self, tokens: &[usize]) -> Result<Tensor<f32>> {
        let padded = self.inner().pad(tokens);
        match self {
            Program::Plain(p) => p.embed(&padded),
            Program::Bounded(b) => b.conceal(&padded),
        }
    }

    /// Records a batch of padded sequences on a tape, returning `[B, h, w, c]`.
    pub fn render_on<T: Element>(&self, tape: &mut Tape<T>, theta: Var, batch: &[Vec<usize>]) -> Result<Var> {
        match self {
            Program::Plain(p) => p.embed_on(tape, theta, batch),
            Program::Bounded(b) => b.conceal_on(tape, theta, batch),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.inner().to_checkpoint();
        if let Program::Bounded(b) = self {
            ck.set_meta("epsilon", b.epsilon);
            ck.push_array("base_image", b.base.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let inner = AdversarialProgram::from_checkpoint(ck)?;
        match ck.meta.get("epsilon") {
            None | Some(Value::Null) => Ok(Program::Plain(inner)),
            Some(eps) => {
                let eps = eps.as_f64().ok_or_else(|| XmarError::invalid("epsilon must be a number"))?;
                Ok(Program::Bounded(BoundedProgram::new(inner, ck.array("base_image")?.clone(), eps)?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(h: usize, w: usize, c: usize) -> ImageSpec {
        ImageSpec::new(h, w, c).unwrap()
    }

    #[test]
    fn padding_rules() {
        assert_eq!(pad_and_clip(&[5], 4, 0), vec![5, 0, 0, 0]);
        assert_eq!(pad_and_clip(&[1, 2, 3, 4, 5], 4, 0), vec![1, 2, 3, 4]);
        assert_eq!(pad_and_clip(&[], 2, 9), vec![9, 9]);
    }

    #[test]
    fn capacity() {
        let p = AdversarialProgram::new(3, spec(384, 384, 3), 16, 0, 0).unwrap();
        assert_eq!(p.max_tokens(), 576);
        assert!(AdversarialProgram::new(3, spec(10, 10, 1), 4, 0, 0).is_err());
        assert!(AdversarialProgram::new(3, spec(8, 8, 1), 4, 3, 0).is_err());
    }

    #[test]
    fn two_by_two_layout() {
        let theta = Tensor::from_fn(vec![4, 2, 2, 1], |i| (i / 4) as f32 * 0.25 + 0.1).unwrap();
        let prog = AdversarialProgram::from_theta(theta.clone(), spec(4, 4, 1), 2, 0).unwrap();
        let img = prog.embed(&[0, 1, 2, 3]).unwrap();
        let patch_of = |r: usize, c: usize| img.at(&[r, c, 0]);
        for (token, (r, c)) in [(0, (0, 0)), (1, (0, 2)), (2, (2, 0)), (3, (2, 2))] {
            let expected = theta.at(&[token, 0, 0, 0]).tanh();
            for dr in 0..2 {
                for dc in 0..2 {
                    assert_eq!(patch_of(r + dr, c + dc), expected);
                }
            }
        }
    }

    #[test]
    fn zero_theta_gives_zero_image() {
        let theta = Tensor::zeros(vec![3, 2, 2, 3]).unwrap();
        let prog = AdversarialProgram::from_theta(theta, spec(4, 6, 3), 2, 0).unwrap();
        let img = prog.embed(&prog.pad(&[1, 2])).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tape_and_direct_paths_agree_bitwise() {
        let prog = AdversarialProgram::new(5, spec(8, 12, 3), 4, 0, 3).unwrap();
        let seqs = vec![prog.pad(&[1, 2, 3, 4, 1, 2]), prog.pad(&[4, 4])];
        let mut tape = Tape::<f32>::new();
        let theta = tape.constant(prog.theta().clone()).unwrap();
        let out = prog.embed_on(&mut tape, theta, &seqs).unwrap();
        let batch = tape.value(out);
        for (b, seq) in seqs.iter().enumerate() {
            let single = prog.embed(seq).unwrap();
            let n = single.numel();
            assert_eq!(&batch.data()[b * n..(b + 1) * n], single.data());
        }
    }

    #[test]
    fn sequence_length_checked() {
        let prog = AdversarialProgram::new(3, spec(4, 4, 1), 2, 0, 0).unwrap();
        assert!(prog.embed(&[1, 2]).is_err());
        assert!(prog.embed(&[1, 2, 3, 0]).is_err());
    }

    #[test]
    fn gradient_is_local_to_used_rows() {
        let prog = AdversarialProgram::new(4, spec(4, 4, 1), 2, 0, 1).unwrap();
        let mut tape = Tape::<f32>::new();
        let theta = tape.param(prog.theta().clone()).unwrap();
        let out = prog.embed_on(&mut tape, theta, &[vec![1, 1, 3, 1]]).unwrap();
        let loss = tape.sum(out).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(theta).unwrap();
        let row = |t: usize| &g.data()[t * 4..(t + 1) * 4];
        assert!(row(0).iter().chain(row(2)).all(|&v| v == 0.0));
        assert!(row(1).iter().chain(row(3)).all(|&v| v != 0.0));
    }

    #[test]
    fn select_patch() {
        assert_eq!(select_patch_size(384, 384, 16, 60).unwrap(), 48);
        assert_eq!(select_patch_size(384, 384, 16, 500).unwrap(), 16);
        assert_eq!(select_patch_size(64, 64, 8, 60).unwrap(), 8);
        assert_eq!(select_patch_size(64, 64, 8, 16).unwrap(), 16);
        assert!(select_patch_size(64, 64, 8, 65).is_err());
    }

    #[test]
    fn conceal_examples() {
        let inner = AdversarialProgram::new(4, spec(4, 4, 3), 2, 0, 5).unwrap();
        let base = Tensor::from_fn(vec![4, 4, 3], |i| (i as f32 / 24.0) - 1.0).unwrap();
        let seq = vec![1, 2, 3, 0];
        let zero = BoundedProgram::new(inner.clone(), base.clone(), 0.0).unwrap();
        assert_eq!(zero.conceal(&seq).unwrap(), base);
        let zero_base = Tensor::zeros(vec![4, 4, 3]).unwrap();
        let full = BoundedProgram::new(inner.clone(), zero_base, 1.0).unwrap();
        assert_eq!(full.conceal(&seq).unwrap(), inner.embed(&seq).unwrap());
        assert!(BoundedProgram::new(inner.clone(), base.clone(), 1.5).is_err());
        assert!(BoundedProgram::new(inner, Tensor::full(vec![4, 4, 3], 1.5).unwrap(), 0.1).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let inner = AdversarialProgram::new(4, spec(4, 4, 1), 2, 0, 5).unwrap();
        let plain = Program::Plain(inner.clone());
        let ck = Checkpoint::from_bytes(&plain.to_checkpoint().to_bytes()).unwrap();
        assert_eq!(Program::from_checkpoint(&ck).unwrap(), plain);
        let bounded = Program::Bounded(BoundedProgram::new(inner, Tensor::full(vec![4, 4, 1], 0.5).unwrap(), 0.1).unwrap());
        let ck = Checkpoint::from_bytes(&bounded.to_checkpoint().to_bytes()).unwrap();
        assert_eq!(Program::from_checkpoint(&ck).unwrap(), bounded);
    }
}
