//! Output label remapping: many-to-one max aggregation over disjoint source
//! groups, or a learnable linear head over softmaxed accessible logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use xmar_tensor::{Checkpoint, Element, Tape, Tensor, Var};

use crate::error::{Result, XmarError};

pub const DEFAULT_SOURCES_PER_TARGET: usize = 10;

/// `requested` clipped to how many sources each target can get.
pub fn sources_per_target(num_sources: usize, num_targets: usize, requested: usize) -> usize {
    requested.min(num_sources / num_targets.max(1))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManyToOneMapping {
    assignments: Vec<Vec<usize>>,
    num_sources: usize,
}

impl ManyToOneMapping {
    pub fn new(assignments: Vec<Vec<usize>>, num_sources: usize) -> Result<Self> {
        let m = assignments.first().map_or(0, Vec::len);
        if m == 0 || assignments.iter().any(|a| a.len() != m) {
            return Err(XmarError::invalid("every target needs the same nonzero number of sources"));
        }
        let mut used = vec![false; num_sources];
        for &s in assignments.iter().flatten() {
            if s >= num_sources {
                return Err(XmarError::invalid(format!("source label {s} out of range for {num_sources} labels")));
            }
            if std::mem::replace(&mut used[s], true) {
                return Err(XmarError::invalid(format!("source label {s} assigned twice")));
            }
        }
        Ok(Self { assignments, num_sources })
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }

    pub fn num_targets(&self) -> usize {
        self.assignments.len()
    }

    pub fn num_sources(&self) -> usize {
        self.num_sources
    }

    pub fn m(&self) -> usize {
        self.assignments[0].len()
    }

    pub fn owner(&self, source: usize) -> Option<usize> {
        self.assignments.iter().position(|a| a.contains(&source))
    }

    pub fn to_json(&self) -> Value {
        json!({ "assignments": self.assignments, "num_sources": self.num_sources })
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        let bad = || XmarError::invalid("malformed mapping JSON");
        let assignments = value["assignments"]
            .as_array()
            .ok_or_else(bad)?
            .iter()
            .map(|a| {
                a.as_array()?
                    .iter()
                    .map(|s| s.as_u64().map(|s| s as usize))
                    .collect::<Option<Vec<_>>>()
            })
            .collect::<Option<Vec<_>>>()
            .ok_or_else(bad)?;
        let num_sources = value["num_sources"].as_u64().ok_or_else(bad)? as usize;
        Self::new(assignments, num_sources)
    }
}

/// Sorts sources by descending score (ties to the lower index) and deals
/// them to targets `0, 1, .., T-1, 0, 1, ..` until each holds `m`.
pub fn build_roundrobin(base_scores: &[f32], num_targets: usize, m: usize) -> Result<ManyToOneMapping> {
    if num_targets == 0 || m == 0 {
        return Err(XmarError::invalid("need at least one target and one source per target"));
    }
    if m * num_targets > base_scores.len() {
        return Err(XmarError::invalid(format!(
            "{num_targets} targets x {m} sources need {} source labels, victim has {}",
            m * num_targets,
            base_scores.len()
        )));
    }
    if base_scores.iter().any(|s| s.is_nan()) {
        return Err(XmarError::invalid("base scores contain NaN"));
    }
    let mut order: Vec<usize> = (0..base_scores.len()).collect();
    order.sort_by(|&a, &b| base_scores[b].partial_cmp(&base_scores[a]).unwrap().then(a.cmp(&b)));
    let mut assignments = vec![Vec::with_capacity(m); num_targets];
    for (rank, &source) in order.iter().take(m * num_targets).enumerate() {
        assignments[rank % num_targets].push(source);
    }
    ManyToOneMapping::new(assignments, base_scores.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Max,
    /// Ablation only.
    Mean,
}

fn check_logits(z: &Tensor<f32>, num_sources: usize) -> Result<usize> {
    match z.shape() {
        &[b, n] if n == num_sources => Ok(b),
        s => Err(XmarError::invalid(format!("logits shape {s:?} does not match [B, {num_sources}]"))),
    }
}

/// `Z'[b, t] = max over the sources of t of Z[b, s]`.
pub fn aggregate_max(mapping: &ManyToOneMapping, z: &Tensor<f32>) -> Result<Tensor<f32>> {
    let b = check_logits(z, mapping.num_sources)?;
    let n = mapping.num_sources;
    let data = (0..b)
        .flat_map(|i| {
            let row = &z.data()[i * n..(i + 1) * n];
            mapping
                .assignments
                .iter()
                .map(move |a| a.iter().map(|&s| row[s]).fold(f32::NEG_INFINITY, f32::max))
        })
        .collect();
    Ok(Tensor::new(vec![b, mapping.num_targets()], data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    weight: Tensor<f32>,
    bias: Option<Tensor<f32>>,
    accessible: Vec<usize>,
}

impl LinearHead {
    /// Fan-in scaled uniform weights, zero bias.
    pub fn new(num_targets: usize, accessible: Vec<usize>, use_bias: bool, seed: u64) -> Result<Self> {
        let q = accessible.len();
        let bound = 1.0 / (q.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = Tensor::from_fn(vec![num_targets, q], |_| rng.gen_range(-bound..bound) as f32)?;
        let bias = if use_bias { Some(Tensor::zeros(vec![num_targets])?) } else { None };
        Self::from_parts(weight, bias, accessible)
    }

    pub fn from_parts(weight: Tensor<f32>, bias: Option<Tensor<f32>>, accessible: Vec<usize>) -> Result<Self> {
        if weight.rank() != 2 || weight.shape()[1] != accessible.len() {
            return Err(XmarError::invalid(format!(
                "head weight {:?} does not match {} accessible labels",
                weight.shape(),
                accessible.len()
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[0]] {
                return Err(XmarError::invalid("head bias must have one entry per target"));
            }
        }
        let mut sorted = accessible.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(XmarError::invalid("accessible labels must be distinct"));
        }
        Ok(Self { weight, bias, accessible })
    }

    pub fn weight(&self) -> &Tensor<f32> {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Tensor<f32> {
        &mut self.weight
    }

    pub fn bias(&self) -> Option<&Tensor<f32>> {
        self.bias.as_ref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Tensor<f32>> {
        self.bias.as_mut()
    }

    pub fn accessible(&self) -> &[usize] {
        &self.accessible
    }

    pub fn q(&self) -> usize {
        self.accessible.len()
    }

    pub fn num_targets(&self) -> usize {
        self.weight.shape()[0]
    }

    fn check_range(&self, num_sources: usize) -> Result<()> {
        match self.accessible.iter().find(|&&s| s >= num_sources) {
            Some(s) => Err(XmarError::invalid(format!("accessible label {s} out of range for {num_sources} labels"))),
            None => Ok(()),
        }
    }
}

/// The `q` source labels with the highest base scores, in descending order
/// (ties to the lower index).
pub fn top_q_labels(base_scores: &[f32], q: usize) -> Result<Vec<usize>> {
    if q == 0 || q > base_scores.len() {
        return Err(XmarError::invalid(format!("q = {q} must be in 1..={}", base_scores.len())));
    }
    let mut order: Vec<usize> = (0..base_scores.len()).collect();
    order.sort_by(|&a, &b| base_scores[b].total_cmp(&base_scores[a]).then(a.cmp(&b)));
    order.truncate(q);
    Ok(order)
}

fn softmax(row: &[f32]) -> Vec<f32> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f32 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// `Z' = W softmax(Z[:, accessible]) (+ bias)`.
pub fn linear_map(head: &LinearHead, z: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = z.shape().get(1).copied().unwrap_or(0);
    let b = check_logits(z, n)?;
    head.check_range(n)?;
    let (t, q) = (head.num_targets(), head.q());
    let w = head.weight.data();
    let mut out = Vec::with_capacity(b * t);
    for i in 0..b {
        let row = &z.data()[i * n..(i + 1) * n];
        let picked: Vec<f32> = head.accessible.iter().map(|&s| row[s]).collect();
        let p = softmax(&picked);
        for r in 0..t {
            let dot: f32 = (0..q).map(|j| w[r * q + j] * p[j]).sum();
            out.push(dot + head.bias.as_ref().map_or(0.0, |bias| bias.data()[r]));
        }
    }
    Ok(Tensor::new(vec![b, t], out)?)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Remap {
    ManyToOne { mapping: ManyToOneMapping, aggregation: Aggregation },
    Linear(LinearHead),
}

/// Tape handles for the learnable head, when there is one.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Remap {
    pub fn num_targets(&self) -> usize {
        match self {
            Remap::ManyToOne { mapping, .. } => mapping.num_targets(),
            Remap::Linear(head) => head.num_targets(),
        }
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            Remap::ManyToOne { .. } => "max",
            Remap::Linear(_) => "linear",
        }
    }

    pub fn head(&self) -> Option<&LinearHead> {
        match self {
            Remap::Linear(h) => Some(h),
            _ => None,
        }
    }

    pub fn head_mut(&mut self) -> Option<&mut LinearHead> {
        match self {
            Remap::Linear(h) => Some(h),
            _ => None,
        }
    }

    /// Target scores `[B, T]` from victim logits `z: [B, L_X]` on a tape.
    pub fn scores_on<T: Element>(&self, tape: &mut Tape<T>, z: Var, head: Option<HeadVars>) -> Result<Var> {
        let shape = tape.shape(z).to_vec();
        if shape.len() != 2 {
            return Err(XmarError::invalid(format!("logits must be [B, L], got {shape:?}")));
        }
        match self {
            Remap::ManyToOne { mapping, aggregation } => {
                if shape[1] != mapping.num_sources {
                    return Err(XmarError::invalid(format!(
                        "mapping covers {} source labels, logits have {}",
                        mapping.num_sources, shape[1]
                    )));
                }
                Ok(match aggregation {
                    Aggregation::Max => tape.max_over_indices(z, &mapping.assignments)?,
                    Aggregation::Mean => tape.mean_over_indices(z, &mapping.assignments)?,
                })
            }
            Remap::Linear(h) => {
                h.check_range(shape[1])?;
                let vars = head.ok_or_else(|| XmarError::invalid("linear remap needs head variables"))?;
                let cols = tape.permute(z, &[1, 0])?;
                let picked = tape.gather_rows(cols, &h.accessible)?;
                let picked = tape.permute(picked, &[1, 0])?;
                let p = tape.softmax(picked, 1)?;
                let wt = tape.permute(vars.weight, &[1, 0])?;
                Ok(tape.dense(p, wt, vars.bias)?)
            }
        }
    }

    /// Plain (untaped) target scores.
    pub fn scores(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            Remap::ManyToOne { mapping, aggregation: Aggregation::Max } => aggregate_max(mapping, z),
            Remap::ManyToOne { .. } => {
                let mut tape = Tape::<f32>::new();
                let zv = tape.constant(z.clone())?;
                let out = self.scores_on(&mut tape, zv, None)?;
                Ok(tape.value(out).clone())
            }
            Remap::Linear(h) => linear_map(h, z),
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            Remap::ManyToOne { mapping, aggregation } => {
                let mut v = mapping.to_json();
                v["mode"] = json!("max");
                v["aggregation"] = json!(match aggregation {
                    Aggregation::Max => "max",
                    Aggregation::Mean => "mean",
                });
                v
            }
            Remap::Linear(h) => json!({
                "mode": "linear",
                "accessible": h.accessible,
                "use_bias": h.bias.is_some(),
            }),
        }
    }

    pub fn write_arrays(&self, ck: &mut Checkpoint) {
        if let Remap::Linear(h) = self {
            ck.push_array("head_weight", h.weight.clone());
            if let Some(b) = &h.bias {
                ck.push_array("head_bias", b.clone());
            }
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let v = ck.meta_value("remap")?;
        match v["mode"].as_str() {
            Some("max") => {
                let aggregation = match v["aggregation"].as_str() {
                    Some("mean") => Aggregation::Mean,
                    _ => Aggregation::Max,
                };
                Ok(Remap::ManyToOne { mapping: ManyToOneMapping::from_json(v)?, aggregation })
            }
            Some("linear") => {
                let accessible = v["accessible"]
                    .as_array()
                    .and_then(|a| a.iter().map(|s| s.as_u64().map(|s| s as usize)).collect::<Option<Vec<_>>>())
                    .ok_or_else(|| XmarError::invalid("malformed accessible list"))?;
                let bias = if v["use_bias"].as_bool() == Some(true) {
                    Some(ck.array("head_bias")?.clone())
                } else {
                    None
                };
                Ok(Remap::Linear(LinearHead::from_parts(ck.array("head_weight")?.clone(), bias, accessible)?))
            }
            _ => Err(XmarError::invalid("unknown remap mode")),
        }
    }
}

fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Predicted target for one row of victim logits.
///
/// Many-to-one: the winning source is the highest logit among assigned
/// sources (ties to the lowest owning target, then the lowest source index),
/// reported as its owning target. Linear: argmax of the head output.
pub fn infer_target_label(remap: &Remap, z: &[f32]) -> Result<usize> {
    match remap {
        Remap::ManyToOne { mapping, aggregation: Aggregation::Max } => {
            if z.len() != mapping.num_sources {
                return Err(XmarError::invalid(format!(
                    "logit row has {} entries, mapping expects {}",
                    z.len(),
                    mapping.num_sources
                )));
            }
            let mut best: Option<(usize, usize)> = None;
            for (t, sources) in mapping.assignments.iter().enumerate() {
                let mut sorted = sources.clone();
                sorted.sort_unstable();
                for s in sorted {
                    if best.is_none_or(|(_, b)| z[s] > z[b]) {
                        best = Some((t, s));
                    }
                }
            }
            Ok(best.expect("mapping is nonempty").0)
        }
        _ => {
            let row = Tensor::new(vec![1, z.len()], z.to_vec())?;
            Ok(argmax(remap.scores(&row)?.data()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_roundrobin_example() {
        let m = build_roundrobin(&[0.1, 0.9, 0.5, 0.7], 2, 2).unwrap();
        assert_eq!(m.assignments(), &[vec![1, 2], vec![3, 0]]);
    }

    #[test]
    fn roundrobin_degenerate_and_ties() {
        let m = build_roundrobin(&[0.3, -1.0, 2.0], 1, 3).unwrap();
        let mut all = m.assignments()[0].clone();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        let m = build_roundrobin(&[0.5, 0.5, 0.5], 2, 1).unwrap();
        assert_eq!(m.assignments(), &[vec![0], vec![1]]);
        assert!(build_roundrobin(&[0.0; 5], 3, 2).is_err());
    }

    #[test]
    fn default_m_clipping() {
        assert_eq!(sources_per_target(1000, 3, DEFAULT_SOURCES_PER_TARGET), 10);
        assert_eq!(sources_per_target(10, 3, DEFAULT_SOURCES_PER_TARGET), 3);
    }

    #[test]
    fn aggregate_examples() {
        let mapping = ManyToOneMapping::new(vec![vec![0, 2], vec![1, 3]], 4).unwrap();
        let z = Tensor::new(vec![1, 4], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        assert_eq!(aggregate_max(&mapping, &z).unwrap().data(), &[3.0, 5.0]);
        let singles = ManyToOneMapping::new(vec![vec![2], vec![0]], 4).unwrap();
        assert_eq!(aggregate_max(&singles, &z).unwrap().data(), &[3.0, 1.0]);
        let shifted = Tensor::from_fn(vec![1, 4], |i| z.data()[i] + 7.5).unwrap();
        assert_eq!(aggregate_max(&mapping, &shifted).unwrap().data(), &[10.5, 12.5]);
    }

    #[test]
    fn mapping_validation() {
        assert!(ManyToOneMapping::new(vec![vec![0, 1], vec![1, 2]], 4).is_err());
        assert!(ManyToOneMapping::new(vec![vec![0, 1], vec![2]], 4).is_err());
        assert!(ManyToOneMapping::new(vec![vec![0, 4]], 4).is_err());
    }

    #[test]
    fn linear_examples() {
        let z = Tensor::new(vec![1, 5], vec![0.3, 2.0, -1.0, 0.5, 9.0]).unwrap();
        let accessible = vec![1, 3, 0];
        let p = softmax(&[2.0, 0.5, 0.3]);
        let identity = Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }).unwrap();
        let head = LinearHead::from_parts(identity, None, accessible.clone()).unwrap();
        assert_eq!(linear_map(&head, &z).unwrap().data(), &p[..]);
        let zeros = LinearHead::from_parts(Tensor::zeros(vec![3, 3]).unwrap(), None, accessible.clone()).unwrap();
        assert!(linear_map(&zeros, &z).unwrap().data().iter().all(|&v| v == 0.0));
        let perm = Tensor::new(vec![3, 3], vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let head = LinearHead::from_parts(perm, None, accessible).unwrap();
        assert_eq!(linear_map(&head, &z).unwrap().data(), &[p[2], p[0], p[1]]);
        let out_of_range = LinearHead::from_parts(Tensor::zeros(vec![3, 1]).unwrap(), None, vec![7]).unwrap();
        assert!(linear_map(&out_of_range, &z).is_err());
        assert!(LinearHead::from_parts(Tensor::zeros(vec![3, 2]).unwrap(), None, vec![1, 1]).is_err());
    }

    #[test]
    fn taped_linear_matches_plain() {
        let head = LinearHead::new(3, vec![4, 0], true, 9).unwrap();
        let z = Tensor::from_fn(vec![2, 5], |i| (i as f32 * 0.37).sin()).unwrap();
        let remap = Remap::Linear(head.clone());
        let mut tape = Tape::<f32>::new();
        let zv = tape.constant(z.clone()).unwrap();
        let w = tape.constant(head.weight().clone()).unwrap();
        let b = tape.constant(head.bias().unwrap().clone()).unwrap();
        let out = remap.scores_on(&mut tape, zv, Some(HeadVars { weight: w, bias: Some(b) })).unwrap();
        let plain = linear_map(&head, &z).unwrap();
        assert!(tape.value(out).max_abs_diff(&plain).unwrap() < 1e-6);
    }

    #[test]
    fn infer_examples() {
        let mapping = ManyToOneMapping::new(vec![vec![0, 2], vec![1, 3]], 4).unwrap();
        let remap = Remap::ManyToOne { mapping, aggregation: Aggregation::Max };
        assert_eq!(infer_target_label(&remap, &[9.0, 0.0, 0.0, 0.0]).unwrap(), 0);
        assert_eq!(infer_target_label(&remap, &[1.0, 1.0, 0.0, 0.0]).unwrap(), 0);
        let mapping = ManyToOneMapping::new(vec![vec![0], vec![1]], 3).unwrap();
        let remap = Remap::ManyToOne { mapping, aggregation: Aggregation::Max };
        assert_eq!(infer_target_label(&remap, &[0.0, 1.0, 50.0]).unwrap(), 1);
        assert_eq!(argmax(&[0.2, 0.7, 0.1]), 1);
    }

    #[test]
    fn serialization_round_trip() {
        for remap in [
            Remap::ManyToOne {
                mapping: build_roundrobin(&[0.1, 0.9, 0.5, 0.7, 0.2], 2, 2).unwrap(),
                aggregation: Aggregation::Max,
            },
            Remap::Linear(LinearHead::new(3, vec![2, 0], true, 1).unwrap()),
            Remap::Linear(LinearHead::new(3, vec![2, 0, 1], false, 1).unwrap()),
        ] {
            let mut ck = Checkpoint::new();
            ck.set_meta("remap", remap.to_json());
            remap.write_arrays(&mut ck);
            let ck = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            assert_eq!(Remap::from_checkpoint(&ck).unwrap(), remap);
        }
    }

    #[test]
    fn top_q() {
        assert_eq!(top_q_labels(&[0.1, 0.9, 0.5, 0.9], 3).unwrap(), vec![1, 3, 2]);
        assert!(top_q_labels(&[0.1], 2).is_err());
    }
}
