//! Grouped layer-wise learning-rate decay, decoupled-weight-decay Adam, and
//! the cosine schedule with linear warmup.
//!
//! Encoder layers are split bottom-up into `G` contiguous groups with the
//! embeddings attached to the lowest one. Adjacent groups differ in base
//! learning rate by the factor `λ`, anchored so that group `⌈G/2⌉` runs at
//! `η`:
//!
//! ```text
//! G = 3:   lower η/λ   middle η   upper η·λ   head  m·η·λ
//! ```
//!
//! The pooler and classifier form one extra group whose rate is
//! `head_multiplier` times the top encoder group.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamRole, ParamStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupRole {
    /// Encoder group `g` (0-based, bottom-up). Group 0 also holds the embeddings.
    Encoder(usize),
    /// Pooler and classifier.
    Head,
    /// Every parameter in one group; used when grouping is disabled.
    All,
}

impl fmt::Display for GroupRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupRole::Encoder(0) => write!(f, "embeddings+encoder0"),
            GroupRole::Encoder(g) => write!(f, "encoder{g}"),
            GroupRole::Head => write!(f, "head"),
            GroupRole::All => write!(f, "all"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub role: GroupRole,
    pub members: Vec<ParamId>,
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlrdConfig {
    pub groups: usize,
    pub eta: f64,
    pub lambda: f64,
    pub head_multiplier: f64,
    pub weight_decay: f64,
}

impl Default for LlrdConfig {
    fn default() -> Self {
        LlrdConfig {
            groups: 3,
            eta: 1e-5,
            lambda: 1.6,
            head_multiplier: 1.1,
            weight_decay: 0.01,
        }
    }
}

impl LlrdConfig {
    fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::Config("need at least one layer group".into()));
        }
        for (name, v) in [
            ("eta", self.eta),
            ("lambda", self.lambda),
            ("head_multiplier", self.head_multiplier),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay {} < 0", self.weight_decay)));
        }
        Ok(())
    }

    /// Base learning rate of each encoder group, bottom-up.
    pub fn group_lrs(&self) -> Vec<f64> {
        let g = self.groups;
        let mid = g.div_ceil(2) - 1;
        let mut lrs = vec![0.0; g];
        lrs[mid] = self.eta;
        for i in (0..mid).rev() {
            lrs[i] = lrs[i + 1] / self.lambda;
        }
        for i in mid + 1..g {
            lrs[i] = lrs[i - 1] * self.lambda;
        }
        lrs
    }

    pub fn head_lr(&self) -> f64 {
        self.head_multiplier * self.group_lrs()[self.groups - 1]
    }
}

/// Contiguous bottom-up split of `n_layers` into `groups` ranges. When the
/// split is uneven the lower groups take the extra layers.
pub fn layer_split(n_layers: usize, groups: usize) -> Result<Vec<Range<usize>>> {
    if groups == 0 || groups > n_layers {
        return Err(Error::Config(format!(
            "cannot split {n_layers} layers into {groups} groups"
        )));
    }
    let (base, extra) = (n_layers / groups, n_layers % groups);
    let mut start = 0;
    Ok((0..groups)
        .map(|g| {
            let len = base + usize::from(g < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

/// Partitions every parameter of `store` into grouped-LLRD groups.
pub fn build_grouped_llrd(store: &ParamStore, n_layers: usize, cfg: &LlrdConfig) -> Result<Vec<ParamGroup>> {
    cfg.validate()?;
    let split = layer_split(n_layers, cfg.groups)?;
    let lrs = cfg.group_lrs();
    let mut groups: Vec<ParamGroup> = lrs
        .iter()
        .enumerate()
        .map(|(g, &lr)| ParamGroup {
            role: GroupRole::Encoder(g),
            members: Vec::new(),
            lr,
            weight_decay: cfg.weight_decay,
        })
        .collect();
    let mut head = ParamGroup {
        role: GroupRole::Head,
        members: Vec::new(),
        lr: cfg.head_lr(),
        weight_decay: cfg.weight_decay,
    };
    for (id, p) in store.iter() {
        match p.role {
            ParamRole::Embeddings => groups[0].members.push(id),
            ParamRole::Layer(l) => {
                let g = split
                    .iter()
                    .position(|r| r.contains(&l))
                    .ok_or_else(|| Error::Config(format!("{} sits in layer {l} of {n_layers}", p.name)))?;
                groups[g].members.push(id);
            }
            ParamRole::Pooler | ParamRole::Classifier => head.members.push(id),
        }
    }
    groups.push(head);
    Ok(groups)
}

/// One group holding every parameter at a single learning rate.
pub fn single_group(store: &ParamStore, lr: f64, weight_decay: f64) -> Vec<ParamGroup> {
    vec![ParamGroup {
        role: GroupRole::All,
        members: store.ids().collect(),
        lr,
        weight_decay,
    }]
}

/// Adam with decoupled weight decay over explicit parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    groups: Vec<ParamGroup>,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(groups: Vec<ParamGroup>, store: &ParamStore) -> Result<Self> {
        let mut seen = vec![false; store.len()];
        for g in &groups {
            if !(g.lr.is_finite() && g.lr >= 0.0) {
                return Err(Error::Config(format!("group {} has lr {}", g.role, g.lr)));
            }
            for &id in &g.members {
                match seen.get_mut(id.0) {
                    None => return Err(Error::Config(format!("group {} names unknown {id:?}", g.role))),
                    Some(true) => {
                        return Err(Error::Config(format!(
                            "{} belongs to more than one group",
                            store.get(id).name
                        )))
                    }
                    Some(s) => *s = true,
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!(
                "{} is not in any group",
                store.get(ParamId(i)).name
            )));
        }
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        Ok(AdamW {
            groups,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first_moment, &self.second_moment)
    }

    /// Rebuilds an optimizer from serialized state.
    pub fn from_state(
        groups: Vec<ParamGroup>,
        step: u64,
        first_moment: Vec<Vec<f64>>,
        second_moment: Vec<Vec<f64>>,
        store: &ParamStore,
    ) -> Result<Self> {
        let mut opt = AdamW::new(groups, store)?;
        let fits = |m: &[Vec<f64>]| {
            m.len() == store.len() && m.iter().zip(store.iter()).all(|(v, (_, p))| v.len() == p.tensor.len())
        };
        if !fits(&first_moment) || !fits(&second_moment) {
            return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
        }
        opt.step = step;
        opt.first_moment = first_moment;
        opt.second_moment = second_moment;
        Ok(opt)
    }

    /// Applies one update with effective rate `group.lr · schedule_multiplier`.
    /// Weight decay is skipped for parameters flagged `decay == false`.
    pub fn step(&mut self, store: &mut ParamStore, schedule_multiplier: f64) -> Result<()> {
        for g in &self.groups {
            for &id in &g.members {
                if store.get(id).tensor.grad.is_none() {
                    return Err(Error::Contract(format!(
                        "no gradient for {}",
                        store.get(id).name
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for g in &self.groups {
            let lr = g.lr * schedule_multiplier;
            for &id in &g.members {
                let p = store.get_mut(id);
                let decay = if p.decay { lr * g.weight_decay } else { 0.0 };
                let grad = p.tensor.grad.take().expect("checked above");
                let m = &mut self.first_moment[id.0];
                let v = &mut self.second_moment[id.0];
                let theta = p.tensor.data_mut();
                for i in 0..theta.len() {
                    let gi = grad[i];
                    if decay != 0.0 {
                        theta[i] -= decay * theta[i];
                    }
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    theta[i] -= lr * mh / (vh.sqrt() + EPSILON);
                }
                p.tensor.grad = Some(grad);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub step: usize,
    pub total_steps: usize,
    pub warmup_frac: f64,
}

impl ScheduleState {
    pub fn new(total_steps: usize, warmup_frac: f64) -> Self {
        ScheduleState {
            step: 0,
            total_steps,
            warmup_frac,
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.total_steps as f64).round() as usize
    }
}

/// Linear warmup to 1 over the first `round(warmup_frac · T)` steps, then
/// half-cosine decay reaching 0 at step `T`.
pub fn cosine_warmup_multiplier(state: &ScheduleState) -> Result<f64> {
    let (t, total) = (state.step, state.total_steps);
    if total == 0 {
        return Err(Error::Contract("schedule needs total_steps > 0".into()));
    }
    if t > total {
        return Err(Error::Contract(format!("step {t} beyond total {total}")));
    }
    if !(0.0..=1.0).contains(&state.warmup_frac) {
        return Err(Error::Contract(format!(
            "warmup fraction {} outside [0, 1]",
            state.warmup_frac
        )));
    }
    let w = state.warmup_steps();
    Ok(if w > 0 && t <= w {
        t as f64 / w as f64
    } else {
        cosine_decay(t - w, total - w)
    })
}

/// Decay branch of the schedule, `0.5·(1 + cos(π·elapsed/span))`.
pub fn cosine_decay(elapsed: usize, span: usize) -> f64 {
    0.5 * (1.0 + (PI * elapsed as f64 / span as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn toy_store(n_layers: usize) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("emb", ParamRole::Embeddings, true, Tensor::zeros(&[2]));
        for l in 0..n_layers {
            s.add(format!("l{l}.w"), ParamRole::Layer(l), true, Tensor::zeros(&[2]));
            s.add(format!("l{l}.b"), ParamRole::Layer(l), false, Tensor::zeros(&[2]));
        }
        s.add("pool", ParamRole::Pooler, true, Tensor::zeros(&[2]));
        s.add("cls", ParamRole::Classifier, true, Tensor::zeros(&[2]));
        s
    }

    #[test]
    fn listed_grid_lrs() {
        let cfg = LlrdConfig {
            lambda: 1.6,
            ..LlrdConfig::default()
        };
        let lrs = cfg.group_lrs();
        assert!((lrs[0] - 6.25e-6).abs() < 1e-20);
        assert_eq!(lrs[1], 1e-5);
        assert!((lrs[2] - 1.6e-5).abs() < 1e-20);
        assert!((cfg.head_lr() - 1.76e-5).abs() < 1e-19);

        let cfg = LlrdConfig {
            lambda: 3.6,
            ..LlrdConfig::default()
        };
        let lrs = cfg.group_lrs();
        assert!((lrs[0] - 2.7778e-6).abs() < 1e-10);
        assert!((lrs[2] - 3.6e-5).abs() < 1e-20);

        let cfg = LlrdConfig {
            lambda: 1.0,
            ..LlrdConfig::default()
        };
        assert_eq!(cfg.group_lrs(), vec![1e-5; 3]);
    }

    #[test]
    fn layer_split_remainder_goes_low() {
        assert_eq!(layer_split(6, 3).unwrap(), vec![0..2, 2..4, 4..6]);
        assert_eq!(layer_split(7, 3).unwrap(), vec![0..3, 3..5, 5..7]);
        assert_eq!(layer_split(8, 3).unwrap(), vec![0..3, 3..6, 6..8]);
        assert!(layer_split(2, 3).is_err());
        assert!(layer_split(2, 0).is_err());
    }

    #[test]
    fn groups_partition_the_store() {
        let store = toy_store(6);
        let groups = build_grouped_llrd(&store, 6, &LlrdConfig::default()).unwrap();
        assert_eq!(groups.len(), 4);
        let mut all: Vec<usize> = groups.iter().flat_map(|g| g.members.iter().map(|p| p.0)).collect();
        all.sort_unstable();
        assert_eq!(all, (0..store.len()).collect::<Vec<_>>());
        // embeddings + layers 0,1 in the lowest group
        let names: Vec<&str> = groups[0].members.iter().map(|&id| store.get(id).name.as_str()).collect();
        assert_eq!(names, ["emb", "l0.w", "l0.b", "l1.w", "l1.b"]);
        assert_eq!(groups[3].role, GroupRole::Head);
        assert_eq!(groups[3].members.len(), 2);
        assert!(AdamW::new(groups, &store).is_ok());
    }

    #[test]
    fn too_many_groups_rejected() {
        let store = toy_store(2);
        let err = build_grouped_llrd(&store, 2, &LlrdConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn overlapping_or_missing_groups_rejected() {
        let store = toy_store(1);
        let mut groups = single_group(&store, 0.1, 0.0);
        groups.push(groups[0].clone());
        assert!(AdamW::new(groups, &store).is_err());
        let mut groups = single_group(&store, 0.1, 0.0);
        groups[0].members.pop();
        assert!(AdamW::new(groups, &store).is_err());
    }

    fn scalar_store(theta: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", ParamRole::Classifier, true, Tensor::scalar(theta));
        s.accumulate(id, &[grad]).unwrap();
        s
    }

    #[test]
    fn zero_grad_zero_decay_is_a_fixed_point() {
        let mut store = scalar_store(0.7, 0.0);
        let mut opt = AdamW::new(single_group(&store, 0.1, 0.0), &store).unwrap();
        for _ in 0..5 {
            opt.step(&mut store, 1.0).unwrap();
        }
        assert_eq!(store.tensor(ParamId(0)).data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(1.0, 1.0);
        let mut opt = AdamW::new(single_group(&store, 0.1, 0.0), &store).unwrap();
        opt.step(&mut store, 1.0).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + EPSILON);
        assert!((store.tensor(ParamId(0)).data()[0] - expected).abs() < 1e-15);
        assert!((store.tensor(ParamId(0)).data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_skips_flagged_params() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamRole::Classifier, true, Tensor::scalar(2.0));
        let b = store.add("b", ParamRole::Classifier, false, Tensor::scalar(2.0));
        store.accumulate(w, &[0.0]).unwrap();
        store.accumulate(b, &[0.0]).unwrap();
        let mut opt = AdamW::new(single_group(&store, 0.1, 0.5), &store).unwrap();
        opt.step(&mut store, 1.0).unwrap();
        assert!((store.tensor(w).data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        assert_eq!(store.tensor(b).data()[0], 2.0);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut store = scalar_store(1.0, 1.0);
        store.zero_grad();
        let mut opt = AdamW::new(single_group(&store, 0.1, 0.0), &store).unwrap();
        assert!(matches!(opt.step(&mut store, 1.0), Err(Error::Contract(_))));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn displacement_scales_with_group_lr() {
        let lambda = 2.6;
        let mut store = ParamStore::new();
        let a = store.add("a", ParamRole::Classifier, true, Tensor::scalar(0.3));
        let b = store.add("b", ParamRole::Classifier, true, Tensor::scalar(0.3));
        store.accumulate(a, &[0.37]).unwrap();
        store.accumulate(b, &[0.37]).unwrap();
        let eta = 1e-3;
        let groups = vec![
            ParamGroup {
                role: GroupRole::Encoder(0),
                members: vec![a],
                lr: eta,
                weight_decay: 0.0,
            },
            ParamGroup {
                role: GroupRole::Encoder(1),
                members: vec![b],
                lr: eta * lambda,
                weight_decay: 0.0,
            },
        ];
        let mut opt = AdamW::new(groups, &store).unwrap();
        opt.step(&mut store, 1.0).unwrap();
        let da = 0.3 - store.tensor(a).data()[0];
        let db = 0.3 - store.tensor(b).data()[0];
        assert!((db / da - lambda).abs() < 1e-9);
    }

    #[test]
    fn schedule_landmarks() {
        let total = 1000;
        let mut s = ScheduleState::new(total, 0.1);
        let w = s.warmup_steps();
        assert_eq!(w, 100);
        s.step = w;
        assert_eq!(cosine_warmup_multiplier(&s).unwrap(), 1.0);
        s.step = w + (total - w) / 2;
        assert!((cosine_warmup_multiplier(&s).unwrap() - 0.5).abs() < 1e-15);
        s.step = total;
        assert!(cosine_warmup_multiplier(&s).unwrap().abs() < 1e-15);
        s.step = total + 1;
        assert!(cosine_warmup_multiplier(&s).is_err());
        s.step = 0;
        assert_eq!(cosine_warmup_multiplier(&s).unwrap(), 0.0);
    }

    #[test]
    fn schedule_without_warmup_starts_at_one() {
        let s = ScheduleState::new(5, 0.0);
        assert_eq!(cosine_warmup_multiplier(&s).unwrap(), 1.0);
    }
}
