//! Low-rank adapter banks with a shared `A` and share-grouped `B` matrices.
//!
//! One [`AdapterBank`] exists per adapted projection type. Every layer `i`
//! computes the increment `(α/r) · B̃(i) · A · x`, where `B̃(i)` is the `B` of
//! the [`ShareGroup`] that currently owns layer `i`. Merging two groups moves
//! the lower group's layers onto the upper group's `B` and discards the
//! lower `B`; the surviving weights are never modified.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Attention projection that carries an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionType {
    Query,
    Value,
}

impl ProjectionType {
    pub const ALL: [ProjectionType; 2] = [ProjectionType::Query, ProjectionType::Value];

    pub fn as_str(self) -> &'static str {
        match self {
            ProjectionType::Query => "query",
            ProjectionType::Value => "value",
        }
    }

    pub(crate) fn short(self) -> &'static str {
        match self {
            ProjectionType::Query => "q",
            ProjectionType::Value => "v",
        }
    }
}

impl fmt::Display for ProjectionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How adapter weights are shared across layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterMode {
    /// Independent `A` and `B` per layer.
    Lora,
    /// One shared `A`, one `B` per layer, no merging.
    SharedA,
    /// One shared `A`; every `n` consecutive layers share a `B`.
    FixedShare(usize),
    /// One shared `A`; `B`s start per layer and are merged during training.
    Aslora,
}

impl AdapterMode {
    pub fn label(self) -> String {
        match self {
            AdapterMode::Lora => "lora".into(),
            AdapterMode::SharedA => "shared_a".into(),
            AdapterMode::FixedShare(n) => format!("fixed_share({n})"),
            AdapterMode::Aslora => "aslora".into(),
        }
    }

    pub fn shares_a(self) -> bool {
        !matches!(self, AdapterMode::Lora)
    }
}

impl fmt::Display for AdapterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub num_layers: usize,
    pub model_dim: usize,
    pub adapted_types: Vec<ProjectionType>,
    pub mode: AdapterMode,
    /// Standard deviation of the Gaussian `A` initialization; `1/√r` when unset.
    pub a_init_std: Option<f64>,
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("rank", "must be positive"));
        }
        if self.model_dim == 0 {
            return Err(Error::config("model_dim", "must be positive"));
        }
        if self.rank >= self.model_dim {
            return Err(Error::config(
                "rank",
                format!("must be below model_dim ({})", self.model_dim),
            ));
        }
        if self.num_layers == 0 {
            return Err(Error::config("num_layers", "must be positive"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::config("alpha", "must be a non-negative number"));
        }
        if self.adapted_types.is_empty() {
            return Err(Error::config("adapted_types", "must not be empty"));
        }
        let mut seen = self.adapted_types.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.adapted_types.len() {
            return Err(Error::config("adapted_types", "contains duplicates"));
        }
        if let AdapterMode::FixedShare(n) = self.mode {
            if n == 0 || n > self.num_layers {
                return Err(Error::config(
                    "share_n",
                    format!("must be in 1..={}", self.num_layers),
                ));
            }
        }
        if let Some(std) = self.a_init_std {
            if !(std.is_finite() && std > 0.0) {
                return Err(Error::config("a_init_std", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn init_std(&self) -> f64 {
        self.a_init_std
            .unwrap_or_else(|| 1.0 / (self.rank as f64).sqrt())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Number of share groups a freshly initialized bank starts with.
    pub fn initial_groups(&self) -> usize {
        match self.mode {
            AdapterMode::FixedShare(n) => self.num_layers.div_ceil(n),
            _ => self.num_layers,
        }
    }
}

/// Trainable adapter entries after `merges_done` merges per adapted type.
///
/// Per type: `2·L·d·r` for LoRA, `(1 + L − merges)·d·r` with a shared `A`,
/// and `(1 + ⌈L/n⌉)·d·r` for fixed sharing.
pub fn trainable_param_count(cfg: &AdapterConfig, merges_done: usize) -> Result<usize> {
    let l = cfg.num_layers;
    if merges_done >= l {
        return Err(Error::contract(format!(
            "merges_done = {merges_done} but at most {} merges fit in {l} layers",
            l.saturating_sub(1)
        )));
    }
    let dr = cfg.model_dim * cfg.rank;
    let per_type = match cfg.mode {
        AdapterMode::Lora => 2 * l * dr,
        AdapterMode::SharedA => (1 + l) * dr,
        AdapterMode::Aslora => (1 + l - merges_done) * dr,
        AdapterMode::FixedShare(n) => (1 + l.div_ceil(n)) * dr,
    };
    Ok(per_type * cfg.adapted_types.len())
}

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct GroupId(pub usize);

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g{}", self.0)
    }
}

/// Layers that currently use one common `B`.
#[derive(Clone, Debug)]
pub struct ShareGroup<T: Scalar = f32> {
    pub id: GroupId,
    members: Vec<usize>,
    pub b: Tensor<T>,
}

impl<T: Scalar> ShareGroup<T> {
    pub fn members(&self) -> &[usize] {
        &self.members
    }

    /// Highest member layer; the group's `B` is conceptually that layer's.
    pub fn representative(&self) -> usize {
        *self.members.last().expect("groups are never empty")
    }
}

/// Record of one merge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub step: usize,
    #[serde(rename = "type")]
    pub projection: ProjectionType,
    pub absorbed_group: GroupId,
    /// Members of the absorbed group before the merge.
    pub absorbed_members: Vec<usize>,
    pub survivor_group: GroupId,
    /// Members of the surviving group before the merge.
    pub survivor_members: Vec<usize>,
    pub similarity: f64,
}

impl MergeEvent {
    pub fn absorbed_representative(&self) -> usize {
        self.absorbed_members.iter().copied().max().unwrap_or(0)
    }

    pub fn survivor_representative(&self) -> usize {
        self.survivor_members.iter().copied().max().unwrap_or(0)
    }
}

/// Layer → group table for one projection type.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentSnapshot {
    #[serde(rename = "type")]
    pub projection: ProjectionType,
    /// Entry `i` is the group of layer `i`.
    pub layer_to_group: Vec<GroupId>,
}

impl AssignmentSnapshot {
    pub fn distinct_groups(&self) -> usize {
        let mut ids = self.layer_to_group.clone();
        ids.sort();
        ids.dedup();
        ids.len()
    }
}

/// Graph handles for one bank's tensors during a single step.
#[derive(Clone, Debug, Default)]
pub struct BankVars {
    a: Vec<Var>,
    b: BTreeMap<GroupId, Var>,
}

/// Adapter state of one projection type.
#[derive(Clone, Debug)]
pub struct AdapterBank<T: Scalar = f32> {
    projection: ProjectionType,
    mode: AdapterMode,
    rank: usize,
    dim: usize,
    scaling: f64,
    /// One shared `A` (r×d), or one per layer in LoRA mode.
    a: Vec<Tensor<T>>,
    groups: BTreeMap<GroupId, ShareGroup<T>>,
    assignment: Vec<GroupId>,
}

impl<T: Scalar> AdapterBank<T> {
    /// Gaussian `A`, zero `B`, and the mode's initial grouping.
    pub fn init<R: Rng + ?Sized>(
        cfg: &AdapterConfig,
        projection: ProjectionType,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (l, d, r) = (cfg.num_layers, cfg.model_dim, cfg.rank);
        let std = cfg.init_std();
        let a_count = if cfg.mode.shares_a() { 1 } else { l };
        let a = (0..a_count)
            .map(|_| Tensor::randn(&[r, d], std, rng))
            .collect();
        let n = match cfg.mode {
            AdapterMode::FixedShare(n) => n,
            _ => 1,
        };
        let mut groups = BTreeMap::new();
        let mut assignment = Vec::with_capacity(l);
        for (k, start) in (0..l).step_by(n).enumerate() {
            let members: Vec<usize> = (start..(start + n).min(l)).collect();
            let id = GroupId(k);
            assignment.extend(members.iter().map(|_| id));
            groups.insert(
                id,
                ShareGroup {
                    id,
                    members,
                    b: Tensor::zeros(&[d, r]),
                },
            );
        }
        Ok(Self {
            projection,
            mode: cfg.mode,
            rank: r,
            dim: d,
            scaling: cfg.scaling(),
            a,
            groups,
            assignment,
        })
    }

    pub fn projection(&self) -> ProjectionType {
        self.projection
    }

    pub fn mode(&self) -> AdapterMode {
        self.mode
    }

    pub fn num_layers(&self) -> usize {
        self.assignment.len()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    pub fn live_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, id: GroupId) -> Option<&ShareGroup<T>> {
        self.groups.get(&id)
    }

    pub fn group_mut(&mut self, id: GroupId) -> Option<&mut ShareGroup<T>> {
        self.groups.get_mut(&id)
    }

    /// Live groups in id order.
    pub fn groups(&self) -> impl Iterator<Item = &ShareGroup<T>> {
        self.groups.values()
    }

    pub fn group_of(&self, layer: usize) -> Result<GroupId> {
        self.assignment.get(layer).copied().ok_or(Error::Index {
            what: "layer",
            index: layer,
            len: self.assignment.len(),
        })
    }

    pub fn a_matrices(&self) -> &[Tensor<T>] {
        &self.a
    }

    pub fn a_for_layer(&self, layer: usize) -> &Tensor<T> {
        if self.a.len() == 1 {
            &self.a[0]
        } else {
            &self.a[layer]
        }
    }

    /// Number of trainable adapter entries currently held.
    pub fn param_count(&self) -> usize {
        self.a.iter().map(Tensor::numel).sum::<usize>()
            + self.groups.values().map(|g| g.b.numel()).sum::<usize>()
    }

    pub fn a_name(&self, index: usize) -> String {
        if self.a.len() == 1 {
            format!("{}.A", self.projection.short())
        } else {
            format!("{}.A.{index}", self.projection.short())
        }
    }

    pub fn b_name(&self, id: GroupId) -> String {
        format!("{}.B.{}", self.projection.short(), id.0)
    }

    /// Trainable tensors in a fixed order: `A`s, then live `B`s by group id.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self
            .a
            .iter()
            .enumerate()
            .map(|(i, t)| (self.a_name(i), t))
            .collect();
        out.extend(self.groups.values().map(|g| (self.b_name(g.id), &g.b)));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let names: Vec<String> = (0..self.a.len()).map(|i| self.a_name(i)).collect();
        let b_names: Vec<String> = self.groups.keys().map(|&id| self.b_name(id)).collect();
        let mut out: Vec<(String, &mut Tensor<T>)> = names.into_iter().zip(self.a.iter_mut()).collect();
        out.extend(b_names.into_iter().zip(self.groups.values_mut().map(|g| &mut g.b)));
        out
    }

    /// Places every adapter tensor on the graph as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph<T>) -> BankVars {
        BankVars {
            a: self.a.iter().map(|t| graph.param(t.clone())).collect(),
            b: self
                .groups
                .iter()
                .map(|(&id, g)| (id, graph.param(g.b.clone())))
                .collect(),
        }
    }

    /// Like [`bind`](Self::bind) but records no gradients.
    pub fn bind_const(&self, graph: &mut Graph<T>) -> BankVars {
        BankVars {
            a: self.a.iter().map(|t| graph.input(t.clone())).collect(),
            b: self
                .groups
                .iter()
                .map(|(&id, g)| (id, graph.input(g.b.clone())))
                .collect(),
        }
    }

    /// `(α/r) · B̃(layer) · A · x` for row-major `x` of shape n×d.
    pub fn forward(
        &self,
        graph: &mut Graph<T>,
        vars: &BankVars,
        layer: usize,
        x: Var,
    ) -> Result<Var> {
        let gid = self.group_of(layer)?;
        let a = if vars.a.len() == 1 {
            vars.a[0]
        } else {
            vars.a[layer]
        };
        let b = *vars
            .b
            .get(&gid)
            .ok_or_else(|| Error::contract(format!("no bound B for group {gid}")))?;
        let ax = graph.matmul_t(x, a)?;
        let bax = graph.matmul_t(ax, b)?;
        Ok(graph.scale(bax, T::from_f64(self.scaling)))
    }

    /// Adapter increment for `x` (n×d) without recording gradients.
    pub fn increment(&self, layer: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut graph = Graph::new();
        let vars = self.bind_const(&mut graph);
        let xv = graph.input(x.clone());
        let out = self.forward(&mut graph, &vars, layer, xv)?;
        Ok(graph.value(out).clone())
    }

    /// Copies gradients from the graph into the bank's tensors.
    pub fn absorb_grads(&mut self, graph: &Graph<T>, vars: &BankVars) -> Result<()> {
        for (t, &v) in self.a.iter_mut().zip(&vars.a) {
            if let Some(g) = graph.grad(v) {
                t.accumulate_grad(g)?;
            }
        }
        for (id, &v) in &vars.b {
            if let (Some(group), Some(g)) = (self.groups.get_mut(id), graph.grad(v)) {
                group.b.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Reassigns every layer of `low` to `high` and drops `low`'s `B`.
    ///
    /// `high` must have the greater representative layer. The returned event
    /// carries step 0 and similarity 0; the merge engine fills both in.
    pub fn apply_merge(&mut self, low: GroupId, high: GroupId) -> Result<MergeEvent> {
        if low == high {
            return Err(Error::contract(format!("cannot merge {low} into itself")));
        }
        let (lo, hi) = match (self.groups.get(&low), self.groups.get(&high)) {
            (Some(lo), Some(hi)) => (lo, hi),
            _ => {
                return Err(Error::contract(format!(
                    "merge of {low} into {high}: both groups must be live"
                )))
            }
        };
        if hi.representative() <= lo.representative() {
            return Err(Error::contract(format!(
                "surviving group {high} (layer {}) must sit above absorbed group {low} (layer {})",
                hi.representative(),
                lo.representative()
            )));
        }
        let absorbed_members = lo.members.clone();
        let survivor_members = hi.members.clone();
        self.groups.remove(&low);
        let survivor = self.groups.get_mut(&high).expect("checked above");
        survivor.members.extend(&absorbed_members);
        survivor.members.sort_unstable();
        for &layer in &absorbed_members {
            self.assignment[layer] = high;
        }
        Ok(MergeEvent {
            step: 0,
            projection: self.projection,
            absorbed_group: low,
            absorbed_members,
            survivor_group: high,
            survivor_members,
            similarity: 0.0,
        })
    }

    pub fn snapshot_assignment(&self) -> AssignmentSnapshot {
        AssignmentSnapshot {
            projection: self.projection,
            layer_to_group: self.assignment.clone(),
        }
    }

    /// Rebuilds a bank from saved parts (used by checkpoint restore).
    pub(crate) fn from_parts(
        cfg: &AdapterConfig,
        projection: ProjectionType,
        a: Vec<Tensor<T>>,
        groups: Vec<(GroupId, Vec<usize>, Tensor<T>)>,
    ) -> Result<Self> {
        let l = cfg.num_layers;
        let mut assignment = vec![None; l];
        let mut map = BTreeMap::new();
        for (id, mut members, b) in groups {
            members.sort_unstable();
            for &m in &members {
                let slot = assignment.get_mut(m).ok_or(Error::Index {
                    what: "layer",
                    index: m,
                    len: l,
                })?;
                if slot.replace(id).is_some() {
                    return Err(Error::contract(format!("layer {m} owned by two groups")));
                }
            }
            if members.is_empty() {
                return Err(Error::contract(format!("group {id} has no members")));
            }
            map.insert(id, ShareGroup { id, members, b });
        }
        let assignment = assignment
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.ok_or_else(|| Error::contract(format!("layer {i} has no group"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            projection,
            mode: cfg.mode,
            rank: cfg.rank,
            dim: cfg.model_dim,
            scaling: cfg.scaling(),
            a,
            groups: map,
            assignment,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(l: usize, mode: AdapterMode) -> AdapterConfig {
        AdapterConfig {
            rank: 2,
            alpha: 2.0,
            num_layers: l,
            model_dim: 4,
            adapted_types: vec![ProjectionType::Query, ProjectionType::Value],
            mode,
            a_init_std: None,
        }
    }

    fn bank(l: usize, mode: AdapterMode) -> AdapterBank<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        AdapterBank::init(&cfg(l, mode), ProjectionType::Query, &mut rng).unwrap()
    }

    fn ids(v: &[usize]) -> Vec<GroupId> {
        v.iter().copied().map(GroupId).collect()
    }

    #[test]
    fn aslora_starts_with_singletons() {
        let b = bank(12, AdapterMode::Aslora);
        assert_eq!(b.live_groups(), 12);
        assert!(b.groups().all(|g| g.members().len() == 1));
        assert_eq!(b.a_matrices().len(), 1);
    }

    #[test]
    fn fixed_share_groups_consecutive_layers() {
        let b = bank(12, AdapterMode::FixedShare(3));
        let groups: Vec<_> = b.groups().map(|g| g.members().to_vec()).collect();
        assert_eq!(
            groups,
            vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8], vec![9, 10, 11]]
        );
        let reps: Vec<_> = b.groups().map(|g| g.representative()).collect();
        assert_eq!(reps, vec![2, 5, 8, 11]);

        let b = bank(5, AdapterMode::FixedShare(2));
        let last = b.groups().last().unwrap();
        assert_eq!(last.members(), &[4]);
    }

    #[test]
    fn lora_has_an_a_per_layer() {
        let b = bank(3, AdapterMode::Lora);
        assert_eq!(b.a_matrices().len(), 3);
        assert_ne!(b.a_matrices()[0], b.a_matrices()[1]);
    }

    #[test]
    fn zero_increment_at_init() {
        let b = bank(4, AdapterMode::Aslora);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        for layer in 0..4 {
            assert!(b.increment(layer, &x).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn hand_computed_increment() {
        // r=1, d=2, A=[[1,0]], B=[[2],[0]], α=r, x=[3,5] → [6,0]
        let c = AdapterConfig {
            rank: 1,
            alpha: 1.0,
            num_layers: 1,
            model_dim: 2,
            adapted_types: vec![ProjectionType::Query],
            mode: AdapterMode::SharedA,
            a_init_std: None,
        };
        let a = vec![Tensor::from_rows(&[&[1.0, 0.0]]).unwrap()];
        let b = Tensor::from_rows(&[&[2.0], &[0.0]]).unwrap();
        let bank =
            AdapterBank::<f64>::from_parts(&c, ProjectionType::Query, a, vec![(GroupId(0), vec![0], b)])
                .unwrap();
        let x = Tensor::from_rows(&[&[3.0, 5.0]]).unwrap();
        assert_eq!(bank.increment(0, &x).unwrap().data(), &[6.0, 0.0]);
    }

    #[test]
    fn unknown_layer_is_index_error() {
        let b = bank(4, AdapterMode::Aslora);
        let x = Tensor::<f64>::zeros(&[1, 4]);
        assert!(matches!(b.increment(4, &x), Err(Error::Index { .. })));
    }

    #[test]
    fn merge_moves_lower_onto_upper() {
        let mut b = bank(10, AdapterMode::Aslora);
        b.group_mut(GroupId(7)).unwrap().b.data_mut()[0] = 1.5;
        let before = b.group(GroupId(7)).unwrap().b.clone();
        let ev = b.apply_merge(GroupId(3), GroupId(7)).unwrap();
        assert_eq!(ev.absorbed_members, vec![3]);
        assert_eq!(ev.survivor_members, vec![7]);
        let g = b.group(GroupId(7)).unwrap();
        assert_eq!(g.members(), &[3, 7]);
        assert_eq!(g.representative(), 7);
        assert_eq!(g.b, before);
        assert!(b.group(GroupId(3)).is_none());
        assert_eq!(b.live_groups(), 9);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[2, 4], 1.0, &mut rng);
        assert_eq!(b.increment(3, &x).unwrap(), b.increment(7, &x).unwrap());
    }

    #[test]
    fn merge_of_multi_member_groups() {
        let mut b = bank(10, AdapterMode::Aslora);
        b.apply_merge(GroupId(0), GroupId(1)).unwrap();
        b.apply_merge(GroupId(5), GroupId(9)).unwrap();
        b.apply_merge(GroupId(1), GroupId(9)).unwrap();
        let g = b.group(GroupId(9)).unwrap();
        assert_eq!(g.members(), &[0, 1, 5, 9]);
        assert_eq!(g.representative(), 9);
    }

    #[test]
    fn merge_contract_errors() {
        let mut b = bank(4, AdapterMode::Aslora);
        assert!(matches!(
            b.apply_merge(GroupId(1), GroupId(1)),
            Err(Error::Contract(_))
        ));
        assert!(b.apply_merge(GroupId(3), GroupId(1)).is_err());
        assert!(b.apply_merge(GroupId(1), GroupId(42)).is_err());
    }

    #[test]
    fn assignment_snapshots() {
        let mut b = bank(4, AdapterMode::Aslora);
        assert_eq!(b.snapshot_assignment().layer_to_group, ids(&[0, 1, 2, 3]));
        b.apply_merge(GroupId(1), GroupId(3)).unwrap();
        assert_eq!(b.snapshot_assignment().layer_to_group, ids(&[0, 3, 2, 3]));

        let b = bank(12, AdapterMode::FixedShare(6));
        let snap = b.snapshot_assignment();
        assert_eq!(snap.distinct_groups(), 2);
        assert!(snap.layer_to_group[..6].iter().all(|&g| g == snap.layer_to_group[0]));
        assert!(snap.layer_to_group[6..].iter().all(|&g| g == snap.layer_to_group[6]));
        assert_ne!(snap.layer_to_group[0], snap.layer_to_group[6]);
    }

    #[test]
    fn param_counts() {
        let mut c = AdapterConfig {
            rank: 8,
            alpha: 16.0,
            num_layers: 12,
            model_dim: 768,
            adapted_types: vec![ProjectionType::Query, ProjectionType::Value],
            mode: AdapterMode::Lora,
            a_init_std: None,
        };
        assert_eq!(trainable_param_count(&c, 0).unwrap(), 294_912);
        c.mode = AdapterMode::Aslora;
        assert_eq!(trainable_param_count(&c, 7).unwrap(), 73_728);
        assert!(trainable_param_count(&c, 12).is_err());
        c.mode = AdapterMode::FixedShare(5);
        assert_eq!(trainable_param_count(&c, 0).unwrap(), 2 * 4 * 768 * 8);
    }

    #[test]
    fn bank_param_count_matches_formula() {
        for mode in [
            AdapterMode::Lora,
            AdapterMode::SharedA,
            AdapterMode::FixedShare(3),
            AdapterMode::Aslora,
        ] {
            let c = cfg(7, mode);
            let b = bank(7, mode);
            assert_eq!(
                b.param_count() * c.adapted_types.len(),
                trainable_param_count(&c, 0).unwrap()
            );
        }
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(4, AdapterMode::Aslora);
        c.rank = 4;
        assert!(c.validate().is_err());
        let mut c = cfg(4, AdapterMode::FixedShare(0));
        assert!(c.validate().is_err());
        c.mode = AdapterMode::FixedShare(4);
        assert!(c.validate().is_ok());
    }
}
