//! Slicing a backbone into gradient-isolated local modules with independent
//! auxiliary heads, plus overlapping cascade groups with their own heads.

use std::ops::Range;

use serde::Serialize;

use crate::error::{ensure, Result};
use crate::nn::{build_aux_head, AuxHeadSpec, AuxNetwork, Mode, Model};
use crate::optim::ParamRef;
use crate::pff::fused_aux_forward;
use crate::tensor::{Element, Tensor};

/// Module `index` (1-based) owning backbone units `units`.
#[derive(Debug, Clone)]
pub struct LocalModule<T: Element> {
    pub index: usize,
    pub units: Range<usize>,
    /// Independent auxiliary head; `None` for the last module, whose final
    /// unit is the classifier.
    pub aux: Option<AuxNetwork<T>>,
}

#[derive(Debug, Clone)]
pub struct CascadeGroup<T: Element> {
    pub index: usize,
    /// 1-based module indices `index..index+k`.
    pub members: Vec<usize>,
    pub aux: AuxNetwork<T>,
}

#[derive(Debug, Clone)]
pub struct Partition<T: Element> {
    pub model: Model<T>,
    pub modules: Vec<LocalModule<T>>,
    pub groups: Vec<CascadeGroup<T>>,
    pub k: usize,
}

/// Unit counts of a balanced split: the first `units % k` modules get one extra.
pub fn balanced_sizes(units: usize, k: usize) -> Vec<usize> {
    (0..k).map(|j| units / k + usize::from(j < units % k)).collect()
}

fn aux_spec_for<T: Element>(spec: &AuxHeadSpec, model: &Model<T>) -> AuxHeadSpec {
    AuxHeadSpec {
        num_classes: model.num_classes(),
        ..*spec
    }
}

/// Splits `model` into `k` modules; modules `1..k` get fresh independent heads.
pub fn split<T: Element>(model: &Model<T>, k: usize, aux: &AuxHeadSpec, seed: u64) -> Result<Vec<LocalModule<T>>> {
    let units = model.num_units();
    ensure!(k >= 1 && k <= units, "K = {k} outside 1..={units}");
    let spec = aux_spec_for(aux, model);
    let mut start = 0;
    let mut modules = Vec::with_capacity(k);
    for (j, size) in balanced_sizes(units, k).into_iter().enumerate() {
        let end = start + size;
        let head = if j + 1 < k {
            let shape = model.unit_output_shape(end - 1);
            ensure!(
                shape.len() == 3,
                "module {} ends with output {shape:?}; aux heads need C×H×W",
                j + 1
            );
            Some(build_aux_head(&spec, shape, &format!("aux.ind{}", j + 1), seed)?)
        } else {
            None
        };
        modules.push(LocalModule {
            index: j + 1,
            units: start..end,
            aux: head,
        });
        start = end;
    }
    Ok(modules)
}

/// Width-`k` windows over modules `1..K-1`, each with a fresh cascade head.
pub fn make_cascade_groups<T: Element>(
    model: &Model<T>,
    modules: &[LocalModule<T>],
    k: usize,
    aux: &AuxHeadSpec,
    seed: u64,
) -> Result<Vec<CascadeGroup<T>>> {
    let big_k = modules.len();
    ensure!(k >= 2, "cascade width must be >= 2, got {k}");
    ensure!(k <= big_k, "cascade width {k} exceeds K = {big_k}");
    let covered = big_k - 1;
    if covered < k {
        return Ok(Vec::new());
    }
    let spec = aux_spec_for(aux, model);
    (1..=covered - k + 1)
        .map(|i| {
            let last = &modules[i + k - 2];
            let shape = model.unit_output_shape(last.units.end - 1);
            Ok(CascadeGroup {
                index: i,
                members: (i..i + k).collect(),
                aux: build_aux_head(&spec, shape, &format!("aux.cas{i}"), seed)?,
            })
        })
        .collect()
}

/// Boundary activations of one stem pass. `outputs[j-1]` is module `j`'s
/// output with its graph intact; the next module consumed a detached copy
/// when the stem was isolated.
#[derive(Debug, Clone)]
pub struct StemTrace<T: Element> {
    pub outputs: Vec<Tensor<T>>,
    pub inputs: Vec<Tensor<T>>,
}

impl<T: Element> StemTrace<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.outputs.last().expect("at least one module")
    }
}

impl<T: Element> Partition<T> {
    /// `cascade_k = None` builds no cascade groups.
    pub fn new(model: Model<T>, k_modules: usize, cascade_k: Option<usize>, aux: &AuxHeadSpec, seed: u64) -> Result<Self> {
        let modules = split(&model, k_modules, aux, seed)?;
        let (groups, k) = match cascade_k {
            Some(k) => (make_cascade_groups(&model, &modules, k, aux, seed)?, k),
            None => (Vec::new(), 0),
        };
        Ok(Self {
            model,
            modules,
            groups,
            k,
        })
    }

    pub fn num_modules(&self) -> usize {
        self.modules.len()
    }

    /// θ_j.
    pub fn module_params(&self, j: usize) -> Vec<ParamRef<T>> {
        self.modules[j - 1]
            .units
            .clone()
            .flat_map(|u| self.model.unit_params(u))
            .collect()
    }

    /// γ_j (empty for the last module).
    pub fn independent_params(&self, j: usize) -> Vec<ParamRef<T>> {
        self.modules[j - 1]
            .aux
            .as_ref()
            .map(AuxNetwork::params)
            .unwrap_or_default()
    }

    /// β_i.
    pub fn cascade_params(&self, i: usize) -> Vec<ParamRef<T>> {
        self.groups[i - 1].aux.params()
    }

    /// Every trainable parameter: backbone, then independent heads, then cascade heads.
    pub fn all_params(&self) -> Vec<ParamRef<T>> {
        let mut out = self.model.params();
        for j in 1..=self.num_modules() {
            out.extend(self.independent_params(j));
        }
        for i in 1..=self.groups.len() {
            out.extend(self.cascade_params(i));
        }
        out
    }

    fn forward_module(&self, j: usize, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.model.forward_range(self.modules[j - 1].units.clone(), x, mode)
    }

    /// Runs all modules in order. With `isolate`, each module reads a
    /// detached copy of its predecessor's output.
    pub fn forward_stem(&self, x: &Tensor<T>, mode: Mode, isolate: bool) -> Result<StemTrace<T>> {
        let mut inputs = Vec::with_capacity(self.num_modules());
        let mut outputs = Vec::with_capacity(self.num_modules());
        let mut h = x.clone();
        for j in 1..=self.num_modules() {
            inputs.push(h.clone());
            let out = self.forward_module(j, &h, mode)?;
            h = if isolate { out.detach() } else { out.clone() };
            outputs.push(out);
        }
        Ok(StemTrace { outputs, inputs })
    }

    /// Logits of module `j`'s independent head on its stem output.
    pub fn independent_logits(&self, j: usize, stem: &StemTrace<T>, mode: Mode, patch_n: usize) -> Result<Tensor<T>> {
        ensure!(j >= 1 && j < self.num_modules(), "module {j} has no independent head");
        let aux = self.modules[j - 1].aux.as_ref().expect("modules before K carry a head");
        fused_aux_forward(aux, &stem.outputs[j - 1], patch_n, mode)
    }

    /// Output of group `i`'s last member, re-forwarded from the stem output of
    /// module `i` without boundary detaches.
    pub fn cascade_features(&self, i: usize, stem: &StemTrace<T>, mode: Mode) -> Result<Tensor<T>> {
        ensure!(i >= 1 && i <= self.groups.len(), "no cascade group {i}");
        let g = &self.groups[i - 1];
        let mut h = stem.outputs[g.members[0] - 1].clone();
        for &j in &g.members[1..] {
            h = self.forward_module(j, &h, mode)?;
        }
        Ok(h)
    }

    pub fn forward_cascade(&self, i: usize, stem: &StemTrace<T>, mode: Mode, patch_n: usize) -> Result<Tensor<T>> {
        let h = self.cascade_features(i, stem, mode)?;
        fused_aux_forward(&self.groups[i - 1].aux, &h, patch_n, mode)
    }

    /// Number of loss terms supervising module `j`.
    pub fn supervision_count(&self, j: usize) -> usize {
        let own = 1;
        own + self.groups.iter().filter(|g| g.members.contains(&j)).count()
    }

    pub fn summary(&self) -> PartitionSummary {
        let count = |ps: Vec<ParamRef<T>>| ps.iter().map(|p| p.numel()).sum();
        PartitionSummary {
            arch: self.model.arch().to_string(),
            num_modules: self.num_modules(),
            cascade_k: self.k,
            modules: self
                .modules
                .iter()
                .map(|m| ModuleSummary {
                    index: m.index,
                    units: m.units.clone().collect(),
                    theta_params: count(self.module_params(m.index)),
                    gamma_params: count(self.independent_params(m.index)),
                })
                .collect(),
            groups: self
                .groups
                .iter()
                .map(|g| GroupSummary {
                    index: g.index,
                    members: g.members.clone(),
                    beta_params: g.aux.num_params(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ModuleSummary {
    pub index: usize,
    pub units: Vec<usize>,
    pub theta_params: usize,
    pub gamma_params: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupSummary {
    pub index: usize,
    pub members: Vec<usize>,
    pub beta_params: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PartitionSummary {
    pub arch: String,
    pub num_modules: usize,
    pub cascade_k: usize,
    pub modules: Vec<ModuleSummary>,
    pub groups: Vec<GroupSummary>,
}
