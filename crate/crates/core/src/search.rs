//! Search drivers: a budget-constrained random walk and a population-based
//! proxy-guided search.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{block_cost, network_cost, Budget, Cost, CostError};
use crate::graph::{NetworkSpec, OpKind};
use crate::mutation::{
    apply, apply_in_place_cached, propose_step_cached, Edit, MutationError, Proposal, SearchStepConfig,
};
use crate::proxy::{score_network, ProxyConfig, ProxyError, ProxyId};
use crate::tensor::Rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SearchError {
    #[error("seed network cost {cost:?} lies outside the budget {budget:?}")]
    SeedOutsideBudget { cost: Cost, budget: Budget },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Mutation(#[from] MutationError),
    #[error(transparent)]
    Proxy(#[from] ProxyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkConfig {
    pub steps: usize,
    pub step: SearchStepConfig,
    pub record_every: usize,
    pub seed: u64,
}

/// One walk step. `edit` is `None` for a step that found no acceptable edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkRecord {
    pub step: usize,
    pub edit: Option<Edit>,
    pub cost: Cost,
    /// Block FLOPs per op, present every `record_every` steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op_flops: Option<BTreeMap<OpKind, u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchLog {
    pub seed: u64,
    pub records: Vec<WalkRecord>,
}

impl SearchLog {
    pub fn edits(&self) -> impl Iterator<Item = &Edit> {
        self.records.iter().filter_map(|r| r.edit.as_ref())
    }
}

/// Summed FLOPs of every block node, by op.
pub fn op_flops(net: &NetworkSpec) -> Result<BTreeMap<OpKind, u64>, CostError> {
    let mut out = BTreeMap::new();
    for b in &net.blocks {
        for (op, f) in block_cost(b)?.op_flops() {
            *out.entry(op).or_insert(0) += f;
        }
    }
    Ok(out)
}

fn check_seed(net: &NetworkSpec, budget: &Budget) -> Result<Cost, SearchError> {
    let cost = network_cost(net)?.total;
    if !budget.contains(cost) {
        return Err(SearchError::SeedOutsideBudget { cost, budget: *budget });
    }
    Ok(cost)
}

/// [`random_walk_observed`] without an observer.
pub fn random_walk(seed_net: &NetworkSpec, cfg: &WalkConfig) -> Result<(NetworkSpec, SearchLog), SearchError> {
    random_walk_observed(seed_net, cfg, |_, _| {})
}

/// Run `cfg.steps` propose/apply steps from `seed_net`. Record 0 is the seed.
/// `observe` sees every network after its record is made.
pub fn random_walk_observed(
    seed_net: &NetworkSpec,
    cfg: &WalkConfig,
    mut observe: impl FnMut(&NetworkSpec, &WalkRecord),
) -> Result<(NetworkSpec, SearchLog), SearchError> {
    if cfg.record_every == 0 {
        return Err(SearchError::InvalidConfig("record_every must be positive".into()));
    }
    let mut cost = check_seed(seed_net, &cfg.step.budget)?;
    let mut rng = Rng::new(cfg.seed);
    let mut net = seed_net.clone();
    let mut log = SearchLog {
        seed: cfg.seed,
        records: Vec::with_capacity(cfg.steps + 1),
    };
    let first = WalkRecord {
        step: 0,
        edit: None,
        cost,
        op_flops: Some(op_flops(&net)?),
    };
    observe(&net, &first);
    log.records.push(first);
    let mut shapes = vec![None; net.blocks.len()];
    for step in 1..=cfg.steps {
        let edit = match propose_step_cached(&net, cost, &cfg.step, &mut rng, &mut shapes)? {
            Some(Proposal { edit, delta }) => {
                let cur = shapes[edit.block].take();
                shapes[edit.block] = Some(apply_in_place_cached(&mut net, &edit, cur)?);
                cost = cost.apply(delta)?;
                Some(edit)
            }
            None => None,
        };
        let op_flops = if step % cfg.record_every == 0 {
            Some(op_flops(&net)?)
        } else {
            None
        };
        let rec = WalkRecord {
            step,
            edit,
            cost,
            op_flops,
        };
        observe(&net, &rec);
        log.records.push(rec);
    }
    Ok((net, log))
}

/// Apply `edits` in order to `seed_net`.
pub fn replay<'a>(seed_net: &NetworkSpec, edits: impl IntoIterator<Item = &'a Edit>) -> Result<NetworkSpec, MutationError> {
    let mut net = seed_net.clone();
    for e in edits {
        net = apply(&net, e)?;
    }
    Ok(net)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvoConfig {
    /// Number of candidates generated.
    pub total_steps: usize,
    pub population_size: usize,
    /// Mutation steps applied to a parent to form one candidate.
    pub steps_per_candidate: usize,
    pub proxy: ProxyId,
    pub proxy_config: ProxyConfig,
    pub step: SearchStepConfig,
    pub seed: u64,
    /// Candidates generated from the same population before insertion.
    pub generation_size: usize,
    /// Worker threads; `None` uses the global pool. Never affects results.
    pub threads: Option<usize>,
}

impl EvoConfig {
    pub fn new(budget: Budget, proxy: ProxyId, seed: u64) -> Self {
        EvoConfig {
            total_steps: 1024,
            population_size: 64,
            steps_per_candidate: 5,
            proxy,
            proxy_config: ProxyConfig::default(),
            step: SearchStepConfig::new(budget),
            seed,
            generation_size: 1,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvoRecord {
    pub iteration: usize,
    /// Population slot of the parent when the candidate was drawn.
    pub parent: usize,
    /// One entry per mutation step; `None` for a step that found no edit.
    pub edits: Vec<Option<Edit>>,
    pub cost: Cost,
    /// `None` when a block exceeds the proxy's finite-difference limit; such
    /// candidates are logged but never join the population.
    pub score: Option<f64>,
    /// Lowest population score after this candidate's generation was inserted.
    pub population_min: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub net: NetworkSpec,
    pub cost: Cost,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvoResult {
    pub best: Member,
    pub population: Vec<Member>,
    pub log: Vec<EvoRecord>,
}

struct Child {
    parent: usize,
    net: NetworkSpec,
    cost: Cost,
    score: Option<f64>,
    edits: Vec<Option<Edit>>,
}

fn candidate(
    population: &[Member],
    iteration: usize,
    cfg: &EvoConfig,
) -> Result<Child, SearchError> {
    let mut rng = Rng::derive(cfg.seed, iteration as u64 + 1);
    let parent = rng.below(population.len());
    let mut net = population[parent].net.clone();
    let mut cost = population[parent].cost;
    let mut edits = Vec::with_capacity(cfg.steps_per_candidate);
    let mut shapes = vec![None; net.blocks.len()];
    for _ in 0..cfg.steps_per_candidate {
        match propose_step_cached(&net, cost, &cfg.step, &mut rng, &mut shapes)? {
            Some(Proposal { edit, delta }) => {
                let cur = shapes[edit.block].take();
                shapes[edit.block] = Some(apply_in_place_cached(&mut net, &edit, cur)?);
                cost = cost.apply(delta)?;
                edits.push(Some(edit));
            }
            None => edits.push(None),
        }
    }
    let score = match score_network(&net, cfg.proxy, rng.next_u64(), &cfg.proxy_config) {
        Ok(s) => Some(s.value),
        Err(ProxyError::TooManyParams { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(Child {
        parent,
        net,
        cost,
        score,
        edits,
    })
}

fn evolve_inner(seed_net: &NetworkSpec, cfg: &EvoConfig) -> Result<EvoResult, SearchError> {
    let cost = check_seed(seed_net, &cfg.step.budget)?;
    let seed_score = score_network(seed_net, cfg.proxy, Rng::derive(cfg.seed, 0).next_u64(), &cfg.proxy_config)?.value;
    let mut population = vec![
        Member {
            net: seed_net.clone(),
            cost,
            score: seed_score,
        };
        cfg.population_size
    ];
    let mut log = Vec::with_capacity(cfg.total_steps);
    let mut start = 0;
    while start < cfg.total_steps {
        let end = (start + cfg.generation_size).min(cfg.total_steps);
        let children: Vec<_> = (start..end)
            .into_par_iter()
            .map(|it| candidate(&population, it, cfg))
            .collect::<Result<_, _>>()?;
        let mut records = Vec::with_capacity(children.len());
        for (k, Child { parent, net, cost, score, edits }) in children.into_iter().enumerate() {
            records.push(EvoRecord {
                iteration: start + k,
                parent,
                edits,
                cost,
                score,
                population_min: 0.0,
            });
            if let Some(score) = score {
                population.push(Member { net, cost, score });
            }
        }
        // Stable: on ties the older member stays ahead.
        population.sort_by(|a, b| b.score.total_cmp(&a.score));
        population.truncate(cfg.population_size);
        let min = population.last().map_or(f64::NAN, |m| m.score);
        for mut r in records {
            r.population_min = min;
            log.push(r);
        }
        start = end;
    }
    Ok(EvoResult {
        best: population[0].clone(),
        population,
        log,
    })
}

/// Population search from `seed_net`. The population starts as
/// `population_size` copies of the seed; every candidate mutates a uniformly
/// drawn member, is scored, and the population keeps the top scores. Each
/// candidate draws from a stream derived from `(seed, iteration)`.
pub fn evolve(seed_net: &NetworkSpec, cfg: &EvoConfig) -> Result<EvoResult, SearchError> {
    if cfg.population_size == 0 || cfg.generation_size == 0 {
        return Err(SearchError::InvalidConfig(
            "population_size and generation_size must be positive".into(),
        ));
    }
    if cfg.population_size > cfg.total_steps.max(1) {
        return Err(SearchError::InvalidConfig(format!(
            "population_size {} exceeds total_steps {}",
            cfg.population_size, cfg.total_steps
        )));
    }
    match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| SearchError::InvalidConfig(e.to_string()))?
            .install(|| evolve_inner(seed_net, cfg)),
        None => evolve_inner(seed_net, cfg),
    }
}
