//! Training-free scoring: the decile entropy of a finite-difference
//! empirical Fisher spectrum, averaged over blocks, plus trivial baselines.
//!
//! For a block with parameters `θ ∈ R^P`, a random batch `x_1..x_B` and a
//! fixed unit vector `u`, let `s_i(θ) = <u, flatten(block(x_i; θ))>` and
//! `g_i` its central-difference gradient. The empirical Fisher is
//! `F = (1/B) Σ g_i g_iᵀ = GᵀG/B`. Its nonzero spectrum equals that of the
//! `B x B` dual Gram matrix `GGᵀ/B`, so the spectrum used here is the
//! eigenvalue list of whichever of the two is smaller (`min(P, B)` values).
//! Deciles are read from that list by linear interpolation.
//!
//! Only block parameters are scored; the stem, projections and head are not.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

use crate::cost::{network_cost, CostError};
use crate::graph::{BlockGraph, NetworkSpec};
use crate::interp::{forward, init_params, EvalContext, InterpError, ParamStore};
use crate::tensor::{normal_sample, Rng, Tensor};

/// Eigenvalues above `-EIG_CLAMP` are treated as zero when negative.
pub const EIG_CLAMP: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProxyError {
    #[error("block {block} has {params} parameters, above the finite-difference limit of {limit}")]
    TooManyParams {
        block: usize,
        params: usize,
        limit: usize,
    },
    #[error("batch size {0} is below the minimum of 10")]
    BatchTooSmall(usize),
    #[error("eigenvalue {0} is negative beyond tolerance")]
    NotPsd(f64),
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyId {
    Vkdnw,
    NegParams,
    NegFlops,
    Random,
}

impl fmt::Display for ProxyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProxyId::Vkdnw => "vkdnw",
            ProxyId::NegParams => "neg_params",
            ProxyId::NegFlops => "neg_flops",
            ProxyId::Random => "random",
        })
    }
}

impl FromStr for ProxyId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "vkdnw" => Ok(ProxyId::Vkdnw),
            "neg_params" | "negparams" => Ok(ProxyId::NegParams),
            "neg_flops" | "negflops" => Ok(ProxyId::NegFlops),
            "random" => Ok(ProxyId::Random),
            _ => Err(format!("unknown proxy `{s}` (expected vkdnw, neg_params, neg_flops or random)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub batch_size: usize,
    pub fd_step: f64,
    pub max_params: usize,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            batch_size: 64,
            fd_step: 1e-4,
            max_params: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherSpectrum {
    /// Non-increasing, non-negative.
    pub eigenvalues: Vec<f64>,
    pub deciles: [f64; 9],
}

impl FisherSpectrum {
    /// Clamp tiny negatives, sort, and read off the deciles.
    pub fn from_eigenvalues(mut eigenvalues: Vec<f64>) -> Result<Self, ProxyError> {
        for v in eigenvalues.iter_mut() {
            if *v < -EIG_CLAMP {
                return Err(ProxyError::NotPsd(*v));
            }
            *v = v.max(0.0);
        }
        eigenvalues.sort_by(|a, b| b.total_cmp(a));
        let deciles = deciles(&eigenvalues);
        Ok(FisherSpectrum { eigenvalues, deciles })
    }
}

/// The 10%..90% quantiles of `values` (any order), linearly interpolated at
/// position `q(n-1)` of the ascending list. All zero for an empty list.
pub fn deciles(values: &[f64]) -> [f64; 9] {
    let mut out = [0.0; 9];
    if values.is_empty() {
        return out;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    for (k, d) in out.iter_mut().enumerate() {
        let pos = (k + 1) as f64 / 10.0 * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let t = pos - lo as f64;
        *d = v[lo] + t * (v[hi] - v[lo]);
    }
    out
}

/// Entropy of the normalized deciles, `-Σ p log p` with `0 log 0 = 0`;
/// 0 when every decile is 0.
pub fn vkdnw_score(deciles: &[f64; 9]) -> f64 {
    let total: f64 = deciles.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    -deciles
        .iter()
        .map(|d| d / total)
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Eigenvalues of the symmetric `n x n` row-major matrix `a` by cyclic Jacobi
/// rotations, stopping when the off-diagonal mass falls below `tol` relative
/// to the Frobenius norm. Unordered.
pub fn jacobi_eigenvalues(mut a: Vec<f64>, n: usize, tol: f64) -> Vec<f64> {
    assert_eq!(a.len(), n * n, "matrix must be n x n");
    let frob: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if frob == 0.0 {
        return vec![0.0; n];
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= tol * frob {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

fn projections(block: &BlockGraph, params: &ParamStore, batch: &[Tensor], u: &[f64]) -> Result<Vec<f64>, InterpError> {
    let y = forward(block, params, batch, &mut EvalContext::deterministic())?;
    Ok(y.iter()
        .map(|t| t.data().iter().zip(u).map(|(a, b)| a * b).sum())
        .collect())
}

/// Central-difference gradients of `s_i = <u, block(x_i)>`, as a `B x P`
/// row-major matrix (row `i` is `g_i`).
pub fn fd_gradients(
    block: &BlockGraph,
    params: &ParamStore,
    batch: &[Tensor],
    u: &[f64],
    h: f64,
) -> Result<Vec<Vec<f64>>, InterpError> {
    let p = params.len();
    let b = batch.len();
    let columns: Vec<Vec<f64>> = (0..p)
        .into_par_iter()
        .map(|j| {
            let mut store = params.clone();
            let theta = *store.scalar_mut(j).expect("index in range");
            *store.scalar_mut(j).unwrap() = theta + h;
            let plus = projections(block, &store, batch, u)?;
            *store.scalar_mut(j).unwrap() = theta - h;
            let minus = projections(block, &store, batch, u)?;
            Ok(plus.iter().zip(&minus).map(|(a, m)| (a - m) / (2.0 * h)).collect())
        })
        .collect::<Result<_, InterpError>>()?;
    Ok((0..b).map(|i| columns.iter().map(|c| c[i]).collect()).collect())
}

/// `F = GᵀG / B`, `P x P` row-major.
pub fn fisher_from_gradients(g: &[Vec<f64>]) -> Vec<f64> {
    let b = g.len();
    let p = g.first().map_or(0, Vec::len);
    let mut f = vec![0.0; p * p];
    for row in g {
        for i in 0..p {
            for j in 0..p {
                f[i * p + j] += row[i] * row[j];
            }
        }
    }
    f.iter_mut().for_each(|v| *v /= b as f64);
    f
}

/// Spectrum of `GᵀG/B` through the smaller of `GᵀG/B` and `GGᵀ/B`.
pub fn spectrum_from_gradients(g: &[Vec<f64>]) -> Result<FisherSpectrum, ProxyError> {
    let b = g.len();
    let p = g.first().map_or(0, Vec::len);
    if p == 0 || b == 0 {
        return FisherSpectrum::from_eigenvalues(Vec::new());
    }
    let eig = if p <= b {
        jacobi_eigenvalues(fisher_from_gradients(g), p, 1e-12)
    } else {
        let mut k = vec![0.0; b * b];
        for i in 0..b {
            for j in i..b {
                let v: f64 = g[i].iter().zip(&g[j]).map(|(x, y)| x * y).sum::<f64>() / b as f64;
                k[i * b + j] = v;
                k[j * b + i] = v;
            }
        }
        jacobi_eigenvalues(k, b, 1e-12)
    };
    FisherSpectrum::from_eigenvalues(eig)
}

/// Empirical Fisher matrix of one block.
pub fn block_fisher(
    block: &BlockGraph,
    params: &ParamStore,
    batch: &[Tensor],
    u: &[f64],
    h: f64,
    max_params: usize,
) -> Result<Vec<f64>, ProxyError> {
    if params.len() > max_params {
        return Err(ProxyError::TooManyParams {
            block: 0,
            params: params.len(),
            limit: max_params,
        });
    }
    Ok(fisher_from_gradients(&fd_gradients(block, params, batch, u, h)?))
}

/// Unit vector of length `n` with a uniformly random direction.
pub fn random_unit(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut u = rng.normal_vec(n, 0.0, 1.0);
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        u.iter_mut().for_each(|v| *v /= norm);
    }
    u
}

/// VKDNW score of one block, its parameters initialized and its inputs and
/// projection drawn from `rng`. Parameter-free blocks score 0.
pub fn block_vkdnw(block: &BlockGraph, rng: &mut Rng, cfg: &ProxyConfig) -> Result<(f64, FisherSpectrum), ProxyError> {
    if cfg.batch_size < 10 {
        return Err(ProxyError::BatchTooSmall(cfg.batch_size));
    }
    let params = init_params(block, rng)?;
    if params.is_empty() {
        return Ok((0.0, FisherSpectrum::from_eigenvalues(Vec::new())?));
    }
    if params.len() > cfg.max_params {
        return Err(ProxyError::TooManyParams {
            block: 0,
            params: params.len(),
            limit: cfg.max_params,
        });
    }
    let shape = block.input_shape();
    let batch: Vec<Tensor> = (0..cfg.batch_size)
        .map(|_| normal_sample(rng, shape, 0.0, 1.0))
        .collect();
    let u = random_unit(rng, shape.numel());
    let g = fd_gradients(block, &params, &batch, &u, cfg.fd_step)?;
    let spectrum = spectrum_from_gradients(&g)?;
    Ok((vkdnw_score(&spectrum.deciles), spectrum))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyScore {
    pub proxy: ProxyId,
    pub value: f64,
    pub per_block: Vec<f64>,
    pub seed: u64,
    pub batch_size: usize,
}

/// Score a network; larger is better. Each block uses its own stream derived
/// from `(seed, block)`, so the result does not depend on scheduling.
pub fn score_network(spec: &NetworkSpec, proxy: ProxyId, seed: u64, cfg: &ProxyConfig) -> Result<ProxyScore, ProxyError> {
    let (value, per_block) = match proxy {
        ProxyId::Vkdnw => {
            let per_block: Vec<f64> = spec
                .blocks
                .par_iter()
                .enumerate()
                .map(|(i, b)| {
                    let mut rng = Rng::derive(seed, i as u64);
                    block_vkdnw(b, &mut rng, cfg).map(|(s, _)| s).map_err(|e| match e {
                        ProxyError::TooManyParams { params, limit, .. } => ProxyError::TooManyParams {
                            block: i,
                            params,
                            limit,
                        },
                        e => e,
                    })
                })
                .collect::<Result<_, _>>()?;
            let mean = if per_block.is_empty() {
                0.0
            } else {
                per_block.iter().sum::<f64>() / per_block.len() as f64
            };
            (mean, per_block)
        }
        ProxyId::NegParams => (-(network_cost(spec)?.total.params as f64), Vec::new()),
        ProxyId::NegFlops => (-(network_cost(spec)?.total.flops as f64), Vec::new()),
        ProxyId::Random => (Rng::new(seed).uniform(), Vec::new()),
    };
    Ok(ProxyScore {
        proxy,
        value,
        per_block,
        seed,
        batch_size: cfg.batch_size,
    })
}

/// Pearson correlation; `None` for fewer than two points or zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return None;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (xs[i] - mx, ys[i] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}
