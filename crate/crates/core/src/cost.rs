//! Analytic attention cost of the backbone under each elimination strategy.
//!
//! A block that sees `N` tokens of width `C` is charged `N²C + NC²` per
//! modality: the score and mixing products plus the projections. Template
//! tokens are never pruned, so `N = N_static + N_dynamic + n_search(l)`.

use std::fmt::Write as _;

use crate::config::ModelConfig;
use crate::tmce::{search_schedule, EliminationStrategy};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    /// 1-based block index.
    pub layer: usize,
    pub search_tokens: usize,
    pub tokens: usize,
    /// Both modalities.
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategyCost {
    pub strategy: EliminationStrategy,
    pub keep_ratio: f64,
    pub layers: Vec<LayerCost>,
    pub total_flops: u64,
}

/// Per-modality cost of one block over `n` tokens of width `c`.
pub fn block_flops(n: usize, c: usize) -> u64 {
    let (n, c) = (n as u64, c as u64);
    n * n * c + n * c * c
}

pub fn strategy_cost(cfg: &ModelConfig, strategy: EliminationStrategy) -> StrategyCost {
    let layout = cfg.layout();
    let rho = (strategy != EliminationStrategy::None).then_some(cfg.keep_ratio);
    let schedule = search_schedule(layout.n_search, cfg.depth, &cfg.prune_layers, rho);
    let layers: Vec<LayerCost> = schedule
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let tokens = layout.n_template() + s;
            LayerCost {
                layer: i + 1,
                search_tokens: s,
                tokens,
                flops: 2 * block_flops(tokens, cfg.dim),
            }
        })
        .collect();
    StrategyCost {
        strategy,
        keep_ratio: if rho.is_some() { cfg.keep_ratio } else { 1.0 },
        total_flops: layers.iter().map(|l| l.flops).sum(),
        layers,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Throughput {
    pub frames_per_sec: f64,
    /// Search-region input tokens per second.
    pub tokens_per_sec: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostModelReport {
    pub strategies: Vec<StrategyCost>,
    /// Parallel to `strategies` when measured.
    pub measured: Vec<Option<Throughput>>,
}

impl CostModelReport {
    pub fn analytic(cfg: &ModelConfig, strategies: &[EliminationStrategy]) -> Self {
        CostModelReport {
            strategies: strategies.iter().map(|&s| strategy_cost(cfg, s)).collect(),
            measured: vec![None; strategies.len()],
        }
    }

    fn baseline(&self) -> Option<usize> {
        self.strategies.iter().position(|s| s.strategy == EliminationStrategy::None)
    }

    /// One row per strategy; relative columns are against `none` when it
    /// was included.
    pub fn to_csv(&self) -> String {
        let base = self.baseline();
        let mut s = String::from("strategy,keep_ratio,total_flops,flops_ratio,frames_per_sec,tokens_per_sec,speedup\n");
        for (c, m) in self.strategies.iter().zip(&self.measured) {
            let ratio = base.map(|b| c.total_flops as f64 / self.strategies[b].total_flops as f64);
            let speed = match (base.and_then(|b| self.measured[b].as_ref()), m) {
                (Some(b), Some(m)) => Some(m.tokens_per_sec / b.tokens_per_sec),
                _ => None,
            };
            let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                c.strategy,
                c.keep_ratio,
                c.total_flops,
                opt(ratio),
                opt(m.as_ref().map(|m| m.frames_per_sec)),
                opt(m.as_ref().map(|m| m.tokens_per_sec)),
                opt(speed)
            );
        }
        s
    }

    /// Per-layer token counts and costs for every strategy.
    pub fn layers_csv(&self) -> String {
        let mut s = String::from("strategy,layer,search_tokens,tokens,flops\n");
        for c in &self.strategies {
            for l in &c.layers {
                let _ = writeln!(s, "{},{},{},{},{}", c.strategy, l.layer, l.search_tokens, l.tokens, l.flops);
            }
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<8}  {:>5}  {:>14}  {:>10}  {:>8}\n",
            "strategy", "rho", "attn flops", "tokens/s", "speedup"
        );
        let base = self.baseline().and_then(|b| self.measured[b].clone());
        for (c, m) in self.strategies.iter().zip(&self.measured) {
            let (tps, sp) = match (m, &base) {
                (Some(m), Some(b)) => (format!("{:.1}", m.tokens_per_sec), format!("{:.3}", m.tokens_per_sec / b.tokens_per_sec)),
                (Some(m), None) => (format!("{:.1}", m.tokens_per_sec), "-".into()),
                _ => ("-".into(), "-".into()),
            };
            let _ = writeln!(
                s,
                "{:<8}  {:>5.2}  {:>14}  {:>10}  {:>8}",
                c.strategy.as_str(),
                c.keep_ratio,
                c.total_flops,
                tps,
                sp
            );
        }
        s
    }
}
