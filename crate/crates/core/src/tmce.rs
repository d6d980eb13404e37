//! Temporal-modal candidate elimination.
//!
//! Search tokens are scored by how strongly the static and dynamic template
//! queries attend to them, per modality. The two temporal maps of a modality
//! are summed, the per-token maximum is taken across modalities, and the top
//! `ceil(ρ·N)` search tokens survive. The same decision prunes both
//! modalities so their search grids stay aligned.
//!
//! [`EliminationStrategy`] also provides the ablation scorers: `ce` (one
//! modality), `add_ce` (sum of both modalities) and `max_ce` (maximum over
//! the four raw maps).

use std::fmt;
use std::str::FromStr;

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// Token counts of the `(static | dynamic | search)` segments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentLayout {
    pub n_static: usize,
    pub n_dynamic: usize,
    pub n_search: usize,
}

impl SegmentLayout {
    pub fn total(&self) -> usize {
        self.n_static + self.n_dynamic + self.n_search
    }

    pub fn n_template(&self) -> usize {
        self.n_static + self.n_dynamic
    }

    pub fn search_start(&self) -> usize {
        self.n_template()
    }
}

/// Non-negative relevance score per surviving search token.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrMap(Vec<f64>);

impl CorrMap {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(contract!("correlation scores must be finite and non-negative"));
        }
        Ok(CorrMap(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn combine(maps: &[&CorrMap], f: impl Fn(&[f64]) -> f64) -> Result<CorrMap> {
        let n = maps[0].len();
        if maps.iter().any(|m| m.len() != n) {
            return Err(contract!(
                "correlation maps differ in length: {:?}",
                maps.iter().map(|m| m.len()).collect::<Vec<_>>()
            ));
        }
        let mut buf = vec![0.0; maps.len()];
        let out = (0..n)
            .map(|i| {
                for (b, m) in buf.iter_mut().zip(maps) {
                    *b = m.0[i];
                }
                f(&buf)
            })
            .collect();
        Ok(CorrMap(out))
    }
}

/// Search tokens kept by one pruning step.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneDecision {
    keep_indices: Vec<usize>,
    keep_ratio: f64,
}

impl PruneDecision {
    /// Keeps every one of `n` tokens.
    pub fn identity(n: usize) -> Self {
        PruneDecision {
            keep_indices: (0..n).collect(),
            keep_ratio: 1.0,
        }
    }

    /// Strictly increasing positions into the pre-prune search segment.
    pub fn keep_indices(&self) -> &[usize] {
        &self.keep_indices
    }

    pub fn keep_ratio(&self) -> f64 {
        self.keep_ratio
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EliminationStrategy {
    None,
    Ce,
    AddCe,
    MaxCe,
    Tmce,
}

impl EliminationStrategy {
    pub const ALL: [EliminationStrategy; 5] = [
        EliminationStrategy::None,
        EliminationStrategy::Ce,
        EliminationStrategy::AddCe,
        EliminationStrategy::MaxCe,
        EliminationStrategy::Tmce,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EliminationStrategy::None => "none",
            EliminationStrategy::Ce => "ce",
            EliminationStrategy::AddCe => "add_ce",
            EliminationStrategy::MaxCe => "max_ce",
            EliminationStrategy::Tmce => "tmce",
        }
    }
}

impl fmt::Display for EliminationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EliminationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown elimination strategy {s:?}")))
    }
}

/// Modality whose maps the single-modality `ce` scorer reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CeSource {
    Rgb,
    Tir,
}

impl fmt::Display for CeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CeSource::Rgb => "rgb",
            CeSource::Tir => "tir",
        })
    }
}

impl FromStr for CeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(CeSource::Rgb),
            "tir" => Ok(CeSource::Tir),
            _ => Err(Error::Config(format!("unknown ce_source {s:?}"))),
        }
    }
}

/// The four template-to-search maps of one pruning layer.
#[derive(Clone, Debug)]
pub struct ModalMaps {
    pub rgb_static: CorrMap,
    pub rgb_dynamic: CorrMap,
    pub tir_static: CorrMap,
    pub tir_dynamic: CorrMap,
}

/// Extracts template→search relevance from a post-softmax attention map of
/// shape `[heads, N, N]`.
///
/// Each search token's score is the mean, over heads and over the query rows
/// of one template, of the attention those rows pay to it. Returns the
/// static-template and dynamic-template maps; a layout without a dynamic
/// segment yields an all-zero dynamic map.
pub fn template_search_corr(attn: &Tensor, layout: &SegmentLayout) -> Result<(CorrMap, CorrMap)> {
    let n = layout.total();
    let [heads, rows, cols] = attn.shape() else {
        return Err(contract!("attention map must be rank 3, got {:?}", attn.shape()));
    };
    if *rows != n || *cols != n || layout.n_search == 0 {
        return Err(contract!(
            "attention map {:?} does not match layout {layout:?}",
            attn.shape()
        ));
    }
    let s0 = layout.search_start();
    let average = |r0: usize, r1: usize| -> CorrMap {
        let mut acc = vec![0.0; layout.n_search];
        if r1 > r0 {
            for h in 0..*heads {
                for r in r0..r1 {
                    let row = &attn.data()[(h * n + r) * n + s0..(h * n + r + 1) * n];
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
            }
            let denom = (*heads * (r1 - r0)) as f64;
            acc.iter_mut().for_each(|a| *a /= denom);
        }
        CorrMap(acc)
    };
    Ok((
        average(0, layout.n_static),
        average(layout.n_static, layout.n_template()),
    ))
}

/// `max(rgb_static + rgb_dynamic, tir_static + tir_dynamic)` per token.
pub fn tmce_score(
    rgb_static: &CorrMap,
    rgb_dynamic: &CorrMap,
    tir_static: &CorrMap,
    tir_dynamic: &CorrMap,
) -> Result<CorrMap> {
    CorrMap::combine(&[rgb_static, rgb_dynamic, tir_static, tir_dynamic], |v| {
        (v[0] + v[1]).max(v[2] + v[3])
    })
}

/// Scores for a given strategy; `None` for [`EliminationStrategy::None`].
pub fn variant_score(strategy: EliminationStrategy, maps: &ModalMaps, ce_source: CeSource) -> Result<Option<CorrMap>> {
    let all = [&maps.rgb_static, &maps.rgb_dynamic, &maps.tir_static, &maps.tir_dynamic];
    let scores = match strategy {
        EliminationStrategy::None => return Ok(None),
        EliminationStrategy::Ce => match ce_source {
            CeSource::Rgb => CorrMap::combine(&all[..2], |v| v[0] + v[1])?,
            CeSource::Tir => CorrMap::combine(&all[2..], |v| v[0] + v[1])?,
        },
        EliminationStrategy::AddCe => CorrMap::combine(&all, |v| v.iter().sum())?,
        EliminationStrategy::MaxCe => CorrMap::combine(&all, |v| v.iter().copied().fold(0.0, f64::max))?,
        EliminationStrategy::Tmce => tmce_score(all[0], all[1], all[2], all[3])?,
    };
    Ok(Some(scores))
}

/// `ceil(ρ·n)`, clamped to `1..=n`, tolerant of float noise at exact
/// products (e.g. `0.7 × 10`).
pub fn keep_count(n: usize, keep_ratio: f64) -> usize {
    let k = (keep_ratio * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n.max(1))
}

/// Search-token counts entering each block `1..=depth` when pruning after
/// every block in `prune_layers`.
pub fn search_schedule(n_search: usize, depth: usize, prune_layers: &[usize], keep_ratio: Option<f64>) -> Vec<usize> {
    let mut n = n_search;
    let mut out = Vec::with_capacity(depth);
    for layer in 1..=depth {
        out.push(n);
        if let Some(rho) = keep_ratio {
            if prune_layers.contains(&layer) {
                n = keep_count(n, rho);
            }
        }
    }
    out
}

pub fn validate_keep_ratio(keep_ratio: f64) -> Result<()> {
    if keep_ratio > 0.0 && keep_ratio <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("keep_ratio must lie in (0, 1], got {keep_ratio}")))
    }
}

/// Keeps the `ceil(ρ·N)` highest-scoring tokens; ties go to the lower index.
pub fn prune(scores: &CorrMap, keep_ratio: f64) -> Result<PruneDecision> {
    validate_keep_ratio(keep_ratio)?;
    if scores.is_empty() {
        return Err(contract!("cannot prune an empty search segment"));
    }
    let k = keep_count(scores.len(), keep_ratio);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let s = scores.values();
    // stable sort keeps equal scores in index order
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    Ok(PruneDecision {
        keep_indices: keep,
        keep_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cm(v: &[f64]) -> CorrMap {
        CorrMap::new(v.to_vec()).unwrap()
    }

    fn hand_maps() -> ModalMaps {
        ModalMaps {
            rgb_static: cm(&[0.1, 0.4, 0.3, 0.2]),
            rgb_dynamic: cm(&[0.2, 0.1, 0.5, 0.2]),
            tir_static: cm(&[0.4, 0.1, 0.1, 0.4]),
            tir_dynamic: cm(&[0.3, 0.2, 0.1, 0.4]),
        }
    }

    fn close(a: &CorrMap, b: &[f64]) -> bool {
        a.len() == b.len() && a.values().iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn hand_example_scores_and_prune() {
        let m = hand_maps();
        let s = tmce_score(&m.rgb_static, &m.rgb_dynamic, &m.tir_static, &m.tir_dynamic).unwrap();
        assert!(close(&s, &[0.7, 0.5, 0.8, 0.8]));
        assert_eq!(prune(&s, 0.5).unwrap().keep_indices(), &[2, 3]);
        let ce = variant_score(EliminationStrategy::Ce, &m, CeSource::Rgb).unwrap().unwrap();
        assert!(close(&ce, &[0.3, 0.5, 0.8, 0.4]));
        let add = variant_score(EliminationStrategy::AddCe, &m, CeSource::Rgb).unwrap().unwrap();
        assert!(close(&add, &[1.0, 0.8, 1.0, 1.2]));
        let max = variant_score(EliminationStrategy::MaxCe, &m, CeSource::Rgb).unwrap().unwrap();
        assert!(close(&max, &[0.4, 0.4, 0.5, 0.4]));
        assert!(variant_score(EliminationStrategy::None, &m, CeSource::Rgb).unwrap().is_none());
    }

    #[test]
    fn degenerate_modalities() {
        let a = cm(&[0.2, 0.9, 0.1]);
        let b = cm(&[0.3, 0.0, 0.6]);
        let z = cm(&[0.0; 3]);
        let same = tmce_score(&a, &b, &a, &b).unwrap();
        assert!(close(&same, &[0.5, 0.9, 0.7]));
        assert_eq!(tmce_score(&a, &b, &z, &z).unwrap(), same);
        assert!(tmce_score(&a, &b, &z, &cm(&[0.0; 2])).is_err());
    }

    #[test]
    fn identity_ratio_and_bad_ratio() {
        let s = cm(&[0.3, 0.1, 0.2]);
        assert_eq!(prune(&s, 1.0).unwrap().keep_indices(), &[0, 1, 2]);
        for bad in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(prune(&s, bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn corr_extraction() {
        // uniform attention rows
        let layout = SegmentLayout { n_static: 1, n_dynamic: 1, n_search: 3 };
        let n = layout.total();
        let attn = Tensor::full([2, n, n], 1.0 / n as f64);
        let (s, d) = template_search_corr(&attn, &layout).unwrap();
        assert!(close(&s, &[0.2; 3]) && close(&d, &[0.2; 3]));
        // single template row, one head
        let layout = SegmentLayout { n_static: 1, n_dynamic: 0, n_search: 2 };
        let attn = Tensor::new([1, 3, 3], vec![0.1, 0.6, 0.3, 0.2, 0.2, 0.6, 0.5, 0.25, 0.25]).unwrap();
        let (s, d) = template_search_corr(&attn, &layout).unwrap();
        assert!(close(&s, &[0.6, 0.3]));
        assert!(close(&d, &[0.0, 0.0]));
        assert!(template_search_corr(&Tensor::zeros([1, 4, 4]), &layout).is_err());
    }

    #[test]
    fn corr_matches_loop_oracle() {
        let layout = SegmentLayout { n_static: 3, n_dynamic: 3, n_search: 7 };
        let n = layout.total();
        let heads = 4;
        let attn = Tensor::from_fn([heads, n, n], |i| ((i * 7919) % 101) as f64 / 101.0);
        let (s, d) = template_search_corr(&attn, &layout).unwrap();
        for (map, rows) in [(&s, 0..3), (&d, 3..6)] {
            for j in 0..layout.n_search {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for h in 0..heads {
                    for r in rows.clone() {
                        acc += attn.data()[h * n * n + r * n + 6 + j];
                        cnt += 1.0;
                    }
                }
                assert!((map.values()[j] - acc / cnt).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn schedule_arithmetic() {
        assert_eq!(keep_count(256, 0.7), 180);
        assert_eq!(keep_count(180, 0.7), 126);
        assert_eq!(keep_count(126, 0.7), 89);
        assert_eq!(keep_count(10, 0.7), 7);
        assert_eq!(keep_count(256, 0.25), 64);
        let s = search_schedule(256, 12, &[4, 7, 10], Some(0.7));
        assert_eq!(s, [256, 256, 256, 256, 180, 180, 180, 126, 126, 126, 89, 89]);
        assert_eq!(search_schedule(256, 12, &[4, 7, 10], None), vec![256; 12]);
    }

    fn brute_force_survivors(s: &[f64], k: usize) -> Vec<usize> {
        // token i survives iff fewer than k tokens beat it (higher score, or
        // equal score at a lower index)
        let mut keep: Vec<usize> = (0..s.len())
            .filter(|&i| {
                (0..s.len())
                    .filter(|&j| s[j] > s[i] || (s[j] == s[i] && j < i))
                    .count()
                    < k
            })
            .collect();
        keep.sort_unstable();
        keep
    }

    proptest! {
        #[test]
        fn prune_matches_brute_force(
            raw in proptest::collection::vec(0u8..6, 1..300),
            rho in 0.01f64..1.0,
        ) {
            // a coarse alphabet forces many ties
            let s: Vec<f64> = raw.iter().map(|&v| v as f64 / 5.0).collect();
            let d = prune(&CorrMap::new(s.clone()).unwrap(), rho).unwrap();
            let k = keep_count(s.len(), rho);
            prop_assert_eq!(d.keep_indices(), &brute_force_survivors(&s, k)[..]);
            prop_assert!(d.keep_indices().windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn quarter_ratio_keeps_64_of_256(raw in proptest::collection::vec(0.0f64..1.0, 256)) {
            let d = prune(&CorrMap::new(raw.clone()).unwrap(), 0.25).unwrap();
            prop_assert_eq!(d.keep_indices().len(), 64);
            let kept_min = d.keep_indices().iter().map(|&i| raw[i]).fold(f64::INFINITY, f64::min);
            let dropped_max = (0..256).filter(|i| !d.keep_indices().contains(i)).map(|i| raw[i]).fold(0.0, f64::max);
            prop_assert!(kept_min >= dropped_max);
        }

        #[test]
        fn tmce_is_monotone(
            maps in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 8), 4),
            which in 0usize..4, at in 0usize..8, bump in 0.0f64..1.0,
        ) {
            let m: Vec<CorrMap> = maps.iter().map(|v| cm(v)).collect();
            let base = tmce_score(&m[0], &m[1], &m[2], &m[3]).unwrap();
            let mut raised = maps.clone();
            raised[which][at] += bump;
            let r: Vec<CorrMap> = raised.iter().map(|v| cm(v)).collect();
            let up = tmce_score(&r[0], &r[1], &r[2], &r[3]).unwrap();
            for (a, b) in base.values().iter().zip(up.values()) {
                prop_assert!(b >= a);
            }
        }

        #[test]
        fn decision_invariant_under_positive_scaling(
            maps in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 16), 4),
            c in 0.01f64..100.0, rho in 0.05f64..1.0,
        ) {
            let m: Vec<CorrMap> = maps.iter().map(|v| cm(v)).collect();
            let scaled: Vec<CorrMap> = maps.iter().map(|v| cm(&v.iter().map(|x| x * c).collect::<Vec<_>>())).collect();
            let a = prune(&tmce_score(&m[0], &m[1], &m[2], &m[3]).unwrap(), rho).unwrap();
            let b = prune(&tmce_score(&scaled[0], &scaled[1], &scaled[2], &scaled[3]).unwrap(), rho).unwrap();
            prop_assert_eq!(a.keep_indices(), b.keep_indices());
        }
    }
}
