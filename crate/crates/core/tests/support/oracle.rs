//! Straight-line reference implementations on plain row-major `Vec<f64>`.
//! Nothing here touches the tape; parameters are read by name.

use btmtrack::nn::ParamStore;
use btmtrack::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct M {
    pub r: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl M {
    pub fn from_tensor(t: &Tensor) -> M {
        let s = t.shape();
        let (r, c) = if s.len() == 1 { (1, s[0]) } else { (s[0], s[1]) };
        M { r, c, d: t.data().to_vec() }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.c..(i + 1) * self.c]
    }

    pub fn rows(&self, idx: &[usize]) -> M {
        M {
            r: idx.len(),
            c: self.c,
            d: idx.iter().flat_map(|&i| self.row(i).to_vec()).collect(),
        }
    }

    pub fn vstack(parts: &[&M]) -> M {
        M {
            r: parts.iter().map(|p| p.r).sum(),
            c: parts[0].c,
            d: parts.iter().flat_map(|p| p.d.clone()).collect(),
        }
    }

    pub fn hstack(a: &M, b: &M) -> M {
        let mut d = Vec::new();
        for i in 0..a.r {
            d.extend_from_slice(a.row(i));
            d.extend_from_slice(b.row(i));
        }
        M { r: a.r, c: a.c + b.c, d }
    }

    pub fn max_abs_diff(&self, t: &Tensor) -> f64 {
        assert_eq!(self.d.len(), t.len());
        self.d.iter().zip(t.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

fn add(a: &M, b: &M) -> M {
    M {
        r: a.r,
        c: a.c,
        d: a.d.iter().zip(&b.d).map(|(x, y)| x + y).collect(),
    }
}

fn matmul(a: &M, b: &M) -> M {
    assert_eq!(a.c, b.r);
    let mut d = vec![0.0; a.r * b.c];
    for i in 0..a.r {
        for j in 0..b.c {
            let mut s = 0.0;
            for k in 0..a.c {
                s += a.at(i, k) * b.at(k, j);
            }
            d[i * b.c + j] = s;
        }
    }
    M { r: a.r, c: b.c, d }
}

pub struct P<'a>(pub &'a ParamStore);

impl P<'_> {
    pub fn get(&self, name: &str) -> M {
        let id = self.0.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
        M::from_tensor(self.0.get(id))
    }

    pub fn linear(&self, name: &str, x: &M) -> M {
        let (w, b) = (self.get(&format!("{name}.weight")), self.get(&format!("{name}.bias")));
        let mut y = matmul(x, &w);
        for i in 0..y.r {
            for j in 0..y.c {
                y.d[i * y.c + j] += b.d[j];
            }
        }
        y
    }

    pub fn norm(&self, name: &str, x: &M) -> M {
        let (g, b) = (self.get(&format!("{name}.gamma")), self.get(&format!("{name}.beta")));
        let mut d = Vec::with_capacity(x.d.len());
        for i in 0..x.r {
            let row = x.row(i);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            for (j, v) in row.iter().enumerate() {
                d.push((v - mean) / (var + 1e-6).sqrt() * g.d[j] + b.d[j]);
            }
        }
        M { r: x.r, c: x.c, d }
    }

    pub fn mlp(&self, name: &str, x: &M) -> M {
        let mut h = self.linear(&format!("{name}.fc1"), x);
        h.d.iter_mut().for_each(|v| *v = gelu(*v));
        self.linear(&format!("{name}.fc2"), &h)
    }

    /// Output and per-head post-softmax maps.
    pub fn attention(&self, name: &str, heads: usize, x: &M, y: &M) -> (M, Vec<M>) {
        let q = self.linear(&format!("{name}.q"), x);
        let k = self.linear(&format!("{name}.k"), y);
        let v = self.linear(&format!("{name}.v"), y);
        let dh = q.c / heads;
        let mut o = M { r: x.r, c: q.c, d: vec![0.0; x.r * q.c] };
        let mut maps = Vec::new();
        for h in 0..heads {
            let mut a = M { r: x.r, c: y.r, d: vec![0.0; x.r * y.r] };
            for i in 0..x.r {
                let logits: Vec<f64> = (0..y.r)
                    .map(|j| (0..dh).map(|t| q.at(i, h * dh + t) * k.at(j, h * dh + t)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..y.r {
                    a.d[i * y.r + j] = e[j] / z;
                }
                for t in 0..dh {
                    o.d[i * q.c + h * dh + t] = (0..y.r).map(|j| a.at(i, j) * v.at(j, h * dh + t)).sum();
                }
            }
            maps.push(a);
        }
        (self.linear(&format!("{name}.out"), &o), maps)
    }

    /// Pre-norm self-attention block.
    pub fn block(&self, name: &str, heads: usize, x: &M) -> (M, Vec<M>) {
        let h = self.norm(&format!("{name}.ln1"), x);
        let (a, maps) = self.attention(&format!("{name}.attn"), heads, &h, &h);
        let x = add(x, &a);
        let m = self.mlp(&format!("{name}.mlp"), &self.norm(&format!("{name}.ln2"), &x));
        (add(&x, &m), maps)
    }

    /// Post-norm cross block.
    pub fn cross(&self, name: &str, heads: usize, x: &M, y: &M) -> M {
        let (a, _) = self.attention(&format!("{name}.attn"), heads, x, y);
        let x1 = self.norm(&format!("{name}.ln1"), &add(x, &a));
        let m = self.mlp(&format!("{name}.mlp"), &x1);
        self.norm(&format!("{name}.ln2"), &add(&x1, &m))
    }
}

pub fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x * x * x)).tanh())
}

pub struct TdtbRef {
    pub z_rgb: M,
    pub z_tir: M,
    pub x_rgb: M,
    pub x_tir: M,
    pub z_m: M,
    pub z_m1: M,
    pub z_m2: M,
}

/// The bridge in its default order: TIR search first, then RGB.
#[allow(clippy::too_many_arguments)]
pub fn tdtb(p: &P<'_>, name: &str, heads: usize, zrs: &M, zrd: &M, zts: &M, ztd: &M, xr: &M, xt: &M) -> TdtbRef {
    let s = |i: usize| format!("{name}.stage{i}");
    let fused_static = p.linear(&format!("{name}.fuse"), &M::hstack(zrs, zts));
    let fused_dynamic = p.linear(&format!("{name}.fuse"), &M::hstack(zrd, ztd));
    let z_m = M::vstack(&[&fused_static, &fused_dynamic]);
    // bridge gathers from the TIR search region
    let z_m1 = p.cross(&s(0), heads, &z_m, xt);
    // RGB search reads the bridge
    let x_rgb = p.cross(&s(1), heads, xr, &z_m1);
    // reversed pass: bridge gathers from the updated RGB search
    let z_m2 = p.cross(&s(2), heads, &z_m1, &x_rgb);
    let x_tir = p.cross(&s(3), heads, xt, &z_m2);
    // write-back into each modality's dual template
    let z_rgb = p.cross(&s(4), heads, &M::vstack(&[zrs, zrd]), &z_m2);
    let z_tir = p.cross(&s(5), heads, &M::vstack(&[zts, ztd]), &z_m2);
    TdtbRef { z_rgb, z_tir, x_rgb, x_tir, z_m, z_m1, z_m2 }
}

/// Brute-force top-k: sort every index by (score desc, index asc).
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    for i in 0..idx.len() {
        for j in i + 1..idx.len() {
            let (a, b) = (idx[i], idx[j]);
            if scores[b] > scores[a] || (scores[b] == scores[a] && b < a) {
                idx.swap(i, j);
            }
        }
    }
    let mut keep = idx[..k].to_vec();
    keep.sort_unstable();
    keep
}

/// Mean over heads and template rows of the template-to-search block.
pub fn corr(maps: &[M], rows: std::ops::Range<usize>, search_start: usize, n_search: usize) -> Vec<f64> {
    let count = (maps.len() * rows.len()) as f64;
    (0..n_search)
        .map(|j| {
            maps.iter()
                .map(|m| rows.clone().map(|i| m.at(i, search_start + j)).sum::<f64>())
                .sum::<f64>()
                / count
        })
        .collect()
}
