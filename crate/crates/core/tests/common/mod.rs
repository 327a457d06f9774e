//! Independent reference implementations used by the integration tests. None
//! of this calls into the library's graph, GCN or metric code.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

pub mod grad;

pub type Edge = (usize, usize);

/// Fine edges and their normalization groups for a forecast layout, written
/// directly from the set definitions. Parts are laid out as
/// `part_0, prompt_0, part_1, prompt_1, ...`.
pub struct OracleGraph {
    pub fine: BTreeSet<Edge>,
    /// Each group as a set of edges.
    pub groups: BTreeSet<BTreeSet<Edge>>,
    pub coarse: BTreeSet<Edge>,
    /// `gamma[c]` = fine positions of coarse node `c`.
    pub blocks: Vec<Vec<usize>>,
    pub fine_len: usize,
}

fn add_group(groups: &mut BTreeMap<(u8, usize, usize), BTreeSet<Edge>>, key: (u8, usize, usize), e: Edge) {
    groups.entry(key).or_default().insert(e);
}

pub fn forecast_oracle(parts: &[usize], m: usize, pruned: bool) -> OracleGraph {
    let n_parts = parts.len();
    let mut patch_pos = Vec::new();
    let mut prompt_pos = Vec::new();
    let mut p = 0;
    for &len in parts {
        patch_pos.push((p..p + len).collect::<Vec<_>>());
        p += len;
        prompt_pos.push((p..p + m).collect::<Vec<_>>());
        p += m;
    }
    let mut fine = BTreeSet::new();
    let mut groups = BTreeMap::new();
    for i in 0..n_parts {
        let targets: Vec<usize> = if pruned { vec![prompt_pos[i][0]] } else { prompt_pos[i].clone() };
        for j in 0..=i {
            for &s in &patch_pos[j] {
                for &t in &targets {
                    fine.insert((s, t));
                    add_group(&mut groups, (0, t, j), (s, t));
                }
            }
        }
        if i + 1 < n_parts {
            let sources: Vec<usize> = if pruned { vec![prompt_pos[i][m - 1]] } else { prompt_pos[i].clone() };
            for &s in &sources {
                for &t in &patch_pos[i + 1] {
                    fine.insert((s, t));
                    add_group(&mut groups, (1, s, 0), (s, t));
                }
            }
        }
    }
    // coarse nodes: part j -> 2j, prompt copy i -> 2i+1
    let mut coarse = BTreeSet::new();
    for i in 0..n_parts {
        for j in 0..=i {
            coarse.insert((2 * j, 2 * i + 1));
        }
        if i + 1 < n_parts {
            coarse.insert((2 * i + 1, 2 * (i + 1)));
        }
    }
    let mut blocks = Vec::new();
    for i in 0..n_parts {
        blocks.push(patch_pos[i].clone());
        blocks.push(prompt_pos[i].clone());
    }
    OracleGraph {
        fine,
        groups: groups.into_values().collect(),
        coarse,
        blocks,
        fine_len: p,
    }
}

/// Few-shot classification: `l` examples of `n` patches + `m` prompt tokens
/// + one label, then the query's patches and prompt.
pub fn class_oracle(l: usize, n: usize, m: usize) -> OracleGraph {
    let mut fine = BTreeSet::new();
    let mut groups = BTreeMap::new();
    let mut blocks = Vec::new();
    let mut coarse = BTreeSet::new();
    let mut p = 0;
    for k in 0..=l {
        let patches: Vec<usize> = (p..p + n).collect();
        p += n;
        let prompt: Vec<usize> = (p..p + m).collect();
        p += m;
        for &s in &patches {
            fine.insert((s, prompt[0]));
            add_group(&mut groups, (0, prompt[0], k), (s, prompt[0]));
        }
        let base = blocks.len();
        blocks.push(patches);
        blocks.push(prompt.clone());
        coarse.insert((base, base + 1));
        if k < l {
            let label = p;
            p += 1;
            fine.insert((prompt[m - 1], label));
            add_group(&mut groups, (1, prompt[m - 1], k), (prompt[m - 1], label));
            blocks.push(vec![label]);
            coarse.insert((base + 1, base + 2));
        }
    }
    OracleGraph {
        fine,
        groups: groups.into_values().collect(),
        coarse,
        blocks,
        fine_len: p,
    }
}

/// `D^{-1/2}(A+I)D^{-1/2}` with row-sum degrees, by explicit loops.
pub fn dense_normalize(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut b: Vec<Vec<f64>> = a.to_vec();
    for (i, row) in b.iter_mut().enumerate() {
        row[i] += 1.0;
    }
    let d: Vec<f64> = b.iter().map(|r| r.iter().sum()).collect();
    (0..n)
        .map(|i| (0..n).map(|j| b[i][j] / d[i].sqrt() / d[j].sqrt()).collect())
        .collect()
}

pub fn dense_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (p, q, r) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; r]; p];
    for i in 0..p {
        for k in 0..q {
            for j in 0..r {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

/// `relu(Â N W)`.
pub fn dense_gcn(a: &[Vec<f64>], nodes: &[Vec<f64>], w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let ah = dense_normalize(a);
    let out = dense_matmul(&dense_matmul(&ah, nodes), w);
    out.into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect()
}

/// Direct transcriptions of the forecasting metrics.
pub mod metric_ref {
    pub fn mse(y: &[f64], f: &[f64]) -> f64 {
        let mut s = 0.0;
        for h in 0..y.len() {
            s += (y[h] - f[h]).powi(2);
        }
        s / y.len() as f64
    }

    pub fn mae(y: &[f64], f: &[f64]) -> f64 {
        let mut s = 0.0;
        for h in 0..y.len() {
            s += (y[h] - f[h]).abs();
        }
        s / y.len() as f64
    }

    pub fn smape(y: &[f64], f: &[f64]) -> f64 {
        let mut s = 0.0;
        for h in 0..y.len() {
            s += (y[h] - f[h]).abs() / (y[h].abs() + f[h].abs());
        }
        200.0 / y.len() as f64 * s
    }

    /// Scale from `series` with 1-based `j = s+1..=len`.
    pub fn mase(y: &[f64], f: &[f64], series: &[f64], s: usize) -> f64 {
        let len = series.len();
        let mut den = 0.0;
        for j in (s + 1)..=len {
            den += (series[j - 1] - series[j - 1 - s]).abs();
        }
        den /= (len - s) as f64;
        mae(y, f) / den
    }

    pub fn owa(sm: f64, ma: f64, sm_n2: f64, ma_n2: f64) -> f64 {
        (sm / sm_n2 + ma / ma_n2) / 2.0
    }
}
