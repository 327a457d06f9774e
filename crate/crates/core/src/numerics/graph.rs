//! Dense graph primitives shared by the plain (constant-weight) path and the
//! differentiable tape ops.

use super::tensor::cosine_similarity;
use super::Tensor;

/// Added to the clamped cosine before group normalization so every group is a
/// valid distribution.
pub const WEIGHT_FLOOR: f64 = 1e-6;
pub const COSINE_EPS: f64 = 1e-12;

/// Directed edge `source → target` belonging to normalization group `group`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupedEdge {
    pub source: usize,
    pub target: usize,
    pub group: usize,
}

/// Per-edge weights: `raw = max(cos(src, tgt), 0) + WEIGHT_FLOOR` for cosine
/// groups, `raw = 1` otherwise; then L1-normalized within each group.
pub fn group_weights(nodes: &Tensor, edges: &[GroupedEdge], group_cosine: &[bool]) -> Vec<f64> {
    let raw: Vec<f64> = edges
        .iter()
        .map(|e| {
            if group_cosine[e.group] {
                let c = cosine_similarity(nodes.row(e.source), nodes.row(e.target), COSINE_EPS);
                c.max(0.0) + WEIGHT_FLOOR
            } else {
                1.0
            }
        })
        .collect();
    normalize_groups(&raw, edges, group_cosine.len())
}

pub fn normalize_groups(raw: &[f64], edges: &[GroupedEdge], num_groups: usize) -> Vec<f64> {
    let mut sums = vec![0.0; num_groups];
    for (e, r) in edges.iter().zip(raw) {
        sums[e.group] += r;
    }
    edges
        .iter()
        .zip(raw)
        .map(|(e, r)| r / sums[e.group])
        .collect()
}

/// Dense `L×L` adjacency with `A[target][source] = weight`.
pub fn dense_adjacency(num_nodes: usize, edges: &[GroupedEdge], weights: &[f64]) -> Tensor {
    let mut a = Tensor::zeros(&[num_nodes, num_nodes]);
    for (e, w) in edges.iter().zip(weights) {
        let cur = a.get(e.target, e.source);
        a.set(e.target, e.source, cur + w);
    }
    a
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D_ii = Σ_j (A + I)_ij`. Also returns the
/// degree vector.
pub fn sym_normalize(a: &Tensor) -> (Tensor, Vec<f64>) {
    let n = a.rows();
    let mut out = a.clone();
    for i in 0..n {
        let v = out.get(i, i);
        out.set(i, i, v + 1.0);
    }
    let degree: Vec<f64> = (0..n).map(|i| out.row(i).iter().sum()).collect();
    for i in 0..n {
        for j in 0..n {
            let v = out.get(i, j);
            out.set(i, j, v / (degree[i] * degree[j]).sqrt());
        }
    }
    (out, degree)
}

/// Gradient of `group_weights` (as a dense adjacency) with respect to the
/// node embeddings, given upstream gradient `grad_a` on the dense adjacency.
pub(crate) fn group_weights_backward(
    nodes: &Tensor,
    edges: &[GroupedEdge],
    group_cosine: &[bool],
    grad_a: &Tensor,
) -> Tensor {
    let m = nodes.cols();
    let mut grad_nodes = Tensor::zeros(nodes.shape());
    let ng = group_cosine.len();
    let mut raw = Vec::with_capacity(edges.len());
    let mut cos = Vec::with_capacity(edges.len());
    for e in edges {
        if group_cosine[e.group] {
            let c = cosine_similarity(nodes.row(e.source), nodes.row(e.target), COSINE_EPS);
            cos.push(c);
            raw.push(c.max(0.0) + WEIGHT_FLOOR);
        } else {
            cos.push(0.0);
            raw.push(1.0);
        }
    }
    let mut sums = vec![0.0; ng];
    for (e, r) in edges.iter().zip(&raw) {
        sums[e.group] += r;
    }
    let dw: Vec<f64> = edges.iter().map(|e| grad_a.get(e.target, e.source)).collect();
    // Σ_{e∈g} dw_e · w_e
    let mut weighted = vec![0.0; ng];
    for ((e, r), d) in edges.iter().zip(&raw).zip(&dw) {
        weighted[e.group] += d * r / sums[e.group];
    }
    let gd = grad_nodes.data_mut();
    for (idx, e) in edges.iter().enumerate() {
        if !group_cosine[e.group] || cos[idx] <= 0.0 {
            continue;
        }
        let dc = (dw[idx] - weighted[e.group]) / sums[e.group];
        let u = nodes.row(e.source);
        let v = nodes.row(e.target);
        let nu_raw = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv_raw = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nu = nu_raw.max(COSINE_EPS);
        let nv = nv_raw.max(COSINE_EPS);
        let c = cos[idx];
        for k in 0..m {
            let mut du = v[k] / (nu * nv);
            if nu_raw > COSINE_EPS {
                du -= c * u[k] / (nu * nu);
            }
            let mut dv = u[k] / (nu * nv);
            if nv_raw > COSINE_EPS {
                dv -= c * v[k] / (nv * nv);
            }
            gd[e.source * m + k] += dc * du;
            gd[e.target * m + k] += dc * dv;
        }
    }
    grad_nodes
}

/// Gradient of `sym_normalize` with respect to `A`.
pub(crate) fn sym_normalize_backward(out: &Tensor, degree: &[f64], grad_out: &Tensor) -> Tensor {
    let n = out.rows();
    let mut dd = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let t = grad_out.get(i, j) * out.get(i, j);
            dd[i] += t;
            dd[j] += t;
        }
    }
    for (i, d) in dd.iter_mut().enumerate() {
        *d *= -0.5 / degree[i];
    }
    let mut grad = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let v = grad_out.get(i, j) / (degree[i] * degree[j]).sqrt() + dd[i];
            grad.set(i, j, v);
        }
    }
    grad
}
