use serde::Serialize;

use super::AnalysisError;
use crate::prompt::Matrix;
use crate::scalar::Scalar;

/// One agglomeration step. Node ids `0..n` are leaves; the merge at
/// position `i` creates node `n + i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Merge<T> {
    pub left: usize,
    pub right: usize,
    /// Average-linkage distance (`1 − similarity`) between the two parts.
    pub height: T,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dendrogram<T> {
    pub merges: Vec<Merge<T>>,
    /// Leaves in left-to-right order of the tree.
    pub leaf_order: Vec<usize>,
}

const SYMMETRY_TOL: f64 = 1e-9;

/// Average-linkage agglomerative clustering of a similarity matrix on
/// the distance `1 − sim`. The diagonal is ignored.
///
/// Each step merges the closest pair of active clusters. Clusters are
/// identified by their smallest leaf index; among equally close pairs the
/// one with the smaller identifiers merges first, and the cluster with the
/// smaller identifier becomes the left child.
pub fn cluster_order<T: Scalar>(sim: &Matrix<T>) -> Result<Dendrogram<T>, AnalysisError> {
    let (rows, cols) = sim.shape();
    if rows != cols {
        return Err(AnalysisError::NotSquare { rows, cols });
    }
    let n = rows;
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (sim.get(i, j), sim.get(j, i));
            if (a - b).abs().widen() > SYMMETRY_TOL {
                return Err(AnalysisError::AsymmetricInput {
                    row: i,
                    col: j,
                    a: a.widen(),
                    b: b.widen(),
                });
            }
        }
    }

    // dist[i][j] between active clusters keyed by smallest leaf; only i < j is read.
    let mut dist: Vec<Vec<T>> = (0..n)
        .map(|i| (0..n).map(|j| T::one() - sim.get(i, j)).collect())
        .collect();
    let mut active: Vec<usize> = (0..n).collect();
    let mut node_of: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    let mut merges = Vec::with_capacity(n.saturating_sub(1));

    while active.len() > 1 {
        let mut best: Option<(usize, usize, T)> = None;
        for (ai, &a) in active.iter().enumerate() {
            for &b in &active[ai + 1..] {
                let d = dist[a][b];
                if best.is_none_or(|(_, _, bd)| d < bd) {
                    best = Some((a, b, d));
                }
            }
        }
        let (a, b, height) = best.expect("at least two active clusters");
        let (sa, sb) = (T::of_usize(size[a]), T::of_usize(size[b]));
        for &k in &active {
            if k == a || k == b {
                continue;
            }
            let dak = dist[a.min(k)][a.max(k)];
            let dbk = dist[b.min(k)][b.max(k)];
            dist[a.min(k)][a.max(k)] = (sa * dak + sb * dbk) / (sa + sb);
        }
        merges.push(Merge {
            left: node_of[a],
            right: node_of[b],
            height,
            size: size[a] + size[b],
        });
        node_of[a] = n + merges.len() - 1;
        size[a] += size[b];
        active.retain(|&k| k != b);
    }

    let leaf_order = match n {
        0 => Vec::new(),
        _ => leaves_left_to_right(n, &merges),
    };
    Ok(Dendrogram { merges, leaf_order })
}

fn leaves_left_to_right<T>(n: usize, merges: &[Merge<T>]) -> Vec<usize> {
    let root = n + merges.len() - 1;
    let mut out = Vec::with_capacity(n);
    let mut stack = vec![if merges.is_empty() { 0 } else { root }];
    while let Some(node) = stack.pop() {
        if node < n {
            out.push(node);
        } else {
            let m = &merges[node - n];
            stack.push(m.right);
            stack.push(m.left);
        }
    }
    out
}
