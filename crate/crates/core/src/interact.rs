//! Point-wise feature interaction: KNN neighborhoods, relative positional
//! encoding and per-channel vector self-attention.

use std::cmp::Ordering;
use std::rc::Rc;

use rand::Rng;
use rayon::prelude::*;

use crate::diffcore::nn::{Linear, Mlp};
use crate::diffcore::{Bound, ParamStore, Real, Var};
use crate::error::{Error, Result};
use crate::scene::FEATURE_DIM;

/// Brute-force search is used below this many points.
pub const BRUTE_FORCE_LIMIT: usize = 20_000;

pub const THETA_HIDDEN: usize = 64;
pub const GAMMA_HIDDEN: usize = 64;

/// `Ω(i)` for every point: the point itself followed by its K nearest
/// others, ordered by distance then index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborGraph {
    pub num_points: usize,
    /// Entries per point, `min(K + 1, M)`.
    pub width: usize,
    pub index: Vec<usize>,
}

impl NeighborGraph {
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.index[i * self.width..(i + 1) * self.width]
    }

    /// Mean distance from each point to its neighbors (self excluded); zero
    /// when a point has none.
    pub fn mean_distance(&self, points: &[[f64; 3]]) -> Vec<f64> {
        (0..self.num_points)
            .map(|i| {
                let others = &self.neighbors(i)[1..];
                if others.is_empty() {
                    return 0.0;
                }
                others.iter().map(|&j| dist2(points[i], points[j]).sqrt()).sum::<f64>() / others.len() as f64
            })
            .collect()
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn by_dist_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// Keeps the `k` best `(d², index)` candidates in sorted order.
fn push_candidate(best: &mut Vec<(f64, usize)>, k: usize, cand: (f64, usize)) {
    if best.len() == k && by_dist_then_index(&cand, &best[k - 1]) != Ordering::Less {
        return;
    }
    let pos = best.partition_point(|b| by_dist_then_index(b, &cand) == Ordering::Less);
    best.insert(pos, cand);
    best.truncate(k);
}

/// Exact KNN; brute force below [`BRUTE_FORCE_LIMIT`] points, grid search
/// above.
pub fn knn(points: &[[f64; 3]], k: usize) -> NeighborGraph {
    if points.len() < BRUTE_FORCE_LIMIT {
        knn_brute(points, k)
    } else {
        knn_grid(points, k)
    }
}

fn assemble(points: &[[f64; 3]], k: usize, rows: Vec<Vec<(f64, usize)>>) -> NeighborGraph {
    let m = points.len();
    let width = (k + 1).min(m);
    let mut index = Vec::with_capacity(m * width);
    for (i, row) in rows.into_iter().enumerate() {
        index.push(i);
        index.extend(row.into_iter().map(|(_, j)| j));
    }
    NeighborGraph { num_points: m, width, index }
}

pub fn knn_brute(points: &[[f64; 3]], k: usize) -> NeighborGraph {
    let k_eff = k.min(points.len().saturating_sub(1));
    let rows = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let mut best = Vec::with_capacity(k_eff + 1);
            if k_eff > 0 {
                for (j, &p) in points.iter().enumerate() {
                    if j != i {
                        push_candidate(&mut best, k_eff, (dist2(points[i], p), j));
                    }
                }
            }
            best
        })
        .collect();
    assemble(points, k, rows)
}

/// Exact KNN over a uniform grid, visiting cells in growing Chebyshev rings
/// until no unvisited cell can hold a closer point.
pub fn knn_grid(points: &[[f64; 3]], k: usize) -> NeighborGraph {
    let m = points.len();
    let k_eff = k.min(m.saturating_sub(1));
    if k_eff == 0 {
        return assemble(points, k, vec![Vec::new(); m]);
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let ext: Vec<f64> = (0..3).map(|a| (hi[a] - lo[a]).max(1e-9)).collect();
    let volume: f64 = ext.iter().product();
    let cell = (volume * 2.0 / m as f64).cbrt().max(ext.iter().cloned().fold(0.0, f64::max) / 256.0);
    let dims: [usize; 3] = std::array::from_fn(|a| ((ext[a] / cell).floor() as usize + 1).min(1 << 10));
    let cell_of = |p: [f64; 3]| -> [usize; 3] {
        std::array::from_fn(|a| (((p[a] - lo[a]) / cell) as usize).min(dims[a] - 1))
    };
    let flat = |c: [usize; 3]| (c[2] * dims[1] + c[1]) * dims[0] + c[0];
    let mut starts = vec![0usize; dims[0] * dims[1] * dims[2] + 1];
    for p in points {
        starts[flat(cell_of(*p)) + 1] += 1;
    }
    for c in 1..starts.len() {
        starts[c] += starts[c - 1];
    }
    let mut fill = starts.clone();
    let mut members = vec![0usize; m];
    for (i, p) in points.iter().enumerate() {
        let c = flat(cell_of(*p));
        members[fill[c]] = i;
        fill[c] += 1;
    }
    let max_ring = *dims.iter().max().expect("three axes");

    let rows = (0..m)
        .into_par_iter()
        .map(|i| {
            let q = points[i];
            let qc = cell_of(q);
            let mut best = Vec::with_capacity(k_eff + 1);
            for r in 0..=max_ring {
                let r = r as isize;
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                                continue;
                            }
                            let c = [qc[0] as isize + dx, qc[1] as isize + dy, qc[2] as isize + dz];
                            if (0..3).any(|a| c[a] < 0 || c[a] >= dims[a] as isize) {
                                continue;
                            }
                            let f = flat([c[0] as usize, c[1] as usize, c[2] as usize]);
                            for &j in &members[starts[f]..starts[f + 1]] {
                                if j != i {
                                    push_candidate(&mut best, k_eff, (dist2(q, points[j]), j));
                                }
                            }
                        }
                    }
                }
                // anything outside ring r is at least r·cell away
                let reach = r as f64 * cell;
                if best.len() == k_eff && best[k_eff - 1].0 < reach * reach {
                    break;
                }
            }
            best
        })
        .collect();
    assemble(points, k, rows)
}

/// Output of one attention pass.
pub struct Attended<'t, T: Real> {
    /// `[M, 56]`
    pub features: Var<'t, T>,
    /// `[M, |Ω|, 56]` per-channel neighbor weights.
    pub weights: Var<'t, T>,
}

/// `f̂_i = Σ_{j∈Ω(i)} ρ(γ(φ(f_i) − ψ(f_j) + δ_ij)) ⊙ (α(f_j) + δ_ij)` with
/// `δ_ij = θ(x_i − x_j)` and `ρ` a softmax over `j` per channel.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub phi: Linear,
    pub psi: Linear,
    pub alpha_transform: Linear,
    pub gamma: Mlp,
    pub theta: Mlp,
}

impl AttentionBlock {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R) -> Self {
        let d = FEATURE_DIM;
        AttentionBlock {
            phi: Linear::new(store, "attn.phi", d, d, false, rng),
            psi: Linear::new(store, "attn.psi", d, d, false, rng),
            alpha_transform: Linear::new(store, "attn.alpha", d, d, false, rng),
            gamma: Mlp::new(store, "attn.gamma", &[d, GAMMA_HIDDEN, d], rng),
            theta: Mlp::new(store, "attn.theta", &[3, THETA_HIDDEN, d], rng),
        }
    }

    /// `θ(x_i − x_j)` for rows of offsets `[N, 3]`.
    pub fn pos_encode<'t, T: Real>(&self, p: &Bound<'t, T>, offsets: Var<'t, T>) -> Result<Var<'t, T>> {
        self.theta.forward(p, offsets)
    }

    pub fn attend<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        features: Var<'t, T>,
        positions: Var<'t, T>,
        graph: &NeighborGraph,
    ) -> Result<Attended<'t, T>> {
        let m = graph.num_points;
        let n = graph.width;
        if features.shape() != [m, FEATURE_DIM] || positions.shape() != [m, 3] {
            return Err(Error::Shape(format!(
                "attention over {m} points needs features [{m}, {FEATURE_DIM}] and positions [{m}, 3], got {:?} and {:?}",
                features.shape(),
                positions.shape()
            )));
        }
        let centers: Rc<Vec<usize>> = Rc::new((0..m).flat_map(|i| std::iter::repeat_n(i, n)).collect());
        let nbrs = Rc::new(graph.index.clone());
        let offsets = positions.gather_rows(centers.clone())?.sub(positions.gather_rows(nbrs.clone())?)?;
        let delta = self.pos_encode(p, offsets)?;
        let q = self.phi.forward(p, features)?.gather_rows(centers)?;
        let k = self.psi.forward(p, features)?.gather_rows(nbrs.clone())?;
        let v = self.alpha_transform.forward(p, features)?.gather_rows(nbrs)?.add(delta)?;
        let logits = self.gamma.forward(p, q.sub(k)?.add(delta)?)?;
        let weights = logits.reshape(&[m, n, FEATURE_DIM])?.softmax(1)?;
        let out = weights.mul(v.reshape(&[m, n, FEATURE_DIM])?)?.sum_axis(1)?;
        Ok(Attended { features: out, weights })
    }

    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        features: Var<'t, T>,
        positions: Var<'t, T>,
        graph: &NeighborGraph,
    ) -> Result<Var<'t, T>> {
        Ok(self.attend(p, features, positions, graph)?.features)
    }
}

/// The "no interaction" ablation: features pass through unchanged.
pub fn attend_disabled<'t, T: Real>(features: Var<'t, T>) -> Var<'t, T> {
    features
}
