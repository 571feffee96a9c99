use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use nalgebra::{DMatrix, DVector};

use super::{
    compress_pair, intra_loss, pair_loss_eff, pair_quadratic, pair_weight_map, select_anchor,
    ConfidenceMap, EquivalentPointSet, IntraPenalty, PointMapRecord,
};
use crate::camera::RigidTransform;
use crate::error::{Error, Result};
use crate::geometry::PairPrior;
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Adaptive-moment steps on the log-scales.
    pub steps: usize,
    pub lr: f64,
    pub penalty: IntraPenalty,
    /// Majorize-minimize sweeps run after the moment steps.
    pub refine_iterations: usize,
    /// Refinement stops once no scale changes by more than this fraction.
    pub refine_tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            steps: 500,
            lr: 1e-2,
            penalty: IntraPenalty::default(),
            refine_iterations: 200,
            refine_tolerance: 1e-13,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSolution {
    /// Solved scale of every directed record `(i, j)`.
    pub scales: BTreeMap<(usize, usize), f64>,
    /// Records whose scale was pinned to 1, one per connected component.
    pub pinned: Vec<(usize, usize)>,
    /// Anchor record chosen for each view.
    pub anchors: BTreeMap<usize, (usize, usize)>,
    /// Objective after every accepted step, starting with the initial value.
    pub history: Vec<f64>,
    pub components: usize,
}

impl ScaleSolution {
    pub fn scale(&self, i: usize, j: usize) -> Option<f64> {
        self.scales.get(&(i, j)).copied()
    }

    /// Scaled depth priors for every record.
    pub fn priors(&self, records: &[PointMapRecord]) -> Vec<PairPrior> {
        records
            .iter()
            .filter_map(|r| self.scale(r.i, r.j).map(|s| r.to_pair_prior(s)))
            .collect()
    }

    pub fn final_objective(&self) -> f64 {
        *self.history.last().unwrap_or(&0.0)
    }
}

struct IntraTerm {
    rec: usize,
    anchor: usize,
    weight: ConfidenceMap,
}

struct Problem<'a> {
    records: &'a [PointMapRecord],
    pairs: Vec<(usize, usize, EquivalentPointSet)>,
    intra: Vec<IntraTerm>,
    poses: &'a [RigidTransform],
    penalty: IntraPenalty,
}

impl Problem<'_> {
    fn objective(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let s: Vec<f64> = u.iter().map(|v| v.exp()).collect();
        let mut grad_s = vec![0.0; u.len()];
        let mut total = 0.0;
        for (a, b, eq) in &self.pairs {
            let (ri, rj) = (&self.records[*a], &self.records[*b]);
            let l = pair_loss_eff(eq, s[*a], s[*b], &self.poses[ri.i], &self.poses[rj.i]);
            total += l.value;
            grad_s[*a] += l.d_s_ij;
            grad_s[*b] += l.d_s_ji;
        }
        for t in &self.intra {
            if t.rec == t.anchor {
                continue;
            }
            let l = intra_loss(
                &self.records[t.rec].x11,
                &self.records[t.anchor].x11,
                &t.weight,
                s[t.rec],
                s[t.anchor],
                self.penalty,
            )?;
            total += l.value;
            grad_s[t.rec] += l.d_s_ij;
            grad_s[t.anchor] += l.d_s_ia;
        }
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("scale objective {total} at log-scales {u:?}")));
        }
        let grad_u = grad_s.iter().zip(&s).map(|(g, s)| g * s).collect();
        Ok((total, grad_u))
    }
}

impl Problem<'_> {
    /// Minimizes the quadratic majorizer of the objective at `s` with the
    /// pinned scales held at their current values. Every term is a
    /// homogeneous quadratic in the scales, so the surrogate is `s^T H s`.
    fn majorize_minimize(&self, s: &[f64], free: &[bool]) -> Option<Vec<f64>> {
        let n = s.len();
        let mut h = DMatrix::<f64>::zeros(n, n);
        for (a, b, eq) in &self.pairs {
            let (p, q, r) = pair_quadratic(eq, &self.poses[self.records[*a].i], &self.poses[self.records[*b].i]);
            h[(*a, *a)] += p;
            h[(*b, *b)] += r;
            h[(*a, *b)] -= q;
            h[(*b, *a)] -= q;
        }
        for t in &self.intra {
            if t.rec == t.anchor {
                continue;
            }
            let (x, y) = (&self.records[t.rec].x11, &self.records[t.anchor].x11);
            let (mut aa, mut ab, mut bb) = (0.0, 0.0, 0.0);
            for ((p, q), c) in x.as_slice().iter().zip(y.as_slice()).zip(t.weight.as_slice()) {
                if *c == 0.0 {
                    continue;
                }
                for k in 0..3 {
                    let (u, v) = (c * p[k], c * q[k]);
                    let w = 0.5 * self.penalty.majorizer_weight(u * s[t.rec] - v * s[t.anchor]);
                    aa += w * u * u;
                    ab += w * u * v;
                    bb += w * v * v;
                }
            }
            h[(t.rec, t.rec)] += aa;
            h[(t.anchor, t.anchor)] += bb;
            h[(t.rec, t.anchor)] -= ab;
            h[(t.anchor, t.rec)] -= ab;
        }
        let idx: Vec<usize> = (0..n).filter(|&k| free[k]).collect();
        let m = idx.len();
        let mut hff = DMatrix::<f64>::zeros(m, m);
        let mut rhs = DVector::<f64>::zeros(m);
        for (r, &a) in idx.iter().enumerate() {
            for (c, &b) in idx.iter().enumerate() {
                hff[(r, c)] = h[(a, b)];
            }
            rhs[r] = -(0..n).filter(|&b| !free[b]).map(|b| h[(a, b)] * s[b]).sum::<f64>();
        }
        let sol = hff.lu().solve(&rhs)?;
        let mut out = s.to_vec();
        for (r, &a) in idx.iter().enumerate() {
            out[a] = sol[r];
        }
        out.iter().all(|v| *v > 0.0 && v.is_finite()).then_some(out)
    }
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut c = x;
    while parent[c] != r {
        let n = parent[c];
        parent[c] = r;
        c = n;
    }
    r
}

/// Solves for one scale per directed record. Every record needs its
/// mirrored counterpart; `poses[v]` is the camera-to-world transform of view
/// `v`. The gauge of every connected component of the pair graph is fixed by
/// pinning its highest-confidence record to scale 1.
struct Setup<'a> {
    problem: Problem<'a>,
    free: Vec<bool>,
    pin_of_root: BTreeMap<usize, usize>,
    anchors: BTreeMap<usize, (usize, usize)>,
}

fn setup<'a>(records: &'a [PointMapRecord], poses: &'a [RigidTransform], penalty: IntraPenalty) -> Result<Setup<'a>> {
    let mut index = BTreeMap::new();
    for (k, r) in records.iter().enumerate() {
        r.validate()?;
        if r.i >= poses.len() || r.j >= poses.len() {
            return Err(Error::InvalidParameter(format!(
                "record ({}, {}) references a view without a pose",
                r.i, r.j
            )));
        }
        if index.insert((r.i, r.j), k).is_some() {
            return Err(Error::InvalidParameter(format!("duplicate record ({}, {})", r.i, r.j)));
        }
    }
    let mut pair_idx = Vec::new();
    for (&(i, j), &a) in &index {
        let b = *index.get(&(j, i)).ok_or_else(|| {
            Error::InvalidParameter(format!("record ({i}, {j}) has no mirrored record ({j}, {i})"))
        })?;
        if i < j {
            pair_idx.push((a, b));
        }
    }
    let pairs = pair_idx
        .par_iter()
        .map(|&(a, b)| compress_pair(&records[a], &records[b]).map(|eq| (a, b, eq)))
        .collect::<Result<Vec<_>>>()?;

    let mut views: Vec<usize> = records.iter().map(|r| r.i).collect();
    views.sort_unstable();
    views.dedup();
    let mut anchors = BTreeMap::new();
    let mut anchor_of = BTreeMap::new();
    for &v in &views {
        let a = select_anchor(v, records)?;
        anchors.insert(v, (records[a].i, records[a].j));
        anchor_of.insert(v, a);
    }
    let mut intra = Vec::new();
    for (k, r) in records.iter().enumerate() {
        let a = anchor_of[&r.i];
        let ar = &records[a];
        let mirror = &records[index[&(ar.j, ar.i)]];
        intra.push(IntraTerm {
            rec: k,
            anchor: a,
            weight: pair_weight_map(&ar.c11, &mirror.c21)?,
        });
    }

    let mut parent: Vec<usize> = (0..poses.len()).collect();
    for r in records {
        let (a, b) = (find(&mut parent, r.i), find(&mut parent, r.j));
        parent[a] = b;
    }
    let mut pin_of_root: BTreeMap<usize, usize> = BTreeMap::new();
    for (k, r) in records.iter().enumerate() {
        let root = find(&mut parent, r.i);
        let better = match pin_of_root.get(&root) {
            None => true,
            Some(&p) => r.confidence_sum() > records[p].confidence_sum(),
        };
        if better {
            pin_of_root.insert(root, k);
        }
    }
    if pin_of_root.len() > 1 {
        log::warn!(
            "pair graph has {} connected components; each is solved in its own gauge",
            pin_of_root.len()
        );
    }
    let mut free = vec![true; records.len()];
    for &p in pin_of_root.values() {
        free[p] = false;
    }

    let problem = Problem {
        records,
        pairs,
        intra,
        poses,
        penalty,
    };
    Ok(Setup { problem, free, pin_of_root, anchors })
}

/// Full objective (pairwise plus intra terms) at the given directed scales.
pub fn scale_objective(
    records: &[PointMapRecord],
    poses: &[RigidTransform],
    scales: &BTreeMap<(usize, usize), f64>,
    penalty: IntraPenalty,
) -> Result<f64> {
    let st = setup(records, poses, penalty)?;
    let u = records
        .iter()
        .map(|r| {
            scales
                .get(&(r.i, r.j))
                .filter(|s| **s > 0.0)
                .map(|s| s.ln())
                .ok_or_else(|| Error::InvalidParameter(format!("no positive scale for record ({}, {})", r.i, r.j)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(st.problem.objective(&u)?.0)
}

pub fn solve_scales(
    records: &[PointMapRecord],
    poses: &[RigidTransform],
    config: &SolverConfig,
) -> Result<ScaleSolution> {
    let Setup { problem, free, pin_of_root, anchors } = setup(records, poses, config.penalty)?;
    let mut u = vec![0.0; records.len()];
    let (mut f, mut g) = problem.objective(&u)?;
    let mut history = vec![f];
    let mut adam = Adam::new(u.len(), AdamConfig { eps: 1e-12, ..AdamConfig::default() });
    let mut lr = config.lr;
    for _ in 0..config.steps {
        for (gk, fr) in g.iter_mut().zip(&free) {
            if !fr {
                *gk = 0.0;
            }
        }
        let mut cand = u.clone();
        adam.step(&mut cand, &g, lr);
        let (fc, gc) = problem.objective(&cand)?;
        if fc <= f {
            u = cand;
            f = fc;
            g = gc;
            history.push(f);
        } else {
            lr *= 0.5;
        }
    }

    for _ in 0..config.refine_iterations {
        let s: Vec<f64> = u.iter().map(|v| v.exp()).collect();
        let Some(next) = problem.majorize_minimize(&s, &free) else {
            log::warn!("scale refinement produced a non-positive or singular update; keeping the current scales");
            break;
        };
        let cand: Vec<f64> = next.iter().map(|v| v.ln()).collect();
        let (fc, _) = problem.objective(&cand)?;
        if fc > f {
            break;
        }
        let change = s.iter().zip(&next).map(|(a, b)| ((b - a) / a).abs()).fold(0.0, f64::max);
        u = cand;
        f = fc;
        history.push(f);
        if change <= config.refine_tolerance {
            break;
        }
    }

    let mut pinned: Vec<(usize, usize)> = pin_of_root.values().map(|&k| (records[k].i, records[k].j)).collect();
    pinned.sort_unstable();
    let scales = records.iter().zip(&u).map(|(r, v)| ((r.i, r.j), v.exp())).collect();
    Ok(ScaleSolution {
        scales,
        pinned,
        anchors,
        history,
        components: pin_of_root.len(),
    })
}

/// Text table `i j s_ij s_ji`, one line per unordered pair.
pub fn scales_to_table(sol: &ScaleSolution) -> String {
    let mut out = String::from("# i j s_ij s_ji\n");
    for (&(i, j), s) in &sol.scales {
        if i < j {
            let back = sol.scale(j, i).unwrap_or(f64::NAN);
            let _ = writeln!(out, "{i} {j} {s:.12e} {back:.12e}");
        }
    }
    out
}

pub fn scales_from_table(text: &str) -> Result<BTreeMap<(usize, usize), f64>> {
    let mut out = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |m: &str| Error::Parse {
            file: "scales".into(),
            line: ln + 1,
            message: m.into(),
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(err("expected `i j s_ij s_ji`"));
        }
        let i: usize = f[0].parse().map_err(|_| err("bad view index"))?;
        let j: usize = f[1].parse().map_err(|_| err("bad view index"))?;
        let a: f64 = f[2].parse().map_err(|_| err("bad scale"))?;
        let b: f64 = f[3].parse().map_err(|_| err("bad scale"))?;
        if !(a > 0.0 && b > 0.0) {
            return Err(err("scales must be positive"));
        }
        out.insert((i, j), a);
        out.insert((j, i), b);
    }
    Ok(out)
}
