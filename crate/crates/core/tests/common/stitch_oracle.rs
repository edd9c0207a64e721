//! Brute-force reference for the stitching loop, with closed-form stub models.
#![allow(dead_code)]

use dits::data::{Dataset, Source, Trajectory, Transition};
use dits::rng::Rng;
use dits::stitching::{StitchError, StitchModels};
use ndarray::Array2;

/// Closed-form models: value is a fixed linear function, every ensemble
/// member is a Gaussian around `s + drift` with its own scale, the action is
/// the displacement and the reward is the first-coordinate displacement.
pub struct Stub {
    pub weights: Vec<f64>,
    pub drift: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Stub {
    pub fn value(&self, s: &[f64]) -> f64 {
        s.iter().zip(&self.weights).map(|(a, b)| a * b).sum()
    }

    pub fn logps(&self, s: &[f64], sn: &[f64]) -> Vec<f64> {
        self.scales
            .iter()
            .map(|sd| {
                s.iter()
                    .zip(sn)
                    .zip(&self.drift)
                    .map(|((a, b), d)| {
                        let z = (b - a - d) / sd;
                        -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
                    })
                    .sum()
            })
            .collect()
    }

    pub fn reward(&self, s: &[f64], sn: &[f64]) -> f64 {
        sn[0] - s[0]
    }
}

impl StitchModels for Stub {
    fn values(&self, states: &Array2<f64>) -> Result<Vec<f64>, StitchError> {
        Ok(states.rows().into_iter().map(|r| self.value(r.as_slice().unwrap())).collect())
    }
    fn logdensities(&self, s: &[f64], s_next: &[f64]) -> Result<Vec<f64>, StitchError> {
        Ok(self.logps(s, s_next))
    }
    fn action(&self, s: &[f64], s_next: &[f64]) -> Result<Vec<f64>, StitchError> {
        Ok(s_next.iter().zip(s).map(|(a, b)| a - b).collect())
    }
    fn rewards(&self, pairs: &[(Vec<f64>, Vec<f64>)], _rngs: &mut [Rng]) -> Result<Vec<f64>, StitchError> {
        Ok(pairs.iter().map(|(s, sn)| self.reward(s, sn)).collect())
    }
}

fn f64s(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn state(ds: &Dataset, traj: usize, step: usize) -> Vec<f64> {
    let t = &ds.trajectories[traj];
    if step < t.len() {
        f64s(&t.transitions[step].state)
    } else {
        f64s(&t.transitions[step - 1].next_state)
    }
}

/// Builds a trajectory from a state path and per-step rewards.
pub fn path(states: &[&[f32]], rewards: &[f32], terminated: bool, source: Source) -> Trajectory {
    let transitions = states
        .windows(2)
        .zip(rewards)
        .map(|(w, &r)| {
            let a: Vec<f32> = w[1].iter().zip(w[0]).map(|(x, y)| x - y).collect();
            Transition::new(w[0].to_vec(), a, r, w[1].to_vec()).with_origin(source)
        })
        .collect();
    Trajectory::new(transitions, terminated, source)
}

fn logmeanexp(v: &[f64]) -> f64 {
    // Direct evaluation; inputs here are small enough not to underflow.
    (v.iter().map(|x| x.exp()).sum::<f64>() / v.len() as f64).ln()
}

/// Result of one oracle walk: transitions and, for each, whether it was created.
pub struct OracleWalk {
    pub transitions: Vec<Transition>,
    pub created: Vec<bool>,
    pub terminated: bool,
}

pub fn walk(ds: &Dataset, start: usize, stub: &Stub, rho: f64, max_len: usize) -> OracleWalk {
    let mut all = Vec::new();
    for (ti, t) in ds.trajectories.iter().enumerate() {
        for step in 0..=t.len() {
            all.push((ti, step));
        }
    }
    let mut visited = vec![(start, 0usize)];
    let (mut traj, mut step) = (start, 0usize);
    let mut out = OracleWalk {
        transitions: vec![],
        created: vec![],
        terminated: false,
    };
    while out.transitions.len() < max_len {
        let t = &ds.trajectories[traj];
        if step == t.len() {
            out.terminated = t.terminated;
            break;
        }
        let s = state(ds, traj, step);
        let obs = state(ds, traj, step + 1);
        // Every other state strictly inside the ball, not yet visited.
        let mut best: Option<((usize, usize), f64)> = None;
        for &(ct, cs) in &all {
            if (ct, cs) == (traj, step + 1) || visited.contains(&(ct, cs)) {
                continue;
            }
            let c = state(ds, ct, cs);
            let d: f64 = c.iter().zip(&obs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if d >= rho {
                continue;
            }
            let v = stub.value(&c);
            // `all` is in ascending (traj, step) order, so strict > keeps the
            // earliest among equals.
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some(((ct, cs), v));
            }
        }
        let mut next = (traj, step + 1);
        let mut made = false;
        if let Some(((ct, cs), v)) = best {
            let c = state(ds, ct, cs);
            let passes_value = v > stub.value(&obs);
            let lp_c = stub.logps(&s, &c);
            let passes_dyn = lp_c.iter().cloned().fold(f64::INFINITY, f64::min) > logmeanexp(&stub.logps(&s, &obs));
            if passes_value && passes_dyn {
                let a: Vec<f32> = c.iter().zip(&s).map(|(x, y)| (x - y) as f32).collect();
                let r = stub.reward(&s, &c) as f32;
                let cf: Vec<f32> = c.iter().map(|&x| x as f32).collect();
                out.transitions
                    .push(Transition::new(t.transitions[step].state.clone(), a, r, cf).with_origin(Source::Stitched));
                out.created.push(true);
                next = (ct, cs);
                made = true;
            }
        }
        if !made {
            out.transitions.push(t.transitions[step].clone());
            out.created.push(false);
        }
        if visited.contains(&next) {
            break;
        }
        visited.push(next);
        (traj, step) = next;
    }
    out
}

/// One epoch: walk, accept on the signed margin, keep the `keep` best.
pub fn epoch(ds: &Dataset, stub: &Stub, rho: f64, max_len: usize, p_tilde: f64, keep: usize) -> Vec<Trajectory> {
    let mut out = Vec::new();
    for (i, orig) in ds.trajectories.iter().enumerate() {
        let w = walk(ds, i, stub, rho, max_len);
        if !w.created.iter().any(|&c| c) {
            out.push(orig.clone());
            continue;
        }
        let cand_sum: f64 = w.transitions.iter().map(|t| t.reward as f64).sum();
        let orig_sum = orig.reward_sum();
        if cand_sum > orig_sum + p_tilde * orig_sum.abs() {
            let mut t = Trajectory::new(w.transitions, w.terminated, Source::Stitched);
            t.behavior = orig.behavior;
            out.push(t);
        } else {
            out.push(orig.clone());
        }
    }
    // Repeated selection of the largest remaining sum, earliest first on ties.
    let mut remaining: Vec<Option<Trajectory>> = out.into_iter().map(Some).collect();
    let mut kept = Vec::new();
    for _ in 0..keep.min(remaining.len()) {
        let mut best: Option<usize> = None;
        for (i, t) in remaining.iter().enumerate() {
            if let Some(t) = t {
                if best.is_none_or(|b| t.reward_sum() > remaining[b].as_ref().unwrap().reward_sum()) {
                    best = Some(i);
                }
            }
        }
        kept.push(remaining[best.unwrap()].take().unwrap());
    }
    kept
}

pub fn filter(trajs: &[Trajectory], kappa: f64) -> Vec<Trajectory> {
    let sums: Vec<f64> = trajs.iter().map(|t| t.reward_sum()).collect();
    let hi = sums.iter().cloned().fold(f64::MIN, f64::max);
    let lo = sums.iter().cloned().fold(f64::MAX, f64::min);
    trajs
        .iter()
        .zip(&sums)
        .filter(|(_, &s)| !(s < hi - kappa * (hi - lo)))
        .map(|(t, _)| t.clone())
        .collect()
}

/// Three small handcrafted datasets with their stubs and radii.
pub fn toy_cases() -> Vec<(&'static str, Dataset, Stub, f64)> {
    let off = Source::Offline;
    let gen = Source::Generated;
    // 1-D: a slow offline path next to a faster generated one.
    let a = Dataset::with_trajectories(
        1,
        1,
        vec![
            path(&[&[0.0], &[0.1], &[0.2], &[0.3]], &[0.1, 0.1, 0.1], false, off),
            path(&[&[0.32], &[0.6], &[0.9]], &[0.28, 0.3], true, gen),
            path(&[&[0.12], &[0.05], &[0.0]], &[-0.07, -0.05], false, off),
            path(&[&[0.5], &[0.45], &[0.4], &[0.62]], &[-0.05, -0.05, 0.22], false, off),
        ],
    );
    let stub_a = Stub {
        weights: vec![1.0],
        drift: vec![0.25],
        scales: vec![0.2, 0.25, 0.3],
    };
    // 2-D with exact ties: the same state appears on several trajectories.
    let b = Dataset::with_trajectories(
        2,
        2,
        vec![
            path(&[&[0.0, 0.0], &[0.2, 0.0], &[0.4, 0.0]], &[0.0, 0.0], false, off),
            path(&[&[0.5, 0.5], &[0.25, 0.05], &[0.6, 0.3]], &[0.1, 0.2], false, off),
            path(&[&[0.9, 0.9], &[0.25, 0.05], &[0.6, 0.3], &[0.8, 0.4]], &[0.1, 0.2, 0.3], true, gen),
            path(&[&[0.21, 0.04], &[0.45, 0.05]], &[0.5], true, gen),
            path(&[&[0.3, 0.3], &[0.21, 0.04]], &[-0.1], false, off),
        ],
    );
    let stub_b = Stub {
        weights: vec![1.0, 0.5],
        drift: vec![0.2, 0.0],
        scales: vec![0.15, 0.2],
    };
    // 1-D with cycles: jumps can lead back into already visited territory.
    let c = Dataset::with_trajectories(
        1,
        1,
        vec![
            path(&[&[0.0], &[0.2], &[0.4], &[0.2], &[0.4]], &[0.2, 0.2, -0.2, 0.2], false, off),
            path(&[&[0.41], &[0.61], &[0.41], &[0.81]], &[0.2, -0.2, 0.4], false, gen),
            path(&[&[0.19], &[0.39], &[0.6], &[0.79], &[1.0]], &[0.2, 0.21, 0.19, 0.21], true, off),
            path(&[&[0.62], &[0.8], &[1.01]], &[0.18, 0.21], true, gen),
            path(&[&[1.0], &[0.5], &[0.0]], &[-0.5, -0.5], false, off),
            path(&[&[0.05], &[0.21]], &[0.16], false, off),
        ],
    );
    let stub_c = Stub {
        weights: vec![1.0],
        drift: vec![0.2],
        scales: vec![0.05, 0.08, 0.1, 0.12],
    };
    vec![("line", a, stub_a, 0.1), ("ties", b, stub_b, 0.08), ("cycles", c, stub_c, 0.05)]
}
