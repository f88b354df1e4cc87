//! Training objectives on time-frequency masks.
//!
//! * Weighted binary cross entropy, weighted elementwise by the mixture
//!   magnitude and averaged over bins.
//! * The noise-invariant loss: every query mask is paired with a noise mask,
//!   their sum is clamped at 1, and the pairing with the smallest total WBCE
//!   over all `n!` permutations is selected.
//! * A hinge on the summed mean noise activation, `max(0, Σ mean(N_i) − γ)`.
//! * The permutation-invariant loss for label-free, query-free separation.
//!
//! Every loss has a gradient twin working on raw slices; the model's backward
//! pass starts from those gradients.

use serde::{Deserialize, Serialize};

use crate::dsp::{MagnitudeGrid, Mask, MaskKind};
use crate::error::{Error, Result};
use crate::model::Variant;
use crate::real::Real;

/// Largest source count accepted by the exhaustive permutation search.
pub const MAX_PERMUTATION_SOURCES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub clamp_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            gamma: 0.25,
            clamp_eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.gamma >= 0.0 && self.gamma <= n as f64) {
            return Err(Error::invalid(format!("gamma {} outside [0, {n}]", self.gamma)));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::invalid("clamp_eps must be in (0, 0.5)"));
        }
        Ok(())
    }
}

/// Scalar summary of one objective evaluation. For variants without noise
/// heads `nit` holds the separation term and `reg` is zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub nit: f64,
    pub reg: f64,
    pub chosen_permutation: Vec<usize>,
}

/// Result of a minimum over permutations.
#[derive(Clone, Debug, PartialEq)]
pub struct PermutationOutcome<T> {
    pub loss: T,
    pub permutation: Vec<usize>,
    /// Number of candidate sums evaluated (always `n!`).
    pub candidates: usize,
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        out.push(p.clone());
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else {
            break;
        };
        let j = (i..n).rev().find(|&j| p[j] > p[i - 1]).unwrap();
        p.swap(i - 1, j);
        p[i..].reverse();
    }
    out
}

fn check_shapes<T: Real>(masks: &[&Mask<T>], x: &MagnitudeGrid<T>) -> Result<()> {
    for m in masks {
        if m.shape() != x.shape() {
            return Err(Error::invalid(format!(
                "mask shape {:?} does not match mixture {:?}",
                m.shape(),
                x.shape()
            )));
        }
    }
    Ok(())
}

fn check_count(n: usize, what: &str, got: usize) -> Result<()> {
    if got != n {
        return Err(Error::invalid(format!("expected {n} {what}, got {got}")));
    }
    Ok(())
}

fn guard_sources(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("at least one source is required"));
    }
    if n > MAX_PERMUTATION_SOURCES {
        return Err(Error::invalid(format!(
            "permutation search over {n} sources refused (limit {MAX_PERMUTATION_SOURCES}, {n}! candidates)"
        )));
    }
    Ok(())
}

/// Mean over bins of `x · (−m log p − (1−m) log(1−p))`, with `p` clamped to
/// `[eps, 1−eps]`. When `grad` is given, `scale · ∂/∂p` evaluated at the
/// clamped prediction is added into it, so saturated bins still receive a
/// finite, correctly signed gradient.
pub(crate) fn wbce_slice<T: Real>(target: &[T], pred: &[T], x: &[T], eps: T, grad: Option<(&mut [T], T)>) -> T {
    let one = T::one();
    let hi = one - eps;
    let inv_n = one / T::lit(target.len().max(1) as f64);
    let mut acc = T::zero();
    match grad {
        None => {
            for ((&m, &p), &w) in target.iter().zip(pred).zip(x) {
                let pc = p.max(eps).min(hi);
                acc += w * (-(m * pc.ln()) - (one - m) * (one - pc).ln());
            }
        }
        Some((g, scale)) => {
            let s = scale * inv_n;
            for (((&m, &p), &w), gi) in target.iter().zip(pred).zip(x).zip(g.iter_mut()) {
                let pc = p.max(eps).min(hi);
                acc += w * (-(m * pc.ln()) - (one - m) * (one - pc).ln());
                *gi += s * w * (-m / pc + (one - m) / (one - pc));
            }
        }
    }
    acc * inv_n
}

/// Weighted binary cross entropy with the default clamp of `1e-7`.
pub fn wbce<T: Real>(target: &Mask<T>, pred: &Mask<T>, x: &MagnitudeGrid<T>) -> Result<T> {
    wbce_with_eps(target, pred, x, LossConfig::default().clamp_eps)
}

pub fn wbce_with_eps<T: Real>(target: &Mask<T>, pred: &Mask<T>, x: &MagnitudeGrid<T>, eps: f64) -> Result<T> {
    check_shapes(&[target, pred], x)?;
    Ok(wbce_slice(target.values(), pred.values(), x.values(), T::lit(eps), None))
}

/// `Σ_i WBCE(M_i, M̂_i)`.
pub fn clipsep_loss<T: Real>(preds: &[Mask<T>], targets: &[Mask<T>], x: &MagnitudeGrid<T>) -> Result<T> {
    check_count(targets.len(), "predicted masks", preds.len())?;
    let mut total = T::zero();
    for (p, t) in preds.iter().zip(targets) {
        total += wbce(t, p, x)?;
    }
    Ok(total)
}

/// `min(1, a + b)` elementwise.
pub(crate) fn clamped_sum<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&p, &q)| (p + q).min(T::one())).collect()
}

fn min_over_permutations<T: Real>(cost: &[Vec<T>]) -> PermutationOutcome<T> {
    let n = cost.len();
    let mut best: Option<(T, Vec<usize>)> = None;
    let mut candidates = 0;
    for perm in permutations(n) {
        candidates += 1;
        let sum: T = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        if best.as_ref().is_none_or(|(b, _)| sum < *b) {
            best = Some((sum, perm));
        }
    }
    let (loss, permutation) = best.expect("at least one permutation");
    PermutationOutcome {
        loss,
        permutation,
        candidates,
    }
}

/// Pairwise cost `C[i][j] = WBCE(M_i, min(1, Q_i + N_j))`.
fn nit_costs<T: Real>(query: &[&[T]], noise: &[&[T]], targets: &[&[T]], x: &[T], eps: T) -> Vec<Vec<T>> {
    (0..query.len())
        .map(|i| {
            noise
                .iter()
                .map(|nj| wbce_slice(targets[i], &clamped_sum(query[i], nj), x, eps, None))
                .collect()
        })
        .collect()
}

/// Noise-invariant loss. `permutation[i]` is the noise head paired with query `i`.
pub fn nit_loss<T: Real>(
    query_masks: &[Mask<T>],
    noise_masks: &[Mask<T>],
    targets: &[Mask<T>],
    x: &MagnitudeGrid<T>,
) -> Result<PermutationOutcome<T>> {
    let n = targets.len();
    guard_sources(n)?;
    check_count(n, "query masks", query_masks.len())?;
    check_count(n, "noise masks", noise_masks.len())?;
    let all: Vec<&Mask<T>> = query_masks.iter().chain(noise_masks).chain(targets).collect();
    check_shapes(&all, x)?;
    let q: Vec<&[T]> = query_masks.iter().map(|m| m.values()).collect();
    let nz: Vec<&[T]> = noise_masks.iter().map(|m| m.values()).collect();
    let t: Vec<&[T]> = targets.iter().map(|m| m.values()).collect();
    let eps = T::lit(LossConfig::default().clamp_eps);
    Ok(min_over_permutations(&nit_costs(&q, &nz, &t, x.values(), eps)))
}

/// `max(0, Σ_i mean(N_i) − γ)`.
pub fn noise_reg<T: Real>(noise_masks: &[Mask<T>], gamma: f64) -> T {
    let s: T = noise_masks.iter().map(|m| m.mean()).sum();
    (s - T::lit(gamma)).max(T::zero())
}

/// `L_NIT + λ·L_REG` with its components.
pub fn nit_objective<T: Real>(
    query_masks: &[Mask<T>],
    noise_masks: &[Mask<T>],
    targets: &[Mask<T>],
    x: &MagnitudeGrid<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate(targets.len())?;
    let nit = nit_loss(query_masks, noise_masks, targets, x)?;
    let reg = noise_reg(noise_masks, cfg.gamma);
    Ok(LossBreakdown {
        total: nit.loss.f64() + cfg.lambda * reg.f64(),
        nit: nit.loss.f64(),
        reg: reg.f64(),
        chosen_permutation: nit.permutation,
    })
}

/// Permutation-invariant loss. `permutation[i]` is the prediction matched to target `i`.
pub fn pit_loss<T: Real>(preds: &[Mask<T>], targets: &[Mask<T>], x: &MagnitudeGrid<T>) -> Result<PermutationOutcome<T>> {
    let n = targets.len();
    guard_sources(n)?;
    check_count(n, "predicted masks", preds.len())?;
    let all: Vec<&Mask<T>> = preds.iter().chain(targets).collect();
    check_shapes(&all, x)?;
    let eps = T::lit(LossConfig::default().clamp_eps);
    let cost: Vec<Vec<T>> = targets
        .iter()
        .map(|t| {
            preds
                .iter()
                .map(|p| wbce_slice(t.values(), p.values(), x.values(), eps, None))
                .collect()
        })
        .collect();
    Ok(min_over_permutations(&cost))
}

/// Gradients of an objective with respect to the predicted masks.
pub(crate) struct MaskGrads<T> {
    pub query: Vec<Vec<T>>,
    pub noise: Vec<Vec<T>>,
}

/// Evaluates the variant's objective on raw mask slices and returns the
/// gradient with respect to each predicted mask, scaled by `scale`.
pub(crate) fn objective_with_grad<T: Real>(
    variant: Variant,
    query: &[Vec<T>],
    noise: &[Vec<T>],
    targets: &[&[T]],
    x: &[T],
    cfg: &LossConfig,
    scale: T,
) -> Result<(LossBreakdown, MaskGrads<T>)> {
    let n = targets.len();
    let cells = x.len();
    let eps = T::lit(cfg.clamp_eps);
    let mut gq = vec![vec![T::zero(); cells]; query.len()];
    let mut gn = vec![vec![T::zero(); cells]; noise.len()];
    let breakdown = match variant {
        Variant::Clipsep | Variant::Labelsep => {
            check_count(n, "query masks", query.len())?;
            let mut total = T::zero();
            for i in 0..n {
                total += wbce_slice(targets[i], &query[i], x, eps, Some((&mut gq[i], scale)));
            }
            LossBreakdown {
                total: total.f64(),
                nit: total.f64(),
                reg: 0.0,
                chosen_permutation: (0..n).collect(),
            }
        }
        Variant::Pit => {
            guard_sources(n)?;
            check_count(n, "predicted masks", query.len())?;
            let cost: Vec<Vec<T>> = (0..n)
                .map(|i| query.iter().map(|p| wbce_slice(targets[i], p, x, eps, None)).collect())
                .collect();
            let best = min_over_permutations(&cost);
            for (i, &j) in best.permutation.iter().enumerate() {
                wbce_slice(targets[i], &query[j], x, eps, Some((&mut gq[j], scale)));
            }
            LossBreakdown {
                total: best.loss.f64(),
                nit: best.loss.f64(),
                reg: 0.0,
                chosen_permutation: best.permutation,
            }
        }
        Variant::ClipsepNit => {
            guard_sources(n)?;
            check_count(n, "query masks", query.len())?;
            check_count(n, "noise masks", noise.len())?;
            let q: Vec<&[T]> = query.iter().map(|v| v.as_slice()).collect();
            let nz: Vec<&[T]> = noise.iter().map(|v| v.as_slice()).collect();
            let best = min_over_permutations(&nit_costs(&q, &nz, targets, x, eps));
            let one = T::one();
            let mut gsum = vec![T::zero(); cells];
            for (i, &j) in best.permutation.iter().enumerate() {
                let combined = clamped_sum(&query[i], &noise[j]);
                gsum.iter_mut().for_each(|g| *g = T::zero());
                wbce_slice(targets[i], &combined, x, eps, Some((&mut gsum, scale)));
                for c in 0..cells {
                    // min(1, a+b): subgradient 0 once the sum reaches 1.
                    if query[i][c] + noise[j][c] < one {
                        gq[i][c] += gsum[c];
                        gn[j][c] += gsum[c];
                    }
                }
            }
            let inv = one / T::lit(cells as f64);
            let s: T = noise
                .iter()
                .map(|m| m.iter().copied().sum::<T>() * inv)
                .sum();
            let gamma = T::lit(cfg.gamma);
            let reg = (s - gamma).max(T::zero());
            if s > gamma {
                let g = scale * T::lit(cfg.lambda) * inv;
                gn.iter_mut().for_each(|m| m.iter_mut().for_each(|v| *v += g));
            }
            LossBreakdown {
                total: best.loss.f64() + cfg.lambda * reg.f64(),
                nit: best.loss.f64(),
                reg: reg.f64(),
                chosen_permutation: best.permutation,
            }
        }
    };
    Ok((breakdown, MaskGrads { query: gq, noise: gn }))
}

pub(crate) fn predicted<T: Real>(frames: usize, bins: usize, data: Vec<T>) -> Mask<T> {
    Mask::from_trusted(frames, bins, data, MaskKind::Predicted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Scalar-loop oracle, written independently of `wbce_slice`.
    fn wbce_oracle(m: &[f64], p: &[f64], x: &[f64]) -> f64 {
        let eps = 1e-7;
        let mut s = 0.0;
        for i in 0..m.len() {
            let q = if p[i] < eps { eps } else if p[i] > 1.0 - eps { 1.0 - eps } else { p[i] };
            s += x[i] * (-m[i] * q.ln() - (1.0 - m[i]) * (1.0 - q).ln());
        }
        s / m.len() as f64
    }

    fn rand_mask(rng: &mut ChaCha8Rng, t: usize, f: usize, binary: bool) -> Mask<f64> {
        let v = (0..t * f)
            .map(|_| if binary { rng.random_range(0..2) as f64 } else { rng.random_range(0.001..0.999) })
            .collect();
        Mask::from_values(t, f, v, if binary { MaskKind::Binary } else { MaskKind::Predicted }).unwrap()
    }

    fn rand_mag(rng: &mut ChaCha8Rng, t: usize, f: usize) -> MagnitudeGrid<f64> {
        MagnitudeGrid::from_values(t, f, (0..t * f).map(|_| rng.random_range(0.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn permutations_enumerate_factorial() {
        assert_eq!(permutations(1), vec![vec![0]]);
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(permutations(3)[0], vec![0, 1, 2]);
        assert_eq!(permutations(3)[5], vec![2, 1, 0]);
        assert_eq!(permutations(5).len(), 120);
    }

    #[test]
    fn wbce_single_bin() {
        let m = Mask::from_values(1, 1, vec![1.0f64], MaskKind::Binary).unwrap();
        let p = Mask::from_values(1, 1, vec![0.5f64], MaskKind::Predicted).unwrap();
        let x = MagnitudeGrid::from_values(1, 1, vec![2.0f64]).unwrap();
        let l = wbce(&m, &p, &x).unwrap();
        assert!((l - 1.3862944).abs() < 1e-7);
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn wbce_perfect_and_zero_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = rand_mask(&mut rng, 4, 5, true);
        let x = rand_mag(&mut rng, 4, 5);
        let l = wbce(&m, &m, &x).unwrap();
        let bound = x.mean() * -(1.0f64 - 1e-7).ln();
        assert!(l <= bound * (1.0 + 1e-9) && l >= 0.0);
        let p = rand_mask(&mut rng, 4, 5, false);
        let z = MagnitudeGrid::from_values(4, 5, vec![0.0; 20]).unwrap();
        assert_eq!(wbce(&m, &p, &z).unwrap(), 0.0);
        let wrong = MagnitudeGrid::from_values(5, 4, vec![0.0; 20]).unwrap();
        assert!(wbce(&m, &p, &wrong).is_err());
    }

    #[test]
    fn clipsep_loss_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mag(&mut rng, 3, 4);
        let t: Vec<_> = (0..3).map(|_| rand_mask(&mut rng, 3, 4, true)).collect();
        let p: Vec<_> = (0..3).map(|_| rand_mask(&mut rng, 3, 4, false)).collect();
        let l = clipsep_loss(&p, &t, &x).unwrap();
        let oracle: f64 = (0..3).map(|i| wbce_oracle(t[i].values(), p[i].values(), x.values())).sum();
        assert!((l - oracle).abs() < 1e-12);
        assert_eq!(clipsep_loss(&p[..1], &t[..1], &x).unwrap(), wbce(&t[0], &p[0], &x).unwrap());
        let doubled = clipsep_loss(&[p[0].clone(), p[0].clone()], &[t[0].clone(), t[0].clone()], &x).unwrap();
        assert!((doubled - 2.0 * wbce(&t[0], &p[0], &x).unwrap()).abs() < 1e-12);
        assert!(clipsep_loss(&p[..2], &t, &x).is_err());
    }

    #[test]
    fn nit_symmetric_noise_and_zero_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_mag(&mut rng, 3, 3);
        let t: Vec<_> = (0..2).map(|_| rand_mask(&mut rng, 3, 3, true)).collect();
        let q: Vec<_> = (0..2).map(|_| rand_mask(&mut rng, 3, 3, false)).collect();
        let nz = rand_mask(&mut rng, 3, 3, false);
        let out = nit_loss(&q, &[nz.clone(), nz.clone()], &t, &x).unwrap();
        assert_eq!(out.permutation, vec![0, 1]);
        let zero = Mask::zeros(3, 3);
        let out = nit_loss(&q, &[zero.clone(), zero], &t, &x).unwrap();
        assert!((out.loss - clipsep_loss(&q, &t, &x).unwrap()).abs() < 1e-12);
        assert_eq!(out.candidates, 2);
    }

    #[test]
    fn nit_refuses_large_n() {
        let m = Mask::<f64>::zeros(1, 1);
        let x = MagnitudeGrid::from_values(1, 1, vec![1.0]).unwrap();
        let v = vec![m; 7];
        assert!(nit_loss(&v, &v, &v, &x).is_err());
        assert!(pit_loss(&v, &v, &x).is_err());
    }

    #[test]
    fn noise_reg_hinge_values() {
        let c = |v: f64| Mask::from_values(2, 2, vec![v; 4], MaskKind::Predicted).unwrap();
        assert_eq!(noise_reg(&[c(0.125), c(0.125)], 0.25), 0.0);
        assert!((noise_reg(&[c(0.25), c(0.25)], 0.25) - 0.25).abs() < 1e-12);
        assert!((noise_reg(&[c(0.3), c(0.4)], 0.25) - 0.45).abs() < 1e-12);
    }

    #[test]
    fn nit_objective_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_mag(&mut rng, 4, 4);
        let t: Vec<_> = (0..2).map(|_| rand_mask(&mut rng, 4, 4, true)).collect();
        let q: Vec<_> = (0..2).map(|_| rand_mask(&mut rng, 4, 4, false)).collect();
        let nz: Vec<_> = (0..2).map(|_| rand_mask(&mut rng, 4, 4, false)).collect();
        let cfg = LossConfig::default();
        let b = nit_objective(&q, &nz, &t, &x, &cfg).unwrap();
        let expect = nit_loss(&q, &nz, &t, &x).unwrap().loss + 0.1 * noise_reg(&nz, 0.25);
        assert!((b.total - expect).abs() < 1e-12);
        let b0 = nit_objective(&q, &nz, &t, &x, &LossConfig { lambda: 0.0, ..cfg }).unwrap();
        assert_eq!(b0.total, b0.nit);
        let bn = nit_objective(&q, &nz, &t, &x, &LossConfig { gamma: 2.0, ..cfg }).unwrap();
        assert_eq!(bn.reg, 0.0);
        assert!(nit_objective(&q, &nz, &t, &x, &LossConfig { gamma: 2.5, ..cfg }).is_err());
    }

    #[test]
    fn pit_identity_and_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_mag(&mut rng, 3, 5);
        let t: Vec<_> = (0..2).map(|_| rand_mask(&mut rng, 3, 5, true)).collect();
        let out = pit_loss(&t, &t, &x).unwrap();
        assert_eq!(out.permutation, vec![0, 1]);
        assert!(out.loss < 1e-5);
        let p: Vec<_> = (0..2).map(|_| rand_mask(&mut rng, 3, 5, false)).collect();
        let a = pit_loss(&p, &t, &x).unwrap();
        let swapped = vec![p[1].clone(), p[0].clone()];
        let b = pit_loss(&swapped, &t, &x).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(b.permutation, vec![1 - a.permutation[0], 1 - a.permutation[1]]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (t, f) = (3, 4);
        let x = rand_mag(&mut rng, t, f);
        let targets: Vec<_> = (0..2).map(|_| rand_mask(&mut rng, t, f, true)).collect();
        let tv: Vec<&[f64]> = targets.iter().map(|m| m.values()).collect();
        let cfg = LossConfig { gamma: 0.1, ..Default::default() };
        for variant in [Variant::Clipsep, Variant::Pit, Variant::ClipsepNit] {
            let q: Vec<Vec<f64>> = (0..2).map(|_| (0..t * f).map(|_| rng.random_range(0.05..0.6)).collect()).collect();
            let nz: Vec<Vec<f64>> = if variant == Variant::ClipsepNit {
                (0..2).map(|_| (0..t * f).map(|_| rng.random_range(0.05..0.3)).collect()).collect()
            } else {
                vec![]
            };
            let (_, g) = objective_with_grad(variant, &q, &nz, &tv, x.values(), &cfg, 1.0).unwrap();
            let eval = |q: &[Vec<f64>], nz: &[Vec<f64>]| {
                objective_with_grad(variant, q, nz, &tv, x.values(), &cfg, 1.0).unwrap().0.total
            };
            let h = 1e-7;
            for i in 0..2 {
                for c in 0..t * f {
                    let mut qp = q.clone();
                    qp[i][c] += h;
                    let mut qm = q.clone();
                    qm[i][c] -= h;
                    let fd = (eval(&qp, &nz) - eval(&qm, &nz)) / (2.0 * h);
                    assert!((fd - g.query[i][c]).abs() < 1e-5, "{variant:?} q{i}[{c}] {fd} vs {}", g.query[i][c]);
                    if !nz.is_empty() {
                        let mut np = nz.clone();
                        np[i][c] += h;
                        let mut nm = nz.clone();
                        nm[i][c] -= h;
                        let fd = (eval(&q, &np) - eval(&q, &nm)) / (2.0 * h);
                        assert!((fd - g.noise[i][c]).abs() < 1e-5);
                    }
                }
            }
        }
    }
}
