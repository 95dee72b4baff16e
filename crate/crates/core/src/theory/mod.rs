//! Ridge/SVD toolkit for the linearized two-block model: closed-form ridge
//! solutions, singular-direction energy decomposition, Gram and Rayleigh
//! identities, pruning penalties, synthetic overlapping-subspace systems for
//! Monte Carlo studies, and a finite-difference-validated linearization of a
//! trained attack model.
//!
//! Everything here runs in 64-bit regardless of model precision.

pub mod linalg;

use alloc::vec;
use alloc::vec::Vec;

use libm::sqrt;

use crate::attack::{bind_attack, forward_bound, ModelState};
use crate::autodiff::{Tape, Tensor};
use crate::error::CoreError;
use crate::rng::Rng64;
use crate::Result;

pub use linalg::{cholesky_solve, dot, norm2, random_orthonormal, svd_jacobi, Mat, Svd};

/// The two-block least-squares system (offsets already subtracted from the
/// targets): clean rows, attack rows, shared columns, ridge weight.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub c_clean: Mat,
    pub c_attack: Mat,
    pub y_clean: Vec<f64>,
    pub y_attack: Vec<f64>,
    pub lambda: f64,
}

impl LinearSystem {
    pub fn new(
        c_clean: Mat,
        c_attack: Mat,
        y_clean: Vec<f64>,
        y_attack: Vec<f64>,
        lambda: f64,
    ) -> Result<Self> {
        if c_clean.rows > 0 && c_attack.rows > 0 && c_clean.cols != c_attack.cols {
            return Err(CoreError::ShapeMismatch {
                context: "clean vs attack column counts",
                left: vec![c_clean.rows, c_clean.cols],
                right: vec![c_attack.rows, c_attack.cols],
            });
        }
        if y_clean.len() != c_clean.rows || y_attack.len() != c_attack.rows {
            return Err(CoreError::ShapeMismatch {
                context: "target lengths vs block rows",
                left: vec![y_clean.len(), y_attack.len()],
                right: vec![c_clean.rows, c_attack.rows],
            });
        }
        if lambda < 0.0 {
            return Err(CoreError::Contract("ridge weight must be >= 0"));
        }
        Ok(LinearSystem {
            c_clean,
            c_attack,
            y_clean,
            y_attack,
            lambda,
        })
    }

    pub fn p(&self) -> usize {
        if self.c_clean.rows > 0 {
            self.c_clean.cols
        } else {
            self.c_attack.cols
        }
    }

    pub fn rows(&self) -> usize {
        self.c_clean.rows + self.c_attack.rows
    }

    pub fn stacked_c(&self) -> Result<Mat> {
        self.c_clean.vstack(&self.c_attack)
    }

    pub fn stacked_y(&self) -> Vec<f64> {
        let mut y = self.y_clean.clone();
        y.extend_from_slice(&self.y_attack);
        y
    }

    /// ||C phi - Y||^2 + lambda ||phi||^2
    pub fn loss(&self, phi: &[f64]) -> f64 {
        let (lc, la) = self.block_losses(phi);
        lc + la + self.lambda * dot(phi, phi)
    }

    /// Data-fit terms per block, no regularizer.
    pub fn block_losses(&self, phi: &[f64]) -> (f64, f64) {
        let rc = residual_sq(&self.c_clean, phi, &self.y_clean);
        let ra = residual_sq(&self.c_attack, phi, &self.y_attack);
        (rc, ra)
    }

    /// Same system with only the listed columns kept.
    pub fn restricted(&self, keep: &[usize]) -> LinearSystem {
        LinearSystem {
            c_clean: self.c_clean.select_cols(keep),
            c_attack: self.c_attack.select_cols(keep),
            y_clean: self.y_clean.clone(),
            y_attack: self.y_attack.clone(),
            lambda: self.lambda,
        }
    }
}

fn residual_sq(c: &Mat, phi: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..c.rows {
        let r = dot(c.row(i), phi) - y[i];
        s += r * r;
    }
    s
}

const RIDGE_RESIDUAL_TOL: f64 = 1e-8;

/// Closed-form ridge minimizer phi* = (C^T C + lambda I)^-1 C^T Y via a
/// symmetric solve; switches to the dual form C^T (C C^T + lambda I)^-1 Y
/// when the system is wide. The normal-equation residual is verified to
/// `1e-8 * ||C^T Y||`, with iterative refinement if needed.
pub fn ridge_solve(sys: &LinearSystem) -> Result<Vec<f64>> {
    let p = sys.p();
    let n = sys.rows();
    let c = sys.stacked_c()?;
    let y = sys.stacked_y();
    let cty = c.matvec_t(&y);
    let phi = if sys.lambda == 0.0 || p <= n {
        // primal normal equations
        let mut gram = c.transpose().matmul(&c)?;
        for i in 0..p {
            gram.data[i * p + i] += sys.lambda;
        }
        let mut phi = match cholesky_solve(&gram, &cty) {
            Ok(x) => x,
            Err(CoreError::SingularSystem(_)) => {
                return Err(CoreError::SingularSystem("ridge normal equations"))
            }
            Err(e) => return Err(e),
        };
        // iterative refinement against the normal equations
        for _ in 0..2 {
            let r = normal_residual(&c, sys.lambda, &phi, &cty);
            if norm2(&r) <= RIDGE_RESIDUAL_TOL * norm2(&cty) {
                break;
            }
            let correction = cholesky_solve(&gram, &r)?;
            for (x, d) in phi.iter_mut().zip(&correction) {
                *x += d;
            }
        }
        phi
    } else {
        // dual: alpha = (C C^T + lambda I)^-1 Y, phi = C^T alpha
        let mut gram = c.matmul(&c.transpose())?;
        for i in 0..n {
            gram.data[i * n + i] += sys.lambda;
        }
        let alpha = cholesky_solve(&gram, &y)?;
        c.matvec_t(&alpha)
    };
    let r = normal_residual(&c, sys.lambda, &phi, &cty);
    if norm2(&r) > RIDGE_RESIDUAL_TOL * norm2(&cty).max(1e-30) {
        return Err(CoreError::NumericalFailure("ridge residual check"));
    }
    Ok(phi)
}

/// C^T Y - (C^T C + lambda I) phi, computed as matvecs.
fn normal_residual(c: &Mat, lambda: f64, phi: &[f64], cty: &[f64]) -> Vec<f64> {
    let cphi = c.matvec(phi);
    let ctcphi = c.matvec_t(&cphi);
    cty.iter()
        .zip(ctcphi.iter().zip(phi))
        .map(|(&b, (&a, &x))| b - a - lambda * x)
        .collect()
}

/// Per-direction view of the ridge solution: singular values, coefficients
/// alpha_j = sigma_j/(sigma_j^2 + lambda) * (u_j^T Y), per-direction energies
/// alpha_j^2, and the reconstruction sum alpha_j v_j.
#[derive(Debug, Clone)]
pub struct SpectrumReport {
    pub sigma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub energy: Vec<f64>,
    pub energy_sum: f64,
    pub reconstruction: Vec<f64>,
}

pub fn svd_spectrum(sys: &LinearSystem) -> Result<SpectrumReport> {
    let c = sys.stacked_c()?;
    let y = sys.stacked_y();
    let svd = svd_jacobi(&c)?;
    let p = sys.p();
    let r = svd.sigma.len();
    let scale = svd.sigma.first().copied().unwrap_or(0.0);
    let mut alpha = vec![0.0f64; r];
    let mut energy = vec![0.0f64; r];
    let mut reconstruction = vec![0.0f64; p];
    for j in 0..r {
        let sj = svd.sigma[j];
        if sj <= scale * 1e-13 {
            continue; // regularization kills numerically-null directions
        }
        let uy = dot(&svd.u.col(j), &y);
        let denom = sj * sj + sys.lambda;
        if denom == 0.0 {
            continue;
        }
        alpha[j] = sj / denom * uy;
        energy[j] = alpha[j] * alpha[j];
        for (out, &vj) in reconstruction.iter_mut().zip(svd.v.col(j).iter()) {
            *out += alpha[j] * vj;
        }
    }
    let energy_sum = energy.iter().sum();
    Ok(SpectrumReport {
        sigma: svd.sigma,
        alpha,
        energy,
        energy_sum,
        reconstruction,
    })
}

/// Max absolute deviation of C^T C from C_c^T C_c + C_a^T C_a.
pub fn gram_check(sys: &LinearSystem) -> Result<f64> {
    let c = sys.stacked_c()?;
    let full = c.transpose().matmul(&c)?;
    let cc = sys.c_clean.transpose().matmul(&sys.c_clean)?;
    let ca = sys.c_attack.transpose().matmul(&sys.c_attack)?;
    let mut dev = 0.0f64;
    for i in 0..full.data.len() {
        let split = cc.data.get(i).copied().unwrap_or(0.0) + ca.data.get(i).copied().unwrap_or(0.0);
        dev = dev.max((full.data[i] - split).abs());
    }
    Ok(dev)
}

/// (||C v||^2, ||C_c v||^2, ||C_a v||^2) for a unit vector v.
pub fn rayleigh_split(sys: &LinearSystem, v: &[f64]) -> Result<(f64, f64, f64)> {
    if (norm2(v) - 1.0).abs() > 1e-8 {
        return Err(CoreError::Contract("rayleigh vector must be unit norm"));
    }
    let c = sys.stacked_c()?;
    let full = dot(&c.matvec(v), &c.matvec(v));
    let clean = dot(&sys.c_clean.matvec(v), &sys.c_clean.matvec(v));
    let attack = dot(&sys.c_attack.matvec(v), &sys.c_attack.matvec(v));
    Ok((full, clean, attack))
}

/// A synthesized system with known shared directions.
#[derive(Debug, Clone)]
pub struct SynthSystem {
    pub system: LinearSystem,
    /// p x k_shared orthonormal basis of the shared subspace.
    pub shared_basis: Mat,
}

const SYNTH_BASE_STRENGTH: f64 = 0.05;
const SYNTH_LAMBDA: f64 = 1.0;

/// Builds C_c and C_a from orthonormal direction sets sharing exactly
/// `k_shared` directions of R^p; shared directions carry `strength_ratio`
/// times the singular strength of the disjoint ones, and the targets have
/// unit-scale projections on every left direction. Deterministic per seed.
pub fn synth_overlapping_system(
    p: usize,
    n_c: usize,
    n_a: usize,
    k_shared: usize,
    strength_ratio: f64,
    seed: u64,
) -> Result<SynthSystem> {
    if strength_ratio < 1.0 {
        return Err(CoreError::Contract("strength ratio must be >= 1"));
    }
    if k_shared > p || k_shared > n_c || k_shared > n_a || p == 0 || n_c == 0 || n_a == 0 {
        return Err(CoreError::Contract(
            "infeasible dimensions for the overlapping construction",
        ));
    }
    let own_each = ((p - k_shared) / 2).min(n_c - k_shared).min(n_a - k_shared);
    let m_c = k_shared + own_each;
    let m_a = k_shared + own_each;
    let mut rng = Rng64::stream(seed, &[0x73796e74]); // "synt"
    let v_all = random_orthonormal(&mut rng, p, k_shared + 2 * own_each)?;
    let shared_cols: Vec<usize> = (0..k_shared).collect();
    let clean_cols: Vec<usize> = (0..k_shared)
        .chain(k_shared..k_shared + own_each)
        .collect();
    let attack_cols: Vec<usize> = (0..k_shared)
        .chain(k_shared + own_each..k_shared + 2 * own_each)
        .collect();
    let v_c = v_all.select_cols(&clean_cols);
    let v_a = v_all.select_cols(&attack_cols);
    let shared_basis = v_all.select_cols(&shared_cols);

    let strength = |j: usize| {
        if j < k_shared {
            strength_ratio * SYNTH_BASE_STRENGTH
        } else {
            SYNTH_BASE_STRENGTH
        }
    };
    let build_block = |rng: &mut Rng64, n: usize, m: usize, v: &Mat| -> Result<(Mat, Vec<f64>)> {
        let u = random_orthonormal(rng, n, m)?;
        // C = U diag(s) V^T
        let mut us = u.clone();
        for i in 0..n {
            for j in 0..m {
                us.data[i * m + j] *= strength(j);
            }
        }
        let c = us.matmul(&v.transpose())?;
        // Y = U g with unit-scale coefficients
        let g: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
        let y = u.matvec(&g);
        Ok((c, y))
    };
    let (c_c, y_c) = build_block(&mut rng, n_c, m_c, &v_c)?;
    let (c_a, y_a) = build_block(&mut rng, n_a, m_a, &v_a)?;
    Ok(SynthSystem {
        system: LinearSystem::new(c_c, c_a, y_c, y_a, SYNTH_LAMBDA)?,
        shared_basis,
    })
}

/// ||P_shared phi||^2 / ||phi||^2.
pub fn shared_energy_fraction(synth: &SynthSystem, phi: &[f64]) -> f64 {
    let total = dot(phi, phi);
    if total == 0.0 {
        return 0.0;
    }
    let proj = synth.shared_basis.matvec_t(phi);
    dot(&proj, &proj) / total
}

/// Loss increase from zeroing the coordinate set S and re-solving on the
/// complement, computed both by the quadratic form in (C^T C + lambda I) and
/// by the direct loss difference.
#[derive(Debug, Clone)]
pub struct PrunePenaltyReport {
    pub pruned: Vec<usize>,
    /// Restricted solution embedded back into R^p (zeros on S).
    pub restricted_solution: Vec<f64>,
    pub delta_quadratic: f64,
    pub delta_direct: f64,
    pub delta_clean_block: f64,
    pub delta_attack_block: f64,
    /// ||phi*_S||, the pruned mass of the full solution.
    pub pruned_norm: f64,
}

pub fn pruning_penalty(sys: &LinearSystem, s: &[usize]) -> Result<PrunePenaltyReport> {
    let p = sys.p();
    let mut pruned = s.to_vec();
    pruned.sort_unstable();
    pruned.dedup();
    if pruned.last().is_some_and(|&i| i >= p) {
        return Err(CoreError::IndexOutOfRange {
            context: "pruned coordinate",
            index: *pruned.last().unwrap(),
            bound: p,
        });
    }
    let phi_star = ridge_solve(sys)?;
    let keep: Vec<usize> = (0..p).filter(|i| !pruned.contains(i)).collect();
    let mut embedded = vec![0.0f64; p];
    if !keep.is_empty() {
        let restricted = sys.restricted(&keep);
        let psi = ridge_solve(&restricted)?;
        for (&col, &val) in keep.iter().zip(&psi) {
            embedded[col] = val;
        }
    }
    // quadratic form in the regularized Gram matrix, evaluated as matvecs
    let c = sys.stacked_c()?;
    let d: Vec<f64> = embedded
        .iter()
        .zip(&phi_star)
        .map(|(&a, &b)| a - b)
        .collect();
    let cd = c.matvec(&d);
    let delta_quadratic = dot(&cd, &cd) + sys.lambda * dot(&d, &d);
    let delta_direct = sys.loss(&embedded) - sys.loss(&phi_star);
    let (full_c, full_a) = sys.block_losses(&phi_star);
    let (rest_c, rest_a) = sys.block_losses(&embedded);
    let pruned_norm = sqrt(
        pruned
            .iter()
            .map(|&i| phi_star[i] * phi_star[i])
            .sum::<f64>(),
    );
    Ok(PrunePenaltyReport {
        pruned,
        restricted_solution: embedded,
        delta_quadratic,
        delta_direct,
        delta_clean_block: rest_c - full_c,
        delta_attack_block: rest_a - full_a,
        pruned_norm,
    })
}

/// One Monte Carlo observation of the concentration study.
#[derive(Debug, Clone)]
pub struct StudyRow {
    pub seed: u64,
    pub k_shared: usize,
    pub ratio: f64,
    pub energy_fraction: f64,
    pub delta_l_core: f64,
    pub delta_l_clean_block: f64,
    pub delta_l_attack_block: f64,
}

/// Runs the overlapping-subspace study: for every (seed, ratio) pair, build a
/// system, solve it, measure the shared-direction energy fraction and the
/// penalty for pruning the top-|phi*| decile.
pub fn concentration_study(
    p: usize,
    n_c: usize,
    n_a: usize,
    k_shared: usize,
    ratios: &[f64],
    seeds: &[u64],
) -> Result<Vec<StudyRow>> {
    let core_size = p.div_ceil(10);
    let mut rows = Vec::with_capacity(seeds.len() * ratios.len());
    for &seed in seeds {
        for &ratio in ratios {
            let synth = synth_overlapping_system(p, n_c, n_a, k_shared, ratio, seed)?;
            let phi = ridge_solve(&synth.system)?;
            let fraction = shared_energy_fraction(&synth, &phi);
            let mut order: Vec<usize> = (0..p).collect();
            order.sort_by(|&i, &j| {
                phi[j]
                    .abs()
                    .partial_cmp(&phi[i].abs())
                    .unwrap()
                    .then(i.cmp(&j))
            });
            let core: Vec<usize> = order[..core_size].to_vec();
            let penalty = pruning_penalty(&synth.system, &core)?;
            rows.push(StudyRow {
                seed,
                k_shared,
                ratio,
                energy_fraction: fraction,
                delta_l_core: penalty.delta_direct,
                delta_l_clean_block: penalty.delta_clean_block,
                delta_l_attack_block: penalty.delta_attack_block,
            });
        }
    }
    Ok(rows)
}

// ── empirical bridge ────────────────────────────────────────────────

/// Central-difference Jacobian of `f` at `phi0`. Probe per coordinate is
/// `probe_scale * max(|phi_i|, probe_floor)`.
pub fn jacobian_fd<F>(f: &F, phi0: &[f64], probe_scale: f64, probe_floor: f64) -> Result<Mat>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if probe_scale <= 0.0 {
        return Err(CoreError::Contract("probe scale must be positive"));
    }
    let base = f(phi0)?;
    let rows = base.len();
    let mut jac = Mat::zeros(rows, phi0.len());
    let mut work = phi0.to_vec();
    for i in 0..phi0.len() {
        let h = probe_scale * phi0[i].abs().max(probe_floor);
        work[i] = phi0[i] + h;
        let plus = f(&work)?;
        work[i] = phi0[i] - h;
        let minus = f(&work)?;
        work[i] = phi0[i];
        for r in 0..rows {
            jac.data[r * phi0.len() + i] = (plus[r] - minus[r]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// The linearized system extracted from a trained model, plus the worst
/// relative deviation between the reverse-mode Jacobian and finite-difference
/// probes on sampled coordinates.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub system: LinearSystem,
    pub fd_max_rel_dev: f64,
}

const PROBE_FLOOR: f64 = 1e-4;

/// Linearizes the trained attack around its optimum: rows are logit-space
/// Jacobian rows with respect to every attack parameter (reverse mode,
/// finite-difference-checked on `fd_check_cols` sampled coordinates), and the
/// targets are logit residuals `margin * onehot(class) - current logits`.
/// Clean rows use the true labels, attack rows the target class.
#[allow(clippy::too_many_arguments)]
pub fn empirical_linearization(
    state: &ModelState,
    clean: &[Tensor],
    clean_labels: &[usize],
    poisoned: &[Tensor],
    target_class: usize,
    probe_scale: f64,
    lambda: f64,
    margin: f64,
    fd_check_cols: usize,
) -> Result<Linearization> {
    let module = state
        .attack
        .as_ref()
        .ok_or(CoreError::Contract("linearization needs an attack module"))?;
    if clean.len() != clean_labels.len() {
        return Err(CoreError::Contract("clean labels must match clean batch"));
    }
    let k = state.config.classes;
    if target_class >= k {
        return Err(CoreError::IndexOutOfRange {
            context: "linearization target class",
            index: target_class,
            bound: k,
        });
    }
    let p = module.param_count();

    // reverse-mode Jacobian rows + current logits, one tape per image
    let build_block = |images: &[Tensor]| -> Result<(Mat, Vec<f64>)> {
        let mut jac = Mat::zeros(images.len() * k, p);
        let mut logits_flat = Vec::with_capacity(images.len() * k);
        for (bi, img) in images.iter().enumerate() {
            let mut tape = Tape::new();
            let bb = state.backbone.bind(&mut tape);
            let bound = bind_attack(&mut tape, module);
            let param_nodes = bound.param_nodes();
            let img_node = tape.leaf_tensor(img);
            let trace = forward_bound(&mut tape, &state.config, &bb, Some(&bound), img_node)?;
            logits_flat.extend_from_slice(tape.value(trace.logits));
            for class in 0..k {
                let scalar = tape.slice_cols(trace.logits, class, class + 1)?;
                tape.zero_grads();
                tape.backward(scalar)?;
                let row = &mut jac.data[(bi * k + class) * p..(bi * k + class + 1) * p];
                let mut offset = 0;
                for &node in &param_nodes {
                    let g = tape.grad(node);
                    row[offset..offset + g.len()].copy_from_slice(g);
                    offset += g.len();
                }
            }
        }
        Ok((jac, logits_flat))
    };

    let (c_clean, logits_clean) = build_block(clean)?;
    let (c_attack, logits_attack) = build_block(poisoned)?;

    let residual_targets = |logits: &[f64], labels: &dyn Fn(usize) -> usize| -> Vec<f64> {
        logits
            .chunks(k)
            .enumerate()
            .flat_map(|(i, row)| {
                let label = labels(i);
                row.iter()
                    .enumerate()
                    .map(move |(j, &z)| if j == label { margin - z } else { -z })
                    .collect::<Vec<f64>>()
            })
            .collect()
    };
    let y_clean = residual_targets(&logits_clean, &|i| clean_labels[i]);
    let y_attack = residual_targets(&logits_attack, &|_| target_class);

    // finite-difference validation on sampled coordinates (top magnitudes
    // plus an even stride), against the full stacked Jacobian
    let phi0: Vec<f64> = module.flat_values().iter().map(|&x| x as f64).collect();
    let mut check_cols: Vec<usize> = {
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&i, &j| {
            phi0[j]
                .abs()
                .partial_cmp(&phi0[i].abs())
                .unwrap()
                .then(i.cmp(&j))
        });
        order[..fd_check_cols.min(p) / 2].to_vec()
    };
    let stride = p / (fd_check_cols.min(p) / 2 + 1).max(1);
    let mut idx = stride.max(1) - 1;
    while idx < p && check_cols.len() < fd_check_cols.min(p) {
        check_cols.push(idx);
        idx += stride.max(1);
    }
    check_cols.sort_unstable();
    check_cols.dedup();

    let mut work = state.clone();
    let eval = |work: &mut ModelState, phi: &[f64]| -> Result<Vec<f64>> {
        let flat: Vec<f32> = phi.iter().map(|&x| x as f32).collect();
        work.attack.as_mut().unwrap().set_flat(&flat)?;
        let mut out = Vec::with_capacity((clean.len() + poisoned.len()) * k);
        for img in clean.iter().chain(poisoned) {
            let mut tape = Tape::new();
            let img_node = tape.leaf_tensor(img);
            let trace = work.forward(&mut tape, img_node)?;
            out.extend_from_slice(tape.value(trace.logits));
        }
        Ok(out)
    };
    let mut fd_max_rel_dev = 0.0f64;
    let rows = (clean.len() + poisoned.len()) * k;
    let mut perturbed = phi0.clone();
    for &col in &check_cols {
        let h = probe_scale * phi0[col].abs().max(PROBE_FLOOR);
        perturbed[col] = phi0[col] + h;
        let plus = eval(&mut work, &perturbed)?;
        perturbed[col] = phi0[col] - h;
        let minus = eval(&mut work, &perturbed)?;
        // the parameter lives in 32-bit storage; difference actually realized
        let realized =
            ((phi0[col] + h) as f32 as f64) - ((phi0[col] - h) as f32 as f64);
        perturbed[col] = phi0[col];
        let mut fd_norm_sq = 0.0;
        let mut dev_sq = 0.0;
        for r in 0..rows {
            let fd = (plus[r] - minus[r]) / realized;
            let rev = if r < c_clean.rows {
                c_clean.at(r, col)
            } else {
                c_attack.at(r - c_clean.rows, col)
            };
            fd_norm_sq += fd * fd;
            dev_sq += (fd - rev) * (fd - rev);
        }
        let rel = sqrt(dev_sq) / sqrt(fd_norm_sq).max(1e-3);
        fd_max_rel_dev = fd_max_rel_dev.max(rel);
    }

    Ok(Linearization {
        system: LinearSystem::new(c_clean, c_attack, y_clean, y_attack, lambda)?,
        fd_max_rel_dev,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_system(seed: u64, n_c: usize, n_a: usize, p: usize, lambda: f64) -> LinearSystem {
        let mut rng = Rng64::new(seed);
        let c_c = Mat::from_vec(n_c, p, (0..n_c * p).map(|_| rng.normal()).collect()).unwrap();
        let c_a = Mat::from_vec(n_a, p, (0..n_a * p).map(|_| rng.normal()).collect()).unwrap();
        let y_c = (0..n_c).map(|_| rng.normal()).collect();
        let y_a = (0..n_a).map(|_| rng.normal()).collect();
        LinearSystem::new(c_c, c_a, y_c, y_a, lambda).unwrap()
    }

    #[test]
    fn ridge_identity_cases() {
        let sys = LinearSystem::new(
            Mat::identity(2),
            Mat::zeros(0, 2),
            vec![1.0, 2.0],
            vec![],
            0.0,
        )
        .unwrap();
        let phi = ridge_solve(&sys).unwrap();
        assert!((phi[0] - 1.0).abs() < 1e-12 && (phi[1] - 2.0).abs() < 1e-12);
        let sys1 = LinearSystem::new(
            Mat::identity(2),
            Mat::zeros(0, 2),
            vec![1.0, 2.0],
            vec![],
            1.0,
        )
        .unwrap();
        let phi1 = ridge_solve(&sys1).unwrap();
        assert!((phi1[0] - 0.5).abs() < 1e-12 && (phi1[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ridge_matches_elimination_and_descent_oracles() {
        let sys = random_system(41, 4, 2, 4, 0.3);
        let phi = ridge_solve(&sys).unwrap();

        // oracle 1: Gaussian elimination with partial pivoting on the normal
        // equations, written independently of the Cholesky path
        let c = sys.stacked_c().unwrap();
        let p = sys.p();
        let mut aug = vec![0.0f64; p * (p + 1)];
        for i in 0..p {
            for j in 0..p {
                let mut s = 0.0;
                for r in 0..c.rows {
                    s += c.at(r, i) * c.at(r, j);
                }
                aug[i * (p + 1) + j] = s + if i == j { sys.lambda } else { 0.0 };
            }
            let mut b = 0.0;
            for r in 0..c.rows {
                b += c.at(r, i) * sys.stacked_y()[r];
            }
            aug[i * (p + 1) + p] = b;
        }
        for col in 0..p {
            let pivot = (col..p)
                .max_by(|&a, &b| {
                    aug[a * (p + 1) + col]
                        .abs()
                        .partial_cmp(&aug[b * (p + 1) + col].abs())
                        .unwrap()
                })
                .unwrap();
            if pivot != col {
                for j in 0..=p {
                    aug.swap(col * (p + 1) + j, pivot * (p + 1) + j);
                }
            }
            for row in 0..p {
                if row == col {
                    continue;
                }
                let f = aug[row * (p + 1) + col] / aug[col * (p + 1) + col];
                for j in 0..=p {
                    aug[row * (p + 1) + j] -= f * aug[col * (p + 1) + j];
                }
            }
        }
        for i in 0..p {
            let oracle = aug[i * (p + 1) + p] / aug[i * (p + 1) + i];
            assert!((phi[i] - oracle).abs() < 1e-8, "coordinate {i}");
        }

        // oracle 2: 2000 steps of plain gradient descent on the ridge loss
        let y = sys.stacked_y();
        let frob_sq: f64 = c.data.iter().map(|x| x * x).sum();
        let lr = 1.0 / (2.0 * (frob_sq + sys.lambda));
        let mut x = vec![0.0f64; p];
        for _ in 0..2000 {
            let r = c.matvec(&x);
            let grad_fit = c.matvec_t(
                &r.iter().zip(&y).map(|(&a, &b)| a - b).collect::<Vec<f64>>(),
            );
            for i in 0..p {
                x[i] -= lr * (2.0 * grad_fit[i] + 2.0 * sys.lambda * x[i]);
            }
        }
        for i in 0..p {
            assert!((phi[i] - x[i]).abs() < 1e-4, "descent coordinate {i}");
        }
    }

    #[test]
    fn ridge_rejects_singular_at_zero_lambda() {
        // rank-deficient: two identical columns
        let c = Mat::from_vec(3, 2, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
        let sys = LinearSystem::new(c, Mat::zeros(0, 2), vec![1.0, 2.0, 3.0], vec![], 0.0).unwrap();
        match ridge_solve(&sys).unwrap_err() {
            CoreError::SingularSystem(_) => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn gradient_identity_of_the_minimizer() {
        // || 2 C^T (C phi* - Y) + 2 lambda phi* || <= 1e-7 (1 + ||Y||)
        for seed in 0..5 {
            let sys = random_system(50 + seed, 6, 4, 5, 0.2);
            let phi = ridge_solve(&sys).unwrap();
            let c = sys.stacked_c().unwrap();
            let y = sys.stacked_y();
            let r: Vec<f64> = c
                .matvec(&phi)
                .iter()
                .zip(&y)
                .map(|(&a, &b)| a - b)
                .collect();
            let mut g = c.matvec_t(&r);
            for (gi, &xi) in g.iter_mut().zip(&phi) {
                *gi = 2.0 * *gi + 2.0 * sys.lambda * xi;
            }
            assert!(norm2(&g) <= 1e-7 * (1.0 + norm2(&y)));
        }
    }

    #[test]
    fn spectrum_trivial_coefficient() {
        // sigma = 1, lambda = 1, u^T Y = 2 -> alpha = 1
        let sys = LinearSystem::new(
            Mat::identity(1),
            Mat::zeros(0, 1),
            vec![2.0],
            vec![],
            1.0,
        )
        .unwrap();
        let report = svd_spectrum(&sys).unwrap();
        assert!((report.alpha[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spectrum_regularization_kills_weak_directions() {
        // alpha -> 0 as sigma -> 0 with lambda > 0
        let c = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1e-9]).unwrap();
        let sys = LinearSystem::new(c, Mat::zeros(0, 2), vec![1.0, 1.0], vec![], 0.5).unwrap();
        let report = svd_spectrum(&sys).unwrap();
        assert!(report.alpha[1].abs() < 1e-8);
    }

    #[test]
    fn spectrum_reconstruction_and_energy_identity() {
        for seed in 0..8 {
            let sys = random_system(70 + seed, 7, 5, 6, 0.4);
            let phi = ridge_solve(&sys).unwrap();
            let report = svd_spectrum(&sys).unwrap();
            for i in 0..phi.len() {
                assert!(
                    (report.reconstruction[i] - phi[i]).abs() < 1e-6,
                    "reconstruction coordinate {i}"
                );
            }
            let phi_norm_sq = dot(&phi, &phi);
            assert!(
                (report.energy_sum - phi_norm_sq).abs() < 1e-8,
                "energy {} vs norm^2 {}",
                report.energy_sum,
                phi_norm_sq
            );
        }
    }

    #[test]
    fn gram_additivity() {
        // empty attack block: exactly zero
        let sys = LinearSystem::new(
            Mat::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            Mat::zeros(0, 2),
            vec![0.0; 3],
            vec![],
            0.1,
        )
        .unwrap();
        assert_eq!(gram_check(&sys).unwrap(), 0.0);
        // integer blocks: exact arithmetic
        let sys_int = LinearSystem::new(
            Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            Mat::from_vec(2, 3, vec![7.0, 8.0, 9.0, 1.0, 2.0, 3.0]).unwrap(),
            vec![0.0; 2],
            vec![0.0; 2],
            0.1,
        )
        .unwrap();
        assert_eq!(gram_check(&sys_int).unwrap(), 0.0);
        // random blocks: <= 1e-10
        let sys_r = random_system(90, 8, 6, 5, 0.2);
        assert!(gram_check(&sys_r).unwrap() <= 1e-10);
    }

    #[test]
    fn rayleigh_additivity_and_singular_direction() {
        let sys = random_system(91, 8, 5, 6, 0.0);
        let mut rng = Rng64::new(92);
        for _ in 0..5 {
            let mut v: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let n = norm2(&v);
            v.iter_mut().for_each(|x| *x /= n);
            let (full, clean, attack) = rayleigh_split(&sys, &v).unwrap();
            assert!((full - clean - attack).abs() <= 1e-10);
        }
        // top right-singular vector: ||C v||^2 = sigma_1^2
        let svd = svd_jacobi(&sys.stacked_c().unwrap()).unwrap();
        let v1 = svd.v.col(0);
        let (full, _, _) = rayleigh_split(&sys, &v1).unwrap();
        assert!((full - svd.sigma[0] * svd.sigma[0]).abs() < 1e-9);
        // non-unit vector is rejected
        assert!(rayleigh_split(&sys, &vec![1.0; 6]).is_err());
    }

    #[test]
    fn synth_disjoint_and_total_overlap() {
        // k = 0: column spaces orthogonal; Rayleigh split of any attack-own
        // basis direction has zero clean term
        let synth = synth_overlapping_system(12, 12, 12, 0, 1.0, 7).unwrap();
        let p = 12;
        for j in 0..synth.system.c_attack.rows.min(4) {
            // use right singular vectors of the attack block
            let svd = svd_jacobi(&synth.system.c_attack).unwrap();
            if svd.sigma[j] < 1e-12 {
                continue;
            }
            let v = svd.v.col(j);
            let (_, clean, attack) = rayleigh_split(&synth.system, &v).unwrap();
            assert!(clean.abs() < 1e-18, "clean leakage {clean}");
            assert!(attack > 0.0);
        }
        let _ = p;
        // k = p: identical subspaces
        let total = synth_overlapping_system(6, 8, 8, 6, 2.0, 8).unwrap();
        assert_eq!(total.shared_basis.cols, 6);
        // infeasible dims
        assert!(synth_overlapping_system(4, 2, 8, 3, 2.0, 9).is_err());
    }

    #[test]
    fn monte_carlo_concentration_and_monotonicity() {
        let seeds: Vec<u64> = (0..50).collect();
        let ratios = [1.0, 2.0, 5.0, 10.0];
        let rows = concentration_study(20, 20, 20, 4, &ratios, &seeds).unwrap();
        assert_eq!(rows.len(), 200);
        let mean_at = |ratio: f64| -> f64 {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.ratio == ratio)
                .map(|r| r.energy_fraction)
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let means: Vec<f64> = ratios.iter().map(|&r| mean_at(r)).collect();
        assert!(means[3] >= 0.8, "mean fraction at ratio 10: {}", means[3]);
        for w in means.windows(2) {
            assert!(w[1] > w[0], "means not strictly increasing: {means:?}");
        }
    }

    #[test]
    fn synchronized_degradation_on_shared_core() {
        // pruning the top-energy coordinates of an overlapping system raises
        // both block losses; total penalty grows along nested sets
        let synth = synth_overlapping_system(20, 20, 20, 4, 10.0, 13).unwrap();
        let phi = ridge_solve(&synth.system).unwrap();
        let mut order: Vec<usize> = (0..phi.len()).collect();
        order.sort_by(|&i, &j| phi[j].abs().partial_cmp(&phi[i].abs()).unwrap());
        let mut last_delta = 0.0;
        for take in [2usize, 4, 8] {
            let s: Vec<usize> = order[..take].to_vec();
            let report = pruning_penalty(&synth.system, &s).unwrap();
            assert!(report.delta_clean_block >= -1e-8, "clean block decreased");
            assert!(report.delta_attack_block >= -1e-8, "attack block decreased");
            assert!(report.delta_direct >= last_delta - 1e-12);
            last_delta = report.delta_direct;
        }
    }

    #[test]
    fn pruning_penalty_identities() {
        let sys = random_system(101, 8, 6, 5, 0.3);
        // S empty: exactly zero
        let empty = pruning_penalty(&sys, &[]).unwrap();
        assert_eq!(empty.delta_direct, 0.0);
        assert!(empty.delta_quadratic.abs() < 1e-12);
        // zero column: no penalty
        let mut zeroed = sys.clone();
        for r in 0..zeroed.c_clean.rows {
            zeroed.c_clean.set(r, 2, 0.0);
        }
        for r in 0..zeroed.c_attack.rows {
            zeroed.c_attack.set(r, 2, 0.0);
        }
        let rep = pruning_penalty(&zeroed, &[2]).unwrap();
        assert!(rep.delta_direct.abs() <= 1e-10);
        // random nonempty S: quadratic form equals re-solve difference, > 0
        for seed in 0..6 {
            let sys = random_system(120 + seed, 9, 7, 6, 0.25);
            let phi = ridge_solve(&sys).unwrap();
            let mut rng = Rng64::new(200 + seed);
            let mut s = vec![rng.below(6)];
            if phi[s[0]].abs() < 1e-12 {
                s[0] = (s[0] + 1) % 6;
            }
            s.push((s[0] + 2) % 6);
            let rep = pruning_penalty(&sys, &s).unwrap();
            assert!(
                (rep.delta_quadratic - rep.delta_direct).abs() < 1e-8,
                "quadratic {} vs direct {}",
                rep.delta_quadratic,
                rep.delta_direct
            );
            assert!(rep.delta_direct > 0.0);
        }
        // S = full set: restricted loss at zero
        let full: Vec<usize> = (0..5).collect();
        let sys2 = random_system(140, 8, 6, 5, 0.3);
        let rep = pruning_penalty(&sys2, &full).unwrap();
        let phi = ridge_solve(&sys2).unwrap();
        let want = sys2.loss(&vec![0.0; 5]) - sys2.loss(&phi);
        assert!((rep.delta_direct - want).abs() < 1e-10);
        assert!(rep.restricted_solution.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn regularization_bias_shrinks_the_solution() {
        // ||phi*|| decreases monotonically as lambda doubles over 10 decades
        let base = random_system(160, 10, 8, 6, 0.0);
        let mut lambda = 1e-3;
        let mut last = f64::INFINITY;
        for _ in 0..34 {
            // 2^34 covers > 10 decades
            let sys = LinearSystem::new(
                base.c_clean.clone(),
                base.c_attack.clone(),
                base.y_clean.clone(),
                base.y_attack.clone(),
                lambda,
            )
            .unwrap();
            let phi = ridge_solve(&sys).unwrap();
            let n = norm2(&phi);
            assert!(n < last, "norm did not shrink at lambda {lambda}");
            last = n;
            lambda *= 2.0;
        }
    }

    #[test]
    fn dual_and_primal_ridge_agree_on_wide_systems() {
        let mut rng = Rng64::new(170);
        let c = Mat::from_vec(4, 9, (0..36).map(|_| rng.normal()).collect()).unwrap();
        let y: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let sys = LinearSystem::new(c.clone(), Mat::zeros(0, 9), y.clone(), vec![], 0.7).unwrap();
        let dual = ridge_solve(&sys).unwrap(); // p > n -> dual path
        // primal oracle via explicit 9x9 normal equations
        let mut gram = c.transpose().matmul(&c).unwrap();
        for i in 0..9 {
            gram.data[i * 9 + i] += 0.7;
        }
        let primal = cholesky_solve(&gram, &c.matvec_t(&y)).unwrap();
        for i in 0..9 {
            assert!((dual[i] - primal[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn fd_jacobian_recovers_affine_map() {
        // single affine layer: f(phi) = M phi + c
        let mut rng = Rng64::new(180);
        let m = Mat::from_vec(5, 7, (0..35).map(|_| rng.normal()).collect()).unwrap();
        let c: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let f = |phi: &[f64]| -> Result<Vec<f64>> {
            Ok(m.matvec(phi)
                .iter()
                .zip(&c)
                .map(|(&a, &b)| a + b)
                .collect())
        };
        let phi0: Vec<f64> = (0..7).map(|_| rng.normal()).collect();
        let jac = jacobian_fd(&f, &phi0, 1e-3, 1e-4).unwrap();
        for i in 0..5 {
            for j in 0..7 {
                assert!(
                    (jac.at(i, j) - m.at(i, j)).abs() < 1e-4,
                    "entry ({i},{j})"
                );
            }
        }
    }
}
