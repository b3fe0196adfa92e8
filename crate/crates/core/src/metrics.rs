//! Scale-invariant SNR and utterance-level permutation-invariant assignment.

use std::f64::consts::LN_10;

use crate::error::{check_len, Error, Result};

/// Largest reportable SI-SNR. The error power is floored at
/// `1e-8 · ‖proj‖²`, so a perfect estimate scores exactly this value.
pub const SI_SNR_CAP_DB: f64 = 80.0;
const FLOOR: f64 = 1e-8;

/// SI-SNR in dB of `estimate` against `reference`.
///
/// Both inputs are zero-meaned first. The result is clamped to
/// `[-SI_SNR_CAP_DB, SI_SNR_CAP_DB]`; an estimate that is constant (zero
/// after mean removal) scores the lower cap.
pub fn si_snr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    Ok(si_snr_parts(estimate, reference, false)?.0)
}

/// SI-SNR together with its gradient with respect to `estimate`.
/// The gradient is zero wherever the value is clamped.
pub fn si_snr_with_grad(estimate: &[f64], reference: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (v, g) = si_snr_parts(estimate, reference, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn zero_mean(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn si_snr_parts(
    estimate: &[f64],
    reference: &[f64],
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    check_len("si_snr", estimate.len(), reference.len())?;
    if estimate.len() < 2 {
        return Err(Error::Shape(format!(
            "si_snr: need at least 2 samples, got {}",
            estimate.len()
        )));
    }
    let a = zero_mean(estimate);
    let b = zero_mean(reference);
    let bb = dot(&b, &b);
    if bb <= 0.0 {
        return Err(Error::Degenerate(
            "si_snr: reference has zero power after mean removal".into(),
        ));
    }
    let scale = dot(&a, &b) / bb;
    let proj: Vec<f64> = b.iter().map(|v| scale * v).collect();
    let err: Vec<f64> = a.iter().zip(&proj).map(|(x, p)| x - p).collect();
    let p = dot(&proj, &proj);
    let e = dot(&err, &err);

    let clamped = |v: f64| (v, want_grad.then(|| vec![0.0; estimate.len()]));
    if p == 0.0 && e == 0.0 {
        return Ok(clamped(-SI_SNR_CAP_DB));
    }
    if e <= FLOOR * p {
        return Ok(clamped(SI_SNR_CAP_DB));
    }
    if p <= FLOOR * e {
        return Ok(clamped(-SI_SNR_CAP_DB));
    }
    let value = 10.0 * (p / e).log10();
    let grad = want_grad.then(|| {
        // proj and err are already zero-mean, so the mean-removal Jacobian
        // leaves this expression unchanged.
        let k = 20.0 / LN_10;
        proj.iter()
            .zip(&err)
            .map(|(pr, er)| k * (pr / p - er / e))
            .collect()
    });
    Ok((value, grad))
}

/// `si_snr(estimate, reference) - si_snr(mixture, reference)`.
pub fn si_snr_improvement(estimate: &[f64], reference: &[f64], mixture: &[f64]) -> Result<f64> {
    Ok(si_snr(estimate, reference)? - si_snr(mixture, reference)?)
}

/// Outcome of a permutation-invariant assignment: `estimates[permutation[k]]`
/// is paired with `references[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PitResult {
    pub permutation: Vec<usize>,
    pub per_source_sisnr: Vec<f64>,
    pub total: f64,
}

/// All permutations of `0..k` in lexicographic order.
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..k).collect();
    loop {
        out.push(p.clone());
        // next lexicographic permutation
        let Some(i) = (1..k).rev().find(|&i| p[i - 1] < p[i]) else {
            break;
        };
        let j = (i..k).rev().find(|&j| p[j] > p[i - 1]).unwrap();
        p.swap(i - 1, j);
        p[i..].reverse();
    }
    out
}

/// Exhaustive search over all `K!` pairings for the one maximizing total
/// SI-SNR. Ties go to the lexicographically smallest permutation.
pub fn pit_assign<E, R>(estimates: &[E], references: &[R]) -> Result<PitResult>
where
    E: AsRef<[f64]>,
    R: AsRef<[f64]>,
{
    let k = references.len();
    check_len("pit_assign: source count", estimates.len(), k)?;
    if k == 0 {
        return Err(Error::Shape("pit_assign: need at least one source".into()));
    }
    // pairwise[i][j] = si_snr(estimates[j], references[i])
    let mut pairwise = vec![vec![0.0; k]; k];
    for (i, r) in references.iter().enumerate() {
        for (j, e) in estimates.iter().enumerate() {
            pairwise[i][j] = si_snr(e.as_ref(), r.as_ref())?;
        }
    }
    let mut best: Option<PitResult> = None;
    for perm in permutations(k) {
        let per: Vec<f64> = perm.iter().enumerate().map(|(i, &j)| pairwise[i][j]).collect();
        let total = per.iter().sum::<f64>();
        if best.as_ref().is_none_or(|b| total > b.total) {
            best = Some(PitResult {
                permutation: perm,
                per_source_sisnr: per,
                total,
            });
        }
    }
    Ok(best.expect("at least one permutation"))
}

/// Separator objective: the negated best total SI-SNR.
pub fn pit_loss<E, R>(estimates: &[E], references: &[R]) -> Result<f64>
where
    E: AsRef<[f64]>,
    R: AsRef<[f64]>,
{
    Ok(-pit_assign(estimates, references)?.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn signal(n: usize, phase: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * 0.37 + phase).sin() + 0.2 * (i as f64 * 1.3).cos()).collect()
    }

    #[test]
    fn hand_computed_projection() {
        let s = [1.0, -1.0, 1.0, -1.0];
        let e = [1.0, -1.0, 1.0, 0.0];
        let v = si_snr(&e, &s).unwrap();
        assert!((v - 10.0 * (2.25f64 / 0.5).log10()).abs() < 1e-12);
        assert!((v - 6.532).abs() < 1e-3);
    }

    #[test]
    fn perfect_estimate_hits_cap() {
        let s = signal(64, 0.0);
        assert!((si_snr(&s, &s).unwrap() - SI_SNR_CAP_DB).abs() < 1e-9);
        let scaled: Vec<f64> = s.iter().map(|v| 3.5 * v).collect();
        assert_eq!(si_snr(&scaled, &s).unwrap(), si_snr(&s, &s).unwrap());
    }

    #[test]
    fn constant_estimate_hits_lower_cap() {
        let s = signal(16, 0.3);
        assert_eq!(si_snr(&[0.5; 16], &s).unwrap(), -SI_SNR_CAP_DB);
    }

    #[test]
    fn error_paths() {
        assert!(matches!(si_snr(&[1.0, 2.0], &[3.0, 3.0]), Err(Error::Degenerate(_))));
        assert!(matches!(si_snr(&[1.0, 2.0], &[1.0]), Err(Error::Shape(_))));
        assert!(matches!(si_snr(&[1.0], &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn improvement_identities() {
        let s = signal(100, 0.0);
        let y: Vec<f64> = s.iter().zip(signal(100, 2.0)).map(|(a, b)| a + b).collect();
        assert_eq!(si_snr_improvement(&y, &s, &y).unwrap(), 0.0);
        let want = SI_SNR_CAP_DB - si_snr(&y, &s).unwrap();
        assert!((si_snr_improvement(&s, &s, &y).unwrap() - want).abs() < 1e-9);
        let est = signal(100, 0.1);
        assert_eq!(
            si_snr_improvement(&est, &s, &y).unwrap(),
            si_snr(&est, &s).unwrap() - si_snr(&y, &s).unwrap()
        );
    }

    #[test]
    fn permutation_enumeration() {
        assert_eq!(permutations(1), vec![vec![0]]);
        assert_eq!(permutations(2), vec![vec![0, 1], vec![1, 0]]);
        let p3 = permutations(3);
        assert_eq!(p3.len(), 6);
        assert_eq!(p3[1], vec![0, 2, 1]);
        assert_eq!(p3[5], vec![2, 1, 0]);
        assert_eq!(permutations(4).len(), 24);
    }

    #[test]
    fn pit_identity_and_swap() {
        let refs = vec![signal(50, 0.0), signal(50, 1.7)];
        let r = pit_assign(&refs, &refs).unwrap();
        assert_eq!(r.permutation, vec![0, 1]);
        assert!((r.total - 2.0 * SI_SNR_CAP_DB).abs() < 1e-9);
        assert!((pit_loss(&refs, &refs).unwrap() + 2.0 * SI_SNR_CAP_DB).abs() < 1e-9);

        let swapped = vec![refs[1].clone(), refs[0].clone()];
        let r = pit_assign(&swapped, &refs).unwrap();
        assert_eq!(r.permutation, vec![1, 0]);
        assert_eq!(pit_loss(&swapped, &refs).unwrap(), pit_loss(&refs, &refs).unwrap());
    }

    #[test]
    fn pit_ties_take_smallest_permutation() {
        let s = signal(20, 0.0);
        let refs = vec![s.clone(), s.clone()];
        let r = pit_assign(&refs, &refs).unwrap();
        assert_eq!(r.permutation, vec![0, 1]);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let s = signal(40, 0.4);
        let e: Vec<f64> = s.iter().enumerate().map(|(i, v)| v + 0.3 * (i as f64 * 2.1).sin()).collect();
        let (_, g) = si_snr_with_grad(&e, &s).unwrap();
        let h = 1e-6;
        for i in 0..e.len() {
            let mut p = e.clone();
            p[i] += h;
            let mut m = e.clone();
            m[i] -= h;
            let fd = (si_snr(&p, &s).unwrap() - si_snr(&m, &s).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * fd.abs().max(1.0), "{i}: {fd} vs {}", g[i]);
        }
    }

    proptest! {
        #[test]
        fn scale_and_translation_invariance(
            alpha in 1e-3f64..1e3,
            negate in any::<bool>(),
            offset in -10.0f64..10.0,
            phase in 0.0f64..6.0,
        ) {
            let s = signal(64, 0.0);
            let e = signal(64, phase);
            let base = si_snr(&e, &s).unwrap();
            let a = if negate { -alpha } else { alpha };
            let scaled: Vec<f64> = e.iter().map(|v| a * v).collect();
            let scaled_val = si_snr(&scaled, &s).unwrap();
            // A negative gain flips the projection sign, which the ratio ignores.
            prop_assert!((scaled_val - base).abs() < 1e-9);
            let shifted: Vec<f64> = e.iter().map(|v| v + offset).collect();
            prop_assert!((si_snr(&shifted, &s).unwrap() - base).abs() < 1e-9);
            let shifted_ref: Vec<f64> = s.iter().map(|v| v + offset).collect();
            prop_assert!((si_snr(&e, &shifted_ref).unwrap() - base).abs() < 1e-9);
        }
    }
}
