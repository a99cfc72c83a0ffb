mod common;

use common::{gaussian, max_abs_diff, planted};
use ndarray::{Array2, Axis};
use rand::Rng;
use stcmtl::linalg::sym_eigen;
use stcmtl::soup::{recover_membership, similarity, soup, spectral_basis, SpectralBasis};

#[test]
fn eigendecomposition_reconstructs_random_symmetric_matrices() {
    let mut rng = common::rng(9);
    for case in 0..100 {
        let t = rng.random_range(1..=40);
        let b = gaussian(t, t, &mut rng);
        let a = (&b + &b.t()) * 0.5;
        let eig = sym_eigen(a.view());
        let rebuilt = eig.vectors.dot(&Array2::from_diag(&eig.values)).dot(&eig.vectors.t());
        let err = (&a - &rebuilt).mapv(|x| x * x).sum().sqrt();
        assert!(err <= 1e-8, "case {case} (T = {t}): reconstruction error {err:e}");
        let orth = (eig.vectors.t().dot(&eig.vectors) - Array2::<f64>::eye(t)).mapv(f64::abs).fold(0.0, |m: f64, &x| m.max(x));
        assert!(orth <= 1e-10, "case {case}: eigenvectors off orthonormal by {orth:e}");
        assert!(eig.values.windows(2).into_iter().all(|w| w[0] >= w[1]), "case {case}: not descending");
    }
}

#[test]
fn exact_recovery_from_labelled_pure_tasks() {
    let mut rng = common::rng(10);
    for _ in 0..5 {
        let (w, v, sel) = planted(&mut rng);
        let basis = spectral_basis(&similarity(w.view()), 3).unwrap();
        let got = recover_membership(&basis, &sel).unwrap();
        let err = max_abs_diff(&got.view().to_owned(), &v);
        assert!(err <= 1e-8, "membership off by {err:e}");
    }
}

#[test]
fn membership_is_invariant_to_rotating_the_basis() {
    let mut rng = common::rng(11);
    let (w, _, sel) = planted(&mut rng);
    let basis = spectral_basis(&similarity(w.view()), 3).unwrap();
    let reference = recover_membership(&basis, &sel).unwrap().view().to_owned();
    for _ in 0..5 {
        // orthogonal factor of a random Gaussian matrix
        let q = sym_eigen(gaussian(3, 3, &mut rng).dot(&gaussian(3, 3, &mut rng).t()).view()).vectors;
        let rotated = SpectralBasis {
            theta: q.dot(&basis.theta),
            eigenvalues: basis.eigenvalues.clone(),
        };
        let got = recover_membership(&rotated, &sel).unwrap().view().to_owned();
        assert!(max_abs_diff(&got, &reference) <= 1e-8);
    }
    let flipped = SpectralBasis {
        theta: &basis.theta * &ndarray::array![[-1.0], [1.0], [-1.0]],
        eigenvalues: basis.eigenvalues.clone(),
    };
    let got = recover_membership(&flipped, &sel).unwrap().view().to_owned();
    assert!(max_abs_diff(&got, &reference) <= 1e-8);
}

#[test]
fn full_pass_recovers_planted_membership_up_to_relabelling() {
    let mut rng = common::rng(12);
    for seed in 0..5 {
        let (w, v, sel) = planted(&mut rng);
        let theta = sel.pure.len() as f64 / w.ncols() as f64;
        let out = soup(w.view(), 3, theta, 0.1, seed).unwrap();
        assert_eq!(out.selection.pure, sel.pure);
        // cluster c of the fit is the true cluster of its first pure task
        let perm: Vec<usize> = (0..3)
            .map(|c| {
                let first = out.selection.pure[out.selection.labels.iter().position(|&l| l == c).unwrap()];
                sel.labels[first]
            })
            .collect();
        let relabelled = out.membership.view().select(Axis(0), &{
            let mut inv = vec![0; 3];
            for (c, &p) in perm.iter().enumerate() {
                inv[p] = c;
            }
            inv
        });
        assert!(max_abs_diff(&relabelled, &v) <= 1e-8, "seed {seed}");
    }
}
