//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use ua3d_core::numerics::Matrix;

/// All permutations of `0..n` (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, a, out);
            let j = if k % 2 == 0 { i } else { 0 };
            a.swap(j, k - 1);
        }
    }
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    heap(n, &mut a, &mut out);
    out
}

/// Exact uniform-marginal OT cost on a square matrix: by Birkhoff, the
/// minimum over permutation couplings, each carrying mass 1/n per entry.
pub fn exact_ot_cost(c: &Matrix) -> f64 {
    let n = c.rows();
    permutations(n)
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| c.row(i)[j]).sum::<f64>() / n as f64)
        .fold(f64::INFINITY, f64::min)
}

/// `-Σ p ln p` written out directly.
pub fn shannon(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}
