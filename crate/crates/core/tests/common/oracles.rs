//! Independent reference implementations of the evaluation metrics.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn brute_rmse(m: &[f64], p: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..m.len() {
        acc += (m[i] - p[i]).powi(2);
    }
    (acc / m.len() as f64).sqrt()
}

/// Raw-moment form of Pearson's coefficient.
pub fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Gaussian elimination with partial pivoting on a dense system.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Natural cubic spline from the full piecewise-polynomial system: four
/// coefficients per interval, solved densely.
pub fn brute_spline(knots: &[(f64, f64)], queries: &[f64]) -> Vec<f64> {
    let m = knots.len() - 1;
    let n = 4 * m;
    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    let mut row = 0;
    // Piece i: c0 + c1 u + c2 u^2 + c3 u^3 with u = x - x_i.
    for i in 0..m {
        let h = knots[i + 1].0 - knots[i].0;
        a[row][4 * i] = 1.0;
        b[row] = knots[i].1;
        row += 1;
        a[row][4 * i..4 * i + 4].copy_from_slice(&[1.0, h, h * h, h * h * h]);
        b[row] = knots[i + 1].1;
        row += 1;
        if i + 1 < m {
            // Continuity of first and second derivatives at x_{i+1}.
            a[row][4 * i + 1..4 * i + 4].copy_from_slice(&[1.0, 2.0 * h, 3.0 * h * h]);
            a[row][4 * (i + 1) + 1] = -1.0;
            row += 1;
            a[row][4 * i + 2..4 * i + 4].copy_from_slice(&[2.0, 6.0 * h]);
            a[row][4 * (i + 1) + 2] = -2.0;
            row += 1;
        }
    }
    a[row][2] = 2.0;
    row += 1;
    let h = knots[m].0 - knots[m - 1].0;
    a[row][4 * (m - 1) + 2] = 2.0;
    a[row][4 * (m - 1) + 3] = 6.0 * h;
    let c = solve_dense(a, b);
    queries
        .iter()
        .map(|&x| {
            if x <= knots[0].0 {
                return knots[0].1;
            }
            if x >= knots[m].0 {
                return knots[m].1;
            }
            let i = (0..m).find(|&i| x < knots[i + 1].0).unwrap();
            let u = x - knots[i].0;
            c[4 * i] + u * (c[4 * i + 1] + u * (c[4 * i + 2] + u * c[4 * i + 3]))
        })
        .collect()
}

pub fn random_knots(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f64, f64)> {
    let mut x = rng.gen_range(-2.0..2.0);
    (0..n)
        .map(|_| {
            x += rng.gen_range(0.3..3.0);
            (x, rng.gen_range(0.5..8.0))
        })
        .collect()
}
