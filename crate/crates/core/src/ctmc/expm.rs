//! Matrix exponential by scaling and squaring with Padé approximants
//! (Higham 2005, degrees 3 through 13).

use nalgebra::DMatrix;

const THETA_3: f64 = 1.495585217958292e-2;
const THETA_5: f64 = 2.539398330063230e-1;
const THETA_7: f64 = 9.504178996162932e-1;
const THETA_9: f64 = 2.097847961257068;
const THETA_13: f64 = 5.371920351148152;

const B3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const B5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const B7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
const B9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const B13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Numerator `U` (odd part) and `V` (even part) for low-degree approximants.
fn pade_low(a: &DMatrix<f64>, b: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let mut even = ident.clone() * b[0];
    let mut odd = ident * b[1];
    let mut power = a2.clone();
    let mut i = 2;
    while i < b.len() {
        even += &power * b[i];
        odd += &power * b[i + 1];
        power = &power * &a2;
        i += 2;
    }
    (a * odd, even)
}

fn pade13(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * B13[13] + &a4 * B13[11] + &a2 * B13[9];
    let u = a * (&a6 * inner_u + &a6 * B13[7] + &a4 * B13[5] + &a2 * B13[3] + &ident * B13[1]);
    let inner_v = &a6 * B13[12] + &a4 * B13[10] + &a2 * B13[8];
    let v = &a6 * inner_v + &a6 * B13[6] + &a4 * B13[4] + &a2 * B13[2] + ident * B13[0];
    (u, v)
}

fn solve_pade(u: DMatrix<f64>, v: DMatrix<f64>) -> DMatrix<f64> {
    let p = &v + &u;
    let q = v - u;
    q.lu().solve(&p).expect("Padé denominator is nonsingular within its validity region")
}

/// Matrix exponential of a square real matrix.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let norm = one_norm(a);
    if norm <= THETA_3 {
        let (u, v) = pade_low(a, &B3);
        return solve_pade(u, v);
    }
    if norm <= THETA_5 {
        let (u, v) = pade_low(a, &B5);
        return solve_pade(u, v);
    }
    if norm <= THETA_7 {
        let (u, v) = pade_low(a, &B7);
        return solve_pade(u, v);
    }
    if norm <= THETA_9 {
        let (u, v) = pade_low(a, &B9);
        return solve_pade(u, v);
    }
    let squarings = if norm > THETA_13 { (norm / THETA_13).log2().ceil().max(0.0) as i32 } else { 0 };
    let scaled = a / 2f64.powi(squarings);
    let (u, v) = pade13(&scaled);
    let mut r = solve_pade(u, v);
    for _ in 0..squarings {
        r = &r * &r;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix() {
        for scale in [1e-3, 0.1, 0.5, 1.5, 4.0, 30.0] {
            let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-scale, scale * 0.5]));
            let e = expm(&a);
            assert!((e[(0, 0)] - (-scale).exp()).abs() < 1e-13 * (-scale).exp().max(1.0));
            let rel = (e[(1, 1)] - (0.5 * scale).exp()).abs() / (0.5 * scale).exp();
            assert!(rel < 1e-13, "scale {scale}: {rel}");
            assert_eq!(e[(0, 1)], 0.0);
        }
    }

    #[test]
    fn nilpotent_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 3.0, 0.0, 0.0]);
        let e = expm(&a);
        assert!((e[(0, 1)] - 3.0).abs() < 1e-13);
        assert!((e[(0, 0)] - 1.0).abs() < 1e-14);
    }
}
