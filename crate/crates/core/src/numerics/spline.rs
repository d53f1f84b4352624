//! Natural cubic smoothing spline (Reinsch form).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Fitted values at `xs` of the natural cubic spline minimising
/// `p * sum (y_i - g(x_i))^2 + (1 - p) * int g''(t)^2 dt`.
///
/// `p = 1` interpolates and `p = 0` returns the least-squares line.
pub fn smoothing_spline(xs: &[f64], ys: &[f64], p: f64) -> Result<Vec<f64>> {
    let m = xs.len();
    if m != ys.len() {
        return Err(Error::SizeMismatch(format!(
            "spline abscissae ({m}) and ordinates ({}) differ in length",
            ys.len()
        )));
    }
    if m < 4 {
        return Err(Error::InvalidArgument(format!(
            "smoothing spline needs at least 4 points, got {m}"
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("penalty p={p} outside [0,1]")));
    }
    if xs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(
            "spline abscissae must be strictly increasing".into(),
        ));
    }
    if p == 1.0 {
        return Ok(ys.to_vec());
    }
    if p == 0.0 {
        return Ok(least_squares_line(xs, ys));
    }

    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    let k = m - 2;
    // Q is m x (m-2) second-difference operator, R the (m-2) x (m-2) tridiagonal
    // Gram matrix of the hat functions' second derivatives.
    let mut q = DMatrix::<f64>::zeros(m, k);
    let mut r = DMatrix::<f64>::zeros(k, k);
    for j in 0..k {
        q[(j, j)] = 1.0 / h[j];
        q[(j + 1, j)] = -1.0 / h[j] - 1.0 / h[j + 1];
        q[(j + 2, j)] = 1.0 / h[j + 1];
        r[(j, j)] = (h[j] + h[j + 1]) / 3.0;
        if j + 1 < k {
            r[(j, j + 1)] = h[j + 1] / 6.0;
            r[(j + 1, j)] = h[j + 1] / 6.0;
        }
    }
    let alpha = (1.0 - p) / p;
    let y = DVector::from_column_slice(ys);
    let system = &r + alpha * q.transpose() * &q;
    let rhs = q.transpose() * &y;
    let gamma = system
        .cholesky()
        .ok_or_else(|| Error::Singular("smoothing spline system".into()))?
        .solve(&rhs);
    let fitted = y - alpha * q * gamma;
    Ok(fitted.iter().copied().collect())
}

fn least_squares_line(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    xs.iter().map(|x| my + slope * (x - mx)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const XS: [f64; 7] = [0.0, 1.0, 2.5, 3.0, 4.0, 6.0, 7.5];
    const YS: [f64; 7] = [1.0, 2.2, 1.1, 3.4, 0.3, 2.0, 5.0];

    #[test]
    fn p_one_interpolates() {
        assert_eq!(smoothing_spline(&XS, &YS, 1.0).unwrap(), YS.to_vec());
    }

    #[test]
    fn p_zero_is_least_squares_line() {
        let got = smoothing_spline(&XS, &YS, 0.0).unwrap();
        let line = least_squares_line(&XS, &YS);
        assert_eq!(got, line);
        // Residuals orthogonal to (1, x).
        let r: Vec<f64> = YS.iter().zip(&got).map(|(y, g)| y - g).collect();
        assert!(r.iter().sum::<f64>().abs() < 1e-12);
        assert!(r.iter().zip(&XS).map(|(r, x)| r * x).sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn near_zero_penalty_approaches_line() {
        let got = smoothing_spline(&XS, &YS, 1e-9).unwrap();
        let line = least_squares_line(&XS, &YS);
        for (a, b) in got.iter().zip(&line) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn lines_are_fixed_points() {
        let ys: Vec<f64> = XS.iter().map(|x| 0.7 - 1.3 * x).collect();
        for p in [0.0, 0.1, 0.3, 0.9, 1.0] {
            let got = smoothing_spline(&XS, &ys, p).unwrap();
            for (a, b) in got.iter().zip(&ys) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn matches_dense_penalised_least_squares() {
        // Oracle: minimise p|y-g|^2 + (1-p) g^T K g with K = Q R^{-1} Q^T built
        // independently, solved as a dense linear system.
        let p = 0.3;
        let m = XS.len();
        let h: Vec<f64> = XS.windows(2).map(|w| w[1] - w[0]).collect();
        let mut q = DMatrix::zeros(m, m - 2);
        let mut r = DMatrix::zeros(m - 2, m - 2);
        for j in 0..m - 2 {
            q[(j, j)] = 1.0 / h[j];
            q[(j + 1, j)] = -(1.0 / h[j] + 1.0 / h[j + 1]);
            q[(j + 2, j)] = 1.0 / h[j + 1];
            r[(j, j)] = (h[j] + h[j + 1]) / 3.0;
            if j + 1 < m - 2 {
                r[(j, j + 1)] = h[j + 1] / 6.0;
                r[(j + 1, j)] = h[j + 1] / 6.0;
            }
        }
        let kmat = &q * r.try_inverse().unwrap() * q.transpose();
        let a = p * DMatrix::identity(m, m) + (1.0 - p) * kmat;
        let g = a.lu().solve(&(p * DVector::from_column_slice(&YS))).unwrap();
        let got = smoothing_spline(&XS, &YS, p).unwrap();
        for i in 0..m {
            assert!((got[i] - g[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(smoothing_spline(&[0.0, 1.0, 1.0, 2.0], &[0.0; 4], 0.5).is_err());
        assert!(smoothing_spline(&[0.0, 1.0, 2.0], &[0.0; 3], 0.5).is_err());
    }

    proptest::proptest! {
        #[test]
        fn fidelity_improves_with_p(
            ys in proptest::collection::vec(-5.0f64..5.0, 8),
            p1 in 0.0f64..1.0,
            dp in 0.0f64..1.0,
        ) {
            let xs: Vec<f64> = (0..8).map(|i| i as f64 + 0.1 * (i * i) as f64).collect();
            let p2 = p1 + dp * (1.0 - p1);
            let rss = |p: f64| {
                smoothing_spline(&xs, &ys, p).unwrap().iter().zip(&ys)
                    .map(|(g, y)| (g - y).powi(2)).sum::<f64>()
            };
            proptest::prop_assert!(rss(p2) <= rss(p1) + 1e-9);
        }
    }
}
