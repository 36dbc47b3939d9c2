use nalgebra::{DMatrix, DVector};

use qsmooth::kalman::{discrete_filter, discrete_smoother, DiscreteLg};

// Three-step toy: every x_i and y_i is affine in the independent inputs
// (x_0, w_0..w_2, v_0..v_2), so the smoothed marginals are plain joint-Gaussian conditioning.
fn toy() -> (DiscreteLg, Vec<DVector<f64>>) {
    let model = DiscreteLg {
        phi: DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]),
        b: DVector::from_column_slice(&[0.05, -0.02]),
        q: DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.2]),
        h: DMatrix::from_row_slice(1, 2, &[1.0, 0.5]),
        r: DMatrix::from_element(1, 1, 0.4),
        mean0: DVector::from_column_slice(&[0.3, -0.4]),
        cov0: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]),
    };
    let ys = [0.7, -0.2, 1.1].iter().map(|y| DVector::from_element(1, *y)).collect();
    (model, ys)
}

struct Batch {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

// Joint law of (x_0..x_3, y_0..y_2).
fn joint(model: &DiscreteLg) -> Batch {
    let (s, n) = (2, 3);
    let inputs = s + n * s + n;
    let mut input_cov = DMatrix::zeros(inputs, inputs);
    let mut input_mean = DVector::zeros(inputs);
    input_mean.rows_mut(0, s).copy_from(&model.mean0);
    input_cov.view_mut((0, 0), (s, s)).copy_from(&model.cov0);
    for i in 0..n {
        input_cov.view_mut((s + i * s, s + i * s), (s, s)).copy_from(&model.q);
        input_cov[(s + n * s + i, s + n * s + i)] = model.r[(0, 0)];
    }

    let outputs = (n + 1) * s + n;
    let mut a = DMatrix::zeros(outputs, inputs);
    let mut c = DVector::zeros(outputs);
    let mut xa = DMatrix::zeros(s, inputs);
    xa.view_mut((0, 0), (s, s)).fill_with_identity();
    let mut xc = DVector::zeros(s);
    for i in 0..=n {
        a.view_mut((i * s, 0), (s, inputs)).copy_from(&xa);
        c.rows_mut(i * s, s).copy_from(&xc);
        if i == n {
            break;
        }
        let row = (n + 1) * s + i;
        a.view_mut((row, 0), (1, inputs)).copy_from(&(&model.h * &xa));
        c.rows_mut(row, 1).copy_from(&(&model.h * &xc));
        a[(row, s + n * s + i)] += 1.0;
        xa = &model.phi * xa;
        xa.view_mut((0, s + i * s), (s, s)).fill_with_identity();
        xc = &model.phi * xc + &model.b;
    }
    Batch { mean: &a * input_mean + c, cov: &a * input_cov * a.transpose() }
}

fn condition(b: &Batch, hidden: std::ops::Range<usize>, seen: std::ops::Range<usize>, values: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (h0, hn, s0, sn) = (hidden.start, hidden.len(), seen.start, seen.len());
    let shh = b.cov.view((h0, h0), (hn, hn));
    let shs = b.cov.view((h0, s0), (hn, sn));
    let sss_inv = b.cov.view((s0, s0), (sn, sn)).into_owned().try_inverse().unwrap();
    let gain = shs * sss_inv;
    let mean = b.mean.rows(h0, hn) + &gain * (values - b.mean.rows(s0, sn));
    let cov = shh - &gain * shs.transpose();
    (mean, cov)
}

#[test]
fn discrete_smoother_matches_batch_conditioning() {
    let (model, ys) = toy();
    let b = joint(&model);
    let y_all = DVector::from_iterator(3, ys.iter().map(|y| y[0]));
    let smoothed = discrete_smoother(&model, &ys).unwrap();
    assert_eq!(smoothed.len(), 4);
    for (i, est) in smoothed.iter().enumerate() {
        let (mean, cov) = condition(&b, 2 * i..2 * i + 2, 8..11, &y_all);
        assert!((&est.mean - &mean).amax() < 1e-12, "step {i}: {} vs {}", est.mean, mean);
        assert!((&est.cov - &cov).amax() < 1e-12, "step {i}: {} vs {}", est.cov, cov);
    }
}

#[test]
fn discrete_filter_predictions_match_batch_conditioning() {
    let (model, ys) = toy();
    let b = joint(&model);
    let predicted = discrete_filter(&model, &ys).unwrap();
    for (i, (m, p)) in predicted.iter().enumerate() {
        let (mean, cov) = if i == 0 {
            (model.mean0.clone(), model.cov0.clone())
        } else {
            let past = DVector::from_iterator(i, ys[..i].iter().map(|y| y[0]));
            condition(&b, 2 * i..2 * i + 2, 8..8 + i, &past)
        };
        assert!((m - &mean).amax() < 1e-12, "step {i}");
        assert!((p - &cov).amax() < 1e-12, "step {i}");
    }
}
