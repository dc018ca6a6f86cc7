use crate::error::{Error, Result};

/// Outcome of [`brent_min`].
#[derive(Debug, Clone, PartialEq)]
pub struct BrentResult {
    pub x: f64,
    pub fx: f64,
    /// Every evaluated point with the raw value returned there, in order.
    pub probes: Vec<(f64, f64)>,
}

impl BrentResult {
    pub fn evaluations(&self) -> usize {
        self.probes.len()
    }
}

/// Bounded Brent minimization (golden section plus parabolic interpolation)
/// of `f` on `[lo, hi]`.
///
/// Uses one initial evaluation and at most `max_iters` further ones. A
/// non-finite value is replaced by ten times the worst finite value seen so
/// far, which steers the search away from it.
pub fn brent_min(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, max_iters: usize, xtol: f64) -> Result<BrentResult> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::invalid("brent_min", format!("bounds [{lo}, {hi}]")));
    }
    if !(xtol > 0.0) {
        return Err(Error::invalid("brent_min", format!("xtol {xtol}")));
    }
    let sqrt_eps = f64::EPSILON.sqrt();
    let golden = 0.5 * (3.0 - 5f64.sqrt());
    let mut probes = Vec::new();
    let mut worst = f64::NEG_INFINITY;
    let mut eval = |x: f64, probes: &mut Vec<(f64, f64)>| {
        let v = f(x);
        probes.push((x, v));
        if v.is_finite() {
            worst = worst.max(v);
            v
        } else if worst.is_finite() {
            worst.abs().max(1.0) * 10.0
        } else {
            f64::MAX.sqrt()
        }
    };

    let (mut a, mut b) = (lo, hi);
    let mut fulc = a + golden * (b - a);
    let (mut nfc, mut xf) = (fulc, fulc);
    let (mut rat, mut e) = (0.0f64, 0.0f64);
    let mut fx = eval(xf, &mut probes);
    let (mut ffulc, mut fnfc) = (fx, fx);
    let mut xm = 0.5 * (a + b);
    let mut tol1 = sqrt_eps * xf.abs() + xtol / 3.0;
    let mut tol2 = 2.0 * tol1;

    while probes.len() <= max_iters && (xf - xm).abs() > tol2 - 0.5 * (b - a) {
        let mut use_golden = true;
        if e.abs() > tol1 {
            let mut r = (xf - nfc) * (fx - ffulc);
            let mut q = (xf - fulc) * (fx - fnfc);
            let mut p = (xf - fulc) * q - (xf - nfc) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            r = e;
            e = rat;
            if p.abs() < (0.5 * q * r).abs() && p > q * (a - xf) && p < q * (b - xf) {
                use_golden = false;
                rat = p / q;
                let x = xf + rat;
                if x - a < tol2 || b - x < tol2 {
                    rat = tol1 * sign(xm - xf);
                }
            }
        }
        if use_golden {
            e = if xf >= xm { a - xf } else { b - xf };
            rat = golden * e;
        }
        let x = xf + sign(rat) * rat.abs().max(tol1);
        let fu = eval(x, &mut probes);
        if fu <= fx {
            if x >= xf {
                a = xf;
            } else {
                b = xf;
            }
            (fulc, ffulc) = (nfc, fnfc);
            (nfc, fnfc) = (xf, fx);
            (xf, fx) = (x, fu);
        } else {
            if x < xf {
                a = x;
            } else {
                b = x;
            }
            if fu <= fnfc || nfc == xf {
                (fulc, ffulc) = (nfc, fnfc);
                (nfc, fnfc) = (x, fu);
            } else if fu <= ffulc || fulc == xf || fulc == nfc {
                (fulc, ffulc) = (x, fu);
            }
        }
        xm = 0.5 * (a + b);
        tol1 = sqrt_eps * xf.abs() + xtol / 3.0;
        tol2 = 2.0 * tol1;
    }

    if probes.iter().all(|(_, v)| !v.is_finite()) {
        return Err(Error::AllProbesDiverged { probes: probes.iter().map(|p| p.0).collect() });
    }
    let fx = probes.iter().find(|p| p.0 == xf).map_or(fx, |p| p.1);
    Ok(BrentResult { x: xf, fx, probes })
}

/// `sign(v)` with `sign(0) = 1`.
fn sign(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quadratic() {
        let r = brent_min(|x| (x + 4.0).powi(2), -6.0, -2.0, 500, 1e-6).unwrap();
        assert!((r.x + 4.0).abs() < 1e-5, "{}", r.x);
    }

    #[test]
    fn absolute_value_in_ten_iterations() {
        let r = brent_min(|x: f64| (x + 3.3).abs(), -6.0, -2.0, 10, 1e-5).unwrap();
        assert!(r.evaluations() <= 11);
        assert!((r.x + 3.3).abs() < 0.05, "{}", r.x);
    }

    #[test]
    fn monotone_goes_to_the_boundary() {
        let r = brent_min(|x| x, -6.0, -2.0, 200, 1e-5).unwrap();
        assert!((r.x + 6.0).abs() < 1e-3, "{}", r.x);
        let r = brent_min(|x| -x, -6.0, -2.0, 200, 1e-5).unwrap();
        assert!((r.x + 2.0).abs() < 1e-3, "{}", r.x);
    }

    #[test]
    fn non_finite_probes() {
        let r = brent_min(|x| if x > -3.0 { f64::NAN } else { (x + 4.0).powi(2) }, -6.0, -2.0, 30, 1e-5).unwrap();
        assert!((r.x + 4.0).abs() < 1e-3);
        assert!(r.fx.is_finite());
        match brent_min(|_| f64::NAN, -6.0, -2.0, 10, 1e-5) {
            Err(Error::AllProbesDiverged { probes }) => assert_eq!(probes.len(), 11),
            other => panic!("{other:?}"),
        }
        assert!(brent_min(|x| x, 1.0, 1.0, 10, 1e-5).is_err());
    }

    proptest! {
        #[test]
        fn never_leaves_the_bounds(c in -10.0f64..10.0, k in 0.1f64..5.0, lo in -8.0f64..0.0, w in 0.01f64..6.0) {
            let hi = lo + w;
            let r = brent_min(|x| ((x - c) * k).abs().powf(1.5) + (3.0 * x).sin(), lo, hi, 25, 1e-6).unwrap();
            for (x, _) in &r.probes {
                prop_assert!(*x >= lo && *x <= hi);
            }
            prop_assert!(r.evaluations() <= 26);
        }
    }
}
