/// Golden-section search for the minimum of a unimodal `f` on `[a, b]`.
/// Stops once the bracket is narrower than `tol`.
///
/// Returns `(x_min, f_min)`.
pub fn golden_section_minimize(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;

    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);

    while (b - a).abs() > tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        }
    }

    let (xm, fm) = (0.5 * (a + b), f(0.5 * (a + b)));
    [(x1, f1), (x2, f2), (xm, fm)]
        .into_iter()
        .fold((xm, fm), |best, cand| if cand.1 < best.1 { cand } else { best })
}
