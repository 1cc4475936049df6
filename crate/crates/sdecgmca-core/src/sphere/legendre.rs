//! Fully normalized associated Legendre functions.
//!
//! `λ_{l,m}(z)` is defined so that `Y_{l,m}(θ, φ) = λ_{l,m}(cos θ) e^{imφ}`
//! has unit norm on the sphere, i.e.
//! `λ_{l,m} = sqrt((2l+1)/(4π) (l-m)!/(l+m)!) P_{l,m}` with the
//! Condon-Shortley sign inside `P_{l,m}`. Fully normalized values stay of
//! order one for every `(l, m)`, so the only overflow hazard is the seed
//! factor `sin^m θ`, which is accumulated in log space and may round to
//! zero harmlessly near the poles.
//!
//! Values are produced by the standard three-term recurrence upward in `l`
//! at fixed `m`, which is numerically stable in this direction:
//!
//! ```text
//!   λ_{m,m}   = (-1)^m sqrt((2m+1)/(4π) Π_{k=1..m} (2k-1)/(2k)) sin^m θ
//!   λ_{m+1,m} = sqrt(2m+3) z λ_{m,m}
//!   λ_{l,m}   = a_{l,m} z λ_{l-1,m} - b_{l,m} λ_{l-2,m}
//! ```

/// Precomputed recurrence coefficients for all `(l, m)` up to `l_max`.
///
/// Built once per transform and shared across rings; the coefficients do
/// not depend on the evaluation point.
pub struct RecurrenceTables {
    l_max: usize,
    /// `a_{l,m} = sqrt((4l²-1)/(l²-m²))`, stored at `idx(l, m)` for `l ≥ m+2`.
    a: Vec<f64>,
    /// `b_{l,m} = a_{l,m} sqrt(((l-1)²-m²)/(4(l-1)²-1))`, same layout.
    b: Vec<f64>,
    /// `log λ_{m,m}(z) - m log sin θ` (the point-independent part, without
    /// the Condon-Shortley sign).
    log_seed: Vec<f64>,
}

#[inline]
fn idx(l: usize, m: usize) -> usize {
    l * (l + 1) / 2 + m
}

impl RecurrenceTables {
    pub fn new(l_max: usize) -> Self {
        let n = (l_max + 1) * (l_max + 2) / 2;
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        for m in 0..=l_max {
            for l in (m + 2)..=l_max {
                let lf = l as f64;
                let mf = m as f64;
                let num = 4.0 * lf * lf - 1.0;
                let den = lf * lf - mf * mf;
                let al = (num / den).sqrt();
                let prev = ((lf - 1.0) * (lf - 1.0) - mf * mf)
                    / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0);
                a[idx(l, m)] = al;
                b[idx(l, m)] = al * prev.sqrt();
            }
        }
        // log of sqrt((2m+1)/(4π) Π (2k-1)/(2k)), accumulated incrementally
        let mut log_seed = vec![0.0; l_max + 1];
        let mut log_prod = 0.0;
        for m in 0..=l_max {
            if m > 0 {
                let k = m as f64;
                log_prod += ((2.0 * k - 1.0) / (2.0 * k)).ln();
            }
            log_seed[m] =
                0.5 * (((2 * m + 1) as f64).ln() - (4.0 * std::f64::consts::PI).ln() + log_prod);
        }
        RecurrenceTables {
            l_max,
            a,
            b,
            log_seed,
        }
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    /// `λ_{m,m}(z)` for a ring at `sin θ`. Underflows to zero when
    /// `sin^m θ` drops below the smallest normal number, which only happens
    /// where the true value is negligible anyway.
    #[inline]
    pub fn seed(&self, m: usize, sin_theta: f64) -> f64 {
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        if m == 0 {
            return sign * self.log_seed[0].exp();
        }
        if sin_theta <= 0.0 {
            return 0.0;
        }
        sign * (self.log_seed[m] + m as f64 * sin_theta.ln()).exp()
    }

    #[inline]
    pub fn a(&self, l: usize, m: usize) -> f64 {
        self.a[idx(l, m)]
    }

    #[inline]
    pub fn b(&self, l: usize, m: usize) -> f64 {
        self.b[idx(l, m)]
    }

    /// Runs the recurrence at fixed `m`, invoking `f(l, λ_{l,m})` for every
    /// `l` in `m..=l_max`.
    #[inline]
    pub fn for_each_l(&self, m: usize, z: f64, sin_theta: f64, mut f: impl FnMut(usize, f64)) {
        let lam_mm = self.seed(m, sin_theta);
        f(m, lam_mm);
        if m == self.l_max {
            return;
        }
        let mut prev2 = lam_mm;
        let mut prev = ((2 * m + 3) as f64).sqrt() * z * lam_mm;
        f(m + 1, prev);
        for l in (m + 2)..=self.l_max {
            let lam = self.a(l, m) * z * prev - self.b(l, m) * prev2;
            f(l, lam);
            prev2 = prev;
            prev = lam;
        }
    }
}
