use super::jet::Scalar;

/// exp(min(0, nu / sigma)): exactly 1 on and inside the face.
pub fn occupancy(nu: f64, sigma: f64) -> f64 {
    occupancy_generic(nu, sigma)
}

/// The baseline's sigmoid(nu / sigma).
pub fn occupancy_sr(nu: f64, sigma: f64) -> f64 {
    occupancy_sr_generic(nu, sigma)
}

pub(crate) fn occupancy_generic<S: Scalar>(nu: S, sigma: f64) -> S {
    if nu.val() >= 0.0 {
        S::cst(1.0)
    } else {
        (nu * (1.0 / sigma)).exp()
    }
}

pub(crate) fn occupancy_sr_generic<S: Scalar>(nu: S, sigma: f64) -> S {
    (nu * (1.0 / sigma)).sigmoid()
}

/// d occupancy / d nu, matching [`occupancy`].
pub fn occupancy_grad(nu: f64, sigma: f64) -> f64 {
    if nu >= 0.0 {
        0.0
    } else {
        (nu / sigma).exp() / sigma
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values() {
        assert_eq!(occupancy(0.0, 1e-4), 1.0);
        assert!((occupancy(-1e-4, 1e-4) - 0.36788).abs() < 1e-5);
        assert_eq!(occupancy(0.3, 1e-4), 1.0);
        assert_eq!(occupancy_grad(0.3, 1e-4), 0.0);
        assert_eq!(occupancy_sr(0.0, 1e-4), 0.5);
        assert_eq!(occupancy_sr(1.0, 1e-4), 1.0);
        assert!((occupancy_sr(1e-4, 1e-4) - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn gradient_matches_differences_outside() {
        let (nu, s) = (-2.3e-4, 1e-4);
        let h = 1e-9;
        let fd = (occupancy(nu + h, s) - occupancy(nu - h, s)) / (2.0 * h);
        assert!((fd - occupancy_grad(nu, s)).abs() / fd < 1e-6);
    }
}
