//! EDM preconditioning of a raw network into a denoiser.

use crate::error::{invalid, Error, Result};
use crate::field::{Dims, Field3};

use super::Denoiser;

/// Default data standard deviation of the preconditioning.
pub const DEFAULT_SIGMA_DATA: f64 = 0.5;

/// A raw predictor `F(x; c_noise)` as trained under EDM preconditioning.
pub trait RawModel: Send + Sync {
    fn dims(&self) -> Dims;
    fn channels(&self) -> usize;
    fn predict(&self, x: &Field3, c_noise: f64) -> Result<Field3>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdmCoefficients {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl EdmCoefficients {
    pub fn new(sigma: f64, sigma_data: f64) -> Self {
        let s2 = sigma * sigma + sigma_data * sigma_data;
        EdmCoefficients {
            c_skip: sigma_data * sigma_data / s2,
            c_out: sigma * sigma_data / s2.sqrt(),
            c_in: 1.0 / s2.sqrt(),
            c_noise: 0.25 * sigma.ln(),
        }
    }
}

/// `D(x; sigma) = c_skip x + c_out F(c_in x; c_noise)`.
#[derive(Debug, Clone)]
pub struct EdmPreconditioned<M> {
    model: M,
    sigma_data: f64,
}

impl<M: RawModel> EdmPreconditioned<M> {
    pub fn new(model: M, sigma_data: f64) -> Result<Self> {
        if !(sigma_data > 0.0 && sigma_data.is_finite()) {
            return Err(invalid(format!("sigma_data must be positive, got {sigma_data}")));
        }
        Ok(EdmPreconditioned { model, sigma_data })
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    pub fn model(&self) -> &M {
        &self.model
    }
}

impl<M: RawModel> Denoiser for EdmPreconditioned<M> {
    fn dims(&self) -> Dims {
        self.model.dims()
    }

    fn channels(&self) -> usize {
        self.model.channels()
    }

    fn denoise(&self, x: &Field3, sigma: f64) -> Result<Field3> {
        if !(sigma >= 0.0) {
            return Err(invalid(format!("noise level must be >= 0, got {sigma}")));
        }
        // c_out vanishes and c_noise diverges at sigma = 0; the limit is the identity.
        if sigma == 0.0 {
            return Ok(x.clone());
        }
        let c = EdmCoefficients::new(sigma, self.sigma_data);
        let raw = self.model.predict(&x.map(|v| c.c_in * v), c.c_noise)?;
        if !raw.same_shape(x) {
            return Err(Error::Denoiser(format!(
                "raw model returned {} channels on {}, expected {} on {}",
                raw.channels(),
                raw.dims(),
                x.channels(),
                x.dims()
            )));
        }
        let mut out = x.map(|v| c.c_skip * v);
        out.axpy(c.c_out, &raw);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Identity(Dims);

    impl RawModel for Identity {
        fn dims(&self) -> Dims {
            self.0
        }
        fn channels(&self) -> usize {
            1
        }
        fn predict(&self, x: &Field3, _: f64) -> Result<Field3> {
            Ok(x.clone())
        }
    }

    #[test]
    fn c_in_at_sigma_data() {
        let sd = 0.5;
        let c = EdmCoefficients::new(sd, sd);
        assert!((c.c_in - 1.0 / (sd * 2f64.sqrt())).abs() < 1e-15);
        assert!((c.c_skip - 0.5).abs() < 1e-15);
        assert!((c.c_out - sd / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn small_sigma_tends_to_identity() {
        let d = Dims::cube(2).unwrap();
        let den = EdmPreconditioned::new(Identity(d), DEFAULT_SIGMA_DATA).unwrap();
        let x = Field3::from_fn(d, 1, |_, a, b, c| (a + 2 * b + 3 * c) as f64 - 2.0).unwrap();
        assert_eq!(den.denoise(&x, 0.0).unwrap(), x);
        let c = EdmCoefficients::new(1e-9, DEFAULT_SIGMA_DATA);
        assert!((c.c_skip - 1.0).abs() < 1e-15 && c.c_out < 1e-8);
        let y = den.denoise(&x, 1e-9).unwrap();
        assert_eq!(y.dims(), x.dims());
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| (a - b).abs() < 1e-8));
    }
}
