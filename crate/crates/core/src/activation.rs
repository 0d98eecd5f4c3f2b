use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Elementwise nonlinearity f together with its derivative f′.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Tanh,
    Rectifier,
    Logistic,
}

impl Activation {
    pub const ALL: [Activation; 4] =
        [Activation::Identity, Activation::Tanh, Activation::Rectifier, Activation::Logistic];

    #[inline]
    pub fn f(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Rectifier => x.max(0.0),
            Activation::Logistic => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// f′(x). The rectifier uses 0 at the kink.
    #[inline]
    pub fn df(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Rectifier => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Logistic => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
        }
    }

    pub fn apply(self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Activation::Identity => x.clone(),
            _ => x.map(|v| self.f(v)),
        }
    }

    pub fn derivative(self, x: &DVector<f64>) -> DVector<f64> {
        x.map(|v| self.df(v))
    }

    pub fn is_linear(self) -> bool {
        self == Activation::Identity
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Rectifier => "rectifier",
            Activation::Logistic => "logistic",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown activation '{s}'"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn derivative_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-6;
        for act in Activation::ALL {
            for _ in 0..100 {
                let x: f64 = rng.random_range(-3.0..3.0);
                if act == Activation::Rectifier && x.abs() < 10.0 * h {
                    continue;
                }
                let fd = (act.f(x + h) - act.f(x - h)) / (2.0 * h);
                let an = act.df(x);
                let err = (fd - an).abs() / an.abs().max(1e-3);
                assert!(err < 1e-6, "{act:?} at {x}: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn parses_names() {
        for a in Activation::ALL {
            assert_eq!(a.name().parse::<Activation>().unwrap(), a);
        }
        assert!("relu6".parse::<Activation>().is_err());
    }
}
