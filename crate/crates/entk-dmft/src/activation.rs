use serde::{Deserialize, Serialize};

/// Pointwise nonlinearity. `Relu` is the norm-preserving √2·max(h, 0).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    #[serde(rename = "relu", alias = "relu_normalized")]
    Relu,
    Tanh,
}

const SQRT2: f64 = std::f64::consts::SQRT_2;

impl Activation {
    #[inline]
    pub fn phi(self, h: f64) -> f64 {
        match self {
            Activation::Linear => h,
            Activation::Relu => {
                if h > 0.0 {
                    SQRT2 * h
                } else {
                    0.0
                }
            }
            Activation::Tanh => h.tanh(),
        }
    }

    /// Derivative, with the convention φ̇(0) = 0 for ReLU.
    #[inline]
    pub fn dphi(self, h: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if h > 0.0 {
                    SQRT2
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = h.tanh();
                1.0 - t * t
            }
        }
    }

    /// Second derivative away from kinks (zero almost everywhere for ReLU).
    #[inline]
    pub fn ddphi(self, h: f64) -> f64 {
        match self {
            Activation::Linear | Activation::Relu => 0.0,
            Activation::Tanh => {
                let t = h.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

/// Value and derivative at `h`.
pub fn activation_eval(kind: Activation, h: f64) -> (f64, f64) {
    (kind.phi(h), kind.dphi(h))
}
