use serde::{Deserialize, Serialize};

/// Control triple `(u^v, u^z, u^ψ)`: horizontal speed (m/s), vertical
/// speed (m/s) and heading rate (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub v: f64,
    pub z: f64,
    pub psi: f64,
}

impl Control {
    pub const ZERO: Control = Control {
        v: 0.0,
        z: 0.0,
        psi: 0.0,
    };

    pub fn new(v: f64, z: f64, psi: f64) -> Self {
        Control { v, z, psi }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.v, self.z, self.psi]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Control {
            v: s[0],
            z: s[1],
            psi: s[2],
        }
    }
}

/// Disturbance realisation `(ω^v, ω^z, ω^ψ)` held over one sampling interval.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseSample {
    pub v: f64,
    pub z: f64,
    pub psi: f64,
}

/// Ground-truth agent state: position in metres and heading in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrueState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub psi: f64,
}

impl TrueState {
    pub fn new(x: f64, y: f64, z: f64, psi: f64) -> Self {
        TrueState { x, y, z, psi }
    }

    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn distance_to(&self, p: [f64; 3]) -> f64 {
        let dx = self.x - p[0];
        let dy = self.y - p[1];
        let dz = self.z - p[2];
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.psi.is_finite()
    }
}
