use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Member runtime on `c` cores: `t1 * (f + (1 - f) / c) + beta * (c - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuntimeModel {
    pub t1: f64,
    pub serial_fraction: f64,
    pub overhead_per_core: f64,
}

impl Default for RuntimeModel {
    fn default() -> Self {
        Self {
            t1: 640.0,
            serial_fraction: 0.01,
            overhead_per_core: 0.01,
        }
    }
}

impl RuntimeModel {
    pub fn new(t1: f64, serial_fraction: f64, overhead_per_core: f64) -> Result<Self, String> {
        let m = Self {
            t1,
            serial_fraction,
            overhead_per_core,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.t1.is_finite() && self.t1 > 0.0) {
            return Err(format!("t1 must be positive, got {}", self.t1));
        }
        if !(0.0..=1.0).contains(&self.serial_fraction) {
            return Err(format!("f must be in [0, 1], got {}", self.serial_fraction));
        }
        if !(self.overhead_per_core.is_finite() && self.overhead_per_core >= 0.0) {
            return Err(format!("beta must be non-negative, got {}", self.overhead_per_core));
        }
        Ok(())
    }

    pub fn runtime(&self, cores: u32) -> f64 {
        let c = f64::from(cores.max(1));
        let f = self.serial_fraction;
        self.t1 * (f + (1.0 - f) / c) + self.overhead_per_core * (c - 1.0)
    }

    /// Core count in `1..=max_cores` with the smallest runtime.
    pub fn best_cores(&self, max_cores: u32) -> u32 {
        (1..=max_cores.max(1))
            .min_by(|&a, &b| self.runtime(a).total_cmp(&self.runtime(b)))
            .expect("non-empty range")
    }
}

impl fmt::Display for RuntimeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t1={},f={},beta={}", self.t1, self.serial_fraction, self.overhead_per_core)
    }
}

/// `t1=64,f=0.01,beta=0.09`; omitted keys keep their defaults.
impl FromStr for RuntimeModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut m = RuntimeModel::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got `{part}`"))?;
            let v: f64 = v.trim().parse().map_err(|_| format!("bad number in `{part}`"))?;
            match k.trim() {
                "t1" => m.t1 = v,
                "f" => m.serial_fraction = v,
                "beta" => m.overhead_per_core = v,
                other => return Err(format!("unknown model key `{other}`")),
            }
        }
        m.validate()?;
        Ok(m)
    }
}
