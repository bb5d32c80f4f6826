//! Test functions on the torus model, selectable by name.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{ConfigIssue, Result};
use crate::model::{HyperbolicModel, Point2};

pub trait Observable: Send + Sync {
    fn name(&self) -> String;
    fn eval(&self, m: &HyperbolicModel, p: Point2) -> f64;
    fn sup_norm(&self) -> f64;
    /// Hölder exponent with respect to the model distance.
    fn holder_exponent(&self) -> f64 {
        1.0
    }
    /// Whether the value is constant along stable leaves.
    fn stable_invariant(&self) -> bool {
        true
    }
}

/// Chart coordinates rescaled to `[0,1]²`.
pub fn unit_coords(m: &HyperbolicModel, p: Point2) -> (f64, f64) {
    let r = &m.cells[p.cell];
    ((p.a - r.u.0) / r.width(), (p.b - r.s.0) / r.height())
}

pub struct Constant(pub f64);

impl Observable for Constant {
    fn sup_norm(&self) -> f64 {
        self.0.abs()
    }
    fn name(&self) -> String {
        format!("const:{}", self.0)
    }
    fn eval(&self, _: &HyperbolicModel, _: Point2) -> f64 {
        self.0
    }
}

pub struct UnstableCoordinate;

impl Observable for UnstableCoordinate {
    fn sup_norm(&self) -> f64 {
        1.0
    }
    fn name(&self) -> String {
        "unstable".into()
    }
    fn eval(&self, m: &HyperbolicModel, p: Point2) -> f64 {
        unit_coords(m, p).0
    }
}

pub struct StableCoordinate;

impl Observable for StableCoordinate {
    fn sup_norm(&self) -> f64 {
        1.0
    }
    fn name(&self) -> String {
        "stable".into()
    }
    fn eval(&self, m: &HyperbolicModel, p: Point2) -> f64 {
        unit_coords(m, p).1
    }
    fn stable_invariant(&self) -> bool {
        false
    }
}

/// `cos(2πk u)` or `sin(2πk u)` in the unstable chart coordinate.
pub struct Trig {
    pub freq: f64,
    pub sine: bool,
}

impl Observable for Trig {
    fn sup_norm(&self) -> f64 {
        1.0
    }
    fn name(&self) -> String {
        format!("{}:{}", if self.sine { "sin" } else { "cos" }, self.freq)
    }
    fn eval(&self, m: &HyperbolicModel, p: Point2) -> f64 {
        let x = 2.0 * PI * self.freq * unit_coords(m, p).0;
        if self.sine {
            x.sin()
        } else {
            x.cos()
        }
    }
}

/// Smoothed indicator of one cell, vanishing on its unstable edges.
pub struct CellBump(pub usize);

impl Observable for CellBump {
    fn sup_norm(&self) -> f64 {
        1.0
    }
    fn name(&self) -> String {
        format!("bump:{}", self.0)
    }
    fn eval(&self, m: &HyperbolicModel, p: Point2) -> f64 {
        if p.cell != self.0 {
            return 0.0;
        }
        (PI * unit_coords(m, p).0).sin().powi(2)
    }
}

/// `|u − 1/2|^η`, Hölder but not Lipschitz for `η < 1`.
pub struct HolderCusp(pub f64);

impl Observable for HolderCusp {
    fn sup_norm(&self) -> f64 {
        0.5f64.powf(self.0)
    }
    fn name(&self) -> String {
        format!("cusp:{}", self.0)
    }
    fn eval(&self, m: &HyperbolicModel, p: Point2) -> f64 {
        (unit_coords(m, p).0 - 0.5).abs().powf(self.0)
    }
    fn holder_exponent(&self) -> f64 {
        self.0
    }
}

/// `cos(2πu) + v/2`, depending on both coordinates.
pub struct Mixed;

impl Observable for Mixed {
    fn sup_norm(&self) -> f64 {
        1.5
    }
    fn name(&self) -> String {
        "mixed".into()
    }
    fn eval(&self, m: &HyperbolicModel, p: Point2) -> f64 {
        let (u, v) = unit_coords(m, p);
        (2.0 * PI * u).cos() + 0.5 * v
    }
    fn stable_invariant(&self) -> bool {
        false
    }
}

type Factory = fn(Option<f64>) -> Result<Box<dyn Observable>>;

/// Name → constructor table; names take an optional `:param` suffix.
pub struct ObservableRegistry {
    entries: BTreeMap<&'static str, Factory>,
}

fn bad(msg: &str) -> crate::error::Error {
    ConfigIssue::Parameter(msg.into()).into()
}

impl Default for ObservableRegistry {
    fn default() -> Self {
        let mut r = ObservableRegistry {
            entries: BTreeMap::new(),
        };
        r.register("const", |p| Ok(Box::new(Constant(p.unwrap_or(1.0)))));
        r.register("unstable", |_| Ok(Box::new(UnstableCoordinate)));
        r.register("stable", |_| Ok(Box::new(StableCoordinate)));
        r.register("cos", |p| {
            Ok(Box::new(Trig {
                freq: p.unwrap_or(1.0),
                sine: false,
            }))
        });
        r.register("sin", |p| {
            Ok(Box::new(Trig {
                freq: p.unwrap_or(1.0),
                sine: true,
            }))
        });
        r.register("bump", |p| {
            let c = p.unwrap_or(0.0);
            if c < 0.0 || c.fract() != 0.0 {
                return Err(bad("bump takes a cell index"));
            }
            Ok(Box::new(CellBump(c as usize)))
        });
        r.register("cusp", |p| {
            let eta = p.unwrap_or(0.5);
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(bad("cusp exponent must lie in (0,1]"));
            }
            Ok(Box::new(HolderCusp(eta)))
        });
        r.register("mixed", |_| Ok(Box::new(Mixed)));
        r
    }
}

impl ObservableRegistry {
    pub fn register(&mut self, name: &'static str, f: Factory) {
        self.entries.insert(name, f);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    /// Builds from a spec such as `cos:2` or `mixed`.
    pub fn build(&self, spec: &str) -> Result<Box<dyn Observable>> {
        let (name, param) = match spec.split_once(':') {
            Some((n, p)) => {
                let v = p
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| bad(&format!("bad parameter in observable '{spec}'")))?;
                (n.trim(), Some(v))
            }
            None => (spec.trim(), None),
        };
        let f = self
            .entries
            .get(name)
            .ok_or_else(|| bad(&format!("unknown observable '{name}'")))?;
        f(param)
    }
}
