//! Programs that compute the null function through two implementations of
//! `max`, differentiated by the tape. Over the reals their derivative is 0
//! everywhere; in floating point it is not.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Result, Tape};
use crate::nonsmooth::{NonsmoothPolicy, PoolMode};
use crate::precision::{Precision, Real};
use crate::tensor::{ReductionOrder, Tensor};
use crate::with_precision;

/// The `t` grid used for the reference tables.
pub const TABLE_TS: [f64; 7] = [-1e-3, -1e-2, -1e-1, 0.0, 1e1, 1e2, 1e3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroVariant {
    /// Strict first-maximum scan minus an even-split `max`.
    Max,
    /// Pairwise ReLU-built max, with `ReLU'(0)` differing between the two.
    ReluBuilt,
}

impl fmt::Display for ZeroVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ZeroVariant::Max => "max",
            ZeroVariant::ReluBuilt => "relu-built",
        })
    }
}

impl FromStr for ZeroVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "max" => Ok(ZeroVariant::Max),
            "relu-built" | "relu" => Ok(ZeroVariant::ReluBuilt),
            _ => Err(format!("unknown zero-program variant `{s}` (expected max or relu-built)")),
        }
    }
}

/// `(x0+x1)/2 + relu((x0−x1)/2) + relu((x1−x0)/2)` with the slope of the
/// first ReLU at 0 given by `first_slope`.
fn pair_max<T: Real>(tape: &mut Tape<T>, a: NodeId, b: NodeId, first_slope: f64) -> Result<NodeId> {
    let s = tape.add(a, b)?;
    let mid = tape.mul_const(s, 0.5)?;
    let d1 = tape.sub(a, b)?;
    let h1 = tape.mul_const(d1, 0.5)?;
    let r1 = tape.relu_with_slope(h1, first_slope)?;
    let d2 = tape.sub(b, a)?;
    let h2 = tape.mul_const(d2, 0.5)?;
    let r2 = tape.relu_with_slope(h2, 0.0)?;
    let acc = tape.add(mid, r1)?;
    tape.add(acc, r2)
}

fn tree_max<T: Real>(tape: &mut Tape<T>, z: NodeId, first_slope: f64) -> Result<NodeId> {
    let e: Vec<NodeId> = (0..4).map(|i| tape.select(z, i)).collect::<Result<_>>()?;
    let lo = pair_max(tape, e[0], e[1], first_slope)?;
    let hi = pair_max(tape, e[2], e[3], first_slope)?;
    let st = tape.stack(&[lo, hi])?;
    let a = tape.select(st, 0)?;
    let b = tape.select(st, 1)?;
    pair_max(tape, a, b, first_slope)
}

/// Records `zero(t) = max₁(t·x) − max₂(t·x)`; the single leaf is `t`.
pub fn zero_tape<T: Real>(variant: ZeroVariant, x: &[f64], t: f64, order: ReductionOrder) -> Result<Tape<T>> {
    let mut tape = Tape::new(order);
    let tn = tape.leaf(Tensor::scalar(T::from_f64(t)));
    let xn = tape.constant(Tensor::vector(x));
    let z = tape.scale(tn, xn)?;
    let (m1, m2) = match variant {
        ZeroVariant::Max => (
            tape.max_with_mode(z, PoolMode::Native)?,
            tape.max_with_mode(z, PoolMode::Minimal)?,
        ),
        ZeroVariant::ReluBuilt => {
            if x.len() != 4 {
                return Err(crate::autodiff::AutodiffError::Invalid {
                    op: "zero",
                    msg: format!("relu-built variant needs 4 inputs, got {}", x.len()),
                });
            }
            (tree_max(&mut tape, z, 0.0)?, tree_max(&mut tape, z, 1.0)?)
        }
    };
    tape.sub(m1, m2)?;
    Ok(tape)
}

/// `zero'(t)` computed by backprop at scalar type `T`.
pub fn zero_derivative<T: Real>(variant: ZeroVariant, x: &[f64], t: f64, order: ReductionOrder) -> Result<T> {
    let tape = zero_tape::<T>(variant, x, t, order)?;
    // Every nonsmooth selection is fixed at record time, so the policy is inert.
    let g = tape.backprop(&NonsmoothPolicy::native(), order)?;
    Ok(g.params[0].item())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroTable {
    pub variant: ZeroVariant,
    pub precision: Precision,
    pub x: Vec<f64>,
    pub ts: Vec<f64>,
    /// `zero'(t)` for each `t`, widened exactly to binary64.
    pub values: Vec<f64>,
}

pub fn zero_table(variant: ZeroVariant, precision: Precision, x: &[f64], ts: &[f64]) -> Result<ZeroTable> {
    let order = ReductionOrder::Sequential;
    let values = ts
        .iter()
        .map(|&t| with_precision!(precision, T => zero_derivative::<T>(variant, x, t, order).map(|v| v.to_f64())))
        .collect::<Result<Vec<_>>>()?;
    Ok(ZeroTable {
        variant,
        precision,
        x: x.to_vec(),
        ts: ts.to_vec(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TIED: [f64; 4] = [1.4; 4];

    #[test]
    fn max_variant_distinct_inputs() {
        let t = zero_table(ZeroVariant::Max, Precision::B32, &[1.0, 2.0, 3.0, 4.0], &TABLE_TS).unwrap();
        assert_eq!(t.values, vec![0.0, 0.0, 0.0, -1.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_variant_tied_inputs_is_half_ulp_of_one() {
        let t = zero_table(ZeroVariant::Max, Precision::B32, &TIED, &TABLE_TS).unwrap();
        for v in t.values {
            assert_eq!(v, -(2f64.powi(-24)));
        }
    }

    #[test]
    fn max_variant_tied_inputs_vanish_at_b64_scale() {
        // 1.4 at binary64: 0.75·x − 3·(0.25·x) leaves only a binary64-size residue.
        let t = zero_table(ZeroVariant::Max, Precision::B64, &TIED, &TABLE_TS).unwrap();
        for v in t.values {
            assert!(v.abs() <= 4.0 * 2f64.powi(-53), "{v}");
        }
    }

    #[test]
    fn relu_variant_distinct_inputs() {
        let t = zero_table(ZeroVariant::ReluBuilt, Precision::B32, &[1.0, 2.0, 3.0, 4.0], &TABLE_TS).unwrap();
        assert_eq!(t.values, vec![0.0, 0.0, 0.0, 1.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_variant_tied_inputs() {
        let t = zero_table(ZeroVariant::ReluBuilt, Precision::B32, &TIED, &TABLE_TS).unwrap();
        for v in t.values {
            assert!((1e-8..=1e-6).contains(&v.abs()), "{v}");
        }
    }

    #[test]
    fn variant_parse() {
        assert_eq!("relu-built".parse::<ZeroVariant>().unwrap(), ZeroVariant::ReluBuilt);
        assert!("min".parse::<ZeroVariant>().is_err());
    }
}
