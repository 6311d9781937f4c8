//! Channel-wise temporal shift of decoded queries.
//!
//! For a clip `z_in` of `T` frames, the first `D_f` channels of every query
//! move one frame forward in time, the last `D_b` channels move one frame
//! backward, and the channels in between stay put. The two cells the rule
//! leaves undefined (forward block of the first frame, backward block of the
//! last frame) are filled according to [`Boundary`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ClipQueryTensor, FrameQuerySet};

/// A non-negative rational `num / den`, kept exactly as written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "FractionRepr", into = "String")]
pub struct Fraction {
    num: u32,
    den: u32,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FractionRepr {
    Text(String),
    Int(u32),
}

impl TryFrom<FractionRepr> for Fraction {
    type Error = String;

    fn try_from(repr: FractionRepr) -> std::result::Result<Self, String> {
        match repr {
            FractionRepr::Text(s) => s.parse().map_err(|e: Error| e.to_string()),
            FractionRepr::Int(n) => Ok(Fraction::new(n, 1).map_err(|e| e.to_string())?),
        }
    }
}

impl From<Fraction> for String {
    fn from(f: Fraction) -> String {
        f.to_string()
    }
}

impl Fraction {
    pub const ZERO: Fraction = Fraction { num: 0, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if den == 0 {
            return Err(Error::domain("fraction denominator must be positive"));
        }
        Ok(Self { num, den })
    }

    pub fn num(self) -> u32 {
        self.num
    }

    pub fn den(self) -> u32 {
        self.den
    }

    pub fn is_zero(self) -> bool {
        self.num == 0
    }

    pub fn to_f64(self) -> f64 {
        f64::from(self.num) / f64::from(self.den)
    }

    /// `floor(self * n)` in exact integer arithmetic.
    pub fn floor_times(self, n: usize) -> usize {
        ((u128::from(self.num) * n as u128) / u128::from(self.den)) as usize
    }

    /// The default sweep grid: 0 and 1/128 through 1/4 in powers of two.
    pub fn standard_grid() -> Vec<Fraction> {
        std::iter::once(Fraction::ZERO)
            .chain([128, 64, 32, 16, 8, 4].map(|den| Fraction { num: 1, den }))
            .collect()
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Fraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::domain(format!("not a fraction: {s:?}"));
        let s = s.trim();
        match s.split_once('/') {
            Some((n, d)) => Fraction::new(
                n.trim().parse().map_err(|_| bad())?,
                d.trim().parse().map_err(|_| bad())?,
            ),
            None => Fraction::new(s.parse().map_err(|_| bad())?, 1),
        }
    }
}

/// How the shifted-in cells at the two clip ends are filled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Boundary {
    /// Fill with 0.0.
    #[default]
    #[serde(rename = "zero")]
    ZeroFill,
    /// Keep the frame's own value.
    #[serde(rename = "hold")]
    Hold,
}

impl FromStr for Boundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Boundary::ZeroFill),
            "hold" => Ok(Boundary::Hold),
            other => Err(Error::domain(format!(
                "unknown boundary policy {other:?} (expected zero or hold)"
            ))),
        }
    }
}

impl fmt::Display for Boundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Boundary::ZeroFill => "zero",
            Boundary::Hold => "hold",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftConfig {
    fraction: Fraction,
    boundary: Boundary,
    d_forward: usize,
    d_backward: usize,
}

impl ShiftConfig {
    pub fn fraction(&self) -> Fraction {
        self.fraction
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn d_forward(&self) -> usize {
        self.d_forward
    }

    pub fn d_backward(&self) -> usize {
        self.d_backward
    }

    pub fn total_channels(&self) -> usize {
        self.d_forward + self.d_backward
    }

    pub fn is_noop(&self) -> bool {
        self.total_channels() == 0
    }
}

/// Splits `floor(fraction * dim)` (rounded down to even) equally between the
/// forward and backward blocks.
pub fn plan_shift(fraction: Fraction, dim: usize, boundary: Boundary) -> Result<ShiftConfig> {
    if dim == 0 {
        return Err(Error::domain("shift needs dim >= 1"));
    }
    if 2 * u64::from(fraction.num) > u64::from(fraction.den) {
        return Err(Error::domain(format!(
            "shift fraction {fraction} outside [0, 1/2]"
        )));
    }
    let total = fraction.floor_times(dim) & !1;
    Ok(ShiftConfig {
        fraction,
        boundary,
        d_forward: total / 2,
        d_backward: total / 2,
    })
}

/// Applies the temporal shift to every query index independently.
pub fn feature_shift(clip: &ClipQueryTensor, cfg: &ShiftConfig) -> Result<ClipQueryTensor> {
    let (t_len, n, dim) = (clip.t_len(), clip.n_queries(), clip.dim());
    if cfg.total_channels() > dim {
        return Err(Error::domain(format!(
            "shift needs {} channels but queries have only {dim}",
            cfg.total_channels()
        )));
    }
    if cfg.is_noop() {
        return Ok(clip.clone());
    }
    let fwd = 0..cfg.d_forward;
    let bwd = dim - cfg.d_backward..dim;
    let frames = (0..t_len)
        .map(|t| {
            let mut data = clip.frame(t).as_slice().to_vec();
            for (i, row) in data.chunks_exact_mut(dim).enumerate() {
                match t.checked_sub(1) {
                    Some(prev) => row[fwd.clone()].copy_from_slice(&clip.frame(prev).row(i)[fwd.clone()]),
                    None if cfg.boundary == Boundary::ZeroFill => row[fwd.clone()].fill(0.0),
                    None => {}
                }
                if t + 1 < t_len {
                    row[bwd.clone()].copy_from_slice(&clip.frame(t + 1).row(i)[bwd.clone()]);
                } else if cfg.boundary == Boundary::ZeroFill {
                    row[bwd.clone()].fill(0.0);
                }
            }
            FrameQuerySet::new(n, dim, data)
        })
        .collect::<Result<Vec<_>>>()?;
    ClipQueryTensor::new(frames)
}
