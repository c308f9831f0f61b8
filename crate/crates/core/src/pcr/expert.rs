use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Initial layout of the expert map `E`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InitMode {
    Left,
    Right,
    Top,
    Bottom,
    Ones,
    Zeros,
}

impl InitMode {
    pub const HALF_PLANES: [InitMode; 4] = [InitMode::Left, InitMode::Right, InitMode::Top, InitMode::Bottom];
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "left" => InitMode::Left,
            "right" => InitMode::Right,
            "top" => InitMode::Top,
            "bottom" => InitMode::Bottom,
            "ones" => InitMode::Ones,
            "zeros" => InitMode::Zeros,
            other => {
                return Err(Error::config(
                    "net.einit",
                    format!("unknown init mode `{other}` (left|right|top|bottom|ones|zeros)"),
                ))
            }
        })
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitMode::Left => "left",
            InitMode::Right => "right",
            InitMode::Top => "top",
            InitMode::Bottom => "bottom",
            InitMode::Ones => "ones",
            InitMode::Zeros => "zeros",
        })
    }
}

/// How the middle row/column of an odd extent is assigned.
///
/// With `Exclude`, a 1-indexed coordinate `c` is in the near half when
/// `c ≤ n/2` (real division), so the middle line of an odd extent belongs to
/// neither half. `Include` uses `c ≤ ⌈n/2⌉` and gives it to both.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Midline {
    #[default]
    Exclude,
    Include,
}

impl FromStr for Midline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exclude" => Ok(Midline::Exclude),
            "include" => Ok(Midline::Include),
            other => Err(Error::config(
                "net.midline",
                format!("unknown midline rule `{other}` (exclude|include)"),
            )),
        }
    }
}

impl fmt::Display for Midline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Midline::Exclude => "exclude",
            Midline::Include => "include",
        })
    }
}

/// Whether 1-indexed `c` lies in the first half of an extent `n`.
pub(crate) fn in_near_half(c: usize, n: usize, rule: Midline) -> bool {
    match rule {
        Midline::Exclude => 2 * c <= n,
        Midline::Include => c <= n.div_ceil(2),
    }
}

/// Binary half-plane mask `[H,W]`. `left` sets columns `j ≤ W/2`, `top` rows
/// `i ≤ H/2` (1-indexed); `right` and `bottom` mirror them.
pub fn init_expert_map<T: Real>(mode: InitMode, h: usize, w: usize, rule: Midline) -> Result<Tensor<T>> {
    if h == 0 || w == 0 {
        return Err(Error::Shape(format!("expert map extents must be positive, got {h}x{w}")));
    }
    let on = |i: usize, j: usize| -> bool {
        let (i, j) = (i + 1, j + 1);
        match mode {
            InitMode::Left => in_near_half(j, w, rule),
            InitMode::Right => in_near_half(w + 1 - j, w, rule),
            InitMode::Top => in_near_half(i, h, rule),
            InitMode::Bottom => in_near_half(h + 1 - i, h, rule),
            InitMode::Ones => true,
            InitMode::Zeros => false,
        }
    };
    Ok(Tensor::from_fn(&[h, w], |k| if on(k / w, k % w) { T::one() } else { T::zero() }))
}
