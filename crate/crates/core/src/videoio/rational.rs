use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact positive frame rate `num / den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Rational {
    num: u64,
    den: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Rational {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Config(format!("frame rate {num}/{den} must be positive")));
        }
        let g = gcd(num, den);
        Ok(Rational {
            num: num / g,
            den: den / g,
        })
    }

    pub fn integer(n: u64) -> Result<Self> {
        Self::new(n, 1)
    }

    pub fn num(&self) -> u64 {
        self.num
    }

    pub fn den(&self) -> u64 {
        self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `floor(self * k)` in exact integer arithmetic.
    pub fn floor_mul(&self, k: u64) -> u64 {
        ((self.num as u128 * k as u128) / self.den as u128) as u64
    }

    /// `floor(n / self)` in exact integer arithmetic.
    pub fn floor_div_into(&self, n: u64) -> u64 {
        ((n as u128 * self.den as u128) / self.num as u128) as u64
    }
}

impl FromStr for Rational {
    type Err = Error;

    /// Accepts `"30000/1001"`, `"30"` and exact decimals such as `"29.97"`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("invalid frame rate '{s}'"));
        if let Some((n, d)) = s.split_once(['/', ':']) {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return Rational::new(n, d);
        }
        if let Some((int, frac)) = s.split_once('.') {
            if frac.is_empty() || frac.len() > 12 || !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
            let den = 10u64.pow(frac.len() as u32);
            let frac: u64 = frac.parse().map_err(|_| bad())?;
            let num = int
                .checked_mul(den)
                .and_then(|v| v.checked_add(frac))
                .ok_or_else(bad)?;
            return Rational::new(num, den);
        }
        Rational::integer(s.parse().map_err(|_| bad())?)
    }
}

impl TryFrom<String> for Rational {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Rational> for String {
    fn from(r: Rational) -> String {
        r.to_string()
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}
