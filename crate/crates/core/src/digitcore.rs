//! Exact base-10 arithmetic on digit strings.
//!
//! Every task label is computed here, so these routines are the ground truth
//! the models are scored against. Digits are stored most-significant first,
//! the same order they are printed and encoded.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DigitError {
    #[error("digit string is empty")]
    Empty,
    #[error("invalid digit {0} (expected 0..=9)")]
    InvalidDigit(u8),
    #[error("invalid character {0:?} in digit string")]
    InvalidChar(char),
    #[error("leading zero in {0:?}")]
    LeadingZero(String),
    #[error("modulus must be greater than 1, got {0}")]
    InvalidModulus(u64),
}

/// A non-negative integer as a most-significant-first sequence of digits.
///
/// Zero is the single digit `0`; no other value has a leading zero.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct DigitString(Vec<u8>);

impl DigitString {
    /// Validates `digits` (most-significant first).
    pub fn from_digits(digits: Vec<u8>) -> Result<Self, DigitError> {
        if digits.is_empty() {
            return Err(DigitError::Empty);
        }
        if let Some(&d) = digits.iter().find(|&&d| d > 9) {
            return Err(DigitError::InvalidDigit(d));
        }
        if digits.len() > 1 && digits[0] == 0 {
            let s: String = digits.iter().map(|d| char::from(b'0' + d)).collect();
            return Err(DigitError::LeadingZero(s));
        }
        Ok(DigitString(digits))
    }

    /// Builds from digits that may carry leading zeros, stripping them.
    pub fn from_digits_lenient(digits: &[u8]) -> Result<Self, DigitError> {
        if let Some(&d) = digits.iter().find(|&&d| d > 9) {
            return Err(DigitError::InvalidDigit(d));
        }
        Ok(Self::normalized(digits.to_vec()))
    }

    pub fn zero() -> Self {
        DigitString(vec![0])
    }

    pub fn from_u64(mut v: u64) -> Self {
        if v == 0 {
            return Self::zero();
        }
        let mut out = Vec::with_capacity(20);
        while v > 0 {
            out.push((v % 10) as u8);
            v /= 10;
        }
        out.reverse();
        DigitString(out)
    }

    /// Value as `u128`, or `None` if it does not fit.
    pub fn to_u128(&self) -> Option<u128> {
        self.0.iter().try_fold(0u128, |acc, &d| acc.checked_mul(10)?.checked_add(u128::from(d)))
    }

    pub fn to_u64(&self) -> Option<u64> {
        self.to_u128().and_then(|v| u64::try_from(v).ok())
    }

    pub fn digits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Always false: a digit string has at least one digit.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0]
    }

    // Strips leading zeros, keeping a single 0 for zero.
    fn normalized(mut digits: Vec<u8>) -> Self {
        let first_nonzero = digits.iter().position(|&d| d != 0);
        match first_nonzero {
            None => Self::zero(),
            Some(0) => DigitString(digits),
            Some(k) => {
                digits.drain(..k);
                DigitString(digits)
            }
        }
    }

    // Least-significant-first view used by the column algorithms.
    fn lsb_first(&self) -> impl Iterator<Item = u8> + '_ {
        self.0.iter().rev().copied()
    }
}

impl fmt::Display for DigitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.0 {
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for DigitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DigitString({self})")
    }
}

impl FromStr for DigitString {
    type Err = DigitError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let digits = s
            .chars()
            .map(|c| c.to_digit(10).map(|d| d as u8).ok_or(DigitError::InvalidChar(c)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_digits(digits)
    }
}

impl From<u64> for DigitString {
    fn from(v: u64) -> Self {
        Self::from_u64(v)
    }
}

impl Ord for DigitString {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.len().cmp(&other.0.len()).then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for DigitString {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Exact sum.
pub fn ds_add(a: &DigitString, b: &DigitString) -> DigitString {
    let n = a.len().max(b.len());
    let mut out = Vec::with_capacity(n + 1);
    let mut xs = a.lsb_first();
    let mut ys = b.lsb_first();
    let mut carry = 0u8;
    for _ in 0..n {
        let s = xs.next().unwrap_or(0) + ys.next().unwrap_or(0) + carry;
        out.push(s % 10);
        carry = s / 10;
    }
    if carry > 0 {
        out.push(carry);
    }
    out.reverse();
    DigitString::normalized(out)
}

/// Exact schoolbook product.
pub fn ds_mul(a: &DigitString, b: &DigitString) -> DigitString {
    if a.is_zero() || b.is_zero() {
        return DigitString::zero();
    }
    let xs: Vec<u32> = a.lsb_first().map(u32::from).collect();
    let ys: Vec<u32> = b.lsb_first().map(u32::from).collect();
    let mut acc = vec![0u32; xs.len() + ys.len()];
    for (i, &x) in xs.iter().enumerate() {
        if x == 0 {
            continue;
        }
        let mut carry = 0u32;
        for (j, &y) in ys.iter().enumerate() {
            let t = acc[i + j] + x * y + carry;
            acc[i + j] = t % 10;
            carry = t / 10;
        }
        let mut k = i + ys.len();
        while carry > 0 {
            let t = acc[k] + carry;
            acc[k] = t % 10;
            carry = t / 10;
            k += 1;
        }
    }
    let mut out: Vec<u8> = acc.into_iter().map(|d| d as u8).collect();
    out.reverse();
    DigitString::normalized(out)
}

/// `a mod c`, by Horner reduction in native integers.
pub fn ds_mod(a: &DigitString, c: u64) -> Result<DigitString, DigitError> {
    if c <= 1 {
        return Err(DigitError::InvalidModulus(c));
    }
    let c = u128::from(c);
    let r = a.digits().iter().fold(0u128, |acc, &d| (acc * 10 + u128::from(d)) % c);
    // r < c <= u64::MAX
    Ok(DigitString::from_u64(r as u64))
}

/// Digitwise sum modulo 10 with no carry propagation, aligned at the units digit.
pub fn ds_elementwise_add(a: &DigitString, b: &DigitString) -> DigitString {
    let n = a.len().max(b.len());
    let mut xs = a.lsb_first();
    let mut ys = b.lsb_first();
    let mut out: Vec<u8> = (0..n).map(|_| (xs.next().unwrap_or(0) + ys.next().unwrap_or(0)) % 10).collect();
    out.reverse();
    DigitString::normalized(out)
}

/// Carry statistics of a grade-school addition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct CarryProfile {
    /// Total number of carry events.
    pub nc: usize,
    /// Longest run of consecutive carry events.
    pub mc: usize,
}

pub fn carry_profile(a: &DigitString, b: &DigitString) -> CarryProfile {
    let n = a.len().max(b.len());
    let mut xs = a.lsb_first();
    let mut ys = b.lsb_first();
    let mut carry = 0u8;
    let mut profile = CarryProfile::default();
    let mut run = 0usize;
    for _ in 0..n {
        let s = xs.next().unwrap_or(0) + ys.next().unwrap_or(0) + carry;
        if s >= 10 {
            carry = 1;
            profile.nc += 1;
            run += 1;
            profile.mc = profile.mc.max(run);
        } else {
            carry = 0;
            run = 0;
        }
    }
    profile
}
