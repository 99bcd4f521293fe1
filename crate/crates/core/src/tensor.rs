//! Dense binary32 tensors and the bit-level operations used to model faults.
//!
//! Bit indices follow the IEEE-754 layout: bit 0 is the least significant
//! mantissa bit, bits 23..=30 hold the exponent and bit 31 is the sign.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::ShapeError;

/// Width of every stored word.
pub const WORD_BITS: u8 = 32;

/// Row-major tensor of `f32` words.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, ShapeError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(ShapeError::InvalidShape(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(ShapeError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, ShapeError> {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// True when both tensors have the same shape and identical bit patterns.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// A bit position inside a 32-bit word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct BitLoc(u8);

impl BitLoc {
    pub const SIGN: BitLoc = BitLoc(31);

    pub fn new(index: u8) -> Result<Self, ShapeError> {
        if index < WORD_BITS {
            Ok(Self(index))
        } else {
            Err(ShapeError::BitOutOfRange(index))
        }
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn mask(self) -> u32 {
        1u32 << self.0
    }

    /// All 32 positions in ascending order.
    pub fn all() -> impl Iterator<Item = BitLoc> {
        (0..WORD_BITS).map(BitLoc)
    }
}

impl TryFrom<u8> for BitLoc {
    type Error = ShapeError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        BitLoc::new(value)
    }
}

impl From<BitLoc> for u8 {
    fn from(value: BitLoc) -> Self {
        value.0
    }
}

impl fmt::Display for BitLoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Flips exactly one bit of `word`.
#[inline]
pub fn flip_bit(word: f32, loc: BitLoc) -> f32 {
    f32::from_bits(word.to_bits() ^ loc.mask())
}

/// Which bits of a word a fault target spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Element,
    Exponent,
    Mantissa,
    Bit,
}

impl Granularity {
    /// Number of bits `n` covered by a target of this granularity.
    pub fn bit_count(self) -> u32 {
        match self {
            Granularity::Element => 32,
            Granularity::Exponent => 8,
            Granularity::Mantissa => 23,
            Granularity::Bit => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Element => "element",
            Granularity::Exponent => "exponent",
            Granularity::Mantissa => "mantissa",
            Granularity::Bit => "bit",
        }
    }

    fn range(self) -> std::ops::Range<u8> {
        match self {
            Granularity::Element => 0..32,
            Granularity::Exponent => 23..31,
            Granularity::Mantissa => 0..23,
            Granularity::Bit => 0..0,
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Granularity {
    type Err = ShapeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "element" => Ok(Granularity::Element),
            "exponent" => Ok(Granularity::Exponent),
            "mantissa" => Ok(Granularity::Mantissa),
            "bit" => Ok(Granularity::Bit),
            other => Err(ShapeError::UnknownGranularity(other.to_string())),
        }
    }
}

/// Enumerates the bits spanned by a target, in ascending order.
///
/// `anchor` must be given for [`Granularity::Bit`] and omitted otherwise.
pub fn bits_of(granularity: Granularity, anchor: Option<BitLoc>) -> Result<Vec<BitLoc>, ShapeError> {
    match (granularity, anchor) {
        (Granularity::Bit, Some(bit)) => Ok(vec![bit]),
        (Granularity::Bit, None) => Err(ShapeError::MissingAnchor),
        (_, Some(_)) => Err(ShapeError::UnexpectedAnchor(granularity)),
        (g, None) => Ok(g.range().map(BitLoc).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bit(i: u8) -> BitLoc {
        BitLoc::new(i).unwrap()
    }

    #[test]
    fn sign_flip_negates() {
        assert_eq!(flip_bit(1.0, BitLoc::SIGN), -1.0);
    }

    #[test]
    fn top_exponent_bit_of_one_gives_infinity() {
        // 1.0 = 0x3F800000; setting bit 30 fills the exponent with ones.
        let out = flip_bit(f32::from_bits(0x3F80_0000), bit(30));
        assert_eq!(out.to_bits(), 0x7F80_0000);
        assert!(out.is_infinite() && out > 0.0);
    }

    #[test]
    fn bit_range_is_checked() {
        assert!(BitLoc::new(31).is_ok());
        assert!(matches!(BitLoc::new(32), Err(ShapeError::BitOutOfRange(32))));
    }

    #[test]
    fn granularity_bit_sets() {
        let exp = bits_of(Granularity::Exponent, None).unwrap();
        assert_eq!(exp, (23..=30).map(bit).collect::<Vec<_>>());
        let man = bits_of(Granularity::Mantissa, None).unwrap();
        assert_eq!(man, (0..=22).map(bit).collect::<Vec<_>>());
        let all = bits_of(Granularity::Element, None).unwrap();
        assert_eq!(all.len(), 32);
        assert_eq!(bits_of(Granularity::Bit, Some(bit(5))).unwrap(), vec![bit(5)]);
        for g in [Granularity::Element, Granularity::Exponent, Granularity::Mantissa] {
            assert_eq!(bits_of(g, None).unwrap().len() as u32, g.bit_count());
        }
    }

    #[test]
    fn anchor_rules() {
        assert!(matches!(bits_of(Granularity::Bit, None), Err(ShapeError::MissingAnchor)));
        assert!(matches!(
            bits_of(Granularity::Exponent, Some(bit(3))),
            Err(ShapeError::UnexpectedAnchor(Granularity::Exponent))
        ));
    }

    #[test]
    fn parts_partition_the_word() {
        let mut seen = [0u8; 32];
        for b in bits_of(Granularity::Exponent, None)
            .unwrap()
            .into_iter()
            .chain(bits_of(Granularity::Mantissa, None).unwrap())
            .chain([BitLoc::SIGN])
        {
            seen[b.index() as usize] += 1;
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn tensor_shape_validation() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    proptest! {
        #[test]
        fn flip_is_an_involution(word in any::<u32>(), idx in 0u8..32) {
            let v = f32::from_bits(word);
            let b = bit(idx);
            prop_assert_eq!(flip_bit(flip_bit(v, b), b).to_bits(), word);
        }

        #[test]
        fn flip_changes_exactly_one_bit(word in any::<u32>(), idx in 0u8..32) {
            let out = flip_bit(f32::from_bits(word), bit(idx));
            prop_assert_eq!((out.to_bits() ^ word).count_ones(), 1);
            prop_assert_eq!(out.to_bits() ^ word, 1u32 << idx);
        }
    }
}
