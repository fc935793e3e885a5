use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{quantize::MAX_BITS, Element, Layout, DEFAULT_MAX_ELEMENTS};
use crate::error::{Error, Result};

/// Tokens per element: category, x, y, h, w.
pub const GROUP: usize = 5;

/// Token id layout: `pad, bos, eos`, then `C` categories, then `2^bits` bins.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub bits: u32,
    pub num_categories: usize,
    pub max_elements: usize,
}

/// What a single token id denotes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Pad,
    Bos,
    Eos,
    Category(u32),
    Coord(u32),
}

/// The kind of token the grammar allows at a sequence position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    Bos,
    CategoryOrEos,
    Coordinate,
}

impl Vocab {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    const SPECIAL: u32 = 3;

    pub fn new(num_categories: usize, bits: u32) -> Result<Self> {
        Self::with_max_elements(num_categories, bits, DEFAULT_MAX_ELEMENTS)
    }

    pub fn with_max_elements(num_categories: usize, bits: u32, max_elements: usize) -> Result<Self> {
        if !(1..=MAX_BITS).contains(&bits) {
            return Err(Error::InvalidBits(bits));
        }
        if num_categories == 0 {
            return Err(Error::InvalidConfig("at least one category is required".into()));
        }
        if max_elements == 0 {
            return Err(Error::InvalidConfig("max_elements must be positive".into()));
        }
        Ok(Self {
            bits,
            num_categories,
            max_elements,
        })
    }

    pub fn bins(&self) -> u32 {
        1 << self.bits
    }

    /// Total number of token ids `V`.
    pub fn size(&self) -> usize {
        Self::SPECIAL as usize + self.num_categories + self.bins() as usize
    }

    pub fn category_range(&self) -> Range<u32> {
        Self::SPECIAL..Self::SPECIAL + self.num_categories as u32
    }

    pub fn coord_range(&self) -> Range<u32> {
        let start = self.category_range().end;
        start..start + self.bins()
    }

    /// Longest encodable sequence, `5 * max_elements + 2`.
    pub fn max_seq_len(&self) -> usize {
        GROUP * self.max_elements + 2
    }

    pub fn category_token(&self, category: u32) -> Result<u32> {
        if category as usize >= self.num_categories {
            return Err(Error::InvalidCategory {
                id: category,
                count: self.num_categories,
            });
        }
        Ok(Self::SPECIAL + category)
    }

    pub fn coord_token(&self, bin: u32) -> Result<u32> {
        if bin >= self.bins() {
            return Err(Error::InvalidBin {
                bin,
                bits: self.bits,
            });
        }
        Ok(self.coord_range().start + bin)
    }

    /// Classifies a token id, or `None` if it is outside `[0, V)`.
    pub fn kind(&self, token: u32) -> Option<TokenKind> {
        match token {
            Self::PAD => Some(TokenKind::Pad),
            Self::BOS => Some(TokenKind::Bos),
            Self::EOS => Some(TokenKind::Eos),
            t if self.category_range().contains(&t) => Some(TokenKind::Category(t - Self::SPECIAL)),
            t if self.coord_range().contains(&t) => Some(TokenKind::Coord(t - self.coord_range().start)),
            _ => None,
        }
    }

    /// Grammar slot at `position` of an unpadded sequence.
    pub fn slot_kind(position: usize) -> SlotKind {
        match position {
            0 => SlotKind::Bos,
            p if (p - 1) % GROUP == 0 => SlotKind::CategoryOrEos,
            _ => SlotKind::Coordinate,
        }
    }

    /// Token ids the grammar permits in `slot`.
    pub fn legal_range(&self, slot: SlotKind) -> Range<u32> {
        match slot {
            SlotKind::Bos => Self::BOS..Self::BOS + 1,
            SlotKind::CategoryOrEos => Self::EOS..self.category_range().end,
            SlotKind::Coordinate => self.coord_range(),
        }
    }

    pub fn is_legal(&self, slot: SlotKind, token: u32) -> bool {
        self.legal_range(slot).contains(&token)
    }
}

/// A flat token sequence, optionally followed by padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Length without trailing pad tokens.
    pub fn unpadded_len(&self) -> usize {
        self.tokens.iter().rposition(|&t| t != Vocab::PAD).map_or(0, |i| i + 1)
    }

    /// Copy right-padded to `len` tokens (never truncates).
    pub fn padded(&self, len: usize) -> TokenSequence {
        let mut tokens = self.tokens.clone();
        if tokens.len() < len {
            tokens.resize(len, Vocab::PAD);
        }
        TokenSequence { tokens }
    }

    /// Whether every position holds a token legal for its slot.
    pub fn is_well_formed(&self, vocab: &Vocab) -> bool {
        let n = self.unpadded_len();
        if n < 2 || n % GROUP != 2 || self.tokens[n - 1] != Vocab::EOS {
            return false;
        }
        self.tokens[..n - 1]
            .iter()
            .enumerate()
            .all(|(i, &t)| vocab.is_legal(Vocab::slot_kind(i), t) && t != Vocab::EOS)
    }
}

/// Flattens `layout` into `[bos, (cat, x, y, h, w)*, eos]` in its current
/// element order.
pub fn encode_sequence(layout: &Layout, vocab: &Vocab) -> Result<TokenSequence> {
    let n = layout.elements.len();
    if n > vocab.max_elements {
        return Err(Error::LayoutTooLong {
            n,
            max: vocab.max_elements,
        });
    }
    if layout.bits != vocab.bits {
        return Err(Error::Vocab(format!(
            "layout quantized at {} bits, vocabulary uses {}",
            layout.bits, vocab.bits
        )));
    }
    let mut tokens = Vec::with_capacity(GROUP * n + 2);
    tokens.push(Vocab::BOS);
    for e in &layout.elements {
        tokens.push(vocab.category_token(e.category)?);
        for bin in e.bins() {
            tokens.push(vocab.coord_token(bin)?);
        }
    }
    tokens.push(Vocab::EOS);
    Ok(TokenSequence { tokens })
}

/// Inverse of [`encode_sequence`].
///
/// Decoding stops at the first `eos` (or pad) in a category slot. A sequence
/// that ends after a complete group without `eos` is accepted; one that ends
/// inside a group is not.
pub fn decode_sequence(tokens: &[u32], vocab: &Vocab) -> Result<Layout> {
    let malformed = |position: usize, got: u32| Error::MalformedSequence {
        position,
        expected: Vocab::slot_kind(position),
        got,
    };
    match tokens.first() {
        None => return Err(Error::TruncatedElement { position: 0 }),
        Some(&Vocab::BOS) => {}
        Some(&t) => return Err(malformed(0, t)),
    }
    let mut elements = Vec::new();
    let mut pos = 1;
    while pos < tokens.len() {
        let category = match vocab.kind(tokens[pos]) {
            Some(TokenKind::Eos | TokenKind::Pad) => break,
            Some(TokenKind::Category(c)) => c,
            _ => return Err(malformed(pos, tokens[pos])),
        };
        let mut bins = [0u32; 4];
        for (k, bin) in bins.iter_mut().enumerate() {
            let p = pos + 1 + k;
            match tokens.get(p).map(|&t| (t, vocab.kind(t))) {
                None | Some((_, Some(TokenKind::Pad))) => return Err(Error::TruncatedElement { position: p }),
                Some((_, Some(TokenKind::Coord(b)))) => *bin = b,
                Some((t, _)) => return Err(malformed(p, t)),
            }
        }
        let [x, y, h, w] = bins;
        elements.push(Element::new(category, x, y, h, w));
        pos += GROUP;
    }
    Ok(Layout::new(vocab.bits, elements))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        Vocab::new(5, 8).unwrap()
    }

    #[test]
    fn ranges_partition_the_vocabulary() {
        let v = vocab();
        assert_eq!(v.size(), 3 + 5 + 256);
        assert_eq!(v.category_range(), 3..8);
        assert_eq!(v.coord_range(), 8..264);
        for t in 0..v.size() as u32 {
            assert!(v.kind(t).is_some());
        }
        assert!(v.kind(v.size() as u32).is_none());
    }

    #[test]
    fn encode_examples() {
        let v = vocab();
        let empty = Layout::new(8, vec![]);
        assert_eq!(encode_sequence(&empty, &v).unwrap().tokens, vec![1, 2]);
        let one = Layout::new(8, vec![Element::new(2, 0, 0, 10, 20)]);
        assert_eq!(encode_sequence(&one, &v).unwrap().tokens, vec![1, 5, 8, 8, 18, 28, 2]);
        let two = Layout::new(8, vec![Element::new(0, 1, 2, 3, 4); 2]);
        assert_eq!(encode_sequence(&two, &v).unwrap().len(), 12);
    }

    #[test]
    fn encode_rejects_long_layouts() {
        let v = Vocab::with_max_elements(5, 8, 2).unwrap();
        let l = Layout::new(8, vec![Element::new(0, 0, 0, 0, 0); 3]);
        assert!(matches!(encode_sequence(&l, &v), Err(Error::LayoutTooLong { n: 3, max: 2 })));
    }

    #[test]
    fn encode_rejects_bits_mismatch() {
        assert!(matches!(
            encode_sequence(&Layout::new(6, vec![]), &vocab()),
            Err(Error::Vocab(_))
        ));
    }

    #[test]
    fn decode_empty() {
        assert!(decode_sequence(&[1, 2], &vocab()).unwrap().is_empty());
        assert!(decode_sequence(&[1, 2, 0, 0], &vocab()).unwrap().is_empty());
    }

    #[test]
    fn decode_rejects_coordinate_in_category_slot() {
        let err = decode_sequence(&[1, 8, 8, 8, 8, 8, 2], &vocab()).unwrap_err();
        assert!(matches!(
            err,
            Error::MalformedSequence {
                position: 1,
                expected: SlotKind::CategoryOrEos,
                got: 8
            }
        ));
    }

    #[test]
    fn decode_rejects_eos_in_coordinate_slot() {
        let err = decode_sequence(&[1, 5, 8, 2], &vocab()).unwrap_err();
        assert!(matches!(err, Error::MalformedSequence { position: 3, .. }));
    }

    #[test]
    fn decode_reports_truncation() {
        let err = decode_sequence(&[1, 5, 8, 8], &vocab()).unwrap_err();
        assert!(matches!(err, Error::TruncatedElement { position: 4 }));
        let err = decode_sequence(&[1, 5, 8, 0, 0], &vocab()).unwrap_err();
        assert!(matches!(err, Error::TruncatedElement { position: 3 }));
    }

    #[test]
    fn decode_stops_at_first_eos() {
        let l = decode_sequence(&[1, 5, 8, 8, 18, 28, 2, 5, 9, 9, 9, 9, 2], &vocab()).unwrap();
        assert_eq!(l.elements, vec![Element::new(2, 0, 0, 10, 20)]);
    }

    #[test]
    fn slot_kinds_follow_groups_of_five() {
        let kinds: Vec<SlotKind> = (0..8).map(Vocab::slot_kind).collect();
        use SlotKind::*;
        assert_eq!(
            kinds,
            vec![Bos, CategoryOrEos, Coordinate, Coordinate, Coordinate, Coordinate, CategoryOrEos, Coordinate]
        );
    }

    #[test]
    fn padding_helpers() {
        let s = TokenSequence::new(vec![1, 5, 8, 8, 8, 8, 2]).padded(10);
        assert_eq!(s.len(), 10);
        assert_eq!(s.unpadded_len(), 7);
        assert!(s.is_well_formed(&vocab()));
        assert!(!TokenSequence::new(vec![1, 8, 2]).is_well_formed(&vocab()));
    }

    fn arb_layout(bits: u32, c: u32) -> impl Strategy<Value = Layout> {
        let n = 1u32 << bits;
        proptest::collection::vec((0..c, 0..n, 0..n, 0..n, 0..n), 0..20).prop_map(move |es| {
            Layout::new(
                bits,
                es.into_iter().map(|(c, x, y, h, w)| Element::new(c, x, y, h, w)).collect(),
            )
        })
    }

    proptest! {
        #[test]
        fn round_trip(l in arb_layout(6, 4)) {
            let v = Vocab::new(4, 6).unwrap();
            let s = encode_sequence(&l, &v).unwrap();
            prop_assert_eq!(s.len(), 5 * l.len() + 2);
            prop_assert!(s.is_well_formed(&v));
            prop_assert_eq!(decode_sequence(&s.tokens, &v).unwrap(), l);
        }

        #[test]
        fn raster_sort_is_an_idempotent_permutation(l in arb_layout(4, 3)) {
            let once = super::super::raster_sort(&l);
            prop_assert_eq!(&super::super::raster_sort(&once), &once);
            let mut a: Vec<_> = l.elements.iter().map(|e| (e.category, e.bins())).collect();
            let mut b: Vec<_> = once.elements.iter().map(|e| (e.category, e.bins())).collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }
    }
}
