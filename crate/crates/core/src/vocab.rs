//! Template-id vocabulary with reserved special tokens, and fixed-length
//! encoding of event sequences.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grouper::{EventSequence, Label};
use crate::parser::TemplateId;

/// Index of a token in the vocabulary.
pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const MASK: TokenId = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED_NAMES: [&str; NUM_RESERVED] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]"];
const TSV_HEADER: &str = "#fastlogad-vocab\tv1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    index: HashMap<TemplateId, TokenId>,
    /// Template id of each non-reserved index, offset by `NUM_RESERVED`.
    templates: Vec<TemplateId>,
}

impl Vocabulary {
    /// Assigns indices 4, 5, … to templates in order of first appearance.
    pub fn build(train: &[EventSequence]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Empty("vocabulary needs training sequences".into()));
        }
        let vocab = Self::from_templates(train.iter().flat_map(|s| s.event_ids.iter().copied()));
        if vocab.templates.is_empty() {
            return Err(Error::Empty("training sequences hold no events".into()));
        }
        Ok(vocab)
    }

    fn from_templates(ids: impl IntoIterator<Item = TemplateId>) -> Self {
        let mut vocab = Vocabulary {
            index: HashMap::new(),
            templates: Vec::new(),
        };
        for id in ids {
            vocab.index.entry(id).or_insert_with(|| {
                vocab.templates.push(id);
                (NUM_RESERVED + vocab.templates.len() - 1) as TokenId
            });
        }
        vocab
    }

    pub fn len(&self) -> usize {
        NUM_RESERVED + self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_events(&self) -> usize {
        self.templates.len()
    }

    pub fn token_of(&self, template: TemplateId) -> TokenId {
        self.index.get(&template).copied().unwrap_or(UNK)
    }

    /// Template id behind a non-reserved token.
    pub fn template_of(&self, token: TokenId) -> Option<TemplateId> {
        (token as usize)
            .checked_sub(NUM_RESERVED)
            .and_then(|i| self.templates.get(i).copied())
    }

    /// Tokens a generator may emit: `[UNK]` plus every event token.
    pub fn candidates(&self) -> Vec<TokenId> {
        std::iter::once(UNK)
            .chain((NUM_RESERVED..self.len()).map(|i| i as TokenId))
            .collect()
    }

    pub fn encode(&self, seq: &EventSequence, max_len: usize, with_cls: bool) -> TokenSequence {
        assert!(max_len >= 2, "max_len must be at least 2");
        let mut ids = Vec::with_capacity(max_len);
        if with_cls {
            ids.push(CLS);
        }
        ids.extend(
            seq.event_ids
                .iter()
                .take(max_len - ids.len())
                .map(|&t| self.token_of(t)),
        );
        let real = ids.len();
        ids.resize(max_len, PAD);
        let mut attn_mask = vec![0u8; max_len];
        attn_mask[..real].fill(1);
        TokenSequence {
            ids,
            attn_mask,
            label: seq.label,
        }
    }

    /// Encode without padding: `[CLS]` followed by at most `max_len - 1`
    /// events. This is the form the encoder consumes internally.
    pub fn encode_unpadded(&self, seq: &EventSequence, max_len: usize) -> Vec<TokenId> {
        std::iter::once(CLS)
            .chain(
                seq.event_ids
                    .iter()
                    .take(max_len.saturating_sub(1))
                    .map(|&t| self.token_of(t)),
            )
            .collect()
    }

    /// Template ids behind the event positions of `seq`; out-of-vocabulary
    /// positions yield `None`.
    pub fn decode(&self, seq: &TokenSequence) -> Vec<Option<TemplateId>> {
        seq.ids
            .iter()
            .zip(&seq.attn_mask)
            .filter(|&(&id, &m)| m == 1 && id != CLS)
            .map(|(&id, _)| self.template_of(id))
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(TSV_HEADER);
        out.push('\n');
        for (i, name) in RESERVED_NAMES.iter().enumerate() {
            out.push_str(&format!("{i}\t{name}\n"));
        }
        for (i, t) in self.templates.iter().enumerate() {
            out.push_str(&format!("{}\t{t}\n", i + NUM_RESERVED));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let bad =
            |line: usize, msg: String| Error::InvalidInput(format!("vocab.tsv line {line}: {msg}"));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == TSV_HEADER => {}
            other => {
                return Err(bad(
                    1,
                    format!(
                        "expected header {TSV_HEADER:?}, found {:?}",
                        other.map(|o| o.1)
                    ),
                ))
            }
        }
        let mut templates = Vec::new();
        for (no, line) in lines {
            let no = no + 1;
            let (idx, tok) = line
                .split_once('\t')
                .ok_or_else(|| bad(no, "expected index<TAB>token".into()))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| bad(no, format!("bad index {idx:?}")))?;
            let expected = no - 2;
            if idx != expected {
                return Err(bad(
                    no,
                    format!("index {idx} out of order, expected {expected}"),
                ));
            }
            if idx < NUM_RESERVED {
                if tok != RESERVED_NAMES[idx] {
                    return Err(bad(
                        no,
                        format!("reserved row {idx} must be {}", RESERVED_NAMES[idx]),
                    ));
                }
            } else {
                templates.push(
                    tok.parse::<TemplateId>()
                        .map_err(|_| bad(no, format!("bad template id {tok:?}")))?,
                );
            }
        }
        let vocab = Self::from_templates(templates.iter().copied());
        if vocab.templates.len() != templates.len() {
            return Err(Error::InvalidInput(
                "vocab.tsv repeats a template id".into(),
            ));
        }
        Ok(vocab)
    }

    /// SHA-256 over the canonical TSV form, hex encoded.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_tsv().as_bytes());
        format!("{digest:x}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub attn_mask: Vec<u8>,
    pub label: Label,
}

impl TokenSequence {
    /// Non-pad positions, in order.
    pub fn real_len(&self) -> usize {
        self.attn_mask.iter().filter(|&&m| m == 1).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn es(ids: &[TemplateId]) -> EventSequence {
        EventSequence {
            seq_id: "s".into(),
            event_ids: ids.to_vec(),
            label: Label::Normal,
            first_timestamp: None,
        }
    }

    #[test]
    fn first_appearance_order() {
        let v = Vocabulary::build(&[es(&[7, 3, 7, 9])]).unwrap();
        assert_eq!(v.token_of(7), 4);
        assert_eq!(v.token_of(3), 5);
        assert_eq!(v.token_of(9), 6);
        assert_eq!(v.len(), 7);
        assert_eq!(Vocabulary::build(&[es(&[42])]).unwrap().len(), 5);
        assert_eq!(v, Vocabulary::build(&[es(&[7, 3, 7, 9])]).unwrap());
    }

    #[test]
    fn empty_training_set_is_an_error() {
        assert!(Vocabulary::build(&[]).is_err());
    }

    #[test]
    fn encode_pads_and_prefixes_cls() {
        let v = Vocabulary::build(&[es(&[7, 3, 7, 9])]).unwrap();
        let t = v.encode(&es(&[7, 3]), 5, true);
        assert_eq!(t.ids, vec![CLS, 4, 5, PAD, PAD]);
        assert_eq!(t.attn_mask, vec![1, 1, 1, 0, 0]);
    }

    #[test]
    fn unknown_templates_become_unk() {
        let v = Vocabulary::build(&[es(&[7, 3])]).unwrap();
        let t = v.encode(&es(&[7, 99]), 4, false);
        assert_eq!(t.ids, vec![4, UNK, PAD, PAD]);
    }

    #[test]
    fn truncation_keeps_head() {
        let v = Vocabulary::build(&[es(&[1, 2, 3, 4, 5])]).unwrap();
        let t = v.encode(&es(&[1, 2, 3, 4, 5]), 3, true);
        assert_eq!(t.ids, vec![CLS, 4, 5]);
        let t = v.encode(&es(&[1, 2, 3, 4, 5]), 3, false);
        assert_eq!(t.ids, vec![4, 5, 6]);
        assert_eq!(v.encode_unpadded(&es(&[1, 2, 3, 4, 5]), 3), vec![CLS, 4, 5]);
    }

    #[test]
    fn candidates_exclude_pad_cls_mask() {
        let v = Vocabulary::build(&[es(&[7, 3, 9])]).unwrap();
        assert_eq!(v.candidates(), vec![UNK, 4, 5, 6]);
    }

    #[test]
    fn tsv_round_trip_and_fingerprint() {
        let v = Vocabulary::build(&[es(&[7, 3, 7, 9])]).unwrap();
        let text = v.to_tsv();
        assert!(text.starts_with("#fastlogad-vocab\tv1\n0\t[PAD]\n"));
        let back = Vocabulary::from_tsv(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.fingerprint(), v.fingerprint());
        let other = Vocabulary::build(&[es(&[3, 7, 9])]).unwrap();
        assert_ne!(other.fingerprint(), v.fingerprint());
    }

    #[test]
    fn tsv_rejects_bad_rows() {
        assert!(Vocabulary::from_tsv("nope\n").is_err());
        assert!(Vocabulary::from_tsv("#fastlogad-vocab\tv1\n0\t[PAD]\n2\t[CLS]\n").is_err());
        assert!(Vocabulary::from_tsv(
            "#fastlogad-vocab\tv1\n0\t[PAD]\n1\t[UNK]\n2\t[CLS]\n3\t[MASK]\n4\tx\n"
        )
        .is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn decode_inverts_encode(
                train in prop::collection::vec(0u32..30, 1..40),
                events in prop::collection::vec(0u32..40, 1..60),
                max_len in 2usize..80,
            ) {
                let v = Vocabulary::build(&[es(&train)]).unwrap();
                let t = v.encode(&es(&events), max_len, true);
                prop_assert_eq!(t.ids.len(), max_len);
                for (id, m) in t.ids.iter().zip(&t.attn_mask) {
                    prop_assert_eq!(*id == PAD, *m == 0);
                }
                let kept = events.len().min(max_len - 1);
                let expected: Vec<Option<TemplateId>> = events[..kept]
                    .iter()
                    .map(|e| train.contains(e).then_some(*e))
                    .collect();
                prop_assert_eq!(v.decode(&t), expected);
            }
        }
    }
}
