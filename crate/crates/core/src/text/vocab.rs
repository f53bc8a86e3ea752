use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::TextError;

pub const NUM_SENTINELS: usize = 32;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// Closed token vocabulary with dense ids.
///
/// Ids `0..4` are PAD, BOS, EOS and UNK, followed by the 32 sentinel tokens
/// used as MLM placeholders, followed by corpus tokens in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    tokens: Vec<String>,
    id_of: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile { tokens: v.tokens }
    }
}

impl TryFrom<VocabFile> for Vocab {
    type Error = String;

    fn try_from(f: VocabFile) -> Result<Self, String> {
        let specials = Vocab::special_tokens();
        if f.tokens.len() < specials.len() || f.tokens[..specials.len()] != specials[..] {
            return Err("vocabulary file does not start with the special tokens".into());
        }
        let mut id_of = HashMap::with_capacity(f.tokens.len());
        for (i, t) in f.tokens.iter().enumerate() {
            if id_of.insert(t.clone(), i as u32).is_some() {
                return Err(format!("duplicate token {t:?}"));
            }
        }
        Ok(Vocab { tokens: f.tokens, id_of })
    }
}

pub fn sentinel_token(i: usize) -> String {
    format!("<sent_{i}>")
}

impl Vocab {
    fn special_tokens() -> Vec<String> {
        let mut s: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|t| t.to_string()).collect();
        s.extend((0..NUM_SENTINELS).map(sentinel_token));
        s
    }

    /// Builds a vocabulary holding every distinct corpus token plus the specials.
    pub fn build<S: AsRef<str>>(corpora: &[Vec<S>]) -> Result<Vocab, TextError> {
        if corpora.is_empty() {
            return Err(TextError::EmptyCorpora);
        }
        let specials = Self::special_tokens();
        let distinct: BTreeSet<&str> = corpora
            .iter()
            .flat_map(|seq| seq.iter().map(AsRef::as_ref))
            .filter(|t| !specials.iter().any(|s| s == t))
            .collect();
        let mut tokens = specials;
        tokens.extend(distinct.into_iter().map(str::to_owned));
        let id_of = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab { tokens, id_of })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.id_of.contains_key(token)
    }

    pub fn pad(&self) -> u32 {
        0
    }

    pub fn bos(&self) -> u32 {
        1
    }

    pub fn eos(&self) -> u32 {
        2
    }

    pub fn unk(&self) -> u32 {
        3
    }

    /// Id of sentinel `i`; panics if `i >= NUM_SENTINELS`.
    pub fn sentinel(&self, i: usize) -> u32 {
        assert!(i < NUM_SENTINELS, "sentinel index {i} out of range");
        4 + i as u32
    }

    pub fn is_sentinel(&self, id: u32) -> bool {
        (4..4 + NUM_SENTINELS as u32).contains(&id)
    }

    /// Maps tokens to ids; out-of-vocabulary tokens become UNK.
    pub fn encode<S: AsRef<str>>(&self, text: &[S]) -> Vec<u32> {
        text.iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(self.unk()))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>, TextError> {
        ids.iter()
            .map(|&id| {
                self.tokens
                    .get(id as usize)
                    .cloned()
                    .ok_or(TextError::IdOutOfRange { id, size: self.len() })
            })
            .collect()
    }

    /// Decodes generated ids, stopping at EOS and skipping PAD/BOS.
    pub fn decode_generated(&self, ids: &[u32]) -> Result<Vec<String>, TextError> {
        let body: Vec<u32> = ids
            .iter()
            .copied()
            .take_while(|&id| id != self.eos())
            .filter(|&id| id != self.pad() && id != self.bos())
            .collect();
        self.decode(&body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn specials_len() -> usize {
        4 + NUM_SENTINELS
    }

    #[test]
    fn builds_specials_then_sorted_tokens() {
        let v = Vocab::build(&[vec!["b", "a"], vec!["b"]]).unwrap();
        assert_eq!(v.len(), specials_len() + 2);
        assert_eq!(&v.tokens()[specials_len()..], &["a".to_string(), "b".to_string()]);
        assert_eq!(v.id(PAD), Some(0));
        assert_eq!(v.id("<sent_31>"), Some(v.sentinel(31)));
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i as u32));
        }
    }

    #[test]
    fn order_of_corpora_does_not_matter() {
        let a = Vocab::build(&[vec!["x", "y"], vec!["z"]]).unwrap();
        let b = Vocab::build(&[vec!["z"], vec!["y", "x"]]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_corpus_list_is_rejected() {
        let empty: Vec<Vec<String>> = vec![];
        assert_eq!(Vocab::build(&empty), Err(TextError::EmptyCorpora));
    }

    #[test]
    fn unknown_tokens_and_bad_ids() {
        let v = Vocab::build(&[vec!["a"]]).unwrap();
        assert_eq!(v.encode(&["a", "zzz"]), vec![v.id("a").unwrap(), v.unk()]);
        let n = v.len() as u32;
        assert_eq!(
            v.decode(&[n]),
            Err(TextError::IdOutOfRange { id: n, size: v.len() })
        );
    }

    #[test]
    fn json_round_trip_rejects_tampering() {
        let v = Vocab::build(&[vec!["a", "b"]]).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<Vocab>(r#"{"tokens":["a"]}"#).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(seq in prop::collection::vec("[a-e]{1,3}", 0..20)) {
            let v = Vocab::build(&[seq.clone()]).unwrap();
            prop_assert_eq!(v.decode(&v.encode(&seq)).unwrap(), seq);
        }
    }
}
