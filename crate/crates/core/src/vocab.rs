use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenizedDoc;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token/id maps for text (with reserved PAD and UNK) and for emojis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    text: Vec<String>,
    emoji: Vec<String>,
    #[serde(skip)]
    text_index: HashMap<String, usize>,
    #[serde(skip)]
    emoji_index: HashMap<String, usize>,
}

fn index_of(tokens: &[String]) -> HashMap<String, usize> {
    tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect()
}

impl Vocab {
    pub fn from_tokens(text: Vec<String>, emoji: Vec<String>) -> Self {
        let mut v = Vocab {
            text,
            emoji,
            text_index: HashMap::new(),
            emoji_index: HashMap::new(),
        };
        v.reindex();
        v
    }

    /// Rebuilds the lookup maps; needed after deserialization.
    pub fn reindex(&mut self) {
        self.text_index = index_of(&self.text);
        self.emoji_index = index_of(&self.emoji);
    }

    pub fn text_len(&self) -> usize {
        self.text.len()
    }

    pub fn emoji_len(&self) -> usize {
        self.emoji.len()
    }

    /// Text id, or [`UNK`] for out-of-vocabulary tokens.
    pub fn text_id(&self, token: &str) -> usize {
        self.text_index.get(token).copied().unwrap_or(UNK)
    }

    pub fn emoji_id(&self, token: &str) -> Option<usize> {
        self.emoji_index.get(token).copied()
    }

    pub fn text_token(&self, id: usize) -> Option<&str> {
        self.text.get(id).map(String::as_str)
    }

    pub fn emoji_token(&self, id: usize) -> Option<&str> {
        self.emoji.get(id).map(String::as_str)
    }

    pub fn encode_text(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.text_id(t)).collect()
    }

    pub fn decode_text(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.text_token(i).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }

    /// Emoji ids of the known tokens, and the number of unknown ones dropped.
    pub fn encode_emojis(&self, tokens: &[String]) -> (Vec<usize>, usize) {
        let ids: Vec<usize> = tokens.iter().filter_map(|t| self.emoji_id(t)).collect();
        let dropped = tokens.len() - ids.len();
        (ids, dropped)
    }
}

/// Builds the vocabulary from training documents only.
///
/// Text tokens seen at least `min_count` times get ids after PAD and UNK in
/// first-seen order; every distinct emoji gets an id in first-seen order.
pub fn build_vocab(train_docs: &[TokenizedDoc], min_count: usize) -> Vocab {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    let mut emoji: Vec<String> = Vec::new();
    let mut seen_emoji: HashMap<&str, ()> = HashMap::new();
    for doc in train_docs {
        for t in &doc.text_tokens {
            let c = counts.entry(t).or_insert(0);
            if *c == 0 {
                order.push(t);
            }
            *c += 1;
        }
        for e in &doc.emoji_tokens {
            if seen_emoji.insert(e, ()).is_none() {
                emoji.push(e.clone());
            }
        }
    }
    let mut text = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    text.extend(
        order
            .into_iter()
            .filter(|t| counts[t] >= min_count.max(1) && *t != PAD_TOKEN && *t != UNK_TOKEN)
            .map(str::to_string),
    );
    Vocab::from_tokens(text, emoji)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs() -> Vec<TokenizedDoc> {
        vec![
            TokenizedDoc::new(&["a", "b"], &["😊", "😭"], Some(1)),
            TokenizedDoc::new(&["b"], &["😊"], Some(0)),
        ]
    }

    #[test]
    fn first_seen_order() {
        let v = build_vocab(&docs(), 1);
        assert_eq!(v.text_id(PAD_TOKEN), PAD);
        assert_eq!(v.text_id(UNK_TOKEN), UNK);
        assert_eq!(v.text_id("a"), 2);
        assert_eq!(v.text_id("b"), 3);
        assert_eq!(v.text_len(), 4);
    }

    #[test]
    fn min_count_maps_rare_tokens_to_unk() {
        let v = build_vocab(&docs(), 2);
        assert_eq!(v.text_id("a"), UNK);
        assert_eq!(v.text_id("b"), 2);
    }

    #[test]
    fn emojis_are_deduplicated() {
        let v = build_vocab(&docs(), 1);
        assert_eq!(v.emoji_len(), 2);
        assert_eq!(v.emoji_id("😭"), Some(1));
        let (ids, dropped) = v.encode_emojis(&["😊".into(), "🙃".into()]);
        assert_eq!((ids, dropped), (vec![0], 1));
    }

    #[test]
    fn serde_round_trip_reindexes() {
        let v = build_vocab(&docs(), 1);
        let mut back: Vocab = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        back.reindex();
        assert_eq!(back, v);
    }
}
