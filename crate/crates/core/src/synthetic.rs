//! Seeded synthetic corpora.
//!
//! * `overfit`: the label is fixed by which keyword family a document
//!   contains; emojis carry no signal. Any working model can memorise it.
//! * `xor`: every document has one polarity keyword (`POSG*` good, `POSB*`
//!   bad) and one emoji (`E_SMILE` or `E_CRY`). The label is 1 exactly when
//!   the keyword polarity and the emoji sense agree, so no weighted sum of
//!   unigram indicators separates the classes. Filler words come from
//!   disjoint pools for the train, validation and test parts.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Label, TokenizedDoc};
use crate::error::{FaetError, Result};

pub const MIN_SYNTHETIC_DOCS: usize = 16;
pub const SMILE: &str = "E_SMILE";
pub const CRY: &str = "E_CRY";
const KEYWORDS_PER_POLARITY: usize = 4;
const FILLERS_PER_POOL: usize = 40;

fn check_size(size: usize) -> Result<()> {
    if size < MIN_SYNTHETIC_DOCS {
        return Err(FaetError::Config(format!(
            "synthetic corpora need at least {MIN_SYNTHETIC_DOCS} documents, got {size}"
        )));
    }
    Ok(())
}

fn doc(tokens: Vec<String>, emojis: Vec<String>, label: Label) -> TokenizedDoc {
    TokenizedDoc {
        text_tokens: tokens,
        emoji_tokens: emojis,
        label: Some(label),
    }
}

/// Label by keyword family, classes alternating so they stay balanced.
pub fn overfit_corpus(size: usize, seed: u64) -> Result<Vec<TokenizedDoc>> {
    check_size(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emojis = [SMILE, CRY, "E_HEART", "E_FIRE"];
    Ok((0..size)
        .map(|i| {
            let label = (i % 2) as Label;
            let family = if label == 1 { "GOODW" } else { "BADW" };
            let mut tokens: Vec<String> = (0..rng.gen_range(2..5))
                .map(|_| format!("F{}", rng.gen_range(0..FILLERS_PER_POOL)))
                .collect();
            let at = rng.gen_range(0..=tokens.len());
            tokens.insert(at, format!("{family}{}", rng.gen_range(0..KEYWORDS_PER_POLARITY)));
            let e = (0..rng.gen_range(1..3))
                .map(|_| emojis[rng.gen_range(0..emojis.len())].to_string())
                .collect();
            doc(tokens, e, label)
        })
        .collect())
}

/// One XOR document. `good` is the keyword polarity, `smile` the emoji sense.
pub fn xor_doc(keyword: usize, good: bool, smile: bool, fillers: Vec<String>, at: usize) -> TokenizedDoc {
    let mut tokens = fillers;
    let family = if good { "POSG" } else { "POSB" };
    tokens.insert(at.min(tokens.len()), format!("{family}{keyword}"));
    let emoji = if smile { SMILE } else { CRY };
    doc(tokens, vec![emoji.to_string()], Label::from(good == smile))
}

fn xor_part(size: usize, pool: &str, rng: &mut ChaCha8Rng) -> Vec<TokenizedDoc> {
    let mut docs: Vec<TokenizedDoc> = (0..size)
        .map(|i| {
            let (good, smile) = (i % 2 == 0, (i / 2) % 2 == 0);
            let fillers: Vec<String> = (0..rng.gen_range(2..5))
                .map(|_| format!("{pool}{}", rng.gen_range(0..FILLERS_PER_POOL)))
                .collect();
            let at = rng.gen_range(0..=fillers.len());
            xor_doc(rng.gen_range(0..KEYWORDS_PER_POLARITY), good, smile, fillers, at)
        })
        .collect();
    docs.shuffle(rng);
    docs
}

/// Train, validation and test parts with disjoint filler vocabularies.
pub struct XorCorpus {
    pub train: Vec<TokenizedDoc>,
    pub val: Vec<TokenizedDoc>,
    pub test: Vec<TokenizedDoc>,
}

pub fn xor_corpus(train: usize, val: usize, test: usize, seed: u64) -> Result<XorCorpus> {
    check_size(train)?;
    check_size(test)?;
    if val == 0 {
        return Err(FaetError::Config("validation part must not be empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(XorCorpus {
        train: xor_part(train, "TRF", &mut rng),
        val: xor_part(val, "VAF", &mut rng),
        test: xor_part(test, "TEF", &mut rng),
    })
}
