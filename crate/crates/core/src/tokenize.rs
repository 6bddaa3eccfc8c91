//! Raw-text ingestion: pull emoji sequences out of a string and tokenize the rest.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use unicode_properties::emoji::{self, EmojiStatus, UnicodeEmoji};

use crate::error::{FaetError, Result};

/// Maps bracketed names such as `[smile]` to emoji tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AliasTable {
    names: HashMap<String, String>,
}

impl AliasTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `name` (with or without surrounding brackets).
    pub fn insert(&mut self, name: &str, emoji: &str) {
        let bare = name.trim().trim_start_matches('[').trim_end_matches(']');
        self.names.insert(bare.to_string(), emoji.to_string());
    }

    pub fn get(&self, bare_name: &str) -> Option<&str> {
        self.names.get(bare_name).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Parses `name<TAB>emoji` lines; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = AliasTable::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (name, emoji) = line.split_once('\t').ok_or_else(|| FaetError::Record {
                line: i + 1,
                message: "alias lines must be name<TAB>emoji".into(),
            })?;
            if name.trim().is_empty() || emoji.trim().is_empty() {
                return Err(FaetError::Record {
                    line: i + 1,
                    message: "empty alias name or emoji".into(),
                });
            }
            table.insert(name, emoji.trim());
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FaetError::io(path, e))?;
        Self::parse(&text)
    }
}

/// Whether `c` starts an emoji sequence. ASCII characters with the emoji
/// property (digits, `#`, `*`) only count as part of a keycap sequence.
fn starts_emoji(c: char, next: Option<char>, after: Option<char>) -> bool {
    if c.is_ascii() {
        let keycap = next == Some('\u{20E3}')
            || (next.is_some_and(emoji::is_emoji_presentation_selector) && after == Some('\u{20E3}'));
        return matches!(c, '0'..='9' | '#' | '*') && keycap;
    }
    match c.emoji_status() {
        EmojiStatus::NonEmoji | EmojiStatus::NonEmojiButEmojiComponent => false,
        // Skin-tone modifiers and regional indicators are components but stand alone too.
        _ => c.is_emoji_char() || emoji::is_regional_indicator(c),
    }
}

fn is_modifier(c: char) -> bool {
    matches!(c, '\u{1F3FB}'..='\u{1F3FF}')
}

/// Length in chars of the emoji sequence starting at `chars[0]`.
fn emoji_len(chars: &[char]) -> usize {
    let mut i = 1;
    if emoji::is_regional_indicator(chars[0]) {
        if chars.get(1).is_some_and(|&c| emoji::is_regional_indicator(c)) {
            return 2;
        }
        return 1;
    }
    loop {
        while let Some(&c) = chars.get(i) {
            if emoji::is_emoji_presentation_selector(c)
                || emoji::is_text_presentation_selector(c)
                || is_modifier(c)
                || emoji::is_tag_character(c)
                || c == '\u{20E3}'
            {
                i += 1;
            } else {
                break;
            }
        }
        match (chars.get(i), chars.get(i + 1)) {
            (Some(&z), Some(&next)) if emoji::is_zwj(z) && next.is_emoji_char() && !next.is_ascii() => {
                i += 2;
            }
            _ => return i,
        }
    }
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF      // kana
        | 0x3400..=0x4DBF    // CJK extension A
        | 0x4E00..=0x9FFF    // CJK unified
        | 0xAC00..=0xD7AF    // hangul syllables
        | 0xF900..=0xFAFF    // compatibility ideographs
        | 0x20000..=0x2FA1F) // extensions B+
}

/// Whitespace tokenization with CJK runs split into single characters.
pub fn tokenize_text(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut run = String::new();
        for c in word.chars() {
            if is_cjk(c) {
                if !run.is_empty() {
                    tokens.push(std::mem::take(&mut run));
                }
                tokens.push(c.to_string());
            } else {
                run.push(c);
            }
        }
        if !run.is_empty() {
            tokens.push(run);
        }
    }
    tokens
}

/// Splits raw text into `(text_tokens, emoji_tokens)`.
///
/// Emoji sequences (including modifier, ZWJ, keycap and flag sequences) and
/// bracketed aliases known to `aliases` are removed from the text in order of
/// appearance; repeats are kept.
pub fn extract_emojis(raw: &str, aliases: &AliasTable) -> (Vec<String>, Vec<String>) {
    let chars: Vec<char> = raw.chars().collect();
    let mut text = String::with_capacity(raw.len());
    let mut emojis = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '[' && !aliases.is_empty() {
            if let Some(close) = chars[i + 1..].iter().position(|&x| x == ']') {
                let name: String = chars[i + 1..i + 1 + close].iter().collect();
                if let Some(e) = aliases.get(&name) {
                    emojis.push(e.to_string());
                    text.push(' ');
                    i += close + 2;
                    continue;
                }
            }
        }
        if starts_emoji(c, chars.get(i + 1).copied(), chars.get(i + 2).copied()) {
            let len = emoji_len(&chars[i..]);
            emojis.push(chars[i..i + len].iter().collect());
            text.push(' ');
            i += len;
            continue;
        }
        text.push(c);
        i += 1;
    }
    (tokenize_text(&text), emojis)
}
