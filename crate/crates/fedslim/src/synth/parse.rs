//! Parsers for backend replies: the created-question block, the final
//! answer letter, and rationale sentinel truncation.

use crate::error::{Error, Result};

/// Extract the question and choice list from a question-generation reply.
/// Expects a "CREATED QUESTION AND CHOICES" marker followed by a line
/// starting with "Question:" and one starting with "Choices".
pub fn parse_question_reply(reply: &str) -> Result<(String, Vec<String>)> {
    let mut lines = reply.lines();
    lines
        .find(|l| l.trim_start().starts_with("CREATED QUESTION AND CHOICES"))
        .ok_or_else(|| Error::Data("reply: no CREATED QUESTION AND CHOICES block".into()))?;
    let mut question = None;
    let mut choices = None;
    for line in lines {
        let line = line.trim();
        if let Some(q) = line.strip_prefix("Question:") {
            question.get_or_insert_with(|| q.trim().to_string());
        } else if line.starts_with("Choices") && choices.is_none() {
            let after = line
                .split_once(':')
                .map(|(_, rest)| rest)
                .ok_or_else(|| Error::Data("reply: Choices line has no ':'".into()))?;
            choices = Some(parse_choice_list(after)?);
        }
    }
    let question = question.ok_or_else(|| Error::Data("reply: no Question line".into()))?;
    let choices = choices.ok_or_else(|| Error::Data("reply: no Choices line".into()))?;
    if question.is_empty() {
        return Err(Error::Data("reply: empty question".into()));
    }
    Ok((question, choices))
}

/// Parse a `['a', 'b', ...]` style list. Elements may be quoted with ' or "
/// (backslash escapes the quote) or left bare.
pub fn parse_choice_list(text: &str) -> Result<Vec<String>> {
    let text = text.trim();
    let inner = text
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| Error::Data(format!("choices: not a [ ... ] list: {text:?}")))?;
    let mut items = Vec::new();
    let mut chars = inner.chars().peekable();
    loop {
        while matches!(chars.peek(), Some(c) if c.is_whitespace()) {
            chars.next();
        }
        let Some(&first) = chars.peek() else { break };
        let item = if first == '\'' || first == '"' {
            let quote = first;
            chars.next();
            let mut s = String::new();
            loop {
                match chars.next() {
                    Some('\\') => match chars.next() {
                        Some(c) => s.push(c),
                        None => return Err(Error::Data("choices: dangling escape".into())),
                    },
                    Some(c) if c == quote => break,
                    Some(c) => s.push(c),
                    None => return Err(Error::Data("choices: unterminated quote".into())),
                }
            }
            // Skip to the separating comma (or end).
            while matches!(chars.peek(), Some(c) if c.is_whitespace()) {
                chars.next();
            }
            if let Some(&c) = chars.peek() {
                if c != ',' {
                    return Err(Error::Data(format!("choices: junk after quoted item: {c:?}")));
                }
                chars.next();
            }
            s
        } else {
            let mut s = String::new();
            for c in chars.by_ref() {
                if c == ',' {
                    break;
                }
                s.push(c);
            }
            s.trim().to_string()
        };
        if item.is_empty() {
            return Err(Error::Data("choices: empty item".into()));
        }
        items.push(item);
    }
    Ok(items)
}

/// Pull the answer letter out of a "FINAL ANSWER: X" line.
pub fn parse_answer_letter(reply: &str) -> Result<char> {
    let line = reply
        .lines()
        .find_map(|l| l.trim().strip_prefix("FINAL ANSWER"))
        .ok_or_else(|| Error::Data("reply: no FINAL ANSWER line".into()))?;
    let letter = line
        .chars()
        .find(|c| c.is_ascii_alphabetic())
        .ok_or_else(|| Error::Data("reply: FINAL ANSWER carries no letter".into()))?;
    let upper = letter.to_ascii_uppercase();
    // The rest of the line must not contain further letters ("just a letter").
    let tail_letters = line
        .chars()
        .skip_while(|c| !c.is_ascii_alphabetic())
        .skip(1)
        .filter(|c| c.is_ascii_alphabetic())
        .count();
    if tail_letters > 0 {
        return Err(Error::Data(format!("reply: FINAL ANSWER is not a single letter: {line:?}")));
    }
    Ok(upper)
}

pub fn letter_to_index(letter: char) -> usize {
    (letter as u8 - b'A') as usize
}

pub fn index_to_letter(index: usize) -> char {
    debug_assert!(index < 26);
    (b'A' + index as u8) as char
}

/// Cut a rationale reply at the first `<end>` sentinel. Returns the trimmed
/// text and whether the sentinel was present.
pub fn truncate_rationale(reply: &str) -> (String, bool) {
    match reply.split_once("<end>") {
        Some((before, _)) => (before.trim().to_string(), true),
        None => (reply.trim().to_string(), false),
    }
}
