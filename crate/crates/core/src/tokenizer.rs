//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by four specials.

pub type Token = u32;

pub const BOS: Token = 256;
/// End of text.
pub const EOS: Token = 257;
/// Turn delimiter between prompt and response.
pub const SEP: Token = 258;
pub const PAD: Token = 259;
pub const VOCAB_SIZE: usize = 260;

pub fn encode(text: &str) -> Vec<Token> {
    text.bytes().map(Token::from).collect()
}

/// Decodes byte tokens, dropping specials. Invalid UTF-8 is replaced lossily.
pub fn decode(tokens: &[Token]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

pub fn is_special(t: Token) -> bool {
    t >= 256
}

/// A prompt/response pair laid out as `BOS prompt SEP response [EOS]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub tokens: Vec<Token>,
    /// Index of the first response token.
    pub response_start: usize,
}

impl Encoded {
    pub fn response(&self) -> &[Token] {
        &self.tokens[self.response_start..]
    }
}

/// Lays out a sequence, truncating the head of the prompt when the whole
/// thing would not fit in `max_len`. The response is never truncated; if it
/// alone does not fit, `None` is returned.
pub fn layout(
    prompt: &[Token],
    response: &[Token],
    with_eos: bool,
    max_len: usize,
) -> Option<Encoded> {
    let fixed = 2 + response.len() + usize::from(with_eos);
    if fixed > max_len {
        return None;
    }
    let keep = prompt.len().min(max_len - fixed);
    let prompt = &prompt[prompt.len() - keep..];
    let mut tokens = Vec::with_capacity(fixed + keep);
    tokens.push(BOS);
    tokens.extend_from_slice(prompt);
    tokens.push(SEP);
    let response_start = tokens.len();
    tokens.extend_from_slice(response);
    if with_eos {
        tokens.push(EOS);
    }
    Some(Encoded {
        tokens,
        response_start,
    })
}

/// `BOS prompt SEP`, truncating the prompt head to leave `reserve` free slots.
pub fn prompt_prefix(prompt: &[Token], max_len: usize, reserve: usize) -> Option<Vec<Token>> {
    let budget = max_len.checked_sub(2 + reserve)?;
    let keep = prompt.len().min(budget);
    let mut tokens = Vec::with_capacity(keep + 2);
    tokens.push(BOS);
    tokens.extend_from_slice(&prompt[prompt.len() - keep..]);
    tokens.push(SEP);
    Some(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_text() {
        let s = "héllo, world";
        assert_eq!(decode(&encode(s)), s);
    }

    #[test]
    fn layout_truncates_prompt_head_only() {
        let p = encode("abcdef");
        let r = encode("xyz");
        let e = layout(&p, &r, true, 10).unwrap();
        // 2 specials + 3 response + EOS leaves 4 prompt slots: "cdef"
        assert_eq!(decode(&e.tokens), "cdefxyz");
        assert_eq!(e.tokens.len(), 10);
        assert_eq!(e.response(), &[b'x' as u32, b'y' as u32, b'z' as u32, EOS]);
        assert!(layout(&p, &encode("0123456789"), true, 10).is_none());
    }
}
