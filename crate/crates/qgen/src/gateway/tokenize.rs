//! Deterministic helpers shared by the mock backend: a whitespace-chunk
//! tokenizer and a stable 64-bit hash used to assign reproducible
//! pseudo-random log-probabilities.

/// FNV-1a over arbitrary bytes. Stable across runs, threads, and platforms,
/// unlike the std hasher.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Fold another string into an existing hash value.
pub fn fnv_mix(seed: u64, s: &str) -> u64 {
    let mut h = seed ^ 0x9e3779b97f4a7c15;
    for &b in s.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Split text into tokens of the form `non-whitespace run + trailing
/// whitespace run`. A leading whitespace run becomes its own token.
/// Concatenating the tokens reproduces the input exactly.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut tokens = Vec::new();
    let bytes = text.as_bytes();
    let mut start = 0;
    let mut i = 0;
    // Leading whitespace is one token on its own.
    while i < bytes.len() && bytes[i].is_ascii_whitespace() {
        i += 1;
    }
    if !text.is_char_boundary(i) {
        // Non-ASCII whitespace never triggers this branch; is_ascii_whitespace
        // only matches single-byte characters.
        unreachable!();
    }
    if i > 0 {
        tokens.push(&text[..i]);
        start = i;
    }
    let mut chars = text[start..].char_indices().peekable();
    let mut tok_start = start;
    let mut in_ws_tail = false;
    while let Some((off, c)) = chars.next() {
        let pos = start + off;
        if c.is_whitespace() {
            in_ws_tail = true;
        } else if in_ws_tail {
            tokens.push(&text[tok_start..pos]);
            tok_start = pos;
            in_ws_tail = false;
        }
        if chars.peek().is_none() {
            tokens.push(&text[tok_start..]);
        }
    }
    tokens
}

/// Byte offsets of token boundaries in `text`, starting at 0 and ending at
/// `text.len()`.
pub fn token_boundaries(text: &str) -> Vec<usize> {
    let mut offsets = vec![0];
    let mut acc = 0;
    for t in tokenize(text) {
        acc += t.len();
        offsets.push(acc);
    }
    offsets
}

/// Stable pseudo-random log-probability for `token` given the tail of
/// `context`. Values lie in [-6, 0).
pub fn hash_logprob(context: &str, token: &str) -> f64 {
    let tail = context_tail(context, 64);
    let h = fnv_mix(fnv1a64(tail.as_bytes()), token);
    let u = (h >> 11) as f64 / (1u64 << 53) as f64;
    -6.0 + 6.0 * u
}

/// Last `max_bytes` of `context`, cut at a char boundary.
pub fn context_tail(context: &str, max_bytes: usize) -> &str {
    if context.len() <= max_bytes {
        return context;
    }
    let mut cut = context.len() - max_bytes;
    while !context.is_char_boundary(cut) {
        cut += 1;
    }
    &context[cut..]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_roundtrip() {
        for text in [
            "one two three",
            "  leading ws",
            "trailing ws  ",
            "single",
            "a\nb\n\nc",
            "",
        ] {
            let joined: String = tokenize(text).concat();
            assert_eq!(joined, text);
        }
    }

    #[test]
    fn whitespace_attaches_to_preceding_word() {
        assert_eq!(tokenize("foo bar"), vec!["foo ", "bar"]);
        assert_eq!(tokenize("foo\n\nbar baz"), vec!["foo\n\n", "bar ", "baz"]);
    }

    #[test]
    fn hash_logprob_is_stable_and_bounded() {
        let a = hash_logprob("some context", "tok");
        let b = hash_logprob("some context", "tok");
        assert_eq!(a, b);
        assert!((-6.0..0.0).contains(&a));
        // Different token, different score with overwhelming likelihood.
        assert_ne!(a, hash_logprob("some context", "tok2"));
    }

    #[test]
    fn boundaries_cover_text() {
        let b = token_boundaries("foo bar baz");
        assert_eq!(b, vec![0, 4, 8, 11]);
    }
}
