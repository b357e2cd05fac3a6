//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by four specials.

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
pub const REPEAT_SEP: u32 = 259;

/// 256 byte ids plus the four specials.
pub const VOCAB_SIZE: usize = 260;

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Decodes byte ids back to text; specials are dropped and invalid UTF-8 is
/// replaced.
pub fn decode(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Human-readable label for a token id, escaping whitespace the way the
/// analysis tables print it.
pub fn token_label(token: u32) -> String {
    match token {
        PAD => "<pad>".into(),
        BOS => "<bos>".into(),
        EOS => "<eos>".into(),
        REPEAT_SEP => "<sep>".into(),
        b if b < 256 => match b as u8 {
            b'\n' => "\\n".into(),
            b'\t' => "\\t".into(),
            b' ' => "\\s".into(),
            b'\r' => "\\r".into(),
            c if c.is_ascii_graphic() => (c as char).to_string(),
            c => format!("0x{c:02x}"),
        },
        other => format!("<{other}>"),
    }
}
