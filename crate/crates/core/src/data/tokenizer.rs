use crate::error::{Error, Result};

/// 256 byte values plus padding and end-of-text.
pub const VOCAB_SIZE: usize = 258;
pub const PAD_ID: u32 = 256;
pub const EOT_ID: u32 = 257;

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// Inverse of [`tokenize_bytes`]; special tokens produce no bytes.
pub fn detokenize(ids: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            0..=255 => out.push(id as u8),
            PAD_ID | EOT_ID => {}
            _ => return Err(Error::Input(format!("token id {id} outside vocabulary of {VOCAB_SIZE}"))),
        }
    }
    Ok(out)
}

/// Printable, delimiter-safe rendering of one token.
pub fn token_display(id: u32) -> String {
    match id {
        PAD_ID => "<pad>".into(),
        EOT_ID => "<eot>".into(),
        b if b < 256 => {
            let b = b as u8;
            match b {
                b' ' => "<sp>".into(),
                b'\t' => "\\t".into(),
                b'\n' => "\\n".into(),
                b'\r' => "\\r".into(),
                b'\\' => "\\\\".into(),
                b',' => "<comma>".into(),
                0x21..=0x7e => (b as char).to_string(),
                _ => format!("\\x{b:02x}"),
            }
        }
        other => format!("<{other}>"),
    }
}
