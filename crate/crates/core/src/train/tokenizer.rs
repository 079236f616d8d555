//! Identity byte tokenizer with one extra padding id.

pub const VOCAB_SIZE: usize = 257;
pub const PAD_ID: usize = 256;

pub fn tokenize_bytes(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

/// Inverse of [`tokenize_bytes`]; the padding id is dropped.
pub fn detokenize(ids: &[usize]) -> Vec<u8> {
    ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_map_to_ids() {
        assert_eq!(tokenize_bytes(b"ab"), vec![97, 98]);
        assert!(tokenize_bytes(b"").is_empty());
    }

    #[test]
    fn round_trip_all_bytes() {
        let all: Vec<u8> = (0..=255).collect();
        assert_eq!(detokenize(&tokenize_bytes(&all)), all);
        assert_eq!(detokenize(&[104, PAD_ID, 105]), b"hi");
    }
}
