//! Printable stand-ins for raw bytes (the GPT-2 byte-to-unicode table).

use std::sync::OnceLock;

struct Tables {
    to_char: [char; 256],
    from_char: std::collections::HashMap<char, u8>,
}

fn tables() -> &'static Tables {
    static T: OnceLock<Tables> = OnceLock::new();
    T.get_or_init(|| {
        let printable = |b: u32| (0x21..=0x7e).contains(&b) || (0xa1..=0xac).contains(&b) || (0xae..=0xff).contains(&b);
        let mut to_char = ['\0'; 256];
        let mut next = 256u32;
        for b in 0..256u32 {
            let c = if printable(b) {
                b
            } else {
                next += 1;
                next - 1
            };
            to_char[b as usize] = char::from_u32(c).expect("valid scalar");
        }
        let from_char = to_char.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        Tables { to_char, from_char }
    })
}

pub(super) fn byte_token(b: u8) -> String {
    tables().to_char[b as usize].to_string()
}

pub(super) fn bytes_to_token(raw: &[u8]) -> String {
    raw.iter().map(|&b| tables().to_char[b as usize]).collect()
}

pub(super) fn token_to_bytes(token: &str) -> Vec<u8> {
    let t = &tables().from_char;
    token.chars().filter_map(|c| t.get(&c).copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_a_bijection() {
        let all: Vec<u8> = (0..=255).collect();
        let s = bytes_to_token(&all);
        assert_eq!(s.chars().count(), 256);
        assert_eq!(token_to_bytes(&s), all);
        assert_eq!(byte_token(b'a'), "a");
        assert_ne!(byte_token(b' '), " ");
    }
}
