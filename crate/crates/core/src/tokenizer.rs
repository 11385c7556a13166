//! Character tokenizer over a fixed 64-symbol alphabet and the instruction template.

/// End of sequence; also the default stop token.
pub const EOS: usize = 0;
/// Stand-in for any character outside the alphabet.
pub const UNK: usize = 1;
/// How [`UNK`] decodes.
pub const UNK_CHAR: char = '~';

const ALPHABET: &str = "\n #:abcdefghijklmnopqrstuvwxyz0123456789IR.,;?!'\"-+=*/()<>|_&%";

pub const VOCAB_SIZE: usize = 64;

fn alphabet() -> &'static [u8] {
    ALPHABET.as_bytes()
}

pub fn encode(text: &str) -> Vec<usize> {
    text.chars()
        .map(|ch| {
            u8::try_from(ch)
                .ok()
                .and_then(|b| alphabet().iter().position(|&a| a == b))
                .map_or(UNK, |i| i + 2)
        })
        .collect()
}

/// Inverse of [`encode`]; [`EOS`] decodes to nothing.
pub fn decode(ids: &[usize]) -> String {
    ids.iter()
        .filter(|&&id| id != EOS)
        .map(|&id| match id.checked_sub(2).and_then(|i| alphabet().get(i)) {
            Some(&b) => b as char,
            None => UNK_CHAR,
        })
        .collect()
}

/// True when every character survives an encode/decode round trip.
pub fn is_representable(text: &str) -> bool {
    !encode(text).contains(&UNK)
}

/// The instruction template rendered as text, plus the byte offset at which
/// the response begins.
pub fn render_instruction(instruction: &str, input: Option<&str>, response: &str) -> (String, usize) {
    let mut s = format!("### Instruction:\n{instruction}\n\n");
    if let Some(input) = input {
        s.push_str(&format!("### Input:\n{input}\n\n"));
    }
    s.push_str("### Response:\n");
    let offset = s.len();
    s.push_str(response);
    (s, offset)
}

/// Token ids of the rendered template and the index of the first response token.
pub fn format_instruction(instruction: &str, input: Option<&str>, response: Option<&str>) -> (Vec<usize>, usize) {
    let (text, offset) = render_instruction(instruction, input, response.unwrap_or(""));
    let ids = encode(&text);
    let start = text[..offset].chars().count();
    (ids, start)
}
