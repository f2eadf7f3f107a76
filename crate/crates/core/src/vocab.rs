//! Synthetic vocabulary shared by every toy task.

pub const SIZE: usize = 64;

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const Q_COUNT: u32 = 2;
pub const Q_CLASS: u32 = 3;
pub const Q_CLOCK: u32 = 4;
pub const Q_READ: u32 = 5;
pub const Q_CAPTION: u32 = 6;
pub const Q_ATTR: u32 = 7;

const DIGIT_BASE: u32 = 8;
const LETTER_BASE: u32 = 18;
const HOUR_BASE: u32 = 26;
const MINUTE_BASE: u32 = 38;
const GLYPH_BASE: u32 = 42;
const CLASS_BASE: u32 = 50;
const ATTR_BASE: u32 = 58;

pub const ART: u32 = 62;

pub const DIGITS: usize = 10;
pub const LETTERS: usize = 8;
pub const HOURS: usize = 12;
pub const MINUTES: usize = 4;
pub const GLYPHS: usize = 8;
pub const CLASSES: usize = 8;
pub const ATTRS: usize = 4;

/// Digit word `zero..=nine`.
pub fn digit(n: usize) -> u32 {
    assert!(n < DIGITS);
    DIGIT_BASE + n as u32
}

/// Multiple-choice letter `A..=H`.
pub fn letter(i: usize) -> u32 {
    assert!(i < LETTERS);
    LETTER_BASE + i as u32
}

/// Hour word for `h` in `1..=12`.
pub fn hour(h: usize) -> u32 {
    assert!((1..=HOURS).contains(&h));
    HOUR_BASE + h as u32 - 1
}

/// Minute word for quarter `q` (0 → `:00`, 3 → `:45`).
pub fn minute(q: usize) -> u32 {
    assert!(q < MINUTES);
    MINUTE_BASE + q as u32
}

pub fn glyph(i: usize) -> u32 {
    assert!(i < GLYPHS);
    GLYPH_BASE + i as u32
}

pub fn class_name(i: usize) -> u32 {
    assert!(i < CLASSES);
    CLASS_BASE + i as u32
}

pub fn attribute(i: usize) -> u32 {
    assert!(i < ATTRS);
    ATTR_BASE + i as u32
}

/// Token ids of the digit words; the numeric set used by the bias probe.
pub fn digit_tokens() -> Vec<u32> {
    (0..DIGITS).map(digit).collect()
}

pub fn is_digit(token: u32) -> bool {
    (DIGIT_BASE..DIGIT_BASE + DIGITS as u32).contains(&token)
}

/// Human-readable token label.
pub fn token_name(token: u32) -> String {
    const WORDS: [&str; DIGITS] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];
    let t = token;
    match t {
        PAD => "<pad>".into(),
        EOS => "<eos>".into(),
        Q_COUNT => "<count>".into(),
        Q_CLASS => "<class>".into(),
        Q_CLOCK => "<clock>".into(),
        Q_READ => "<read>".into(),
        Q_CAPTION => "<caption>".into(),
        Q_ATTR => "<attr>".into(),
        ART => "a".into(),
        _ if is_digit(t) => WORDS[(t - DIGIT_BASE) as usize].into(),
        _ if (LETTER_BASE..HOUR_BASE).contains(&t) => ((b'A' + (t - LETTER_BASE) as u8) as char).to_string(),
        _ if (HOUR_BASE..MINUTE_BASE).contains(&t) => format!("{}h", t - HOUR_BASE + 1),
        _ if (MINUTE_BASE..GLYPH_BASE).contains(&t) => format!(":{:02}", (t - MINUTE_BASE) * 15),
        _ if (GLYPH_BASE..CLASS_BASE).contains(&t) => format!("g{}", t - GLYPH_BASE),
        _ if (CLASS_BASE..ATTR_BASE).contains(&t) => format!("class{}", t - CLASS_BASE),
        _ if (ATTR_BASE..ART).contains(&t) => format!("attr{}", t - ATTR_BASE),
        _ => format!("<{t}>"),
    }
}
