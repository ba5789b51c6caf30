use crate::error::{Error, Result};

pub const MAX_ROMAN: u32 = 4999;

const NUMERALS: [(u32, &str); 13] = [
    (1000, "M"),
    (900, "CM"),
    (500, "D"),
    (400, "CD"),
    (100, "C"),
    (90, "XC"),
    (50, "L"),
    (40, "XL"),
    (10, "X"),
    (9, "IX"),
    (5, "V"),
    (4, "IV"),
    (1, "I"),
];

/// Standard subtractive Roman numeral for `1..=4999` (thousands repeat `M`).
pub fn roman_numeral(n: u32) -> Result<String> {
    if n == 0 || n > MAX_ROMAN {
        return Err(Error::InvalidInput(format!(
            "roman numeral out of range 1..={MAX_ROMAN}: {n}"
        )));
    }
    let mut rest = n;
    let mut out = String::new();
    for &(value, glyph) in &NUMERALS {
        while rest >= value {
            out.push_str(glyph);
            rest -= value;
        }
    }
    Ok(out)
}

/// Inverse of [`roman_numeral`]. Only canonical spellings are accepted.
pub fn parse_roman(s: &str) -> Result<u32> {
    let digit = |c: char| -> Result<u32> {
        Ok(match c {
            'I' => 1,
            'V' => 5,
            'X' => 10,
            'L' => 50,
            'C' => 100,
            'D' => 500,
            'M' => 1000,
            other => {
                return Err(Error::InvalidInput(format!(
                    "invalid roman digit {other:?} in {s:?}"
                )))
            }
        })
    };
    let values = s.chars().map(digit).collect::<Result<Vec<_>>>()?;
    let mut total = 0u32;
    for (i, &v) in values.iter().enumerate() {
        match values.get(i + 1) {
            Some(&next) if next > v => total = total.wrapping_sub(v),
            _ => total = total.wrapping_add(v),
        }
    }
    // Rejects "IIII", "VX" and other non-canonical forms.
    match roman_numeral(total) {
        Ok(canonical) if canonical == s => Ok(total),
        _ => Err(Error::InvalidInput(format!("non-canonical roman numeral {s:?}"))),
    }
}
