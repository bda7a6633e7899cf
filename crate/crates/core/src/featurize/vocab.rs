//! Atom vocabulary: (atomic number 1..=100) × (formal charge −2..=+2), plus
//! one MASK token used by corruption.

pub const MAX_Z: u32 = 100;
pub const MIN_CHARGE: i32 = -2;
pub const MAX_CHARGE: i32 = 2;
const CHARGE_BUCKETS: usize = (MAX_CHARGE - MIN_CHARGE + 1) as usize;

/// Number of real atom tokens.
pub const ATOM_TOKENS: usize = MAX_Z as usize * CHARGE_BUCKETS;
pub const MASK_TOKEN: usize = ATOM_TOKENS;
/// Embedding table rows (atom tokens + MASK).
pub const VOCAB_SIZE: usize = ATOM_TOKENS + 1;

pub fn token(atomic_number: u32, charge: i32) -> Option<usize> {
    if atomic_number == 0 || atomic_number > MAX_Z || !(MIN_CHARGE..=MAX_CHARGE).contains(&charge) {
        return None;
    }
    Some((atomic_number as usize - 1) * CHARGE_BUCKETS + (charge - MIN_CHARGE) as usize)
}

/// Inverse of [`token`]; `None` for MASK or out-of-range tokens.
pub fn decode(token: usize) -> Option<(u32, i32)> {
    if token >= ATOM_TOKENS {
        return None;
    }
    Some((
        (token / CHARGE_BUCKETS) as u32 + 1,
        (token % CHARGE_BUCKETS) as i32 + MIN_CHARGE,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_roundtrip() {
        for z in 1..=MAX_Z {
            for c in MIN_CHARGE..=MAX_CHARGE {
                assert_eq!(decode(token(z, c).unwrap()), Some((z, c)));
            }
        }
        assert_eq!(token(101, 0), None);
        assert_eq!(token(6, 3), None);
        assert_eq!(decode(MASK_TOKEN), None);
    }
}
