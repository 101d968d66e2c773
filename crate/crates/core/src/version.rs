//! Version string ordering.
//!
//! Versions are split into components at `.` and `-`. Components that are
//! both all digits compare as numbers; anything else compares as text and a
//! number sorts before text. A version that is a prefix of another is
//! smaller, so `2.0 < 2.0.1`.

use core::cmp::Ordering;

fn components(v: &str) -> impl Iterator<Item = &str> {
    v.split(['.', '-'])
}

fn is_number(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

fn compare_numbers(a: &str, b: &str) -> Ordering {
    let a = a.trim_start_matches('0');
    let b = b.trim_start_matches('0');
    a.len().cmp(&b.len()).then_with(|| a.cmp(b))
}

fn compare_component(a: &str, b: &str) -> Ordering {
    match (is_number(a), is_number(b)) {
        (true, true) => compare_numbers(a, b),
        (true, false) => Ordering::Less,
        (false, true) => Ordering::Greater,
        (false, false) => a.cmp(b),
    }
}

pub fn compare(a: &str, b: &str) -> Ordering {
    let mut xs = components(a);
    let mut ys = components(b);
    loop {
        match (xs.next(), ys.next()) {
            (None, None) => return a.cmp(b),
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(x), Some(y)) => match compare_component(x, y) {
                Ordering::Equal => {}
                other => return other,
            },
        }
    }
}
