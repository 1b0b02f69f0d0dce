use rand::Rng;

use crate::error::{Error, Result};

/// Next item to feed: the prediction when it is still in the basket,
/// otherwise a uniformly random remaining item.
pub fn teacher_force_next<R: Rng + ?Sized>(
    predicted: usize,
    remaining: &[usize],
    rng: &mut R,
) -> Result<usize> {
    if remaining.is_empty() {
        return Err(Error::Empty("remaining basket items"));
    }
    if remaining.contains(&predicted) {
        Ok(predicted)
    } else {
        Ok(remaining[rng.random_range(0..remaining.len())])
    }
}

/// Removes `item` from `remaining`, keeping the order of the rest.
pub(crate) fn take(remaining: &mut Vec<usize>, item: usize) {
    if let Some(p) = remaining.iter().position(|&i| i == item) {
        remaining.remove(p);
    }
}
