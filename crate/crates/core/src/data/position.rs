/// Relative distances beyond this are clipped.
pub const MAX_DISTANCE: usize = 40;

/// Position-feature indices for a sentence of length `len` relative to the
/// entity at `anchor`: `clip(t - anchor, -max, max) + max`, so index `max`
/// marks the entity itself and the table has `2 * max + 1` rows.
pub fn position_indices(len: usize, anchor: usize, max_distance: usize) -> Vec<usize> {
    let max = max_distance as isize;
    (0..len)
        .map(|t| ((t as isize - anchor as isize).clamp(-max, max) + max) as usize)
        .collect()
}
