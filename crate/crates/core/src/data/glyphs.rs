//! Fixed alphabet of small binary bitmaps used as background "metadata" marks.
//!
//! The first `num_classes` glyphs are tied to classes; the remaining ones form
//! a reserve pool used for decorrelated draws, so a fully decorrelated dataset
//! never shows a class-tied glyph at all.

use ndarray::Array2;

/// Number of glyphs kept aside for decorrelated (non class-matching) draws.
pub const RESERVE_GLYPHS: usize = 4;

/// Largest supported class count: the alphabet must cover classes + reserve.
pub const MAX_CLASSES: usize = ALPHABET.len() - RESERVE_GLYPHS;

const ALPHABET: [[&str; 7]; 12] = [
    [
        "..XXX..", //
        ".X...X.", //
        "X.....X", //
        "X.....X", //
        "XXXXXXX", //
        "X.....X", //
        "X.....X",
    ],
    [
        "XXXXXX.", //
        "X.....X", //
        "X.....X", //
        "XXXXXX.", //
        "X.....X", //
        "X.....X", //
        "XXXXXX.",
    ],
    [
        ".XXXXX.", //
        "X.....X", //
        "X......", //
        "X......", //
        "X......", //
        "X.....X", //
        ".XXXXX.",
    ],
    [
        "XXXXX..", //
        "X....X.", //
        "X.....X", //
        "X.....X", //
        "X.....X", //
        "X....X.", //
        "XXXXX..",
    ],
    [
        "XXXXXXX", //
        "X......", //
        "X......", //
        "XXXXX..", //
        "X......", //
        "X......", //
        "XXXXXXX",
    ],
    [
        "XXXXXXX", //
        "X......", //
        "X......", //
        "XXXXX..", //
        "X......", //
        "X......", //
        "X......",
    ],
    [
        "X.....X", //
        "X.....X", //
        "X.....X", //
        "XXXXXXX", //
        "X.....X", //
        "X.....X", //
        "X.....X",
    ],
    [
        "X......", //
        "X......", //
        "X......", //
        "X......", //
        "X......", //
        "X......", //
        "XXXXXXX",
    ],
    [
        "XXXXXX.", //
        "X.....X", //
        "X.....X", //
        "XXXXXX.", //
        "X......", //
        "X......", //
        "X......",
    ],
    [
        "XXXXXXX", //
        "...X...", //
        "...X...", //
        "...X...", //
        "...X...", //
        "...X...", //
        "...X...",
    ],
    [
        "X.....X", //
        "X.....X", //
        "X.....X", //
        "X.....X", //
        "X.....X", //
        "X.....X", //
        ".XXXXX.",
    ],
    [
        "X.....X", //
        ".X...X.", //
        "..X.X..", //
        "...X...", //
        "...X...", //
        "...X...", //
        "...X...",
    ],
];

/// Size of the alphabet.
pub fn alphabet_len() -> usize {
    ALPHABET.len()
}

/// The 7x7 bitmap for a glyph id.
pub fn glyph_bitmap(id: usize) -> Array2<u8> {
    let rows = &ALPHABET[id];
    Array2::from_shape_fn((7, 7), |(y, x)| {
        u8::from(rows[y].as_bytes()[x] == b'X')
    })
}

/// Renders a glyph scaled by an integer factor (nearest-neighbor).
pub fn render_glyph(id: usize, scale: usize) -> Array2<u8> {
    let bmp = glyph_bitmap(id);
    Array2::from_shape_fn((7 * scale, 7 * scale), |(y, x)| bmp[[y / scale, x / scale]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_glyphs_are_seven_by_seven_and_distinct() {
        let mut seen = Vec::new();
        for id in 0..alphabet_len() {
            let g = glyph_bitmap(id);
            assert_eq!(g.dim(), (7, 7));
            assert!(g.iter().any(|&v| v == 1));
            assert!(!seen.contains(&g), "glyph {id} duplicates another");
            seen.push(g);
        }
    }

    #[test]
    fn scaling_repeats_pixels() {
        let g = render_glyph(0, 3);
        assert_eq!(g.dim(), (21, 21));
        let b = glyph_bitmap(0);
        assert_eq!(g[[0, 0]], b[[0, 0]]);
        assert_eq!(g[[20, 20]], b[[6, 6]]);
    }
}
