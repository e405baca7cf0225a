use rand::Rng as _;

use super::{ImageGrid, SliceTriple};
use crate::rng::Rng;

/// Reverses the column order of every row.
pub fn hflip(grid: &ImageGrid) -> ImageGrid {
    let (h, w) = grid.dims();
    let mut values = Vec::with_capacity(h * w);
    for row in grid.values().chunks_exact(w) {
        values.extend(row.iter().rev());
    }
    ImageGrid::new(h, w, values, grid.range()).expect("flip preserves shape and range")
}

/// Translates by (`dr`, `dc`) pixels, filling uncovered pixels with `fill`.
pub fn shift(grid: &ImageGrid, dr: isize, dc: isize, fill: f32) -> ImageGrid {
    let (h, w) = grid.dims();
    let mut values = vec![fill; h * w];
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = (r as isize - dr, c as isize - dc);
            if (0..h as isize).contains(&sr) && (0..w as isize).contains(&sc) {
                values[r * w + c] = grid.get(sr as usize, sc as usize);
            }
        }
    }
    ImageGrid::new(h, w, values, grid.range()).expect("shift preserves shape and range")
}

/// Flips pre, gtv and post together with probability 0.5. Returns the
/// (possibly flipped) triple and whether the flip happened.
pub fn augment_triple(triple: &SliceTriple, rng: &mut Rng) -> (SliceTriple, bool) {
    if rng.random_bool(0.5) {
        let flipped = SliceTriple {
            pre: hflip(&triple.pre),
            gtv: hflip(&triple.gtv),
            post: hflip(&triple.post),
        };
        (flipped, true)
    } else {
        (triple.clone(), false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn grid(h: usize, w: usize, values: Vec<f32>) -> ImageGrid {
        ImageGrid::intensity(h, w, values).unwrap()
    }

    #[test]
    fn flips_columns() {
        let g = grid(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!(hflip(&g).values(), &[0.3, 0.2, 0.1, 0.6, 0.5, 0.4]);
    }

    #[test]
    fn column_symmetric_grid_is_fixed() {
        let g = grid(2, 3, vec![0.1, 0.2, 0.1, -0.4, 0.5, -0.4]);
        assert_eq!(hflip(&g), g);
    }

    #[test]
    fn triple_members_flip_jointly() {
        let pre = grid(1, 3, vec![0.1, 0.2, 0.3]);
        let post = grid(1, 3, vec![0.4, 0.5, 0.6]);
        let gtv = ImageGrid::mask(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let triple = SliceTriple::new(pre, gtv, post).unwrap();
        let mut rng = stream(3, &["aug"]);
        let (mut flips, mut keeps) = (0, 0);
        for _ in 0..200 {
            let (t, flipped) = augment_triple(&triple, &mut rng);
            let consistent = t.pre == hflip(&triple.pre)
                && t.gtv == hflip(&triple.gtv)
                && t.post == hflip(&triple.post);
            if flipped {
                assert!(consistent);
                flips += 1;
            } else {
                assert_eq!(t, triple);
                keeps += 1;
            }
        }
        assert!(flips > 60 && keeps > 60, "flips {flips} keeps {keeps}");
    }

    proptest! {
        #[test]
        fn flip_is_an_involution_and_a_permutation(
            h in 1usize..8,
            w in 1usize..8,
            seed in any::<u64>(),
        ) {
            use rand::Rng as _;
            let mut rng = stream(seed, &["prop"]);
            let values: Vec<f32> = (0..h * w).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let g = grid(h, w, values);
            let f = hflip(&g);
            prop_assert_eq!(hflip(&f), g.clone());
            let mut a = g.values().to_vec();
            let mut b = f.values().to_vec();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            prop_assert_eq!(a, b);

            let mask: Vec<f32> = (0..h * w).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
            let m = ImageGrid::mask(h, w, mask).unwrap();
            prop_assert_eq!(hflip(&m).count_nonzero(), m.count_nonzero());
        }
    }
}
