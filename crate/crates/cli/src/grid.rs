//! Six-panel comparison grid.
//!
//! Panels, left to right: reference, masked input, ground truth, in-painted
//! image, ground-truth eye region, in-painted eye region. Every tile is
//! `S x S` for an `S x S` input; the eye-region crops (`S/2 x S`) are
//! centred vertically on a black tile. The grid is `6S` wide and `S` high.

use exgan_core::data::EyeAnnotation;
use exgan_core::masking::{extract_local, LocalSpec};
use exgan_core::{Result, Tensor};

pub const PANELS: usize = 6;

fn paste(grid: &mut Tensor, tile: &Tensor, slot: usize, size: usize) {
    let (_, th, tw) = tile.dims3();
    let (_, gh, gw) = grid.dims3();
    let y0 = (size - th) / 2;
    let x0 = slot * size + (size - tw) / 2;
    let src = tile.data().to_vec();
    let dst = grid.data_mut();
    for c in 0..3 {
        for y in 0..th {
            for x in 0..tw {
                dst[c * gh * gw + (y0 + y) * gw + x0 + x] = src[c * th * tw + y * tw + x];
            }
        }
    }
}

pub fn comparison_grid(
    reference: &Tensor,
    masked_input: &Tensor,
    ground_truth: &Tensor,
    inpainted: &Tensor,
    annotation: &EyeAnnotation,
) -> Result<Tensor> {
    let (_, s, _) = ground_truth.dims3();
    let local = LocalSpec::for_image_size(s);
    let padding = local.padding_for(annotation);
    let out = (local.out_height, local.out_width);
    let gt_local = extract_local(ground_truth, annotation, padding, out)?.crop;
    let in_local = extract_local(inpainted, annotation, padding, out)?.crop;
    let mut grid = Tensor::zeros(&[3, s, PANELS * s]);
    for (slot, tile) in [reference, masked_input, ground_truth, inpainted, &gt_local, &in_local]
        .into_iter()
        .enumerate()
    {
        paste(&mut grid, tile, slot, s);
    }
    Ok(grid)
}
