//! Quadtree index arithmetic linking adjacent stage resolutions.

use crate::error::{Error, Result};

/// Children of coarse pixel (i, j) on the next-finer grid: {(2i+a, 2j+b)}.
pub fn quad_children(i: usize, j: usize, h: usize, w: usize) -> Result<[(usize, usize); 4]> {
    if i >= h || j >= w {
        return Err(Error::contract(format!(
            "quad_children: ({i}, {j}) outside {h}x{w} grid"
        )));
    }
    Ok([
        (2 * i, 2 * j),
        (2 * i, 2 * j + 1),
        (2 * i + 1, 2 * j),
        (2 * i + 1, 2 * j + 1),
    ])
}

/// Parent of fine pixel (i, j) on the next-coarser grid.
pub fn quad_parent(i: usize, j: usize) -> (usize, usize) {
    (i / 2, j / 2)
}

/// Flat parent index for every fine pixel, fine grid 2h x 2w over parent h x w.
pub fn parent_index_map(h: usize, w: usize) -> Vec<usize> {
    let (fh, fw) = (2 * h, 2 * w);
    let mut idx = Vec::with_capacity(fh * fw);
    for y in 0..fh {
        for x in 0..fw {
            let (pi, pj) = quad_parent(y, x);
            idx.push(pi * w + pj);
        }
    }
    idx
}

/// Flat fine-grid indices of a flat parent index on an h x w parent grid.
pub fn children_flat_indices(parent_flat: usize, h: usize, w: usize) -> Result<[usize; 4]> {
    let (i, j) = (parent_flat / w, parent_flat % w);
    let kids = quad_children(i, j, h, w)?;
    let fw = 2 * w;
    Ok(kids.map(|(y, x)| y * fw + x))
}

/// Downsample a binary mask by majority vote over each quad; ties go to
/// corrupted (0).
pub fn downsample_majority(mask: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if h % 2 != 0 || w % 2 != 0 || mask.len() != h * w {
        return Err(Error::contract(format!(
            "downsample_majority: mask length {} for even grid {h}x{w}",
            mask.len()
        )));
    }
    let (ch, cw) = (h / 2, w / 2);
    let mut out = vec![0.0; ch * cw];
    for i in 0..ch {
        for j in 0..cw {
            let ones: usize = quad_children(i, j, ch, cw)?
                .iter()
                .filter(|(y, x)| mask[y * w + x] == 1.0)
                .count();
            out[i * cw + j] = if ones >= 3 { 1.0 } else { 0.0 };
        }
    }
    Ok(out)
}
