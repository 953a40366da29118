//! Connected-component labeling on 2-D frames and 3-D volumes.

use std::collections::VecDeque;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity2 {
    Four,
    Eight,
}

const N4: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
const N8: [(isize, isize); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];

fn offsets(c: Connectivity2) -> &'static [(isize, isize)] {
    match c {
        Connectivity2::Four => &N4,
        Connectivity2::Eight => &N8,
    }
}

/// Pixels of `mask` reachable from the frame border through `mask` pixels.
pub fn flood_from_border(mask: &[bool], width: usize, height: usize, conn: Connectivity2) -> Vec<bool> {
    assert_eq!(mask.len(), width * height);
    let mut out = vec![false; mask.len()];
    let mut queue = VecDeque::new();
    let push = |x: usize, y: usize, out: &mut Vec<bool>, queue: &mut VecDeque<usize>| {
        let i = x + width * y;
        if mask[i] && !out[i] {
            out[i] = true;
            queue.push_back(i);
        }
    };
    for x in 0..width {
        push(x, 0, &mut out, &mut queue);
        push(x, height - 1, &mut out, &mut queue);
    }
    for y in 0..height {
        push(0, y, &mut out, &mut queue);
        push(width - 1, y, &mut out, &mut queue);
    }
    let offs = offsets(conn);
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % width) as isize, (i / width) as isize);
        for &(dx, dy) in offs {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                continue;
            }
            push(nx as usize, ny as usize, &mut out, &mut queue);
        }
    }
    out
}

/// Connected components of a 2-D mask as lists of pixel indices, in raster
/// order of each component's first pixel.
pub fn components_2d(mask: &[bool], width: usize, height: usize, conn: Connectivity2) -> Vec<Vec<usize>> {
    assert_eq!(mask.len(), width * height);
    let mut seen = vec![false; mask.len()];
    let mut comps = Vec::new();
    let offs = offsets(conn);
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (x, y) = ((i % width) as isize, (i / width) as isize);
            for &(dx, dy) in offs {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                    continue;
                }
                let j = nx as usize + width * ny as usize;
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// 26-connected components of a 3-D mask, as sorted voxel index lists.
pub fn components_3d(mask: &[bool], dims: [usize; 3]) -> Vec<Vec<usize>> {
    let [nx, ny, nz] = dims;
    assert_eq!(mask.len(), nx * ny * nz);
    let mut seen = vec![false; mask.len()];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            comp.push(i);
            let x = (i % nx) as isize;
            let y = ((i / nx) % ny) as isize;
            let z = (i / (nx * ny)) as isize;
            for dz in -1..=1isize {
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        if dx == 0 && dy == 0 && dz == 0 {
                            continue;
                        }
                        let (a, b, c) = (x + dx, y + dy, z + dz);
                        if a < 0 || b < 0 || c < 0 || a >= nx as isize || b >= ny as isize || c >= nz as isize {
                            continue;
                        }
                        let j = a as usize + nx * (b as usize + ny * c as usize);
                        if mask[j] && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}
