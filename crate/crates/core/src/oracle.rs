//! Literal, unoptimized transcription of the descriptor algorithm, kept
//! deliberately separate from [`crate::spd`] / [`crate::spdmap`] so the two
//! can be checked against each other.
//!
//! The steps follow the reference pseudo code: an interior-by-contour offset
//! matrix, distances divided by half of their maximum, cumulative
//! `r <= edge` counting for the radius ring, `1 + floor(theta / width)` for
//! the angle sector, then counting and dividing by the contour size.

use std::f64::consts::PI;

use crate::ingest::InstanceMap;

/// Where the distance maximum is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaxOver {
    /// Whole interior x contour matrix (`torch.max(rarray)`).
    Matrix,
    /// Each interior point's own row.
    Row,
}

/// Descriptor rows for every interior point `p` of one instance.
pub fn instance_descriptors(
    interior: &[(f64, f64)],
    contour: &[(f64, f64)],
    rbins: &[f64],
    tbins: usize,
    max_over: MaxOver,
) -> Vec<Vec<f64>> {
    let m = rbins.len();
    // 1. offsets
    let xdis: Vec<Vec<f64>> = interior
        .iter()
        .map(|p| contour.iter().map(|c| p.0 - c.0).collect())
        .collect();
    let ydis: Vec<Vec<f64>> = interior
        .iter()
        .map(|p| contour.iter().map(|c| p.1 - c.1).collect())
        .collect();
    // 2. distances, normalized by max / 2
    let mut rarray: Vec<Vec<f64>> = xdis
        .iter()
        .zip(&ydis)
        .map(|(xr, yr)| xr.iter().zip(yr).map(|(x, y)| (x * x + y * y).sqrt()).collect())
        .collect();
    let global_max = rarray.iter().flatten().copied().fold(0.0, f64::max);
    for row in rarray.iter_mut() {
        let mx = match max_over {
            MaxOver::Matrix => global_max,
            MaxOver::Row => row.iter().copied().fold(0.0, f64::max),
        };
        for v in row.iter_mut() {
            *v /= mx / 2.0;
        }
    }
    // 3. cumulative radius counts
    let mut rq = vec![vec![0usize; contour.len()]; interior.len()];
    for &r in rbins {
        for (qrow, rrow) in rq.iter_mut().zip(&rarray) {
            for (q, &v) in qrow.iter_mut().zip(rrow) {
                *q += (v <= r) as usize;
            }
        }
    }
    // 4. angles in [0, 2π)
    let tarray: Vec<Vec<f64>> = xdis
        .iter()
        .zip(&ydis)
        .map(|(xr, yr)| {
            xr.iter()
                .zip(yr)
                .map(|(x, y)| {
                    let t = x.atan2(-y);
                    t + 2.0 * PI * ((t < 0.0) as u8 as f64)
                })
                .collect()
        })
        .collect();
    // 5. 1-based angle sectors
    let tq: Vec<Vec<usize>> = tarray
        .iter()
        .map(|row| {
            row.iter()
                .map(|t| 1 + (t / (2.0 * PI / tbins as f64)).floor() as usize)
                .collect()
        })
        .collect();
    // 6. count and normalize
    let mut out = vec![vec![0.0; m * tbins]; interior.len()];
    for (i, row) in out.iter_mut().enumerate() {
        if rarray[i].iter().any(|v| v.is_nan()) {
            // zero distance maximum
            continue;
        }
        for j in 0..contour.len() {
            if rq[i][j] == 0 {
                continue;
            }
            let ring = m - rq[i][j];
            let sector = (tq[i][j] - 1).min(tbins - 1);
            row[ring * tbins + sector] += 1.0;
        }
        for v in row.iter_mut() {
            *v /= contour.len() as f64;
        }
    }
    out
}

/// Pixels of `id` that have an 8-neighbour with another ID or sit on the border.
pub fn contour_pixels(inst: &InstanceMap, id: u32) -> Vec<(usize, usize)> {
    let (w, h) = (inst.width() as isize, inst.height() as isize);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if inst.get(x as usize, y as usize) != id {
                continue;
            }
            let mut edge = false;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w || ny >= h || inst.get(nx as usize, ny as usize) != id {
                        edge = true;
                    }
                }
            }
            if edge {
                out.push((x as usize, y as usize));
            }
        }
    }
    out
}

/// Dense `H x W x (m * n)` map built instance by instance.
pub fn dense_map(inst: &InstanceMap, rbins: &[f64], tbins: usize, max_over: MaxOver) -> Vec<f64> {
    let bins = rbins.len() * tbins;
    let (w, h) = (inst.width(), inst.height());
    let mut g = vec![0.0; w * h * bins];
    let mut ids: Vec<u32> = inst.ids().iter().copied().filter(|&i| i != 0).collect();
    ids.sort_unstable();
    ids.dedup();
    for id in ids {
        let interior: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| inst.get(x, y) == id)
            .collect();
        let contour = contour_pixels(inst, id);
        let as_f = |v: &[(usize, usize)]| v.iter().map(|&(x, y)| (x as f64, y as f64)).collect::<Vec<_>>();
        let rows = instance_descriptors(&as_f(&interior), &as_f(&contour), rbins, tbins, max_over);
        for (&(x, y), row) in interior.iter().zip(rows) {
            let dst = (y * w + x) * bins;
            g[dst..dst + bins].copy_from_slice(&row);
        }
    }
    g
}
