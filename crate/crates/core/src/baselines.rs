//! Reference nowcasts: Eulerian persistence and block-matching motion with semi-Lagrangian advection.
//!
//! Displacements are in pixels per frame step; `u` runs along columns and `v` along rows.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gridio::{GridFrame, CADENCE_S};

pub const DEFAULT_BLOCK: usize = 16;
pub const DEFAULT_SEARCH_RADIUS: usize = 8;
/// Blocks whose best correlation falls below this inherit a neighbour median.
pub const MIN_CORRELATION: f64 = 0.3;
const MIN_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionParams {
    pub block: usize,
    pub search_radius: usize,
}

impl Default for MotionParams {
    fn default() -> Self {
        MotionParams { block: DEFAULT_BLOCK, search_radius: DEFAULT_SEARCH_RADIUS }
    }
}

/// Per-pixel displacement field.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    pub rows: usize,
    pub cols: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl MotionField {
    pub fn uniform(rows: usize, cols: usize, u: f64, v: f64) -> Self {
        MotionField { rows, cols, u: vec![u; rows * cols], v: vec![v; rows * cols] }
    }

    pub fn zero(rows: usize, cols: usize) -> Self {
        Self::uniform(rows, cols, 0.0, 0.0)
    }
}

/// `n` copies of `last`, stamped at the following cadence steps.
pub fn persistence(last: &GridFrame, n: usize) -> Vec<GridFrame> {
    (1..=n as i64).map(|k| GridFrame { timestamp: last.timestamp + k * CADENCE_S, ..last.clone() }).collect()
}

fn valued(frame: &GridFrame) -> Vec<f64> {
    frame.values.iter().map(|&x| if frame.is_nodata(x) { 0.0 } else { x as f64 }).collect()
}

/// Block estimate: `Some((u, v))` for a trusted block.
type BlockEstimate = Option<(f64, f64)>;

fn match_block(
    a: &[f64],
    b: &[f64],
    rows: usize,
    cols: usize,
    r0: usize,
    c0: usize,
    p: &MotionParams,
    order: &[(i64, i64)],
) -> BlockEstimate {
    let r1 = (r0 + p.block).min(rows);
    let c1 = (c0 + p.block).min(cols);
    let area = (r1 - r0) * (c1 - c0);
    let mut best: Option<(f64, i64, i64)> = None;
    for &(dv, du) in order {
        let (mut n, mut sa, mut sb) = (0usize, 0.0, 0.0);
        let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
        for r in r0..r1 {
            let rb = r as i64 + dv;
            if rb < 0 || rb >= rows as i64 {
                continue;
            }
            for c in c0..c1 {
                let cb = c as i64 + du;
                if cb < 0 || cb >= cols as i64 {
                    continue;
                }
                let x = a[r * cols + c];
                let y = b[rb as usize * cols + cb as usize];
                n += 1;
                sa += x;
                sb += y;
                saa += x * x;
                sbb += y * y;
                sab += x * y;
            }
        }
        if 2 * n < area || n == 0 {
            continue;
        }
        let nf = n as f64;
        let va = saa - sa * sa / nf;
        let vb = sbb - sb * sb / nf;
        if va <= MIN_VARIANCE * nf || vb <= MIN_VARIANCE * nf {
            continue;
        }
        let ncc = (sab - sa * sb / nf) / (va * vb).sqrt();
        if best.is_none_or(|(b, _, _)| ncc > b) {
            best = Some((ncc, dv, du));
        }
    }
    match best {
        Some((ncc, dv, du)) if ncc >= MIN_CORRELATION => Some((du as f64, dv as f64)),
        _ => None,
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Block displacements for one frame pair, untrusted blocks filled from trusted 8-neighbours.
fn pair_blocks(a: &[f64], b: &[f64], rows: usize, cols: usize, p: &MotionParams) -> (usize, usize, Vec<(f64, f64)>) {
    let br = rows.div_ceil(p.block);
    let bc = cols.div_ceil(p.block);
    let r = p.search_radius as i64;
    let mut order: Vec<(i64, i64)> = (-r..=r).flat_map(|dv| (-r..=r).map(move |du| (dv, du))).collect();
    order.sort_by_key(|&(dv, du)| (dv * dv + du * du, dv, du));
    let raw: Vec<BlockEstimate> =
        (0..br * bc).into_par_iter().map(|i| match_block(a, b, rows, cols, (i / bc) * p.block, (i % bc) * p.block, p, &order)).collect();
    let filled = (0..br * bc)
        .map(|i| {
            if let Some(d) = raw[i] {
                return d;
            }
            let (bi, bj) = ((i / bc) as i64, (i % bc) as i64);
            let mut us = Vec::new();
            let mut vs = Vec::new();
            for di in -1..=1 {
                for dj in -1..=1 {
                    let (ni, nj) = (bi + di, bj + dj);
                    if (di, dj) == (0, 0) || ni < 0 || nj < 0 || ni >= br as i64 || nj >= bc as i64 {
                        continue;
                    }
                    if let Some((u, v)) = raw[ni as usize * bc + nj as usize] {
                        us.push(u);
                        vs.push(v);
                    }
                }
            }
            if us.is_empty() {
                (0.0, 0.0)
            } else {
                (median(us), median(vs))
            }
        })
        .collect();
    (br, bc, filled)
}

/// Bilinear interpolation between block centres, clamped at the outer centres.
fn interpolate_blocks(br: usize, bc: usize, blocks: &[(f64, f64)], rows: usize, cols: usize, block: usize) -> MotionField {
    let coord = |p: usize, nb: usize| -> (usize, usize, f64) {
        let x = ((p as f64 - (block as f64 - 1.0) / 2.0) / block as f64).clamp(0.0, (nb - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(nb - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut field = MotionField::zero(rows, cols);
    for r in 0..rows {
        let (i0, i1, fy) = coord(r, br);
        for c in 0..cols {
            let (j0, j1, fx) = coord(c, bc);
            let at = |i: usize, j: usize| blocks[i * bc + j];
            let mix = |pick: fn((f64, f64)) -> f64| {
                let top = pick(at(i0, j0)) * (1.0 - fx) + pick(at(i0, j1)) * fx;
                let bot = pick(at(i1, j0)) * (1.0 - fx) + pick(at(i1, j1)) * fx;
                top * (1.0 - fy) + bot * fy
            };
            field.u[r * cols + c] = mix(|d| d.0);
            field.v[r * cols + c] = mix(|d| d.1);
        }
    }
    field
}

/// Block-matching motion from consecutive frame pairs, averaged over pairs.
pub fn estimate_motion(frames: &[GridFrame], params: &MotionParams) -> Result<MotionField> {
    if frames.len() < 2 {
        return Err(Error::Argument(format!("motion needs at least 2 frames, got {}", frames.len())));
    }
    if params.block == 0 {
        return Err(Error::Argument("motion block size must be positive".into()));
    }
    let (rows, cols) = frames[0].shape();
    if let Some(f) = frames.iter().find(|f| f.shape() != (rows, cols)) {
        return Err(Error::Argument(format!("motion frames disagree in shape: {rows}x{cols} vs {}x{}", f.rows, f.cols)));
    }
    let vals: Vec<Vec<f64>> = frames.iter().map(valued).collect();
    let pairs = vals.len() - 1;
    let mut acc: Vec<(f64, f64)> = Vec::new();
    let (mut br, mut bc) = (0, 0);
    for w in vals.windows(2) {
        let (nr, nc, blocks) = pair_blocks(&w[0], &w[1], rows, cols, params);
        (br, bc) = (nr, nc);
        if acc.is_empty() {
            acc = blocks;
        } else {
            for (a, b) in acc.iter_mut().zip(blocks) {
                a.0 += b.0;
                a.1 += b.1;
            }
        }
    }
    for a in &mut acc {
        a.0 /= pairs as f64;
        a.1 /= pairs as f64;
    }
    Ok(interpolate_blocks(br, bc, &acc, rows, cols, params.block))
}

/// Backward semi-Lagrangian advection: step k samples `frame` at x − k·d(x).
///
/// Bilinear sampling; out-of-domain and nodata neighbours contribute 0, except that a sample
/// landing exactly on a pixel copies it verbatim.
pub fn extrapolate(frame: &GridFrame, motion: &MotionField, n: usize) -> Result<Vec<GridFrame>> {
    let (rows, cols) = frame.shape();
    if (motion.rows, motion.cols) != (rows, cols) {
        return Err(Error::Argument(format!("motion field {}x{} does not match frame {rows}x{cols}", motion.rows, motion.cols)));
    }
    if motion.u.iter().chain(&motion.v).any(|x| !x.is_finite()) {
        return Err(Error::Numeric("motion field is not finite".into()));
    }
    let sample = |y: f64, x: f64| -> f32 {
        let r0 = y.floor();
        let c0 = x.floor();
        let (fy, fx) = (y - r0, x - c0);
        if fy == 0.0 && fx == 0.0 {
            if r0 < 0.0 || c0 < 0.0 || r0 >= rows as f64 || c0 >= cols as f64 {
                return 0.0;
            }
            return frame.values[r0 as usize * cols + c0 as usize];
        }
        let mut acc = 0.0f64;
        for (dr, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            for (dc, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                let w = wy * wx;
                let (r, c) = (r0 + dr, c0 + dc);
                if w == 0.0 || r < 0.0 || c < 0.0 || r >= rows as f64 || c >= cols as f64 {
                    continue;
                }
                let v = frame.values[r as usize * cols + c as usize];
                if !frame.is_nodata(v) {
                    acc += w * v as f64;
                }
            }
        }
        acc as f32
    };
    Ok((1..=n)
        .into_par_iter()
        .map(|k| {
            let kf = k as f64;
            let values = (0..rows * cols)
                .map(|i| {
                    let (r, c) = ((i / cols) as f64, (i % cols) as f64);
                    sample(r - kf * motion.v[i], c - kf * motion.u[i])
                })
                .collect();
            GridFrame { timestamp: frame.timestamp + k as i64 * CADENCE_S, values, ..frame.clone() }
        })
        .collect())
}

/// Motion from `inputs`, then advection of the last input.
pub fn advection_nowcast(inputs: &[GridFrame], params: &MotionParams, n: usize) -> Result<Vec<GridFrame>> {
    let motion = estimate_motion(inputs, params)?;
    extrapolate(inputs.last().expect("estimate_motion checked length"), &motion, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridio::Variable;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f32) -> GridFrame {
        let values = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        GridFrame::new(Variable::RainMmh, 0, rows, cols, values).unwrap()
    }

    fn texture(seed: u64, rows: usize, cols: usize) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..rows * cols).map(|_| rng.gen_range(0.0..10.0)).collect()
    }

    /// b(r, c) = a(r − dv, c − du), with fresh texture entering at the borders.
    fn shifted_pair(seed: u64, rows: usize, cols: usize, dv: i64, du: i64) -> (GridFrame, GridFrame) {
        let big = texture(seed, rows + 40, cols + 40);
        let at = |r: i64, c: i64| big[((r + 20) * (cols as i64 + 40) + c + 20) as usize];
        let a = frame(rows, cols, |r, c| at(r as i64, c as i64));
        let b = frame(rows, cols, |r, c| at(r as i64 - dv, c as i64 - du));
        (a, b)
    }

    #[test]
    fn persistence_copies_with_advancing_timestamps() {
        let f = frame(4, 4, |r, c| (r * c) as f32);
        let out = persistence(&f, 18);
        assert_eq!(out.len(), 18);
        for (k, o) in out.iter().enumerate() {
            assert_eq!(o.values, f.values);
            assert_eq!(o.timestamp, (k as i64 + 1) * 300);
        }
    }

    #[test]
    fn recovers_integer_shift_exactly() {
        let (a, b) = shifted_pair(1, 64, 64, 2, 3);
        let m = estimate_motion(&[a, b], &MotionParams::default()).unwrap();
        assert!(m.u.iter().all(|&u| u == 3.0));
        assert!(m.v.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn recovers_shifts_up_to_search_radius() {
        for (i, (dv, du)) in [(-8, 0), (5, -7), (0, 8), (-3, -3)].into_iter().enumerate() {
            let (a, b) = shifted_pair(10 + i as u64, 48, 48, dv, du);
            let m = estimate_motion(&[a, b], &MotionParams::default()).unwrap();
            assert!(m.u.iter().all(|&u| u == du as f64), "{dv},{du}");
            assert!(m.v.iter().all(|&v| v == dv as f64), "{dv},{du}");
        }
    }

    #[test]
    fn identical_and_empty_frames_give_zero_motion() {
        let a = frame(32, 32, |r, c| ((r * 7 + c * 3) % 11) as f32);
        let m = estimate_motion(&[a.clone(), a.clone(), a], &MotionParams::default()).unwrap();
        assert_eq!(m, MotionField::zero(32, 32));
        let z = frame(32, 32, |_, _| 0.0);
        let m = estimate_motion(&[z.clone(), z], &MotionParams::default()).unwrap();
        assert_eq!(m, MotionField::zero(32, 32));
    }

    #[test]
    fn empty_block_inherits_neighbour_median() {
        // texture everywhere except the top-left block
        let (a, b) = shifted_pair(3, 48, 48, 1, -2);
        let blank = |f: &GridFrame| frame(48, 48, |r, c| if r < 16 && c < 16 { 0.0 } else { f.get(r, c) });
        let m = estimate_motion(&[blank(&a), blank(&b)], &MotionParams::default()).unwrap();
        assert_eq!((m.u[0], m.v[0]), (-2.0, 1.0));
    }

    #[test]
    fn shape_mismatch_is_argument_error() {
        let a = frame(8, 8, |_, _| 1.0);
        let b = frame(8, 9, |_, _| 1.0);
        assert!(matches!(estimate_motion(&[a.clone(), b], &MotionParams::default()), Err(Error::Argument(_))));
        assert!(matches!(estimate_motion(&[a], &MotionParams::default()), Err(Error::Argument(_))));
    }

    #[test]
    fn zero_motion_is_bitwise_persistence() {
        let mut f = frame(16, 16, |r, c| (r as f32).sin() + 1.0 + c as f32 * 0.1);
        f.values[5] = f.nodata;
        let out = extrapolate(&f, &MotionField::zero(16, 16), 18).unwrap();
        assert_eq!(out, persistence(&f, 18));
    }

    #[test]
    fn integer_motion_is_exact_shift() {
        let f = frame(12, 12, |r, c| (r * 12 + c) as f32 + 1.0);
        let out = extrapolate(&f, &MotionField::uniform(12, 12, 1.0, 0.0), 18).unwrap();
        for (k, o) in out.iter().enumerate() {
            let k = k + 1;
            for r in 0..12 {
                for c in 0..12 {
                    let want = if c >= k { f.get(r, c - k) } else { 0.0 };
                    assert_eq!(o.get(r, c), want);
                }
            }
        }
    }

    #[test]
    fn blob_centroid_tracks_motion() {
        let (r0, c0, s) = (20.0, 16.0, 2.5);
        let f = frame(64, 64, |r, c| {
            let d2 = (r as f64 - r0).powi(2) + (c as f64 - c0).powi(2);
            (10.0 * (-d2 / (2.0 * s * s)).exp()) as f32
        });
        let (u, v) = (1.3, 0.7);
        let out = extrapolate(&f, &MotionField::uniform(64, 64, u, v), 18).unwrap();
        let mass0: f64 = f.values.iter().map(|&x| x as f64).sum();
        for (k, o) in out.iter().enumerate() {
            let k = (k + 1) as f64;
            let (mut m, mut mr, mut mc) = (0.0, 0.0, 0.0);
            for r in 0..64 {
                for c in 0..64 {
                    let x = o.get(r, c) as f64;
                    m += x;
                    mr += x * r as f64;
                    mc += x * c as f64;
                }
            }
            assert!((mr / m - (r0 + k * v)).abs() < 0.5);
            assert!((mc / m - (c0 + k * u)).abs() < 0.5);
            // uniform bilinear shift redistributes each pixel with weights summing to 1
            assert!((m - mass0).abs() / mass0 < 1e-6, "{k}: {m} vs {mass0}");
        }
    }
}
