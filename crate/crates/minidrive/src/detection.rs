//! Center-point box codec on the 32x32 planning grid: Gaussian heatmaps with
//! exact unit peaks, size/offset regression normalized by 2 m, and yaw split
//! into twelve 30-degree bins plus an in-bin offset. Targets are kept in f64
//! so encode -> decode is exact to well under 1e-9.

use crate::geom::{wrap_angle, Vec2};

pub const DET_N: usize = 32;
pub const DET_CELL: f64 = 0.5;
pub const DET_RANGE: f64 = 16.0;
pub const DET_HALF: f64 = 8.0;
pub const YAW_BINS: usize = 12;
pub const REG_CH: usize = 5;
/// Meters per regression unit.
pub const REG_NORM: f64 = 2.0;
pub const BIN_WIDTH: f64 = std::f64::consts::TAU / YAW_BINS as f64;

/// An oriented box in the ego frame (x forward, y left), half.x along yaw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetBox {
    pub center: Vec2,
    pub half: Vec2,
    pub yaw: f64,
}

#[derive(Clone, Debug)]
pub struct DetTargets {
    pub heat: Vec<f64>,
    /// Row-major [DET_N, DET_N, REG_CH]: half-x, half-y, offset-x, offset-y
    /// (all /REG_NORM), yaw offset in radians.
    pub reg: Vec<f64>,
    pub bin: Vec<u8>,
    /// True at exact box-center cells; regression loss applies only there.
    pub mask: Vec<bool>,
}

/// Grid cell of an ego-frame point: row 0 is the far edge, col 0 the left
/// edge. Returns None outside the forward 16 m x (+-8 m) window.
pub fn cell_of(p: Vec2) -> Option<(usize, usize)> {
    if p.x < 0.0 || p.x >= DET_RANGE || p.y <= -DET_HALF || p.y > DET_HALF {
        return None;
    }
    let row = ((DET_RANGE - p.x) / DET_CELL).floor() as usize;
    let col = ((DET_HALF - p.y) / DET_CELL).floor() as usize;
    Some((row.min(DET_N - 1), col.min(DET_N - 1)))
}

pub fn cell_center(row: usize, col: usize) -> Vec2 {
    Vec2::new(
        DET_RANGE - (row as f64 + 0.5) * DET_CELL,
        DET_HALF - (col as f64 + 0.5) * DET_CELL,
    )
}

/// Yaw in [0, 2pi) -> (bin, offset from bin center in [-15deg, +15deg)).
pub fn yaw_to_bin(yaw: f64) -> (u8, f64) {
    let mut a = wrap_angle(yaw);
    if a < 0.0 {
        a += std::f64::consts::TAU;
    }
    let bin = ((a / BIN_WIDTH).floor() as usize).min(YAW_BINS - 1);
    let center = (bin as f64 + 0.5) * BIN_WIDTH;
    (bin as u8, a - center)
}

pub fn bin_to_yaw(bin: u8, offset: f64) -> f64 {
    wrap_angle((bin as f64 + 0.5) * BIN_WIDTH + offset)
}

pub fn encode(boxes: &[DetBox]) -> DetTargets {
    let mut t = DetTargets {
        heat: vec![0.0; DET_N * DET_N],
        reg: vec![0.0; DET_N * DET_N * REG_CH],
        bin: vec![0; DET_N * DET_N],
        mask: vec![false; DET_N * DET_N],
    };
    for b in boxes {
        let Some((row, col)) = cell_of(b.center) else { continue };
        let diag_cells = 2.0 * b.half.norm() / DET_CELL;
        let sigma = (diag_cells / 6.0).max(1.0);
        let reach = (3.0 * sigma).ceil() as i64;
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let (r, c) = (row as i64 + dr, col as i64 + dc);
                if r < 0 || r >= DET_N as i64 || c < 0 || c >= DET_N as i64 {
                    continue;
                }
                let v = (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp();
                let idx = r as usize * DET_N + c as usize;
                t.heat[idx] = t.heat[idx].max(v);
            }
        }
        let idx = row * DET_N + col;
        t.heat[idx] = 1.0;
        t.mask[idx] = true;
        let cc = cell_center(row, col);
        let (bin, dyaw) = yaw_to_bin(b.yaw);
        t.bin[idx] = bin;
        let r = &mut t.reg[idx * REG_CH..(idx + 1) * REG_CH];
        r[0] = b.half.x / REG_NORM;
        r[1] = b.half.y / REG_NORM;
        r[2] = (b.center.x - cc.x) / REG_NORM;
        r[3] = (b.center.y - cc.y) / REG_NORM;
        r[4] = dyaw;
    }
    t
}

/// Peak extraction: 3x3 local maxima (ties count) above `thresh`, strongest
/// first, at most `max_k`. `bin_logits` is [DET_N, DET_N, YAW_BINS].
pub fn decode(
    heat: &[f64],
    reg: &[f64],
    bin_logits: &[f64],
    thresh: f64,
    max_k: usize,
) -> Vec<(DetBox, f64)> {
    assert_eq!(heat.len(), DET_N * DET_N);
    assert_eq!(reg.len(), DET_N * DET_N * REG_CH);
    assert_eq!(bin_logits.len(), DET_N * DET_N * YAW_BINS);
    let mut peaks: Vec<(usize, usize, f64)> = Vec::new();
    for row in 0..DET_N {
        for col in 0..DET_N {
            let v = heat[row * DET_N + col];
            if v < thresh {
                continue;
            }
            let mut is_max = true;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (r, c) = (row as i64 + dr, col as i64 + dc);
                    if r < 0 || r >= DET_N as i64 || c < 0 || c >= DET_N as i64 {
                        continue;
                    }
                    if heat[r as usize * DET_N + c as usize] > v {
                        is_max = false;
                    }
                }
            }
            if is_max {
                peaks.push((row, col, v));
            }
        }
    }
    peaks.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then((a.0, a.1).cmp(&(b.0, b.1))));
    peaks
        .into_iter()
        .take(max_k)
        .map(|(row, col, score)| {
            let idx = row * DET_N + col;
            let r = &reg[idx * REG_CH..(idx + 1) * REG_CH];
            let logits = &bin_logits[idx * YAW_BINS..(idx + 1) * YAW_BINS];
            let bin = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i as u8)
                .unwrap();
            let cc = cell_center(row, col);
            (
                DetBox {
                    center: Vec2::new(cc.x + r[2] * REG_NORM, cc.y + r[3] * REG_NORM),
                    half: Vec2::new(r[0] * REG_NORM, r[1] * REG_NORM),
                    yaw: bin_to_yaw(bin, r[4]),
                },
                score,
            )
        })
        .collect()
}

/// One-hot logits matching the target bins, for codec round-trip checks.
pub fn bins_as_logits(bins: &[u8]) -> Vec<f64> {
    let mut out = vec![0.0; bins.len() * YAW_BINS];
    for (i, &b) in bins.iter().enumerate() {
        out[i * YAW_BINS + b as usize] = 1.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_mapping_matches_quarter_meter_example() {
        // 4 m ahead, 2 m left on the 0.25 m grid is row 48 / col 24; on this
        // 0.5 m grid the same point lands at row 24 / col 12.
        assert_eq!(cell_of(Vec2::new(4.0, 2.0)), Some((24, 12)));
        assert_eq!(cell_of(Vec2::new(-0.1, 0.0)), None);
        assert_eq!(cell_of(Vec2::new(16.0, 0.0)), None);
        let c = cell_center(24, 12);
        assert!((c.x - 3.75).abs() < 1e-12);
        assert!((c.y - 1.75).abs() < 1e-12);
    }

    #[test]
    fn yaw_bins_are_thirty_degrees() {
        let d = std::f64::consts::PI / 180.0;
        let (b, off) = yaw_to_bin(15.0 * d);
        assert_eq!(b, 0);
        assert!(off.abs() < 1e-12);
        let (b, off) = yaw_to_bin(29.9 * d);
        assert_eq!(b, 0);
        assert!(off > 0.0);
        let (b, _) = yaw_to_bin(30.1 * d);
        assert_eq!(b, 1);
        // Negative yaw wraps into the top bins.
        let (b, _) = yaw_to_bin(-15.0 * d);
        assert_eq!(b, 11);
        for k in 0..720 {
            let yaw = (k as f64 * 0.5 - 180.0) * d;
            let (bin, off) = yaw_to_bin(yaw);
            assert!(off >= -15.0 * d - 1e-12 && off < 15.0 * d + 1e-12);
            assert!((wrap_angle(bin_to_yaw(bin, off) - yaw)).abs() < 1e-9);
        }
    }

    #[test]
    fn peak_cells_are_exactly_one() {
        let boxes = [
            DetBox { center: Vec2::new(5.0, 1.0), half: Vec2::new(1.8, 0.8), yaw: 0.3 },
            DetBox { center: Vec2::new(12.0, -4.0), half: Vec2::new(1.8, 0.8), yaw: -1.2 },
        ];
        let t = encode(&boxes);
        let peaks: Vec<usize> = t.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        assert_eq!(peaks.len(), 2);
        for i in peaks {
            assert_eq!(t.heat[i], 1.0);
        }
        // Gaussian decays away from peaks and never exceeds one.
        for &h in &t.heat {
            assert!((0.0..=1.0).contains(&h));
        }
    }

    #[test]
    fn encode_decode_round_trip_is_tight() {
        let boxes = [
            DetBox { center: Vec2::new(4.1, 2.3), half: Vec2::new(1.8, 0.8), yaw: 0.7 },
            DetBox { center: Vec2::new(9.6, -3.2), half: Vec2::new(1.6, 0.7), yaw: -2.4 },
            DetBox { center: Vec2::new(14.2, 6.1), half: Vec2::new(2.0, 0.9), yaw: 3.0 },
        ];
        let t = encode(&boxes);
        let logits = bins_as_logits(&t.bin);
        let got = decode(&t.heat, &t.reg, &logits, 0.99, 8);
        assert_eq!(got.len(), boxes.len());
        for b in &boxes {
            let hit = got
                .iter()
                .map(|(g, _)| g)
                .min_by(|a, c| {
                    a.center
                        .dist(b.center)
                        .partial_cmp(&c.center.dist(b.center))
                        .unwrap()
                })
                .unwrap();
            assert!(hit.center.dist(b.center) < 1e-9);
            assert!((hit.half.x - b.half.x).abs() < 1e-9);
            assert!((hit.half.y - b.half.y).abs() < 1e-9);
            assert!(wrap_angle(hit.yaw - b.yaw).abs() < 1e-9);
        }
    }

    #[test]
    fn decode_respects_threshold_and_k() {
        let boxes = [DetBox { center: Vec2::new(8.0, 0.0), half: Vec2::new(1.8, 0.8), yaw: 0.0 }];
        let t = encode(&boxes);
        let logits = bins_as_logits(&t.bin);
        assert_eq!(decode(&t.heat, &t.reg, &logits, 1.1, 8).len(), 0);
        let many = [
            DetBox { center: Vec2::new(4.0, 2.0), half: Vec2::new(1.8, 0.8), yaw: 0.0 },
            DetBox { center: Vec2::new(8.0, -2.0), half: Vec2::new(1.8, 0.8), yaw: 0.0 },
            DetBox { center: Vec2::new(12.0, 4.0), half: Vec2::new(1.8, 0.8), yaw: 0.0 },
        ];
        let t = encode(&many);
        let logits = bins_as_logits(&t.bin);
        assert_eq!(decode(&t.heat, &t.reg, &logits, 0.99, 2).len(), 2);
    }
}
