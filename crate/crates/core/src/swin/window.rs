//! Token-grid rearrangements for windowed attention. Each rearrangement is an
//! index map consumed by [`Tape::reindex`], so maps can be composed and the
//! whole pad → shift → partition sequence costs a single gather.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var, ZERO_FILL};

/// Magnitude of the additive mask between tokens of different regions.
pub const MASK_LARGE: f64 = 1e9;

/// `[h, w, d]` → `[hp, wp, d]`, zero rows/columns appended right and bottom.
pub fn pad_map(h: usize, w: usize, hp: usize, wp: usize, d: usize) -> Vec<usize> {
    let mut map = Vec::with_capacity(hp * wp * d);
    for y in 0..hp {
        for x in 0..wp {
            for c in 0..d {
                map.push(if y < h && x < w { (y * w + x) * d + c } else { ZERO_FILL });
            }
        }
    }
    map
}

/// `[hp, wp, d]` → `[h, w, d]`, keeping the top-left corner.
pub fn crop_map(hp: usize, wp: usize, h: usize, w: usize, d: usize) -> Vec<usize> {
    debug_assert!(h <= hp && w <= wp);
    let mut map = Vec::with_capacity(h * w * d);
    for y in 0..h {
        for x in 0..w {
            for c in 0..d {
                map.push((y * wp + x) * d + c);
            }
        }
    }
    map
}

/// Cyclic shift of an `[h, w, d]` grid: `out[y, x] = in[y − dy, x − dx]`
/// modulo the extents.
pub fn roll_map(h: usize, w: usize, d: usize, dy: isize, dx: isize) -> Vec<usize> {
    let mut map = Vec::with_capacity(h * w * d);
    for y in 0..h {
        let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
        for x in 0..w {
            let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
            for c in 0..d {
                map.push((sy * w + sx) * d + c);
            }
        }
    }
    map
}

/// `[h, w, d]` → `[nW, ws², d]`: windows in row-major order, tokens
/// row-major within each window.
pub fn partition_map(h: usize, w: usize, ws: usize, d: usize) -> Vec<usize> {
    let (nh, nw) = (h / ws, w / ws);
    let mut map = Vec::with_capacity(h * w * d);
    for wy in 0..nh {
        for wx in 0..nw {
            for ty in 0..ws {
                for tx in 0..ws {
                    let (y, x) = (wy * ws + ty, wx * ws + tx);
                    for c in 0..d {
                        map.push((y * w + x) * d + c);
                    }
                }
            }
        }
    }
    map
}

/// Inverse of [`partition_map`].
pub fn reverse_map(h: usize, w: usize, ws: usize, d: usize) -> Vec<usize> {
    let fwd = partition_map(h, w, ws, d);
    let mut inv = vec![0; fwd.len()];
    for (k, &src) in fwd.iter().enumerate() {
        inv[src] = k;
    }
    inv
}

/// Map equivalent to gathering with `first` and then with `then`.
pub fn compose(first: &[usize], then: &[usize]) -> Vec<usize> {
    then.iter().map(|&k| if k == ZERO_FILL { ZERO_FILL } else { first[k] }).collect()
}

fn grid(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w, d] => Ok((h, w, d)),
        _ => Err(Error::shape(op, format!("expected [H,W,D], got {shape:?}"))),
    }
}

/// Splits an `[H, W, D]` grid into `[nW, ws², D]` windows.
pub fn partition(tape: &mut Tape, x: Var, ws: usize) -> Result<Var> {
    let (h, w, d) = grid("window_partition", tape.shape(x))?;
    if ws == 0 || h % ws != 0 || w % ws != 0 {
        return Err(Error::IndivisibleInput(format!("{h}×{w} grid with window {ws}")));
    }
    let shape = [(h / ws) * (w / ws), ws * ws, d];
    tape.reindex(x, &shape, partition_map(h, w, ws, d).into())
}

/// Reassembles `[nW, ws², D]` windows into an `[H, W, D]` grid.
pub fn reverse(tape: &mut Tape, windows: Var, h: usize, w: usize) -> Result<Var> {
    let (nw, t, d) = match *tape.shape(windows) {
        [nw, t, d] => (nw, t, d),
        ref s => return Err(Error::shape("window_reverse", format!("expected [nW,T,D], got {s:?}"))),
    };
    let ws = (t as f64).sqrt().round() as usize;
    if ws * ws != t || nw * t != h * w || h % ws != 0 || w % ws != 0 {
        return Err(Error::shape("window_reverse", format!("{nw} windows of {t} tokens for a {h}×{w} grid")));
    }
    tape.reindex(windows, &[h, w, d], reverse_map(h, w, ws, d).into())
}

pub fn window_partition(x: &Tensor, ws: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = partition(&mut tape, v, ws)?;
    Ok(tape.value(out).clone())
}

pub fn window_reverse(windows: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(windows.clone());
    let out = reverse(&mut tape, v, h, w)?;
    Ok(tape.value(out).clone())
}

fn check_shift(ws: usize, shift: usize) -> Result<()> {
    if shift != 0 && shift != ws / 2 {
        return Err(Error::InvalidParam(format!("shift {shift} must be 0 or {} for window {ws}", ws / 2)));
    }
    Ok(())
}

/// Region label of every position of the shifted `[hp, wp]` grid. Tokens
/// wrapped around by the cyclic shift land in regions of their own.
pub fn region_ids(hp: usize, wp: usize, ws: usize, shift: usize) -> Vec<usize> {
    let band = |i: usize, n: usize| -> usize {
        if shift == 0 || i < n.saturating_sub(ws) {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let mut ids = Vec::with_capacity(hp * wp);
    for y in 0..hp {
        for x in 0..wp {
            ids.push(band(y, hp) * 3 + band(x, wp));
        }
    }
    ids
}

/// Additive attention mask `[nW, T, T]` for windows of a padded `[hp, wp]`
/// grid after a cyclic shift of `(−shift, −shift)`: `−1e9` between tokens
/// of different regions, 0 elsewhere.
pub fn build_shift_mask(hp: usize, wp: usize, ws: usize, shift: usize) -> Result<Tensor> {
    check_shift(ws, shift)?;
    if ws == 0 || hp % ws != 0 || wp % ws != 0 {
        return Err(Error::IndivisibleInput(format!("{hp}×{wp} grid with window {ws}")));
    }
    let ids = region_ids(hp, wp, ws, shift);
    let win = partition_map(hp, wp, ws, 1);
    let (nw, t) = (win.len() / (ws * ws), ws * ws);
    let mut data = vec![0.0; nw * t * t];
    for n in 0..nw {
        let tok = &win[n * t..(n + 1) * t];
        for i in 0..t {
            for j in 0..t {
                if ids[tok[i]] != ids[tok[j]] {
                    data[(n * t + i) * t + j] = -MASK_LARGE;
                }
            }
        }
    }
    Tensor::new([nw, t, t], data)
}

/// Geometry of one attention layer over an `[h, w]` token grid.
#[derive(Clone, Debug)]
pub struct WindowLayout {
    pub window_size: usize,
    pub shift: usize,
    pub h: usize,
    pub w: usize,
    pub hp: usize,
    pub wp: usize,
    /// `[nW, T, T]`, absent when the shift is zero.
    pub mask: Option<Tensor>,
}

impl WindowLayout {
    pub fn new(h: usize, w: usize, window_size: usize, shift: usize) -> Result<Self> {
        if window_size == 0 {
            return Err(Error::InvalidParam("window_size must be positive".into()));
        }
        check_shift(window_size, shift)?;
        let hp = h.div_ceil(window_size) * window_size;
        let wp = w.div_ceil(window_size) * window_size;
        let mask = (shift > 0).then(|| build_shift_mask(hp, wp, window_size, shift)).transpose()?;
        Ok(WindowLayout { window_size, shift, h, w, hp, wp, mask })
    }

    pub fn num_windows(&self) -> usize {
        (self.hp / self.window_size) * (self.wp / self.window_size)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window_size * self.window_size
    }

    /// `[h·w, d]` tokens → `[nW, T, d]` windows of the padded, shifted grid.
    pub fn to_windows(&self, tape: &mut Tape, x: Var, d: usize) -> Result<Var> {
        let s = self.shift as isize;
        let mut map = pad_map(self.h, self.w, self.hp, self.wp, d);
        if self.shift > 0 {
            map = compose(&map, &roll_map(self.hp, self.wp, d, -s, -s));
        }
        map = compose(&map, &partition_map(self.hp, self.wp, self.window_size, d));
        let shape = [self.num_windows(), self.tokens_per_window(), d];
        tape.reindex(x, &shape, Arc::from(map))
    }

    /// Inverse of [`WindowLayout::to_windows`], cropping the padding.
    pub fn from_windows(&self, tape: &mut Tape, windows: Var, d: usize) -> Result<Var> {
        let s = self.shift as isize;
        let mut map = reverse_map(self.hp, self.wp, self.window_size, d);
        if self.shift > 0 {
            map = compose(&map, &roll_map(self.hp, self.wp, d, s, s));
        }
        map = compose(&map, &crop_map(self.hp, self.wp, self.h, self.w, d));
        tape.reindex(windows, &[self.h * self.w, d], Arc::from(map))
    }
}
