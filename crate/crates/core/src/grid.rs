//! Uniform 1-D grids, grid functions with explicit far-field extensions,
//! and their CSV form.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformGrid {
    pub x0: f64,
    pub h: f64,
    pub len: usize,
}

impl UniformGrid {
    pub fn new(x0: f64, h: f64, len: usize) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() || !x0.is_finite() || len < 2 {
            return Err(Error::Validation(format!("bad grid x0={x0} h={h} len={len}")));
        }
        Ok(UniformGrid { x0, h, len })
    }

    /// Nodes -half_width .. half_width; the half width must be a multiple of h.
    pub fn symmetric(half_width: f64, h: f64) -> Result<Self> {
        let m = (half_width / h).round();
        if (m * h - half_width).abs() > 1e-9 * half_width.max(h) || m < 1.0 {
            return Err(Error::Validation(format!("half width {half_width} is not a positive multiple of h = {h}")));
        }
        let m = m as usize;
        UniformGrid::new(-(m as f64) * h, h, 2 * m + 1)
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x0 + i as f64 * self.h
    }

    pub fn x_end(&self) -> f64 {
        self.x(self.len - 1)
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.x(i)).collect()
    }

    /// Index of the node at x, if x is a node up to 1e-9 h.
    pub fn index_of(&self, x: f64) -> Option<usize> {
        let t = (x - self.x0) / self.h;
        let k = t.round();
        if (t - k).abs() < 1e-9 && k >= 0.0 && (k as usize) < self.len {
            Some(k as usize)
        } else {
            None
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.x0 - 1e-12 * self.h && x <= self.x_end() + 1e-12 * self.h
    }
}

/// Tabulated exterior values as a function of |x| on one side, with a
/// power-law continuation v_end (r / z_end)^tail_beta beyond the table.
#[derive(Debug, Clone, PartialEq)]
pub struct FarTable {
    pub z: Vec<f64>,
    pub values: Vec<f64>,
    pub tail_beta: f64,
}

impl FarTable {
    pub fn new(z: Vec<f64>, values: Vec<f64>, tail_beta: f64) -> Result<Self> {
        if z.len() < 2 || z.len() != values.len() || z.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("far table needs increasing abscissae".into()));
        }
        if values.iter().any(|v| !v.is_finite()) || !tail_beta.is_finite() {
            return Err(Error::Validation("far table values must be finite".into()));
        }
        Ok(FarTable { z, values, tail_beta })
    }

    pub fn z_end(&self) -> f64 {
        *self.z.last().unwrap()
    }

    pub fn value(&self, r: f64) -> f64 {
        let n = self.z.len();
        if r >= self.z[n - 1] {
            let v = self.values[n - 1];
            return if self.tail_beta == 0.0 { v } else { v * (r / self.z[n - 1]).powf(self.tail_beta) };
        }
        crate::problem::interp_linear(&self.z, &self.values, r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FarFieldModel {
    /// Zero outside the grid.
    Zero,
    Constant(f64),
    /// offset + a_right x^beta for x beyond the right end and
    /// offset + a_left |x|^beta beyond the left end; `anchor` records the
    /// radius from which the law was fitted.
    PowerGrowth {
        offset: f64,
        a_left: f64,
        a_right: f64,
        beta: f64,
        anchor: f64,
    },
    /// Periodic continuation of the grid values; the grid must span whole periods.
    Periodic {
        period: f64,
    },
    /// Tabulated continuation per side.
    Tabulated {
        left: FarTable,
        right: FarTable,
    },
}

impl FarFieldModel {
    pub fn power(a: f64, beta: f64, anchor: f64) -> Self {
        FarFieldModel::PowerGrowth { offset: 0.0, a_left: a, a_right: a, beta, anchor }
    }

    /// Growth exponent of the model (0 for bounded models).
    pub fn growth(&self) -> f64 {
        match self {
            FarFieldModel::PowerGrowth { beta, .. } => *beta,
            FarFieldModel::Tabulated { left, right } => left.tail_beta.max(right.tail_beta),
            _ => 0.0,
        }
    }

    /// Adds a constant to the represented exterior.
    pub fn shifted(&self, c: f64) -> Self {
        match self {
            FarFieldModel::Zero => FarFieldModel::Constant(c),
            FarFieldModel::Constant(v) => FarFieldModel::Constant(v + c),
            FarFieldModel::PowerGrowth { offset, a_left, a_right, beta, anchor } => FarFieldModel::PowerGrowth {
                offset: offset + c,
                a_left: *a_left,
                a_right: *a_right,
                beta: *beta,
                anchor: *anchor,
            },
            FarFieldModel::Periodic { period } => FarFieldModel::Periodic { period: *period },
            FarFieldModel::Tabulated { left, right } => {
                let sh = |t: &FarTable| FarTable {
                    z: t.z.clone(),
                    values: t.values.iter().map(|v| v + c).collect(),
                    // the continuation law only holds for the shifted tail when it is flat
                    tail_beta: t.tail_beta,
                };
                FarFieldModel::Tabulated { left: sh(left), right: sh(right) }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub grid: UniformGrid,
    pub values: Vec<f64>,
    pub far: FarFieldModel,
}

impl GridFunction {
    pub fn new(grid: UniformGrid, values: Vec<f64>, far: FarFieldModel) -> Result<Self> {
        if values.len() != grid.len {
            return Err(Error::Validation("value count differs from grid length".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("grid function values must be finite".into()));
        }
        if let FarFieldModel::Periodic { period } = far {
            periodic_nodes(&grid, period)?;
        }
        Ok(GridFunction { grid, values, far })
    }

    pub fn from_fn<F: Fn(f64) -> f64>(grid: UniformGrid, far: FarFieldModel, f: F) -> Result<Self> {
        let values = (0..grid.len).map(|i| f(grid.x(i))).collect();
        GridFunction::new(grid, values, far)
    }

    pub fn h(&self) -> f64 {
        self.grid.h
    }

    /// Piecewise-cubic interpolation inside the grid (exact on cubics),
    /// far-field model outside.
    pub fn eval(&self, x: f64) -> f64 {
        if self.grid.contains(x) {
            self.interp(x)
        } else {
            self.far_value(x)
        }
    }

    fn interp(&self, x: f64) -> f64 {
        let g = &self.grid;
        let n = g.len;
        if n < 4 {
            let t = ((x - g.x0) / g.h).clamp(0.0, (n - 1) as f64);
            let k = (t.floor() as usize).min(n - 2);
            let w = t - k as f64;
            return self.values[k] * (1.0 - w) + self.values[k + 1] * w;
        }
        let t = (x - g.x0) / g.h;
        let k = (t.floor().max(0.0) as usize).min(n - 2);
        let start = if k == 0 {
            0
        } else if k >= n - 2 {
            n - 4
        } else {
            k - 1
        };
        let mut acc = 0.0;
        for a in 0..4 {
            let xa = (start + a) as f64;
            let mut l = 1.0;
            for b in 0..4 {
                if a != b {
                    let xb = (start + b) as f64;
                    l *= (t - xb) / (xa - xb);
                }
            }
            acc += l * self.values[start + a];
        }
        acc
    }

    /// Exterior value at a point outside the grid.
    pub fn far_value(&self, x: f64) -> f64 {
        match &self.far {
            FarFieldModel::Zero => 0.0,
            FarFieldModel::Constant(v) => *v,
            FarFieldModel::PowerGrowth { offset, a_left, a_right, beta, .. } => {
                let a = if x >= 0.0 { a_right } else { a_left };
                offset + a * x.abs().powf(*beta)
            }
            FarFieldModel::Periodic { period } => {
                let g = &self.grid;
                let span = g.x_end() - g.x0;
                let mut y = (x - g.x0).rem_euclid(*period);
                // keep y inside the grid span
                while y > span {
                    y -= period;
                }
                self.interp(g.x0 + y)
            }
            FarFieldModel::Tabulated { left, right } => {
                if x >= 0.0 {
                    right.value(x)
                } else {
                    left.value(-x)
                }
            }
        }
    }

    /// Node-wise linear combination a*self + b*other on the same grid; the far
    /// field of the result is taken from `self` when both agree, else the
    /// combination of the two when representable.
    pub fn combine(&self, a: f64, other: &GridFunction, b: f64) -> Result<GridFunction> {
        if self.grid != other.grid {
            return Err(Error::Precondition("grid functions live on different grids".into()));
        }
        let far = combine_far(&self.far, a, &other.far, b)?;
        let values = self.values.iter().zip(&other.values).map(|(u, v)| a * u + b * v).collect();
        GridFunction::new(self.grid, values, far)
    }

    /// Adds a constant to the function and its exterior.
    pub fn add_constant(&self, c: f64) -> GridFunction {
        GridFunction { grid: self.grid, values: self.values.iter().map(|v| v + c).collect(), far: self.far.shifted(c) }
    }

    /// CSV with a header block describing the grid and far field. Values are
    /// written with 17 significant digits so the round trip is bit-exact.
    pub fn to_csv(&self) -> String {
        self.to_csv_with_meta(&[])
    }

    pub fn to_csv_with_meta(&self, meta: &[(&str, String)]) -> String {
        let mut s = String::new();
        s.push_str("# gridfunction v1\n");
        for (k, v) in meta {
            let _ = writeln!(s, "# meta {k}={v}");
        }
        let _ = writeln!(s, "# grid x0={} h={} len={}", e17(self.grid.x0), e17(self.grid.h), self.grid.len);
        match &self.far {
            FarFieldModel::Zero => s.push_str("# farfield kind=Zero\n"),
            FarFieldModel::Constant(v) => {
                let _ = writeln!(s, "# farfield kind=Constant value={}", e17(*v));
            }
            FarFieldModel::PowerGrowth { offset, a_left, a_right, beta, anchor } => {
                let _ = writeln!(
                    s,
                    "# farfield kind=PowerGrowth offset={} a_left={} a_right={} beta={} anchor={}",
                    e17(*offset),
                    e17(*a_left),
                    e17(*a_right),
                    e17(*beta),
                    e17(*anchor)
                );
            }
            FarFieldModel::Periodic { period } => {
                let _ = writeln!(s, "# farfield kind=Periodic period={}", e17(*period));
            }
            FarFieldModel::Tabulated { left, right } => {
                s.push_str("# farfield kind=Tabulated\n");
                for (name, t) in [("left", left), ("right", right)] {
                    let _ = write!(s, "# fartable side={name} tail_beta={} points=", e17(t.tail_beta));
                    for (k, (z, v)) in t.z.iter().zip(&t.values).enumerate() {
                        if k > 0 {
                            s.push(' ');
                        }
                        let _ = write!(s, "{}:{}", e17(*z), e17(*v));
                    }
                    s.push('\n');
                }
            }
        }
        s.push_str("x,value\n");
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(s, "{},{}", e17(self.grid.x(i)), e17(*v));
        }
        s
    }

    /// Parses the CSV form; returns the function and its metadata pairs.
    pub fn from_csv(text: &str) -> Result<(GridFunction, Vec<(String, String)>)> {
        let mut meta = Vec::new();
        let mut grid = None;
        let mut kind = None::<Vec<(String, String)>>;
        let mut tables: Vec<(String, FarTable)> = Vec::new();
        let mut values = Vec::new();
        let mut header_seen = false;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(m) = rest.strip_prefix("meta ") {
                    let (k, v) = m.split_once('=').ok_or_else(|| perr("bad meta line"))?;
                    meta.push((k.to_string(), v.to_string()));
                } else if let Some(g) = rest.strip_prefix("grid ") {
                    let kv = parse_kv(g)?;
                    let x0 = num(&kv, "x0")?;
                    let h = num(&kv, "h")?;
                    let len = get(&kv, "len")?.parse::<usize>().map_err(|_| perr("bad len"))?;
                    grid = Some(UniformGrid::new(x0, h, len)?);
                } else if let Some(f) = rest.strip_prefix("farfield ") {
                    kind = Some(parse_kv(f)?);
                } else if let Some(t) = rest.strip_prefix("fartable ") {
                    let (head, pts) = t.split_once("points=").ok_or_else(|| perr("bad far table"))?;
                    let kv = parse_kv(head)?;
                    let side = get(&kv, "side")?.to_string();
                    let tb = num(&kv, "tail_beta")?;
                    let mut z = Vec::new();
                    let mut v = Vec::new();
                    for p in pts.split_whitespace() {
                        let (a, b) = p.split_once(':').ok_or_else(|| perr("bad table point"))?;
                        z.push(parse_f(a)?);
                        v.push(parse_f(b)?);
                    }
                    tables.push((side, FarTable::new(z, v, tb)?));
                }
                continue;
            }
            if !header_seen {
                header_seen = true;
                if line.starts_with("x,") {
                    continue;
                }
            }
            let (_, v) = line.split_once(',').ok_or_else(|| perr("bad data row"))?;
            values.push(parse_f(v.trim())?);
        }
        let grid = grid.ok_or_else(|| perr("missing grid header"))?;
        let kv = kind.ok_or_else(|| perr("missing farfield header"))?;
        let far = match get(&kv, "kind")? {
            "Zero" => FarFieldModel::Zero,
            "Constant" => FarFieldModel::Constant(num(&kv, "value")?),
            "PowerGrowth" => FarFieldModel::PowerGrowth {
                offset: num(&kv, "offset")?,
                a_left: num(&kv, "a_left")?,
                a_right: num(&kv, "a_right")?,
                beta: num(&kv, "beta")?,
                anchor: num(&kv, "anchor")?,
            },
            "Periodic" => FarFieldModel::Periodic { period: num(&kv, "period")? },
            "Tabulated" => {
                let take = |name: &str| {
                    tables
                        .iter()
                        .find(|(s, _)| s == name)
                        .map(|(_, t)| t.clone())
                        .ok_or_else(|| perr("missing far table"))
                };
                FarFieldModel::Tabulated { left: take("left")?, right: take("right")? }
            }
            other => return Err(perr(&format!("unknown far field kind {other}"))),
        };
        Ok((GridFunction::new(grid, values, far)?, meta))
    }
}

fn combine_far(a_far: &FarFieldModel, a: f64, b_far: &FarFieldModel, b: f64) -> Result<FarFieldModel> {
    use FarFieldModel::*;
    Ok(match (a_far, b_far) {
        (Zero, Zero) => Zero,
        (Zero, Constant(v)) => Constant(b * v),
        (Constant(v), Zero) => Constant(a * v),
        (Constant(u), Constant(v)) => Constant(a * u + b * v),
        (Periodic { period: p }, Periodic { period: q }) if p == q => Periodic { period: *p },
        (
            PowerGrowth { offset: o1, a_left: l1, a_right: r1, beta: b1, anchor },
            PowerGrowth { offset: o2, a_left: l2, a_right: r2, beta: b2, .. },
        ) if b1 == b2 => PowerGrowth {
            offset: a * o1 + b * o2,
            a_left: a * l1 + b * l2,
            a_right: a * r1 + b * r2,
            beta: *b1,
            anchor: *anchor,
        },
        (Tabulated { left: l1, right: r1 }, Tabulated { left: l2, right: r2 })
            if l1.z == l2.z && r1.z == r2.z && l1.tail_beta == l2.tail_beta && r1.tail_beta == r2.tail_beta =>
        {
            let mix = |t1: &FarTable, t2: &FarTable| FarTable {
                z: t1.z.clone(),
                values: t1.values.iter().zip(&t2.values).map(|(u, v)| a * u + b * v).collect(),
                tail_beta: t1.tail_beta,
            };
            Tabulated { left: mix(l1, l2), right: mix(r1, r2) }
        }
        _ => return Err(Error::Precondition("far-field models cannot be combined".into())),
    })
}

/// Number of grid steps per period, checking the grid spans whole periods.
pub fn periodic_nodes(grid: &UniformGrid, period: f64) -> Result<usize> {
    let p = (period / grid.h).round();
    if !(period > 0.0) || (p * grid.h - period).abs() > 1e-9 * period || p < 4.0 {
        return Err(Error::Validation(format!("period {period} is not a multiple (>= 4) of the spacing {}", grid.h)));
    }
    let p = p as usize;
    if grid.len < p + 1 {
        return Err(Error::Validation("grid shorter than one period".into()));
    }
    Ok(p)
}

/// 17 significant digits, enough for a bit-exact round trip.
pub fn e17(v: f64) -> String {
    format!("{v:.16e}")
}

fn perr(msg: &str) -> Error {
    Error::Parse(msg.to_string())
}

fn parse_f(s: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| perr(&format!("bad number {s}")))
}

fn parse_kv(s: &str) -> Result<Vec<(String, String)>> {
    s.split_whitespace()
        .map(|t| {
            t.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| perr(&format!("bad key=value token {t}")))
        })
        .collect()
}

fn get<'a>(kv: &'a [(String, String)], k: &str) -> Result<&'a str> {
    kv.iter().find(|(a, _)| a == k).map(|(_, v)| v.as_str()).ok_or_else(|| perr(&format!("missing key {k}")))
}

fn num(kv: &[(String, String)], k: &str) -> Result<f64> {
    parse_f(get(kv, k)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_interpolation_is_exact_on_cubics() {
        let g = UniformGrid::symmetric(3.0, 0.25).unwrap();
        let f = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x - 0.3 * x * x * x;
        let gf = GridFunction::from_fn(g, FarFieldModel::Zero, f).unwrap();
        for k in 0..200 {
            let x = -3.0 + 6.0 * k as f64 / 199.0;
            assert!((gf.eval(x) - f(x)).abs() < 1e-11);
        }
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let g = UniformGrid::symmetric(2.0, 0.1).unwrap();
        let far = FarFieldModel::PowerGrowth {
            offset: 0.1,
            a_left: 1.0 / 3.0,
            a_right: std::f64::consts::PI,
            beta: 1.375,
            anchor: 2.0,
        };
        let gf = GridFunction::from_fn(g, far, |x| (x * 1.7).sin() / 3.0).unwrap();
        let (back, meta) = GridFunction::from_csv(&gf.to_csv_with_meta(&[("alpha", "0.5".into())])).unwrap();
        assert_eq!(back, gf);
        assert_eq!(meta, vec![("alpha".to_string(), "0.5".to_string())]);

        let t = FarTable::new(vec![2.0, 3.0, 10.0], vec![0.1, 0.2, 1.0 / 7.0], 0.5).unwrap();
        let gf2 =
            GridFunction::new(g, gf.values.clone(), FarFieldModel::Tabulated { left: t.clone(), right: t }).unwrap();
        assert_eq!(GridFunction::from_csv(&gf2.to_csv()).unwrap().0, gf2);
    }

    #[test]
    fn periodic_far_value_wraps() {
        let p = std::f64::consts::TAU;
        let h = p / 64.0;
        let g = UniformGrid::new(-2.0 * p, h, 257).unwrap();
        let gf = GridFunction::from_fn(g, FarFieldModel::Periodic { period: p }, f64::cos).unwrap();
        for x in [20.0, -33.3, 100.1] {
            let e = (gf.eval(x) - f64::cos(x)).abs();
            assert!(e < 2e-5, "{x} {e}");
        }
    }
}
