//! Adaptive Gauss-Kronrod (G7/K15) quadrature for vector-valued integrands.
//!
//! The interval with the largest error estimate (max-norm over components) is
//! bisected until the summed estimate drops below `max(abs_tol, rel_tol * |I|)`.

#![allow(clippy::excessive_precision)]

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Result, SeuError};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

// Gauss weights for the odd-indexed Kronrod nodes (1, 3, 5) and the centre.
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

#[derive(Debug, Clone, Copy)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
    /// Equal-width pieces the range is split into before adapting.
    pub initial_pieces: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            rel_tol: 1e-12,
            max_intervals: 20_000,
            initial_pieces: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuadResult {
    pub value: Vec<f64>,
    /// Summed max-norm error estimate.
    pub error: f64,
    pub intervals: usize,
    pub evaluations: usize,
}

struct Piece {
    a: f64,
    b: f64,
    value: Vec<f64>,
    error: f64,
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.error.total_cmp(&other.error) == Ordering::Equal
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Piece {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error
            .total_cmp(&other.error)
            .then_with(|| other.a.total_cmp(&self.a))
    }
}

fn kronrod<F>(f: &mut F, a: f64, b: f64, evals: &mut usize) -> Piece
where
    F: FnMut(f64) -> Vec<f64>,
{
    let centre = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(centre);
    let dim = fc.len();
    let mut gauss: Vec<f64> = fc.iter().map(|v| v * WG[3]).collect();
    let mut kron: Vec<f64> = fc.iter().map(|v| v * WGK[7]).collect();
    *evals += 1;
    for j in 0..7 {
        let dx = half * XGK[j];
        let f1 = f(centre - dx);
        let f2 = f(centre + dx);
        *evals += 2;
        for i in 0..dim {
            let s = f1[i] + f2[i];
            kron[i] += WGK[j] * s;
            if j % 2 == 1 {
                gauss[i] += WG[j / 2] * s;
            }
        }
    }
    let mut error: f64 = 0.0;
    let value: Vec<f64> = kron.iter().map(|k| k * half).collect();
    for i in 0..dim {
        error = error.max(((kron[i] - gauss[i]) * half).abs());
    }
    Piece { a, b, value, error }
}

/// Integrates `f` over `[a, b]`.
pub fn integrate<F>(mut f: F, a: f64, b: f64, opts: QuadOptions) -> Result<QuadResult>
where
    F: FnMut(f64) -> Vec<f64>,
{
    if !(b > a) {
        return Err(SeuError::NumericalFailure(format!(
            "empty integration range [{a}, {b}]"
        )));
    }
    let pieces = opts.initial_pieces.max(1);
    let mut evaluations = 0;
    let mut heap = BinaryHeap::new();
    let width = (b - a) / pieces as f64;
    for i in 0..pieces {
        let lo = a + width * i as f64;
        let hi = if i + 1 == pieces { b } else { lo + width };
        heap.push(kronrod(&mut f, lo, hi, &mut evaluations));
    }

    loop {
        let (total, error) = summarize(&heap);
        let scale = total.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tol = opts.abs_tol.max(opts.rel_tol * scale);
        if error <= tol {
            return Ok(QuadResult {
                value: total,
                error,
                intervals: heap.len(),
                evaluations,
            });
        }
        if heap.len() >= opts.max_intervals {
            return Err(SeuError::NumericalFailure(format!(
                "quadrature did not converge: error estimate {error:.3e} > tolerance {tol:.3e} after {} intervals",
                heap.len()
            )));
        }
        let worst = heap.pop().expect("non-empty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            return Err(SeuError::NumericalFailure(format!(
                "interval [{}, {}] cannot be bisected further",
                worst.a, worst.b
            )));
        }
        heap.push(kronrod(&mut f, worst.a, mid, &mut evaluations));
        heap.push(kronrod(&mut f, mid, worst.b, &mut evaluations));
    }
}

// Sums in left-endpoint order so the result does not depend on heap layout.
fn summarize(heap: &BinaryHeap<Piece>) -> (Vec<f64>, f64) {
    let mut parts: Vec<&Piece> = heap.iter().collect();
    parts.sort_by(|x, y| x.a.total_cmp(&y.a));
    let dim = parts.first().map_or(0, |p| p.value.len());
    let mut total = vec![0.0; dim];
    let mut error = 0.0;
    for p in parts {
        for (t, v) in total.iter_mut().zip(&p.value) {
            *t += v;
        }
        error += p.error;
    }
    (total, error)
}
